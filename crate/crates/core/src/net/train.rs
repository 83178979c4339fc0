//! Self-supervised training of the detail-fusion network, and inference.
//!
//! Each step withholds one frame of a sequence as the reference: the others
//! are encoded, splatted onto the x2 grid with classically estimated flows,
//! pooled, and decoded into an HR detail whose subsampling must match the
//! reference detail (L1, two-pixel border excluded). Grid shifting adds a
//! random half-pixel offset to the flows and compensates by sampling the
//! shifted subsampling phase, so every HR phase receives gradient. The
//! motion-estimation loss is computed and logged as a diagnostic; flows come
//! from the deterministic registration module and are not optimized here.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::base_detail::{decompose, fuse_bases, DETAIL_SIGMA};
use crate::container::{load_sequence, ContainerError, LRSequence};
use crate::image::{ImageGrid, Kernel};
use crate::net::adam::{adam_step, AdamConfig, AdamState};
use crate::net::model::{
    decoder_forward, encoder_forward, init_params, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, NetConfig, ParamNodes, Params,
};
use crate::net::tape::{NodeId, Tape};
use crate::net::tensor::Tensor;
use crate::register::{estimate_translation, warping_loss, FlowField, RegisterError};
use crate::rng::{seed_rng, SeedRng};

/// Super-resolution factor of the whole pipeline.
pub const UPSCALE: usize = 2;

/// Pixels excluded from the loss at each border of the LR residual.
pub const LOSS_BORDER: usize = 2;

/// TV weight inside the diagnostic motion loss.
pub const ME_LOSS_LAMBDA1: f64 = 0.003;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("reference leak: reference frame listed among fusion inputs during training")]
    ReferenceLeak,
    #[error("non-finite loss at step {step}; recent losses: {recent:?}")]
    NonFiniteLoss { step: u64, recent: Vec<f64> },
    #[error("sequence is {got}x{got_h}, smaller than the {crop} crop")]
    CropTooLarge { got: usize, got_h: usize, crop: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Training hyperparameters. The learning-rate schedule scales by
/// `lr_decay` every `decay_every_epochs` (a third of the run when 0).
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the motion loss in the reported total (the motion loss is
    /// logged, not optimized).
    pub lambda2: f64,
    /// Sequences averaged per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub decay_every_epochs: usize,
    /// LR crop size used for training samples.
    pub crop: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub seed: u64,
    /// Also write a checkpoint every this many epochs (0 = end only).
    pub checkpoint_every_epochs: usize,
    /// Standard deviation of the loss convolution kernel; `None` keeps the
    /// identity kernel, matching the blur-free synthetic generator.
    pub loss_kernel_sigma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda2: 3.0,
            batch: 1,
            epochs: 10,
            lr_decay: 0.3,
            decay_every_epochs: 0,
            crop: 64,
            frames_min: 4,
            frames_max: 14,
            seed: 0,
            checkpoint_every_epochs: 0,
            loss_kernel_sigma: None,
        }
    }
}

/// One frame entering the fusion: its normalized detail, the raw acquired
/// frame, and its flow toward the reference.
#[derive(Clone, Debug)]
pub struct FusionFrame {
    pub detail: ImageGrid,
    pub raw: ImageGrid,
    pub flow: FlowField,
}

/// Draw the half-pixel grid-shift components, each 0 or 1.
pub fn sample_grid_shift(rng: &mut SeedRng) -> (u8, u8) {
    (rng.gen_range(0..=1u8), rng.gen_range(0..=1u8))
}

/// Shift all flows by `0.5 * eps` per axis. The splatted result moves by
/// exactly `eps` HR pixels, which the loss compensates by subsampling at
/// phase `eps`; that phase is returned alongside.
pub fn grid_shift(flows: &[FlowField], eps: (u8, u8)) -> (Vec<FlowField>, (usize, usize)) {
    let shifted = flows
        .iter()
        .map(|f| f.offset(0.5 * eps.0 as f64, 0.5 * eps.1 as f64))
        .collect();
    (shifted, (eps.0 as usize, eps.1 as usize))
}

/// Build encoder -> splat -> pool -> decoder on the tape; returns the HR
/// detail node (shifted by `eps` HR pixels when a grid shift is active).
fn build_fusion_graph(
    tape: &mut Tape,
    cfg: &NetConfig,
    nodes: &ParamNodes,
    frames: &[FusionFrame],
    eps: (u8, u8),
) -> NodeId {
    assert!(!frames.is_empty(), "fusion needs at least one frame");
    let (h, w) = (frames[0].detail.height(), frames[0].detail.width());
    let k = frames.len();

    let mut data = Vec::with_capacity(k * 2 * h * w);
    for f in frames {
        debug_assert!(f.detail.width() == w && f.detail.height() == h);
        data.extend_from_slice(f.detail.data());
        data.extend_from_slice(f.raw.data());
    }
    let input = tape.leaf(Tensor::from_vec([k, 2, h, w], data), false);
    let features = encoder_forward(tape, cfg, nodes, input);

    let (shifted, _) = grid_shift(&frames.iter().map(|f| f.flow).collect::<Vec<_>>(), eps);
    let n = h * w;
    let mut fx = Vec::with_capacity(k * n);
    let mut fy = Vec::with_capacity(k * n);
    for f in &shifted {
        fx.extend(std::iter::repeat_n(f.dx(), n));
        fy.extend(std::iter::repeat_n(f.dy(), n));
    }
    let (values, weights) = tape.splat(features, fx, fy, UPSCALE);

    let mut pooled = vec![tape.pool_avg(values, weights)];
    if cfg.pooling.uses_max() {
        pooled.push(tape.pool_max(values));
    }
    if cfg.pooling.uses_std() {
        pooled.push(tape.pool_std(values));
    }
    pooled.push(tape.pool_wsum(weights));
    let stacked = tape.concat_channels(&pooled);

    decoder_forward(tape, cfg, nodes, stacked)
}

/// Attach the self-supervised loss: optional convolution with the loss
/// kernel, subsampling at the grid-shift compensation phase, then masked L1
/// against the withheld reference detail.
fn attach_self_loss(
    tape: &mut Tape,
    hr_detail: NodeId,
    target_detail: &ImageGrid,
    kernel: Option<&Kernel>,
    eps: (u8, u8),
) -> NodeId {
    let mut pred = hr_detail;
    if let Some(k) = kernel {
        if k.radius() > 0 {
            let side = 2 * k.radius() + 1;
            let taps = Tensor::from_vec([1, 1, side, side], k.full_taps());
            let kid = tape.constant(taps);
            pred = tape.conv2d(pred, kid, None);
        }
    }
    let sub = tape.subsample(pred, UPSCALE, (eps.0 as usize, eps.1 as usize));
    let target = Tensor::from_image(target_detail);
    tape.l1_masked(sub, target, LOSS_BORDER)
}

/// Forward-only self-supervised loss for a prepared fusion set; used by the
/// grid-shift equivariance checks.
pub fn evaluate_self_loss(
    cfg: &NetConfig,
    params: &Params,
    frames: &[FusionFrame],
    target_detail: &ImageGrid,
    kernel: Option<&Kernel>,
    eps: (u8, u8),
) -> f64 {
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params);
    let hr = build_fusion_graph(&mut tape, cfg, &nodes, frames, eps);
    let loss = attach_self_loss(&mut tape, hr, target_detail, kernel, eps);
    tape.value(loss).scalar_value()
}

/// Loss and per-parameter gradients for one fusion set.
pub fn self_loss_and_grads(
    cfg: &NetConfig,
    params: &Params,
    frames: &[FusionFrame],
    target_detail: &ImageGrid,
    kernel: Option<&Kernel>,
    eps: (u8, u8),
) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params);
    let hr = build_fusion_graph(&mut tape, cfg, &nodes, frames, eps);
    let loss = attach_self_loss(&mut tape, hr, target_detail, kernel, eps);
    let value = tape.value(loss).scalar_value();
    let mut grads = tape.backward(loss);
    let out = nodes
        .ordered()
        .iter()
        .zip(params.entries())
        .map(|(&id, (_, t))| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape)))
        .collect();
    (value, out)
}

/// Run the full fusion forward (no loss) and return the HR detail plane.
pub fn fuse_detail(cfg: &NetConfig, params: &Params, frames: &[FusionFrame]) -> ImageGrid {
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params);
    let hr = build_fusion_graph(&mut tape, cfg, &nodes, frames, (0, 0));
    tape.value(hr).plane_to_image(0, 0)
}

/// Detail and raw crops for a frame of a sequence, normalized by its
/// reported exposure.
fn fusion_frame(seq: &LRSequence, index: usize, flow: FlowField) -> FusionFrame {
    let normalized = seq.frames()[index].scaled(1.0 / seq.exposures()[index]);
    let detail = decompose(&normalized, DETAIL_SIGMA).detail;
    FusionFrame { detail, raw: seq.frames()[index].clone(), flow }
}

/// Training fusion inputs: every chosen frame except the reference. Errors
/// if the reference is listed among the fused inputs.
pub fn training_fusion_inputs(
    seq: &LRSequence,
    fused_indices: &[usize],
    reference_index: usize,
    flows_to_reference: &[FlowField],
) -> Result<Vec<FusionFrame>, TrainError> {
    if fused_indices.contains(&reference_index) {
        return Err(TrainError::ReferenceLeak);
    }
    assert_eq!(fused_indices.len(), flows_to_reference.len());
    Ok(fused_indices
        .iter()
        .zip(flows_to_reference)
        .map(|(&i, &flow)| fusion_frame(seq, i, flow))
        .collect())
}

/// One row of the training log.
#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub step: u64,
    pub loss_self: f64,
    pub loss_me: f64,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<LossRow>,
}

/// Dataset directory: every subdirectory holding a `meta.json` is a
/// sequence, in lexicographic order.
pub fn dataset_sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| TrainError::Io { path: dir.to_path_buf(), source: e })?;
    for entry in entries {
        let entry = entry.map_err(|e| TrainError::Io { path: dir.to_path_buf(), source: e })?;
        let path = entry.path();
        if path.is_dir() && path.join("meta.json").is_file() {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(TrainError::DatasetTooSmall(format!(
            "no sequences found under {}",
            dir.display()
        )));
    }
    Ok(out)
}

struct TrainSeq {
    seq: LRSequence,
    /// Flow of frame i toward frame 0; pairwise flows are composed from
    /// these, which keeps registration out of the inner loop.
    flows_to_first: Vec<FlowField>,
}

fn flows_to_first(seq: &LRSequence) -> Result<Vec<FlowField>, RegisterError> {
    let normalized = seq.normalized();
    let mut flows = Vec::with_capacity(seq.len());
    flows.push(FlowField::zero());
    for i in 1..seq.len() {
        flows.push(estimate_translation(&normalized[0], &normalized[i])?);
    }
    Ok(flows)
}

fn load_training_set(dirs: &[PathBuf], frames_min: usize, crop: usize) -> Result<Vec<TrainSeq>, TrainError> {
    let sequences: Vec<LRSequence> = dirs.iter().map(|d| load_sequence(d)).collect::<Result<_, _>>()?;
    for (seq, dir) in sequences.iter().zip(dirs) {
        if seq.len() < frames_min.max(2) {
            return Err(TrainError::DatasetTooSmall(format!(
                "{} has {} frames, need at least {}",
                dir.display(),
                seq.len(),
                frames_min.max(2)
            )));
        }
        if seq.width() < crop || seq.height() < crop {
            return Err(TrainError::CropTooLarge { got: seq.width(), got_h: seq.height(), crop });
        }
    }

    // Registration dominates startup; split it across two workers. Results
    // land by index, so the outcome does not depend on scheduling.
    let mut flows: Vec<Option<Result<Vec<FlowField>, RegisterError>>> =
        (0..sequences.len()).map(|_| None).collect();
    let mid = sequences.len() / 2;
    let (left, right) = flows.split_at_mut(mid);
    let (seq_left, seq_right) = sequences.split_at(mid);
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for (slot, seq) in left.iter_mut().zip(seq_left) {
                *slot = Some(flows_to_first(seq));
            }
        });
        for (slot, seq) in right.iter_mut().zip(seq_right) {
            *slot = Some(flows_to_first(seq));
        }
    });

    sequences
        .into_iter()
        .zip(flows)
        .map(|(seq, f)| {
            let flows_to_first = f.expect("filled")?;
            Ok(TrainSeq { seq, flows_to_first })
        })
        .collect()
}

/// Train on a dataset directory. When `out_dir` is given, checkpoints and the
/// loss log (`loss_log.csv`: step,loss_self,loss_me) are written there.
pub fn train(
    ds_dir: &Path,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    net_cfg.validate()?;
    assert!(cfg.lr > 0.0, "learning rate must be positive");
    assert!(cfg.frames_min >= 2 && cfg.frames_min <= cfg.frames_max, "bad frame range");
    assert!(cfg.batch >= 1);

    let dirs = dataset_sequence_dirs(ds_dir)?;
    let data = load_training_set(&dirs, cfg.frames_min, cfg.crop)?;

    let mut rng = seed_rng(cfg.seed);
    let mut params = init_params(net_cfg, &mut rng);
    let mut adam = AdamState::new(&params);
    let kernel = cfg.loss_kernel_sigma.map(Kernel::gaussian);

    // Auto schedule: three phases, scaling the rate twice over the run.
    let decay_every = if cfg.decay_every_epochs > 0 {
        cfg.decay_every_epochs
    } else {
        cfg.epochs.div_ceil(3).max(1)
    };
    let mut lr = cfg.lr;

    let mut loss_log: Vec<LossRow> = Vec::new();
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch % decay_every == 0 {
            lr *= cfg.lr_decay;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut grads_acc: Option<Vec<Tensor>> = None;
            let mut loss_self_acc = 0.0;
            let mut loss_me_acc = 0.0;
            for &seq_idx in chunk {
                let ts = &data[seq_idx];
                let (loss_self, grads, loss_me) = training_step(ts, net_cfg, &params, cfg, kernel.as_ref(), &mut rng)?;
                loss_self_acc += loss_self;
                loss_me_acc += loss_me;
                match &mut grads_acc {
                    None => grads_acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            for (x, y) in a.data.iter_mut().zip(&g.data) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = grads_acc.expect("non-empty chunk");
            for g in &mut grads {
                for v in &mut g.data {
                    *v *= scale;
                }
            }
            let loss_self = loss_self_acc * scale;
            let loss_me = loss_me_acc * scale;
            step += 1;

            if !loss_self.is_finite() {
                let recent: Vec<f64> = loss_log.iter().rev().take(5).map(|r| r.loss_self).collect();
                return Err(TrainError::NonFiniteLoss { step, recent });
            }

            let acfg = AdamConfig { lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps };
            adam_step(&mut params, &grads, &mut adam, &acfg);
            loss_log.push(LossRow { step, loss_self, loss_me });
        }

        if let Some(dir) = out_dir {
            let write_now = cfg.checkpoint_every_epochs > 0 && (epoch + 1) % cfg.checkpoint_every_epochs == 0;
            if write_now {
                let ckpt = Checkpoint {
                    config: net_cfg.clone(),
                    params: params.clone(),
                    step,
                    loss_history: loss_log.iter().map(|r| r.loss_self).collect(),
                };
                save_checkpoint(dir, &ckpt)?;
            }
        }
    }

    let checkpoint = Checkpoint {
        config: net_cfg.clone(),
        params,
        step,
        loss_history: loss_log.iter().map(|r| r.loss_self).collect(),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(dir, &checkpoint)?;
        write_loss_log(&dir.join("loss_log.csv"), &loss_log)
            .map_err(|e| TrainError::Io { path: dir.join("loss_log.csv"), source: e })?;
    }
    Ok(TrainOutcome { checkpoint, loss_log })
}

fn training_step(
    ts: &TrainSeq,
    net_cfg: &NetConfig,
    params: &Params,
    cfg: &TrainConfig,
    kernel: Option<&Kernel>,
    rng: &mut SeedRng,
) -> Result<(f64, Vec<Tensor>, f64), TrainError> {
    let m = ts.seq.len();
    let k_max = cfg.frames_max.min(m);
    let k = rng.gen_range(cfg.frames_min..=k_max);

    let mut indices: Vec<usize> = (0..m).collect();
    indices.shuffle(rng);
    indices.truncate(k);
    let ref_pos = rng.gen_range(0..k);
    let reference_index = indices[ref_pos];

    let (cx, cy) = {
        let max_x = ts.seq.width() - cfg.crop;
        let max_y = ts.seq.height() - cfg.crop;
        (
            if max_x > 0 { rng.gen_range(0..=max_x) } else { 0 },
            if max_y > 0 { rng.gen_range(0..=max_y) } else { 0 },
        )
    };
    let cropped = ts.seq.cropped(cx, cy, cfg.crop, cfg.crop);
    let eps = sample_grid_shift(rng);

    let fused: Vec<usize> = indices.iter().copied().filter(|&i| i != reference_index).collect();
    let flows: Vec<FlowField> = fused
        .iter()
        .map(|&i| ts.flows_to_first[i].minus(&ts.flows_to_first[reference_index]))
        .collect();

    let frames = training_fusion_inputs(&cropped, &fused, reference_index, &flows)?;
    let target = {
        let normalized = cropped.frames()[reference_index].scaled(1.0 / cropped.exposures()[reference_index]);
        decompose(&normalized, DETAIL_SIGMA).detail
    };

    let (loss_self, grads) = self_loss_and_grads(net_cfg, params, &frames, &target, kernel, eps);

    // Diagnostic motion loss over the chosen subset (reference included with
    // zero flow).
    let subset_norm: Vec<ImageGrid> = indices
        .iter()
        .map(|&i| cropped.frames()[i].scaled(1.0 / cropped.exposures()[i]))
        .collect();
    let subset_flows: Vec<FlowField> = indices
        .iter()
        .map(|&i| ts.flows_to_first[i].minus(&ts.flows_to_first[reference_index]))
        .collect();
    let loss_me = warping_loss(&subset_norm, &subset_flows, ref_pos, ME_LOSS_LAMBDA1)?;

    Ok((loss_self, grads, loss_me))
}

fn write_loss_log(path: &Path, rows: &[LossRow]) -> std::io::Result<()> {
    let mut text = String::from("step,loss_self,loss_me\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.step, r.loss_self, r.loss_me));
    }
    fs::write(path, text)
}

/// Reconstruct a sequence with a trained checkpoint: estimate flows toward
/// the sequence reference, fuse all frames (reference included at inference),
/// and add the fused HR base to the decoded HR detail.
pub fn infer(seq: &LRSequence, ckpt: &Checkpoint) -> Result<ImageGrid, TrainError> {
    let normalized = seq.normalized();
    let r = seq.reference_index();
    let mut flows = Vec::with_capacity(seq.len());
    for i in 0..seq.len() {
        if i == r {
            flows.push(FlowField::zero());
        } else {
            flows.push(estimate_translation(&normalized[r], &normalized[i])?);
        }
    }
    infer_with_flows(seq, ckpt, &flows)
}

/// [`infer`] with externally supplied flows toward the reference (one per
/// frame).
pub fn infer_with_flows(seq: &LRSequence, ckpt: &Checkpoint, flows: &[FlowField]) -> Result<ImageGrid, TrainError> {
    assert_eq!(flows.len(), seq.len(), "one flow per frame");
    ckpt.config.validate()?;
    let normalized = seq.normalized();

    let mut frames = Vec::with_capacity(seq.len());
    let mut bases = Vec::with_capacity(seq.len());
    for (i, norm) in normalized.iter().enumerate() {
        let pair = decompose(norm, DETAIL_SIGMA);
        bases.push(pair.base);
        frames.push(FusionFrame {
            detail: pair.detail,
            raw: seq.frames()[i].clone(),
            flow: flows[i],
        });
    }

    let detail_hr = fuse_detail(&ckpt.config, &ckpt.params, &frames);
    let base_hr = fuse_bases(&bases, seq.exposures(), flows, UPSCALE)
        .expect("aligned by construction");
    base_hr.zip(&detail_hr, |b, d| b + d).map_err(|_| {
        TrainError::DatasetTooSmall("base/detail dimension mismatch".into())
    })
}

/// Convenience: load a checkpoint and run inference.
pub fn infer_from_dir(seq: &LRSequence, ckpt_dir: &Path) -> Result<ImageGrid, TrainError> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    infer(seq, &ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::save_sequence;
    use crate::noise::{simulate_sequence, synthesize_hr, NoiseModel, SimConfig};
    use crate::rng::substream;

    fn tiny_net() -> NetConfig {
        NetConfig { n_features: 4, encoder_blocks: 1, decoder_blocks: 1, ..Default::default() }
    }

    fn write_dataset(dir: &Path, n_seq: usize, hr_size: usize, frames: usize, noisy: bool) {
        let model = if noisy { NoiseModel::default() } else { NoiseModel::noiseless() };
        for i in 0..n_seq {
            let mut rng = substream(1000, i as u64);
            let hr = synthesize_hr(hr_size, hr_size, &mut rng);
            let cfg = SimConfig { frames, exposure_error_pct: 0.05, ..Default::default() };
            let sim = simulate_sequence(&hr, &cfg, &model, &mut rng).unwrap();
            save_sequence(&dir.join(format!("seq_{i:04}")), &sim.sequence).unwrap();
        }
    }

    #[test]
    fn grid_shift_mechanics() {
        let flows = vec![FlowField::translation(0.3, -0.2).unwrap()];
        let (same, phase) = grid_shift(&flows, (0, 0));
        assert_eq!(same[0], flows[0]);
        assert_eq!(phase, (0, 0));

        let (shifted, phase) = grid_shift(&flows, (1, 0));
        assert_eq!(phase, (1, 0));
        assert_eq!(shifted[0].dx(), 0.8);
        assert_eq!(shifted[0].dy(), -0.2);

        // The splat target of an LR sample moves by exactly one HR pixel.
        let x = 3.0;
        let u0 = 2.0 * (x + flows[0].dx());
        let u1 = 2.0 * (x + shifted[0].dx());
        assert_eq!(u1 - u0, 1.0);
    }

    #[test]
    fn reference_leak_is_rejected() {
        let mut rng = substream(2000, 0);
        let hr = synthesize_hr(64, 64, &mut rng);
        let cfg = SimConfig { frames: 4, ..Default::default() };
        let sim = simulate_sequence(&hr, &cfg, &NoiseModel::noiseless(), &mut rng).unwrap();
        let flows = vec![FlowField::zero(); 3];
        let err = training_fusion_inputs(&sim.sequence, &[0, 1, 2], 0, &flows);
        assert!(matches!(err, Err(TrainError::ReferenceLeak)));
        assert!(training_fusion_inputs(&sim.sequence, &[1, 2, 3], 0, &flows).is_ok());
    }

    #[test]
    fn grid_shift_equivariance_noiseless() {
        // Decoder with one block keeps the receptive field inside the
        // two-pixel loss border; flow components in (0.5, 1.0) keep every
        // splat footprint on the same side of the grid boundary under both
        // phases. The compensated loss then matches exactly.
        use crate::image::{shift_subpixel, subsample};
        use rand::Rng;
        let net = tiny_net();
        let mut rng = substream(2100, 0);
        let params = init_params(&net, &mut rng);

        let hr = synthesize_hr(64, 64, &mut rng);
        let mut frames_lr = vec![subsample(&hr, 2, (0, 0)).unwrap()];
        let mut flows = Vec::new();
        for _ in 0..3 {
            let comp = |rng: &mut crate::rng::SeedRng| {
                let m: f64 = rng.gen_range(1.1..1.9);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            };
            let delta = (comp(&mut rng), comp(&mut rng));
            frames_lr.push(subsample(&shift_subpixel(&hr, delta), 2, (0, 0)).unwrap());
            flows.push(FlowField::translation(-delta.0 / 2.0, -delta.1 / 2.0).unwrap());
        }
        let seq = LRSequence::new(frames_lr, vec![1.0; 4], 0, None).unwrap();
        let frames = training_fusion_inputs(&seq, &[1, 2, 3], 0, &flows).unwrap();
        let target = decompose(&seq.frames()[0], DETAIL_SIGMA).detail;

        let l00 = evaluate_self_loss(&net, &params, &frames, &target, None, (0, 0));
        let l11 = evaluate_self_loss(&net, &params, &frames, &target, None, (1, 1));
        assert!(
            (l00 - l11).abs() <= 1e-5 * l00.abs().max(1.0),
            "eps (0,0) loss {l00} vs eps (1,1) loss {l11}"
        );
    }

    #[test]
    fn smoke_training_run() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 8, 64, 6, true);
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            crop: 32,
            frames_min: 4,
            frames_max: 5,
            seed: 7,
            ..Default::default()
        };
        let outcome = train(dir.path(), &tiny_net(), &cfg, Some(out.path())).unwrap();
        assert_eq!(outcome.loss_log.len(), 16);
        assert_eq!(outcome.checkpoint.step, 16);
        assert!(outcome.loss_log.iter().all(|r| r.loss_self.is_finite() && r.loss_me.is_finite()));
        assert!(out.path().join("model.json").is_file());
        assert!(out.path().join("weights.raw").is_file());
        let log = std::fs::read_to_string(out.path().join("loss_log.csv")).unwrap();
        assert!(log.starts_with("step,loss_self,loss_me\n"));
        assert_eq!(log.lines().count(), 17);

        // Inference accepts both few and many frames with one checkpoint.
        let loaded = load_checkpoint(out.path()).unwrap();
        let mut rng = substream(2200, 0);
        let hr = synthesize_hr(64, 64, &mut rng);
        for m in [4usize, 9] {
            let sim = simulate_sequence(
                &hr,
                &SimConfig { frames: m, ..Default::default() },
                &NoiseModel::default(),
                &mut rng,
            )
            .unwrap();
            let out_img = infer(&sim.sequence, &loaded).unwrap();
            assert_eq!(out_img.width(), 64);
            assert_eq!(out_img.height(), 64);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 4, 64, 5, true);
        let cfg = TrainConfig {
            epochs: 1,
            crop: 32,
            frames_min: 4,
            frames_max: 4,
            seed: 11,
            ..Default::default()
        };
        let a = train(dir.path(), &tiny_net(), &cfg, None).unwrap();
        let b = train(dir.path(), &tiny_net(), &cfg, None).unwrap();
        for (x, y) in a.checkpoint.params.entries().iter().zip(b.checkpoint.params.entries()) {
            assert_eq!(x.1.data, y.1.data);
        }
        for (ra, rb) in a.loss_log.iter().zip(&b.loss_log) {
            assert_eq!(ra.loss_self, rb.loss_self);
            assert_eq!(ra.loss_me, rb.loss_me);
        }
    }

    #[test]
    fn self_loss_zero_and_homogeneous() {
        // A prediction whose subsampling equals the target has zero loss
        // under the identity kernel; a constant residual scales linearly.
        use crate::net::tape::Tape;
        let mut rng = substream(2400, 0);
        let target = ImageGrid::from_fn(8, 8, |_, _| rng.gen_range(-5.0..5.0));
        let hr = {
            // Zero-inserted target: even pixels carry the target values.
            let mut t = crate::net::tensor::Tensor::zeros([1, 1, 16, 16]);
            for y in 0..8 {
                for x in 0..8 {
                    let o = t.off(0, 0, 2 * y, 2 * x);
                    t.data[o] = target.get(x, y);
                }
            }
            t
        };
        let mut tape = Tape::new();
        let hid = tape.leaf(hr.clone(), false);
        let loss = attach_self_loss(&mut tape, hid, &target, None, (0, 0));
        assert_eq!(tape.value(loss).scalar_value(), 0.0);

        for c in [1.0, 2.0] {
            let mut shifted = hr.clone();
            for v in &mut shifted.data {
                *v += c;
            }
            let mut tape = Tape::new();
            let hid = tape.leaf(shifted, false);
            let loss = tape_loss_value(&mut tape, hid, &target);
            assert!((loss - c).abs() < 1e-12, "constant residual {c}: loss {loss}");
        }
    }

    fn tape_loss_value(tape: &mut Tape, hid: crate::net::tape::NodeId, target: &ImageGrid) -> f64 {
        let loss = attach_self_loss(tape, hid, target, None, (0, 0));
        tape.value(loss).scalar_value()
    }

    #[test]
    fn every_pooling_config_runs_with_matching_widths() {
        use crate::net::model::Pooling;
        let mut rng = substream(2500, 0);
        let hr = synthesize_hr(64, 64, &mut rng);
        let cfg = SimConfig { frames: 4, ..Default::default() };
        let sim = simulate_sequence(&hr, &cfg, &NoiseModel::default(), &mut rng).unwrap();
        let flows = vec![FlowField::zero(); 3];
        let frames = training_fusion_inputs(&sim.sequence, &[1, 2, 3], 0, &flows).unwrap();
        let target = decompose(&sim.sequence.frames()[0].scaled(1.0 / sim.sequence.exposures()[0]), DETAIL_SIGMA).detail;
        for pooling in [Pooling::A, Pooling::Am, Pooling::As, Pooling::Ams] {
            let net = NetConfig { n_features: 4, encoder_blocks: 1, decoder_blocks: 1, pooling, ..Default::default() };
            let mut prng = substream(2501, 0);
            let params = init_params(&net, &mut prng);
            let loss = evaluate_self_loss(&net, &params, &frames, &target, None, (0, 0));
            assert!(loss.is_finite(), "{pooling:?}");
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // d(loss)/d(params) through the tape against central differences on
        // a two-frame 8x8 instance.
        let net = NetConfig { n_features: 3, encoder_blocks: 1, decoder_blocks: 1, ..Default::default() };
        let mut rng = substream(2600, 0);
        let params = init_params(&net, &mut rng);

        let mk_img = |rng: &mut crate::rng::SeedRng| ImageGrid::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let frames: Vec<FusionFrame> = (0..2)
            .map(|i| FusionFrame {
                detail: mk_img(&mut rng),
                raw: mk_img(&mut rng).map(|v| 500.0 + 100.0 * v),
                flow: FlowField::translation(0.25 + 0.1 * i as f64, -0.3).unwrap(),
            })
            .collect();
        let target = mk_img(&mut rng);

        let (_, grads) = self_loss_and_grads(&net, &params, &frames, &target, None, (0, 0));

        let h = 1e-5;
        let mut max_err = 0.0f64;
        let mut scale = 0.0f64;
        #[allow(clippy::needless_range_loop)]
        for pi in 0..params.len() {
            let n = params.entries()[pi].1.numel();
            // Probe a spread of entries in each tensor.
            for j in (0..n).step_by(7.max(n / 5)) {
                let mut plus = params.clone();
                plus.tensor_mut(pi).data[j] += h;
                let lp = evaluate_self_loss(&net, &plus, &frames, &target, None, (0, 0));
                let mut minus = params.clone();
                minus.tensor_mut(pi).data[j] -= h;
                let lm = evaluate_self_loss(&net, &minus, &frames, &target, None, (0, 0));
                let fd = (lp - lm) / (2.0 * h);
                max_err = max_err.max((fd - grads[pi].data[j]).abs());
                scale = scale.max(fd.abs());
            }
        }
        let rel = max_err / scale.max(1e-9);
        assert!(rel < 1e-4, "end-to-end fd rel err {rel}");
    }

    #[test]
    fn infer_is_permutation_invariant_over_non_reference_frames() {
        let net = tiny_net();
        let mut rng = substream(2300, 0);
        let params = init_params(&net, &mut rng);
        let ckpt = Checkpoint { config: net, params, step: 0, loss_history: vec![] };

        let hr = synthesize_hr(64, 64, &mut rng);
        let cfg = SimConfig { frames: 5, ..Default::default() };
        let sim = simulate_sequence(&hr, &cfg, &NoiseModel::default(), &mut rng).unwrap();
        let seq = &sim.sequence;

        let out_a = infer(seq, &ckpt).unwrap();

        // Permute the non-reference frames (reference stays index 0).
        let perm = [0usize, 3, 1, 4, 2];
        let frames: Vec<ImageGrid> = perm.iter().map(|&i| seq.frames()[i].clone()).collect();
        let exposures: Vec<f64> = perm.iter().map(|&i| seq.exposures()[i]).collect();
        let permuted = LRSequence::new(frames, exposures, 0, seq.noise_model()).unwrap();
        let out_b = infer(&permuted, &ckpt).unwrap();

        let scale = out_a.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for (a, b) in out_a.data().iter().zip(out_b.data()) {
            assert!((a - b).abs() <= 1e-4 * scale, "{a} vs {b}");
        }
    }
}
