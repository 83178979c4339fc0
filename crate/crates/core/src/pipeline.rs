//! Classical reconstruction pipelines and the evaluation harness.
//!
//! The multi-exposure shift-and-add splats the raw (un-normalized) frames
//! onto the x2 grid and divides by exposure-scaled splat weights, so long
//! exposures dominate exactly as their signal-to-noise ratio warrants. The
//! base-detail variant routes the low frequencies through warped exposure-
//! weighted base averaging and only splats the details, which confines
//! exposure-time errors to a smooth gain on the base. Uncovered HR pixels
//! are filled by normalized convolution.
//!
//! Evaluation follows the robustness protocol: for each requested exposure-
//! error level the true exposure times are re-contaminated, flows are
//! re-estimated from the mis-normalized frames, and every method runs on the
//! same inputs. PSNR is computed against the HR ground truth after an affine
//! radiometric fit, since absolute gain is unobservable once the reported
//! exposures are wrong.

use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::base_detail::{decompose, fuse_bases};
use crate::container::{load_image, load_sequence, ContainerError, LRSequence};
use crate::image::{convolve, ImageGrid, Kernel, PSNR_INFINITE_DB};
use crate::net::{infer_with_flows, Checkpoint, TrainError};
use crate::noise::{inject_exposure_error, load_truth};
use crate::register::{estimate_translation, FlowField, RegisterError};
use crate::rng::substream;
use crate::splat::{spmc_splat, splat_bicubic, FeatureStack, SplatError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty sequence")]
    Empty,
    #[error("flows ({flows}) not aligned with frames ({frames})")]
    FlowCount { flows: usize, frames: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Net(#[from] TrainError),
    #[error("method `net` needs a checkpoint")]
    MissingCheckpoint,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Interpolation kernel used to deposit samples in shift-and-add.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplatKind {
    Bilinear,
    Bicubic,
}

/// Divide accumulated values by accumulated weights; pixels without coverage
/// are filled by repeated normalized convolution with a small Gaussian.
fn ratio_with_inpaint(num: ImageGrid, den: ImageGrid) -> ImageGrid {
    const EPS: f64 = 1e-8;
    let (w, h) = (num.width(), num.height());
    let mut out = ImageGrid::zeros(w, h);
    let mut holes = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d = den.get(x, y);
            if d > EPS {
                out.set(x, y, num.get(x, y) / d);
            } else {
                holes.push((x, y));
            }
        }
    }
    if holes.is_empty() {
        return out;
    }
    let g = Kernel::gaussian(1.0);
    let mut ns = num;
    let mut ds = den;
    for _ in 0..8 {
        if holes.is_empty() {
            break;
        }
        ns = convolve(&ns, &g).expect("kernel fits");
        ds = convolve(&ds, &g).expect("kernel fits");
        holes.retain(|&(x, y)| {
            let d = ds.get(x, y);
            if d > EPS {
                out.set(x, y, ns.get(x, y) / d);
                false
            } else {
                true
            }
        });
    }
    out
}

fn splat_frames(
    frames: &[ImageGrid],
    flows: &[FlowField],
    s: usize,
    kind: SplatKind,
) -> Result<crate::splat::SplatResult, PipelineError> {
    let stack = FeatureStack::from_images(frames);
    let result = match kind {
        SplatKind::Bilinear => spmc_splat(&stack, flows, s)?,
        SplatKind::Bicubic => splat_bicubic(&stack, flows, s)?,
    };
    Ok(result)
}

fn check_flows(seq: &LRSequence, flows: &[FlowField]) -> Result<(), PipelineError> {
    if seq.is_empty() {
        return Err(PipelineError::Empty);
    }
    if flows.len() != seq.len() {
        return Err(PipelineError::FlowCount { flows: flows.len(), frames: seq.len() });
    }
    Ok(())
}

/// Multi-exposure weighted shift-and-add: splat the raw frames, divide by
/// exposure-scaled weights, inpaint zero-coverage pixels.
pub fn me_shift_and_add(
    seq: &LRSequence,
    flows: &[FlowField],
    s: usize,
    kind: SplatKind,
) -> Result<ImageGrid, PipelineError> {
    check_flows(seq, flows)?;
    let splat = splat_frames(seq.frames(), flows, s, kind)?;
    let plane = splat.height * splat.width;
    let mut num = vec![0.0; plane];
    let mut den = vec![0.0; plane];
    for f in 0..splat.frames {
        let e = seq.exposures()[f];
        let values = &splat.values[f * plane..(f + 1) * plane];
        let weights = &splat.weights[f * plane..(f + 1) * plane];
        for p in 0..plane {
            num[p] += values[p];
            den[p] += e * weights[p];
        }
    }
    Ok(ratio_with_inpaint(
        ImageGrid::new(splat.width, splat.height, num).expect("finite"),
        ImageGrid::new(splat.width, splat.height, den).expect("finite"),
    ))
}

/// Classical shift-and-add on the normalized frames with plain splat
/// weights; ignores the differing noise levels.
pub fn naive_shift_and_add(
    seq: &LRSequence,
    flows: &[FlowField],
    s: usize,
) -> Result<ImageGrid, PipelineError> {
    check_flows(seq, flows)?;
    let normalized = seq.normalized();
    let splat = splat_frames(&normalized, flows, s, SplatKind::Bilinear)?;
    let plane = splat.height * splat.width;
    let mut num = vec![0.0; plane];
    let mut den = vec![0.0; plane];
    for f in 0..splat.frames {
        let values = &splat.values[f * plane..(f + 1) * plane];
        let weights = &splat.weights[f * plane..(f + 1) * plane];
        for p in 0..plane {
            num[p] += values[p];
            den[p] += weights[p];
        }
    }
    Ok(ratio_with_inpaint(
        ImageGrid::new(splat.width, splat.height, num).expect("finite"),
        ImageGrid::new(splat.width, splat.height, den).expect("finite"),
    ))
}

/// Base-detail fusion: exposure-weighted warped base average plus an
/// exposure-weighted shift-and-add of the detail bands.
pub fn bd_fuse(seq: &LRSequence, flows: &[FlowField], s: usize) -> Result<ImageGrid, PipelineError> {
    bd_fuse_with_sigma(seq, flows, s, crate::base_detail::DETAIL_SIGMA)
}

/// [`bd_fuse`] with a configurable decomposition scale (used by the
/// degenerate-kernel checks).
pub fn bd_fuse_with_sigma(
    seq: &LRSequence,
    flows: &[FlowField],
    s: usize,
    sigma: f64,
) -> Result<ImageGrid, PipelineError> {
    check_flows(seq, flows)?;
    let normalized = seq.normalized();
    let mut bases = Vec::with_capacity(seq.len());
    let mut details = Vec::with_capacity(seq.len());
    for frame in &normalized {
        let pair = decompose(frame, sigma);
        bases.push(pair.base);
        details.push(pair.detail);
    }

    let splat = splat_frames(&details, flows, s, SplatKind::Bilinear)?;
    let plane = splat.height * splat.width;
    let mut num = vec![0.0; plane];
    let mut den = vec![0.0; plane];
    for f in 0..splat.frames {
        let e = seq.exposures()[f];
        let values = &splat.values[f * plane..(f + 1) * plane];
        let weights = &splat.weights[f * plane..(f + 1) * plane];
        for p in 0..plane {
            num[p] += e * values[p];
            den[p] += e * weights[p];
        }
    }
    let detail_hr = ratio_with_inpaint(
        ImageGrid::new(splat.width, splat.height, num).expect("finite"),
        ImageGrid::new(splat.width, splat.height, den).expect("finite"),
    );

    let base_hr = fuse_bases(&bases, seq.exposures(), flows, s).map_err(|_| PipelineError::Empty)?;
    Ok(base_hr.zip(&detail_hr, |b, d| b + d).expect("same dims"))
}

/// PSNR after a least-squares affine radiometric fit of the estimate to the
/// reference, over pixels at least `border` from the edges.
pub fn psnr_aligned(est: &ImageGrid, reference: &ImageGrid, border: usize, peak: f64) -> f64 {
    assert!(est.same_dims(reference), "dimension mismatch");
    let (w, h) = (est.width(), est.height());
    assert!(2 * border < w && 2 * border < h, "border too large");
    let mut n = 0.0;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for y in border..h - border {
        for x in border..w - border {
            let a = est.get(x, y);
            let b = reference.get(x, y);
            n += 1.0;
            sx += a;
            sy += b;
            sxx += a * a;
            sxy += a * b;
        }
    }
    let var = sxx - sx * sx / n;
    let (gain, offset) = if var > 1e-12 {
        let g = (sxy - sx * sy / n) / var;
        (g, (sy - g * sx) / n)
    } else {
        (1.0, (sy - sx) / n)
    };
    let mut sse = 0.0;
    for y in border..h - border {
        for x in border..w - border {
            let r = gain * est.get(x, y) + offset - reference.get(x, y);
            sse += r * r;
        }
    }
    let mse = sse / n;
    if mse == 0.0 {
        return PSNR_INFINITE_DB;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Reconstruction methods known to the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Multi-exposure weighted shift-and-add.
    Sna,
    /// Shift-and-add on normalized frames with plain weights.
    Naive,
    /// Base-detail classical fusion.
    Bd,
    /// Trained fusion network.
    Net,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method, PipelineError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sna" => Ok(Method::Sna),
            "naive" => Ok(Method::Naive),
            "bd" => Ok(Method::Bd),
            "net" => Ok(Method::Net),
            other => Err(PipelineError::UnknownMethod(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Sna => "sna",
            Method::Naive => "naive",
            Method::Bd => "bd",
            Method::Net => "net",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Method>, PipelineError> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Method::parse).collect()
    }
}

/// Evaluation harness configuration.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Relative exposure-error levels, e.g. [0.0, 0.05, 0.20].
    pub error_levels: Vec<f64>,
    pub seed: u64,
    /// HR border excluded from the metric; twice the loss border.
    pub hr_border: usize,
    pub peak: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            methods: vec![Method::Sna, Method::Bd],
            error_levels: vec![0.0, 0.05, 0.20],
            seed: 0,
            hr_border: 4,
            peak: crate::image::DEFAULT_PSNR_PEAK,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceScore {
    pub sequence: String,
    pub method: Method,
    pub error_pct: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug)]
pub struct MethodAggregate {
    pub method: Method,
    pub error_pct: f64,
    pub mean_psnr_db: f64,
    pub n_sequences: usize,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub per_sequence: Vec<SequenceScore>,
    pub aggregates: Vec<MethodAggregate>,
}

impl EvalReport {
    pub fn mean_psnr(&self, method: Method, error_pct: f64) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && (a.error_pct - error_pct).abs() < 1e-12)
            .map(|a| a.mean_psnr_db)
    }
}

struct SequenceCase {
    name: String,
    dir: PathBuf,
}

fn run_method(
    method: Method,
    seq: &LRSequence,
    flows: &[FlowField],
    ckpt: Option<&Checkpoint>,
) -> Result<ImageGrid, PipelineError> {
    match method {
        Method::Sna => me_shift_and_add(seq, flows, 2, SplatKind::Bilinear),
        Method::Naive => naive_shift_and_add(seq, flows, 2),
        Method::Bd => bd_fuse(seq, flows, 2),
        Method::Net => {
            let ckpt = ckpt.ok_or(PipelineError::MissingCheckpoint)?;
            Ok(infer_with_flows(seq, ckpt, flows)?)
        }
    }
}

/// Evaluate every (method, error level) cell over a generated dataset with
/// `truth.json` sidecars. Exposure errors are injected deterministically per
/// (sequence, level) on top of the true exposures; flows are estimated once
/// per cell and shared by all methods.
pub fn evaluate_dataset(
    ds_dir: &Path,
    cfg: &EvalConfig,
    ckpt: Option<&Checkpoint>,
) -> Result<EvalReport, PipelineError> {
    if cfg.methods.contains(&Method::Net) && ckpt.is_none() {
        return Err(PipelineError::MissingCheckpoint);
    }
    let dirs = crate::net::train::dataset_sequence_dirs(ds_dir).map_err(PipelineError::Net)?;
    let cases: Vec<SequenceCase> = dirs
        .into_iter()
        .map(|dir| SequenceCase {
            name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            dir,
        })
        .collect();

    // Sequences are independent; split them across two workers and merge in
    // order, so the report does not depend on scheduling.
    type CaseResult = Result<(Vec<SequenceScore>, Vec<(Method, f64, f64, f64)>), PipelineError>;
    let eval_case = |index: usize, case: &SequenceCase| -> CaseResult {
        let seq = load_sequence(&case.dir)?;
        let truth = load_truth(&case.dir.join("truth.json")).map_err(|source| PipelineError::Io {
            path: case.dir.join("truth.json"),
            source,
        })?;
        let hr = load_image(&case.dir.join(&truth.hr))?;

        let mut scores = Vec::new();
        let mut cells = Vec::new();
        for (li, &level) in cfg.error_levels.iter().enumerate() {
            let mut rng = substream(cfg.seed, (index * cfg.error_levels.len() + li) as u64);
            let reported = inject_exposure_error(&truth.exposures_true, level, &mut rng);
            let run_seq = seq.with_exposures(reported)?;

            let normalized = run_seq.normalized();
            let r = run_seq.reference_index();
            let mut flows = Vec::with_capacity(run_seq.len());
            for i in 0..run_seq.len() {
                if i == r {
                    flows.push(FlowField::zero());
                } else {
                    flows.push(estimate_translation(&normalized[r], &normalized[i])?);
                }
            }

            for &method in &cfg.methods {
                let t0 = Instant::now();
                let out = run_method(method, &run_seq, &flows, ckpt)?;
                let dt = t0.elapsed().as_secs_f64();
                let psnr = psnr_aligned(&out, &hr, cfg.hr_border, cfg.peak);
                scores.push(SequenceScore {
                    sequence: case.name.clone(),
                    method,
                    error_pct: level,
                    psnr_db: psnr,
                });
                cells.push((method, level, psnr, dt));
            }
        }
        Ok((scores, cells))
    };

    let mut results: Vec<Option<CaseResult>> = (0..cases.len()).map(|_| None).collect();
    let mid = cases.len() / 2;
    {
        let (left_r, right_r) = results.split_at_mut(mid);
        let (left_c, right_c) = cases.split_at(mid);
        std::thread::scope(|scope| {
            scope.spawn(move || {
                for (i, (slot, case)) in left_r.iter_mut().zip(left_c).enumerate() {
                    *slot = Some(eval_case(i, case));
                }
            });
            for (i, (slot, case)) in right_r.iter_mut().zip(right_c).enumerate() {
                *slot = Some(eval_case(mid + i, case));
            }
        });
    }

    let mut report = EvalReport::default();
    let mut agg: Vec<(Method, f64, f64, usize, f64)> = Vec::new();
    for slot in results {
        let (scores, cells) = slot.expect("filled")?;
        report.per_sequence.extend(scores);
        for (method, level, psnr, dt) in cells {
            match agg
                .iter_mut()
                .find(|(m, l, ..)| *m == method && (*l - level).abs() < 1e-12)
            {
                Some(entry) => {
                    entry.2 += psnr;
                    entry.3 += 1;
                    entry.4 += dt;
                }
                None => agg.push((method, level, psnr, 1, dt)),
            }
        }
    }
    report.aggregates = agg
        .into_iter()
        .map(|(method, error_pct, sum, n, runtime_s)| MethodAggregate {
            method,
            error_pct,
            mean_psnr_db: sum / n as f64,
            n_sequences: n,
            runtime_s,
        })
        .collect();
    report
        .aggregates
        .sort_by(|a, b| (a.method.name(), a.error_pct).partial_cmp(&(b.method.name(), b.error_pct)).unwrap());
    Ok(report)
}

/// Plain CSV: per-sequence rows plus `mean` rows carrying the per-cell
/// runtime.
pub fn write_eval_csv(report: &EvalReport, path: &Path) -> std::io::Result<()> {
    let mut text = String::from("method,error_pct,sequence,psnr_db,runtime_s\n");
    for s in &report.per_sequence {
        text.push_str(&format!(
            "{},{},{},{:.6},\n",
            s.method.name(),
            s.error_pct,
            s.sequence,
            s.psnr_db
        ));
    }
    for a in &report.aggregates {
        text.push_str(&format!(
            "{},{},mean,{:.6},{:.3}\n",
            a.method.name(),
            a.error_pct,
            a.mean_psnr_db,
            a.runtime_s
        ));
    }
    std::fs::write(path, text)
}

/// One pairwise exposure-ratio measurement.
#[derive(Clone, Debug)]
pub struct ExpoRow {
    pub frame_i: usize,
    pub frame_j: usize,
    pub reported_ratio: f64,
    pub estimated_ratio: f64,
    pub n_valid: usize,
}

/// Estimate the exposure ratio of every unordered frame pair of a sequence.
pub fn exposure_ratio_table(seq: &LRSequence, saturation: f64) -> Result<Vec<ExpoRow>, PipelineError> {
    let mut rows = Vec::new();
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            let est = crate::register::estimate_exposure_ratio(
                &seq.frames()[i],
                &seq.frames()[j],
                saturation,
            )?;
            rows.push(ExpoRow {
                frame_i: i,
                frame_j: j,
                reported_ratio: seq.exposures()[j] / seq.exposures()[i],
                estimated_ratio: est.ratio,
                n_valid: est.n_valid,
            });
        }
    }
    Ok(rows)
}

pub fn write_expo_csv(rows: &[ExpoRow], path: &Path) -> std::io::Result<()> {
    let mut text = String::from("frame_i,frame_j,reported_ratio,estimated_ratio,n_valid\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{:.9},{:.9},{}\n",
            r.frame_i, r.frame_j, r.reported_ratio, r.estimated_ratio, r.n_valid
        ));
    }
    std::fs::write(path, text)
}

/// Flows from a `truth.json` sidecar, for oracle-flow runs.
pub fn oracle_flows(path: &Path, expected_frames: usize) -> Result<Vec<FlowField>, PipelineError> {
    let truth = load_truth(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
    if truth.flows_lr.len() != expected_frames {
        return Err(PipelineError::FlowCount { flows: truth.flows_lr.len(), frames: expected_frames });
    }
    truth
        .flows_lr
        .iter()
        .map(|&(dx, dy)| FlowField::translation(dx, dy).map_err(PipelineError::Register))
        .collect()
}
