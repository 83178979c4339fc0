//! `mesr`: multi-exposure super-resolution pipelines.
//!
//! Subcommands cover the whole workflow: `synth` writes procedural HR test
//! scenes, `gen` simulates multi-exposure LR datasets from them, `train`
//! fits the fusion network with self-supervision, `infer` reconstructs a
//! sequence with a checkpoint, `sna`/`bdfuse` run the classical baselines,
//! `eval` produces the robustness table, and `expo` estimates pairwise
//! exposure ratios.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mesr_core::container::{load_sequence, save_image, save_sequence};
use mesr_core::net::{load_checkpoint, train, NetConfig, Pooling, TrainConfig};
use mesr_core::noise::{
    save_truth, simulate_sequence, synthesize_hr, NoiseModel, SequenceTruth, SimConfig,
};
use mesr_core::pipeline::{
    bd_fuse, evaluate_dataset, exposure_ratio_table, me_shift_and_add, oracle_flows,
    write_eval_csv, write_expo_csv, EvalConfig, Method, SplatKind,
};
use mesr_core::register::{estimate_translation, FlowField, DEFAULT_SATURATION};
use mesr_core::rng::substream;

#[derive(Parser)]
#[command(name = "mesr", about = "Multi-exposure multi-image super-resolution pipelines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write procedural high-resolution test scenes as one-frame containers.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate multi-exposure LR sequences from HR containers.
    Gen {
        /// Directory of one-frame HR containers (or a single container).
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames per sequence.
        #[arg(long, default_value_t = 15)]
        m: usize,
        /// Translation range in HR pixels.
        #[arg(long, default_value_t = 2.0)]
        trans: f64,
        /// Relative exposure error baked into the reported exposures.
        #[arg(long, default_value_t = 0.05)]
        err: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shot-noise slope of the variance law.
        #[arg(long, default_value_t = 0.119)]
        noise_a: f64,
        /// Readout variance of the variance law.
        #[arg(long, default_value_t = 12.050)]
        noise_b: f64,
        /// Draw one exposure base for the whole dataset instead of one per
        /// sequence.
        #[arg(long, default_value_t = false)]
        alpha_per_dataset: bool,
    },
    /// Self-supervised training of the fusion network.
    Train {
        #[arg(long)]
        ds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pooled statistics: a, am, as, or ams.
        #[arg(long, default_value = "ams")]
        pool: String,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        #[arg(long, default_value_t = 2)]
        encoder_blocks: usize,
        #[arg(long, default_value_t = 3)]
        decoder_blocks: usize,
    },
    /// Reconstruct a sequence with a trained checkpoint.
    Infer {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output single-image container directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-exposure weighted shift-and-add baseline.
    Sna {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use ground-truth flows from a truth.json instead of estimating.
        #[arg(long)]
        oracle_flows: Option<PathBuf>,
        /// Splat kernel: bilinear or bicubic.
        #[arg(long, default_value = "bilinear")]
        splat: String,
    },
    /// Base-detail classical fusion baseline.
    Bdfuse {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle_flows: Option<PathBuf>,
    },
    /// Exposure-error robustness table over a generated dataset.
    Eval {
        #[arg(long)]
        ds: PathBuf,
        /// Comma-separated methods: sna, naive, bd, net.
        #[arg(long, default_value = "sna,bd")]
        methods: String,
        /// Comma-separated exposure-error levels, e.g. 0,0.05,0.20.
        #[arg(long, default_value = "0,0.05,0.20")]
        err: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pairwise exposure-ratio estimation for a sequence.
    Expo {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Saturation threshold in DN.
        #[arg(long, default_value_t = DEFAULT_SATURATION)]
        sat: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { out, count, width, height, seed } => cmd_synth(&out, count, width, height, seed),
        Cmd::Gen { hr, out, m, trans, err, seed, noise_a, noise_b, alpha_per_dataset } => {
            cmd_gen(&hr, &out, m, trans, err, seed, noise_a, noise_b, alpha_per_dataset)
        }
        Cmd::Train { ds, out, features, epochs, seed, pool, lr, batch, crop, encoder_blocks, decoder_blocks } => {
            cmd_train(&ds, &out, features, epochs, seed, &pool, lr, batch, crop, encoder_blocks, decoder_blocks)
        }
        Cmd::Infer { seq, ckpt, out } => cmd_infer(&seq, &ckpt, &out),
        Cmd::Sna { seq, out, oracle_flows, splat } => cmd_sna(&seq, &out, oracle_flows.as_deref(), &splat),
        Cmd::Bdfuse { seq, out, oracle_flows } => cmd_bdfuse(&seq, &out, oracle_flows.as_deref()),
        Cmd::Eval { ds, methods, err, out, ckpt, seed } => cmd_eval(&ds, &methods, &err, &out, ckpt.as_deref(), seed),
        Cmd::Expo { seq, out, sat } => cmd_expo(&seq, &out, sat),
    }
}

fn cmd_synth(out: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    for i in 0..count {
        let mut rng = substream(seed, i as u64);
        let img = synthesize_hr(width, height, &mut rng);
        let dir = out.join(format!("hr_{i:04}"));
        save_image(&dir, &img).with_context(|| format!("writing {}", dir.display()))?;
    }
    println!("wrote {count} scenes under {}", out.display());
    Ok(())
}

/// One-frame container directories under `hr`, or `hr` itself.
fn hr_inputs(hr: &Path) -> Result<Vec<PathBuf>> {
    if hr.join("meta.json").is_file() {
        return Ok(vec![hr.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(hr).with_context(|| format!("reading {}", hr.display()))? {
        let path = entry?.path();
        if path.is_dir() && path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        bail!("no HR containers found under {}", hr.display());
    }
    Ok(dirs)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    hr: &Path,
    out: &Path,
    m: usize,
    trans: f64,
    err: f64,
    seed: u64,
    noise_a: f64,
    noise_b: f64,
    alpha_per_dataset: bool,
) -> Result<()> {
    let inputs = hr_inputs(hr)?;
    let model = NoiseModel::new(noise_a, noise_b).context("noise model")?;
    let alpha_override = if alpha_per_dataset {
        let mut rng = substream(seed, u64::MAX);
        Some(mesr_core::rng::uniform(&mut rng, 1.2, 1.4))
    } else {
        None
    };
    for (i, input) in inputs.iter().enumerate() {
        let hr_img = mesr_core::container::load_image(input)
            .with_context(|| format!("loading {}", input.display()))?;
        let cfg = SimConfig {
            frames: m,
            translation_range: trans,
            exposure_error_pct: err,
            seed,
            alpha_override,
            ..Default::default()
        };
        let mut rng = substream(seed, i as u64);
        let sim = simulate_sequence(&hr_img, &cfg, &model, &mut rng)
            .with_context(|| format!("simulating from {}", input.display()))?;
        let seq_dir = out.join(format!("seq_{i:04}"));
        save_sequence(&seq_dir, &sim.sequence)
            .with_context(|| format!("writing {}", seq_dir.display()))?;
        save_image(&seq_dir.join("hr"), &hr_img).context("writing hr reference")?;
        save_truth(&seq_dir.join("truth.json"), &SequenceTruth::from_simulated(&sim, err, "hr"))
            .context("writing truth.json")?;
    }
    println!("wrote {} sequences under {}", inputs.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ds: &Path,
    out: &Path,
    features: usize,
    epochs: usize,
    seed: u64,
    pool: &str,
    lr: f64,
    batch: usize,
    crop: usize,
    encoder_blocks: usize,
    decoder_blocks: usize,
) -> Result<()> {
    let pooling = Pooling::parse(pool).with_context(|| format!("unknown pooling `{pool}`"))?;
    let net = NetConfig {
        n_features: features,
        encoder_blocks,
        decoder_blocks,
        pooling,
        ..Default::default()
    };
    let cfg = TrainConfig { lr, batch, epochs, crop, seed, ..Default::default() };
    let outcome = train(ds, &net, &cfg, Some(out)).context("training failed")?;
    let last = outcome.loss_log.last().map(|r| r.loss_self).unwrap_or(f64::NAN);
    println!(
        "trained {} steps; final loss {last:.4}; checkpoint at {}",
        outcome.checkpoint.step,
        out.display()
    );
    Ok(())
}

fn cmd_infer(seq_dir: &Path, ckpt_dir: &Path, out: &Path) -> Result<()> {
    let seq = load_sequence(seq_dir).with_context(|| format!("loading {}", seq_dir.display()))?;
    let ckpt = load_checkpoint(ckpt_dir).with_context(|| format!("loading {}", ckpt_dir.display()))?;
    let img = mesr_core::net::infer(&seq, &ckpt).context("inference failed")?;
    save_image(out, &img).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}x{} reconstruction to {}", img.width(), img.height(), out.display());
    Ok(())
}

fn flows_for(seq: &mesr_core::LRSequence, oracle: Option<&Path>) -> Result<Vec<FlowField>> {
    if let Some(path) = oracle {
        return Ok(oracle_flows(path, seq.len())?);
    }
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
    Ok(flows)
}

fn cmd_sna(seq_dir: &Path, out: &Path, oracle: Option<&Path>, splat: &str) -> Result<()> {
    let kind = match splat.to_ascii_lowercase().as_str() {
        "bilinear" => SplatKind::Bilinear,
        "bicubic" => SplatKind::Bicubic,
        other => bail!("unknown splat kernel `{other}`"),
    };
    let seq = load_sequence(seq_dir)?;
    let flows = flows_for(&seq, oracle)?;
    let img = me_shift_and_add(&seq, &flows, 2, kind)?;
    save_image(out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bdfuse(seq_dir: &Path, out: &Path, oracle: Option<&Path>) -> Result<()> {
    let seq = load_sequence(seq_dir)?;
    let flows = flows_for(&seq, oracle)?;
    let img = bd_fuse(&seq, &flows, 2)?;
    save_image(out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(
    ds: &Path,
    methods: &str,
    err: &str,
    out: &Path,
    ckpt_dir: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let methods = Method::parse_list(methods)?;
    let error_levels: Vec<f64> = err
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad error level `{p}`")))
        .collect::<Result<_>>()?;
    let ckpt = match ckpt_dir {
        Some(dir) => Some(load_checkpoint(dir).with_context(|| format!("loading {}", dir.display()))?),
        None => None,
    };
    let cfg = EvalConfig { methods, error_levels, seed, ..Default::default() };
    let report = evaluate_dataset(ds, &cfg, ckpt.as_ref())?;
    write_eval_csv(&report, out).with_context(|| format!("writing {}", out.display()))?;
    for a in &report.aggregates {
        println!(
            "{:>6} err {:>5.2}: {:>7.3} dB over {} sequences ({:.2} s)",
            a.method.name(),
            a.error_pct,
            a.mean_psnr_db,
            a.n_sequences,
            a.runtime_s
        );
    }
    Ok(())
}

fn cmd_expo(seq_dir: &Path, out: &Path, sat: f64) -> Result<()> {
    let seq = load_sequence(seq_dir)?;
    let rows = exposure_ratio_table(&seq, sat)?;
    write_expo_csv(&rows, out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} pair estimates to {}", rows.len(), out.display());
    Ok(())
}
