//! Reduced encoder/decoder built from residual blocks, parameter
//! initialization, and the on-disk checkpoint format (`model.json` manifest
//! plus `weights.raw`, concatenated little-endian f32 in manifest order).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::tape::{NodeId, Tape};
use crate::net::tensor::Tensor;
use crate::rng::SeedRng;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed {path}: {source}")]
    MalformedModel {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("weights.raw holds {actual} bytes, manifest needs {expected}")]
    WeightsSize { expected: u64, actual: u64 },
    #[error("manifest entry {name} has shape {shape:?}, config implies {expected:?}")]
    ManifestShape {
        name: String,
        shape: [usize; 4],
        expected: [usize; 4],
    },
    #[error("manifest lists {got} parameters, config implies {expected}")]
    ManifestCount { got: usize, expected: usize },
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    if source.kind() == std::io::ErrorKind::NotFound {
        CheckpointError::MissingFile(path.to_path_buf())
    } else {
        CheckpointError::Io { path: path.to_path_buf(), source }
    }
}

/// Which pooled statistics feed the decoder. The coverage-weight channel is
/// always appended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    A,
    Am,
    As,
    Ams,
}

impl Pooling {
    pub fn stat_count(&self) -> usize {
        match self {
            Pooling::A => 1,
            Pooling::Am | Pooling::As => 2,
            Pooling::Ams => 3,
        }
    }

    pub fn uses_max(&self) -> bool {
        matches!(self, Pooling::Am | Pooling::Ams)
    }

    pub fn uses_std(&self) -> bool {
        matches!(self, Pooling::As | Pooling::Ams)
    }

    pub fn parse(s: &str) -> Option<Pooling> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Some(Pooling::A),
            "am" => Some(Pooling::Am),
            "as" => Some(Pooling::As),
            "ams" => Some(Pooling::Ams),
            _ => None,
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Pooling::A => "a",
            Pooling::Am => "am",
            Pooling::As => "as",
            Pooling::Ams => "ams",
        };
        f.write_str(s)
    }
}

/// Network hyperparameters. Defaults are the reduced CPU-trainable widths;
/// the full-scale configuration (64 features, 4/10 blocks) is constructible
/// but not the default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_features: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub kernel_size: usize,
    pub pooling: Pooling,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_features: 16,
            encoder_blocks: 2,
            decoder_blocks: 3,
            kernel_size: 3,
            pooling: Pooling::Ams,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.n_features == 0 || self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(CheckpointError::BadConfig("all counts must be at least 1"));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(CheckpointError::BadConfig("kernel size must be odd"));
        }
        Ok(())
    }

    /// Channels entering the decoder: one block of pooled features per
    /// statistic plus the coverage weight.
    pub fn decoder_in_channels(&self) -> usize {
        self.n_features * self.pooling.stat_count() + 1
    }

    /// Ordered parameter manifest implied by this config.
    pub fn manifest(&self) -> Vec<(String, [usize; 4])> {
        let n = self.n_features;
        let k = self.kernel_size;
        let mut out = Vec::new();
        let conv = |name: &str, co: usize, ci: usize, out: &mut Vec<(String, [usize; 4])>| {
            out.push((format!("{name}.w"), [co, ci, k, k]));
            out.push((format!("{name}.b"), [1, co, 1, 1]));
        };
        conv("enc.head", n, 2, &mut out);
        for i in 0..self.encoder_blocks {
            conv(&format!("enc.res{i}.c1"), n, n, &mut out);
            conv(&format!("enc.res{i}.c2"), n, n, &mut out);
        }
        conv("enc.tail", n, n, &mut out);
        conv("dec.head", n, self.decoder_in_channels(), &mut out);
        for i in 0..self.decoder_blocks {
            conv(&format!("dec.res{i}.c1"), n, n, &mut out);
            conv(&format!("dec.res{i}.c2"), n, n, &mut out);
        }
        conv("dec.tail", 1, n, &mut out);
        out
    }
}

/// Named parameter tensors in manifest order.
#[derive(Clone, Debug)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Centered uniform initialization scaled by 1/sqrt(fan_in).
pub fn init_params(cfg: &NetConfig, rng: &mut SeedRng) -> Params {
    let entries = cfg
        .manifest()
        .into_iter()
        .map(|(name, shape)| {
            let fan_in = if name.ends_with(".w") {
                shape[1] * shape[2] * shape[3]
            } else {
                // Bias bound follows the matching conv's fan-in.
                cfg.kernel_size * cfg.kernel_size
                    * match name.as_str() {
                        "enc.head.b" => 2,
                        "dec.head.b" => cfg.decoder_in_channels(),
                        _ => cfg.n_features,
                    }
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            (name, Tensor::uniform(shape, bound, rng))
        })
        .collect();
    Params { entries }
}

/// Tape nodes for every parameter, keyed by name.
pub struct ParamNodes {
    by_name: HashMap<String, NodeId>,
    ordered: Vec<NodeId>,
}

impl ParamNodes {
    pub fn insert(tape: &mut Tape, params: &Params) -> ParamNodes {
        let mut by_name = HashMap::new();
        let mut ordered = Vec::with_capacity(params.len());
        for (name, tensor) in params.entries() {
            let id = tape.leaf(tensor.clone(), true);
            by_name.insert(name.clone(), id);
            ordered.push(id);
        }
        ParamNodes { by_name, ordered }
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn ordered(&self) -> &[NodeId] {
        &self.ordered
    }
}

/// Encoder: conv head, residual blocks, ReLU, conv tail. Input is
/// `[m, 2, h, w]` (detail and un-normalized frame per input image); weights
/// are shared across frames via the batch axis.
pub fn encoder_forward(tape: &mut Tape, cfg: &NetConfig, nodes: &ParamNodes, input: NodeId) -> NodeId {
    assert_eq!(tape.value(input).shape[1], 2, "encoder expects 2 input channels");
    let mut x = tape.conv2d(input, nodes.node("enc.head.w"), Some(nodes.node("enc.head.b")));
    for i in 0..cfg.encoder_blocks {
        x = tape.residual_block(
            x,
            nodes.node(&format!("enc.res{i}.c1.w")),
            Some(nodes.node(&format!("enc.res{i}.c1.b"))),
            nodes.node(&format!("enc.res{i}.c2.w")),
            Some(nodes.node(&format!("enc.res{i}.c2.b"))),
        );
    }
    let x = tape.relu(x);
    tape.conv2d(x, nodes.node("enc.tail.w"), Some(nodes.node("enc.tail.b")))
}

/// Decoder: conv head on the concatenated pooled features, residual blocks,
/// ReLU, conv tail down to a single HR detail channel.
pub fn decoder_forward(tape: &mut Tape, cfg: &NetConfig, nodes: &ParamNodes, pooled: NodeId) -> NodeId {
    assert_eq!(
        tape.value(pooled).shape[1],
        cfg.decoder_in_channels(),
        "decoder input width mismatch"
    );
    let mut x = tape.conv2d(pooled, nodes.node("dec.head.w"), Some(nodes.node("dec.head.b")));
    for i in 0..cfg.decoder_blocks {
        x = tape.residual_block(
            x,
            nodes.node(&format!("dec.res{i}.c1.w")),
            Some(nodes.node(&format!("dec.res{i}.c1.b"))),
            nodes.node(&format!("dec.res{i}.c2.w")),
            Some(nodes.node(&format!("dec.res{i}.c2.b"))),
        );
    }
    let x = tape.relu(x);
    tape.conv2d(x, nodes.node("dec.tail.w"), Some(nodes.node("dec.tail.b")))
}

/// Trained model state plus training metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub params: Params,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: NetConfig,
    params: Vec<ManifestEntry>,
    step: u64,
    loss_history: Vec<f64>,
}

/// Write `model.json` + `weights.raw` into `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let model = ModelFile {
        config: ckpt.config.clone(),
        params: ckpt
            .params
            .entries()
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape })
            .collect(),
        step: ckpt.step,
        loss_history: ckpt.loss_history.clone(),
    };
    let model_path = dir.join("model.json");
    fs::write(&model_path, serde_json::to_string_pretty(&model).expect("serializable"))
        .map_err(|e| io_err(&model_path, e))?;

    let weights_path = dir.join("weights.raw");
    let mut file = fs::File::create(&weights_path).map_err(|e| io_err(&weights_path, e))?;
    let mut bytes = Vec::with_capacity(ckpt.params.total_values() * 4);
    for (_, t) in ckpt.params.entries() {
        for &v in &t.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&bytes).map_err(|e| io_err(&weights_path, e))?;
    Ok(())
}

/// Load and validate a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let model_path = dir.join("model.json");
    let text = fs::read_to_string(&model_path).map_err(|e| io_err(&model_path, e))?;
    let model: ModelFile = serde_json::from_str(&text).map_err(|source| {
        CheckpointError::MalformedModel { path: model_path.clone(), source }
    })?;
    model.config.validate()?;

    let expected_manifest = model.config.manifest();
    if model.params.len() != expected_manifest.len() {
        return Err(CheckpointError::ManifestCount {
            got: model.params.len(),
            expected: expected_manifest.len(),
        });
    }
    for (entry, (name, shape)) in model.params.iter().zip(&expected_manifest) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::ManifestShape {
                name: entry.name.clone(),
                shape: entry.shape,
                expected: *shape,
            });
        }
    }

    let weights_path = dir.join("weights.raw");
    let bytes = fs::read(&weights_path).map_err(|e| io_err(&weights_path, e))?;
    let total: usize = model.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() as u64 != 4 * total as u64 {
        return Err(CheckpointError::WeightsSize {
            expected: 4 * total as u64,
            actual: bytes.len() as u64,
        });
    }

    let mut offset = 0usize;
    let mut entries = Vec::with_capacity(model.params.len());
    for entry in &model.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = (offset + i) * 4;
            let v = f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            data.push(v as f64);
        }
        offset += n;
        entries.push((entry.name.clone(), Tensor::from_vec(entry.shape, data)));
    }

    Ok(Checkpoint {
        config: model.config,
        params: Params { entries },
        step: model.step,
        loss_history: model.loss_history,
    })
}

/// Build a parameter set directly from entries (used by the trainer).
pub fn params_from_entries(entries: Vec<(String, Tensor)>) -> Params {
    Params { entries }
}
