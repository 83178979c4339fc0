//! On-disk sequence container and the in-memory sequence type.
//!
//! A sequence is a directory holding `meta.json` and one raw plane per frame,
//! `frame_000.raw` ... `frame_{m-1}.raw`, each exactly `4 * width * height`
//! bytes of little-endian f32 in row-major order. Single images use the same
//! layout with one frame. The format is byte-reproducible: saving a loaded
//! sequence writes identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageGrid;
use crate::noise::NoiseModel;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed {path}: {source}")]
    MalformedMeta {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("frame file {path} holds {actual} bytes, expected {expected}")]
    FrameSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("exposure {index} is {value}; exposures must be strictly positive")]
    NonPositiveExposure { index: usize, value: f64 },
    #[error("meta.json field `{field}` is invalid: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("frame {index} is {got_w}x{got_h}, sequence is {want_w}x{want_h}")]
    FrameDims {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("sequence must contain at least one frame")]
    Empty,
    #[error("exposures length {exposures} does not match frame count {frames}")]
    ExposureCount { exposures: usize, frames: usize },
    #[error("reference index {index} out of range for {frames} frames")]
    ReferenceOutOfRange { index: usize, frames: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> ContainerError {
    if source.kind() == std::io::ErrorKind::NotFound {
        ContainerError::MissingFile(path.to_path_buf())
    } else {
        ContainerError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Ordered multi-exposure low-resolution sequence.
#[derive(Clone, Debug)]
pub struct LRSequence {
    frames: Vec<ImageGrid>,
    exposures: Vec<f64>,
    reference_index: usize,
    noise_model: Option<NoiseModel>,
}

impl LRSequence {
    pub fn new(
        frames: Vec<ImageGrid>,
        exposures: Vec<f64>,
        reference_index: usize,
        noise_model: Option<NoiseModel>,
    ) -> Result<Self, ContainerError> {
        if frames.is_empty() {
            return Err(ContainerError::Empty);
        }
        if exposures.len() != frames.len() {
            return Err(ContainerError::ExposureCount {
                exposures: exposures.len(),
                frames: frames.len(),
            });
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        for (i, f) in frames.iter().enumerate() {
            if f.width() != w || f.height() != h {
                return Err(ContainerError::FrameDims {
                    index: i,
                    got_w: f.width(),
                    got_h: f.height(),
                    want_w: w,
                    want_h: h,
                });
            }
        }
        for (i, &e) in exposures.iter().enumerate() {
            if e.is_nan() || e <= 0.0 {
                return Err(ContainerError::NonPositiveExposure { index: i, value: e });
            }
        }
        if reference_index >= frames.len() {
            return Err(ContainerError::ReferenceOutOfRange {
                index: reference_index,
                frames: frames.len(),
            });
        }
        Ok(LRSequence {
            frames,
            exposures,
            reference_index,
            noise_model,
        })
    }

    pub fn frames(&self) -> &[ImageGrid] {
        &self.frames
    }

    pub fn exposures(&self) -> &[f64] {
        &self.exposures
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn noise_model(&self) -> Option<NoiseModel> {
        self.noise_model
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    /// Frames divided pixelwise by their exposure times; the sequence itself
    /// is untouched.
    pub fn normalized(&self) -> Vec<ImageGrid> {
        self.frames
            .iter()
            .zip(&self.exposures)
            .map(|(f, &e)| f.scaled(1.0 / e))
            .collect()
    }

    /// Copy of the sequence with different reported exposures.
    pub fn with_exposures(&self, exposures: Vec<f64>) -> Result<Self, ContainerError> {
        LRSequence::new(
            self.frames.clone(),
            exposures,
            self.reference_index,
            self.noise_model,
        )
    }

    /// Sequence restricted to the given frame indices; `reference_pos` is the
    /// position of the reference within `indices`.
    pub fn subset(&self, indices: &[usize], reference_pos: usize) -> Result<Self, ContainerError> {
        let frames = indices.iter().map(|&i| self.frames[i].clone()).collect();
        let exposures = indices.iter().map(|&i| self.exposures[i]).collect();
        LRSequence::new(frames, exposures, reference_pos, self.noise_model)
    }

    /// The same crop applied to every frame.
    pub fn cropped(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        LRSequence {
            frames: self.frames.iter().map(|f| f.crop(x0, y0, w, h)).collect(),
            exposures: self.exposures.clone(),
            reference_index: self.reference_index,
            noise_model: self.noise_model,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    width: usize,
    height: usize,
    frames: usize,
    exposures_ms: Vec<f64>,
    #[serde(default)]
    reference_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_model: Option<NoiseModel>,
    #[serde(default = "default_dtype")]
    dtype: String,
    #[serde(default = "default_endianness")]
    endianness: String,
    #[serde(default = "default_layout")]
    layout: String,
}

fn default_dtype() -> String {
    "f32".into()
}

fn default_endianness() -> String {
    "little".into()
}

fn default_layout() -> String {
    "row-major".into()
}

fn frame_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:03}.raw"))
}

/// Load a sequence from a container directory.
pub fn load_sequence(dir: &Path) -> Result<LRSequence, ContainerError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|source| ContainerError::MalformedMeta {
        path: meta_path.clone(),
        source,
    })?;

    if meta.width == 0 || meta.height == 0 {
        return Err(ContainerError::InvalidField {
            field: "width/height",
            reason: format!("{}x{}", meta.width, meta.height),
        });
    }
    if meta.frames == 0 {
        return Err(ContainerError::Empty);
    }
    if meta.dtype != "f32" {
        return Err(ContainerError::InvalidField {
            field: "dtype",
            reason: meta.dtype,
        });
    }
    if meta.endianness != "little" {
        return Err(ContainerError::InvalidField {
            field: "endianness",
            reason: meta.endianness,
        });
    }
    if meta.layout != "row-major" {
        return Err(ContainerError::InvalidField {
            field: "layout",
            reason: meta.layout,
        });
    }
    if meta.exposures_ms.len() != meta.frames {
        return Err(ContainerError::ExposureCount {
            exposures: meta.exposures_ms.len(),
            frames: meta.frames,
        });
    }
    for (i, &e) in meta.exposures_ms.iter().enumerate() {
        if !e.is_finite() || e <= 0.0 {
            return Err(ContainerError::NonPositiveExposure { index: i, value: e });
        }
    }

    let expected = 4 * meta.width as u64 * meta.height as u64;
    let mut frames = Vec::with_capacity(meta.frames);
    for i in 0..meta.frames {
        let path = frame_file(dir, i);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        if bytes.len() as u64 != expected {
            return Err(ContainerError::FrameSize {
                path,
                expected,
                actual: bytes.len() as u64,
            });
        }
        let mut data = Vec::with_capacity(meta.width * meta.height);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(ContainerError::InvalidField {
                    field: "frame data",
                    reason: format!("non-finite sample in {}", path.display()),
                });
            }
            data.push(v as f64);
        }
        frames.push(
            ImageGrid::new(meta.width, meta.height, data).map_err(|e| ContainerError::InvalidField {
                field: "frame data",
                reason: e.to_string(),
            })?,
        );
    }

    LRSequence::new(
        frames,
        meta.exposures_ms,
        meta.reference_index.unwrap_or(0),
        meta.noise_model,
    )
}

/// Write a sequence as a container directory. Samples are stored as f32, so
/// values beyond f32 precision are rounded once here; loading and saving
/// again reproduces the files byte for byte.
pub fn save_sequence(dir: &Path, seq: &LRSequence) -> Result<(), ContainerError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = Meta {
        version: 1,
        width: seq.width(),
        height: seq.height(),
        frames: seq.len(),
        exposures_ms: seq.exposures().to_vec(),
        reference_index: Some(seq.reference_index()),
        noise_model: seq.noise_model(),
        dtype: default_dtype(),
        endianness: default_endianness(),
        layout: default_layout(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(|e| io_err(&meta_path, e))?;

    for (i, frame) in seq.frames().iter().enumerate() {
        let path = frame_file(dir, i);
        let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut bytes = Vec::with_capacity(frame.data().len() * 4);
        for &v in frame.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        file.write_all(&bytes).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Load a single image stored as a one-frame container.
pub fn load_image(dir: &Path) -> Result<ImageGrid, ContainerError> {
    let seq = load_sequence(dir)?;
    Ok(seq.frames()[0].clone())
}

/// Store a single image as a one-frame container with unit exposure.
pub fn save_image(dir: &Path, img: &ImageGrid) -> Result<(), ContainerError> {
    let seq = LRSequence::new(vec![img.clone()], vec![1.0], 0, None)?;
    save_sequence(dir, &seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use rand::Rng;

    fn sample_seq(frames: usize, w: usize, h: usize, seed: u64) -> LRSequence {
        let mut rng = seed_rng(seed);
        let imgs: Vec<ImageGrid> = (0..frames)
            .map(|_| ImageGrid::from_fn(w, h, |_, _| rng.gen_range(0.0..3400.0)))
            .collect();
        let exposures = (0..frames).map(|i| 0.5 + i as f64).collect();
        LRSequence::new(imgs, exposures, 0, Some(NoiseModel::default())).unwrap()
    }

    #[test]
    fn zero_single_frame_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = LRSequence::new(vec![ImageGrid::zeros(4, 4)], vec![1.0], 0, None).unwrap();
        save_sequence(dir.path(), &seq).unwrap();
        let loaded = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert!(loaded.frames()[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(loaded.exposures(), &[1.0]);
        assert_eq!(loaded.reference_index(), 0);
    }

    #[test]
    fn save_load_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample_seq(3, 6, 5, 21);
        save_sequence(dir.path(), &seq).unwrap();
        let first: Vec<Vec<u8>> = (0..3)
            .map(|i| fs::read(frame_file(dir.path(), i)).unwrap())
            .collect();
        let loaded = load_sequence(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_sequence(dir2.path(), &loaded).unwrap();
        for (i, bytes) in first.iter().enumerate() {
            let second = fs::read(frame_file(dir2.path(), i)).unwrap();
            assert_eq!(bytes, &second, "frame {i} bytes differ");
        }
        let meta_a = fs::read(dir.path().join("meta.json")).unwrap();
        let meta_b = fs::read(dir2.path().join("meta.json")).unwrap();
        assert_eq!(meta_a, meta_b);
    }

    #[test]
    fn missing_frame_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample_seq(3, 4, 4, 22);
        save_sequence(dir.path(), &seq).unwrap();
        fs::remove_file(frame_file(dir.path(), 2)).unwrap();
        match load_sequence(dir.path()) {
            Err(ContainerError::MissingFile(p)) => {
                assert!(p.ends_with("frame_002.raw"));
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn frame_size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample_seq(1, 4, 4, 23);
        save_sequence(dir.path(), &seq).unwrap();
        fs::write(frame_file(dir.path(), 0), [0u8; 12]).unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(ContainerError::FrameSize { expected: 64, actual: 12, .. })
        ));
    }

    #[test]
    fn bad_exposure_and_bad_json_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample_seq(1, 4, 4, 24);
        save_sequence(dir.path(), &seq).unwrap();

        let meta_path = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta_path).unwrap();
        fs::write(&meta_path, text.replace("1.5", "-1.5").replace("0.5", "-0.5")).unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(ContainerError::NonPositiveExposure { index: 0, .. })
        ));

        fs::write(&meta_path, "{ not json").unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(ContainerError::MalformedMeta { .. })));
    }

    #[test]
    fn normalization_divides_by_exposure() {
        let img = ImageGrid::new(2, 1, vec![2.0, 4.0]).unwrap();
        let seq = LRSequence::new(vec![img], vec![2.0], 0, None).unwrap();
        let n = seq.normalized();
        assert_eq!(n[0].data(), &[1.0, 2.0]);

        let img = ImageGrid::new(2, 1, vec![2.0, 4.0]).unwrap();
        let seq = LRSequence::new(vec![img.clone()], vec![1.0], 0, None).unwrap();
        assert_eq!(seq.normalized()[0].data(), img.data());
    }

    #[test]
    fn reference_index_defaults_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample_seq(2, 4, 4, 25);
        save_sequence(dir.path(), &seq).unwrap();
        let meta_path = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta_path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("reference_index");
        fs::write(&meta_path, serde_json::to_string(&v).unwrap()).unwrap();
        let loaded = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded.reference_index(), 0);
    }

    #[test]
    fn constructor_validations() {
        assert!(matches!(
            LRSequence::new(vec![], vec![], 0, None),
            Err(ContainerError::Empty)
        ));
        let imgs = vec![ImageGrid::zeros(2, 2), ImageGrid::zeros(3, 2)];
        assert!(matches!(
            LRSequence::new(imgs, vec![1.0, 1.0], 0, None),
            Err(ContainerError::FrameDims { index: 1, .. })
        ));
        let imgs = vec![ImageGrid::zeros(2, 2)];
        assert!(matches!(
            LRSequence::new(imgs, vec![1.0], 3, None),
            Err(ContainerError::ReferenceOutOfRange { .. })
        ));
    }
}
