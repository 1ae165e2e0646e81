//! File formats and dataset-bundle persistence.
//!
//! - Matrices: "EMB1" binary — magic bytes `EMB1`, u32 LE row count, u32 LE
//!   column count, then rows x cols IEEE-754 f32 LE values, row-major.
//!   Files hold f32; all in-memory math is f64, and every embedding matrix is
//!   L2-normalized once at ingestion.
//! - Manifest, config, labels, masks, metrics: JSON.
//! - Prediction records: JSON Lines (one record per line) so a run can
//!   stream-append and a partial file stays valid for prefix evaluation.

use crate::datagen::SynthBundle;
use crate::engine::PredictionRecord;
use crate::error::{Error, Result};
use crate::math::Mat;
use crate::space::{BundleFiles, CompositionSpace, Manifest, Pair};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"EMB1";

/// Canonical file names used by `synth` when writing a bundle directory.
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEXT_FILE: &str = "text_embeddings.emb";
pub const TRAIN_FEATURES_FILE: &str = "train_features.emb";
pub const TRAIN_LABELS_FILE: &str = "train_labels.json";
pub const TEST_FEATURES_FILE: &str = "test_features.emb";
pub const TEST_LABELS_FILE: &str = "test_labels.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path.display().to_string(), source)
}

/// Write a matrix as EMB1, casting to f32.
pub fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    if m.rows() > u32::MAX as usize || m.cols() > u32::MAX as usize {
        return Err(Error::Input(format!(
            "matrix {}x{} exceeds the EMB1 u32 dimension range",
            m.rows(),
            m.cols()
        )));
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err(path))?;
    w.write_all(&(m.rows() as u32).to_le_bytes())
        .map_err(io_err(path))?;
    w.write_all(&(m.cols() as u32).to_le_bytes())
        .map_err(io_err(path))?;
    for &v in m.data() {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Read an EMB1 matrix into f64 (no normalization here).
pub fn read_matrix(path: &Path) -> Result<Mat> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err(path))?;
    let bad = |m: String| Err(Error::Input(format!("{}: {m}", path.display())));
    if bytes.len() < 12 {
        return bad(format!(
            "EMB1 header needs 12 bytes, file has {}",
            bytes.len()
        ));
    }
    if &bytes[0..4] != MAGIC {
        return bad("bad magic (expected \"EMB1\")".into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12
        + 4usize
            .checked_mul(rows)
            .and_then(|x| x.checked_mul(cols))
            .ok_or_else(|| Error::Input(format!("{}: dimension overflow", path.display())))?;
    if bytes.len() != expected {
        return bad(format!(
            "expected {expected} bytes for {rows}x{cols}, file has {}",
            bytes.len()
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Mat::from_vec(rows, cols, data)
}

/// Write any serializable document as pretty JSON (with trailing newline).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Input(format!("{}: serialize: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

/// Streaming JSONL record writer: one JSON object per line, flushed per
/// record so a crash leaves a valid prefix.
pub struct RecordWriter {
    w: BufWriter<File>,
    path: PathBuf,
    count: usize,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            w: BufWriter::new(file),
            path: path.to_path_buf(),
            count: 0,
        })
    }

    pub fn append(&mut self, record: &PredictionRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Input(format!("{}: serialize: {e}", self.path.display())))?;
        self.w
            .write_all(line.as_bytes())
            .map_err(io_err(&self.path))?;
        self.w.write_all(b"\n").map_err(io_err(&self.path))?;
        self.w.flush().map_err(io_err(&self.path))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Read a JSONL record file; a malformed line fails with its 1-based number.
pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let record = serde_json::from_str(&line).map_err(|e| Error::Records {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = RecordWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    Ok(())
}

/// A dataset held fully in memory with normalized f64 embeddings, ready for
/// the engine.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    pub mask: Option<Vec<bool>>,
    pub text: Mat,
    pub train_features: Mat,
    pub train_labels: Vec<Pair>,
    pub test_features: Mat,
    pub test_labels: Vec<Pair>,
}

impl DatasetBundle {
    /// Load a bundle from its manifest file; embedded paths resolve relative
    /// to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        let files = manifest.files.clone().ok_or_else(|| {
            Error::Manifest(format!(
                "{}: manifest has no files section",
                manifest_path.display()
            ))
        })?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| dir.join(p);
        let mask = match &files.feasibility_mask {
            Some(p) => Some(read_json::<Vec<bool>>(&resolve(p))?),
            None => None,
        };
        let bundle = Self {
            text: read_matrix(&resolve(&files.text_embeddings))?,
            train_features: read_matrix(&resolve(&files.train_features))?,
            train_labels: read_json(&resolve(&files.train_labels))?,
            test_features: read_matrix(&resolve(&files.test_features))?,
            test_labels: read_json(&resolve(&files.test_labels))?,
            manifest,
            mask,
        };
        bundle.normalize_and_validate()
    }

    /// Wrap an in-memory synthetic bundle.
    pub fn from_synth(synth: SynthBundle) -> Result<Self> {
        Self {
            manifest: synth.manifest,
            mask: None,
            text: synth.text,
            train_features: synth.train_features,
            train_labels: synth.train_labels,
            test_features: synth.test_features,
            test_labels: synth.test_labels,
        }
        .normalize_and_validate()
    }

    pub fn space(&self) -> Result<CompositionSpace> {
        crate::space::build_composition_space(&self.manifest, self.mask.as_deref())
    }

    fn normalize_and_validate(mut self) -> Result<Self> {
        let space = self.space()?;
        let dim = self.text.cols();
        if dim == 0 {
            return Err(Error::Shape("embedding dimension is zero".into()));
        }
        if self.text.rows() != space.candidate_count() {
            return Err(Error::Shape(format!(
                "text embeddings have {} rows but the space has {} candidates",
                self.text.rows(),
                space.candidate_count()
            )));
        }
        for (name, m) in [
            ("train features", &self.train_features),
            ("test features", &self.test_features),
        ] {
            if m.cols() != dim {
                return Err(Error::Shape(format!(
                    "{name} have dimension {} but text embeddings have {dim}",
                    m.cols()
                )));
            }
        }
        if self.train_features.rows() != self.train_labels.len() {
            return Err(Error::Shape(format!(
                "{} train features vs {} train labels",
                self.train_features.rows(),
                self.train_labels.len()
            )));
        }
        if self.test_features.rows() != self.test_labels.len() {
            return Err(Error::Shape(format!(
                "{} test features vs {} test labels",
                self.test_features.rows(),
                self.test_labels.len()
            )));
        }
        if self.test_features.rows() == 0 {
            return Err(Error::Input("test set is empty".into()));
        }
        for (kind, labels) in [("train", &self.train_labels), ("test", &self.test_labels)] {
            for (i, pair) in labels.iter().enumerate() {
                let idx = space.candidate_index(*pair).ok_or_else(|| {
                    Error::Input(format!(
                        "{kind} label {i}: pair ({}, {}) is not a candidate",
                        pair.attr, pair.obj
                    ))
                })?;
                if kind == "train" && !space.is_seen(idx) {
                    return Err(Error::Input(format!(
                        "train label {i}: pair ({}, {}) is not a seen pair",
                        pair.attr, pair.obj
                    )));
                }
            }
        }
        for (name, m) in [
            ("text embeddings", &mut self.text),
            ("train features", &mut self.train_features),
            ("test features", &mut self.test_features),
        ] {
            if !m.is_finite() {
                return Err(Error::Input(format!("{name} contain non-finite values")));
            }
            m.l2_normalize_rows()?;
        }
        Ok(self)
    }
}

/// Write a synthetic bundle as a directory of files; returns the manifest
/// path. The manifest gains a files section pointing at the sibling files.
pub fn write_bundle(dir: &Path, bundle: &SynthBundle) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_matrix(&dir.join(TEXT_FILE), &bundle.text)?;
    write_matrix(&dir.join(TRAIN_FEATURES_FILE), &bundle.train_features)?;
    write_json(&dir.join(TRAIN_LABELS_FILE), &bundle.train_labels)?;
    write_matrix(&dir.join(TEST_FEATURES_FILE), &bundle.test_features)?;
    write_json(&dir.join(TEST_LABELS_FILE), &bundle.test_labels)?;
    let mut manifest = bundle.manifest.clone();
    manifest.files = Some(BundleFiles {
        text_embeddings: TEXT_FILE.into(),
        train_features: TRAIN_FEATURES_FILE.into(),
        train_labels: TRAIN_LABELS_FILE.into(),
        test_features: TEST_FEATURES_FILE.into(),
        test_labels: TEST_LABELS_FILE.into(),
        feasibility_mask: None,
    });
    let manifest_path = dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}
