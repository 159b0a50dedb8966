//! Model-zoo manifests and activation tensor files.
//!
//! A zoo is described by a JSON manifest listing one entry per model; each
//! entry points at an ATF file holding that model's final-layer activations
//! over the shared exemplar grid.
//!
//! ATF layout (little-endian):
//!
//! ```text
//! magic  : 41 54 46 31 ("ATF1")
//! rank   : u32 (always 3)
//! dims   : rank x u32  (M, C, d)
//! values : M*C*d x f32, row-major (exemplar, class, activation)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ATF_MAGIC: [u8; 4] = *b"ATF1";
const ATF_RANK: u32 = 3;
const HEADER_LEN: usize = 4 + 4 + 3 * 4;

#[derive(Error, Debug)]
pub enum IngestError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("schema violation in `{field}`: {detail}")]
    SchemaViolation { field: String, detail: String },

    #[error("duplicate model id `{0}`")]
    DuplicateModelId(String),

    #[error("inconsistent shape for model `{model_id}`: expected M={expected_m}, C={expected_c}, found M={found_m}, C={found_c}")]
    InconsistentShape {
        model_id: String,
        expected_m: usize,
        expected_c: usize,
        found_m: usize,
        found_c: usize,
    },

    #[error("{}: not an ATF file (bad magic)", .0.display())]
    BadMagic(PathBuf),

    #[error("{}: truncated ({detail})", .path.display())]
    TruncatedFile { path: PathBuf, detail: String },

    #[error("{}: non-finite value at flat index {index}", .path.display())]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("npy import: {0}")]
    Npy(String),

    #[error("i/o failure on {}: {source}", .path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Clean,
    Backdoor,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Clean => "clean",
            Label::Backdoor => "backdoor",
            Label::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
    #[serde(default)]
    pub arch: String,
}

impl ModelEntry {
    pub fn is_backdoor_reference(&self) -> bool {
        self.split == Split::Train && self.label == Label::Backdoor
    }
}

/// On-disk manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub exemplars_per_class: usize,
    pub num_classes: usize,
    pub models: Vec<ModelEntry>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

/// A validated zoo manifest. Entry paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ZooManifest {
    pub models: Vec<ModelEntry>,
    pub exemplars_per_class: usize,
    pub num_classes: usize,
    pub notes: String,
}

impl ZooManifest {
    /// Validates an in-memory manifest (no file checks).
    pub fn new(
        models: Vec<ModelEntry>,
        exemplars_per_class: usize,
        num_classes: usize,
        notes: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let manifest = ZooManifest {
            models,
            exemplars_per_class,
            num_classes,
            notes: notes.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Number of exemplar rows `M * C`.
    pub fn rows(&self) -> usize {
        self.exemplars_per_class * self.num_classes
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.iter().map(|m| m.id.clone()).collect()
    }

    fn validate(&self) -> Result<(), IngestError> {
        let violation = |field: &str, detail: &str| IngestError::SchemaViolation {
            field: field.to_string(),
            detail: detail.to_string(),
        };
        if self.models.len() < 2 {
            return Err(violation("models", "a zoo needs at least 2 models"));
        }
        if self.exemplars_per_class < 2 {
            return Err(violation("exemplars_per_class", "must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(violation("num_classes", "must be at least 2"));
        }
        let mut seen = HashSet::new();
        for (i, m) in self.models.iter().enumerate() {
            if m.id.is_empty() {
                return Err(violation(&format!("models[{i}].id"), "empty id"));
            }
            if !seen.insert(m.id.as_str()) {
                return Err(IngestError::DuplicateModelId(m.id.clone()));
            }
            if m.split == Split::Train && m.label == Label::Unknown {
                return Err(violation(
                    &format!("models[{i}].label"),
                    "train entries must be labeled clean or backdoor",
                ));
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> ManifestFile {
        ManifestFile {
            exemplars_per_class: self.exemplars_per_class,
            num_classes: self.num_classes,
            models: self.models.clone(),
            notes: self.notes.clone(),
        }
    }
}

/// One model's activations, stored as `M x C x d` row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub model_id: String,
    pub exemplars: usize,
    pub classes: usize,
    pub width: usize,
    /// Number of hidden layers the activations came from; always the final layer.
    pub layer_count: usize,
    data: Vec<f32>,
}

impl ActivationSet {
    pub fn new(
        model_id: impl Into<String>,
        exemplars: usize,
        classes: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, IngestError> {
        if exemplars < 2 || classes < 2 || width < 1 {
            return Err(IngestError::ShapeMismatch(format!(
                "activation shape {exemplars}x{classes}x{width} needs M>=2, C>=2, d>=1"
            )));
        }
        if data.len() != exemplars * classes * width {
            return Err(IngestError::ShapeMismatch(format!(
                "{} values for shape {exemplars}x{classes}x{width}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::NonFiniteValue {
                path: PathBuf::new(),
                index,
            });
        }
        Ok(ActivationSet {
            model_id: model_id.into(),
            exemplars,
            classes,
            width,
            layer_count: 1,
            data,
        })
    }

    pub fn zeros(model_id: impl Into<String>, exemplars: usize, classes: usize, width: usize) -> Self {
        Self::new(model_id, exemplars, classes, width, vec![0.0; exemplars * classes * width])
            .expect("zero tensor is valid")
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Activation vector for exemplar `m` of class `c`.
    pub fn vector(&self, m: usize, c: usize) -> &[f32] {
        let start = (m * self.classes + c) * self.width;
        &self.data[start..start + self.width]
    }

    pub fn rows(&self) -> usize {
        self.exemplars * self.classes
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<[usize; 3], IngestError> {
    if bytes.len() < 4 || bytes[..4] != ATF_MAGIC {
        return Err(IngestError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 8 {
        return Err(IngestError::TruncatedFile {
            path: path.to_path_buf(),
            detail: "missing rank".into(),
        });
    }
    let rank = read_u32(bytes, 4);
    if rank != ATF_RANK {
        return Err(IngestError::ShapeMismatch(format!(
            "{}: rank {rank}, expected {ATF_RANK}",
            path.display()
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(IngestError::TruncatedFile {
            path: path.to_path_buf(),
            detail: "incomplete dims header".into(),
        });
    }
    Ok([
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
    ])
}

/// Reads only the `(M, C, d)` header of an ATF file.
pub fn read_atf_dims(path: &Path) -> Result<[usize; 3], IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let mut head = Vec::with_capacity(HEADER_LEN);
    File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut head))
        .map_err(io_err(path))?;
    parse_header(path, &head)
}

/// Decodes an ATF byte buffer.
pub fn decode_atf(model_id: &str, path: &Path, bytes: &[u8]) -> Result<ActivationSet, IngestError> {
    let [m, c, d] = parse_header(path, bytes)?;
    let count = m
        .checked_mul(c)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| IngestError::ShapeMismatch(format!("dims {m}x{c}x{d} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count * 4 {
        return Err(IngestError::TruncatedFile {
            path: path.to_path_buf(),
            detail: format!("{} payload bytes, expected {}", payload.len(), count * 4),
        });
    }
    if payload.len() > count * 4 {
        return Err(IngestError::ShapeMismatch(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            payload.len() - count * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(IngestError::NonFiniteValue {
            path: path.to_path_buf(),
            index,
        });
    }
    ActivationSet::new(model_id, m, c, d, data)
}

pub fn encode_atf(set: &ActivationSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.data.len() * 4);
    out.extend_from_slice(&ATF_MAGIC);
    out.extend_from_slice(&ATF_RANK.to_le_bytes());
    for dim in [set.exemplars, set.classes, set.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads the activation file of `entry` and checks it against the zoo's `(M, C)`.
pub fn read_activations(entry: &ModelEntry, expected: (usize, usize)) -> Result<ActivationSet, IngestError> {
    let path = &entry.path;
    if !path.exists() {
        return Err(IngestError::MissingFile(path.clone()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let set = decode_atf(&entry.id, path, &bytes)?;
    if (set.exemplars, set.classes) != expected {
        return Err(IngestError::ShapeMismatch(format!(
            "{}: {}x{} exemplar grid, expected {}x{}",
            path.display(),
            set.exemplars,
            set.classes,
            expected.0,
            expected.1
        )));
    }
    Ok(set)
}

pub fn write_activations(set: &ActivationSet, path: &Path) -> Result<(), IngestError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_atf(set)).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Parses a manifest document; relative entry paths are resolved against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<ZooManifest, IngestError> {
    let file: ManifestFile = serde_json::from_str(text).map_err(|e| IngestError::SchemaViolation {
        field: schema_field(&e.to_string()),
        detail: e.to_string(),
    })?;
    let models = file
        .models
        .into_iter()
        .map(|mut m| {
            if m.path.is_relative() {
                m.path = base_dir.join(&m.path);
            }
            m
        })
        .collect();
    ZooManifest::new(models, file.exemplars_per_class, file.num_classes, file.notes)
}

// serde_json reports "missing field `x`" / "unknown field `x`"; surface the name.
fn schema_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<document>").to_string()
}

/// Loads a manifest and validates it against the activation files it references.
pub fn load_manifest(path: &Path) -> Result<ZooManifest, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    for entry in &manifest.models {
        let [m, c, _] = read_atf_dims(&entry.path)?;
        if m != manifest.exemplars_per_class || c != manifest.num_classes {
            return Err(IngestError::InconsistentShape {
                model_id: entry.id.clone(),
                expected_m: manifest.exemplars_per_class,
                expected_c: manifest.num_classes,
                found_m: m,
                found_c: c,
            });
        }
    }
    Ok(manifest)
}

/// Writes a manifest with entry paths made relative to the manifest directory where possible.
pub fn write_manifest(manifest: &ZooManifest, path: &Path) -> Result<(), IngestError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut file = manifest.to_file();
    for m in &mut file.models {
        if let Ok(rel) = m.path.strip_prefix(base) {
            m.path = rel.to_path_buf();
        }
    }
    let text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Loads every activation set referenced by a manifest, in manifest order.
pub fn load_zoo(manifest: &ZooManifest) -> Result<Vec<ActivationSet>, IngestError> {
    use rayon::prelude::*;
    let expected = (manifest.exemplars_per_class, manifest.num_classes);
    manifest
        .models
        .par_iter()
        .map(|entry| read_activations(entry, expected))
        .collect()
}

/// Converts a `.npy` array of shape `(M, C, d)` (float32 or float64, C order) to an activation set.
pub fn activations_from_npy(model_id: &str, path: &Path) -> Result<ActivationSet, IngestError> {
    use npyz::{DType, NpyFile, Order, TypeChar};

    let bytes = fs::read(path).map_err(io_err(path))?;
    let npy = NpyFile::new(&bytes[..]).map_err(|e| IngestError::Npy(e.to_string()))?;
    if npy.order() != Order::C {
        return Err(IngestError::Npy("only C-order arrays are supported".into()));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&s| s as usize).collect();
    if shape.len() != 3 {
        return Err(IngestError::ShapeMismatch(format!(
            "npy array has rank {}, expected 3 (M, C, d)",
            shape.len()
        )));
    }
    let data: Vec<f32> = match npy.dtype() {
        DType::Plain(ts) if ts.type_char() == TypeChar::Float && ts.size_field() == 4 => npy
            .into_vec::<f32>()
            .map_err(|e| IngestError::Npy(e.to_string()))?,
        DType::Plain(ts) if ts.type_char() == TypeChar::Float && ts.size_field() == 8 => npy
            .into_vec::<f64>()
            .map_err(|e| IngestError::Npy(e.to_string()))?
            .into_iter()
            .map(|v| v as f32)
            .collect(),
        other => return Err(IngestError::Npy(format!("unsupported dtype {}", other.descr()))),
    };
    ActivationSet::new(model_id, shape[0], shape[1], shape[2], data).map_err(|e| match e {
        IngestError::NonFiniteValue { index, .. } => IngestError::NonFiniteValue {
            path: path.to_path_buf(),
            index,
        },
        other => other,
    })
}
