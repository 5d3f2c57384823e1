//! Activation traces and their on-disk bundle format.
//!
//! A bundle is a directory holding:
//!
//! | file             | contents                                                   |
//! |------------------|------------------------------------------------------------|
//! | `manifest.json`  | version, shape, position strategy, label set, dtype tag    |
//! | `activations.bin`| `[N, L, d]` row-major, `f32` little-endian                 |
//! | `errors.bin`     | `[N]` `f32` little-endian                                  |
//! | `probs.bin`      | `[N]` `f32` little-endian                                  |
//! | `labels.json`    | `{"true_labels": [...], "predicted_labels": [...]}`        |
//!
//! The same layout is written by external exporters, so it must stay
//! bit-exact across versions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeraError, Result};

pub const BUNDLE_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

const MANIFEST: &str = "manifest.json";
const ACTIVATIONS: &str = "activations.bin";
const ERRORS: &str = "errors.bin";
const PROBS: &str = "probs.bin";
const LABELS: &str = "labels.json";

/// Which token position the activations were read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionStrategy {
    /// Final prompt token.
    Last,
    /// First generated token matching a label variant.
    Exact,
}

impl PositionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Last => "last",
            Self::Exact => "exact",
        }
    }
}

impl std::str::FromStr for PositionStrategy {
    type Err = MeraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "exact" => Ok(Self::Exact),
            other => Err(MeraError::validation(format!("unknown position strategy {other:?}"))),
        }
    }
}

/// Per-example residual activations for every layer, plus the errors and
/// labels they were observed with.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub n_layers: usize,
    pub hidden_dim: usize,
    /// `[N, L, d]` row-major.
    pub activations: Vec<f32>,
    pub errors: Vec<f32>,
    pub true_labels: Vec<i32>,
    /// `-1` marks an unparseable completion.
    pub predicted_labels: Vec<i32>,
    pub label_probs: Vec<f32>,
    pub position_strategy: PositionStrategy,
    pub label_set: Vec<String>,
}

impl TraceSet {
    pub fn empty(n_layers: usize, hidden_dim: usize, strategy: PositionStrategy, label_set: Vec<String>) -> Self {
        Self {
            n_layers,
            hidden_dim,
            activations: Vec::new(),
            errors: Vec::new(),
            true_labels: Vec::new(),
            predicted_labels: Vec::new(),
            label_probs: Vec::new(),
            position_strategy: strategy,
            label_set,
        }
    }

    pub fn n_examples(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    /// Activation of example `i` at `layer`.
    pub fn activation(&self, i: usize, layer: usize) -> &[f32] {
        let start = (i * self.n_layers + layer) * self.hidden_dim;
        &self.activations[start..start + self.hidden_dim]
    }

    /// `[N, d]` row-major copy of one layer, widened to `f64`.
    pub fn layer_matrix(&self, layer: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_examples() * self.hidden_dim);
        for i in 0..self.n_examples() {
            out.extend(self.activation(i, layer).iter().map(|&x| f64::from(x)));
        }
        out
    }

    /// Correctness indicator `1[predicted == true]` per example.
    pub fn correct(&self) -> Vec<bool> {
        self.true_labels.iter().zip(&self.predicted_labels).map(|(t, p)| t == p).collect()
    }

    /// Restrict to the given example indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let row = self.n_layers * self.hidden_dim;
        let mut out = Self::empty(self.n_layers, self.hidden_dim, self.position_strategy, self.label_set.clone());
        for &i in indices {
            out.activations.extend_from_slice(&self.activations[i * row..(i + 1) * row]);
            out.errors.push(self.errors[i]);
            out.true_labels.push(self.true_labels[i]);
            out.predicted_labels.push(self.predicted_labels[i]);
            out.label_probs.push(self.label_probs[i]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_examples();
        let expected = n * self.n_layers * self.hidden_dim;
        if self.activations.len() != expected {
            return Err(MeraError::Shape(format!(
                "activations hold {} values, expected {n}x{}x{} = {expected}",
                self.activations.len(),
                self.n_layers,
                self.hidden_dim
            )));
        }
        for (name, len) in [
            ("true_labels", self.true_labels.len()),
            ("predicted_labels", self.predicted_labels.len()),
            ("label_probs", self.label_probs.len()),
        ] {
            if len != n {
                return Err(MeraError::Shape(format!("{name} has {len} entries, expected {n}")));
            }
        }
        if let Some(e) = self.errors.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(MeraError::validation(format!("error value {e} outside [0, 1]")));
        }
        if let Some(p) = self.label_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(MeraError::validation(format!("label probability {p} outside [0, 1]")));
        }
        let n_labels = self.label_set.len() as i32;
        if let Some(t) = self.true_labels.iter().find(|&&t| t < 0 || t >= n_labels) {
            return Err(MeraError::validation(format!("true label {t} outside label set of size {n_labels}")));
        }
        if let Some(p) = self.predicted_labels.iter().find(|&&p| p < -1 || p >= n_labels) {
            return Err(MeraError::validation(format!("predicted label {p} is neither -1 nor a label index")));
        }
        Ok(())
    }
}

/// The `manifest.json` of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub n_examples: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub strategy: PositionStrategy,
    pub label_set: Vec<String>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelsFile {
    true_labels: Vec<i32>,
    predicted_labels: Vec<i32>,
}

pub fn write_bundle(traces: &TraceSet, path: &Path) -> Result<()> {
    write_bundle_with_hash(traces, path, None)
}

/// Writes a bundle, recording `config_hash` in the manifest. Nothing is
/// written when `traces` fails validation.
pub fn write_bundle_with_hash(traces: &TraceSet, path: &Path, config_hash: Option<&str>) -> Result<()> {
    traces.validate()?;
    fs::create_dir_all(path)?;

    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        n_examples: traces.n_examples(),
        n_layers: traces.n_layers,
        hidden_dim: traces.hidden_dim,
        strategy: traces.position_strategy,
        label_set: traces.label_set.clone(),
        dtype: DTYPE_F32LE.to_string(),
        config_hash: config_hash.map(str::to_string),
    };
    fs::write(path.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(path.join(ACTIVATIONS), f32_to_le_bytes(&traces.activations))?;
    fs::write(path.join(ERRORS), f32_to_le_bytes(&traces.errors))?;
    fs::write(path.join(PROBS), f32_to_le_bytes(&traces.label_probs))?;
    let labels = LabelsFile {
        true_labels: traces.true_labels.clone(),
        predicted_labels: traces.predicted_labels.clone(),
    };
    fs::write(path.join(LABELS), serde_json::to_vec(&labels)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BundleManifest> {
    let manifest: BundleManifest = read_json(&path.join(MANIFEST))?;
    if manifest.version != BUNDLE_VERSION {
        return Err(MeraError::UnsupportedVersion(manifest.version));
    }
    if manifest.dtype != DTYPE_F32LE {
        return Err(MeraError::UnknownDtype(manifest.dtype));
    }
    Ok(manifest)
}

pub fn read_bundle(path: &Path) -> Result<TraceSet> {
    let manifest = read_manifest(path)?;
    let n = manifest.n_examples;

    let activations = read_f32_file(&path.join(ACTIVATIONS), n * manifest.n_layers * manifest.hidden_dim)?;
    let errors = read_f32_file(&path.join(ERRORS), n)?;
    let label_probs = read_f32_file(&path.join(PROBS), n)?;
    let labels: LabelsFile = read_json(&path.join(LABELS))?;

    let traces = TraceSet {
        n_layers: manifest.n_layers,
        hidden_dim: manifest.hidden_dim,
        activations,
        errors,
        true_labels: labels.true_labels,
        predicted_labels: labels.predicted_labels,
        label_probs,
        position_strategy: manifest.strategy,
        label_set: manifest.label_set,
    };
    traces.validate()?;
    Ok(traces)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MeraError::MissingFile(path.to_path_buf()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| MeraError::MalformedJson {
        path: path.to_path_buf(),
        source,
    })
}

fn read_f32_file(path: &Path, count: usize) -> Result<Vec<f32>> {
    require(path)?;
    let bytes = fs::read(path)?;
    let expected = (count * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(MeraError::SizeMismatch {
            file: file_name(path),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| PathBuf::from(path).display().to_string())
}

// ---------------------------------------------------------------------------
// Dataset splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Cal,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::Train, SplitTag::Val, SplitTag::Cal, SplitTag::Test];
}

/// Seeded partition of `n` examples into train/val/cal/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: [f64; 4],
    pub assignment: Vec<SplitTag>,
}

impl SplitSpec {
    /// Example indices carrying `tag`, ascending.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.assignment.iter().enumerate().filter_map(|(i, &t)| (t == tag).then_some(i)).collect()
    }

    pub fn sizes(&self) -> [usize; 4] {
        let mut sizes = [0; 4];
        for t in &self.assignment {
            sizes[*t as usize] += 1;
        }
        sizes
    }
}

/// Partition sizes by largest-remainder rounding of `n * fraction`; ties in
/// the remainder go to the earlier split (train, val, cal, test).
pub fn split_sizes(n: usize, fractions: [f64; 4]) -> Result<[usize; 4]> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(MeraError::validation(format!(
            "split fractions must be finite and non-negative, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MeraError::validation(format!("split fractions sum to {total}, expected 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 4];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let assigned: usize = sizes.iter().sum();
    let mut leftover = n.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..4).collect();
    // stable sort keeps split order among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    Ok(sizes)
}

pub fn split_dataset(n: usize, seed: u64, fractions: [f64; 4]) -> Result<SplitSpec> {
    let sizes = split_sizes(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![SplitTag::Train; n];
    let mut cursor = 0;
    for (tag, size) in SplitTag::ALL.iter().zip(sizes) {
        for &i in &order[cursor..cursor + size] {
            assignment[i] = *tag;
        }
        cursor += size;
    }
    Ok(SplitSpec { seed, fractions, assignment })
}
