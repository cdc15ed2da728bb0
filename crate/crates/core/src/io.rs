//! On-disk formats: model JSON, dataset manifests, sequence CSVs and
//! diagnostic dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Posterior;
use crate::learning::TraceEntry;
use crate::model::{ModelParams, Sequence};

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Serialized form of [`ModelParams`]. Matrices are nested row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub class_prior: Vec<f64>,
    pub init_dist: Vec<f64>,
    pub class_names: Vec<String>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<Vec<f64>>>,
    pub pi: Vec<Vec<Vec<f64>>>,
    pub g: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidParameter(format!("{name} must be {nrows}×{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<ModelParams> for ModelDocument {
    fn from(p: ModelParams) -> Self {
        ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            k: p.k,
            d: p.d,
            c: p.c,
            alpha: p.alpha,
            kappa: p.kappa,
            class_prior: p.class_prior,
            init_dist: p.init_dist,
            class_names: p.class_names,
            mu: p.mu.iter().map(|m| m.iter().copied().collect()).collect(),
            sigma: p.sigma.iter().map(rows).collect(),
            pi: p.pi.iter().map(rows).collect(),
            g: rows(&p.g),
        }
    }
}

impl TryFrom<ModelDocument> for ModelParams {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "model schema_version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let (k, d, c) = (doc.k, doc.d, doc.c);
        if doc.mu.len() != k || doc.sigma.len() != k || doc.pi.len() != c {
            return Err(Error::InvalidParameter(format!(
                "expected {k} means, {k} covariances and {c} transition matrices"
            )));
        }
        let mu = doc
            .mu
            .iter()
            .enumerate()
            .map(|(s, m)| {
                if m.len() == d {
                    Ok(DVector::from_column_slice(m))
                } else {
                    Err(Error::InvalidParameter(format!("mean of state {s} must have length {d}")))
                }
            })
            .collect::<Result<_>>()?;
        let sigma = doc
            .sigma
            .iter()
            .enumerate()
            .map(|(s, m)| from_rows(&format!("sigma[{s}]"), m, d, d))
            .collect::<Result<_>>()?;
        let pi = doc
            .pi
            .iter()
            .enumerate()
            .map(|(cl, m)| from_rows(&format!("pi[{cl}]"), m, k, k))
            .collect::<Result<_>>()?;
        let params = ModelParams {
            k,
            d,
            c,
            mu,
            sigma,
            pi,
            g: from_rows("g", &doc.g, k, d)?,
            alpha: doc.alpha,
            kappa: doc.kappa,
            class_prior: doc.class_prior,
            init_dist: doc.init_dist,
            class_names: doc.class_names,
        };
        params.validate()?;
        Ok(params)
    }
}

impl Serialize for ModelParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelDocument::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ModelDocument::deserialize(d)?;
        ModelParams::try_from(doc).map_err(serde::de::Error::custom)
    }
}

pub fn model_to_json(params: &ModelParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(params)? + "\n")
}

/// Parses and validates a model document.
pub fn model_from_json(text: &str) -> Result<ModelParams> {
    let doc: ModelDocument = serde_json::from_str(text)?;
    ModelParams::try_from(doc)
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &model_to_json(params)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Sequence CSV, relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(default)]
    pub notes: String,
}

/// Sequences loaded from a manifest, with labels mapped to class indices in
/// manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub sequences: Vec<Sequence>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!(
                "manifest schema_version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                manifest.schema_version
            ),
        });
    }
    Ok(manifest)
}

/// Loads every sequence a manifest references, in manifest order.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut sequences = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let label = match &entry.label {
            None => None,
            Some(name) => Some(manifest.class_names.iter().position(|c| c == name).ok_or_else(|| {
                Error::Parse {
                    path: manifest_path.display().to_string(),
                    message: format!(
                        "entry {} has label {name:?} which is not one of {:?}",
                        entry.id, manifest.class_names
                    ),
                }
            })?),
        };
        let file = resolve(base, &entry.path);
        let x = read_sequence_csv(&file, Some(manifest.d))?;
        sequences.push(Sequence::new(entry.id.clone(), x, label).map_err(|e| Error::Parse {
            path: file.display().to_string(),
            message: e.to_string(),
        })?);
    }
    Ok(Dataset {
        class_names: manifest.class_names,
        sequences,
    })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a `T × D` CSV (rows are timesteps). A first line containing any
/// non-numeric cell is treated as a header.
pub fn read_sequence_csv(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut width = expected_dim;
    let mut t_len = 0;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Vec<std::result::Result<f64, _>> = cells.iter().map(|c| c.parse::<f64>()).collect();
        if line_no == 0 && parsed.iter().any(|p| p.is_err()) {
            continue;
        }
        match width {
            Some(w) if w != cells.len() => {
                return Err(err(format!(
                    "line {} has {} columns, expected {w}",
                    line_no + 1,
                    cells.len()
                )))
            }
            None => width = Some(cells.len()),
            _ => {}
        }
        for (col, p) in parsed.into_iter().enumerate() {
            let v = p.map_err(|_| {
                err(format!("line {} column {}: {:?} is not a number", line_no + 1, col + 1, cells[col]))
            })?;
            if !v.is_finite() {
                return Err(err(format!("line {} column {}: non-finite value", line_no + 1, col + 1)));
            }
            values.push(v);
        }
        t_len += 1;
    }
    let width = width.unwrap_or(0);
    if t_len == 0 {
        return Err(err("no data rows".into()));
    }
    Ok(DMatrix::from_row_slice(t_len, width, &values))
}

/// CSV text with a `dim_0..dim_{D-1}` header and shortest round-trip floats.
pub fn sequence_csv(x: &DMatrix<f64>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..x.ncols()).map(|j| format!("dim_{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in x.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_sequence_csv(path: impl AsRef<Path>, x: &DMatrix<f64>) -> Result<()> {
    write_text(path, &sequence_csv(x))
}

/// Writes each sequence to `dir/sequences/<id>.csv` and a manifest
/// `dir/<manifest_name>` that references them.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    manifest_name: &str,
    class_names: &[String],
    sequences: &[Sequence],
    notes: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let d = sequences.first().map_or(0, |s| s.dim());
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let rel = format!("sequences/{}.csv", seq.id);
        write_sequence_csv(dir.join(&rel), &seq.x)?;
        let label = match seq.label {
            Some(y) => Some(
                class_names
                    .get(y)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("label {y} has no class name")))?,
            ),
            None => None,
        };
        entries.push(ManifestEntry {
            id: seq.id.clone(),
            path: rel,
            label,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        class_names: class_names.to_vec(),
        entries,
        d,
        notes: notes.to_string(),
    };
    let path = dir.join(manifest_name);
    write_text(&path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(path)
}

/// `t,k,gamma` rows for one (sequence, class) posterior.
pub fn posterior_csv(post: &Posterior) -> String {
    let mut out = String::from("t,k,gamma\n");
    for t in 0..post.gamma.nrows() {
        for k in 0..post.gamma.ncols() {
            let _ = writeln!(out, "{t},{k},{:?}", post.gamma[(t, k)]);
        }
    }
    out
}

/// `iteration,objective,e_seconds,m_seconds` rows.
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("iteration,objective,e_seconds,m_seconds\n");
    for e in trace {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", e.iteration, e.objective, e.e_seconds, e.m_seconds);
    }
    out
}
