//! On-disk formats: the `BLFT` tensor container and the JSON documents that
//! tie a run together.
//!
//! Tensor layout (all integers little-endian):
//!
//! | bytes      | field                                   |
//! |------------|-----------------------------------------|
//! | 4          | magic `BLFT`                            |
//! | 1          | version, `1`                            |
//! | 1          | dtype, `1` = float32                    |
//! | 1          | ndim                                    |
//! | 8 · ndim   | dims as u64                             |
//! | 4 · Π dims | row-major float32 payload               |
//!
//! Relative paths inside JSON documents resolve against the directory of the
//! document that contains them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::diffusion::LinearDenoiser;
use crate::error::{Error, Result};
use crate::metrics::{FeatureSet, MetricResult};
use crate::motion::{MotionSequence, Segment, Skeleton};
use crate::protocol::{MultimodalIndex, Preset};

pub const TENSOR_MAGIC: &[u8; 4] = b"BLFT";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const FORMAT_VERSION: u32 = 1;

/// A dense float32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_array<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.iter().map(|&v| v as f64).collect())
            .expect("shape validated on construction")
    }

    fn expect_ndim(&self, ndim: usize, what: &str) -> Result<()> {
        if self.shape.len() != ndim {
            return Err(Error::Format(format!(
                "{what}: expected a {ndim}-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn to_array3(&self) -> Result<Array3<f64>> {
        self.expect_ndim(3, "window")?;
        Ok(self.to_array().into_dimensionality().expect("ndim checked"))
    }

    pub fn to_array4(&self) -> Result<Array4<f64>> {
        self.expect_ndim(4, "prediction set")?;
        Ok(self.to_array().into_dimensionality().expect("ndim checked"))
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        self.expect_ndim(2, "matrix")?;
        Ok(DMatrix::from_row_iterator(
            self.shape[0],
            self.shape[1],
            self.data.iter().map(|&v| v as f64),
        ))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            data: m.transpose().iter().map(|&v| v as f32).collect(),
        }
    }
}

pub fn header_len(ndim: usize) -> usize {
    7 + 8 * ndim
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.shape.len()) + 4 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(DTYPE_F32);
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 7 {
        return Err(Error::Format(format!(
            "tensor header truncated: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"BLFT\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::Version {
            found: bytes[4],
            expected: TENSOR_VERSION,
        });
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    let header = header_len(ndim);
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "tensor header truncated: expected {header} bytes, got {}",
            bytes.len()
        )));
    }
    let shape = bytes[7..header]
        .chunks_exact(8)
        .map(|c| {
            let d = u64::from_le_bytes(c.try_into().unwrap());
            usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((shape, header))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (shape, header) = decode_header(bytes)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("payload size overflows for shape {shape:?}")))?;
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(Error::Format(format!(
            "payload length mismatch: expected {count} bytes, got {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| with_path(e, path))
}

/// Reads only the header and returns the shape.
pub fn read_tensor_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 7];
    file.read_exact(&mut head).map_err(|_| with_path(Error::Format("tensor header truncated".into()), path))?;
    let mut bytes = head.to_vec();
    bytes.resize(header_len(head[6] as usize), 0);
    file.read_exact(&mut bytes[7..])
        .map_err(|_| with_path(Error::Format("tensor header truncated".into()), path))?;
    decode_header(&bytes).map(|(s, _)| s).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

pub fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_owned)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub tensor_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_label: Option<String>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub fps: f64,
    pub skeleton: Skeleton,
    pub clips: Vec<ClipEntry>,
}

/// A manifest whose tensor files have been checked to exist with the right shape.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = read_json(path)?;
        let loaded = LoadedManifest {
            manifest,
            base_dir: parent_dir(path),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported manifest version {}", m.version)));
        }
        if !(m.fps.is_finite() && m.fps > 0.0) {
            return Err(Error::invalid(format!("manifest fps must be positive, got {}", m.fps)));
        }
        m.skeleton.validate()?;
        let mut ids = HashSet::new();
        for clip in &m.clips {
            if !ids.insert(clip.clip_id.as_str()) {
                return Err(Error::invalid(format!("duplicate clip id `{}`", clip.clip_id)));
            }
            let path = self.clip_path(clip);
            if !path.is_file() {
                return Err(Error::invalid(format!(
                    "clip `{}`: tensor file {} does not exist",
                    clip.clip_id,
                    path.display()
                )));
            }
            let shape = read_tensor_shape(&path)?;
            if shape.len() != 3 || shape[1] != m.skeleton.joint_count || shape[2] != 3 {
                return Err(Error::invalid(format!(
                    "clip `{}`: tensor shape {shape:?} is not [F x {} x 3]",
                    clip.clip_id, m.skeleton.joint_count
                )));
            }
        }
        Ok(())
    }

    pub fn clip_path(&self, clip: &ClipEntry) -> PathBuf {
        resolve(&self.base_dir, &clip.tensor_path)
    }

    pub fn load_clip(&self, clip: &ClipEntry) -> Result<MotionSequence> {
        let frames = read_tensor(self.clip_path(clip))?.to_array3()?;
        Ok(MotionSequence::new(clip.clip_id.clone(), self.manifest.fps, frames)?
            .with_labels(clip.class_label.clone(), clip.dataset_label.clone()))
    }

    /// Loads every clip, or only those in `split`.
    pub fn load_clips(&self, split: Option<&str>) -> Result<Vec<MotionSequence>> {
        self.manifest
            .clips
            .iter()
            .filter(|c| split.is_none_or(|s| c.split == s))
            .map(|c| self.load_clip(c))
            .collect()
    }
}

/// Output of `segment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentsFile {
    pub version: u32,
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub skipped_count: usize,
    pub skipped_clips: Vec<String>,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRef {
    pub segment_id: usize,
    pub clip_id: String,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmgtEntry {
    pub segment_id: usize,
    pub members: Vec<MemberRef>,
}

/// Output of `mmgt`: the segment list plus the multimodal ground truth of
/// each segment. `threshold` is `null` when unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmgtFile {
    pub version: u32,
    pub preset: Preset,
    pub threshold: Option<f64>,
    pub mean_group_size: f64,
    pub segments: Vec<Segment>,
    pub groups: Vec<MmgtEntry>,
}

impl MmgtFile {
    pub fn new(preset: Preset, segments: Vec<Segment>, index: &MultimodalIndex) -> Self {
        let by_id: BTreeMap<usize, &Segment> = segments.iter().map(|s| (s.id, s)).collect();
        let groups = index
            .groups
            .iter()
            .map(|(&id, members)| MmgtEntry {
                segment_id: id,
                members: members
                    .iter()
                    .map(|m| MemberRef {
                        segment_id: *m,
                        clip_id: by_id[m].clip_id.clone(),
                        start: by_id[m].start,
                    })
                    .collect(),
            })
            .collect();
        MmgtFile {
            version: FORMAT_VERSION,
            preset,
            threshold: index.threshold.is_finite().then_some(index.threshold),
            mean_group_size: index.mean_group_size(),
            segments,
            groups,
        }
    }

    pub fn index(&self) -> Result<MultimodalIndex> {
        let ids: HashSet<usize> = self.segments.iter().map(|s| s.id).collect();
        let mut groups = BTreeMap::new();
        for e in &self.groups {
            let members: Vec<usize> = e.members.iter().map(|m| m.segment_id).collect();
            if let Some(bad) = members.iter().chain([&e.segment_id]).find(|m| !ids.contains(m)) {
                return Err(Error::invalid(format!("mm-GT references unknown segment {bad}")));
            }
            if members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "mm-GT list of segment {} is not strictly ascending",
                    e.segment_id
                )));
            }
            groups.insert(e.segment_id, members);
        }
        Ok(MultimodalIndex {
            threshold: self.threshold.unwrap_or(f64::INFINITY),
            groups,
        })
    }
}

/// Segment id -> tensor of shape `[N × T × J × 3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub version: u32,
    pub samples: usize,
    pub pred_len: usize,
    pub joints: usize,
    pub entries: BTreeMap<usize, String>,
}

/// Row matrix plus optional row ids (segment or sample ids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSource {
    pub tensor_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<String>>,
}

/// Externally computed classifier features for FID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    pub pred: FeatureSource,
    pub gt: FeatureSource,
}

impl FeatureManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(FeatureSet, FeatureSet)> {
        let path = path.as_ref();
        let m: FeatureManifest = read_json(path)?;
        let base = parent_dir(path);
        let load = |src: &FeatureSource| -> Result<FeatureSet> {
            let rows = read_tensor(resolve(&base, &src.tensor_path))?.to_matrix()?;
            match &src.rows {
                Some(ids) => FeatureSet::new(ids.clone(), rows),
                None => Ok(FeatureSet::from_rows(rows)),
            }
        };
        Ok((load(&m.pred)?, load(&m.gt)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEmbeddingSpec {
    pub kind: String,
    pub dim: usize,
    pub max_period: f64,
}

/// Sidecar of a linear denoiser tensor. The tensor is `[v × (v + e + c + 1)]`:
/// the weight matrix with the bias appended as the last column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSidecar {
    pub version: u32,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub step_embedding: StepEmbeddingSpec,
}

pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    let mut s = tensor_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_linear_denoiser(path: impl AsRef<Path>, d: &LinearDenoiser) -> Result<()> {
    let path = path.as_ref();
    let v = d.bias.len();
    let mut packed = d.weight.clone().insert_column(d.weight.ncols(), 0.0);
    packed.set_column(d.weight.ncols(), &d.bias);
    write_tensor(path, &Tensor::from_matrix(&packed))?;
    write_json(
        sidecar_path(path),
        &DenoiserSidecar {
            version: FORMAT_VERSION,
            latent_dim: v,
            cond_dim: d.cond_dim,
            step_embedding: StepEmbeddingSpec {
                kind: "sinusoidal".into(),
                dim: d.embed_dim,
                max_period: 10000.0,
            },
        },
    )
}

pub fn read_linear_denoiser(path: impl AsRef<Path>) -> Result<LinearDenoiser> {
    let path = path.as_ref();
    let side: DenoiserSidecar = read_json(sidecar_path(path))?;
    if side.step_embedding.kind != "sinusoidal" || side.step_embedding.max_period != 10000.0 {
        return Err(Error::invalid(format!(
            "unsupported step embedding {:?}",
            side.step_embedding
        )));
    }
    let packed = read_tensor(path)?.to_matrix()?;
    let v = side.latent_dim;
    let cols = v + side.step_embedding.dim + side.cond_dim + 1;
    if packed.shape() != (v, cols) {
        return Err(Error::Format(format!(
            "{}: denoiser tensor is {:?}, sidecar implies ({v}, {cols})",
            path.display(),
            packed.shape()
        )));
    }
    let bias = DVector::from_iterator(v, packed.column(cols - 1).iter().copied());
    let weight = packed.columns(0, cols - 1).into_owned();
    LinearDenoiser::new(weight, bias, side.cond_dim, side.step_embedding.dim)
}

/// Rounds to 9 significant digits, the precision reports are printed with.
pub fn round_sig9(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    Number::from_f64(rounded).map(Value::Number).unwrap_or(Value::Null)
}

fn round_all(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => round_sig9(n.as_f64().unwrap()),
        Value::Array(a) => Value::Array(a.into_iter().map(round_all).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_all(v))).collect()),
        other => other,
    }
}

/// FID value, or why there is none.
#[derive(Debug, Clone, PartialEq)]
pub enum FidOutcome {
    Value { value: f64, comparable: bool, note: String },
    Missing { reason: String },
}

/// Everything an evaluation run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub preset: Preset,
    pub segment_count: usize,
    pub samples: usize,
    pub metrics: Vec<MetricResult>,
    pub apde_dismissed: usize,
    /// Per-label mean ground-truth displacement used as CMD reference.
    pub mean_motion: BTreeMap<String, f64>,
    pub cmd_curve: Vec<f64>,
    pub fid: FidOutcome,
}

impl Report {
    pub fn to_json(&self) -> Value {
        let mut metrics = Map::new();
        for m in &self.metrics {
            let mut entry = Map::new();
            entry.insert("aggregate".into(), Value::from(m.aggregate));
            entry.insert(
                "per_class".into(),
                Value::Object(m.per_class.iter().map(|(k, v)| (k.clone(), Value::from(*v))).collect()),
            );
            entry.insert("segments".into(), Value::from(m.per_segment.len()));
            metrics.insert(m.name.clone(), Value::Object(entry));
        }
        if let Some(Value::Object(apde)) = metrics.get_mut("APDE") {
            apde.insert("dismissed_segments".into(), Value::from(self.apde_dismissed));
        }
        let fid = match &self.fid {
            FidOutcome::Value { value, comparable, note } => serde_json::json!({
                "value": value,
                "comparable": comparable,
                "note": note,
            }),
            FidOutcome::Missing { reason } => serde_json::json!({ "value": null, "reason": reason }),
        };
        metrics.insert("FID".into(), fid);
        let doc = serde_json::json!({
            "tool": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
            "protocol": self.preset,
            "segments": self.segment_count,
            "samples_per_segment": self.samples,
            "mean_motion": self.mean_motion,
            "metrics": metrics,
        });
        round_all(doc)
    }

    pub fn cmd_csv(&self) -> String {
        let mut out = String::from("frame,mean_displacement\n");
        for (i, m) in self.cmd_curve.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, round_sig9(*m)));
        }
        out
    }
}

/// Path of the CMD curve CSV written next to a report.
pub fn cmd_csv_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("cmd.csv")
}

/// Writes the JSON report and the CMD curve CSV next to it.
pub fn write_report(path: impl AsRef<Path>, report: &Report) -> Result<()> {
    let path = path.as_ref();
    write_json(path, &report.to_json())?;
    let csv = cmd_csv_path(path);
    fs::write(&csv, report.cmd_csv()).map_err(|e| Error::io(csv, e))
}
