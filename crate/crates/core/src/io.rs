//! File formats.
//!
//! * Datasets and LAEO frames are JSON lines, one record per line.
//! * Models are binary: the magic `HHPN`, a little-endian `u32` format
//!   version, a little-endian `u32` header length, the JSON header
//!   `{"format_version", "model_config", "param_count"}`, then every parameter as
//!   an `f32` little-endian in [`ModelConfig::layout`] order (tensor after
//!   tensor, row-major).
//!
//! Every write goes to a temporary file in the target directory that is
//! renamed into place once complete.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::geometry::EulerPose;
use crate::keypoints::{normalize, Keypoint, KeypointSet, N_KEYPOINTS};
use crate::laeo::{HeadInstance, LaeoFrame};
use crate::model::{ModelConfig, ModelParams, PoseEstimate};
use crate::training::TrainHistory;
use crate::{Error, Result, Sample};

pub const MODEL_MAGIC: &[u8; 4] = b"HHPN";
pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Environment variable overriding the default seed.
pub const SEED_ENV: &str = "HHPNET_SEED";

/// Seed from `HHPNET_SEED`, or 0 when unset.
pub fn default_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Replaces `path` with `bytes` via a temporary sibling file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = std::fs::metadata(path).map_or(0o644, |m| m.permissions().mode());
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(mode))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializes each item as one JSON line.
pub fn to_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_jsonl<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T, usize) -> std::result::Result<(), String>,
{
    let file = std::fs::File::open(path)?;
    parse_jsonl(BufReader::new(file), &path.display().to_string(), |v, line| f(v, line))
}

/// Parses JSON lines, skipping blank ones. Errors carry the 1-based line.
pub fn parse_jsonl<T, R, F>(reader: R, name: &str, mut f: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
    F: FnMut(T, usize) -> std::result::Result<(), String>,
{
    let parse_err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        f(value, line_no).map_err(|m| parse_err(line_no, m))?;
    }
    Ok(())
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// `[x1, x2, c]` per landmark: nose, left eye, right eye, left ear, right ear.
    pub keypoints: Vec<[f64; 3]>,
    #[serde(default)]
    pub pose: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl DatasetRecord {
    pub fn from_sample(sample: &Sample) -> Self {
        Self {
            id: sample.id.clone(),
            keypoints: sample.keypoints.points.iter().map(|p| [p.x1, p.x2, p.c]).collect(),
            pose: sample.pose.map(EulerPose::to_array),
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_sample(&self) -> std::result::Result<Sample, String> {
        Ok(Sample {
            id: self.id.clone(),
            keypoints: keypoint_set(&self.keypoints)?,
            pose: match self.pose {
                Some(p) if !p.iter().all(|v| v.is_finite()) => {
                    return Err(format!("record '{}': non-finite pose", self.id))
                }
                p => p.map(EulerPose::from_array),
            },
        })
    }
}

fn keypoint_set(triples: &[[f64; 3]]) -> std::result::Result<KeypointSet, String> {
    if triples.len() != N_KEYPOINTS {
        return Err(format!(
            "expected {N_KEYPOINTS} keypoint triples, found {}",
            triples.len()
        ));
    }
    let mut points = [Keypoint::default(); N_KEYPOINTS];
    for (p, t) in points.iter_mut().zip(triples) {
        *p = Keypoint::new(t[0], t[1], t[2]);
    }
    KeypointSet::new(points).map_err(|e| e.to_string())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    read_jsonl(path, |r: DatasetRecord, _| {
        out.push(r.to_sample()?);
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_dataset<R: BufRead>(reader: R, name: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    parse_jsonl(reader, name, |r: DatasetRecord, _| {
        out.push(r.to_sample()?);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    write_atomic(path, &to_jsonl(samples.iter().map(DatasetRecord::from_sample))?)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    model_config: ModelConfig,
    param_count: usize,
}

pub fn encode_model(params: &ModelParams) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        model_config: params.config().clone(),
        param_count: params.param_count(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * params.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: &str| Error::ModelFormat(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(bad("missing HHPN magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported format version {version}")));
    }
    let header_len = u32_at(8) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start {
        return Err(bad("truncated header"));
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[12..body_start])?;
    if header.format_version != version {
        return Err(bad("header version disagrees with preamble"));
    }
    header.model_config.validate()?;
    let layout = header.model_config.layout();
    let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let body = &bytes[body_start..];
    if header.param_count != expected || body.len() != 4 * expected {
        return Err(Error::ModelFormat(format!(
            "expected {expected} parameters, header says {} and body holds {} bytes",
            header.param_count,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let tensors = layout
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(header.model_config, tensors)
}

pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    write_atomic(path, &encode_model(params)?)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    decode_model(&std::fs::read(path)?)
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    #[serde(flatten)]
    record: &'a crate::training::EpochRecord,
    best: bool,
}

/// One line per epoch; `best` marks the selected snapshot.
pub fn encode_history(history: &TrainHistory) -> Result<Vec<u8>> {
    to_jsonl(history.epochs.iter().enumerate().map(|(i, record)| HistoryLine {
        record,
        best: i == history.best_epoch,
    }))
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    write_atomic(path, &encode_history(history)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub pose: [f64; 3],
    /// Defaults to zeros.
    #[serde(default)]
    pub log_var: [f64; 3],
}

impl From<PoseEstimate> for EstimateRecord {
    fn from(e: PoseEstimate) -> Self {
        Self {
            pose: e.pose.to_array(),
            log_var: e.log_var,
        }
    }
}

impl From<EstimateRecord> for PoseEstimate {
    fn from(r: EstimateRecord) -> Self {
        PoseEstimate {
            pose: EulerPose::from_array(r.pose),
            log_var: r.log_var,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub id: String,
    pub centroid: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateRecord>,
}

/// One LAEO frame line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub heads: Vec<HeadRecord>,
    #[serde(default)]
    pub laeo_pairs: Vec<[String; 2]>,
}

impl FrameRecord {
    pub fn from_frame(frame: &LaeoFrame) -> Self {
        Self {
            frame_id: frame.frame_id.clone(),
            heads: frame
                .heads
                .iter()
                .map(|h| HeadRecord {
                    id: h.id.clone(),
                    centroid: [h.centroid.0, h.centroid.1],
                    keypoints: None,
                    estimate: Some(h.estimate.into()),
                })
                .collect(),
            laeo_pairs: frame
                .laeo_pairs
                .iter()
                .map(|(a, b)| [a.clone(), b.clone()])
                .collect(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let mut ids = HashSet::new();
        for h in &self.heads {
            if !ids.insert(h.id.as_str()) {
                return Err(format!("frame '{}': duplicate head id '{}'", self.frame_id, h.id));
            }
            if !h.centroid.iter().all(|v| v.is_finite()) {
                return Err(format!("head '{}': non-finite centroid", h.id));
            }
            if h.keypoints.is_none() && h.estimate.is_none() {
                return Err(format!("head '{}': needs keypoints or an estimate", h.id));
            }
            if let Some(e) = &h.estimate {
                if !PoseEstimate::from(*e).is_finite() {
                    return Err(format!("head '{}': non-finite estimate", h.id));
                }
            }
            if let Some(k) = &h.keypoints {
                keypoint_set(k).map_err(|m| format!("head '{}': {m}", h.id))?;
            }
        }
        for [a, b] in &self.laeo_pairs {
            for id in [a, b] {
                if !ids.contains(id.as_str()) {
                    return Err(format!(
                        "frame '{}': pair references unknown head '{id}'",
                        self.frame_id
                    ));
                }
            }
        }
        Ok(())
    }

    /// Resolves every head to a pose estimate. A precomputed estimate wins
    /// over keypoints; keypoints need `model`.
    pub fn resolve(&self, model: Option<&ModelParams>) -> Result<LaeoFrame> {
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let estimate = match (&h.estimate, &h.keypoints) {
                (Some(e), _) => PoseEstimate::from(*e),
                (None, Some(k)) => {
                    let model = model.ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "frame '{}' head '{}' gives keypoints but no model was supplied",
                            self.frame_id, h.id
                        ))
                    })?;
                    let set = keypoint_set(k).map_err(Error::InvalidArgument)?;
                    model.forward(&normalize(&set)?)?
                }
                (None, None) => unreachable!("validated on read"),
            };
            heads.push(HeadInstance {
                id: h.id.clone(),
                centroid: (h.centroid[0], h.centroid[1]),
                estimate,
            });
        }
        Ok(LaeoFrame {
            frame_id: self.frame_id.clone(),
            heads,
            laeo_pairs: self
                .laeo_pairs
                .iter()
                .map(|[a, b]| (a.clone(), b.clone()))
                .collect(),
        })
    }
}

pub fn read_frames(path: &Path) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    read_jsonl(path, |r: FrameRecord, _| {
        r.validate()?;
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_frames<R: BufRead>(reader: R, name: &str) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    parse_jsonl(reader, name, |r: FrameRecord, _| {
        r.validate()?;
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_frames(path: &Path, frames: &[LaeoFrame]) -> Result<()> {
    write_atomic(path, &to_jsonl(frames.iter().map(FrameRecord::from_frame))?)
}
