//! Segment extraction, multimodal ground truth and label frequency weights.

use std::collections::{BTreeMap, HashMap};

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::motion::{MotionSequence, Segment};

/// Window layout of an evaluation protocol. All lengths are in frames at the
/// protocol frame rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    pub first_start: usize,
    pub stride: usize,
    pub min_clip_len: usize,
    /// Last-pose L2 radius (meters) for multimodal ground truth.
    pub mm_threshold: f64,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_len == 0 || self.pred_len == 0 || self.stride == 0 {
            return Err(Error::invalid("obs_len, pred_len and stride must be positive"));
        }
        if self.first_start < self.obs_len {
            return Err(Error::invalid(format!(
                "first_start {} is smaller than obs_len {}",
                self.first_start, self.obs_len
            )));
        }
        if self.min_clip_len < self.first_start + self.pred_len {
            return Err(Error::invalid(format!(
                "min_clip_len {} is smaller than first_start + pred_len = {}",
                self.min_clip_len,
                self.first_start + self.pred_len
            )));
        }
        if !(self.mm_threshold >= 0.0) {
            return Err(Error::invalid("mm_threshold must be non-negative"));
        }
        Ok(())
    }

    /// Number of segments `extract_segments` emits for a clip of `frames` frames.
    pub fn segment_count(&self, frames: usize) -> usize {
        if frames < self.min_clip_len || frames < self.first_start + self.pred_len {
            return 0;
        }
        (frames - self.pred_len - self.first_start) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKey {
    Class,
    Dataset,
}

impl LabelKey {
    pub fn of<'a>(&self, seg: &'a Segment) -> Option<&'a str> {
        match self {
            LabelKey::Class => seg.class_label.as_deref(),
            LabelKey::Dataset => seg.dataset_label.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    H36m,
    AmassCross,
    Custom,
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h36m" => Ok(PresetName::H36m),
            "amass-cross" => Ok(PresetName::AmassCross),
            "custom" => Ok(PresetName::Custom),
            other => Err(Error::invalid(format!(
                "unknown protocol preset `{other}` (expected h36m, amass-cross or custom)"
            ))),
        }
    }
}

/// Every constant an evaluation run depends on, bundled so dataset-specific
/// values cannot be mixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: PresetName,
    pub fps: f64,
    pub protocol: ProtocolConfig,
    pub loss: LossConfig,
    /// Predicted samples per observation.
    pub samples: usize,
    /// Diffusion chain length.
    pub diffusion_steps: usize,
    /// Frames of target motion fed to the behavior coupler.
    pub target_motion_len: usize,
    /// Label used for per-class reporting and CMD weighting.
    pub group_by: LabelKey,
}

impl Preset {
    /// Human3.6M: 0.5 s observed, 2 s predicted at 50 Hz.
    pub fn h36m() -> Self {
        Preset {
            name: PresetName::H36m,
            fps: 50.0,
            protocol: ProtocolConfig {
                obs_len: 25,
                pred_len: 100,
                first_start: 25,
                stride: 25,
                min_clip_len: 125,
                mm_threshold: 0.5,
            },
            loss: LossConfig {
                k: 50,
                lambda: 5.0,
                mc_draws: 1,
            },
            samples: 50,
            diffusion_steps: 10,
            target_motion_len: 3,
            group_by: LabelKey::Class,
        }
    }

    /// AMASS cross-dataset: 0.5 s observed, 2 s predicted at 60 Hz, one
    /// segment every 2 s starting 3 s into each clip of at least 5 s.
    pub fn amass_cross() -> Self {
        Preset {
            name: PresetName::AmassCross,
            fps: 60.0,
            protocol: ProtocolConfig {
                obs_len: 30,
                pred_len: 120,
                first_start: 180,
                stride: 120,
                min_clip_len: 300,
                mm_threshold: 0.4,
            },
            loss: LossConfig {
                k: 50,
                lambda: 1.0,
                mc_draws: 1,
            },
            samples: 50,
            diffusion_steps: 10,
            target_motion_len: 3,
            group_by: LabelKey::Dataset,
        }
    }

    pub fn custom(fps: f64, protocol: ProtocolConfig, loss: LossConfig) -> Result<Self> {
        protocol.validate()?;
        Ok(Preset {
            name: PresetName::Custom,
            fps,
            protocol,
            loss,
            ..Self::h36m()
        })
    }

    pub fn by_name(name: PresetName) -> Result<Self> {
        match name {
            PresetName::H36m => Ok(Self::h36m()),
            PresetName::AmassCross => Ok(Self::amass_cross()),
            PresetName::Custom => Err(Error::invalid(
                "the custom preset needs an explicit protocol in the config file",
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub segments: Vec<Segment>,
    /// Clips shorter than `min_clip_len`.
    pub skipped: Vec<String>,
}

/// Cuts every clip into segments at `first_start + i * stride` while the
/// prediction window fits. Segment ids are assigned in emission order.
pub fn extract_segments(clips: &[MotionSequence], cfg: &ProtocolConfig) -> Result<Extraction> {
    cfg.validate()?;
    let mut out = Extraction::default();
    for clip in clips {
        let frames = clip.len();
        if frames < cfg.min_clip_len {
            out.skipped.push(clip.clip_id.clone());
            continue;
        }
        let mut start = cfg.first_start;
        while start + cfg.pred_len <= frames {
            out.segments.push(Segment {
                id: out.segments.len(),
                clip_id: clip.clip_id.clone(),
                start,
                obs_len: cfg.obs_len,
                pred_len: cfg.pred_len,
                class_label: clip.class_label.clone(),
                dataset_label: clip.dataset_label.clone(),
            });
            start += cfg.stride;
        }
    }
    Ok(out)
}

/// Segment id -> ids of every segment whose last observed pose lies within
/// the threshold (self included). Lists are ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalIndex {
    pub threshold: f64,
    pub groups: BTreeMap<usize, Vec<usize>>,
}

impl MultimodalIndex {
    pub fn members(&self, id: usize) -> &[usize] {
        self.groups.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn mean_group_size(&self) -> f64 {
        if self.groups.is_empty() {
            return 0.0;
        }
        self.groups.values().map(Vec::len).sum::<usize>() as f64 / self.groups.len() as f64
    }
}

pub(crate) fn clip_lookup(clips: &[MotionSequence]) -> HashMap<&str, &MotionSequence> {
    clips.iter().map(|c| (c.clip_id.as_str(), c)).collect()
}

/// Flattened `[J·3]` pose at the last observed frame of each segment.
pub fn last_poses(segments: &[Segment], clips: &[MotionSequence]) -> Result<Vec<Vec<f64>>> {
    let lookup = clip_lookup(clips);
    segments
        .iter()
        .map(|seg| {
            let clip = lookup
                .get(seg.clip_id.as_str())
                .ok_or_else(|| Error::invalid(format!("segment {} references unknown clip `{}`", seg.id, seg.clip_id)))?;
            let frame = seg
                .last_observed()
                .filter(|&f| f < clip.len())
                .ok_or(Error::Index {
                    clip_id: seg.clip_id.clone(),
                    index: seg.start as i64 - 1,
                    frames: clip.len(),
                })?;
            Ok(clip.frames.index_axis(Axis(0), frame).iter().copied().collect())
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Groups segments whose last observed poses are within `threshold` (L2 over
/// the flattened, un-centered pose).
pub fn build_mmgt(segments: &[Segment], clips: &[MotionSequence], threshold: f64) -> Result<MultimodalIndex> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {threshold}")));
    }
    let poses = last_poses(segments, clips)?;
    let groups: Vec<(usize, Vec<usize>)> = (0..segments.len())
        .into_par_iter()
        .map(|i| {
            let mut members: Vec<usize> = (0..segments.len())
                .filter(|&j| i == j || l2(&poses[i], &poses[j]) <= threshold)
                .map(|j| segments[j].id)
                .collect();
            members.sort_unstable();
            (segments[i].id, members)
        })
        .collect();
    Ok(MultimodalIndex {
        threshold,
        groups: groups.into_iter().collect(),
    })
}

/// Relative frequency of each label among `segments`.
pub fn class_weights(segments: &[Segment], key: LabelKey) -> Result<BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for seg in segments {
        let label = key.of(seg).ok_or_else(|| {
            Error::invalid(format!(
                "segment {} (clip `{}`) has no {key:?} label",
                seg.id, seg.clip_id
            ))
        })?;
        *counts.entry(label.to_owned()).or_default() += 1;
    }
    let total = segments.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / total)).collect())
}
