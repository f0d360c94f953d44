//! File-to-file implementations of the command-line subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, sample_many, ConditioningVector, Denoiser, NormalRng, ScheduleKind};
use crate::error::{Error, Result};
use crate::io::{
    self, parent_dir, read_json, read_tensor, resolve, write_json, write_report, write_tensor, ClipEntry,
    FeatureManifest, FidOutcome, LoadedManifest, Manifest, MmgtFile, PredictionBundle, Report, SegmentsFile, Tensor,
    FORMAT_VERSION,
};
use crate::losses::LossConfig;
use crate::metrics::{self, FeatureSet, MetricResult};
use crate::motion::{
    downsample, frame_displacement, mirror, rotate_z, slice_segment, zero_velocity_predict, MirrorPlane,
    MotionSequence, PredictionSet, Segment,
};
use crate::protocol::{build_mmgt, class_weights, extract_segments, Preset, PresetName, ProtocolConfig};

/// Runs `f` on a rayon pool with `jobs` workers (`None`: rayon's default).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::invalid("--jobs must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}"))),
    }
}

/// Versioned run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub version: u32,
    pub preset: PresetName,
    #[serde(default)]
    pub fps: Option<f64>,
    #[serde(default)]
    pub protocol: Option<ProtocolConfig>,
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl CliConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: CliConfig = read_json(path)?;
        if cfg.version != FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported config version {}", cfg.version)));
        }
        Ok(cfg)
    }

    /// Named presets expand to their fixed constants; `custom` needs `fps`
    /// and `protocol`.
    pub fn preset(&self) -> Result<Preset> {
        match self.preset {
            PresetName::Custom => {
                let fps = self.fps.ok_or_else(|| Error::invalid("custom preset needs `fps`"))?;
                let protocol = self
                    .protocol
                    .ok_or_else(|| Error::invalid("custom preset needs `protocol`"))?;
                Preset::custom(fps, protocol, self.loss.unwrap_or(Preset::h36m().loss))
            }
            name => {
                if self.protocol.is_some() || self.fps.is_some() || self.loss.is_some() {
                    return Err(Error::invalid(
                        "named presets cannot be overridden; use the custom preset",
                    ));
                }
                Preset::by_name(name)
            }
        }
    }
}

/// Loads clips and brings them to the preset frame rate.
pub fn load_protocol_clips(manifest: &LoadedManifest, preset: &Preset, split: Option<&str>) -> Result<Vec<MotionSequence>> {
    let clips = manifest.load_clips(split)?;
    if (manifest.manifest.fps - preset.fps).abs() < 1e-9 {
        return Ok(clips);
    }
    clips.iter().map(|c| downsample(c, preset.fps).map(|d| d.clip)).collect()
}

pub fn run_segment(manifest_path: &Path, preset: Preset, split: Option<&str>, out: &Path) -> Result<SegmentsFile> {
    let manifest = LoadedManifest::open(manifest_path)?;
    let clips = load_protocol_clips(&manifest, &preset, split)?;
    let extraction = extract_segments(&clips, &preset.protocol)?;
    let file = SegmentsFile {
        version: FORMAT_VERSION,
        preset,
        split: split.map(str::to_owned),
        skipped_count: extraction.skipped.len(),
        skipped_clips: extraction.skipped,
        segments: extraction.segments,
    };
    write_json(out, &file)?;
    Ok(file)
}

fn clips_for(manifest: &LoadedManifest, preset: &Preset, segments: &[Segment]) -> Result<Vec<MotionSequence>> {
    let needed: std::collections::HashSet<&str> = segments.iter().map(|s| s.clip_id.as_str()).collect();
    let entries: Vec<&ClipEntry> = manifest
        .manifest
        .clips
        .iter()
        .filter(|c| needed.contains(c.clip_id.as_str()))
        .collect();
    if entries.len() != needed.len() {
        return Err(Error::invalid("segments reference clips missing from the manifest"));
    }
    entries
        .into_iter()
        .map(|c| {
            let clip = manifest.load_clip(c)?;
            if (clip.fps - preset.fps).abs() < 1e-9 {
                Ok(clip)
            } else {
                downsample(&clip, preset.fps).map(|d| d.clip)
            }
        })
        .collect()
}

pub fn run_mmgt(manifest_path: &Path, segments_path: &Path, threshold: Option<f64>, out: &Path) -> Result<MmgtFile> {
    let manifest = LoadedManifest::open(manifest_path)?;
    let segs: SegmentsFile = read_json(segments_path)?;
    let clips = clips_for(&manifest, &segs.preset, &segs.segments)?;
    let threshold = threshold.unwrap_or(segs.preset.protocol.mm_threshold);
    let index = build_mmgt(&segs.segments, &clips, threshold)?;
    let file = MmgtFile::new(segs.preset, segs.segments, &index);
    write_json(out, &file)?;
    Ok(file)
}

fn lookup<'a>(clips: &'a [MotionSequence], id: &str) -> Result<&'a MotionSequence> {
    clips
        .iter()
        .find(|c| c.clip_id == id)
        .ok_or_else(|| Error::invalid(format!("unknown clip `{id}`")))
}

/// Writes a zero-velocity prediction bundle: `out` is the bundle index, the
/// tensors go to `<out dir>/predictions/`.
pub fn run_zero_velocity(manifest_path: &Path, mmgt_path: &Path, n: usize, out: &Path) -> Result<PredictionBundle> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let manifest = LoadedManifest::open(manifest_path)?;
    let mm: MmgtFile = read_json(mmgt_path)?;
    let clips = clips_for(&manifest, &mm.preset, &mm.segments)?;
    let dir = parent_dir(out);
    let pred_dir = dir.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    let mut entries = BTreeMap::new();
    for seg in &mm.segments {
        let clip = lookup(&clips, &seg.clip_id)?;
        let (obs, _) = slice_segment(clip, seg)?;
        let pred = zero_velocity_predict(obs, seg.pred_len, n)?;
        let rel = format!("predictions/seg_{:06}.blft", seg.id);
        write_tensor(dir.join(&rel), &Tensor::from_array(&pred.samples))?;
        entries.insert(seg.id, rel);
    }
    let bundle = PredictionBundle {
        version: FORMAT_VERSION,
        samples: n,
        pred_len: mm.preset.protocol.pred_len,
        joints: manifest.manifest.skeleton.joint_count,
        entries,
    };
    write_json(out, &bundle)?;
    Ok(bundle)
}

#[derive(Debug, Clone)]
pub enum FeatureChoice {
    None,
    /// Feature manifest produced by an external classifier.
    File(PathBuf),
    /// Flattened final poses; pipeline testing only.
    Identity,
}

struct SegmentEval {
    id: usize,
    label: String,
    ade: f64,
    fde: f64,
    mmade: f64,
    mmfde: f64,
    apd: f64,
    apde: Option<f64>,
    /// Sum over samples of the displacement curve.
    motion_sum: Vec<f64>,
    gt_motion: f64,
    pred_features: Vec<Vec<f64>>,
    gt_features: Vec<f64>,
}

const UNLABELED: &str = "unlabeled";

/// Computes the full metric suite for a prediction bundle.
pub fn evaluate(
    bundle_path: &Path,
    manifest_path: &Path,
    mmgt_path: &Path,
    features: &FeatureChoice,
) -> Result<Report> {
    let manifest = LoadedManifest::open(manifest_path)?;
    let mm: MmgtFile = read_json(mmgt_path)?;
    let index = mm.index()?;
    let bundle: PredictionBundle = read_json(bundle_path)?;
    let bundle_dir = parent_dir(bundle_path);
    let preset = mm.preset;
    if bundle.pred_len != preset.protocol.pred_len || bundle.joints != manifest.manifest.skeleton.joint_count {
        return Err(Error::invalid(format!(
            "bundle is T={} J={}, protocol expects T={} J={}",
            bundle.pred_len,
            bundle.joints,
            preset.protocol.pred_len,
            manifest.manifest.skeleton.joint_count
        )));
    }
    if mm.segments.is_empty() {
        return Err(Error::invalid("no segments to evaluate"));
    }
    let clips = clips_for(&manifest, &preset, &mm.segments)?;
    let segments: BTreeMap<usize, &Segment> = mm.segments.iter().map(|s| (s.id, s)).collect();
    let gt_window = |id: usize| -> Result<ArrayView3<'_, f64>> {
        let seg = segments
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("unknown segment {id}")))?;
        Ok(slice_segment(lookup(&clips, &seg.clip_id)?, seg)?.1)
    };
    let identity = matches!(features, FeatureChoice::Identity);

    let evals: Vec<SegmentEval> = segments
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|seg| -> Result<SegmentEval> {
            let rel = bundle
                .entries
                .get(&seg.id)
                .ok_or_else(|| Error::invalid(format!("bundle has no predictions for segment {}", seg.id)))?;
            let pred = PredictionSet::new(read_tensor(resolve(&bundle_dir, rel))?.to_array4()?)?;
            if pred.sample_count() != bundle.samples {
                return Err(Error::invalid(format!(
                    "segment {}: {} samples, bundle declares {}",
                    seg.id,
                    pred.sample_count(),
                    bundle.samples
                )));
            }
            let gt = gt_window(seg.id)?;
            let mm_windows = index
                .members(seg.id)
                .iter()
                .map(|&m| gt_window(m))
                .collect::<Result<Vec<_>>>()?;
            let mut motion_sum = vec![0.0; seg.pred_len.saturating_sub(1)];
            for s in pred.iter() {
                motion_sum
                    .iter_mut()
                    .zip(frame_displacement(s)?)
                    .for_each(|(a, b)| *a += b);
            }
            let gt_curve = frame_displacement(gt)?;
            Ok(SegmentEval {
                id: seg.id,
                label: preset.group_by.of(seg).unwrap_or(UNLABELED).to_owned(),
                ade: metrics::ade(&pred, gt)?,
                fde: metrics::fde(&pred, gt)?,
                mmade: metrics::mmade(&pred, &mm_windows)?,
                mmfde: metrics::mmfde(&pred, &mm_windows)?,
                apd: metrics::apd(&pred),
                apde: metrics::apde(&pred, &mm_windows)?,
                motion_sum,
                gt_motion: gt_curve.iter().sum::<f64>() / gt_curve.len() as f64,
                pred_features: if identity {
                    pred.iter().map(metrics::identity_feature).collect()
                } else {
                    Vec::new()
                },
                gt_features: if identity { metrics::identity_feature(gt) } else { Vec::new() },
            })
        })
        .collect::<Result<_>>()?;

    // Reductions run in ascending segment id order.
    let labels: BTreeMap<usize, String> = evals.iter().map(|e| (e.id, e.label.clone())).collect();
    let metric = |name: &str, f: &dyn Fn(&SegmentEval) -> Option<f64>| {
        let per_segment = evals.iter().filter_map(|e| f(e).map(|v| (e.id, v))).collect();
        MetricResult::from_segments(name, per_segment, &labels)
    };
    let mut results = vec![
        metric("APD", &|e| Some(e.apd)),
        metric("APDE", &|e| e.apde),
        metric("ADE", &|e| Some(e.ade)),
        metric("FDE", &|e| Some(e.fde)),
        metric("MMADE", &|e| Some(e.mmade)),
        metric("MMFDE", &|e| Some(e.mmfde)),
    ];
    let apde_dismissed = evals.iter().filter(|e| e.apde.is_none()).count();

    let n = bundle.samples as f64;
    let transitions = preset.protocol.pred_len.saturating_sub(1);
    let mut groups: BTreeMap<String, (Vec<f64>, f64, usize)> = BTreeMap::new();
    let mut curve = vec![0.0; transitions];
    for e in &evals {
        let g = groups
            .entry(e.label.clone())
            .or_insert_with(|| (vec![0.0; transitions], 0.0, 0));
        g.0.iter_mut().zip(&e.motion_sum).for_each(|(a, b)| *a += b);
        g.1 += e.gt_motion;
        g.2 += 1;
        curve.iter_mut().zip(&e.motion_sum).for_each(|(a, b)| *a += b);
    }
    let total = evals.len() as f64;
    curve.iter_mut().for_each(|v| *v /= total * n);
    let mut mean_motion = BTreeMap::new();
    let mut per_class_cmd = BTreeMap::new();
    for (label, (sum, gt_sum, count)) in &groups {
        let c = *count as f64;
        let label_curve: Vec<f64> = sum.iter().map(|v| v / (c * n)).collect();
        let mbar = gt_sum / c;
        mean_motion.insert(label.clone(), mbar);
        per_class_cmd.insert(label.clone(), metrics::cmd(&label_curve, mbar));
    }
    let grouped: Vec<Segment> = evals
        .iter()
        .map(|e| Segment {
            class_label: Some(e.label.clone()),
            ..(*segments[&e.id]).clone()
        })
        .collect();
    let weights = class_weights(&grouped, crate::protocol::LabelKey::Class)?;
    results.push(MetricResult {
        name: "CMD".into(),
        per_segment: BTreeMap::new(),
        aggregate: metrics::weighted_cmd(&per_class_cmd, &weights)?,
        per_class: per_class_cmd,
    });

    let fid = match features {
        FeatureChoice::None => FidOutcome::Missing {
            reason: "no feature file supplied (--features)".into(),
        },
        FeatureChoice::File(path) => {
            let (pred, gt) = FeatureManifest::load(path)?;
            FidOutcome::Value {
                value: metrics::fid(&pred, &gt)?,
                comparable: true,
                note: format!("features from {}", path.display()),
            }
        }
        FeatureChoice::Identity => {
            let rows = |v: Vec<Vec<f64>>| -> Result<FeatureSet> {
                let d = v.first().map_or(0, Vec::len);
                let flat: Vec<f64> = v.iter().flatten().copied().collect();
                let m = Array2::from_shape_vec((v.len(), d), flat)
                    .map_err(|e| Error::invalid(format!("identity features: {e}")))?;
                Ok(FeatureSet::from_rows(nalgebra::DMatrix::from_row_iterator(
                    m.nrows(),
                    m.ncols(),
                    m.iter().copied(),
                )))
            };
            let pred = rows(evals.iter().flat_map(|e| e.pred_features.clone()).collect())?;
            let gt = rows(evals.iter().map(|e| e.gt_features.clone()).collect())?;
            FidOutcome::Value {
                value: metrics::fid(&pred, &gt)?,
                comparable: false,
                note: "identity features (flattened final pose); not comparable with classifier-based FID".into(),
            }
        }
    };

    Ok(Report {
        preset,
        segment_count: evals.len(),
        samples: bundle.samples,
        metrics: results,
        apde_dismissed,
        mean_motion,
        cmd_curve: curve,
        fid,
    })
}

pub fn run_evaluate(
    bundle_path: &Path,
    manifest_path: &Path,
    mmgt_path: &Path,
    features: &FeatureChoice,
    out: &Path,
) -> Result<Report> {
    let report = evaluate(bundle_path, manifest_path, mmgt_path, features)?;
    write_report(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub schedule: ScheduleKind,
    pub offset: Option<f64>,
    pub steps: usize,
    pub eta: f64,
    pub samples: usize,
    pub stop_after: Option<usize>,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            schedule: ScheduleKind::Sqrt,
            offset: None,
            steps: 10,
            eta: 0.0,
            samples: 50,
            stop_after: None,
            seed: 0,
        }
    }
}

/// Index written by `sample` next to the latent tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBundle {
    pub version: u32,
    pub options: SampleOptions,
    pub latent_dim: usize,
    /// `[N × v]`
    pub latents_path: String,
    /// `[N × calls × v]`, the ẑ0 of every denoiser call.
    pub trajectories_path: String,
}

pub fn run_sample(denoiser_path: &Path, cond_path: &Path, opts: &SampleOptions, out_dir: &Path) -> Result<LatentBundle> {
    let denoiser = io::read_linear_denoiser(denoiser_path)?;
    let cond_t = read_tensor(cond_path)?;
    let cond = ConditioningVector(cond_t.data.iter().map(|&v| v as f64).collect());
    if cond.len() != denoiser.cond_dim {
        return Err(Error::invalid(format!(
            "conditioning has {} values, denoiser expects {}",
            cond.len(),
            denoiser.cond_dim
        )));
    }
    if opts.samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let sched = make_schedule(opts.schedule, opts.steps, opts.offset.unwrap_or(opts.schedule.default_offset()))?;
    let chains = sample_many(&denoiser, &cond, &sched, opts.eta, opts.stop_after, opts.seed, opts.samples)?;
    let v = denoiser.latent_dim();
    let calls = chains[0].trajectory.len();
    let latents = Tensor::new(
        vec![chains.len(), v],
        chains.iter().flat_map(|c| c.final_latent.iter().map(|&x| x as f32)).collect(),
    )?;
    let traj = Tensor::new(
        vec![chains.len(), calls, v],
        chains
            .iter()
            .flat_map(|c| c.trajectory.iter().flat_map(|z| z.iter().map(|&x| x as f32)))
            .collect(),
    )?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_tensor(out_dir.join("latents.blft"), &latents)?;
    write_tensor(out_dir.join("trajectories.blft"), &traj)?;
    let bundle = LatentBundle {
        version: FORMAT_VERSION,
        options: opts.clone(),
        latent_dim: v,
        latents_path: "latents.blft".into(),
        trajectories_path: "trajectories.blft".into(),
    };
    write_json(out_dir.join("samples.json"), &bundle)?;
    Ok(bundle)
}

/// Random rigid augmentation drawn for one clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub angle: f64,
    pub mirror_xz: bool,
    pub mirror_yz: bool,
}

impl Augmentation {
    /// Draw for clip `index` of a run seeded with `seed`.
    pub fn draw(seed: u64, index: u64) -> Self {
        let mut rng = NormalRng::derived(seed, index);
        Augmentation {
            angle: rng.uniform() * std::f64::consts::TAU,
            mirror_xz: rng.coin(),
            mirror_yz: rng.coin(),
        }
    }

    pub fn apply(&self, frames: ArrayView3<f64>, skeleton: &crate::motion::Skeleton) -> Result<Array3<f64>> {
        let mut out = rotate_z(frames, self.angle);
        if self.mirror_xz {
            out = mirror(out.view(), MirrorPlane::XZ, skeleton)?;
        }
        if self.mirror_yz {
            out = mirror(out.view(), MirrorPlane::YZ, skeleton)?;
        }
        Ok(out)
    }
}

/// Writes an augmented copy of every clip to `out_dir/clips/` and a manifest
/// pointing at them to `out_dir/manifest.json`.
pub fn run_augment(manifest_path: &Path, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let manifest = LoadedManifest::open(manifest_path)?;
    let clip_dir = out_dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let skeleton = &manifest.manifest.skeleton;
    let clips = manifest
        .manifest
        .clips
        .par_iter()
        .enumerate()
        .map(|(i, entry)| -> Result<ClipEntry> {
            let clip = manifest.load_clip(entry)?;
            let aug = Augmentation::draw(seed, i as u64);
            let frames = aug.apply(clip.frames.view(), skeleton)?;
            let rel = format!("clips/clip_{i:06}.blft");
            write_tensor(out_dir.join(&rel), &Tensor::from_array(&frames))?;
            Ok(ClipEntry {
                tensor_path: rel,
                ..entry.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Manifest {
        clips,
        ..manifest.manifest.clone()
    };
    write_json(out_dir.join("manifest.json"), &out)?;
    Ok(out)
}
