//! Skeleton motion data model.
//!
//! Pose windows are `[frames × joints × 3]` arrays in meters with Z up.
//! Everything here is a pure function of its inputs.

use std::collections::HashSet;

use ndarray::{s, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pose window, `[frames × joints × 3]`.
pub type Window = Array3<f64>;

/// Joint layout shared by every clip of a dataset. The up axis is always Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_count: usize,
    pub joint_names: Vec<String>,
    #[serde(default)]
    pub mirror_pairs: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, mirror_pairs: Vec<(usize, usize)>) -> Result<Self> {
        let skeleton = Skeleton {
            joint_count: joint_names.len(),
            joint_names,
            mirror_pairs,
        };
        skeleton.validate()?;
        Ok(skeleton)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_count == 0 {
            return Err(Error::invalid("skeleton must have at least one joint"));
        }
        if self.joint_names.len() != self.joint_count {
            return Err(Error::invalid(format!(
                "skeleton declares {} joints but names {}",
                self.joint_count,
                self.joint_names.len()
            )));
        }
        let mut names = HashSet::new();
        for name in &self.joint_names {
            if !names.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate joint name `{name}`")));
            }
        }
        let mut seen = HashSet::new();
        for &(l, r) in &self.mirror_pairs {
            for idx in [l, r] {
                if idx >= self.joint_count {
                    return Err(Error::invalid(format!(
                        "mirror pair index {idx} >= joint count {}",
                        self.joint_count
                    )));
                }
                if !seen.insert(idx) {
                    return Err(Error::invalid(format!(
                        "joint {idx} appears in more than one mirror pair slot"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A recorded clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub clip_id: String,
    pub fps: f64,
    pub class_label: Option<String>,
    pub dataset_label: Option<String>,
    pub frames: Window,
}

impl MotionSequence {
    pub fn new(clip_id: impl Into<String>, fps: f64, frames: Window) -> Result<Self> {
        let clip = MotionSequence {
            clip_id: clip_id.into(),
            fps,
            class_label: None,
            dataset_label: None,
            frames,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn with_labels(mut self, class_label: Option<String>, dataset_label: Option<String>) -> Self {
        self.class_label = class_label;
        self.dataset_label = dataset_label;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!(
                "clip `{}`: fps must be positive, got {}",
                self.clip_id, self.fps
            )));
        }
        let (f, j, c) = self.frames.dim();
        if f == 0 || j == 0 || c != 3 {
            return Err(Error::invalid(format!(
                "clip `{}`: frames must be [F>=1 x J>=1 x 3], got [{f} x {j} x {c}]",
                self.clip_id
            )));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "clip `{}` contains non-finite coordinates",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joint_count(&self) -> usize {
        self.frames.len_of(Axis(1))
    }
}

/// An (observation, prediction) window pair addressed into a clip. `start` is
/// the first predicted frame; the observation is `[start - obs_len, start)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub clip_id: String,
    pub start: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_label: Option<String>,
}

impl Segment {
    /// Index of the last observed frame.
    pub fn last_observed(&self) -> Option<usize> {
        self.start.checked_sub(1)
    }
}

/// Returns views of the observation and ground-truth windows of `seg`.
pub fn slice_segment<'a>(
    clip: &'a MotionSequence,
    seg: &Segment,
) -> Result<(ArrayView3<'a, f64>, ArrayView3<'a, f64>)> {
    let frames = clip.len();
    if seg.obs_len == 0 || seg.pred_len == 0 {
        return Err(Error::invalid(format!(
            "segment {} has empty observation or prediction window",
            seg.id
        )));
    }
    if seg.obs_len > seg.start {
        return Err(Error::Index {
            clip_id: clip.clip_id.clone(),
            index: seg.start as i64 - seg.obs_len as i64,
            frames,
        });
    }
    if seg.start + seg.pred_len > frames {
        return Err(Error::Index {
            clip_id: clip.clip_id.clone(),
            index: (seg.start + seg.pred_len - 1) as i64,
            frames,
        });
    }
    let obs = clip.frames.slice(s![seg.start - seg.obs_len..seg.start, .., ..]);
    let gt = clip.frames.slice(s![seg.start..seg.start + seg.pred_len, .., ..]);
    Ok((obs, gt))
}

/// The last `c` observed poses, used to anchor a behavior code on the ongoing motion.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMotion {
    pub poses: Window,
}

impl TargetMotion {
    pub fn from_observation(observation: ArrayView3<f64>, c: usize) -> Result<Self> {
        let b = observation.len_of(Axis(0));
        if c == 0 || c > b {
            return Err(Error::invalid(format!(
                "target motion length {c} must be in [1, {b}]"
            )));
        }
        Ok(TargetMotion {
            poses: observation.slice(s![b - c.., .., ..]).to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates the target motion and a future window along time.
    pub fn extend_with(&self, future: ArrayView3<f64>) -> Result<Window> {
        ndarray::concatenate(Axis(0), &[self.poses.view(), future])
            .map_err(|e| Error::invalid(format!("cannot extend target motion: {e}")))
    }
}

/// `N` sampled future windows for one segment, `[N × T × J × 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub samples: Array4<f64>,
}

impl PredictionSet {
    pub fn new(samples: Array4<f64>) -> Result<Self> {
        let (n, t, j, c) = samples.dim();
        if n == 0 || t == 0 || j == 0 || c != 3 {
            return Err(Error::invalid(format!(
                "prediction set must be [N>=1 x T>=1 x J>=1 x 3], got [{n} x {t} x {j} x {c}]"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prediction set contains non-finite values"));
        }
        Ok(PredictionSet { samples })
    }

    /// Stacks equally shaped windows into a set.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = ArrayView3<'a, f64>>) -> Result<Self> {
        let views: Vec<_> = windows.into_iter().map(|w| w.insert_axis(Axis(0))).collect();
        if views.is_empty() {
            return Err(Error::invalid("cannot build a prediction set from zero windows"));
        }
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::invalid(format!("windows differ in shape: {e}")))?;
        Self::new(stacked)
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len_of(Axis(0))
    }

    pub fn pred_len(&self) -> usize {
        self.samples.len_of(Axis(1))
    }

    pub fn joint_count(&self) -> usize {
        self.samples.len_of(Axis(2))
    }

    pub fn sample(&self, i: usize) -> ArrayView3<'_, f64> {
        self.samples.index_axis(Axis(0), i)
    }

    pub fn iter(&self) -> impl Iterator<Item = ArrayView3<'_, f64>> {
        self.samples.outer_iter()
    }
}

/// Per-transition displacement and its mean, in meters per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionStats {
    pub per_frame_displacement: Vec<f64>,
    pub dataset_mean: f64,
}

impl MotionStats {
    /// Averages the displacement curves of equally long windows, then
    /// averages over transitions for the scalar mean.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = ArrayView3<'a, f64>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for w in windows {
            let d = frame_displacement(w)?;
            if count == 0 {
                sum = d;
            } else {
                if d.len() != sum.len() {
                    return Err(Error::invalid("windows differ in length"));
                }
                sum.iter_mut().zip(&d).for_each(|(s, v)| *s += v);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("no windows to compute motion statistics from"));
        }
        let per_frame_displacement: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
        let dataset_mean =
            per_frame_displacement.iter().sum::<f64>() / per_frame_displacement.len() as f64;
        Ok(MotionStats {
            per_frame_displacement,
            dataset_mean,
        })
    }
}

fn joint_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, j: usize) -> f64 {
    (0..3)
        .map(|k| {
            let d = a[[j, k]] - b[[j, k]];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean over joints of the per-joint L2 distance between consecutive frames.
pub fn frame_displacement(window: ArrayView3<f64>) -> Result<Vec<f64>> {
    let (t, j, _) = window.dim();
    if t < 2 {
        return Err(Error::invalid(format!(
            "displacement needs at least 2 frames, got {t}"
        )));
    }
    if j == 0 {
        return Err(Error::invalid("window has no joints"));
    }
    Ok((0..t - 1)
        .map(|f| {
            let a = window.index_axis(Axis(0), f);
            let b = window.index_axis(Axis(0), f + 1);
            (0..j).map(|k| joint_distance(a, b, k)).sum::<f64>() / j as f64
        })
        .collect())
}

/// Rotates every pose about the vertical (Z) axis.
pub fn rotate_z(window: ArrayView3<f64>, angle: f64) -> Window {
    let (sin, cos) = angle.sin_cos();
    let mut out = window.to_owned();
    for mut joint in out.lanes_mut(Axis(2)) {
        let (x, y) = (joint[0], joint[1]);
        joint[0] = x * cos - y * sin;
        joint[1] = x * sin + y * cos;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MirrorPlane {
    /// Negates y.
    XZ,
    /// Negates x.
    YZ,
}

/// Reflects a window through `plane` and swaps left/right joints so the
/// result stays anatomically labeled.
pub fn mirror(window: ArrayView3<f64>, plane: MirrorPlane, skeleton: &Skeleton) -> Result<Window> {
    let j = window.len_of(Axis(1));
    if j != skeleton.joint_count {
        return Err(Error::invalid(format!(
            "window has {j} joints, skeleton has {}",
            skeleton.joint_count
        )));
    }
    let axis = match plane {
        MirrorPlane::XZ => 1,
        MirrorPlane::YZ => 0,
    };
    let mut out = window.to_owned();
    out.index_axis_mut(Axis(2), axis).mapv_inplace(|v| -v);
    for &(l, r) in &skeleton.mirror_pairs {
        for mut frame in out.outer_iter_mut() {
            for k in 0..3 {
                frame.swap([l, k], [r, k]);
            }
        }
    }
    Ok(out)
}

/// Repeats the last observed pose for every future frame of every sample.
pub fn zero_velocity_predict(observation: ArrayView3<f64>, pred_len: usize, n: usize) -> Result<PredictionSet> {
    let (b, j, _) = observation.dim();
    if b == 0 {
        return Err(Error::invalid("observation window is empty"));
    }
    let last = observation.index_axis(Axis(0), b - 1);
    let samples = last
        .broadcast((n, pred_len, j, 3))
        .ok_or_else(|| Error::invalid("cannot broadcast last pose"))?
        .to_owned();
    PredictionSet::new(samples)
}

#[derive(Debug, Clone)]
pub struct Downsampled {
    pub clip: MotionSequence,
    pub stride: usize,
    /// Set when `fps / target_fps` is not an integer; the stride was rounded.
    pub warning: Option<String>,
}

/// Keeps every `round(fps / target_fps)`-th frame, starting at frame 0.
pub fn downsample(clip: &MotionSequence, target_fps: f64) -> Result<Downsampled> {
    if !(target_fps.is_finite() && target_fps > 0.0) || target_fps > clip.fps {
        return Err(Error::invalid(format!(
            "clip `{}`: target fps {target_fps} must be in (0, {}]",
            clip.clip_id, clip.fps
        )));
    }
    let ratio = clip.fps / target_fps;
    let stride = ratio.round().max(1.0) as usize;
    let warning = ((ratio - stride as f64).abs() > 1e-6).then(|| {
        let msg = format!(
            "clip `{}`: {} Hz -> {target_fps} Hz is not an integer stride ({ratio:.4}); using {stride}",
            clip.clip_id, clip.fps
        );
        log::warn!("{msg}");
        msg
    });
    let frames = clip.frames.slice(s![..;stride, .., ..]).to_owned();
    Ok(Downsampled {
        clip: MotionSequence {
            frames,
            fps: target_fps,
            ..clip.clone()
        },
        stride,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn ramp_clip(frames: usize) -> MotionSequence {
        let data = Array::from_shape_fn((frames, 2, 3), |(f, j, k)| (f * 100 + j * 10 + k) as f64);
        MotionSequence::new("ramp", 50.0, data).unwrap()
    }

    fn seg(start: usize, obs_len: usize, pred_len: usize) -> Segment {
        Segment {
            id: 0,
            clip_id: "ramp".into(),
            start,
            obs_len,
            pred_len,
            class_label: None,
            dataset_label: None,
        }
    }

    #[test]
    fn slice_picks_expected_frames() {
        let clip = ramp_clip(10);
        let (obs, gt) = slice_segment(&clip, &seg(5, 2, 3)).unwrap();
        assert_eq!(obs, clip.frames.slice(s![3..5, .., ..]));
        assert_eq!(gt, clip.frames.slice(s![5..8, .., ..]));

        let (obs, _) = slice_segment(&clip, &seg(4, 4, 3)).unwrap();
        assert_eq!(obs[[0, 0, 0]], 0.0);
    }

    #[test]
    fn slice_rejects_out_of_range() {
        let clip = ramp_clip(10);
        match slice_segment(&clip, &seg(2, 3, 1)) {
            Err(Error::Index { clip_id, index, .. }) => {
                assert_eq!(clip_id, "ramp");
                assert_eq!(index, -1);
            }
            other => panic!("expected index error, got {other:?}"),
        }
        assert!(matches!(
            slice_segment(&clip, &seg(8, 2, 3)),
            Err(Error::Index { index: 10, .. })
        ));
    }

    #[test]
    fn displacement_examples() {
        let static_w = Array3::<f64>::ones((4, 3, 3));
        assert_eq!(frame_displacement(static_w.view()).unwrap(), vec![0.0; 3]);

        let one = array![[[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], [[1.0, 1.0, 0.0]]];
        assert_eq!(frame_displacement(one.view()).unwrap(), vec![1.0, 1.0]);

        let two = Array::from_shape_fn((4, 2, 3), |(f, j, k)| if j == 1 && k == 0 { f as f64 } else { 0.0 });
        assert_eq!(frame_displacement(two.view()).unwrap(), vec![0.5; 3]);

        assert!(frame_displacement(Array3::<f64>::zeros((1, 1, 3)).view()).is_err());
    }

    #[test]
    fn rotation_examples() {
        let w = array![[[1.0, 0.0, 5.0]]];
        assert_eq!(rotate_z(w.view(), 0.0), w);
        let r = rotate_z(w.view(), std::f64::consts::PI);
        assert!((r[[0, 0, 0]] + 1.0).abs() < 1e-12);
        assert!(r[[0, 0, 1]].abs() < 1e-12);
        assert_eq!(r[[0, 0, 2]], 5.0);
    }

    fn lr_skeleton() -> Skeleton {
        Skeleton::new(
            vec!["hip".into(), "l_hand".into(), "r_hand".into()],
            vec![(1, 2)],
        )
        .unwrap()
    }

    #[test]
    fn mirror_of_symmetric_pose_is_fixed_point() {
        let sk = lr_skeleton();
        // T-pose symmetric about the YZ plane.
        let w = array![[[0.0, 0.1, 1.0], [-0.8, 0.0, 1.4], [0.8, 0.0, 1.4]]];
        assert_eq!(mirror(w.view(), MirrorPlane::YZ, &sk).unwrap(), w);
        let twice = mirror(mirror(w.view(), MirrorPlane::XZ, &sk).unwrap().view(), MirrorPlane::XZ, &sk).unwrap();
        assert_eq!(twice, w);
    }

    #[test]
    fn mirror_checks_joint_count() {
        let w = Array3::<f64>::zeros((2, 5, 3));
        assert!(mirror(w.view(), MirrorPlane::XZ, &lr_skeleton()).is_err());
    }

    #[test]
    fn skeleton_invariants() {
        assert!(Skeleton::new(vec!["a".into(), "a".into()], vec![]).is_err());
        assert!(Skeleton::new(vec!["a".into(), "b".into()], vec![(0, 2)]).is_err());
        assert!(Skeleton::new(vec!["a".into(), "b".into(), "c".into()], vec![(0, 1), (1, 2)]).is_err());
    }

    #[test]
    fn zero_velocity_repeats_last_pose() {
        let obs = array![[[0.0, 0.0, 0.0]], [[2.0, 1.0, 0.5]]];
        let p = zero_velocity_predict(obs.view(), 4, 3).unwrap();
        assert_eq!(p.samples.dim(), (3, 4, 1, 3));
        assert!(p.samples.outer_iter().all(|s| s.outer_iter().all(|f| f == obs.index_axis(Axis(0), 1))));
        for s in p.iter() {
            assert!(frame_displacement(s).unwrap().iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn downsample_examples() {
        let clip = MotionSequence::new("c", 120.0, Array3::zeros((240, 1, 3))).unwrap();
        let d = downsample(&clip, 60.0).unwrap();
        assert_eq!((d.clip.len(), d.stride, d.clip.fps), (120, 2, 60.0));
        assert!(d.warning.is_none());

        let same = downsample(&clip, 120.0).unwrap();
        assert_eq!(same.clip.frames, clip.frames);

        let clip = MotionSequence::new("c", 100.0, Array3::zeros((100, 1, 3))).unwrap();
        let d = downsample(&clip, 60.0).unwrap();
        assert_eq!(d.stride, 2);
        assert!(d.warning.is_some());

        assert!(downsample(&clip, 200.0).is_err());
        assert!(downsample(&clip, 0.0).is_err());
    }

    #[test]
    fn target_motion_takes_last_frames() {
        let clip = ramp_clip(10);
        let (obs, gt) = slice_segment(&clip, &seg(5, 4, 3)).unwrap();
        let tm = TargetMotion::from_observation(obs, 3).unwrap();
        assert_eq!(tm.poses, clip.frames.slice(s![2..5, .., ..]));
        let ext = tm.extend_with(gt).unwrap();
        assert_eq!(ext, clip.frames.slice(s![2..8, .., ..]));
        assert!(TargetMotion::from_observation(obs, 5).is_err());
    }
}
