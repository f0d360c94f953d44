mod common;

use hmp_eval::motion::{MotionSequence, Segment};
use hmp_eval::protocol::*;
use ndarray::Array3;
use rand::Rng;

fn flat_clip(id: &str, frames: usize) -> MotionSequence {
    MotionSequence::new(id, 60.0, Array3::zeros((frames, 1, 3))).unwrap()
}

#[test]
fn segment_counts_follow_closed_form() {
    for preset in [Preset::amass_cross(), Preset::h36m()] {
        let cfg = preset.protocol;
        for f in 0..=1000usize {
            let clips = if f == 0 { vec![] } else { vec![flat_clip("c", f)] };
            let got = extract_segments(&clips, &cfg).unwrap().segments.len();
            let closed = if f < cfg.min_clip_len {
                0
            } else {
                ((f as i64 - cfg.pred_len as i64 - cfg.first_start as i64).div_euclid(cfg.stride as i64) + 1).max(0) as usize
            };
            assert_eq!(got, closed, "F={f}");
            assert_eq!(got, common::count_segments(f, cfg.pred_len, cfg.first_start, cfg.stride, cfg.min_clip_len));
            assert_eq!(got, cfg.segment_count(f));
        }
    }
}

fn synthetic(n: usize, seed: u64) -> (Vec<MotionSequence>, Vec<Segment>, Vec<Vec<f64>>) {
    let mut rng = common::rng(seed);
    let mut clips = Vec::new();
    let mut segs = Vec::new();
    let mut poses = Vec::new();
    for i in 0..n {
        let id = format!("clip{i}");
        let frames = Array3::from_shape_fn((4, 2, 3), |_| rng.random_range(-0.4..0.4));
        poses.push(frames.index_axis(ndarray::Axis(0), 1).iter().copied().collect());
        clips.push(MotionSequence::new(id.clone(), 50.0, frames).unwrap());
        segs.push(Segment { id: i, clip_id: id, start: 2, obs_len: 2, pred_len: 2, class_label: None, dataset_label: None });
    }
    (clips, segs, poses)
}

#[test]
fn mmgt_matches_oracle_and_is_symmetric() {
    let (clips, segs, poses) = synthetic(200, 12);
    for threshold in [0.0, 0.3, 0.5, 0.8, f64::INFINITY] {
        let idx = build_mmgt(&segs, &clips, threshold).unwrap();
        let oracle = common::mmgt_groups(&poses, threshold);
        for (i, expected) in oracle.iter().enumerate() {
            assert_eq!(idx.members(i), expected.as_slice(), "segment {i} at {threshold}");
        }
        for (&a, members) in &idx.groups {
            for &b in members {
                assert!(idx.members(b).contains(&a));
            }
        }
    }
}

#[test]
fn mmgt_is_independent_of_worker_count() {
    let (clips, segs, _) = synthetic(120, 3);
    let run = |jobs| hmp_eval::pipeline::with_jobs(Some(jobs), || build_mmgt(&segs, &clips, 0.5).unwrap()).unwrap();
    let a = run(1);
    assert_eq!(a, run(3));
    assert_eq!(a, run(8));
}

#[test]
fn weights_sum_to_one() {
    let (_, mut segs, _) = synthetic(37, 1);
    for (i, s) in segs.iter_mut().enumerate() {
        s.dataset_label = Some(["a", "b", "c"][i % 3].into());
    }
    let w = class_weights(&segs, LabelKey::Dataset).unwrap();
    assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(w["a"], 13.0 / 37.0);
}
