//! Brute-force reference implementations shared by the integration tests.
//! They work on plain nested `Vec`s and index loops so they share no code
//! path with the library.
#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

pub fn random_window(rng: &mut Pcg64, t: usize, j: usize) -> Array3<f64> {
    Array3::from_shape_fn((t, j, 3), |_| rng.random_range(-1.0..1.0))
}

pub fn random_set(rng: &mut Pcg64, n: usize, t: usize, j: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, t, j, 3), |_| rng.random_range(-1.0..1.0))
}

fn frame_dist(a: &Array3<f64>, fa: usize, b: &Array3<f64>, fb: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..a.shape()[1] {
        for k in 0..3 {
            let d = a[[fa, j, k]] - b[[fb, j, k]];
            s += d * d;
        }
    }
    s.sqrt()
}

fn sample(set: &Array4<f64>, i: usize) -> Array3<f64> {
    let (_, t, j, _) = set.dim();
    Array3::from_shape_fn((t, j, 3), |(a, b, c)| set[[i, a, b, c]])
}

pub fn ade(set: &Array4<f64>, gt: &Array3<f64>) -> f64 {
    let (n, t, _, _) = set.dim();
    let mut best = f64::MAX;
    for i in 0..n {
        let s = sample(set, i);
        let mut total = 0.0;
        for f in 0..t {
            total += frame_dist(&s, f, gt, f);
        }
        best = best.min(total / t as f64);
    }
    best
}

pub fn fde(set: &Array4<f64>, gt: &Array3<f64>) -> f64 {
    let (n, t, _, _) = set.dim();
    (0..n)
        .map(|i| frame_dist(&sample(set, i), t - 1, gt, t - 1))
        .fold(f64::MAX, f64::min)
}

pub fn mmade(set: &Array4<f64>, mm: &[Array3<f64>]) -> f64 {
    mm.iter().map(|w| ade(set, w)).sum::<f64>() / mm.len() as f64
}

pub fn mmfde(set: &Array4<f64>, mm: &[Array3<f64>]) -> f64 {
    mm.iter().map(|w| fde(set, w)).sum::<f64>() / mm.len() as f64
}

/// Sum over all ordered pairs i != j.
pub fn apd(set: &Array4<f64>) -> f64 {
    let (n, t, _, _) = set.dim();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (sample(set, i), sample(set, j));
            let mut s = 0.0;
            for f in 0..t {
                s += frame_dist(&a, f, &b, f);
            }
            total += s / t as f64;
        }
    }
    total / (n * (n - 1)) as f64
}

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    (0..n)
        .map(|i| (0..m).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

pub fn sqrtm_psd(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (vals, vecs) = jacobi_eigen(a);
    let n = a.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum())
                .collect()
        })
        .collect()
}

pub fn frechet(mu1: &[f64], c1: &[Vec<f64>], mu2: &[f64], c2: &[Vec<f64>]) -> f64 {
    let s1 = sqrtm_psd(c1);
    let inner = matmul(&matmul(&s1, c2), &s1);
    let (vals, _) = jacobi_eigen(&inner);
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr: f64 = (0..c1.len()).map(|i| c1[i][i] + c2[i][i]).sum();
    dmu + tr - 2.0 * tr_sqrt
}

/// Random PSD matrix `A·Aᵀ / d` with `A` uniform in [-1, 1].
pub fn random_psd(rng: &mut Pcg64, d: usize) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..d)
        .map(|i| (0..d).map(|j| (0..d).map(|k| a[i][k] * a[j][k]).sum::<f64>() / d as f64).collect())
        .collect()
}

pub fn to_dmatrix(a: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.len(), a[0].len(), |i, j| a[i][j])
}

/// Double-sum form of the motion-curve area.
/// Compensated summation keeps it accurate over ~10⁵ terms.
pub fn cmd_double_sum(m: &[f64], mbar: f64) -> f64 {
    let (mut total, mut c) = (0.0f64, 0.0f64);
    for i in 0..m.len() {
        for t in 0..=i {
            let x = (m[t] - mbar).abs();
            let s = total + x;
            c += if total.abs() >= x { (total - s) + x } else { (x - s) + total };
            total = s;
        }
    }
    total + c
}

/// Enumerates segment starts by stepping through the clip.
pub fn count_segments(frames: usize, pred_len: usize, first_start: usize, stride: usize, min_len: usize) -> usize {
    if frames < min_len {
        return 0;
    }
    let mut count = 0;
    let mut s = first_start;
    while s + pred_len <= frames {
        count += 1;
        s += stride;
    }
    count
}

/// O(n²) multimodal grouping over flattened last poses.
pub fn mmgt_groups(poses: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    (0..poses.len())
        .map(|i| {
            (0..poses.len())
                .filter(|&j| {
                    let d: f64 = poses[i].iter().zip(&poses[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    d.sqrt() <= threshold
                })
                .collect()
        })
        .collect()
}

/// A smooth random walk of `frames` poses with `joints` joints.
pub fn random_walk(rng: &mut Pcg64, frames: usize, joints: usize) -> Array3<f64> {
    let mut w = Array3::zeros((frames, joints, 3));
    for j in 0..joints {
        for k in 0..3 {
            w[[0, j, k]] = rng.random_range(-0.5..0.5);
        }
    }
    for f in 1..frames {
        for j in 0..joints {
            for k in 0..3 {
                w[[f, j, k]] = w[[f - 1, j, k]] + rng.random_range(-0.01..0.01);
            }
        }
    }
    w
}

/// Writes a manifest plus one tensor per clip into `dir` and returns the
/// manifest path. Clips are `(frames, class label)`.
pub fn write_dataset(dir: &std::path::Path, fps: f64, joints: usize, clips: &[(usize, &str)], seed: u64) -> std::path::PathBuf {
    use hmp_eval::io::{write_json, write_tensor, ClipEntry, Manifest, Tensor};
    let mut rng = rng(seed);
    let names = (0..joints).map(|j| format!("j{j}")).collect();
    let pairs = (0..joints / 2).map(|i| (2 * i, 2 * i + 1)).collect();
    let skeleton = hmp_eval::motion::Skeleton::new(names, pairs).unwrap();
    std::fs::create_dir_all(dir.join("clips")).unwrap();
    let mut entries = Vec::new();
    for (i, (frames, label)) in clips.iter().enumerate() {
        let rel = format!("clips/c{i}.blft");
        write_tensor(dir.join(&rel), &Tensor::from_array(&random_walk(&mut rng, *frames, joints))).unwrap();
        entries.push(ClipEntry {
            clip_id: format!("c{i}"),
            tensor_path: rel,
            class_label: Some(label.to_string()),
            dataset_label: Some(label.to_string()),
            split: "test".into(),
        });
    }
    let path = dir.join("manifest.json");
    write_json(&path, &Manifest { version: 1, fps, skeleton, clips: entries }).unwrap();
    path
}
