//! Accuracy, diversity and realism metrics.
//!
//! Two distance conventions are in play and they change absolute values:
//!
//! * ADE, FDE, MMADE, MMFDE and APD measure the L2 norm of the difference of
//!   whole flattened `[J·3]` poses.
//! * CMD works on displacement, the per-joint L2 step averaged over joints
//!   (see [`crate::motion::frame_displacement`]).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{frame_displacement, PredictionSet};

/// L2 distance between two flattened poses.
pub fn pose_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_pose_distance(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let t = a.len_of(Axis(0));
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| pose_distance(x, y))
        .sum::<f64>()
        / t as f64
}

fn final_pose_distance(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let last = a.len_of(Axis(0)) - 1;
    pose_distance(a.index_axis(Axis(0), last), b.index_axis(Axis(0), last))
}

fn check_shape(pred: &PredictionSet, gt: ArrayView3<f64>) -> Result<()> {
    let expected = (pred.pred_len(), pred.joint_count(), 3);
    if gt.dim() != expected {
        return Err(Error::invalid(format!(
            "ground truth shape {:?} does not match predictions {:?}",
            gt.dim(),
            expected
        )));
    }
    Ok(())
}

fn best_of(pred: &PredictionSet, gt: ArrayView3<f64>, err: fn(ArrayView3<f64>, ArrayView3<f64>) -> f64) -> Result<f64> {
    check_shape(pred, gt)?;
    Ok(pred.iter().map(|s| err(s, gt)).fold(f64::INFINITY, f64::min))
}

/// Average displacement error of the closest sample.
pub fn ade(pred: &PredictionSet, gt: ArrayView3<f64>) -> Result<f64> {
    best_of(pred, gt, mean_pose_distance)
}

/// Final-frame displacement error of the closest sample.
pub fn fde(pred: &PredictionSet, gt: ArrayView3<f64>) -> Result<f64> {
    best_of(pred, gt, final_pose_distance)
}

fn multimodal(
    pred: &PredictionSet,
    mmgt: &[ArrayView3<f64>],
    err: fn(ArrayView3<f64>, ArrayView3<f64>) -> f64,
) -> Result<f64> {
    if mmgt.is_empty() {
        return Err(Error::invalid("multimodal ground truth is empty"));
    }
    let mut total = 0.0;
    for w in mmgt {
        total += best_of(pred, *w, err)?;
    }
    Ok(total / mmgt.len() as f64)
}

/// ADE averaged over every window of the multimodal ground truth.
pub fn mmade(pred: &PredictionSet, mmgt: &[ArrayView3<f64>]) -> Result<f64> {
    multimodal(pred, mmgt, mean_pose_distance)
}

/// FDE averaged over every window of the multimodal ground truth.
pub fn mmfde(pred: &PredictionSet, mmgt: &[ArrayView3<f64>]) -> Result<f64> {
    multimodal(pred, mmgt, final_pose_distance)
}

/// Average pairwise distance between samples. A single sample has APD 0.
pub fn apd(pred: &PredictionSet) -> f64 {
    let n = pred.sample_count();
    if n < 2 {
        return 0.0;
    }
    let (t, j) = (pred.pred_len(), pred.joint_count());
    let samples = pred.samples.as_standard_layout();
    let flat = samples.as_slice().expect("standard layout is contiguous");
    let pose = j * 3;
    let per_sample = t * pose;
    let mut total = 0.0;
    for a in 0..n {
        let sa = &flat[a * per_sample..(a + 1) * per_sample];
        for b in a + 1..n {
            let sb = &flat[b * per_sample..(b + 1) * per_sample];
            let mut sum = 0.0;
            for (pa, pb) in sa.chunks_exact(pose).zip(sb.chunks_exact(pose)) {
                sum += pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            }
            total += sum / t as f64;
        }
    }
    // Each unordered pair stands for both ordered pairs.
    2.0 * total / (n * (n - 1)) as f64
}

/// |APD(multimodal ground truth) − APD(predictions)|, or `None` when the
/// multimodal ground truth has fewer than two members.
pub fn apde(pred: &PredictionSet, mmgt: &[ArrayView3<f64>]) -> Result<Option<f64>> {
    if mmgt.len() < 2 {
        return Ok(None);
    }
    let gt_set = PredictionSet::from_windows(mmgt.iter().copied())?;
    Ok(Some((apd(&gt_set) - apd(pred)).abs()))
}

/// Mean displacement per transition over every sample of every set.
pub fn cmd_curve<'a>(preds: impl IntoIterator<Item = &'a PredictionSet>) -> Result<Vec<f64>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for set in preds {
        for sample in set.iter() {
            let d = frame_displacement(sample)?;
            if count == 0 {
                sum = d;
            } else if d.len() != sum.len() {
                return Err(Error::invalid("prediction sets differ in length"));
            } else {
                sum.iter_mut().zip(&d).for_each(|(s, v)| *s += v);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no predictions for the motion curve"));
    }
    Ok(sum.into_iter().map(|s| s / count as f64).collect())
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Area under the cumulative deviation of the motion curve from `mean_motion`:
/// `Σ_t (T − t)·|M_t − M̄|` over `t = 1..T−1`.
pub fn cmd(curve: &[f64], mean_motion: f64) -> f64 {
    let transitions = curve.len();
    let mut area = CompensatedSum::default();
    for (i, m) in curve.iter().enumerate() {
        area.add((transitions - i) as f64 * (m - mean_motion).abs());
    }
    area.value()
}

/// [`cmd`] evaluated as the cumulative sum it is defined by:
/// `Σ_i Σ_{t≤i} |M_t − M̄|`.
pub fn cmd_cumulative(curve: &[f64], mean_motion: f64) -> f64 {
    let mut running = CompensatedSum::default();
    let mut area = CompensatedSum::default();
    for m in curve {
        running.add((m - mean_motion).abs());
        area.add(running.sum);
        area.add(running.carry);
    }
    area.value()
}

/// Frequency-weighted mean of per-label CMD values.
pub fn weighted_cmd(per_class: &BTreeMap<String, f64>, weights: &BTreeMap<String, f64>) -> Result<f64> {
    let total: f64 = weights.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("CMD weights sum to {total}, expected 1")));
    }
    per_class
        .iter()
        .map(|(label, v)| {
            weights
                .get(label)
                .map(|w| w * v)
                .ok_or_else(|| Error::invalid(format!("no weight for label `{label}`")))
        })
        .sum()
}

/// A metric evaluated per segment, reduced per label and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub per_segment: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<String, f64>,
    pub aggregate: f64,
}

impl MetricResult {
    /// Plain means, accumulated in ascending segment id order.
    pub fn from_segments(
        name: impl Into<String>,
        per_segment: BTreeMap<usize, f64>,
        labels: &BTreeMap<usize, String>,
    ) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (id, v) in &per_segment {
            if let Some(label) = labels.get(id) {
                let e = sums.entry(label.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let aggregate = if per_segment.is_empty() {
            f64::NAN
        } else {
            per_segment.values().sum::<f64>() / per_segment.len() as f64
        };
        MetricResult {
            name: name.into(),
            per_segment,
            per_class: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            aggregate,
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-9;
/// Negative eigenvalues below `-WARN_REL * max|λ|` are reported; below
/// `-FAIL_REL * max|λ|` the input is rejected as not PSD.
const WARN_REL: f64 = 1e-6;
const FAIL_REL: f64 = 1e-3;

fn check_symmetric(m: &DMatrix<f64>, which: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "{which} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn clamped_eigen(m: DMatrix<f64>, which: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -FAIL_REL * max {
        return Err(Error::Numerical(format!(
            "{which} is not positive semi-definite (min eigenvalue {min:e})"
        )));
    }
    if min < -WARN_REL * max {
        log::warn!("{which}: clamping negative eigenvalue {min:e} to 0");
    }
    eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    Ok(eig)
}

/// Fréchet distance between `N(mu1, cov1)` and `N(mu2, cov2)`.
///
/// `tr((cov1·cov2)^½)` is computed as the trace of the square root of the
/// symmetric matrix `cov1^½·cov2·cov1^½`, which has the same spectrum.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::invalid(format!(
            "dimension mismatch: mu1 {}, mu2 {}, cov1 {:?}, cov2 {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    check_symmetric(cov1, "cov1")?;
    check_symmetric(cov2, "cov2")?;
    let _ = clamped_eigen(cov2.clone(), "cov2")?;
    let e1 = clamped_eigen(cov1.clone(), "cov1")?;
    let sqrt1 = &e1.eigenvectors
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let inner = &sqrt1 * cov2 * &sqrt1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = clamped_eigen(inner, "cov1^1/2 cov2 cov1^1/2")?
        .eigenvalues
        .iter()
        .map(|l| l.sqrt())
        .sum();
    let diff = mu1 - mu2;
    let value = diff.norm_squared() + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Feature vectors keyed by segment or sample id. Rows share one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub rows: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, rows: DMatrix<f64>) -> Result<Self> {
        if ids.len() != rows.nrows() {
            return Err(Error::invalid(format!(
                "{} feature ids for {} rows",
                ids.len(),
                rows.nrows()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature set contains non-finite values"));
        }
        Ok(FeatureSet { ids, rows })
    }

    /// Rows without ids; ids become row indices.
    pub fn from_rows(rows: DMatrix<f64>) -> Self {
        FeatureSet {
            ids: (0..rows.nrows()).map(|i| i.to_string()).collect(),
            rows,
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample mean and unbiased (`1/(n−1)`) covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 feature vectors, got {n}")));
        }
        if n <= self.dim() {
            log::warn!(
                "{n} feature vectors in dimension {}: covariance is rank deficient",
                self.dim()
            );
        }
        let mean = self.rows.row_mean().transpose();
        let mut centered = self.rows.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok((mean, cov))
    }
}

/// Fréchet distance between Gaussians fitted to predicted and real features.
pub fn fid(pred: &FeatureSet, gt: &FeatureSet) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (m1, c1) = pred.moments()?;
    let (m2, c2) = gt.moments()?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// Flattened final pose of a window: a classifier-free stand-in feature for
/// pipeline testing. Values are not comparable with classifier-based FID.
pub fn identity_feature(window: ArrayView3<f64>) -> Vec<f64> {
    let last = window.len_of(Axis(0)) - 1;
    window.index_axis(Axis(0), last).iter().copied().collect()
}
