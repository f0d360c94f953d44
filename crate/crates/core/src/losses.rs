//! Training objectives evaluated as plain functions of pluggable encoders,
//! decoders and denoisers. Nothing here computes gradients.
//!
//! Log-likelihoods use a unit-variance Gaussian with the normalizing constant
//! dropped, i.e. `−½·Σ(target − predicted)²`.

use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, ConditioningVector, Denoiser, LatentCode, NoiseSchedule, NormalRng};
use crate::error::{Error, Result};
use crate::motion::Window;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Candidate predictions drawn per training iteration.
    pub k: usize,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    /// Noise draws per diffusion step in Monte Carlo estimates.
    pub mc_draws: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.mc_draws == 0 {
            return Err(Error::invalid("k and mc_draws must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        Ok(())
    }
}

/// Maps a behavior code onto an ongoing motion, producing a `[C+T × J × 3]` window.
pub trait Coupler: Sync {
    fn couple(&self, z: &LatentCode, target_motion_encoding: &[f64]) -> Window;
}

/// Decodes a behavior code without access to the target motion.
pub trait AuxDecoder: Sync {
    fn decode(&self, z: &LatentCode) -> Window;
}

/// Encodes a `[C+T × J × 3]` window into a diagonal Gaussian `(mean, logvar)`.
pub trait Encoder: Sync {
    fn encode(&self, window: ArrayView3<f64>) -> (LatentCode, Vec<f64>);
}

/// Reference coupler: the first `J·3` latent entries are a constant offset
/// added to the last target-motion pose (passed flattened as the encoding)
/// in every output frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffsetDecoder {
    pub frames: usize,
    pub joints: usize,
}

impl Coupler for OffsetDecoder {
    fn couple(&self, z: &LatentCode, tm: &[f64]) -> Window {
        Window::from_shape_fn((self.frames, self.joints, 3), |(_, j, k)| {
            let i = j * 3 + k;
            tm[i] + z[i]
        })
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn l2(a: &Window, b: &Window) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Monte Carlo estimate over `q(z_t | z_0)` of `f(ẑ0)`, summed over `t = 1..=M`.
/// Noise is drawn step by step, `mc_draws` per step, from one seeded stream.
fn sum_over_chain(
    denoiser: &dyn Denoiser,
    cond: &ConditioningVector,
    z0: &LatentCode,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
    seed: u64,
    mut f: impl FnMut(&LatentCode) -> Result<f64>,
) -> Result<f64> {
    cfg.validate()?;
    let mut rng = NormalRng::seeded(seed);
    let mut total = 0.0;
    for t in 1..=sched.steps() {
        let mut step = 0.0;
        for _ in 0..cfg.mc_draws {
            let noise = LatentCode(rng.normals(z0.len()));
            let z_t = forward_diffuse(z0, t, sched, &noise)?;
            let zhat0 = denoiser.denoise(&z_t, t, cond);
            if zhat0.len() != z0.len() {
                return Err(Error::invalid(format!(
                    "denoiser returned {} values, expected {}",
                    zhat0.len(),
                    z0.len()
                )));
            }
            step += f(&zhat0)?;
        }
        total += step / cfg.mc_draws as f64;
    }
    Ok(total)
}

/// L1 latent loss between the denoiser's ẑ0 and the target code, summed
/// over the chain.
pub fn latent_loss(
    denoiser: &dyn Denoiser,
    cond: &ConditioningVector,
    target: &LatentCode,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    sum_over_chain(denoiser, cond, target, sched, cfg, seed, |zhat0| Ok(l1(zhat0, target)))
}

/// L2 distance in pose space between the coupled ẑ0 and the coupled encoder
/// mean of `target_window`, summed over the chain.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss(
    denoiser: &dyn Denoiser,
    cond: &ConditioningVector,
    target_window: ArrayView3<f64>,
    encoder: &dyn Encoder,
    coupler: &dyn Coupler,
    tm_encoding: &[f64],
    sched: &NoiseSchedule,
    cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    let (z0, _) = encoder.encode(target_window);
    let reference = coupler.couple(&z0, tm_encoding);
    sum_over_chain(denoiser, cond, &z0, sched, cfg, seed, |zhat0| {
        let rec = coupler.couple(zhat0, tm_encoding);
        if rec.dim() != reference.dim() {
            return Err(Error::invalid("coupler output shape changed between calls"));
        }
        Ok(l2(&rec, &reference))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub idx_lat: usize,
    pub idx_rec: usize,
    pub value: f64,
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Best-of-k relaxation: latent and reconstruction terms are minimized over
/// the candidates independently, so the two picks may differ. Ties go to the
/// lowest index.
pub fn implicit_diversity_select(lat_losses: &[f64], rec_losses: &[f64], lambda: f64) -> Result<Selection> {
    if lat_losses.is_empty() || lat_losses.len() != rec_losses.len() {
        return Err(Error::invalid(format!(
            "need equally many (>= 1) latent and reconstruction losses, got {} and {}",
            lat_losses.len(),
            rec_losses.len()
        )));
    }
    let idx_lat = argmin(lat_losses);
    let idx_rec = argmin(rec_losses);
    Ok(Selection {
        idx_lat,
        idx_rec,
        value: lat_losses[idx_lat] + lambda * rec_losses[idx_rec],
    })
}

/// KL(N(mean, diag(exp(logvar))) || N(0, I)).
pub fn kl_diag_gaussian(mean: &[f64], logvar: &[f64]) -> Result<f64> {
    if mean.len() != logvar.len() {
        return Err(Error::invalid(format!(
            "mean has {} entries, logvar {}",
            mean.len(),
            logvar.len()
        )));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>())
}

pub fn gaussian_loglik(target: ArrayView3<f64>, predicted: ArrayView3<f64>) -> Result<f64> {
    if target.dim() != predicted.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            target.dim(),
            predicted.dim()
        )));
    }
    Ok(-0.5
        * target
            .iter()
            .zip(predicted.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValues {
    /// Likelihood of the coupled reconstruction, minus KL, minus `aux`.
    pub main: f64,
    /// Likelihood of the reconstruction without target motion.
    pub aux: f64,
}

/// Evaluates both behavioral objectives at the encoder mean, or at a
/// reparameterized draw when `reparam_seed` is given.
pub fn vae_objective_values(
    encoder: &dyn Encoder,
    coupler: &dyn Coupler,
    aux_decoder: &dyn AuxDecoder,
    window: ArrayView3<f64>,
    tm_encoding: &[f64],
    reparam_seed: Option<u64>,
) -> Result<ObjectiveValues> {
    let (mean, logvar) = encoder.encode(window);
    let kl = kl_diag_gaussian(&mean, &logvar)?;
    let z = match reparam_seed {
        None => mean,
        Some(seed) => {
            let mut rng = NormalRng::seeded(seed);
            LatentCode(
                mean.iter()
                    .zip(&logvar)
                    .map(|(m, lv)| m + (0.5 * lv).exp() * rng.normal())
                    .collect(),
            )
        }
    };
    let aux = gaussian_loglik(window, aux_decoder.decode(&z).view())?;
    let coupled = gaussian_loglik(window, coupler.couple(&z, tm_encoding).view())?;
    Ok(ObjectiveValues {
        main: coupled - kl - aux,
        aux,
    })
}
