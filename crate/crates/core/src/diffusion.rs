//! Latent diffusion sampling with a clean-latent (ẑ0) parameterized denoiser.
//!
//! Step `t = 0` is clean data. The chain has `M` noisy steps and the
//! denoiser is called at `t = M, M−1, …, 1`. Sampling can stop after any
//! number of denoiser calls and return the current ẑ0 estimate.

use std::f64::consts::{PI, TAU};
use std::ops::Deref;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_pcg::Pcg32;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the sqrt schedule so `ᾱ` stays positive at `t = M`.
pub const SQRT_SCHEDULE_FLOOR: f64 = 1e-4;
/// Upper bound on linear-schedule betas, reached when `M` is small.
pub const MAX_BETA: f64 = 0.999;
/// Width of the sinusoidal step embedding used by [`LinearDenoiser`].
pub const STEP_EMBEDDING_DIM: usize = 16;

macro_rules! vector_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(pub Vec<f64>);

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }
    };
}

vector_newtype!(
    /// A point in the behavior latent space.
    LatentCode
);
vector_newtype!(
    /// Encoded observation the denoiser is conditioned on.
    ConditioningVector
);

/// Seeded normal variates: a PCG32 stream (64-bit state, XSH-RR output)
/// mapped through the Box–Muller transform.
#[derive(Debug, Clone)]
pub struct NormalRng {
    rng: Pcg32,
    spare: Option<f64>,
}

impl NormalRng {
    pub fn seeded(seed: u64) -> Self {
        NormalRng {
            rng: Pcg32::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream for the `index`-th sample of a run seeded with `seed`.
    pub fn derived(seed: u64, index: u64) -> Self {
        Self::seeded(seed.wrapping_add(index))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn coin(&mut self) -> bool {
        self.rng.next_u32() & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Sqrt,
}

impl ScheduleKind {
    pub fn default_offset(&self) -> f64 {
        match self {
            ScheduleKind::Linear => 0.0,
            ScheduleKind::Cosine => 0.008,
            ScheduleKind::Sqrt => 1e-4,
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            other => Err(Error::invalid(format!("unknown noise schedule `{other}`"))),
        }
    }
}

/// Cumulative signal level `ᾱ_t` for `t = 0..=M`, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub offset: f64,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside [{lo}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("a noise schedule needs at least one step"));
    }
    if !offset.is_finite() || offset < 0.0 {
        return Err(Error::invalid(format!("schedule offset must be >= 0, got {offset}")));
    }
    let m = steps as f64;
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    match kind {
        ScheduleKind::Sqrt => {
            for t in 1..=steps {
                let a = 1.0 - (t as f64 / m + offset).sqrt();
                alpha_bar.push(a.clamp(SQRT_SCHEDULE_FLOOR, 1.0));
            }
        }
        ScheduleKind::Linear => {
            let scale = 1000.0 / m;
            let (start, end) = (1e-4 * scale, 0.02 * scale);
            let mut prod = 1.0;
            for i in 0..steps {
                let beta = if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (m - 1.0)
                };
                prod *= 1.0 - beta.min(MAX_BETA);
                alpha_bar.push(prod);
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / m + offset) / (1.0 + offset) * PI / 2.0).cos().powi(2);
            let f0 = f(0.0);
            for t in 1..=steps {
                alpha_bar.push(f(t as f64) / f0);
            }
        }
    }
    let sched = NoiseSchedule {
        kind,
        offset,
        alpha_bar,
    };
    if let Some(t) = sched
        .alpha_bar
        .windows(2)
        .position(|w| !(w[1] < w[0] && w[1] > 0.0))
    {
        return Err(Error::Numerical(format!(
            "{kind:?} schedule with M={steps}, s={offset} is not strictly decreasing at step {}",
            t + 1
        )));
    }
    Ok(sched)
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "{what}: length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Samples `q(z_t | z_0)` with caller-supplied unit noise.
pub fn forward_diffuse(z0: &LatentCode, t: usize, sched: &NoiseSchedule, noise: &LatentCode) -> Result<LatentCode> {
    sched.check_step(t, 0)?;
    same_len(z0, noise, "forward_diffuse noise")?;
    let a = sched.alpha_bar[t];
    let (signal, sigma) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.iter().zip(noise.iter()).map(|(z, e)| signal * z + sigma * e).collect::<Vec<_>>().into())
}

/// One DDIM update from `z_t` to `z_{t−1}` given the denoiser's ẑ0.
pub fn ddim_step(
    z_t: &LatentCode,
    t: usize,
    zhat0: &LatentCode,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&LatentCode>,
) -> Result<LatentCode> {
    sched.check_step(t, 1)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must be in [0, 1], got {eta}")));
    }
    same_len(z_t, zhat0, "ddim_step ẑ0")?;
    if let Some(n) = noise {
        same_len(z_t, n, "ddim_step noise")?;
    }
    let a_t = sched.alpha_bar[t];
    let a_prev = sched.alpha_bar[t - 1];
    let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
    let mut dir2 = 1.0 - a_prev - sigma * sigma;
    if dir2 < -1e-12 {
        return Err(Error::Numerical(format!(
            "negative DDIM direction variance {dir2:e} at step {t}"
        )));
    }
    dir2 = dir2.max(0.0);
    let (sqrt_a_t, sqrt_1m_a_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sqrt_a_prev, dir) = (a_prev.sqrt(), dir2.sqrt());
    let out = z_t
        .iter()
        .zip(zhat0.iter())
        .enumerate()
        .map(|(i, (z, x0))| {
            let eps = (z - sqrt_a_t * x0) / sqrt_1m_a_t;
            let mut v = sqrt_a_prev * x0 + dir * eps;
            if let Some(n) = noise {
                v += sigma * n[i];
            }
            v
        })
        .collect::<Vec<_>>();
    Ok(out.into())
}

/// Predicts the clean latent from a noisy one. Must be deterministic.
pub trait Denoiser: Sync {
    fn latent_dim(&self) -> usize;
    fn denoise(&self, z_t: &LatentCode, t: usize, cond: &ConditioningVector) -> LatentCode;
}

/// Adapts a closure to [`Denoiser`].
pub struct FnDenoiser<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&LatentCode, usize, &ConditioningVector) -> LatentCode + Sync,
{
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, z_t: &LatentCode, t: usize, cond: &ConditioningVector) -> LatentCode {
        (self.f)(z_t, t, cond)
    }
}

/// `[sin(t·ω_0), …, sin(t·ω_{h−1}), cos(t·ω_0), …]` with
/// `ω_i = 10000^(−i/h)` and `h = dim / 2`.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t as f64 * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t as f64 * w).cos()));
    out.resize(dim, 0.0);
    out
}

/// `ẑ0 = W·[z_t ; emb(t) ; cond] + b`, the serializable test denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDenoiser {
    pub cond_dim: usize,
    pub embed_dim: usize,
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearDenoiser {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, cond_dim: usize, embed_dim: usize) -> Result<Self> {
        let v = bias.len();
        if weight.nrows() != v || weight.ncols() != v + embed_dim + cond_dim {
            return Err(Error::invalid(format!(
                "weight is {}x{}, expected {v}x{}",
                weight.nrows(),
                weight.ncols(),
                v + embed_dim + cond_dim
            )));
        }
        Ok(LinearDenoiser {
            cond_dim,
            embed_dim,
            weight,
            bias,
        })
    }

    /// Ignores its inputs and always predicts `target`.
    pub fn constant(target: &[f64], cond_dim: usize) -> Self {
        let v = target.len();
        LinearDenoiser {
            cond_dim,
            embed_dim: STEP_EMBEDDING_DIM,
            weight: DMatrix::zeros(v, v + STEP_EMBEDDING_DIM + cond_dim),
            bias: DVector::from_column_slice(target),
        }
    }
}

impl Denoiser for LinearDenoiser {
    fn latent_dim(&self) -> usize {
        self.bias.len()
    }

    fn denoise(&self, z_t: &LatentCode, t: usize, cond: &ConditioningVector) -> LatentCode {
        let input: Vec<f64> = z_t
            .iter()
            .copied()
            .chain(step_embedding(t, self.embed_dim))
            .chain(cond.iter().copied())
            .collect();
        let out = &self.weight * DVector::from_vec(input) + &self.bias;
        LatentCode(out.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub final_latent: LatentCode,
    /// ẑ0 returned by each denoiser call, in call order.
    pub trajectory: Vec<LatentCode>,
}

/// Runs the reverse chain from a seeded `z_M ~ N(0, I)`.
///
/// With `stop_after = Some(j)` the chain returns the ẑ0 of the `j`-th
/// denoiser call; `j = 1` is single-step inference.
pub fn sample_chain(
    denoiser: &dyn Denoiser,
    cond: &ConditioningVector,
    sched: &NoiseSchedule,
    eta: f64,
    stop_after: Option<usize>,
    seed: u64,
) -> Result<ChainOutput> {
    let steps = sched.steps();
    let stop = stop_after.unwrap_or(steps);
    if stop < 1 || stop > steps {
        return Err(Error::invalid(format!("stop_after must be in [1, {steps}], got {stop}")));
    }
    let dim = denoiser.latent_dim();
    let mut rng = NormalRng::seeded(seed);
    let mut z = LatentCode(rng.normals(dim));
    let mut trajectory = Vec::with_capacity(stop);
    for t in (1..=steps).rev() {
        let zhat0 = denoiser.denoise(&z, t, cond);
        if zhat0.len() != dim {
            return Err(Error::invalid(format!(
                "denoiser returned {} values, expected {dim}",
                zhat0.len()
            )));
        }
        trajectory.push(zhat0);
        if trajectory.len() == stop {
            break;
        }
        let noise = (eta > 0.0).then(|| LatentCode(rng.normals(dim)));
        z = ddim_step(&z, t, trajectory.last().unwrap(), sched, eta, noise.as_ref())?;
    }
    let final_latent = if stop == steps {
        // ᾱ_0 = 1, so the last DDIM update returns ẑ0 itself.
        let last = trajectory.last().unwrap();
        ddim_step(&z, 1, last, sched, eta, None)?
    } else {
        trajectory.last().unwrap().clone()
    };
    Ok(ChainOutput {
        final_latent,
        trajectory,
    })
}

/// `n` independent chains, sample `i` seeded with `seed + i`. The result does
/// not depend on how rayon schedules the work.
pub fn sample_many(
    denoiser: &dyn Denoiser,
    cond: &ConditioningVector,
    sched: &NoiseSchedule,
    eta: f64,
    stop_after: Option<usize>,
    seed: u64,
    n: usize,
) -> Result<Vec<ChainOutput>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| sample_chain(denoiser, cond, sched, eta, stop_after, seed.wrapping_add(i)))
        .collect()
}

/// `decay·average + (1 − decay)·current`.
pub fn ema_update(current: &[f64], average: &[f64], decay: f64) -> Result<Vec<f64>> {
    same_len(current, average, "ema_update")?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("decay must be in [0, 1], got {decay}")));
    }
    Ok(current
        .iter()
        .zip(average)
        .map(|(c, a)| decay * a + (1.0 - decay) * c)
        .collect())
}
