//! Decoding error rate `P_e(t)` and the time reparameterization
//! `tau(t) = 1 - |V|/(|V|-1) * P_e(t)` that spreads decoding progress
//! evenly over `tau`.
//!
//! A token of the interpolant `(1-t) z + t e_y` decodes correctly iff
//! `z_j < z_y + t/(1-t)` for every other coordinate, so
//! `1 - P_e(t) = E[Phi(Z + t/(1-t))^(|V|-1)]`, one scalar Gaussian integral
//! evaluated with a 128-node Gauss–Hermite rule. The table of `(t, tau)` on
//! 1000 equispaced points is interpolated with a monotone cubic; the inverse
//! starts from the swapped table and is polished against the forward map so
//! that `t(tau(t)) = t` to near machine precision.

mod quadrature;
mod spline;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub use quadrature::GaussHermite;
pub use spline::MonotoneCubic;

pub const GAUSS_HERMITE_ORDER: usize = 128;
pub const GRID_POINTS: usize = 1000;
pub const DEFAULT_BOUNDARY_PROB: f64 = 1.0 / 64.0;
const TAIL_SLOPE: f64 = 1e-8;

fn gauss_hermite() -> &'static GaussHermite {
    static GH: OnceLock<GaussHermite> = OnceLock::new();
    GH.get_or_init(|| GaussHermite::new(GAUSS_HERMITE_ORDER))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn ln_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else {
        normal_cdf(x).ln()
    }
}

/// Probability that argmax decoding of one interpolant row is correct.
fn correct_probability(t: f64, vocab: usize) -> f64 {
    let a = t / (1.0 - t);
    let k = (vocab - 1) as f64;
    gauss_hermite().expect_standard_normal(|z| (k * ln_normal_cdf(z + a)).exp())
}

/// Expected fraction of tokens whose argmax decode at time `t` differs from
/// the clean token. Exactly `1 - 1/|V|` at `t = 0` and `0` at `t = 1`.
pub fn decoding_error_rate(t: f64, vocab: usize) -> Result<f64> {
    if vocab < 2 {
        return Err(Error::Config(format!("vocabulary size {vocab} < 2")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} not in [0, 1]")));
    }
    if t == 0.0 {
        return Ok(1.0 - 1.0 / vocab as f64);
    }
    if t == 1.0 {
        return Ok(0.0);
    }
    Ok((1.0 - correct_probability(t, vocab)).max(0.0))
}

/// Monotone map `t -> tau` with its inverse.
#[derive(Debug, Clone)]
pub struct TimeWarp {
    vocab_size: Option<usize>,
    forward: MonotoneCubic,
    inverse: MonotoneCubic,
}

/// `(s, u, t)` with `0 <= s <= u <= t <= 1`, plus their warped times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeTriplet {
    pub s: f64,
    pub u: f64,
    pub t: f64,
    pub tau_s: f64,
    pub tau_u: f64,
    pub tau_t: f64,
}

fn grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64).collect()
}

impl TimeWarp {
    fn from_table(vocab_size: Option<usize>, ts: Vec<f64>, taus: Vec<f64>) -> Result<Self> {
        let forward = MonotoneCubic::new(ts.clone(), taus.clone())?;
        let inverse = MonotoneCubic::new(taus, ts)?;
        Ok(TimeWarp {
            vocab_size,
            forward,
            inverse,
        })
    }

    /// `tau(t) = t`.
    pub fn identity() -> Self {
        let ts = grid();
        TimeWarp::from_table(None, ts.clone(), ts).expect("identity table is monotone")
    }

    pub fn vocab_size(&self) -> Option<usize> {
        self.vocab_size
    }

    /// The `(t, tau)` knots.
    pub fn table(&self) -> (&[f64], &[f64]) {
        self.forward.knots()
    }

    pub fn forward_spline(&self) -> &MonotoneCubic {
        &self.forward
    }

    pub fn tau_forward(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("t = {t} not in [0, 1]")));
        }
        Ok(self.forward.eval(t).clamp(0.0, 1.0))
    }

    pub fn tau_inverse(&self, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::OutOfRange(format!("tau = {tau} not in [0, 1]")));
        }
        let i = self.inverse.segment(tau);
        let guess = self.inverse.eval_in(i, tau);
        Ok(self.forward.solve_in(i, tau, guess).clamp(0.0, 1.0))
    }

    /// `tau'(t) = alpha tau(t) + (1 - alpha) t`.
    pub fn blend(&self, alpha: f64) -> Result<TimeWarp> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::OutOfRange(format!("blend alpha = {alpha} not in [0, 1]")));
        }
        if alpha == 1.0 {
            return Ok(self.clone());
        }
        let (ts, taus) = self.table();
        let blended: Vec<f64> = ts.iter().zip(taus).map(|(t, tau)| alpha * tau + (1.0 - alpha) * t).collect();
        TimeWarp::from_table(self.vocab_size, ts.to_vec(), blended)
    }
}

/// Decoding-error-rate warp for a vocabulary of size `vocab`.
pub fn build_time_warp(vocab: usize) -> Result<TimeWarp> {
    if vocab < 2 {
        return Err(Error::Config(format!("vocabulary size {vocab} < 2")));
    }
    let ts = grid();
    let scale = vocab as f64 / (vocab as f64 - 1.0);
    let mut taus = Vec::with_capacity(ts.len());
    for &t in &ts {
        taus.push(1.0 - scale * decoding_error_rate(t, vocab)?);
    }
    // 1 - tau underflows long before t = 1; keep the table strictly
    // increasing by capping it at a line of slope TAIL_SLOPE through (1, 1).
    for (tau, &t) in taus.iter_mut().zip(&ts) {
        *tau = tau.min(1.0 - TAIL_SLOPE * (1.0 - t));
    }
    taus[0] = 0.0;
    *taus.last_mut().expect("non-empty grid") = 1.0;
    if let Some(i) = taus.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Numerical(format!(
            "tau table not strictly increasing at t = {} for |V| = {vocab}",
            ts[i + 1]
        )));
    }
    TimeWarp::from_table(Some(vocab), ts, taus)
}

/// Training time: `tau(t)` uniform on [0, 1].
pub fn sample_training_time(rng: &mut SeededRng, warp: &TimeWarp) -> f64 {
    warp.tau_inverse(rng.uniform()).expect("uniform draw lies in [0, 1)")
}

/// `t_n = t(n / N)` for `n = 0..=N`, with exact endpoints.
pub fn sampling_grid(warp: &TimeWarp, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("sampling grid needs N >= 1".into()));
    }
    let mut g = Vec::with_capacity(steps + 1);
    g.push(0.0);
    for n in 1..steps {
        g.push(warp.tau_inverse(n as f64 / steps as f64)?);
    }
    g.push(1.0);
    Ok(g)
}

/// Upper bound of the distillation step size `h`, doubling every
/// `doubling_interval` steps from `initial` until it reaches 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizeWarmup {
    pub initial: f64,
    pub doubling_interval: usize,
}

impl StepSizeWarmup {
    pub fn h_max(&self, step: usize) -> f64 {
        if self.doubling_interval == 0 {
            return 1.0;
        }
        let doublings = (step / self.doubling_interval).min(64) as i32;
        (self.initial * 2f64.powi(doublings)).min(1.0)
    }
}

/// Draws `(s, u, t)`: with probability `boundary_prob` the pair `(0, 1)`,
/// otherwise `h ~ U[0, h_max]`, `tau(s) ~ U[0, 1-h]`, `tau(t) = tau(s) + h`,
/// and `u` at the midpoint in warped time.
pub fn sample_time_triplet(rng: &mut SeededRng, warp: &TimeWarp, boundary_prob: f64, h_max: f64) -> TimeTriplet {
    debug_assert!((0.0..=1.0).contains(&boundary_prob));
    debug_assert!(h_max > 0.0 && h_max <= 1.0);
    let (tau_s, tau_t) = if rng.uniform() < boundary_prob {
        (0.0, 1.0)
    } else {
        let h = rng.uniform() * h_max;
        let tau_s = rng.uniform() * (1.0 - h);
        (tau_s, (tau_s + h).min(1.0))
    };
    let tau_u = 0.5 * (tau_s + tau_t);
    let inv = |tau: f64| warp.tau_inverse(tau).expect("warped time in [0, 1]");
    let s = inv(tau_s);
    let t = inv(tau_t);
    let u = inv(tau_u).clamp(s, t);
    TimeTriplet {
        s,
        u,
        t,
        tau_s,
        tau_u,
        tau_t,
    }
}
