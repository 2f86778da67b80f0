//! Random-projection estimators for dual norms.
//!
//! Cauchy projections with a sample median estimate ℓ1 row norms in linear
//! time; normal projections handle ℓ2. The geometric-mean variant carries a
//! one-sided tail bound, which `plan_tail` turns into a per-estimate failure
//! budget for high-probability certificates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cheap stateless mix for deriving per-layer seeds from a build seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// i.i.d. standard Cauchy entries via the inverse CDF, one uniform per entry.
pub fn sample_cauchy(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen();
            (std::f64::consts::PI * (u - 0.5)).tan()
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// i.i.d. standard normal entries (Box-Muller).
pub fn sample_normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-300..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Sample median with the lower-middle convention for even lengths.
pub fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty());
    let k = (samples.len() - 1) / 2;
    let (_, m, _) = samples.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap());
    *m
}

/// Per-row median of absolute values of a [rows, r] projection block.
pub fn median_abs_rows(proj: &Tensor) -> Vec<f64> {
    let (rows, r) = (proj.shape()[0], proj.shape()[1]);
    (0..rows)
        .map(|i| {
            let mut abs: Vec<f64> = proj.data()[i * r..(i + 1) * r].iter().map(|v| v.abs()).collect();
            median(&mut abs)
        })
        .collect()
}

/// Root-mean-square of a projection row: the classical ℓ2 norm estimate.
pub fn rms_rows(proj: &Tensor) -> Vec<f64> {
    let (rows, r) = (proj.shape()[0], proj.shape()[1]);
    (0..rows)
        .map(|i| {
            let ss: f64 = proj.data()[i * r..(i + 1) * r].iter().map(|v| v * v).sum();
            (ss / r as f64).sqrt()
        })
        .collect()
}

/// One geometric-mean estimate inflated by 1/(1−ε): an upper bound on the ℓ1
/// norm except with probability exp(−k·tail_exponent(ε)).
pub fn geo_upper(samples: &[f64], eps_tail: f64) -> f64 {
    let k = samples.len() as f64;
    if samples.iter().any(|&v| v == 0.0) {
        return 0.0;
    }
    let log_mean: f64 = samples.iter().map(|&v| v.abs().ln()).sum::<f64>() / k;
    log_mean.exp() / (1.0 - eps_tail)
}

/// Max over m replicas of the geometric estimate; per-row over a
/// [rows, m·k] projection block.
pub fn maxgeo_rows(proj: &Tensor, m: usize, k: usize, eps_tail: f64) -> Vec<f64> {
    let rows = proj.shape()[0];
    assert_eq!(proj.shape()[1], m * k);
    (0..rows)
        .map(|i| {
            let row = &proj.data()[i * m * k..(i + 1) * m * k];
            (0..m)
                .map(|rep| geo_upper(&row[rep * k..(rep + 1) * k], eps_tail))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Exponent D(ε) in the lower-tail bound exp(−k·D(ε)) of the geometric
/// estimator (ε²/G in the usual statement).
pub fn tail_exponent(eps_tail: f64) -> f64 {
    let a = std::f64::consts::FRAC_2_PI * (1.0 - eps_tail).ln();
    -0.5 * (1.0 + a * a).ln() + std::f64::consts::FRAC_2_PI * a.atan() * (1.0 - eps_tail).ln()
}

/// Number of norm/term estimates a full certificate consumes, given the
/// activation-input sizes in network order: the i-th such layer needs one
/// norm estimate plus one term estimate per upstream activation, so the
/// count is n₂ + 2n₃ + 3n₄ + ...
pub fn n_estimates(activation_input_sizes: &[usize]) -> usize {
    activation_input_sizes.iter().enumerate().map(|(i, &n)| (i + 1) * n).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TailPlan {
    pub delta: f64,
    pub n_estimates: usize,
    pub m: usize,
    pub delta_hat: f64,
    pub k: usize,
    pub eps_tail: f64,
}

pub const DEFAULT_K_BUDGET: usize = 200;
const EPS_GRID_STEP: f64 = 1e-3;

/// Pick (k, ε) so each of the N estimates fails with probability ≤ δ̂ and the
/// whole certificate with probability ≤ δ. The inflation ε is minimized first
/// on a 1e-3 grid subject to the projection budget, then k is shrunk to the
/// smallest count still meeting δ̂ at that ε.
pub fn plan_tail(delta: f64, activation_input_sizes: &[usize], m: usize, k_budget: usize) -> Result<TailPlan> {
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(Error::InvalidArgument(format!("delta must be in (0,1), got {delta}")));
    }
    if m < 1 || k_budget < 1 {
        return Err(Error::InvalidArgument("m and k budget must be >= 1".into()));
    }
    let n = n_estimates(activation_input_sizes).max(1);
    let delta_hat = (delta / n as f64).powf(1.0 / m as f64);
    let need = (1.0 / delta_hat).ln();
    let k_needed = |eps: f64| (need / tail_exponent(eps)).ceil() as usize;

    let mut grid = 1;
    loop {
        let eps = grid as f64 * EPS_GRID_STEP;
        if eps >= 1.0 {
            let achievable = (-(k_budget as f64) * tail_exponent(1.0 - EPS_GRID_STEP)).exp();
            return if achievable > delta_hat {
                Err(Error::TailBudgetExceeded { needed: k_needed(1.0 - EPS_GRID_STEP), budget: k_budget })
            } else {
                Err(Error::InfeasibleTailPlan { requested: delta_hat, achievable })
            };
        }
        let k = k_needed(eps);
        if k <= k_budget {
            return Ok(TailPlan { delta, n_estimates: n, m, delta_hat, k, eps_tail: eps });
        }
        grid += 1;
    }
}

impl TailPlan {
    /// Per-replica failure probability actually achieved by (k, ε).
    pub fn replica_failure(&self) -> f64 {
        (-(self.k as f64) * tail_exponent(self.eps_tail)).exp()
    }
}
