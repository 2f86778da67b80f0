//! Per-example robustness certificates and dataset-level robust error.
//!
//! A certificate for (x, ε) asserts that every targeted objective J stays
//! positive over the whole perturbation ball, so no admissible perturbation
//! can flip the prediction. Exact mode is deterministic; median mode trades
//! the guarantee for speed; the high-probability mode keeps a guarantee that
//! holds jointly with probability 1 − δ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodual::{build_dual, BoundMode, JEstimator, Norm};
use crate::error::{Error, Result};
use crate::netgraph::NetworkGraph;
use crate::projest::{self, plan_tail, TailPlan, DEFAULT_K_BUDGET};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Absolute margin a J value must clear before we call it positive. A
/// certificate decided by the sign of a float needs an explicit numeric
/// slack so accumulated rounding cannot flip it.
pub const CERT_SLACK: f64 = 1e-6;

/// Perturbation ball around an anchor point.
#[derive(Clone, Debug)]
pub struct BallSpec {
    pub norm: Norm,
    pub eps: f64,
    /// Anchor, stored as a [1, n] row.
    pub x: Tensor,
}

impl BallSpec {
    pub fn new(norm: Norm, eps: f64, x: Tensor) -> Result<Self> {
        if eps < 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
        }
        let n = x.len();
        let x = Tensor::new(vec![1, n], x.data().to_vec())?;
        Ok(BallSpec { norm, eps, x })
    }
}

/// How certification evaluates norm terms, both in the bound pass and in the
/// final objective.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalMode {
    Exact,
    Median { r: usize, seed: u64 },
    HighProb { plan: TailPlan, seed: u64 },
}

impl EvalMode {
    /// Derive a per-example variant so parallel certification stays
    /// deterministic regardless of scheduling.
    pub fn for_example(&self, idx: usize) -> EvalMode {
        let reseed = |s: u64| projest::splitmix64(s ^ (idx as u64 + 1));
        match self {
            EvalMode::Exact => EvalMode::Exact,
            EvalMode::Median { r, seed } => EvalMode::Median { r: *r, seed: reseed(*seed) },
            EvalMode::HighProb { plan, seed } => {
                EvalMode::HighProb { plan: plan.clone(), seed: reseed(*seed) }
            }
        }
    }

    fn describe(&self) -> CertMode {
        match self {
            EvalMode::Exact => CertMode::Exact,
            EvalMode::Median { r, seed } => CertMode::Median { r: *r, seed: *seed },
            EvalMode::HighProb { plan, seed } => CertMode::HighProb {
                delta: plan.delta,
                m: plan.m,
                k: plan.k,
                seed: *seed,
            },
        }
    }
}

/// Mode tag recorded on a certificate.
#[derive(Clone, Debug, PartialEq)]
pub enum CertMode {
    Exact,
    Median { r: usize, seed: u64 },
    HighProb { delta: f64, m: usize, k: usize, seed: u64 },
}

impl std::fmt::Display for CertMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CertMode::Exact => write!(f, "exact"),
            CertMode::Median { r, seed } => write!(f, "median(r={r},seed={seed})"),
            CertMode::HighProb { delta, m, k, seed } => {
                write!(f, "highprob(delta={delta},m={m},k={k},seed={seed})")
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub example: usize,
    pub label: usize,
    pub predicted: usize,
    /// Target classes, in class order, skipping the predicted class.
    pub targets: Vec<usize>,
    /// J value per target, aligned with `targets`.
    pub j: Vec<f64>,
    pub certified: bool,
    pub mode: CertMode,
    pub slack: f64,
}

impl Certificate {
    pub fn min_j(&self) -> f64 {
        self.j.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Rows e_y − e_j for every class j ≠ y, plus the target order.
pub fn targeted_rows(classes: usize, y: usize) -> (Tensor, Vec<usize>) {
    assert!(y < classes);
    let targets: Vec<usize> = (0..classes).filter(|&j| j != y).collect();
    let mut data = vec![0.0; targets.len() * classes];
    for (row, &j) in targets.iter().enumerate() {
        data[row * classes + y] = 1.0;
        data[row * classes + j] = -1.0;
    }
    (Tensor::new(vec![targets.len(), classes], data).unwrap(), targets)
}

/// Lower bound on cᵀz over the ball, one value per row of `c`.
pub fn robust_objective(net: &NetworkGraph, ball: &BallSpec, c: &Tensor, mode: &EvalMode) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let staged = net.stage(&mut tape, false);
    let x = tape.constant(ball.x.clone());
    let (bound_mode, jest) = match mode {
        EvalMode::Exact => (BoundMode::Exact, JEstimator::Exact),
        EvalMode::Median { r, seed } => (
            BoundMode::Projected { r: *r, seed: *seed },
            JEstimator::Median { r: *r, seed: *seed },
        ),
        // the looser per-unit upper bounds enter through the bound pass; the
        // final objective is evaluated exactly on the materialized dual
        EvalMode::HighProb { plan, seed } => {
            (BoundMode::MaxGeo { plan: plan.clone(), seed: *seed }, JEstimator::Exact)
        }
    };
    let dn = build_dual(&mut tape, net, &staged, x, ball.eps, ball.norm, bound_mode)?;
    let j = dn.objective_rows(&mut tape, c, jest)?;
    Ok(tape.value(j).data().to_vec())
}

/// Certify the prediction at the ball's anchor. `example` and `label` are
/// carried through for reporting only.
pub fn certify(
    net: &NetworkGraph,
    ball: &BallSpec,
    example: usize,
    label: usize,
    mode: &EvalMode,
) -> Result<Certificate> {
    let predicted = net.predict(&ball.x)?[0];
    let classes = net.validate()?[&net.last_id()].iter().product::<usize>();
    let (c, targets) = targeted_rows(classes, predicted);
    let j = robust_objective(net, ball, &c, mode)?;
    let certified = j.iter().all(|&v| v > CERT_SLACK);
    Ok(Certificate {
        example,
        label,
        predicted,
        targets,
        j,
        certified,
        mode: mode.describe(),
        slack: CERT_SLACK,
    })
}

/// Input sizes of the activation layers in network order; the tail plan
/// budgets one failure probability per estimate these consume.
pub fn activation_input_sizes(net: &NetworkGraph) -> Result<Vec<usize>> {
    let shapes = net.validate()?;
    Ok(net
        .layers
        .iter()
        .filter(|l| l.kind.is_activation())
        .map(|l| shapes[&l.inputs[0]].iter().product())
        .collect())
}

/// Certificate that holds with probability at least 1 − δ over the sampled
/// projections, via the max-geometric upper bound on every ℓ1 norm in the
/// bound computation.
pub fn certify_high_prob(
    net: &NetworkGraph,
    ball: &BallSpec,
    example: usize,
    label: usize,
    delta: f64,
    m: usize,
    seed: u64,
) -> Result<Certificate> {
    if ball.norm != Norm::Linf {
        return Err(Error::InvalidArgument(
            "high-probability certificates require an l-inf ball".into(),
        ));
    }
    let sizes = activation_input_sizes(net)?;
    let plan = plan_tail(delta, &sizes, m, DEFAULT_K_BUDGET)?;
    certify(net, ball, example, label, &EvalMode::HighProb { plan, seed })
}

#[derive(Clone, Debug)]
pub struct RobustErrorReport {
    pub robust_error: f64,
    pub standard_error: f64,
    pub n: usize,
    pub certificates: Vec<Certificate>,
}

/// Fraction of examples misclassified or uncertified: an upper bound on the
/// error rate under any attack within the ball. Examples certify
/// independently; the reduction keeps dataset order.
pub fn robust_error(
    net: &NetworkGraph,
    xs: &Tensor,
    ys: &[usize],
    eps: f64,
    norm: Norm,
    mode: &EvalMode,
) -> Result<RobustErrorReport> {
    if xs.shape().len() != 2 || xs.shape()[0] != ys.len() || ys.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset shape {:?} vs {} labels",
            xs.shape(),
            ys.len()
        )));
    }
    let n = ys.len();
    let dim = xs.shape()[1];
    let certificates: Vec<Certificate> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = Tensor::new(vec![1, dim], xs.data()[i * dim..(i + 1) * dim].to_vec())?;
            let ball = BallSpec::new(norm, eps, row)?;
            certify(net, &ball, i, ys[i], &mode.for_example(i))
        })
        .collect::<Result<_>>()?;
    let wrong = certificates.iter().filter(|c| c.predicted != c.label).count();
    let robust = certificates.iter().filter(|c| c.predicted != c.label || !c.certified).count();
    Ok(RobustErrorReport {
        robust_error: robust as f64 / n as f64,
        standard_error: wrong as f64 / n as f64,
        n,
        certificates,
    })
}

/// Best (lowest) value of cᵀf(x+Δ) found by search over the ball: an upper
/// bound on the true minimum, hence on any valid certificate's J. Projected
/// gradient descent with random restarts, plus exhaustive corner and grid
/// probes when the input dimension is at most 3.
pub fn attack_oracle(net: &NetworkGraph, ball: &BallSpec, c: &[f64], budget: usize) -> Result<f64> {
    let dim = ball.x.len();
    let eval = |delta: &[f64]| -> Result<f64> {
        let data: Vec<f64> = ball.x.data().iter().zip(delta).map(|(a, d)| a + d).collect();
        let out = net.forward(&Tensor::new(vec![1, dim], data)?)?;
        Ok(out.data().iter().zip(c).map(|(o, ci)| o * ci).sum())
    };

    let mut best = eval(&vec![0.0; dim])?;
    if ball.eps == 0.0 {
        return Ok(best);
    }

    if dim <= 3 {
        // corners are optimal for affine pieces; the grid covers the interior
        let steps = 9usize;
        let mut idx = vec![0usize; dim];
        loop {
            let delta: Vec<f64> = idx
                .iter()
                .map(|&i| -ball.eps + 2.0 * ball.eps * i as f64 / (steps - 1) as f64)
                .collect();
            let admissible = match ball.norm {
                Norm::Linf => true,
                Norm::L2 => delta.iter().map(|d| d * d).sum::<f64>().sqrt() <= ball.eps + 1e-12,
            };
            if admissible {
                best = best.min(eval(&delta)?);
            }
            let mut k = 0;
            while k < dim {
                idx[k] += 1;
                if idx[k] < steps {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == dim {
                break;
            }
        }
    }

    let steps = 60;
    let alpha = 2.5 * ball.eps / steps as f64;
    let restarts = budget.max(1);
    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(projest::splitmix64(0xa77ac4 ^ restart as u64));
        let mut delta: Vec<f64> = match ball.norm {
            Norm::Linf => (0..dim).map(|_| rng.gen_range(-ball.eps..=ball.eps)).collect(),
            Norm::L2 => {
                let raw: Vec<f64> = (0..dim)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen();
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                let nrm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let radius = ball.eps * rng.gen::<f64>();
                raw.iter().map(|v| v * radius / nrm).collect()
            }
        };
        if restart == 0 {
            delta.iter_mut().for_each(|d| *d = 0.0);
        }
        for _ in 0..steps {
            let mut tape = Tape::new();
            let staged = net.stage(&mut tape, false);
            let data: Vec<f64> = ball.x.data().iter().zip(&delta).map(|(a, d)| a + d).collect();
            let xv = tape.leaf(Tensor::new(vec![1, dim], data)?, true);
            let outs = staged.forward_all(&mut tape, net, xv)?;
            let out = outs[&net.last_id()];
            let cv = tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?);
            let prod = tape.mul(out, cv)?;
            let obj = tape.sum_all(prod)?;
            best = best.min(tape.value(obj).data()[0]);
            let grads = tape.backward(obj, Tensor::new(vec![], vec![1.0])?)?;
            let g = grads
                .get(xv)
                .ok_or_else(|| Error::InvalidArgument("attack gradient missing".into()))?;
            match ball.norm {
                Norm::Linf => {
                    for (d, gi) in delta.iter_mut().zip(g.data()) {
                        *d = (*d - alpha * gi.signum()).clamp(-ball.eps, ball.eps);
                    }
                }
                Norm::L2 => {
                    let gn = g.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    for (d, gi) in delta.iter_mut().zip(g.data()) {
                        *d -= alpha * gi / gn;
                    }
                    let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if dn > ball.eps {
                        delta.iter_mut().for_each(|d| *d *= ball.eps / dn);
                    }
                }
            }
        }
        best = best.min(eval(&delta)?);
    }
    Ok(best)
}

/// ℓ2 radius whose ball has the same volume as the ℓ∞ ball of radius ε in
/// dimension d (large-d closed form √(d/π)·ε).
pub fn epsilon_l2_equivalent(d: f64, eps_inf: f64) -> f64 {
    assert!(d >= 1.0);
    (d / std::f64::consts::PI).sqrt() * eps_inf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{mlp, LayerKind, LayerSpec, ParamRef, ParamSlot};
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn linear_net(w: Tensor, b: Tensor) -> NetworkGraph {
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        NetworkGraph::new(
            vec![LayerSpec { id: 2, kind: LayerKind::Linear { w, b }, inputs: vec![1] }],
            vec![inp],
            out,
        )
        .unwrap()
    }

    fn closed_form(w: &Tensor, b: &Tensor, x: &[f64], c: &[f64], eps: f64, norm: Norm) -> f64 {
        let (o, n) = (w.shape()[0], w.shape()[1]);
        let fx: Vec<f64> = (0..o)
            .map(|i| (0..n).map(|j| w.data()[i * n + j] * x[j]).sum::<f64>() + b.data()[i])
            .collect();
        let wc: Vec<f64> = (0..n).map(|j| (0..o).map(|i| c[i] * w.data()[i * n + j]).sum()).collect();
        let dual = match norm {
            Norm::Linf => wc.iter().map(|v| v.abs()).sum::<f64>(),
            Norm::L2 => wc.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        c.iter().zip(&fx).map(|(ci, fi)| ci * fi).sum::<f64>() - eps * dual
    }

    #[test]
    fn affine_net_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = t(&[3, 4], &(0..12).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let b = t(&[3], &(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let net = linear_net(w.clone(), b.clone());
            for norm in [Norm::Linf, Norm::L2] {
                let ball = BallSpec::new(norm, 0.3, t(&[4], &x)).unwrap();
                let j = robust_objective(&net, &ball, &t(&[1, 3], &c), &EvalMode::Exact).unwrap()[0];
                let want = closed_form(&w, &b, &x, &c, 0.3, norm);
                assert!((j - want).abs() < 1e-9, "{j} vs {want}");
            }
        }
    }

    #[test]
    fn identity_net_hand_value() {
        let net = linear_net(Tensor::eye(2), Tensor::zeros(&[2]));
        let ball = BallSpec::new(Norm::Linf, 0.1, t(&[2], &[0.0, 0.0])).unwrap();
        let j = robust_objective(&net, &ball, &t(&[1, 2], &[1.0, -1.0]), &EvalMode::Exact).unwrap();
        assert!((j[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_radius_gives_margin() {
        let net = mlp(&[3, 5, 2], 5).unwrap();
        let x = t(&[3], &[0.4, -0.2, 0.7]);
        let fx = net.forward(&t(&[1, 3], x.data())).unwrap();
        let ball = BallSpec::new(Norm::Linf, 0.0, x).unwrap();
        let c = t(&[1, 2], &[1.0, -1.0]);
        let j = robust_objective(&net, &ball, &c, &EvalMode::Exact).unwrap()[0];
        assert!((j - (fx.data()[0] - fx.data()[1])).abs() < 1e-10);
        let a = attack_oracle(&net, &ball, &[1.0, -1.0], 1).unwrap();
        assert!((a - j).abs() < 1e-10);
    }

    #[test]
    fn corner_search_is_tight_on_linear_nets() {
        let w = t(&[2, 2], &[1.0, -2.0, 0.5, 1.5]);
        let b = t(&[2], &[0.1, -0.3]);
        let net = linear_net(w.clone(), b.clone());
        let x = [0.2, -0.1];
        let c = [1.0, -1.0];
        let ball = BallSpec::new(Norm::Linf, 0.25, t(&[2], &x)).unwrap();
        let attack = attack_oracle(&net, &ball, &c, 2).unwrap();
        let want = closed_form(&w, &b, &x, &c, 0.25, Norm::Linf);
        assert!((attack - want).abs() < 1e-9, "{attack} vs {want}");
    }

    #[test]
    fn certify_margin_and_boundary() {
        // separator with a wide margin along the first coordinate
        let net = linear_net(t(&[2, 2], &[1.0, 0.0, -1.0, 0.0]), Tensor::zeros(&[2]));
        let far = BallSpec::new(Norm::Linf, 0.1, t(&[2], &[2.0, 0.0])).unwrap();
        let cert = certify(&net, &far, 0, 0, &EvalMode::Exact).unwrap();
        assert!(cert.certified && cert.predicted == 0);
        assert!(cert.min_j() > 1.0);
        let boundary = BallSpec::new(Norm::Linf, 0.1, t(&[2], &[0.0, 0.0])).unwrap();
        let cert = certify(&net, &boundary, 0, 0, &EvalMode::Exact).unwrap();
        assert!(!cert.certified);
        let exact_pt = BallSpec::new(Norm::Linf, 0.0, t(&[2], &[2.0, 0.0])).unwrap();
        assert!(certify(&net, &exact_pt, 0, 0, &EvalMode::Exact).unwrap().certified);
    }

    #[test]
    fn oracle_never_beats_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..15 {
            let net = mlp(&[3, 6, 4, 2], 100 + trial).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for norm in [Norm::Linf, Norm::L2] {
                let ball = BallSpec::new(norm, 0.15, t(&[3], &x)).unwrap();
                let j = robust_objective(&net, &ball, &t(&[1, 2], &c), &EvalMode::Exact).unwrap()[0];
                let a = attack_oracle(&net, &ball, &c, 3).unwrap();
                assert!(j <= a + 1e-7, "bound {j} above attack {a} ({norm:?})");
            }
        }
    }

    #[test]
    fn objective_monotone_in_radius() {
        let net = mlp(&[4, 8, 3], 77).unwrap();
        let x = t(&[4], &[0.1, -0.4, 0.3, 0.2]);
        let c = t(&[1, 3], &[1.0, -0.5, -0.5]);
        let mut prev = f64::INFINITY;
        for i in 0..6 {
            let ball = BallSpec::new(Norm::Linf, i as f64 * 0.05, x.clone()).unwrap();
            let j = robust_objective(&net, &ball, &c, &EvalMode::Exact).unwrap()[0];
            assert!(j <= prev + 1e-12);
            prev = j;
        }
    }

    #[test]
    fn output_translation_shifts_j_linearly() {
        let mut net = mlp(&[3, 5, 2], 9).unwrap();
        let x = t(&[3], &[0.2, 0.1, -0.3]);
        let c = t(&[1, 2], &[1.0, -1.0]);
        let ball = BallSpec::new(Norm::Linf, 0.1, x).unwrap();
        let before = robust_objective(&net, &ball, &c, &EvalMode::Exact).unwrap()[0];
        let last = net.last_id();
        let shift = [0.7, -0.2];
        {
            let bias = net.param_mut(ParamRef { layer: last, slot: ParamSlot::Bias });
            for (b, s) in bias.data_mut().iter_mut().zip(shift) {
                *b += s;
            }
        }
        let after = robust_objective(&net, &ball, &c, &EvalMode::Exact).unwrap()[0];
        let ct = c.data()[0] * shift[0] + c.data()[1] * shift[1];
        assert!((after - before - ct).abs() < 1e-10);
    }

    #[test]
    fn high_prob_never_certifies_what_exact_rejects() {
        for seed in 0..10u64 {
            let net = mlp(&[4, 6, 3], 300 + seed).unwrap();
            let x = t(&[4], &[0.3, -0.1, 0.2, 0.05]);
            let ball = BallSpec::new(Norm::Linf, 0.05, x).unwrap();
            let hp = certify_high_prob(&net, &ball, 0, 0, 0.1, 4, seed).unwrap();
            let exact = certify(&net, &ball, 0, 0, &EvalMode::Exact).unwrap();
            // looser bounds can only lower J
            assert!(hp.min_j() <= exact.min_j() + 1e-9);
            if hp.certified {
                assert!(exact.certified);
            }
        }
    }

    #[test]
    fn robust_error_at_zero_radius_is_standard_error() {
        let net = mlp(&[3, 8, 3], 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = t(&[12, 3], &(0..36).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let ys: Vec<usize> = net.predict(&xs).unwrap();
        let rep = robust_error(&net, &xs, &ys, 0.0, Norm::Linf, &EvalMode::Exact).unwrap();
        assert_eq!(rep.standard_error, 0.0);
        assert_eq!(rep.robust_error, 0.0);
        assert_eq!(rep.n, 12);
        // mislabel some examples: they count in both errors
        let mut ys2 = ys.clone();
        ys2[0] = (ys2[0] + 1) % 3;
        ys2[5] = (ys2[5] + 1) % 3;
        let rep = robust_error(&net, &xs, &ys2, 0.0, Norm::Linf, &EvalMode::Exact).unwrap();
        assert!((rep.standard_error - 2.0 / 12.0).abs() < 1e-12);
        assert_eq!(rep.robust_error, rep.standard_error);
    }

    #[test]
    fn radius_conversion_values() {
        assert!((epsilon_l2_equivalent(784.0, 0.1) - 1.58).abs() < 0.005);
        assert!((epsilon_l2_equivalent(std::f64::consts::PI, 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(epsilon_l2_equivalent(100.0, 0.0), 0.0);
    }

    #[test]
    fn median_mode_tracks_exact() {
        let net = mlp(&[6, 10, 4], 8).unwrap();
        let x = t(&[6], &[0.1, -0.2, 0.3, 0.0, 0.25, -0.15]);
        let c = t(&[1, 4], &[1.0, -1.0, 0.0, 0.0]);
        let ball = BallSpec::new(Norm::Linf, 0.05, x).unwrap();
        let exact = robust_objective(&net, &ball, &c, &EvalMode::Exact).unwrap()[0];
        let est = robust_objective(&net, &ball, &c, &EvalMode::Median { r: 301, seed: 5 }).unwrap()[0];
        assert!((est - exact).abs() < 0.25 * exact.abs().max(1.0), "{est} vs {exact}");
    }
}
