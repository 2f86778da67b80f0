//! Robust training: minimize the loss of bound-derived surrogate logits.
//!
//! The robust objective J lower-bounds the margin the network keeps against
//! each wrong class over the whole perturbation ball, so cross-entropy on the
//! vector (0 at the label, −J elsewhere) is a drop-in replacement for the
//! standard loss. A cascade trains each stage only on examples the previous
//! stages could not certify.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodual::{build_dual, BoundMode, JEstimator, Norm};
use crate::certifier::{certify, robust_error, BallSpec, EvalMode};
use crate::error::{Error, Result};
use crate::netgraph::{NetworkGraph, StagedNet};
use crate::projest::splitmix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam { lr: 0.001, beta1: 0.9, beta2: 0.999 }
    }

    pub fn sgd_default() -> Self {
        Optimizer::Sgd { lr: 0.05, momentum: 0.9 }
    }

    fn base_lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Epochs over which ε ramps linearly from start to end; 0 means train at
    /// eps_end from the first epoch.
    pub eps_warmup_epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub norm: Norm,
    /// Number of random projections for the bound pass; None runs exact.
    pub projection: Option<usize>,
    /// Evaluate robust/standard error every this many epochs (the final
    /// epoch always reports). Dataset-level certification dominates epoch
    /// cost, so sparse evaluation keeps long runs cheap.
    pub eval_period: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, epochs: usize, eps: f64) -> Self {
        TrainConfig {
            optimizer,
            batch_size: 50,
            epochs,
            eps_start: eps,
            eps_end: eps,
            eps_warmup_epochs: 0,
            lr_decay_factor: 0.5,
            lr_decay_period: 10,
            norm: Norm::Linf,
            projection: None,
            eval_period: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.eps_start > self.eps_end {
            return Err(Error::InvalidArgument(format!(
                "eps_start {} above eps_end {}",
                self.eps_start, self.eps_end
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_factor) || self.lr_decay_factor == 0.0 {
            return Err(Error::InvalidArgument("lr decay factor must be in (0,1]".into()));
        }
        if self.lr_decay_period < 1 || self.eval_period < 1 {
            return Err(Error::InvalidArgument("decay and eval periods must be >= 1".into()));
        }
        Ok(())
    }

    /// Linear ramp from eps_start to eps_end over the warmup epochs.
    pub fn eps_at(&self, epoch: usize) -> f64 {
        if self.eps_warmup_epochs <= 1 || epoch + 1 >= self.eps_warmup_epochs {
            return self.eps_end;
        }
        let frac = epoch as f64 / (self.eps_warmup_epochs - 1) as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }

    /// Step decay after the warmup window.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let past = epoch.saturating_sub(self.eps_warmup_epochs);
        self.optimizer.base_lr() * self.lr_decay_factor.powi((past / self.lr_decay_period) as i32)
    }

    fn eval_mode(&self, seed: u64) -> EvalMode {
        match self.projection {
            None => EvalMode::Exact,
            Some(r) => EvalMode::Median { r, seed },
        }
    }
}

/// Per-example target stack [batch, classes, classes]: row j of example i is
/// e_{y_i} − e_j. The row at the label itself is zero, so its objective is
/// exactly zero and acts as the true-class logit in the loss.
pub fn surrogate_targets(classes: usize, ys: &[usize]) -> Tensor {
    let b = ys.len();
    let mut data = vec![0.0; b * classes * classes];
    for (i, &y) in ys.iter().enumerate() {
        assert!(y < classes);
        for j in 0..classes {
            if j == y {
                continue;
            }
            let base = (i * classes + j) * classes;
            data[base + y] = 1.0;
            data[base + j] = -1.0;
        }
    }
    Tensor::new(vec![b, classes, classes], data).unwrap()
}

/// Mean cross-entropy of the surrogate logits, as a tape node so gradients
/// reach the staged parameters.
pub fn robust_loss_on_tape(
    tape: &mut Tape,
    net: &NetworkGraph,
    staged: &StagedNet,
    x: Var,
    ys: &[usize],
    eps: f64,
    norm: Norm,
    mode: (BoundMode, JEstimator),
) -> Result<Var> {
    let classes: usize = net.validate()?[&net.last_id()].iter().product();
    let dn = build_dual(tape, net, staged, x, eps, norm, mode.0)?;
    let c = surrogate_targets(classes, ys);
    let j = dn.objective_batched(tape, &c, mode.1)?;
    // loss_i = ln Σ_j exp(−J_ij), stabilized by the row max (−J at the label
    // is exactly 0, so every row max is ≥ 0)
    let negj = tape.neg(j)?;
    let m = tape.max_axis(negj, 1)?;
    let m2 = tape.reshape(m, vec![ys.len(), 1])?;
    let shifted = tape.sub(negj, m2)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_axis(e, 1)?;
    let l = tape.ln(s)?;
    let rows = tape.add(l, m)?;
    for (i, v) in tape.value(rows).data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Diverged { epoch: 0, msg: format!("non-finite loss at example {i}") });
        }
    }
    tape.mean_all(rows)
}

/// Loss and parameter gradients for one batch, in `param_refs` order.
pub fn robust_loss(
    net: &NetworkGraph,
    xs: &Tensor,
    ys: &[usize],
    eps: f64,
    norm: Norm,
    proj: Option<(usize, u64)>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let staged = net.stage(&mut tape, true);
    let x = tape.constant(xs.clone());
    let mode = match proj {
        None => (BoundMode::Exact, JEstimator::Exact),
        Some((r, seed)) => (BoundMode::Projected { r, seed }, JEstimator::Median { r, seed }),
    };
    let loss = robust_loss_on_tape(&mut tape, net, &staged, x, ys, eps, norm, mode)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss, Tensor::new(vec![], vec![1.0])?)?;
    let out = net
        .param_refs()
        .iter()
        .map(|r| {
            grads
                .get(staged.var(r.layer, r.slot))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(net.param(*r).shape()))
        })
        .collect();
    Ok((value, out))
}

struct OptState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl OptState {
    fn new(net: &NetworkGraph) -> Self {
        let zeros: Vec<Tensor> = net.param_refs().iter().map(|r| Tensor::zeros(net.param(*r).shape())).collect();
        OptState { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, net: &mut NetworkGraph, grads: &[Tensor], opt: &Optimizer, lr: f64) {
        self.t += 1;
        for (idx, r) in net.param_refs().into_iter().enumerate() {
            let g = grads[idx].data();
            match opt {
                Optimizer::Sgd { momentum, .. } => {
                    let vel = self.m[idx].data_mut();
                    let p = net.param_mut(r).data_mut();
                    for k in 0..g.len() {
                        vel[k] = momentum * vel[k] + g[k];
                        p[k] -= lr * vel[k];
                    }
                }
                Optimizer::Adam { beta1, beta2, .. } => {
                    let bc1 = 1.0 - beta1.powi(self.t);
                    let bc2 = 1.0 - beta2.powi(self.t);
                    let m = self.m[idx].data_mut();
                    for k in 0..g.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    }
                    let v = self.v[idx].data_mut();
                    for k in 0..g.len() {
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    }
                    let p = net.param_mut(r).data_mut();
                    for k in 0..g.len() {
                        let mhat = self.m[idx].data()[k] / bc1;
                        let vhat = self.v[idx].data()[k] / bc2;
                        p[k] -= lr * mhat / (vhat.sqrt() + 1e-8);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub eps: f64,
    pub train_loss: f64,
    pub train_robust_error: f64,
    pub test_robust_error: f64,
    pub train_standard_error: f64,
    pub test_standard_error: f64,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,eps,train_loss,train_robust_error,test_robust_error,train_standard_error,test_standard_error"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.eps,
            self.train_loss,
            self.train_robust_error,
            self.test_robust_error,
            self.train_standard_error,
            self.test_standard_error
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub diverged: bool,
}

fn take_rows(xs: &Tensor, idx: &[usize]) -> Tensor {
    let dim = xs.shape()[1];
    let data: Vec<f64> = idx.iter().flat_map(|&i| xs.data()[i * dim..(i + 1) * dim].to_vec()).collect();
    Tensor::new(vec![idx.len(), dim], data).unwrap()
}

fn snapshot(net: &NetworkGraph) -> Vec<Tensor> {
    net.param_refs().iter().map(|r| net.param(*r).clone()).collect()
}

fn restore(net: &mut NetworkGraph, params: &[Tensor]) {
    for (r, p) in net.param_refs().into_iter().zip(params) {
        *net.param_mut(r) = p.clone();
    }
}

/// Minibatch robust training with an ε ramp and stepped learning-rate decay.
/// On a non-finite loss the last completed epoch's parameters are restored
/// and the report is marked diverged.
pub fn train(
    net: &mut NetworkGraph,
    train_xs: &Tensor,
    train_ys: &[usize],
    test_xs: &Tensor,
    test_ys: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_ys.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let n = train_ys.len();
    let mut metrics = Vec::new();
    let mut checkpoint = snapshot(net);
    let mut state = OptState::new(net);
    for epoch in 0..cfg.epochs {
        let eps = cfg.eps_at(epoch);
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64 + 1)));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bx = take_rows(train_xs, chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| train_ys[i]).collect();
            let proj = cfg
                .projection
                .map(|r| (r, splitmix64(cfg.seed ^ ((epoch * 1_000_003 + bi) as u64))));
            let step = robust_loss(net, &bx, &by, eps, cfg.norm, proj);
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => {
                    restore(net, &checkpoint);
                    return Ok(TrainReport { metrics, diverged: true });
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                restore(net, &checkpoint);
                return Ok(TrainReport { metrics, diverged: true });
            }
            loss_sum += loss;
            batches += 1.0;
            state.step(net, &grads, &cfg.optimizer, lr);
        }

        if (epoch + 1) % cfg.eval_period == 0 || epoch + 1 == cfg.epochs {
            let eval = cfg.eval_mode(splitmix64(cfg.seed ^ 0xe7a1 ^ epoch as u64));
            let train_rep = robust_error(net, train_xs, train_ys, eps, cfg.norm, &eval)?;
            let test_rep = robust_error(net, test_xs, test_ys, eps, cfg.norm, &eval)?;
            metrics.push(EpochMetrics {
                epoch,
                eps,
                train_loss: loss_sum / batches,
                train_robust_error: train_rep.robust_error,
                test_robust_error: test_rep.robust_error,
                train_standard_error: train_rep.standard_error,
                test_standard_error: test_rep.standard_error,
            });
        }
        checkpoint = snapshot(net);
    }
    Ok(TrainReport { metrics, diverged: false })
}

#[derive(Clone, Debug)]
pub struct CascadeStageStats {
    pub trained_on: usize,
    pub certified: usize,
}

pub struct Cascade {
    pub stages: Vec<NetworkGraph>,
    pub eps: f64,
    pub norm: Norm,
    pub stats: Vec<CascadeStageStats>,
}

/// Train each stage on the examples the previous stages could not certify.
/// Certification for removal always runs exact mode so the working sets are
/// deterministic. Stages with an empty working set are dropped.
pub fn cascade_train(
    stage_nets: Vec<NetworkGraph>,
    xs: &Tensor,
    ys: &[usize],
    cfg: &TrainConfig,
) -> Result<Cascade> {
    if stage_nets.is_empty() {
        return Err(Error::InvalidArgument("cascade needs at least one stage".into()));
    }
    let dim = xs.shape()[1];
    let mut working: Vec<usize> = (0..ys.len()).collect();
    let mut stages = Vec::new();
    let mut stats = Vec::new();
    for (si, mut net) in stage_nets.into_iter().enumerate() {
        if working.is_empty() {
            break;
        }
        let sx = take_rows(xs, &working);
        let sy: Vec<usize> = working.iter().map(|&i| ys[i]).collect();
        let mut stage_cfg = cfg.clone();
        stage_cfg.seed = splitmix64(cfg.seed ^ (si as u64 + 101));
        train(&mut net, &sx, &sy, &sx, &sy, &stage_cfg)?;

        let mut remaining = Vec::new();
        let mut certified = 0;
        for &i in &working {
            let row = Tensor::new(vec![1, dim], xs.data()[i * dim..(i + 1) * dim].to_vec())?;
            let ball = BallSpec::new(cfg.norm, cfg.eps_end, row)?;
            let cert = certify(&net, &ball, i, ys[i], &EvalMode::Exact)?;
            if cert.certified {
                certified += 1;
            } else {
                remaining.push(i);
            }
        }
        stats.push(CascadeStageStats { trained_on: working.len(), certified });
        stages.push(net);
        working = remaining;
    }
    Ok(Cascade { stages, eps: cfg.eps_end, norm: cfg.norm, stats })
}

/// First stage whose prediction certifies answers; None means no certificate.
pub fn cascade_predict(cascade: &Cascade, x: &Tensor) -> Result<Option<usize>> {
    for net in &cascade.stages {
        let ball = BallSpec::new(cascade.norm, cascade.eps, x.clone())?;
        let cert = certify(net, &ball, 0, 0, &EvalMode::Exact)?;
        if cert.certified {
            return Ok(Some(cert.predicted));
        }
    }
    Ok(None)
}

/// Robust and standard error of the full cascade. A missing certificate
/// counts as a robust error; the standard prediction falls through to the
/// last stage's raw output when nothing certifies.
pub fn cascade_errors(cascade: &Cascade, xs: &Tensor, ys: &[usize]) -> Result<(f64, f64)> {
    let dim = xs.shape()[1];
    let mut robust = 0usize;
    let mut wrong = 0usize;
    for (i, &y) in ys.iter().enumerate() {
        let row = Tensor::new(vec![1, dim], xs.data()[i * dim..(i + 1) * dim].to_vec())?;
        match cascade_predict(cascade, &row)? {
            Some(label) => {
                if label != y {
                    robust += 1;
                    wrong += 1;
                }
            }
            None => {
                robust += 1;
                let last = cascade.stages.last().unwrap();
                if last.predict(&row)?[0] != y {
                    wrong += 1;
                }
            }
        }
    }
    Ok((robust as f64 / ys.len() as f64, wrong as f64 / ys.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::mlp;
    use crate::tape::gradcheck;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Two well-separated Gaussian blobs, labels 0/1.
    fn blobs(n: usize, gap: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let cx = if y == 0 { -gap / 2.0 } else { gap / 2.0 };
            data.push(cx + 0.1 * rng.gen_range(-1.0..1.0));
            data.push(0.1 * rng.gen_range(-1.0..1.0));
            ys.push(y);
        }
        (Tensor::new(vec![n, 2], data).unwrap(), ys)
    }

    #[test]
    fn zero_radius_loss_is_cross_entropy() {
        let net = mlp(&[3, 6, 4], 2).unwrap();
        let xs = t(&[2, 3], &[0.3, -0.2, 0.5, -0.1, 0.4, 0.2]);
        let ys = [1usize, 3];
        let (loss, _) = robust_loss(&net, &xs, &ys, 0.0, Norm::Linf, None).unwrap();
        let out = net.forward(&xs).unwrap();
        let mut want = 0.0;
        for (i, &y) in ys.iter().enumerate() {
            let logits = &out.data()[i * 4..(i + 1) * 4];
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            want += lse - logits[y];
        }
        want /= ys.len() as f64;
        assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
    }

    #[test]
    fn loss_grows_with_radius() {
        let net = mlp(&[4, 8, 3], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = t(&[6, 4], &(0..24).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let ys = [0usize, 1, 2, 0, 1, 2];
        let mut prev = f64::NEG_INFINITY;
        for i in 0..5 {
            let (loss, _) = robust_loss(&net, &xs, &ys, i as f64 * 0.04, Norm::Linf, None).unwrap();
            assert!(loss >= prev - 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let net = mlp(&[3, 5, 3], 12).unwrap();
        let xs = t(&[2, 3], &[0.4, -0.3, 0.2, 0.1, 0.5, -0.2]);
        let ys = vec![0usize, 2];
        let points: Vec<Tensor> = net.param_refs().iter().map(|r| net.param(*r).clone()).collect();
        let rel = gradcheck(
            |tape, vars| {
                let staged = StagedNet::from_vars(&net, vars);
                let x = tape.constant(xs.clone());
                robust_loss_on_tape(
                    tape,
                    &net,
                    &staged,
                    x,
                    &ys,
                    0.08,
                    Norm::Linf,
                    (BoundMode::Exact, JEstimator::Exact),
                )
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(rel <= 1e-4, "rel err {rel}");
    }

    #[test]
    fn projected_loss_gradients_match_finite_differences() {
        let net = mlp(&[3, 5, 2], 21).unwrap();
        let xs = t(&[2, 3], &[0.2, -0.4, 0.3, -0.1, 0.2, 0.5]);
        let ys = vec![1usize, 0];
        let points: Vec<Tensor> = net.param_refs().iter().map(|r| net.param(*r).clone()).collect();
        let rel = gradcheck(
            |tape, vars| {
                let staged = StagedNet::from_vars(&net, vars);
                let x = tape.constant(xs.clone());
                robust_loss_on_tape(
                    tape,
                    &net,
                    &staged,
                    x,
                    &ys,
                    0.05,
                    Norm::Linf,
                    (
                        BoundMode::Projected { r: 41, seed: 3 },
                        JEstimator::Median { r: 41, seed: 3 },
                    ),
                )
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(rel <= 1e-3, "rel err {rel}");
    }

    #[test]
    fn separable_blobs_reach_zero_robust_error() {
        let (xs, ys) = blobs(40, 2.0, 3);
        let mut net = mlp(&[2, 8, 2], 7).unwrap();
        let mut cfg = TrainConfig::new(Optimizer::adam_default(), 20, 0.1);
        cfg.batch_size = 10;
        cfg.eps_start = 0.01;
        cfg.eps_warmup_epochs = 5;
        cfg.optimizer = Optimizer::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999 };
        let rep = train(&mut net, &xs, &ys, &xs, &ys, &cfg).unwrap();
        assert!(!rep.diverged);
        assert_eq!(rep.metrics.last().unwrap().test_robust_error, 0.0, "{:?}", rep.metrics.last());
    }

    #[test]
    fn training_is_reproducible() {
        let (xs, ys) = blobs(20, 1.5, 9);
        let mut cfg = TrainConfig::new(Optimizer::adam_default(), 3, 0.05);
        cfg.batch_size = 5;
        cfg.seed = 77;
        let mut a = mlp(&[2, 6, 2], 4).unwrap();
        let mut b = mlp(&[2, 6, 2], 4).unwrap();
        train(&mut a, &xs, &ys, &xs, &ys, &cfg).unwrap();
        train(&mut b, &xs, &ys, &xs, &ys, &cfg).unwrap();
        for r in a.param_refs() {
            assert_eq!(a.param(r).data(), b.param(r).data());
        }
    }

    #[test]
    fn divergence_restores_checkpoint() {
        let (xs, ys) = blobs(16, 1.5, 2);
        let mut net = mlp(&[2, 6, 2], 6).unwrap();
        let mut cfg = TrainConfig::new(Optimizer::Sgd { lr: 1e200, momentum: 0.9 }, 5, 0.05);
        cfg.batch_size = 8;
        let rep = train(&mut net, &xs, &ys, &xs, &ys, &cfg).unwrap();
        assert!(rep.diverged);
        for r in net.param_refs() {
            assert!(net.param(r).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn one_stage_cascade_matches_certify_then_predict() {
        let (xs, ys) = blobs(24, 2.0, 5);
        let mut cfg = TrainConfig::new(Optimizer::adam_default(), 10, 0.08);
        cfg.batch_size = 8;
        let cascade = cascade_train(vec![mlp(&[2, 8, 2], 11).unwrap()], &xs, &ys, &cfg).unwrap();
        assert_eq!(cascade.stages.len(), 1);
        let net = &cascade.stages[0];
        for i in 0..6 {
            let row = t(&[1, 2], &xs.data()[i * 2..(i + 1) * 2]);
            let ball = BallSpec::new(Norm::Linf, cfg.eps_end, row.clone()).unwrap();
            let cert = certify(net, &ball, i, ys[i], &EvalMode::Exact).unwrap();
            let got = cascade_predict(&cascade, &row).unwrap();
            assert_eq!(got, if cert.certified { Some(cert.predicted) } else { None });
        }
    }

    #[test]
    fn fully_certifying_first_stage_ends_the_cascade() {
        let (xs, ys) = blobs(24, 3.0, 8);
        let mut cfg = TrainConfig::new(Optimizer::adam_default(), 15, 0.05);
        cfg.batch_size = 8;
        let nets = vec![mlp(&[2, 8, 2], 1).unwrap(), mlp(&[2, 8, 2], 2).unwrap()];
        let cascade = cascade_train(nets, &xs, &ys, &cfg).unwrap();
        assert_eq!(cascade.stats[0].trained_on, 24);
        if cascade.stats[0].certified == 24 {
            assert_eq!(cascade.stages.len(), 1);
        } else {
            assert_eq!(cascade.stats[1].trained_on, 24 - cascade.stats[0].certified);
        }
    }

    #[test]
    fn eps_and_lr_schedules() {
        let mut cfg = TrainConfig::new(Optimizer::Sgd { lr: 0.1, momentum: 0.0 }, 40, 0.1);
        cfg.eps_start = 0.01;
        cfg.eps_warmup_epochs = 10;
        cfg.lr_decay_period = 10;
        assert!((cfg.eps_at(0) - 0.01).abs() < 1e-12);
        assert!((cfg.eps_at(9) - 0.1).abs() < 1e-12);
        assert!((cfg.eps_at(30) - 0.1).abs() < 1e-12);
        let mid = cfg.eps_at(5);
        assert!(mid > 0.01 && mid < 0.1);
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(19) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(20) - 0.05).abs() < 1e-12);
        assert!((cfg.lr_at(30) - 0.025).abs() < 1e-12);
    }
}
