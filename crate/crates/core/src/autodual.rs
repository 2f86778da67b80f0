//! Builds the dual network and all pre-activation bounds in one pass.
//!
//! Walking the primal graph in order, each activation gets bounds on its
//! input computed from the dual layers built so far, then contributes its own
//! relaxation. Exact mode propagates an identity seed backward per activation
//! (quadratic in width); projected mode pushes random-projection streams
//! forward instead (linear in width). The same machinery evaluates the robust
//! objective for arbitrary output rows.

use std::collections::BTreeMap;

use crate::duallayers::{hardtanh_dual_coeffs, relu_dual_coeffs, DualLayer, Nu};
use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, NetworkGraph, ParamSlot, StagedNet};
use crate::projest::{self, TailPlan};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoundMode {
    Exact,
    Projected { r: usize, seed: u64 },
    /// Projected with per-unit max-geometric upper bounds in place of
    /// medians, so looser bounds hold jointly with probability 1 − δ.
    MaxGeo { plan: TailPlan, seed: u64 },
}

/// How the final objective's norm terms are evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JEstimator {
    Exact,
    Median { r: usize, seed: u64 },
}

pub struct DualNet {
    pub duals: BTreeMap<usize, DualLayer>,
    /// Activation layer id → bounds on its input, each [batch, n].
    pub bounds: BTreeMap<usize, (Var, Var)>,
    /// ReLU layer id → the nonpositive per-unit weight of the objective term.
    pub gammas: BTreeMap<usize, Var>,
    pub eps: f64,
    pub norm: Norm,
    pub mode: BoundMode,
    pub batch: usize,
    pub x: Var,
    inputs: BTreeMap<usize, Vec<usize>>,
    feat: BTreeMap<usize, usize>,
    last: usize,
}

fn layer_seed(build_seed: u64, id: usize) -> u64 {
    projest::splitmix64(build_seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn nu_add(tape: &mut Tape, a: Nu, b: Nu) -> Result<Nu> {
    match (a, b) {
        (Nu::Shared { v: va, rows, n }, Nu::Shared { v: vb, .. }) => {
            let v = tape.add(va, vb)?;
            Ok(Nu::Shared { v, rows, n })
        }
        _ => {
            let bt = a.batch().or(b.batch()).unwrap();
            let a3 = a.rank3(tape)?;
            let b3 = b.rank3(tape)?;
            let v = tape.add(a3, b3)?;
            Ok(Nu::Batched { v, b: bt, rows: a.rows(), n: a.features() })
        }
    }
}

/// x·ν₁ᵀ per row: [batch, rows].
fn center_of(tape: &mut Tape, x: Var, nu1: Nu) -> Result<Var> {
    match nu1 {
        Nu::Shared { v, .. } => tape.matmul(x, v, false, true),
        Nu::Batched { v, b, n, .. } => {
            let x3 = tape.reshape(x, vec![b, 1, n])?;
            let prod = tape.mul(v, x3)?;
            tape.sum_axis(prod, 2)
        }
    }
}

/// Exact dual norm per row: ℓ1 for an ℓ∞ ball, ℓ2 for an ℓ2 ball.
fn dual_norm_exact(tape: &mut Tape, nu1: Nu, norm: Norm) -> Result<Var> {
    let v = nu1.var();
    let axis = if nu1.batch().is_some() { 2 } else { 1 };
    match norm {
        Norm::Linf => {
            let a = tape.abs(v)?;
            tape.sum_axis(a, axis)
        }
        Norm::L2 => {
            let sq = tape.mul(v, v)?;
            let s = tape.sum_axis(sq, axis)?;
            tape.sqrt(s)
        }
    }
}

pub fn build_dual(
    tape: &mut Tape,
    net: &NetworkGraph,
    staged: &StagedNet,
    x: Var,
    eps: f64,
    norm: Norm,
    mode: BoundMode,
) -> Result<DualNet> {
    if eps < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    let shapes = net.validate()?;
    let n1 = net.input_dim();
    let batch = tape.value(x).len() / n1;
    let feat: BTreeMap<usize, usize> = shapes.iter().map(|(&id, s)| (id, s.iter().product())).collect();
    let inputs: BTreeMap<usize, Vec<usize>> =
        net.layers.iter().map(|l| (l.id, l.inputs.clone())).collect();

    let mut dn = DualNet {
        duals: BTreeMap::new(),
        bounds: BTreeMap::new(),
        gammas: BTreeMap::new(),
        eps,
        norm,
        mode: mode.clone(),
        batch,
        x,
        inputs,
        feat,
        last: net.last_id(),
    };

    let proj_params = match &mode {
        BoundMode::Exact => None,
        BoundMode::Projected { r, seed } => Some((*r, *seed)),
        BoundMode::MaxGeo { plan, seed } => Some((plan.m * plan.k, *seed)),
    };
    let mut flows = proj_params.map(|(r_eff, seed)| {
        let rmat = match norm {
            Norm::Linf => projest::sample_cauchy(r_eff, n1, layer_seed(seed, 1)),
            Norm::L2 => projest::sample_normal(r_eff, n1, layer_seed(seed, 1)),
        };
        let rvar = tape.constant(rmat);
        let mut f = Flows::default();
        f.center.insert(1, x);
        f.input_norm.insert(1, rvar);
        f
    });

    for layer in &net.layers {
        let id = layer.id;
        let p = layer.inputs[0];
        match &layer.kind {
            LayerKind::Linear { .. } => {
                dn.duals.insert(
                    id,
                    DualLayer::Dense {
                        w: staged.var(id, ParamSlot::Weight),
                        b: staged.var(id, ParamSlot::Bias),
                        n_in: dn.feat[&p],
                    },
                );
            }
            LayerKind::Conv2d { stride, pad, .. } => {
                let ish = &shapes[&p];
                let osh = &shapes[&id];
                let bias = staged.var(id, ParamSlot::Bias);
                let bias_full = expand_channels(tape, bias, osh[0], osh[1] * osh[2])?;
                dn.duals.insert(
                    id,
                    DualLayer::Conv {
                        w: staged.var(id, ParamSlot::Weight),
                        bias_full,
                        stride: *stride,
                        pad: *pad,
                        in_shape: [ish[0], ish[1], ish[2]],
                        out_shape: [osh[0], osh[1], osh[2]],
                    },
                );
            }
            LayerKind::BatchNormFixed { .. } => {
                let (scale, shift) = staged.batchnorm_affine(tape, net, id)?;
                let sh = &shapes[&id];
                let (scale, shift) = if sh.len() == 3 {
                    (
                        expand_channels(tape, scale, sh[0], sh[1] * sh[2])?,
                        expand_channels(tape, shift, sh[0], sh[1] * sh[2])?,
                    )
                } else {
                    (scale, shift)
                };
                dn.duals.insert(id, DualLayer::DiagAffine { scale, shift });
            }
            LayerKind::Add => {
                dn.duals.insert(id, DualLayer::Fanout);
            }
            LayerKind::Relu | LayerKind::Hardtanh => {
                let (l, u) = match (&mode, &mut flows) {
                    (BoundMode::Exact, _) => dn.node_bounds(tape, p)?,
                    (_, Some(f)) => projected_bounds(tape, &dn, f, p)?,
                    _ => unreachable!(),
                };
                dn.bounds.insert(id, (l, u));
                match &layer.kind {
                    LayerKind::Relu => {
                        let (d, coef) = relu_dual_coeffs(tape, l, u)?;
                        dn.gammas.insert(id, tape.neg(coef)?);
                        dn.duals.insert(id, DualLayer::Relu { d, coef, batch });
                        if let Some(f) = &mut flows {
                            advance_flows_through_diag(tape, f, id, p, d, batch, dn.feat[&p])?;
                            spawn_relu_flows(tape, &dn, f, id, batch)?;
                        }
                    }
                    LayerKind::Hardtanh => {
                        if !matches!(mode, BoundMode::Exact) {
                            return Err(Error::UnsupportedProjection { layer: id, kind: "hardtanh".into() });
                        }
                        let (slope, pp, qq, rr) = hardtanh_dual_coeffs(tape, l, u)?;
                        dn.duals.insert(id, DualLayer::Hardtanh { slope, p: pp, q: qq, r: rr, batch });
                    }
                    _ => unreachable!(),
                }
                continue;
            }
        }
        if let Some(f) = &mut flows {
            advance_flows_affine(tape, net, staged, &shapes, f, layer)?;
        }
    }

    Ok(dn)
}

/// [c] vector expanded to [c·hw] by repeating each channel entry hw times.
fn expand_channels(tape: &mut Tape, v: Var, c: usize, hw: usize) -> Result<Var> {
    if hw == 1 {
        return Ok(v);
    }
    let col = tape.reshape(v, vec![c, 1])?;
    let ones = tape.constant(Tensor::full(&[1, hw], 1.0));
    let m = tape.matmul(col, ones, false, false)?;
    tape.reshape(m, vec![c * hw])
}

#[derive(Default)]
struct Flows {
    center: BTreeMap<usize, Var>,
    input_norm: BTreeMap<usize, Var>,
    /// relu id → (estimator stream values, scale-vector stream values)
    relu: BTreeMap<usize, (BTreeMap<usize, Var>, BTreeMap<usize, Var>)>,
}

/// Push every live stream through an affine (or sum) layer. Only the center
/// stream sees biases.
fn advance_flows_affine(
    tape: &mut Tape,
    net: &NetworkGraph,
    staged: &StagedNet,
    shapes: &BTreeMap<usize, Vec<usize>>,
    flows: &mut Flows,
    layer: &crate::netgraph::LayerSpec,
) -> Result<()> {
    let id = layer.id;
    let each = |tape: &mut Tape, vals: &mut BTreeMap<usize, Var>, with_bias: bool| -> Result<()> {
        let out = match &layer.kind {
            LayerKind::Linear { .. } => {
                let v = match vals.get(&layer.inputs[0]) {
                    Some(v) => *v,
                    None => return Ok(()),
                };
                let w = staged.var(id, ParamSlot::Weight);
                let m = apply_matmul_t(tape, v, w)?;
                if with_bias {
                    let b = staged.var(id, ParamSlot::Bias);
                    tape.add(m, b)?
                } else {
                    m
                }
            }
            LayerKind::Conv2d { stride, pad, .. } => {
                let v = match vals.get(&layer.inputs[0]) {
                    Some(v) => *v,
                    None => return Ok(()),
                };
                let ish = &shapes[&layer.inputs[0]];
                let osh = &shapes[&id];
                let w = staged.var(id, ParamSlot::Weight);
                let b = if with_bias { Some(staged.var(id, ParamSlot::Bias)) } else { None };
                apply_conv(tape, v, w, b, *stride, *pad, ish, osh)?
            }
            LayerKind::BatchNormFixed { .. } => {
                let v = match vals.get(&layer.inputs[0]) {
                    Some(v) => *v,
                    None => return Ok(()),
                };
                let (scale, shift) = staged.batchnorm_affine(tape, net, id)?;
                let sh = &shapes[&id];
                let (scale, shift) = if sh.len() == 3 {
                    (
                        expand_channels(tape, scale, sh[0], sh[1] * sh[2])?,
                        expand_channels(tape, shift, sh[0], sh[1] * sh[2])?,
                    )
                } else {
                    (scale, shift)
                };
                let m = tape.mul(v, scale)?;
                if with_bias {
                    tape.add(m, shift)?
                } else {
                    m
                }
            }
            LayerKind::Add => {
                let mut acc: Option<Var> = None;
                for &j in &layer.inputs {
                    if let Some(&v) = vals.get(&j) {
                        acc = Some(match acc {
                            None => v,
                            Some(a) => tape.add(a, v)?,
                        });
                    }
                }
                match acc {
                    Some(a) => a,
                    None => return Ok(()),
                }
            }
            _ => unreachable!("activations handled separately"),
        };
        vals.insert(id, out);
        Ok(())
    };
    each(tape, &mut flows.center, true)?;
    each(tape, &mut flows.input_norm, false)?;
    let mut relu = std::mem::take(&mut flows.relu);
    for (_, (est, s)) in relu.iter_mut() {
        each(tape, est, false)?;
        each(tape, s, false)?;
    }
    flows.relu = relu;
    Ok(())
}

/// v · Wᵀ for v of rank 2 [rows, n] or rank 3 [b, rows, n].
fn apply_matmul_t(tape: &mut Tape, v: Var, w: Var) -> Result<Var> {
    let vs = tape.value(v).shape().to_vec();
    let n_out = tape.value(w).shape()[0];
    match vs.len() {
        2 => tape.matmul(v, w, false, true),
        3 => {
            let flat = tape.reshape(v, vec![vs[0] * vs[1], vs[2]])?;
            let m = tape.matmul(flat, w, false, true)?;
            tape.reshape(m, vec![vs[0], vs[1], n_out])
        }
        _ => Err(Error::ShapeMismatch { op: "stream", detail: format!("{vs:?}") }),
    }
}

fn apply_conv(
    tape: &mut Tape,
    v: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    ish: &[usize],
    osh: &[usize],
) -> Result<Var> {
    let vs = tape.value(v).shape().to_vec();
    let lead: usize = vs[..vs.len() - 1].iter().product();
    let img = tape.reshape(v, vec![lead, ish[0], ish[1], ish[2]])?;
    let c = tape.conv2d(img, w, b, stride, pad)?;
    let mut out_shape = vs.clone();
    *out_shape.last_mut().unwrap() = osh.iter().product();
    tape.reshape(c, out_shape)
}

/// Per-unit norm estimates from a projection stream: median of |·| over the
/// projection axis (Cauchy), or RMS (normal).
fn stream_estimate(tape: &mut Tape, v: Var, norm: Norm) -> Result<Var> {
    let rank = tape.value(v).shape().len();
    let axis = rank - 2;
    let r = tape.value(v).shape()[axis];
    match norm {
        Norm::Linf => {
            let a = tape.abs(v)?;
            tape.median_axis(a, axis)
        }
        Norm::L2 => {
            let sq = tape.mul(v, v)?;
            let s = tape.sum_axis(sq, axis)?;
            let s = tape.scale(s, 1.0 / r as f64)?;
            tape.sqrt(s)
        }
    }
}

/// Norm estimate over the trailing projection axis of ν·Rᵀ; used when the
/// dual variable is materialized and projected afterward, where the sample
/// axis is last rather than in stream position.
fn estimate_last_axis(tape: &mut Tape, v: Var, norm: Norm) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let axis = shape.len() - 1;
    let r = shape[axis];
    match norm {
        Norm::Linf => {
            let a = tape.abs(v)?;
            tape.median_axis(a, axis)
        }
        Norm::L2 => {
            let sq = tape.mul(v, v)?;
            let s = tape.sum_axis(sq, axis)?;
            let s = tape.scale(s, 1.0 / r as f64)?;
            tape.sqrt(s)
        }
    }
}

/// Max-geometric upper bound per unit, as a constant (test-time only).
fn stream_maxgeo(tape: &mut Tape, v: Var, m: usize, k: usize, eps_tail: f64) -> Result<Var> {
    let t = tape.value(v).clone();
    let sh = t.shape().to_vec();
    let (lead, r, n) = if sh.len() == 3 { (sh[0], sh[1], sh[2]) } else { (1, sh[0], sh[1]) };
    assert_eq!(r, m * k);
    let out_shape: Vec<usize> = if sh.len() == 3 { vec![lead, n] } else { vec![n] };
    let mut out = Tensor::zeros(&out_shape);
    for b in 0..lead {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            for rep in 0..m {
                let samples: Vec<f64> =
                    (0..k).map(|i| t.data()[(b * r + rep * k + i) * n + j]).collect();
                best = best.max(projest::geo_upper(&samples, eps_tail));
            }
            out.data_mut()[b * n + j] = best;
        }
    }
    Ok(tape.constant(out))
}

/// Assemble bounds at node `p` from the live streams.
fn projected_bounds(tape: &mut Tape, dn: &DualNet, flows: &Flows, p: usize) -> Result<(Var, Var)> {
    let center = *flows.center.get(&p).ok_or_else(|| Error::InvalidGraph {
        layer: p,
        msg: "node unreachable from input".into(),
    })?;
    let est_of = |tape: &mut Tape, v: Var, norm: Norm| -> Result<Var> {
        match &dn.mode {
            BoundMode::Projected { .. } => stream_estimate(tape, v, norm),
            BoundMode::MaxGeo { plan, .. } => {
                if norm == Norm::L2 {
                    return Err(Error::InvalidArgument(
                        "high-probability plans cover the l1 dual norm only".into(),
                    ));
                }
                stream_maxgeo(tape, v, plan.m, plan.k, plan.eps_tail)
            }
            BoundMode::Exact => unreachable!(),
        }
    };

    let in_stream = flows.input_norm[&p];
    let est_in = est_of(tape, in_stream, dn.norm)?;
    let scaled = tape.scale(est_in, dn.eps)?;
    let mut l = tape.sub(center, scaled)?;
    let mut u = tape.add(center, scaled)?;

    for (_, (est_vals, s_vals)) in &flows.relu {
        let (ev, sv) = match (est_vals.get(&p), s_vals.get(&p)) {
            (Some(e), Some(s)) => (*e, *s),
            _ => continue,
        };
        let est = est_of(tape, ev, Norm::Linf)?;
        let svshape = tape.value(sv).shape().to_vec();
        let s = tape.reshape(sv, vec![svshape[0], svshape[2]])?;
        // lower bound loses (est + s)/2, upper bound gains (est − s)/2
        let sum = tape.add(est, s)?;
        let half_sum = tape.scale(sum, 0.5)?;
        l = tape.sub(l, half_sum)?;
        let diff = tape.sub(est, s)?;
        let half_diff = tape.scale(diff, 0.5)?;
        u = tape.add(u, half_diff)?;
    }
    Ok((l, u))
}

/// Multiply every live stream by the new activation slope d ([batch, n]).
fn advance_flows_through_diag(
    tape: &mut Tape,
    flows: &mut Flows,
    id: usize,
    p: usize,
    d: Var,
    batch: usize,
    n: usize,
) -> Result<()> {
    let d3 = tape.reshape(d, vec![batch, 1, n])?;
    if let Some(&c) = flows.center.get(&p) {
        let out = tape.mul(c, d)?;
        flows.center.insert(id, out);
    }
    if let Some(&v) = flows.input_norm.get(&p) {
        let out = tape.mul(v, d3)?;
        flows.input_norm.insert(id, out);
    }
    let mut relu = std::mem::take(&mut flows.relu);
    for (_, (est, s)) in relu.iter_mut() {
        if let Some(&v) = est.get(&p) {
            let out = tape.mul(v, d3)?;
            est.insert(id, out);
        }
        if let Some(&v) = s.get(&p) {
            let out = tape.mul(v, d3)?;
            s.insert(id, out);
        }
    }
    flows.relu = relu;
    Ok(())
}

/// Seed the new ReLU's own estimator streams at its output.
fn spawn_relu_flows(tape: &mut Tape, dn: &DualNet, flows: &mut Flows, id: usize, batch: usize) -> Result<()> {
    let gamma = dn.gammas[&id];
    let n = tape.value(gamma).shape()[1];
    let (r_eff, seed) = match &dn.mode {
        BoundMode::Projected { r, seed } => (*r, *seed),
        BoundMode::MaxGeo { plan, seed } => (plan.m * plan.k, *seed),
        BoundMode::Exact => unreachable!(),
    };
    let rmat = projest::sample_cauchy(r_eff, n, layer_seed(seed, id));
    let rvar = tape.constant(rmat);
    let g3 = tape.reshape(gamma, vec![batch, 1, n])?;
    let est_seed = tape.mul(rvar, g3)?;
    let mut est = BTreeMap::new();
    est.insert(id, est_seed);
    let mut s = BTreeMap::new();
    s.insert(id, g3);
    flows.relu.insert(id, (est, s));
    Ok(())
}

impl DualNet {
    /// Propagate a seed at `node` back to the input, collecting the dual
    /// variable leaving every traversed layer.
    fn backprop(&self, tape: &mut Tape, node: usize, seed: Nu) -> Result<(Nu, Vec<(usize, Nu)>)> {
        let mut acc: BTreeMap<usize, Nu> = BTreeMap::new();
        acc.insert(node, seed);
        let mut collected = Vec::new();
        for id in (2..=node).rev() {
            if let Some(nu) = acc.remove(&id) {
                collected.push((id, nu));
                let dual = &self.duals[&id];
                let back = dual.backward(tape, nu)?;
                for &j in &self.inputs[&id] {
                    let merged = match acc.remove(&j) {
                        Some(existing) => nu_add(tape, existing, back)?,
                        None => back,
                    };
                    acc.insert(j, merged);
                }
            }
        }
        let nu1 = acc.remove(&1).ok_or_else(|| Error::InvalidGraph {
            layer: node,
            msg: "node unreachable from input".into(),
        })?;
        Ok((nu1, collected))
    }

    /// Exact interval for a node's output under all admissible perturbations.
    pub fn node_bounds(&self, tape: &mut Tape, node: usize) -> Result<(Var, Var)> {
        let n = self.feat[&node];
        if node == 1 {
            let l = tape.add_const(self.x, -self.eps)?;
            let u = tape.add_const(self.x, self.eps)?;
            return Ok((l, u));
        }
        let eye = tape.constant(Tensor::eye(n));
        let seed = Nu::Shared { v: eye, rows: n, n };
        let (nu1, collected) = self.backprop(tape, node, seed)?;
        let center = center_of(tape, self.x, nu1)?;
        let norm_t = dual_norm_exact(tape, nu1, self.norm)?;
        let scaled = tape.scale(norm_t, self.eps)?;
        let mut l = tape.sub(center, scaled)?;
        let mut u = tape.add(center, scaled)?;
        for (id, nu) in collected {
            let dual = &self.duals[&id];
            let h_plus = dual.h(tape, nu)?;
            let neg = nu.neg(tape)?;
            let h_minus = dual.h(tape, neg)?;
            l = tape.sub(l, h_minus)?;
            u = tape.add(u, h_plus)?;
        }
        Ok((l, u))
    }

    /// Lower bound on cᵀz_k per row of `c`, for every example: the robust
    /// objective. Shapes: c is [rows, output_dim]; result is [batch, rows].
    pub fn objective_rows(&self, tape: &mut Tape, c: &Tensor, est: JEstimator) -> Result<Var> {
        let ny = self.feat[&self.last];
        if c.shape().len() != 2 || c.shape()[1] != ny {
            return Err(Error::ShapeMismatch {
                op: "objective_rows",
                detail: format!("c {:?} vs output dim {}", c.shape(), ny),
            });
        }
        let rows = c.shape()[0];
        let cv = tape.constant(c.clone());
        let seed = Nu::Shared { v: cv, rows, n: ny };
        self.objective_from_seed(tape, seed, est)
    }

    /// Same objective with a per-example stack of target rows; `c` is
    /// [batch, rows, output_dim], the result [batch, rows].
    pub fn objective_batched(&self, tape: &mut Tape, c: &Tensor, est: JEstimator) -> Result<Var> {
        let ny = self.feat[&self.last];
        if c.shape().len() != 3 || c.shape()[0] != self.batch || c.shape()[2] != ny {
            return Err(Error::ShapeMismatch {
                op: "objective_batched",
                detail: format!("c {:?} vs batch {} output dim {}", c.shape(), self.batch, ny),
            });
        }
        let rows = c.shape()[1];
        let cv = tape.constant(c.clone());
        let seed = Nu::Batched { v: cv, b: self.batch, rows, n: ny };
        self.objective_from_seed(tape, seed, est)
    }

    fn objective_from_seed(&self, tape: &mut Tape, seed: Nu, est: JEstimator) -> Result<Var> {
        let (nu1, collected) = self.backprop(tape, self.last, seed)?;
        let center = center_of(tape, self.x, nu1)?;
        let norm_t = match est {
            JEstimator::Exact => dual_norm_exact(tape, nu1, self.norm)?,
            JEstimator::Median { r, seed } => {
                let rmat = match self.norm {
                    Norm::Linf => projest::sample_cauchy(r, nu1.features(), layer_seed(seed, 1)),
                    Norm::L2 => projest::sample_normal(r, nu1.features(), layer_seed(seed, 1)),
                };
                let rvar = tape.constant(rmat);
                let proj = apply_matmul_t(tape, nu1.var(), rvar)?;
                estimate_last_axis(tape, proj, self.norm)?
            }
        };
        let scaled = tape.scale(norm_t, self.eps)?;
        let mut j = tape.sub(center, scaled)?;
        for (id, nu) in collected {
            let dual = &self.duals[&id];
            match (est, dual) {
                (JEstimator::Median { r, seed }, DualLayer::Relu { .. }) => {
                    // estimate the term from the materialized dual variable
                    let gamma = self.gammas[&id];
                    let n = nu.features();
                    let g3 = tape.reshape(gamma, vec![self.batch, 1, n])?;
                    let nu3 = nu.rank3(tape)?;
                    let scaled_nu = tape.mul(nu3, g3)?;
                    let rmat = tape.constant(projest::sample_cauchy(r, n, layer_seed(seed, id)));
                    let proj = apply_matmul_t(tape, scaled_nu, rmat)?;
                    let estv = estimate_last_axis(tape, proj, Norm::Linf)?;
                    let s = tape.sum_axis(scaled_nu, 2)?;
                    let sum = tape.add(estv, s)?;
                    let half = tape.scale(sum, 0.5)?;
                    j = tape.sub(j, half)?;
                }
                _ => {
                    let neg = nu.neg(tape)?;
                    let h_minus = dual.h(tape, neg)?;
                    j = tape.sub(j, h_minus)?;
                }
            }
        }
        Ok(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{mlp, LayerSpec};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn single_linear(w: Tensor, b: Tensor) -> NetworkGraph {
        let out = w.shape()[0];
        let inp = w.shape()[1];
        NetworkGraph::new(
            vec![
                LayerSpec { id: 2, kind: LayerKind::Linear { w, b }, inputs: vec![1] },
                LayerSpec { id: 3, kind: LayerKind::Relu, inputs: vec![2] },
            ],
            vec![inp],
            out,
        )
        .unwrap()
    }

    #[test]
    fn input_ball_bounds() {
        let net = single_linear(Tensor::eye(2), Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let x = tape.constant(t(&[1, 2], &[0.3, -0.2]));
        let dn = build_dual(&mut tape, &net, &staged, x, 0.1, Norm::Linf, BoundMode::Exact).unwrap();
        let (l, u) = dn.node_bounds(&mut tape, 1).unwrap();
        for (got, want) in tape.value(l).data().iter().zip([0.2, -0.3]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.value(u).data().iter().zip([0.4, -0.1]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_row_bounds_both_norms() {
        let net = single_linear(t(&[1, 2], &[1.0, 1.0]), Tensor::zeros(&[1]));
        let x = t(&[1, 2], &[0.0, 0.0]);
        for (norm, expect) in [(Norm::Linf, 2.0), (Norm::L2, 2f64.sqrt())] {
            let mut tape = Tape::new();
            let staged = net.stage(&mut tape, false);
            let xv = tape.constant(x.clone());
            let dn = build_dual(&mut tape, &net, &staged, xv, 1.0, norm, BoundMode::Exact).unwrap();
            let (l, u) = &dn.bounds[&3];
            assert!((tape.value(*l).data()[0] + expect).abs() < 1e-12);
            assert!((tape.value(*u).data()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn eps_zero_collapses_to_forward() {
        let net = mlp(&[3, 5, 4, 2], 21).unwrap();
        let x = t(&[2, 3], &[0.3, -0.7, 0.2, 0.9, 0.1, -0.4]);
        let outs = net.forward_all(&x).unwrap();
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let dn = build_dual(&mut tape, &net, &staged, xv, 0.0, Norm::Linf, BoundMode::Exact).unwrap();
        for (&aid, (l, u)) in &dn.bounds {
            let pre = &outs[&(aid - 1)];
            let lv = tape.value(*l);
            let uv = tape.value(*u);
            for i in 0..pre.len() {
                assert!((lv.data()[i] - pre.data()[i]).abs() < 1e-9);
                assert!((uv.data()[i] - pre.data()[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn objective_on_linear_net_is_closed_form() {
        let w = t(&[2, 3], &[0.5, -1.0, 2.0, 1.0, 0.3, -0.2]);
        let b = t(&[2], &[0.1, -0.6]);
        let net = NetworkGraph::new(
            vec![LayerSpec { id: 2, kind: LayerKind::Linear { w: w.clone(), b: b.clone() }, inputs: vec![1] }],
            vec![3],
            2,
        )
        .unwrap();
        let x = t(&[1, 3], &[0.2, 0.4, -0.3]);
        let eps = 0.15;
        let c = t(&[1, 2], &[1.0, -1.0]);
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let dn = build_dual(&mut tape, &net, &staged, xv, eps, Norm::Linf, BoundMode::Exact).unwrap();
        let j = dn.objective_rows(&mut tape, &c, JEstimator::Exact).unwrap();
        // closed form: c'(Wx+b) - eps*||W'c||_1
        let fx = net.forward(&x).unwrap();
        let cfx: f64 = c.data().iter().zip(fx.data()).map(|(a, b)| a * b).sum();
        let wtc: Vec<f64> = (0..3).map(|i| w.data()[i] - w.data()[3 + i]).collect();
        let expect = cfx - eps * wtc.iter().map(|v| v.abs()).sum::<f64>();
        assert!((tape.value(j).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn residual_dual_accumulates_skip() {
        // x -> Linear(W) -> Add(x, .) ; nu1 = W'c + c
        let w = t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]);
        let net = NetworkGraph::new(
            vec![
                LayerSpec { id: 2, kind: LayerKind::Linear { w: w.clone(), b: Tensor::zeros(&[2]) }, inputs: vec![1] },
                LayerSpec { id: 3, kind: LayerKind::Add, inputs: vec![1, 2] },
            ],
            vec![2],
            2,
        )
        .unwrap();
        let x = t(&[1, 2], &[0.0, 0.0]);
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let xv = tape.constant(x);
        let dn = build_dual(&mut tape, &net, &staged, xv, 1.0, Norm::Linf, BoundMode::Exact).unwrap();
        let c = t(&[1, 2], &[1.0, 0.0]);
        let j = dn.objective_rows(&mut tape, &c, JEstimator::Exact).unwrap();
        // nu1 row = (W' + I)c = [3, 0]; J = -eps*3
        assert!((tape.value(j).data()[0] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn containment_of_random_perturbations() {
        use rand::{Rng, SeedableRng};
        let net = mlp(&[4, 6, 5, 3], 5).unwrap();
        let x = t(&[1, 4], &[0.1, -0.2, 0.4, 0.0]);
        let eps = 0.2;
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let dn = build_dual(&mut tape, &net, &staged, xv, eps, Norm::Linf, BoundMode::Exact).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let xp = Tensor::new(
                vec![1, 4],
                x.data().iter().map(|&v| v + rng.gen_range(-eps..eps)).collect(),
            )
            .unwrap();
            let outs = net.forward_all(&xp).unwrap();
            for (&aid, (l, u)) in &dn.bounds {
                let pre = &outs[&(aid - 1)];
                let lv = tape.value(*l);
                let uv = tape.value(*u);
                for i in 0..pre.len() {
                    assert!(
                        pre.data()[i] >= lv.data()[i] - 1e-9 && pre.data()[i] <= uv.data()[i] + 1e-9,
                        "activation {aid} unit {i} escapes"
                    );
                }
            }
        }
    }

    #[test]
    fn bound_nesting_in_eps() {
        let net = mlp(&[3, 6, 4, 2], 9).unwrap();
        let x = t(&[1, 3], &[0.2, -0.1, 0.5]);
        let get = |eps: f64| {
            let mut tape = Tape::new();
            let staged = net.stage(&mut tape, false);
            let xv = tape.constant(x.clone());
            let dn = build_dual(&mut tape, &net, &staged, xv, eps, Norm::Linf, BoundMode::Exact).unwrap();
            dn.bounds
                .iter()
                .map(|(&id, (l, u))| (id, tape.value(*l).clone(), tape.value(*u).clone()))
                .collect::<Vec<_>>()
        };
        let small = get(0.05);
        let big = get(0.1);
        for ((_, ls, us), (_, lb, ub)) in small.iter().zip(&big) {
            for i in 0..ls.len() {
                assert!(lb.data()[i] <= ls.data()[i] + 1e-12);
                assert!(ub.data()[i] >= us.data()[i] - 1e-12);
            }
        }
    }

    #[test]
    fn projected_bounds_track_exact() {
        let net = mlp(&[6, 10, 8, 3], 17).unwrap();
        let x = t(&[1, 6], &[0.1, -0.3, 0.2, 0.5, -0.1, 0.0]);
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let dn = build_dual(&mut tape, &net, &staged, xv, 0.05, Norm::Linf, BoundMode::Exact).unwrap();
        let mut tape2 = Tape::new();
        let staged2 = net.stage(&mut tape2, false);
        let xv2 = tape2.constant(x.clone());
        let dp = build_dual(
            &mut tape2,
            &net,
            &staged2,
            xv2,
            0.05,
            Norm::Linf,
            BoundMode::Projected { r: 501, seed: 7 },
        )
        .unwrap();
        for (&aid, (l, u)) in &dn.bounds {
            let (lp, up) = &dp.bounds[&aid];
            let (le, ue) = (tape.value(*l), tape.value(*u));
            let (lpv, upv) = (tape2.value(*lp), tape2.value(*up));
            for i in 0..le.len() {
                let span = (ue.data()[i] - le.data()[i]).max(0.1);
                assert!(
                    (lpv.data()[i] - le.data()[i]).abs() < 0.35 * span,
                    "layer {aid} unit {i}: proj {} vs exact {}",
                    lpv.data()[i],
                    le.data()[i]
                );
                assert!((upv.data()[i] - ue.data()[i]).abs() < 0.35 * span);
            }
        }
    }
}
