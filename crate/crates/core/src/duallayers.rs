//! Dual counterparts of the primal layers.
//!
//! Each primal layer gets a backward affine operator on the dual variables
//! plus a scalar objective term h. Affine layers are exact; activations carry
//! a convex relaxation keyed on pre-activation bounds. Everything is built as
//! tape expressions so that training can differentiate through the bounds.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A dual variable: one row per objective, laid out over a layer's features.
/// Rows are shared across the batch until a per-example operator promotes
/// them.
#[derive(Clone, Copy, Debug)]
pub enum Nu {
    Shared { v: Var, rows: usize, n: usize },
    Batched { v: Var, b: usize, rows: usize, n: usize },
}

impl Nu {
    pub fn var(&self) -> Var {
        match *self {
            Nu::Shared { v, .. } | Nu::Batched { v, .. } => v,
        }
    }

    pub fn rows(&self) -> usize {
        match *self {
            Nu::Shared { rows, .. } | Nu::Batched { rows, .. } => rows,
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            Nu::Shared { n, .. } | Nu::Batched { n, .. } => n,
        }
    }

    pub fn batch(&self) -> Option<usize> {
        match *self {
            Nu::Shared { .. } => None,
            Nu::Batched { b, .. } => Some(b),
        }
    }

    pub fn neg(&self, tape: &mut Tape) -> Result<Nu> {
        let v = tape.neg(self.var())?;
        Ok(self.with_var(v))
    }

    pub fn with_var(&self, v: Var) -> Nu {
        match *self {
            Nu::Shared { rows, n, .. } => Nu::Shared { v, rows, n },
            Nu::Batched { b, rows, n, .. } => Nu::Batched { v, b, rows, n },
        }
    }

    /// View with an explicit broadcast-ready rank of 3.
    pub fn rank3(&self, tape: &mut Tape) -> Result<Var> {
        match *self {
            Nu::Shared { v, rows, n } => tape.reshape(v, vec![1, rows, n]),
            Nu::Batched { v, .. } => Ok(v),
        }
    }
}

/// Dual layer: backward operator plus objective term h.
#[derive(Clone, Debug)]
pub enum DualLayer {
    /// ν_in = Wᵀν_out, h = bᵀν_out. Exact.
    Dense { w: Var, b: Var, n_in: usize },
    /// Convolution adjoint; bias expanded over the output grid. Exact.
    Conv {
        w: Var,
        bias_full: Var,
        stride: usize,
        pad: usize,
        in_shape: [usize; 3],
        out_shape: [usize; 3],
    },
    /// Per-feature affine (frozen-stats normalization). Exact.
    DiagAffine { scale: Var, shift: Var },
    /// ReLU relaxation: ν_in = d ⊙ ν_out, h = Σ coef ⊙ [ν_out]₊, with
    /// per-example d, coef of shape [batch, n].
    Relu { d: Var, coef: Var, batch: usize },
    /// Hardtanh relaxation: ν_in = slope ⊙ ν_out,
    /// h = Σ max(p ν, q ν, r ν) per unit.
    Hardtanh { slope: Var, p: Var, q: Var, r: Var, batch: usize },
    /// Sum layer: dual variables pass through unchanged to every producer.
    Fanout,
}

impl DualLayer {
    pub fn is_exact(&self) -> bool {
        matches!(self, DualLayer::Dense { .. } | DualLayer::Conv { .. } | DualLayer::DiagAffine { .. } | DualLayer::Fanout)
    }

    /// Dual variable entering this layer's producer, given the one leaving.
    pub fn backward(&self, tape: &mut Tape, nu: Nu) -> Result<Nu> {
        match self {
            DualLayer::Dense { w, n_in, .. } => match nu {
                Nu::Shared { v, rows, .. } => {
                    let out = tape.matmul(v, *w, false, false)?;
                    Ok(Nu::Shared { v: out, rows, n: *n_in })
                }
                Nu::Batched { v, b, rows, n } => {
                    let flat = tape.reshape(v, vec![b * rows, n])?;
                    let m = tape.matmul(flat, *w, false, false)?;
                    let out = tape.reshape(m, vec![b, rows, *n_in])?;
                    Ok(Nu::Batched { v: out, b, rows, n: *n_in })
                }
            },
            DualLayer::Conv { w, stride, pad, in_shape, out_shape, .. } => {
                let [c, h, wd] = *in_shape;
                let [o, ho, wo] = *out_shape;
                let n_in = c * h * wd;
                let apply = |tape: &mut Tape, v: Var, lead: usize| -> Result<Var> {
                    let img = tape.reshape(v, vec![lead, o, ho, wo])?;
                    let back = tape.conv2d_transpose(img, *w, *stride, *pad, (h, wd))?;
                    tape.reshape(back, vec![lead, n_in])
                };
                match nu {
                    Nu::Shared { v, rows, .. } => {
                        let out = apply(tape, v, rows)?;
                        Ok(Nu::Shared { v: out, rows, n: n_in })
                    }
                    Nu::Batched { v, b, rows, n } => {
                        let flat = tape.reshape(v, vec![b * rows, n])?;
                        let m = apply(tape, flat, b * rows)?;
                        let out = tape.reshape(m, vec![b, rows, n_in])?;
                        Ok(Nu::Batched { v: out, b, rows, n: n_in })
                    }
                }
            }
            DualLayer::DiagAffine { scale, .. } => {
                let out = tape.mul(nu.var(), *scale)?;
                Ok(nu.with_var(out))
            }
            DualLayer::Relu { d, batch, .. } => diag_per_example(tape, nu, *d, *batch),
            DualLayer::Hardtanh { slope, batch, .. } => diag_per_example(tape, nu, *slope, *batch),
            DualLayer::Fanout => Ok(nu),
        }
    }

    /// Objective term per row (and per example once the dual is batched).
    pub fn h(&self, tape: &mut Tape, nu: Nu) -> Result<Var> {
        match self {
            DualLayer::Dense { b, .. } => dot_rows(tape, nu, *b),
            DualLayer::Conv { bias_full, .. } => dot_rows(tape, nu, *bias_full),
            DualLayer::DiagAffine { shift, .. } => dot_rows(tape, nu, *shift),
            DualLayer::Relu { coef, batch, .. } => {
                let v3 = nu.rank3(tape)?;
                let pos = tape.relu(v3)?;
                let c3 = tape.reshape(*coef, vec![*batch, 1, nu.features()])?;
                let prod = tape.mul(pos, c3)?;
                tape.sum_axis(prod, 2)
            }
            DualLayer::Hardtanh { p, q, r, batch, .. } => {
                let v3 = nu.rank3(tape)?;
                let n = nu.features();
                let p3 = tape.reshape(*p, vec![*batch, 1, n])?;
                let q3 = tape.reshape(*q, vec![*batch, 1, n])?;
                let r3 = tape.reshape(*r, vec![*batch, 1, n])?;
                let pv = tape.mul(v3, p3)?;
                let qv = tape.mul(v3, q3)?;
                let rv = tape.mul(v3, r3)?;
                let m = tape.maximum(qv, rv)?;
                let m = tape.maximum(pv, m)?;
                tape.sum_axis(m, 2)
            }
            DualLayer::Fanout => Ok(tape.constant(Tensor::zeros(&[nu.rows()]))),
        }
    }
}

fn diag_per_example(tape: &mut Tape, nu: Nu, diag: Var, batch: usize) -> Result<Nu> {
    let n = nu.features();
    let rows = nu.rows();
    let v3 = nu.rank3(tape)?;
    let d3 = tape.reshape(diag, vec![batch, 1, n])?;
    let out = tape.mul(v3, d3)?;
    Ok(Nu::Batched { v: out, b: batch, rows, n })
}

/// Σ over features of ν ⊙ vec, per row.
fn dot_rows(tape: &mut Tape, nu: Nu, vec: Var) -> Result<Var> {
    let prod = tape.mul(nu.var(), vec)?;
    let axis = match nu {
        Nu::Shared { .. } => 1,
        Nu::Batched { .. } => 2,
    };
    tape.sum_axis(prod, axis)
}

/// Case masks for the ReLU relaxation. Boundary rule: u ≤ 0 is the dead set,
/// then ℓ ≥ 0 the active set, the rest spans zero.
fn relu_masks(l: &Tensor, u: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut mi = Tensor::zeros(l.shape());
    let mut mp = Tensor::zeros(l.shape());
    for i in 0..l.len() {
        let (lo, hi) = (l.data()[i], u.data()[i]);
        if lo > hi {
            return Err(Error::InvalidBounds { lower: lo, upper: hi });
        }
        if hi <= 0.0 {
        } else if lo >= 0.0 {
            mp.data_mut()[i] = 1.0;
        } else {
            mi.data_mut()[i] = 1.0;
        }
    }
    Ok((mi, mp))
}

/// Build the ReLU dual coefficients from pre-activation bounds `l`, `u`
/// (shape [batch, n]): slope d and the nonnegative coefficient of [ν]₊ in h.
pub fn relu_dual_coeffs(tape: &mut Tape, l: Var, u: Var) -> Result<(Var, Var)> {
    let (mi, mp) = relu_masks(tape.value(l), tape.value(u))?;
    let ones_off = Tensor::new(
        mi.shape().to_vec(),
        mi.data().iter().map(|&m| 1.0 - m).collect(),
    )?;
    let off = tape.constant(ones_off);
    let miv = tape.constant(mi);
    let mpv = tape.constant(mp);
    let den = tape.sub(u, l)?;
    let den_safe = tape.add(den, off)?;
    let ratio = tape.div(u, den_safe)?;
    let di = tape.mul(miv, ratio)?;
    let d = tape.add(di, mpv)?;
    let nl = tape.neg(l)?;
    let nl_d = tape.mul(nl, di)?;
    let coef = tape.mul(miv, nl_d)?;
    Ok((d, coef))
}

/// Hardtanh case masks, in checking order. Returns one 0/1 tensor per case.
fn hardtanh_masks(l: &Tensor, u: &Tensor) -> Result<[Tensor; 6]> {
    let mut m: [Tensor; 6] = std::array::from_fn(|_| Tensor::zeros(l.shape()));
    for i in 0..l.len() {
        let (lo, hi) = (l.data()[i], u.data()[i]);
        if lo > hi {
            return Err(Error::InvalidBounds { lower: lo, upper: hi });
        }
        let case = if hi <= -1.0 {
            0 // fully saturated low
        } else if lo >= 1.0 {
            1 // fully saturated high
        } else if lo >= -1.0 && hi <= 1.0 {
            2 // linear region
        } else if lo < -1.0 && hi <= 1.0 {
            3 // spans the lower corner
        } else if lo >= -1.0 {
            4 // spans the upper corner
        } else {
            5 // spans both corners
        };
        m[case].data_mut()[i] = 1.0;
    }
    Ok(m)
}

/// Build hardtanh dual coefficients from bounds: backward slope and the three
/// affine coefficients whose max (times ν) is h.
pub fn hardtanh_dual_coeffs(tape: &mut Tape, l: Var, u: Var) -> Result<(Var, Var, Var, Var)> {
    let masks = hardtanh_masks(tape.value(l), tape.value(u))?;
    let shape = tape.value(l).shape().to_vec();
    let mvars: Vec<Var> = masks.iter().map(|m| tape.constant(m.clone())).collect();

    // safe denominators where the chord slope is not used
    let chordless = Tensor::new(
        shape.clone(),
        (0..masks[0].len())
            .map(|i| masks[0].data()[i] + masks[1].data()[i] + masks[2].data()[i] + masks[5].data()[i])
            .collect(),
    )?;
    let chordless = tape.constant(chordless);
    let den = tape.sub(u, l)?;
    let den = tape.add(den, chordless)?;

    // case 3: chord from (l, -1) to (u, u)
    let u1 = tape.add_const(u, 1.0)?;
    let s3 = tape.div(u1, den)?;
    let s3l = tape.mul(s3, l)?;
    let p3 = tape.add_const(s3l, 1.0)?;
    let p3 = tape.neg(p3)?;
    let q3 = tape.add_const(s3, -1.0)?;

    // case 4: chord from (l, l) to (u, 1)
    let one_m_l = tape.neg(l)?;
    let one_m_l = tape.add_const(one_m_l, 1.0)?;
    let s4 = tape.div(one_m_l, den)?;
    let one_m_s4 = tape.neg(s4)?;
    let one_m_s4 = tape.add_const(one_m_s4, 1.0)?;
    let p4 = tape.mul(l, one_m_s4)?;
    let q4 = one_m_s4;

    // case 5: chord from (l, -1) to (1, 1); candidates at z = 1 (= z = l),
    // z = -1, and z = u
    let two = tape.constant(Tensor::full(&shape, 2.0));
    let den5 = tape.neg(l)?;
    let den5 = tape.add_const(den5, 1.0)?;
    let not5 = Tensor::new(
        shape.clone(),
        masks[5].data().iter().map(|&m| 1.0 - m).collect(),
    )?;
    let not5 = tape.constant(not5);
    let den5 = tape.mul(den5, mvars[5])?;
    let den5 = tape.add(den5, not5)?;
    let s5 = tape.div(two, den5)?;
    let p5 = tape.neg(s5)?;
    let p5 = tape.add_const(p5, 1.0)?;
    let q5 = tape.add_const(s5, -1.0)?;
    let s5u = tape.mul(s5, u)?;
    let r5 = tape.neg(s5u)?;
    let r5 = tape.add_const(r5, 1.0)?;

    let zero = tape.constant(Tensor::zeros(&shape));
    let combine = |tape: &mut Tape, per_case: [Var; 6]| -> Result<Var> {
        let mut acc = zero;
        for (m, v) in mvars.iter().zip(per_case) {
            let term = tape.mul(*m, v)?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    };

    let onec = tape.constant(Tensor::full(&shape, 1.0));
    let negc = tape.constant(Tensor::full(&shape, -1.0));
    let slope = combine(tape, [zero, zero, onec, s3, s4, s5])?;
    let p = combine(tape, [negc, onec, zero, p3, p4, p5])?;
    let q = combine(tape, [negc, onec, zero, q3, q4, q5])?;
    let r = combine(tape, [negc, onec, zero, q3, q4, r5])?;
    Ok((slope, p, q, r))
}
