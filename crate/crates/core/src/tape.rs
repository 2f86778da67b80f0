//! Reverse-mode differentiation over a flat tape of tensor primitives.
//!
//! Every primitive needed by the dual-network objective is recorded here,
//! including median selection (gradients route only to the selected entry per
//! row, which is what keeps projected training memory-light). Tapes are
//! single-owner and support exactly one backward pass.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, for_each_broadcast, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnKind {
    Neg,
    Abs,
    Relu,
    Hardtanh,
    Exp,
    Ln,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize },
    Bin { a: Var, b: Var, kind: BinKind },
    Unary { a: Var, kind: UnKind },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    MaxAxis { a: Var, axis: usize },
    MedianAxis { a: Var, axis: usize },
    Reshape { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, keyed by `Var`.
#[derive(Debug)]
pub struct Grads {
    by_var: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push_unchecked(&mut self, t: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, t: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(t, op, requires_grad))
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = matmul_kernel(av, bv, ta, tb)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Matmul { a, b, ta, tb }, rg, "matmul")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_kernel(self.value(x), self.value(w), b.map(|bb| self.value(bb)), stride, pad)?;
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || b.map(|bb| self.requires_grad(bb)).unwrap_or(false);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg, "conv2d")
    }

    /// Transposed convolution: the adjoint of `conv2d` with the same weight,
    /// mapping the conv output grid back to an input grid of `out_hw`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_hw: (usize, usize)) -> Result<Var> {
        let out = conv2d_input_grad(self.value(x), self.value(w), stride, pad, out_hw)?;
        let rg = self.requires_grad(x) || self.requires_grad(w);
        self.push(out, Op::ConvT2d { x, w, stride, pad }, rg, "conv2d_transpose")
    }

    fn bin(&mut self, a: Var, b: Var, kind: BinKind, name: &'static str) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let shape = broadcast_shapes(av.shape(), bv.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
        })?;
        let mut out = Tensor::zeros(&shape);
        {
            let (ad, bd) = (av.data(), bv.data());
            let od = out.data_mut();
            for_each_broadcast(&shape, av.shape(), bv.shape(), |lin, oa, ob| {
                let (x, y) = (ad[oa], bd[ob]);
                od[lin] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                    BinKind::Max => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                };
            });
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Bin { a, b, kind }, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, BinKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, BinKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, BinKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, BinKind::Div, "div")
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, BinKind::Max, "maximum")
    }

    fn unary(&mut self, a: Var, kind: UnKind, name: &'static str) -> Result<Var> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| match kind {
                UnKind::Neg => -x,
                UnKind::Abs => x.abs(),
                UnKind::Relu => x.max(0.0),
                UnKind::Hardtanh => x.clamp(-1.0, 1.0),
                UnKind::Exp => x.exp(),
                UnKind::Ln => x.ln(),
                UnKind::Sqrt => x.sqrt(),
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(out, Op::Unary { a, kind }, rg, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Neg, "neg")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Abs, "abs")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Relu, "relu")
    }

    /// Positive part; identical to `relu`, kept as a named alias for objective code.
    pub fn max_with_zero(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Relu, "max_with_zero")
    }

    pub fn hardtanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Hardtanh, "hardtanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Exp, "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Ln, "ln")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Sqrt, "sqrt")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect())?;
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale { a, c }, rg, "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x + c).collect())?;
        let rg = self.requires_grad(a);
        self.push(out, Op::AddConst { a }, rg, "add_const")
    }

    /// Diagonal affine map: `scale ⊙ a + shift` with broadcasting.
    pub fn affine_diag(&mut self, a: Var, scale: Var, shift: Var) -> Result<Var> {
        let m = self.mul(a, scale)?;
        self.add(m, shift)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner, out_shape) = axis_view(av.shape(), axis, "sum_axis")?;
        let mut out = Tensor::zeros(&out_shape);
        {
            let ad = av.data();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..len {
                    let base = (o * len + i) * inner;
                    let obase = o * inner;
                    for k in 0..inner {
                        od[obase + k] += ad[base + k];
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push(out, Op::SumAxis { a, axis }, rg, "sum_axis")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Maximum along `axis`; gradient routes to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner, out_shape) = axis_view(av.shape(), axis, "max_axis")?;
        if len == 0 {
            return Err(Error::ShapeMismatch { op: "max_axis", detail: "empty axis".into() });
        }
        let mut out = Tensor::zeros(&out_shape);
        {
            let ad = av.data();
            let od = out.data_mut();
            for o in 0..outer {
                for k in 0..inner {
                    let mut best = f64::NEG_INFINITY;
                    for i in 0..len {
                        let v = ad[(o * len + i) * inner + k];
                        if v > best {
                            best = v;
                        }
                    }
                    od[o * inner + k] = best;
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push(out, Op::MaxAxis { a, axis }, rg, "max_axis")
    }

    /// Sample median along `axis`. Even lengths take the lower of the two
    /// middle order statistics so the gradient routes to exactly one entry.
    pub fn median_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner, out_shape) = axis_view(av.shape(), axis, "median_axis")?;
        if len == 0 {
            return Err(Error::ShapeMismatch { op: "median_axis", detail: "empty axis".into() });
        }
        let mut out = Tensor::zeros(&out_shape);
        {
            let ad = av.data();
            let od = out.data_mut();
            for o in 0..outer {
                for k in 0..inner {
                    let (_, v) = median_select(ad, o, k, len, inner);
                    od[o * inner + k] = v;
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push(out, Op::MedianAxis { a, axis }, rg, "median_axis")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        self.push(out, Op::Reshape { a }, rg, "reshape")
    }

    // ---- backward --------------------------------------------------------

    /// One reverse pass from `root` with `seed` as the incoming gradient.
    pub fn backward(&mut self, root: Var, seed: Tensor) -> Result<Grads> {
        if self.consumed {
            return Err(Error::TapeReplay);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if seed.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("seed {:?} vs root {:?}", seed.shape(), self.value(root).shape()),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Matmul { a, b, ta, tb } => {
                    // C = A' B'  with A' = A^ta, B' = B^tb
                    if self.requires_grad(a) {
                        // dA' = G B'^T ; map back through ta
                        let ga = if ta {
                            matmul_kernel(self.value(b), &g, tb, true)?
                        } else {
                            matmul_kernel(&g, self.value(b), false, !tb)?
                        };
                        accumulate(&mut grads, a.0, ga);
                    }
                    if self.requires_grad(b) {
                        let gb = if tb {
                            matmul_kernel(&g, self.value(a), true, ta)?
                        } else {
                            matmul_kernel(self.value(a), &g, !ta, false)?
                        };
                        accumulate(&mut grads, b.0, gb);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    if self.requires_grad(x) {
                        let xs = self.value(x).shape();
                        let hw = (xs[2], xs[3]);
                        let gx = conv2d_input_grad(&g, self.value(w), stride, pad, hw)?;
                        accumulate(&mut grads, x.0, gx);
                    }
                    if self.requires_grad(w) {
                        let gw = conv2d_weight_grad(self.value(x), &g, self.value(w).shape(), stride, pad)?;
                        accumulate(&mut grads, w.0, gw);
                    }
                    if let Some(bb) = b {
                        if self.requires_grad(bb) {
                            let gb = conv2d_bias_grad(&g);
                            accumulate(&mut grads, bb.0, gb);
                        }
                    }
                }
                Op::ConvT2d { x, w, stride, pad } => {
                    if self.requires_grad(x) {
                        let gx = conv2d_kernel(&g, self.value(w), None, stride, pad)?;
                        accumulate(&mut grads, x.0, gx);
                    }
                    if self.requires_grad(w) {
                        let gw = conv2d_weight_grad(&g, self.value(x), self.value(w).shape(), stride, pad)?;
                        accumulate(&mut grads, w.0, gw);
                    }
                }
                Op::Bin { a, b, kind } => {
                    let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                    let out_shape = broadcast_shapes(&ash, &bsh).unwrap();
                    let mut ga = Tensor::zeros(&ash);
                    let mut gb = Tensor::zeros(&bsh);
                    {
                        let ad = self.value(a).data();
                        let bd = self.value(b).data();
                        let gd = g.data();
                        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                        for_each_broadcast(&out_shape, &ash, &bsh, |lin, oa, ob| {
                            let gv = gd[lin];
                            match kind {
                                BinKind::Add => {
                                    gad[oa] += gv;
                                    gbd[ob] += gv;
                                }
                                BinKind::Sub => {
                                    gad[oa] += gv;
                                    gbd[ob] -= gv;
                                }
                                BinKind::Mul => {
                                    gad[oa] += gv * bd[ob];
                                    gbd[ob] += gv * ad[oa];
                                }
                                BinKind::Div => {
                                    gad[oa] += gv / bd[ob];
                                    gbd[ob] -= gv * ad[oa] / (bd[ob] * bd[ob]);
                                }
                                BinKind::Max => {
                                    if ad[oa] >= bd[ob] {
                                        gad[oa] += gv;
                                    } else {
                                        gbd[ob] += gv;
                                    }
                                }
                            }
                        });
                    }
                    if self.requires_grad(a) {
                        accumulate(&mut grads, a.0, ga);
                    }
                    if self.requires_grad(b) {
                        accumulate(&mut grads, b.0, gb);
                    }
                }
                Op::Unary { a, kind } => {
                    let av = self.value(a);
                    let data: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| match kind {
                            UnKind::Neg => -gv,
                            // subgradient at 0 is 0
                            UnKind::Abs => gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 },
                            UnKind::Relu => gv * if x > 0.0 { 1.0 } else { 0.0 },
                            // subgradient at +-1 taken from the interior side
                            UnKind::Hardtanh => gv * if x.abs() <= 1.0 { 1.0 } else { 0.0 },
                            UnKind::Exp => gv * x.exp(),
                            UnKind::Ln => gv / x,
                            UnKind::Sqrt => gv * 0.5 / x.sqrt(),
                        })
                        .collect();
                    accumulate(&mut grads, a.0, Tensor::new(av.shape().to_vec(), data)?);
                }
                Op::Scale { a, c } => {
                    let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&v| v * c).collect())?;
                    accumulate(&mut grads, a.0, ga);
                }
                Op::AddConst { a } => {
                    accumulate(&mut grads, a.0, g.clone());
                }
                Op::SumAxis { a, axis } => {
                    let ash = self.value(a).shape().to_vec();
                    let (outer, len, inner, _) = axis_view(&ash, axis, "sum_axis")?;
                    let mut ga = Tensor::zeros(&ash);
                    {
                        let gd = g.data();
                        let gad = ga.data_mut();
                        for o in 0..outer {
                            for i in 0..len {
                                let base = (o * len + i) * inner;
                                for k in 0..inner {
                                    gad[base + k] = gd[o * inner + k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::SumAll { a } => {
                    let ash = self.value(a).shape().to_vec();
                    let ga = Tensor::full(&ash, g.item());
                    accumulate(&mut grads, a.0, ga);
                }
                Op::MaxAxis { a, axis } => {
                    let av = self.value(a);
                    let (outer, len, inner, _) = axis_view(av.shape(), axis, "max_axis")?;
                    let mut ga = Tensor::zeros(av.shape());
                    {
                        let ad = av.data();
                        let gd = g.data();
                        let gad = ga.data_mut();
                        for o in 0..outer {
                            for k in 0..inner {
                                let mut best = f64::NEG_INFINITY;
                                let mut bi = 0;
                                for i in 0..len {
                                    let v = ad[(o * len + i) * inner + k];
                                    if v > best {
                                        best = v;
                                        bi = i;
                                    }
                                }
                                gad[(o * len + bi) * inner + k] = gd[o * inner + k];
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::MedianAxis { a, axis } => {
                    let av = self.value(a);
                    let (outer, len, inner, _) = axis_view(av.shape(), axis, "median_axis")?;
                    let mut ga = Tensor::zeros(av.shape());
                    {
                        let ad = av.data();
                        let gd = g.data();
                        let gad = ga.data_mut();
                        for o in 0..outer {
                            for k in 0..inner {
                                let (sel, _) = median_select(ad, o, k, len, inner);
                                gad[(o * len + sel) * inner + k] = gd[o * inner + k];
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Reshape { a } => {
                    let ash = self.value(a).shape().to_vec();
                    let ga = g.reshaped(ash)?;
                    accumulate(&mut grads, a.0, ga);
                }
            }
        }

        // keep only leaf gradients plus whatever remains unconsumed
        Ok(Grads { by_var: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

/// View `shape` as (outer, axis length, inner) around `axis`.
fn axis_view(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch { op, detail: format!("axis {} of {:?}", axis, shape) });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Ok((outer, len, inner, out_shape))
}

/// Index and value of the (lower-middle) median of one fiber.
fn median_select(data: &[f64], outer: usize, inner_idx: usize, len: usize, inner: usize) -> (usize, f64) {
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        let va = data[(outer * len + a) * inner + inner_idx];
        let vb = data[(outer * len + b) * inner + inner_idx];
        va.partial_cmp(&vb).unwrap().then(a.cmp(&b))
    });
    let sel = order[(len - 1) / 2];
    (sel, data[(outer * len + sel) * inner + inner_idx])
}

// ---- kernels -------------------------------------------------------------

pub(crate) fn matmul_kernel(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (a2, b2);
    let a = if ta {
        a2 = a.transposed2d()?;
        &a2
    } else {
        if a.shape().len() != 2 {
            return Err(Error::ShapeMismatch { op: "matmul", detail: format!("lhs rank {:?}", a.shape()) });
        }
        a
    };
    let b = if tb {
        b2 = b.transposed2d()?;
        &b2
    } else {
        if b.shape().len() != 2 {
            return Err(Error::ShapeMismatch { op: "matmul", detail: format!("rhs rank {:?}", b.shape()) });
        }
        b
    };
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

fn conv_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
        });
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

pub(crate) fn conv2d_kernel(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {:?} weight {:?}", xs, ws),
        });
    }
    let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (ho, wo) = conv_dims(h, wd, kh, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[bsz, o, ho, wo]);
    let xd = x.data();
    let wdt = w.data();
    let od = out.data_mut();
    for b in 0..bsz {
        for oc in 0..o {
            let b0 = bias.map(|t| t.data()[oc]).unwrap_or(0.0);
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b0;
                    for cc in 0..c {
                        for p in 0..kh {
                            let y = (i * stride + p) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for q in 0..kw {
                                let xx = (j * stride + q) as isize - pad as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                acc += wdt[((oc * c + cc) * kh + p) * kw + q]
                                    * xd[((b * c + cc) * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                    od[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of conv2d with respect to its input (equals transposed convolution).
pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, stride: usize, pad: usize, out_hw: (usize, usize)) -> Result<Tensor> {
    let gs = g.shape();
    let ws = w.shape();
    if gs.len() != 4 || ws.len() != 4 || gs[1] != ws[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose",
            detail: format!("input {:?} weight {:?}", gs, ws),
        });
    }
    let (bsz, o, ho, wo) = (gs[0], gs[1], gs[2], gs[3]);
    let (_, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, wd) = out_hw;
    let (eho, ewo) = conv_dims(h, wd, kh, kw, stride, pad)?;
    if (eho, ewo) != (ho, wo) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose",
            detail: format!("grid {}x{} inconsistent with target {}x{}", ho, wo, h, wd),
        });
    }
    let mut out = Tensor::zeros(&[bsz, c, h, wd]);
    let gd = g.data();
    let wdt = w.data();
    let od = out.data_mut();
    for b in 0..bsz {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let gv = gd[((b * o + oc) * ho + i) * wo + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for cc in 0..c {
                        for p in 0..kh {
                            let y = (i * stride + p) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for q in 0..kw {
                                let xx = (j * stride + q) as isize - pad as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                od[((b * c + cc) * h + y as usize) * wd + xx as usize] +=
                                    gv * wdt[((oc * c + cc) * kh + p) * kw + q];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_weight_grad(x: &Tensor, g: &Tensor, wshape: &[usize], stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let gs = g.shape();
    let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (wshape[0], wshape[2], wshape[3]);
    let (ho, wo) = (gs[2], gs[3]);
    let mut out = Tensor::zeros(wshape);
    let xd = x.data();
    let gd = g.data();
    let od = out.data_mut();
    for b in 0..bsz {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let gv = gd[((b * o + oc) * ho + i) * wo + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for cc in 0..c {
                        for p in 0..kh {
                            let y = (i * stride + p) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for q in 0..kw {
                                let xx = (j * stride + q) as isize - pad as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                od[((oc * c + cc) * kh + p) * kw + q] +=
                                    gv * xd[((b * c + cc) * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_bias_grad(g: &Tensor) -> Tensor {
    let gs = g.shape();
    let (bsz, o, ho, wo) = (gs[0], gs[1], gs[2], gs[3]);
    let mut out = Tensor::zeros(&[o]);
    let gd = g.data();
    let od = out.data_mut();
    for b in 0..bsz {
        for oc in 0..o {
            for i in 0..ho * wo {
                od[oc] += gd[(b * o + oc) * ho * wo + i];
            }
        }
    }
    out
}

// ---- gradient checking ---------------------------------------------------

/// Central-difference gradient check of a scalar function of flat parameters.
///
/// Returns the max over coordinates of |analytic - central| / max(1, |analytic|).
/// Coordinates whose one-sided differences disagree (a kink within `h`) are
/// skipped.
pub fn gradcheck<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // analytic gradient
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(Error::InvalidArgument("gradcheck target must be scalar".into()));
    }
    let f0 = tape.value(root).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    let seed = Tensor::new(tape.value(root).shape().to_vec(), vec![1.0]).unwrap();
    let grads = tape.backward(root, seed)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let r = f(&mut t, &vs)?;
        let v = t.value(r).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "gradcheck" });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for (pi, p) in points.iter().enumerate() {
        for ci in 0..p.len() {
            let mut plus = points.to_vec();
            plus[pi].data_mut()[ci] += h;
            let fp = eval(&plus)?;
            let mut minus = points.to_vec();
            minus[pi].data_mut()[ci] -= h;
            let fm = eval(&minus)?;
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            // kink within h: one-sided slopes disagree
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[pi].data()[ci];
            let rel = (an - fd).abs() / an.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
