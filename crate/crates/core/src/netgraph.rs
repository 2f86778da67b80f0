//! Layer DAGs with explicit skip connections.
//!
//! A network is an ordered list of layers; layer ids are 1-based and id 1 is
//! the input itself. Skip connections appear as `Add` layers with several
//! producers, which makes the dual construction a mechanical graph reversal.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum LayerKind {
    /// Dense affine map. `w` is [out, in], `b` is [out]. Rank > 1 inputs are
    /// flattened.
    Linear { w: Tensor, b: Tensor },
    /// 2-D convolution. `w` is [out_c, in_c, kh, kw], `b` is [out_c].
    Conv2d { w: Tensor, b: Tensor, stride: usize, pad: usize },
    Relu,
    Hardtanh,
    /// Normalization with frozen statistics: x ↦ γ (x − μ)/√(σ² + eps) + β,
    /// applied per channel (rank 3 input) or per feature (rank 1).
    BatchNormFixed { gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: f64 },
    /// Elementwise sum of all producers.
    Add,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Hardtanh => "hardtanh",
            LayerKind::BatchNormFixed { .. } => "batchnorm",
            LayerKind::Add => "add",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::Hardtanh)
    }
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct NetworkGraph {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub output_dim: usize,
}

/// Handle naming one trainable tensor inside a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub slot: ParamSlot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl NetworkGraph {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, output_dim: usize) -> Result<Self> {
        let net = NetworkGraph { layers, input_shape, output_dim };
        net.validate()?;
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn last_id(&self) -> usize {
        self.layers.last().map(|l| l.id).unwrap_or(1)
    }

    pub fn layer(&self, id: usize) -> &LayerSpec {
        &self.layers[id - 2]
    }

    /// Shape inference over the whole graph: id → per-example shape.
    /// Structural problems are reported at the first offending layer.
    pub fn validate(&self) -> Result<BTreeMap<usize, Vec<usize>>> {
        let mut shapes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        shapes.insert(1, self.input_shape.clone());
        for (pos, layer) in self.layers.iter().enumerate() {
            let id = layer.id;
            let fail = |msg: String| Error::InvalidGraph { layer: id, msg };
            if id != pos + 2 {
                return Err(fail(format!("expected id {}, found {}", pos + 2, id)));
            }
            if layer.inputs.is_empty() {
                return Err(fail("layer has no inputs".into()));
            }
            for &j in &layer.inputs {
                if j >= id {
                    return Err(fail(format!("forward reference to layer {}", j)));
                }
                if !shapes.contains_key(&j) {
                    return Err(fail(format!("dangling input id {}", j)));
                }
            }
            let arity_ok = match layer.kind {
                LayerKind::Add => layer.inputs.len() >= 2,
                _ => layer.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(fail(format!(
                    "{} takes {} input(s), got {}",
                    layer.kind.name(),
                    if matches!(layer.kind, LayerKind::Add) { ">=2" } else { "1" },
                    layer.inputs.len()
                )));
            }
            let in_shape = shapes[&layer.inputs[0]].clone();
            let out_shape = match &layer.kind {
                LayerKind::Linear { w, b } => {
                    if w.shape().len() != 2 || b.shape() != [w.shape()[0]] {
                        return Err(fail(format!(
                            "linear parameter shapes w={:?} b={:?}",
                            w.shape(),
                            b.shape()
                        )));
                    }
                    let n: usize = in_shape.iter().product();
                    if w.shape()[1] != n {
                        return Err(fail(format!("linear expects {} features, producer has {}", w.shape()[1], n)));
                    }
                    vec![w.shape()[0]]
                }
                LayerKind::Conv2d { w, b, stride, pad } => {
                    if in_shape.len() != 3 {
                        return Err(fail(format!("conv2d needs [c,h,w] input, got {:?}", in_shape)));
                    }
                    if w.shape().len() != 4 || w.shape()[1] != in_shape[0] || b.shape() != [w.shape()[0]] {
                        return Err(fail(format!(
                            "conv2d parameter shapes w={:?} b={:?} for input {:?}",
                            w.shape(),
                            b.shape(),
                            in_shape
                        )));
                    }
                    if *stride == 0 {
                        return Err(fail("conv2d stride must be >= 1".into()));
                    }
                    let (kh, kw) = (w.shape()[2], w.shape()[3]);
                    let (h, wd) = (in_shape[1] + 2 * pad, in_shape[2] + 2 * pad);
                    if h < kh || wd < kw {
                        return Err(fail("conv2d kernel larger than padded input".into()));
                    }
                    vec![w.shape()[0], (h - kh) / stride + 1, (wd - kw) / stride + 1]
                }
                LayerKind::Relu | LayerKind::Hardtanh => in_shape,
                LayerKind::BatchNormFixed { gamma, beta, mean, var, eps } => {
                    let c = if in_shape.len() == 3 { in_shape[0] } else { in_shape.iter().product() };
                    for (nm, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
                        if t.shape() != [c] {
                            return Err(fail(format!("{} shape {:?}, expected [{}]", nm, t.shape(), c)));
                        }
                    }
                    if var.data().iter().any(|&v| v + eps <= 0.0) {
                        return Err(fail("nonpositive variance".into()));
                    }
                    in_shape
                }
                LayerKind::Add => {
                    for &j in &layer.inputs[1..] {
                        if shapes[&j] != in_shape {
                            return Err(fail(format!(
                                "add inputs disagree: {:?} vs {:?}",
                                in_shape, shapes[&j]
                            )));
                        }
                    }
                    in_shape
                }
            };
            shapes.insert(id, out_shape);
        }
        let last = self.last_id();
        let out: usize = shapes[&last].iter().product();
        if out != self.output_dim {
            return Err(Error::InvalidGraph {
                layer: last,
                msg: format!("output has {} entries, declared {}", out, self.output_dim),
            });
        }
        Ok(shapes)
    }

    /// Trainable tensors in a fixed deterministic order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                    out.push(ParamRef { layer: layer.id, slot: ParamSlot::Weight });
                    out.push(ParamRef { layer: layer.id, slot: ParamSlot::Bias });
                }
                LayerKind::BatchNormFixed { .. } => {
                    out.push(ParamRef { layer: layer.id, slot: ParamSlot::Gamma });
                    out.push(ParamRef { layer: layer.id, slot: ParamSlot::Beta });
                }
                _ => {}
            }
        }
        out
    }

    pub fn param(&self, r: ParamRef) -> &Tensor {
        match (&self.layer(r.layer).kind, r.slot) {
            (LayerKind::Linear { w, .. }, ParamSlot::Weight) => w,
            (LayerKind::Linear { b, .. }, ParamSlot::Bias) => b,
            (LayerKind::Conv2d { w, .. }, ParamSlot::Weight) => w,
            (LayerKind::Conv2d { b, .. }, ParamSlot::Bias) => b,
            (LayerKind::BatchNormFixed { gamma, .. }, ParamSlot::Gamma) => gamma,
            (LayerKind::BatchNormFixed { beta, .. }, ParamSlot::Beta) => beta,
            _ => panic!("param slot does not exist on layer"),
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> &mut Tensor {
        let layer = &mut self.layers[r.layer - 2];
        match (&mut layer.kind, r.slot) {
            (LayerKind::Linear { w, .. }, ParamSlot::Weight) => w,
            (LayerKind::Linear { b, .. }, ParamSlot::Bias) => b,
            (LayerKind::Conv2d { w, .. }, ParamSlot::Weight) => w,
            (LayerKind::Conv2d { b, .. }, ParamSlot::Bias) => b,
            (LayerKind::BatchNormFixed { gamma, .. }, ParamSlot::Gamma) => gamma,
            (LayerKind::BatchNormFixed { beta, .. }, ParamSlot::Beta) => beta,
            _ => panic!("param slot does not exist on layer"),
        }
    }

    /// Put all parameters on a tape, as gradient leaves when `trainable`.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedNet {
        let mut vars = BTreeMap::new();
        for r in self.param_refs() {
            vars.insert((r.layer, r.slot), tape.leaf(self.param(r).clone(), trainable));
        }
        StagedNet { vars }
    }

    /// Batched evaluation; `x` is [batch, input_dim] or [batch, ...input_shape].
    /// Returns every layer's output keyed by id (id 1 is the input itself).
    pub fn forward_all(&self, x: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let outs = staged.forward_all(&mut tape, self, xv)?;
        Ok(outs.into_iter().map(|(id, v)| (id, tape.value(v).clone())).collect())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.last_id();
        Ok(self.forward_all(x)?.remove(&last).unwrap())
    }

    /// Argmax labels per example; ties break toward the smaller class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        Ok(argmax_rows(&out, self.output_dim))
    }
}

pub fn argmax_rows(out: &Tensor, classes: usize) -> Vec<usize> {
    let b = out.len() / classes;
    (0..b)
        .map(|i| {
            let row = &out.data()[i * classes..(i + 1) * classes];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A network's parameters bound to tape variables.
pub struct StagedNet {
    vars: BTreeMap<(usize, ParamSlot), Var>,
}

impl StagedNet {
    /// Bind externally created parameter variables, in `param_refs` order.
    /// Lets gradient checkers own the leaves while reusing the forward/dual
    /// machinery.
    pub fn from_vars(net: &NetworkGraph, vars: &[Var]) -> StagedNet {
        let refs = net.param_refs();
        assert_eq!(refs.len(), vars.len());
        StagedNet { vars: refs.iter().zip(vars).map(|(r, &v)| ((r.layer, r.slot), v)).collect() }
    }

    pub fn var(&self, layer: usize, slot: ParamSlot) -> Var {
        self.vars[&(layer, slot)]
    }

    /// Effective per-feature (scale, shift) of a frozen-stats normalization
    /// layer, as tape nodes so gradients reach γ and β.
    pub fn batchnorm_affine(&self, tape: &mut Tape, net: &NetworkGraph, id: usize) -> Result<(Var, Var)> {
        let (mean, var, eps) = match &net.layer(id).kind {
            LayerKind::BatchNormFixed { mean, var, eps, .. } => (mean.clone(), var.clone(), *eps),
            _ => unreachable!(),
        };
        let gamma = self.var(id, ParamSlot::Gamma);
        let beta = self.var(id, ParamSlot::Beta);
        let denom: Vec<f64> = var.data().iter().map(|&v| (v + eps).sqrt()).collect();
        let inv = tape.constant(Tensor::from_vec(denom.iter().map(|&d| 1.0 / d).collect()));
        let scale = tape.mul(gamma, inv)?;
        let mv = tape.constant(mean);
        let ms = tape.mul(mv, scale)?;
        let shift = tape.sub(beta, ms)?;
        Ok((scale, shift))
    }

    pub fn forward_all(&self, tape: &mut Tape, net: &NetworkGraph, x: Var) -> Result<BTreeMap<usize, Var>> {
        let shapes = net.validate()?;
        let batch = tape.value(x).len() / net.input_dim();
        let mut outs: BTreeMap<usize, Var> = BTreeMap::new();
        outs.insert(1, x);
        for layer in &net.layers {
            let id = layer.id;
            let src = outs[&layer.inputs[0]];
            let out = match &layer.kind {
                LayerKind::Linear { w, .. } => {
                    let n = w.shape()[1];
                    let flat = tape.reshape(src, vec![batch, n])?;
                    let wv = self.var(id, ParamSlot::Weight);
                    let bv = self.var(id, ParamSlot::Bias);
                    let m = tape.matmul(flat, wv, false, true)?;
                    tape.add(m, bv)?
                }
                LayerKind::Conv2d { stride, pad, .. } => {
                    let ish = &shapes[&layer.inputs[0]];
                    let xin = tape.reshape(src, vec![batch, ish[0], ish[1], ish[2]])?;
                    let wv = self.var(id, ParamSlot::Weight);
                    let bv = self.var(id, ParamSlot::Bias);
                    tape.conv2d(xin, wv, Some(bv), *stride, *pad)?
                }
                LayerKind::Relu => tape.relu(src)?,
                LayerKind::Hardtanh => tape.hardtanh(src)?,
                LayerKind::BatchNormFixed { .. } => {
                    let (scale, shift) = self.batchnorm_affine(tape, net, id)?;
                    let ish = &shapes[&layer.inputs[0]];
                    if ish.len() == 3 {
                        let xin = tape.reshape(src, vec![batch, ish[0], ish[1], ish[2]])?;
                        let s3 = tape.reshape(scale, vec![ish[0], 1, 1])?;
                        let b3 = tape.reshape(shift, vec![ish[0], 1, 1])?;
                        tape.affine_diag(xin, s3, b3)?
                    } else {
                        let n: usize = ish.iter().product();
                        let flat = tape.reshape(src, vec![batch, n])?;
                        tape.affine_diag(flat, scale, shift)?
                    }
                }
                LayerKind::Add => {
                    let mut acc = src;
                    for &j in &layer.inputs[1..] {
                        acc = tape.add(acc, outs[&j])?;
                    }
                    acc
                }
            };
            outs.insert(id, out);
        }
        Ok(outs)
    }
}

// ---- builders ------------------------------------------------------------

/// Deterministic He-style initialization keyed by (seed, layer position).
pub fn init_weight(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller from two uniforms
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Fully connected net with ReLU between affine layers: dims like [784, 100, 10].
pub fn mlp(dims: &[usize], seed: u64) -> Result<NetworkGraph> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument("mlp needs at least input and output sizes".into()));
    }
    let mut layers = Vec::new();
    let mut id = 2;
    for (li, win) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (win[0], win[1]);
        let w = init_weight(&[fan_out, fan_in], fan_in, seed.wrapping_add(li as u64 * 0x9e37_79b9));
        layers.push(LayerSpec {
            id,
            kind: LayerKind::Linear { w, b: Tensor::zeros(&[fan_out]) },
            inputs: vec![id - 1],
        });
        id += 1;
        if li + 2 < dims.len() {
            layers.push(LayerSpec { id, kind: LayerKind::Relu, inputs: vec![id - 1] });
            id += 1;
        }
    }
    NetworkGraph::new(layers, vec![dims[0]], *dims.last().unwrap())
}

/// Two strided conv layers plus a hidden dense layer, for [c, h, w] images.
pub fn conv_net(input: [usize; 3], channels: [usize; 2], hidden: usize, classes: usize, seed: u64) -> Result<NetworkGraph> {
    let [c, h, w] = input;
    let mut layers = Vec::new();
    let mk = |shape: &[usize], fan_in: usize, k: u64| init_weight(shape, fan_in, seed.wrapping_add(k * 0x9e37_79b9));
    layers.push(LayerSpec {
        id: 2,
        kind: LayerKind::Conv2d {
            w: mk(&[channels[0], c, 4, 4], c * 16, 1),
            b: Tensor::zeros(&[channels[0]]),
            stride: 2,
            pad: 1,
        },
        inputs: vec![1],
    });
    layers.push(LayerSpec { id: 3, kind: LayerKind::Relu, inputs: vec![2] });
    layers.push(LayerSpec {
        id: 4,
        kind: LayerKind::Conv2d {
            w: mk(&[channels[1], channels[0], 4, 4], channels[0] * 16, 2),
            b: Tensor::zeros(&[channels[1]]),
            stride: 2,
            pad: 1,
        },
        inputs: vec![3],
    });
    layers.push(LayerSpec { id: 5, kind: LayerKind::Relu, inputs: vec![4] });
    let flat = channels[1] * (h / 4) * (w / 4);
    layers.push(LayerSpec {
        id: 6,
        kind: LayerKind::Linear { w: mk(&[hidden, flat], flat, 3), b: Tensor::zeros(&[hidden]) },
        inputs: vec![5],
    });
    layers.push(LayerSpec { id: 7, kind: LayerKind::Relu, inputs: vec![6] });
    layers.push(LayerSpec {
        id: 8,
        kind: LayerKind::Linear { w: mk(&[classes, hidden], hidden, 4), b: Tensor::zeros(&[classes]) },
        inputs: vec![7],
    });
    NetworkGraph::new(layers, vec![c, h, w], classes)
}
