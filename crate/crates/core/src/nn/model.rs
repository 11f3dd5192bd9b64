use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::key::{ParamKey, ParamKind};
use crate::error::{reject, Error, Result};
use crate::ops::{self, BnCache, BnState, StatUpdate};
use crate::par::Exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    /// Encoder-decoder with long skip concatenations.
    #[serde(rename = "mini_long")]
    MiniLong,
    /// Residual trunk with identity skips and a pooled context head.
    #[serde(rename = "mini_short")]
    MiniShort,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::MiniLong, Arch::MiniShort];

    pub fn name(self) -> &'static str {
        match self {
            Arch::MiniLong => "mini_long",
            Arch::MiniShort => "mini_short",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini_long" => Ok(Arch::MiniLong),
            "mini_short" => Ok(Arch::MiniShort),
            _ => Err(Error::Format(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Stem,
    Encoder,
    Bottleneck,
    Decoder,
    ResidualBranch,
    Projection,
    PyramidPool,
    Fusion,
    Head,
}

/// Static description of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvMeta {
    pub layer_id: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub role: LayerRole,
}

impl ConvMeta {
    /// Changes channel count or spatial stride.
    pub fn is_feature_decomposition(&self) -> bool {
        self.cin != self.cout || self.stride != 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub meta: ConvMeta,
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One node of the forward graph; operands are indices of earlier nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Input,
    Conv {
        layer: usize,
        input: usize,
    },
    Bn {
        layer: usize,
        input: usize,
    },
    Relu(usize),
    MaxPool(usize),
    Upsample {
        input: usize,
        factor: usize,
    },
    /// Nearest upsampling to the spatial size of another node.
    UpsampleLike {
        input: usize,
        like: usize,
    },
    GlobalPool(usize),
    Concat(usize, usize),
    Add(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    nodes: Vec<Node>,
    convs: Vec<ConvLayer>,
    bns: Vec<BnState>,
    class_count: usize,
    in_channels: usize,
}

/// Per-node quantities kept from a training forward pass.
enum Saved {
    None,
    Bn(BnCache<f32>),
    BnFrozen,
    Pool(Vec<usize>),
    Factor(usize),
}

/// Activations recorded by [`Model::forward_train`] for the backward pass.
pub struct Tape {
    values: Vec<Tensor>,
    saved: Vec<Saved>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("graph has nodes")
    }
}

struct Builder {
    nodes: Vec<Node>,
    convs: Vec<ConvLayer>,
    bns: Vec<BnState>,
    rng: crate::rng::Rng,
}

impl Builder {
    fn push(&mut self, n: Node) -> usize {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        input: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        role: LayerRole,
    ) -> usize {
        let fan_in = (cin * kernel * kernel) as f64;
        let wb = (6.0 / fan_in).sqrt();
        let bb = 1.0 / fan_in.sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[cout, cin, kernel, kernel], |_| rng.uniform(-wb, wb) as f32);
        let b = Tensor::from_fn(&[cout], |_| rng.uniform(-bb, bb) as f32);
        let meta = ConvMeta { layer_id: self.convs.len() + 1, cin, cout, kernel, stride, pad, role };
        self.convs.push(ConvLayer { meta, w, b });
        self.push(Node::Conv { layer: self.convs.len() - 1, input })
    }

    fn bn(&mut self, input: usize, channels: usize) -> usize {
        self.bns.push(BnState::new(channels));
        self.push(Node::Bn { layer: self.bns.len() - 1, input })
    }

    fn relu(&mut self, input: usize) -> usize {
        self.push(Node::Relu(input))
    }

    fn conv_bn_relu(&mut self, input: usize, cin: usize, cout: usize, stride: usize, role: LayerRole) -> usize {
        let c = self.conv(input, cin, cout, 3, stride, 1, role);
        let b = self.bn(c, cout);
        self.relu(b)
    }

    fn double(&mut self, input: usize, cin: usize, cout: usize, role: LayerRole) -> usize {
        let a = self.conv_bn_relu(input, cin, cout, 1, role);
        self.conv_bn_relu(a, cout, cout, 1, role)
    }

    /// `relu(skip + bn(conv(relu(bn(conv(x))))))`, with a strided 1x1
    /// projection on the skip when the block changes shape.
    fn residual(&mut self, input: usize, cin: usize, cout: usize, stride: usize) -> usize {
        let a = self.conv_bn_relu(input, cin, cout, stride, LayerRole::ResidualBranch);
        let c = self.conv(a, cout, cout, 3, 1, 1, LayerRole::ResidualBranch);
        let branch = self.bn(c, cout);
        // Zero scale on the branch-final BN: every block starts as its skip path.
        self.bns.last_mut().expect("just pushed").gamma = Tensor::zeros(&[cout]);
        let skip = if cin != cout || stride != 1 {
            let p = self.conv(input, cin, cout, 1, stride, 0, LayerRole::Projection);
            self.bn(p, cout)
        } else {
            input
        };
        let sum = self.push(Node::Add(skip, branch));
        self.relu(sum)
    }
}

pub const CLASS_COUNT: usize = 4;
pub const IN_CHANNELS: usize = 1;

/// Builds a freshly initialized network. Kernels are uniform in
/// `±sqrt(6 / fan_in)`, biases in `±1 / sqrt(fan_in)`; batch-norm layers start
/// at `gamma = 1, beta = 0, mean = 0, var = 1`, except the last BN of each
/// residual branch, whose gamma starts at 0.
pub fn build_model(arch: Arch, seed: u64) -> Model {
    let mut b = Builder { nodes: Vec::new(), convs: Vec::new(), bns: Vec::new(), rng: crate::rng::Rng::new(seed) };
    let x = b.push(Node::Input);
    let out = match arch {
        Arch::MiniLong => {
            let e1 = b.double(x, IN_CHANNELS, 8, LayerRole::Encoder);
            let p1 = b.push(Node::MaxPool(e1));
            let e2 = b.double(p1, 8, 16, LayerRole::Encoder);
            let p2 = b.push(Node::MaxPool(e2));
            let mid = b.double(p2, 16, 32, LayerRole::Bottleneck);
            let u2 = b.push(Node::Upsample { input: mid, factor: 2 });
            let c2 = b.push(Node::Concat(u2, e2));
            let d2 = b.double(c2, 32 + 16, 16, LayerRole::Decoder);
            let u1 = b.push(Node::Upsample { input: d2, factor: 2 });
            let c1 = b.push(Node::Concat(u1, e1));
            let d1 = b.double(c1, 16 + 8, 8, LayerRole::Decoder);
            b.conv(d1, 8, CLASS_COUNT, 1, 1, 0, LayerRole::Head)
        }
        Arch::MiniShort => {
            let stem = b.conv_bn_relu(x, IN_CHANNELS, 16, 1, LayerRole::Stem);
            let r1 = b.residual(stem, 16, 16, 1);
            let r2 = b.residual(r1, 16, 32, 2);
            let r3 = b.residual(r2, 32, 32, 1);
            let g = b.push(Node::GlobalPool(r3));
            let ctx = b.conv(g, 32, 8, 1, 1, 0, LayerRole::PyramidPool);
            let up = b.push(Node::UpsampleLike { input: ctx, like: r3 });
            let cat = b.push(Node::Concat(r3, up));
            let fused = b.conv_bn_relu(cat, 32 + 8, 16, 1, LayerRole::Fusion);
            let logits = b.conv(fused, 16, CLASS_COUNT, 1, 1, 0, LayerRole::Head);
            b.push(Node::UpsampleLike { input: logits, like: x })
        }
    };
    debug_assert_eq!(out, b.nodes.len() - 1);
    Model { arch, nodes: b.nodes, convs: b.convs, bns: b.bns, class_count: CLASS_COUNT, in_channels: IN_CHANNELS }
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn bn_layers(&self) -> &[BnState] {
        &self.bns
    }

    pub fn conv_meta(&self) -> Vec<ConvMeta> {
        self.convs.iter().map(|c| c.meta).collect()
    }

    pub fn bn_state(&self, layer_id: usize) -> Result<&BnState> {
        layer_id
            .checked_sub(1)
            .and_then(|i| self.bns.get(i))
            .ok_or(Error::UnknownKey(ParamKey::new(layer_id, ParamKind::BnRM)))
    }

    pub fn layer_count(&self, kind: ParamKind) -> usize {
        if kind.is_conv() {
            self.convs.len()
        } else {
            self.bns.len()
        }
    }

    /// Every addressable parameter, conv layers first (kernel, bias), then
    /// batch-norm layers (mean, var, weight, bias), each front to back.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::with_capacity(2 * self.convs.len() + 4 * self.bns.len());
        for l in 1..=self.convs.len() {
            keys.extend(ParamKind::CONV.iter().map(|&k| ParamKey::new(l, k)));
        }
        for l in 1..=self.bns.len() {
            keys.extend(ParamKind::BN.iter().map(|&k| ParamKey::new(l, k)));
        }
        keys
    }

    pub fn keys_of(&self, kinds: &[ParamKind]) -> Vec<ParamKey> {
        let mut keys: Vec<_> = self.param_keys().into_iter().filter(|k| kinds.contains(&k.kind)).collect();
        keys.sort();
        keys
    }

    pub fn has_key(&self, key: ParamKey) -> bool {
        key.layer_id >= 1 && key.layer_id <= self.layer_count(key.kind)
    }

    pub fn param(&self, key: ParamKey) -> Result<&Tensor> {
        if !self.has_key(key) {
            return Err(Error::UnknownKey(key));
        }
        let i = key.layer_id - 1;
        Ok(match key.kind {
            ParamKind::ConvW => &self.convs[i].w,
            ParamKind::ConvB => &self.convs[i].b,
            ParamKind::BnRM => &self.bns[i].run_mean,
            ParamKind::BnRV => &self.bns[i].run_var,
            ParamKind::BnRW => &self.bns[i].gamma,
            ParamKind::BnRB => &self.bns[i].beta,
        })
    }

    fn param_mut(&mut self, key: ParamKey) -> Result<&mut Tensor> {
        if !self.has_key(key) {
            return Err(Error::UnknownKey(key));
        }
        let i = key.layer_id - 1;
        Ok(match key.kind {
            ParamKind::ConvW => &mut self.convs[i].w,
            ParamKind::ConvB => &mut self.convs[i].b,
            ParamKind::BnRM => &mut self.bns[i].run_mean,
            ParamKind::BnRV => &mut self.bns[i].run_var,
            ParamKind::BnRW => &mut self.bns[i].gamma,
            ParamKind::BnRB => &mut self.bns[i].beta,
        })
    }

    /// Returns an independent copy of the addressed tensor.
    pub fn get_param(&self, key: ParamKey) -> Result<Tensor> {
        let mut t = self.param(key)?.clone();
        t.clear_grad();
        Ok(t)
    }

    /// Replaces the addressed tensor wholesale. Refused, with the model
    /// untouched, on unknown keys, shape mismatch or a negative variance.
    pub fn set_param(&mut self, key: ParamKey, t: Tensor) -> Result<()> {
        let slot = self.param_mut(key)?;
        if slot.shape() != t.shape() {
            return Err(Error::ShapeMismatch { key, expected: slot.shape().to_vec(), got: t.shape().to_vec() });
        }
        if !t.all_finite() {
            return Err(Error::InvalidInput(format!("{key}: non-finite values")));
        }
        if key.kind == ParamKind::BnRV && t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidState(format!("{key}: negative running variance")));
        }
        let mut t = t;
        t.clear_grad();
        *slot = t;
        Ok(())
    }

    pub fn total_param_count(&self) -> usize {
        self.convs.iter().map(|c| c.w.len() + c.b.len()).sum::<usize>()
            + self.bns.iter().map(|b| 4 * b.channels()).sum::<usize>()
    }

    /// Bitwise equality of every parameter.
    pub fn params_bit_eq(&self, other: &Model) -> bool {
        self.arch == other.arch
            && self.param_keys().len() == other.param_keys().len()
            && self
                .param_keys()
                .into_iter()
                .all(|k| matches!((self.param(k), other.param(k)), (Ok(a), Ok(b)) if a.bit_eq(b)))
    }

    /// SHA-256 over the architecture id and every parameter's little-endian
    /// bytes in `param_keys` order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.name().as_bytes());
        for k in self.param_keys() {
            h.update(k.to_string().as_bytes());
            for v in self.param(k).expect("own key").data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            reject!("model takes {} input channels, got {c}", self.in_channels);
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            reject!("spatial extent {h}x{w} must be a positive multiple of 4");
        }
        Ok(())
    }

    /// Forward pass; in train mode batch statistics are used and running
    /// statistics updated.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let mut tape = self.forward_train(x, &BTreeSet::new())?;
                Ok(tape.values.pop().expect("graph has nodes"))
            }
        }
    }

    /// Evaluation-mode forward: a pure function of parameters and input.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_eval_with(Exec::default(), x)
    }

    pub fn forward_eval_with(&self, exec: Exec, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last_use = self.last_uses();
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let get = |j: usize| values[j].as_ref().expect("operand still live");
            let v = match *node {
                Node::Input => x.clone(),
                Node::Conv { layer, input } => {
                    let c = &self.convs[layer];
                    ops::conv2d_forward_with(exec, get(input), &c.w, Some(&c.b), c.meta.stride, c.meta.pad)?
                }
                Node::Bn { layer, input } => ops::bn_forward_eval(get(input), &self.bns[layer])?,
                _ => self.simple_forward(node, &get)?.0,
            };
            values.push(Some(v));
            for j in operands(node) {
                if last_use[j] == i {
                    values[j] = None;
                }
            }
        }
        Ok(values.pop().flatten().expect("output node"))
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last = vec![usize::MAX; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for j in operands(n) {
                last[j] = i;
            }
        }
        last
    }

    fn simple_forward<'a>(&self, node: &Node, get: &dyn Fn(usize) -> &'a Tensor) -> Result<(Tensor, Saved)> {
        Ok(match *node {
            Node::Relu(a) => (ops::relu(get(a)), Saved::None),
            Node::MaxPool(a) => {
                let (y, arg) = ops::maxpool2(get(a))?;
                (y, Saved::Pool(arg))
            }
            Node::Upsample { input, factor } => (ops::upsample_nearest(get(input), factor)?, Saved::Factor(factor)),
            Node::UpsampleLike { input, like } => {
                let (_, _, h, w) = get(input).dims4()?;
                let (_, _, th, tw) = get(like).dims4()?;
                if th % h != 0 || tw % w != 0 || th / h != tw / w {
                    reject!("cannot upsample {h}x{w} to {th}x{tw} by an integer factor");
                }
                let f = th / h;
                (ops::upsample_nearest(get(input), f)?, Saved::Factor(f))
            }
            Node::GlobalPool(a) => (ops::global_avg_pool(get(a))?, Saved::None),
            Node::Concat(a, b) => (ops::concat_channels(get(a), get(b))?, Saved::None),
            Node::Add(a, b) => (ops::add(get(a), get(b))?, Saved::None),
            Node::Input | Node::Conv { .. } | Node::Bn { .. } => unreachable!("handled by caller"),
        })
    }

    /// Training-mode forward recording everything needed by [`Model::backward`].
    /// Running statistics named in `frozen` are left untouched; a layer with
    /// both statistics frozen normalizes with them instead of batch statistics.
    pub fn forward_train(&mut self, x: &Tensor, frozen: &BTreeSet<ParamKey>) -> Result<Tape> {
        self.check_input(x)?;
        let exec = Exec::default();
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut saved = Vec::with_capacity(self.nodes.len());
        for node in self.nodes.clone().iter() {
            let (v, s) = match *node {
                Node::Input => (x.clone(), Saved::None),
                Node::Conv { layer, input } => {
                    let c = &self.convs[layer];
                    let y =
                        ops::conv2d_forward_with(exec, &values[input], &c.w, Some(&c.b), c.meta.stride, c.meta.pad)?;
                    (y, Saved::None)
                }
                Node::Bn { layer, input } => {
                    let id = layer + 1;
                    let update = StatUpdate {
                        mean: !frozen.contains(&ParamKey::new(id, ParamKind::BnRM)),
                        var: !frozen.contains(&ParamKey::new(id, ParamKind::BnRV)),
                    };
                    if !update.mean && !update.var {
                        (ops::bn_forward_eval(&values[input], &self.bns[layer])?, Saved::BnFrozen)
                    } else {
                        let (y, cache) = ops::bn_forward_train_cached(&values[input], &mut self.bns[layer], update)?;
                        (y, Saved::Bn(cache))
                    }
                }
                _ => self.simple_forward(node, &|j| &values[j])?,
            };
            values.push(v);
            saved.push(s);
        }
        Ok(Tape { values, saved })
    }

    /// Back-propagates `grad_out` (gradient of the loss with respect to the
    /// output) and accumulates parameter gradients into the tensors' slots.
    pub fn backward(&mut self, tape: &Tape, grad_out: Tensor) -> Result<()> {
        if grad_out.shape() != tape.output().shape() {
            reject!("output gradient shape {:?} vs output {:?}", grad_out.shape(), tape.output().shape());
        }
        let exec = Exec::default();
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[n - 1] = Some(grad_out);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i] {
                Node::Input => {}
                Node::Conv { layer, input } => {
                    let c = &mut self.convs[layer];
                    let need_input = !matches!(self.nodes[input], Node::Input);
                    let (gx, gw, gb) = ops::conv2d_backward_with(
                        exec,
                        &tape.values[input],
                        &c.w,
                        &g,
                        c.meta.stride,
                        c.meta.pad,
                        need_input,
                    )?;
                    c.w.accumulate_grad(gw.data())?;
                    c.b.accumulate_grad(gb.data())?;
                    if need_input {
                        acc(&mut grads, input, gx)?;
                    }
                }
                Node::Bn { layer, input } => {
                    let bn = &mut self.bns[layer];
                    let (gx, gg, gb) = match &tape.saved[i] {
                        Saved::Bn(cache) => ops::bn_train_backward(&g, cache, bn.gamma.data())?,
                        Saved::BnFrozen => ops::bn_eval_backward(
                            &tape.values[input],
                            &g,
                            bn.gamma.data(),
                            bn.run_mean.data(),
                            bn.run_var.data(),
                            bn.eps,
                        )?,
                        _ => unreachable!(),
                    };
                    bn.gamma.accumulate_grad(&gg)?;
                    bn.beta.accumulate_grad(&gb)?;
                    acc(&mut grads, input, gx)?;
                }
                Node::Relu(a) => acc(&mut grads, a, ops::relu_backward(&tape.values[a], &g)?)?,
                Node::MaxPool(a) => {
                    let Saved::Pool(arg) = &tape.saved[i] else { unreachable!() };
                    acc(&mut grads, a, ops::maxpool2_backward(tape.values[a].shape(), arg, &g)?)?;
                }
                Node::Upsample { input, .. } | Node::UpsampleLike { input, .. } => {
                    let Saved::Factor(f) = tape.saved[i] else { unreachable!() };
                    acc(&mut grads, input, ops::upsample_nearest_backward(&g, f)?)?;
                }
                Node::GlobalPool(a) => acc(&mut grads, a, ops::global_avg_pool_backward(tape.values[a].shape(), &g)?)?,
                Node::Concat(a, b) => {
                    let ca = tape.values[a].shape()[1];
                    let (ga, gb) = ops::concat_channels_backward(&g, ca)?;
                    acc(&mut grads, a, ga)?;
                    acc(&mut grads, b, gb)?;
                }
                Node::Add(a, b) => {
                    acc(&mut grads, a, g.clone())?;
                    acc(&mut grads, b, g)?;
                }
            }
        }
        Ok(())
    }

    /// Trainable tensors (kernels, biases, BN weights and biases) with their keys.
    pub fn trainable_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((ParamKey::new(i + 1, ParamKind::ConvW), &mut c.w));
            out.push((ParamKey::new(i + 1, ParamKind::ConvB), &mut c.b));
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            out.push((ParamKey::new(i + 1, ParamKind::BnRW), &mut b.gamma));
            out.push((ParamKey::new(i + 1, ParamKind::BnRB), &mut b.beta));
        }
        out
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.trainable_mut() {
            t.clear_grad();
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], j: usize, g: Tensor) -> Result<()> {
    match &mut grads[j] {
        Some(e) => e.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
        slot => *slot = Some(g),
    }
    Ok(())
}

fn operands(n: &Node) -> Vec<usize> {
    match *n {
        Node::Input => vec![],
        Node::Conv { input, .. } | Node::Bn { input, .. } | Node::Upsample { input, .. } => vec![input],
        Node::UpsampleLike { input, like } => vec![input, like],
        Node::Relu(a) | Node::MaxPool(a) | Node::GlobalPool(a) => vec![a],
        Node::Concat(a, b) | Node::Add(a, b) => vec![a, b],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_counts() {
        let long = build_model(Arch::MiniLong, 0);
        assert_eq!(long.layer_count(ParamKind::ConvW), 11);
        assert_eq!(long.layer_count(ParamKind::BnRM), 10);
        let keys = long.param_keys();
        assert!(keys.contains(&ParamKey::new(11, ParamKind::ConvW)));
        assert!(!keys.contains(&ParamKey::new(12, ParamKind::ConvW)));
        assert_eq!(keys.len(), 62);

        let short = build_model(Arch::MiniShort, 0);
        assert_eq!(short.layer_count(ParamKind::ConvW), 11);
        assert_eq!(short.layer_count(ParamKind::BnRM), 9);
    }

    #[test]
    fn deterministic_build() {
        let a = build_model(Arch::MiniShort, 7);
        let b = build_model(Arch::MiniShort, 7);
        assert!(a.params_bit_eq(&b));
        assert_eq!(a.digest(), b.digest());
        let c = build_model(Arch::MiniShort, 8);
        assert!(!a.params_bit_eq(&c));
    }

    #[test]
    fn output_shapes() {
        let x = Tensor::from_fn(&[2, 1, 32, 32], |i| (i % 7) as f32 / 7.0);
        for arch in Arch::ALL {
            let mut m = build_model(arch, 1);
            assert_eq!(m.forward_eval(&x).unwrap().shape(), &[2, 4, 32, 32]);
            assert_eq!(m.forward(&x, Mode::Train).unwrap().shape(), &[2, 4, 32, 32]);
        }
        let m = build_model(Arch::MiniLong, 1);
        assert!(m.forward_eval(&Tensor::zeros(&[1, 1, 30, 32])).is_err());
        assert!(m.forward_eval(&Tensor::zeros(&[1, 2, 32, 32])).is_err());
    }

    #[test]
    fn eval_is_pure_and_train_updates_stats() {
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 13) % 29) as f32 / 29.0);
        let mut m = build_model(Arch::MiniLong, 2);
        let before = m.clone();
        let y1 = m.forward(&x, Mode::Eval).unwrap();
        let y2 = m.forward(&x, Mode::Eval).unwrap();
        assert!(y1.bit_eq(&y2));
        assert!(m.params_bit_eq(&before));
        m.forward(&x, Mode::Train).unwrap();
        for (a, b) in m.bn_layers().iter().zip(before.bn_layers()) {
            assert!(!a.run_mean.bit_eq(&b.run_mean));
        }
    }

    #[test]
    fn get_set_contract() {
        let mut m = build_model(Arch::MiniLong, 3);
        let snapshot = m.clone();
        let k = ParamKey::new(2, ParamKind::ConvW);
        let mut t = m.get_param(k).unwrap();
        t.data_mut()[0] += 1.0;
        assert!(m.params_bit_eq(&snapshot));
        m.set_param(k, m.get_param(k).unwrap()).unwrap();
        assert!(m.params_bit_eq(&snapshot));

        let k = ParamKey::new(3, ParamKind::ConvW);
        let w = m.get_param(k).unwrap();
        let [a, b, c, d] = w.shape()[..] else { panic!() };
        let transposed = Tensor::zeros(&[b, a, c, d]);
        assert!(matches!(m.set_param(k, transposed), Err(Error::ShapeMismatch { .. })));
        assert!(m.params_bit_eq(&snapshot));
        assert!(matches!(m.get_param(ParamKey::new(12, ParamKind::ConvW)), Err(Error::UnknownKey(_))));
        assert!(matches!(m.get_param(ParamKey::new(0, ParamKind::BnRM)), Err(Error::UnknownKey(_))));

        let rv = m.get_param(ParamKey::new(1, ParamKind::BnRV)).unwrap();
        assert!(rv.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn address_completeness() {
        for arch in Arch::ALL {
            let m = build_model(arch, 4);
            let keys = m.param_keys();
            let uniq: BTreeSet<_> = keys.iter().collect();
            assert_eq!(uniq.len(), keys.len());
            let total: usize = keys.iter().map(|k| m.param(*k).unwrap().len()).sum();
            assert_eq!(total, m.total_param_count());
        }
    }

    #[test]
    fn feature_decomposition_flags() {
        let m = build_model(Arch::MiniShort, 0);
        let flagged: Vec<_> =
            m.conv_meta().iter().filter(|c| c.is_feature_decomposition()).map(|c| c.layer_id).collect();
        assert_eq!(flagged, vec![1, 4, 6, 9, 10, 11]);
        let proj = m.conv_meta().into_iter().find(|c| c.role == LayerRole::Projection).unwrap();
        assert_eq!((proj.layer_id, proj.stride, proj.kernel), (6, 2, 1));
        let residual: Vec<_> = m
            .conv_meta()
            .iter()
            .filter(|c| c.role == LayerRole::ResidualBranch && !c.is_feature_decomposition())
            .map(|c| c.layer_id)
            .collect();
        assert_eq!(residual, vec![2, 3, 5, 7, 8]);
    }
}
