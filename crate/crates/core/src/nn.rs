//! Named parameters and the small layers the network modules are built from.

use crate::error::{dim_err, Result};
use crate::tensor::{Grads, Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Cnn,
    Transformer,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Cnn => "cnn",
            ParamGroup::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cnn" => Some(ParamGroup::Cnn),
            "transformer" => Some(ParamGroup::Transformer),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
    /// whether weight decay applies
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, tensor: Tensor<T>, group: ParamGroup, decay: bool) -> ParamId {
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, tensor, group, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.params[id.0].tensor.shape(), value.shape(), "{}", self.params[id.0].name);
        self.params[id.0].tensor = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.leaf(p.tensor.clone()) } else { g.constant(p.tensor.clone()) })
            .collect();
        Bound { vars }
    }

    /// Adds `scale ·` tape gradients into each parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Grads<T>, scale: T) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let g = p.tensor.grad_mut();
            if let Some(delta) = grads.get(v) {
                for (a, &b) in g.iter_mut().zip(delta.data()) {
                    *a += b * scale;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn zeroed_like(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect()
    }
}

/// Parameter handles resolved to tape variables for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds a store to variables already on the tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Scoped parameter factory used while constructing a network.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: String::new(), group: ParamGroup::Cnn }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix, group: self.group }
    }

    pub fn group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) }
    }

    pub fn param(&mut self, name: &str, t: Tensor<T>, decay: bool) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, t, self.group, decay)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::c(rng.gen_range(-bound..bound)));
        self.param(name, t, true)
    }

    pub fn set_decay(&mut self, id: ParamId, decay: bool) {
        self.store.params[id.0].decay = decay;
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], decay: bool) -> ParamId {
        self.param(name, Tensor::zeros(shape), decay)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::full(shape, T::one()), false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

/// `y = x·W + b` on row tokens (n × in → n × out).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = b.scope(name);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear { w: s.uniform("weight", &[in_dim, out_dim], bound), b: s.zeros("bias", &[out_dim], false), in_dim, out_dim }
    }

    pub fn zeroed<T: Scalar>(b: &mut Builder<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = b.scope(name);
        Linear { w: s.zeros("weight", &[in_dim, out_dim], true), b: s.zeros("bias", &[out_dim], false), in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add_along(y, p.var(self.b), 1)
    }
}

/// Two-layer perceptron `W2·act(W1·x)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dims: [usize; 3], act: Activation) -> Self {
        let mut s = b.scope(name);
        Mlp { hidden: Linear::new(&mut s, "fc1", dims[0], dims[1]), out: Linear::new(&mut s, "fc2", dims[1], dims[2]), act }
    }

    /// Final layer initialised to zero.
    pub fn zero_out<T: Scalar>(b: &mut Builder<T>, name: &str, dims: [usize; 3], act: Activation) -> Self {
        let mut s = b.scope(name);
        Mlp { hidden: Linear::new(&mut s, "fc1", dims[0], dims[1]), out: Linear::zeroed(&mut s, "fc2", dims[1], dims[2]), act }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = activate(g, h, self.act)?;
        self.out.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm { gamma: s.ones("gamma", &[dim]), beta: s.zeros("beta", &[dim], false) }
    }

    /// Normalizes the feature axis (columns) of row tokens.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), 1)
    }
}

/// 3D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut s = b.scope(name);
        let fan_in = cin * k * k * k;
        // He-uniform for ReLU networks
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv { w: s.uniform("weight", &[cout, cin, k, k, k], bound), b: s.zeros("bias", &[cout], false), stride, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// conv → instance norm → ReLU
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ConvBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut s = b.scope(name);
        let conv = Conv::new(&mut s, "conv", cin, cout, 3, stride);
        ConvBlock { conv, gamma: s.ones("norm.gamma", &[cout]), beta: s.zeros("norm.beta", &[cout], false) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = g.instance_norm(y, p.var(self.gamma), p.var(self.beta))?;
        g.relu(y)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/out projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible into {heads} heads");
        let mut s = b.scope(name);
        MultiHeadAttention {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::new(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            out: Linear::new(&mut s, "out", dim, dim),
            heads,
        }
    }

    /// `query_in` is N×E, `key_in`/`value_in` are T×E. `allowed`, when given,
    /// is an N×T row-major gate applied to every head.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, query_in)?;
        let k = self.k.forward(g, p, key_in)?;
        let v = self.v.forward(g, p, value_in)?;
        let dim = g.shape(q)[1];
        let dh = dim / self.heads;
        let (n, t) = (g.shape(q)[0], g.shape(k)[0]);
        if let Some(mask) = allowed {
            if mask.len() != n * t {
                return Err(dim_err!("attention mask has {} entries, expected {n}x{t}", mask.len()));
            }
        }
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = match allowed {
                Some(mask) => g.masked_softmax(scores, mask)?,
                None => g.softmax(scores, 1)?,
            };
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out.forward(g, p, cat)
    }
}

/// Feature map (1×C×D×H×W) as row tokens (V×C).
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b, c, sp) = g.value(x).dims5()?;
    if b != 1 {
        return Err(dim_err!("token view takes one batch element, got {b}"));
    }
    let m = g.reshape(x, &[c, sp.iter().product()])?;
    g.transpose(m)
}

/// Row tokens (V×C) back to a 1×C×D×H×W feature map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<T>, tokens: Var, extents: [usize; 3]) -> Result<Var> {
    let c = g.shape(tokens)[1];
    let m = g.transpose(tokens)?;
    g.reshape(m, &[1, c, extents[0], extents[1], extents[2]])
}

/// Feature map (1×C×D×H×W) as a C×V matrix.
pub fn map_to_matrix<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b, c, sp) = g.value(x).dims5()?;
    if b != 1 {
        return Err(dim_err!("matrix view takes one batch element, got {b}"));
    }
    g.reshape(x, &[c, sp.iter().product()])
}
