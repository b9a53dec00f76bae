//! Parameter management and reusable layers.
//!
//! Parameters are created through a [`ParamStore`], which owns every
//! trainable tensor of a model, keyed by a dotted path such as
//! `encoder.stage0.block1.conv1.weight`. Initialization is a pure function
//! of `(store seed, parameter name)`, so models are reproducible regardless
//! of construction order, and checkpoints can address tensors by name.

use crate::graph::{Graph, Param, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// FNV-1a: stable, dependency-free way to derive per-name RNG streams.
pub fn seed_for(seed: u64, name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(PRIME);
    }
    for b in name.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(PRIME);
    }
    h
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`; fan-in inferred from the shape
    /// (`[din, dout]` for linears, `[cout, cin, kh, kw]` for convs).
    KaimingIn,
    /// Normal with the given std.
    Normal(f64),
    Zeros,
    Ones,
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],
        // Depthwise kernels [c, kh, kw]: each output sees one k x k patch.
        3 => shape[1] * shape[2],
        4 => shape[1] * shape[2] * shape[3],
        _ => shape.iter().product::<usize>().max(1),
    }
}

/// Owns all parameters of a model in creation order; lookup by name.
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create (and register) a parameter. Names must be unique.
    pub fn make(&mut self, name: &str, shape: &[usize], init: Init) -> Param {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(self.seed, name));
        let value = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("normal std");
                ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng))
            }
            Init::KaimingIn => {
                let std = (2.0 / fan_in(shape) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("normal std");
                ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng))
            }
        };
        let p = Param::new(name, value);
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

// --------------------------------------------------------------- layers

pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, scope: &str, din: usize, dout: usize, bias: bool) -> Self {
        Self::with_init(store, scope, din, dout, bias, Init::KaimingIn)
    }

    /// Like [`Linear::new`] but with an explicit weight init (e.g. zero-init
    /// offset heads).
    pub fn with_init(
        store: &mut ParamStore,
        scope: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = store.make(&format!("{scope}.weight"), &[din, dout], init);
        let b = bias.then(|| store.make(&format!("{scope}.bias"), &[dout], Init::Zeros));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        scope: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.make(
            &format!("{scope}.weight"),
            &[cout, cin, k, k],
            Init::KaimingIn,
        );
        let b = bias.then(|| store.make(&format!("{scope}.bias"), &[cout], Init::Zeros));
        Conv2d {
            w,
            b,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct DepthwiseConv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new(
        store: &mut ParamStore,
        scope: &str,
        channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.make(&format!("{scope}.weight"), &[channels, k, k], Init::KaimingIn);
        let b = bias.then(|| store.make(&format!("{scope}.bias"), &[channels], Init::Zeros));
        DepthwiseConv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|b| g.param(b));
        g.dw_conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, scope: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.make(&format!("{scope}.gamma"), &[d], Init::Ones),
            beta: store.make(&format!("{scope}.beta"), &[d], Init::Zeros),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, scope: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "group norm: channels % groups == 0");
        GroupNorm {
            gamma: store.make(&format!("{scope}.gamma"), &[channels], Init::Ones),
            beta: store.make(&format!("{scope}.beta"), &[channels], Init::Zeros),
            groups,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.group_norm(x, self.groups, gamma, beta, self.eps)
    }
}

/// Two-layer MLP with SiLU in between.
pub struct Mlp {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, scope: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            lin1: Linear::new(store, &format!("{scope}.lin1"), din, hidden, true),
            lin2: Linear::new(store, &format!("{scope}.lin2"), hidden, dout, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.lin1.forward(g, x);
        let h = g.silu(h);
        self.lin2.forward(g, h)
    }
}

/// Multi-layer perceptron with SiLU between all but the last layer
/// (hypernetwork-style heads).
pub struct MlpN {
    pub layers: Vec<Linear>,
}

impl MlpN {
    pub fn new(store: &mut ParamStore, scope: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "MlpN: need at least in/out dims");
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Linear::new(
                    store,
                    &format!("{scope}.lin{i}"),
                    dims[i],
                    dims[i + 1],
                    true,
                )
            })
            .collect();
        MlpN { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        h
    }
}

/// Standard multi-head attention over `[b, n, d]` token sets.
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
    /// Width the heads operate at; projections map `d -> internal` and the
    /// output projection maps back. Equal to `d` unless downsampled.
    pub internal: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, scope: &str, d: usize, heads: usize) -> Self {
        Self::with_internal(store, scope, d, d, heads)
    }

    /// Attention whose q/k/v projections compress to `internal` channels
    /// (cross-attention blocks often halve the width).
    pub fn with_internal(
        store: &mut ParamStore,
        scope: &str,
        d: usize,
        internal: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(internal % heads, 0, "attention: internal % heads == 0");
        Attention {
            q: Linear::new(store, &format!("{scope}.q"), d, internal, true),
            k: Linear::new(store, &format!("{scope}.k"), d, internal, true),
            v: Linear::new(store, &format!("{scope}.v"), d, internal, true),
            out: Linear::new(store, &format!("{scope}.out"), internal, d, true),
            heads,
            d,
            internal,
        }
    }

    /// `q_in [b,nq,d]`, `k_in/v_in [b,nk,d]` -> `[b,nq,d]`.
    pub fn forward(&self, g: &mut Graph, q_in: Var, k_in: Var, v_in: Var) -> Var {
        let (b, nq) = (g.shape(q_in)[0], g.shape(q_in)[1]);
        let nk = g.shape(k_in)[1];
        let (m, dh) = (self.heads, self.internal / self.heads);
        let q = self.q.forward(g, q_in);
        let k = self.k.forward(g, k_in);
        let v = self.v.forward(g, v_in);
        let split = |g: &mut Graph, x: Var, n: usize| -> Var {
            let x = g.reshape(x, &[b, n, m, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * m, n, dh])
        };
        let qh = split(g, q, nq);
        let kh = split(g, k, nk);
        let vh = split(g, v, nk);
        let logits = g.bmm(qh, kh, true);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(logits);
        let ctxv = g.bmm(attn, vh, false);
        let ctxv = g.reshape(ctxv, &[b, m, nq, dh]);
        let ctxv = g.permute(ctxv, &[0, 2, 1, 3]);
        let ctxv = g.reshape(ctxv, &[b, nq, m * dh]);
        self.out.forward(g, ctxv)
    }
}

/// Sinusoidal 2D positional encoding `[d, h, w]` with half-pixel-centred,
/// size-normalized coordinates; channels split evenly between y and x.
pub fn sincos_pos_2d(d: usize, h: usize, w: usize) -> ArrayD<f64> {
    assert!(d % 4 == 0, "positional encoding dim must be divisible by 4");
    let quarter = d / 4;
    let mut pe = ArrayD::zeros(IxDyn(&[d, h, w]));
    for i in 0..h {
        for j in 0..w {
            let y = (i as f64 + 0.5) / h as f64 * 2.0 * std::f64::consts::PI;
            let x = (j as f64 + 0.5) / w as f64 * 2.0 * std::f64::consts::PI;
            for k in 0..quarter {
                let freq = 10000f64.powf(-(k as f64) / quarter as f64);
                pe[IxDyn(&[2 * k, i, j])] = (y * freq).sin();
                pe[IxDyn(&[2 * k + 1, i, j])] = (y * freq).cos();
                pe[IxDyn(&[d / 2 + 2 * k, i, j])] = (x * freq).sin();
                pe[IxDyn(&[d / 2 + 2 * k + 1, i, j])] = (x * freq).cos();
            }
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_a_function_of_seed_and_name() {
        let mut s1 = ParamStore::new(7);
        let mut s2 = ParamStore::new(7);
        // Different creation order, same names.
        let a1 = s1.make("a", &[4, 4], Init::KaimingIn);
        let b1 = s1.make("b", &[4, 4], Init::KaimingIn);
        let b2 = s2.make("b", &[4, 4], Init::KaimingIn);
        let a2 = s2.make("a", &[4, 4], Init::KaimingIn);
        assert_eq!(a1.value(), a2.value());
        assert_eq!(b1.value(), b2.value());
        // Different names differ; different seeds differ.
        assert_ne!(a1.value(), b1.value());
        let mut s3 = ParamStore::new(8);
        let a3 = s3.make("a", &[4, 4], Init::KaimingIn);
        assert_ne!(a1.value(), a3.value());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.make("x", &[1], Init::Zeros);
        s.make("x", &[1], Init::Zeros);
    }

    #[test]
    fn attention_shapes_and_softmax_rows() {
        let mut store = ParamStore::new(1);
        let attn = Attention::new(&mut store, "attn", 16, 4);
        let mut g = Graph::new();
        let q = g.constant(ArrayD::from_elem(IxDyn(&[2, 5, 16]), 0.1));
        let k = g.constant(ArrayD::from_elem(IxDyn(&[2, 9, 16]), -0.2));
        let y = attn.forward(&mut g, q, k, k);
        assert_eq!(g.shape(y), &[2, 5, 16]);
    }

    #[test]
    fn pos_encoding_is_bounded_and_distinct() {
        let pe = sincos_pos_2d(8, 4, 6);
        assert_eq!(pe.shape(), &[8, 4, 6]);
        for v in pe.iter() {
            assert!(v.abs() <= 1.0 + 1e-12);
        }
        // Distinct positions get distinct codes.
        let col = |i: usize, j: usize| -> Vec<f64> {
            (0..8).map(|c| pe[IxDyn(&[c, i, j])]).collect()
        };
        assert_ne!(col(0, 0), col(0, 1));
        assert_ne!(col(0, 0), col(1, 0));
        assert_ne!(col(2, 3), col(3, 2));
    }
}
