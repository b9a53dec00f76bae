//! Sparse/dense query engine.
//!
//! Two query families thread information through the network:
//!
//! * **Sparse queries** — small learnable token sets (`queries.encoder`,
//!   `queries.fpn`, `queries.decoder`, with 4/4/1 tokens by default) that
//!   interact with feature maps through *bi-direction attention*: (1)
//!   cross-attention from queries to features, (2) a point-wise MLP on the
//!   queries, (3) self-attention on the queries, (4) cross-attention from
//!   features back to the queries. Steps 3 and 4 produce the updated
//!   queries and features.
//! * **Dense queries** — a spatial map initialized as a copy of the
//!   encoder's first-stage output and fused with the deeper stages through
//!   multi-scale deformable attention (per-location sampling at predicted
//!   offsets), which is linear in pixel count.
//!
//! Every multiplication in bi-direction attention is recorded under one of
//! four labels matching the closed-form cost model ([`bi_attn_cost`]):
//! `34bnd² + 8bhwd² + 8bnhwd + 4bn²d` operations (ops = 2 × multiplies),
//! with softmax/normalization/projection overhead tracked separately under
//! `bi_attn.extra` / `bi_attn.feat_proj`.

use crate::backbone::{Encoder, FeaturePyramid};
use crate::graph::{Graph, Param, Var};
use crate::nn::{Init, LayerNorm, Linear, ParamStore};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};

/// Which part of the network a sparse query group prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryGroup {
    Encoder,
    Fpn,
    Decoder,
}

impl QueryGroup {
    pub fn name(self) -> &'static str {
        match self {
            QueryGroup::Encoder => "encoder",
            QueryGroup::Fpn => "fpn",
            QueryGroup::Decoder => "decoder",
        }
    }

    /// Default token count for the group (4 / 4 / 1).
    pub fn default_count(self) -> usize {
        match self {
            QueryGroup::Decoder => 1,
            _ => 4,
        }
    }
}

/// A learnable `(n, d)` token set registered as `queries.{group}`.
pub struct SparseQuerySet {
    pub tokens: Param,
    pub group: QueryGroup,
}

impl SparseQuerySet {
    pub fn new(store: &mut ParamStore, group: QueryGroup, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Config(format!(
                "query set {} needs n >= 1 and d >= 1, got ({n}, {d})",
                group.name()
            )));
        }
        let tokens = store.make(
            &format!("queries.{}", group.name()),
            &[n, d],
            Init::Normal(0.02),
        );
        Ok(SparseQuerySet { tokens, group })
    }

    pub fn n(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Tokens as a batched graph value `[b, n, d]`.
    pub fn batched(&self, g: &mut Graph, b: usize) -> Var {
        let t = g.param(&self.tokens);
        g.broadcast_batch(t, b)
    }
}

/// A spatial query map `[b, m, h1, w1]` living in the graph.
#[derive(Debug, Clone, Copy)]
pub struct DenseQueryMap {
    pub map: Var,
    pub channels: usize,
}

impl DenseQueryMap {
    /// Duplicate the first-stage features; the copy does not alias its
    /// source (later ops on the map leave the stage output untouched).
    pub fn init(g: &mut Graph, stage1: Var) -> Self {
        let shape = g.shape(stage1).to_vec();
        assert_eq!(shape.len(), 4, "dense query map: [b,m,h,w]");
        let map = g.reshape(stage1, &shape);
        DenseQueryMap {
            map,
            channels: shape[1],
        }
    }
}

// ------------------------------------------------------------- cost model

/// Closed-form operation count of one bi-direction attention application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiAttnCost {
    pub b: usize,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    /// 34bnd² — all query-side projections (17 d×d linears' worth).
    pub query_proj_ops: u64,
    /// 8bhwd² — feature-side projections (4 d×d linears' worth).
    pub feature_proj_ops: u64,
    /// 8bnhwd — the two cross-attention dot products.
    pub cross_ops: u64,
    /// 4bn²d — query self-attention dot products.
    pub self_ops: u64,
    pub total_ops: u64,
}

/// Evaluate `34bnd² + 8bhwd² + 8bnhwd + 4bn²d`.
pub fn bi_attn_cost(b: usize, n: usize, d: usize, h: usize, w: usize) -> BiAttnCost {
    assert!(
        b > 0 && n > 0 && d > 0 && h > 0 && w > 0,
        "bi_attn_cost: all dims positive"
    );
    let (b_, n_, d_, h_, w_) = (b as u64, n as u64, d as u64, h as u64, w as u64);
    let query_proj_ops = 34 * b_ * n_ * d_ * d_;
    let feature_proj_ops = 8 * b_ * h_ * w_ * d_ * d_;
    let cross_ops = 8 * b_ * n_ * h_ * w_ * d_;
    let self_ops = 4 * b_ * n_ * n_ * d_;
    BiAttnCost {
        b,
        n,
        d,
        h,
        w,
        query_proj_ops,
        feature_proj_ops,
        cross_ops,
        self_ops,
        total_ops: query_proj_ops + feature_proj_ops + cross_ops + self_ops,
    }
}

/// Count labels used by [`BiDirectionAttention`]; multiplies recorded under
/// the first four, doubled, reproduce the [`bi_attn_cost`] terms exactly.
pub mod labels {
    pub const ND2: &str = "bi_attn.nd2";
    pub const HWD2: &str = "bi_attn.hwd2";
    pub const NHWD: &str = "bi_attn.nhwd";
    pub const N2D: &str = "bi_attn.n2d";
    pub const EXTRA: &str = "bi_attn.extra";
    pub const FEAT_PROJ: &str = "bi_attn.feat_proj";
    pub const DEFORM: &str = "deform";
}

/// Multi-head attention context (no output projection); the two matrix
/// products land in `mixed_label`, softmax/scaling in the ambient scope.
fn mh_ctx(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mixed_label: &str) -> Var {
    let (b, nq, d) = {
        let s = g.shape(q);
        (s[0], s[1], s[2])
    };
    let nk = g.shape(k)[1];
    assert_eq!(d % heads, 0, "attention dim divisible by heads");
    let dh = d / heads;
    let split = |g: &mut Graph, x: Var, n: usize| {
        let x = g.reshape(x, &[b, n, heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * heads, n, dh])
    };
    let qh = split(g, q, nq);
    let kh = split(g, k, nk);
    let vh = split(g, v, nk);
    let logits = g.scoped(mixed_label, |g| g.bmm(qh, kh, true));
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax_last(logits);
    let ctx = g.scoped(mixed_label, |g| g.bmm(attn, vh, false));
    let ctx = g.reshape(ctx, &[b, heads, nq, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    g.reshape(ctx, &[b, nq, d])
}

// --------------------------------------------------- bi-direction attention

/// One bi-direction attention module for a feature map with `c` channels.
///
/// When `c != d`, the features pass through an input projection before the
/// exchange and the feature delta is projected back afterwards; both count
/// under `bi_attn.feat_proj` (the published four-term cost assumes features
/// already at width `d`).
pub struct BiDirectionAttention {
    pub c: usize,
    pub d: usize,
    pub heads: usize,
    feat_in: Option<Linear>,
    feat_out: Option<Linear>,
    norm_q1: LayerNorm,
    norm_f1: LayerNorm,
    q1: Linear,
    k1: Linear,
    v1: Linear,
    out1: Linear,
    norm_q2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    norm_q3: LayerNorm,
    sq: Linear,
    sk: Linear,
    sv: Linear,
    sout: Linear,
    norm_t: LayerNorm,
    transition: Linear,
    norm_f2: LayerNorm,
    norm_t2: LayerNorm,
    fq: Linear,
    fk: Linear,
    fv: Linear,
    fout: Linear,
}

impl BiDirectionAttention {
    pub fn new(
        store: &mut ParamStore,
        scope: &str,
        c: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "bi-attention: d={d} not divisible by heads={heads}"
            )));
        }
        let proj = c != d;
        Ok(BiDirectionAttention {
            c,
            d,
            heads,
            feat_in: proj.then(|| Linear::new(store, &format!("{scope}.feat_in"), c, d, true)),
            feat_out: proj.then(|| Linear::new(store, &format!("{scope}.feat_out"), d, c, true)),
            norm_q1: LayerNorm::new(store, &format!("{scope}.norm_q1"), d),
            norm_f1: LayerNorm::new(store, &format!("{scope}.norm_f1"), d),
            q1: Linear::new(store, &format!("{scope}.cross_qf.q"), d, d, true),
            k1: Linear::new(store, &format!("{scope}.cross_qf.k"), d, d, true),
            v1: Linear::new(store, &format!("{scope}.cross_qf.v"), d, d, true),
            out1: Linear::new(store, &format!("{scope}.cross_qf.out"), d, d, true),
            norm_q2: LayerNorm::new(store, &format!("{scope}.norm_q2"), d),
            mlp1: Linear::new(store, &format!("{scope}.mlp.lin1"), d, 4 * d, true),
            mlp2: Linear::new(store, &format!("{scope}.mlp.lin2"), 4 * d, d, true),
            norm_q3: LayerNorm::new(store, &format!("{scope}.norm_q3"), d),
            sq: Linear::new(store, &format!("{scope}.self_attn.q"), d, d, true),
            sk: Linear::new(store, &format!("{scope}.self_attn.k"), d, d, true),
            sv: Linear::new(store, &format!("{scope}.self_attn.v"), d, d, true),
            sout: Linear::new(store, &format!("{scope}.self_attn.out"), d, d, true),
            norm_t: LayerNorm::new(store, &format!("{scope}.norm_t"), d),
            transition: Linear::new(store, &format!("{scope}.transition"), d, d, true),
            norm_f2: LayerNorm::new(store, &format!("{scope}.norm_f2"), d),
            norm_t2: LayerNorm::new(store, &format!("{scope}.norm_t2"), d),
            fq: Linear::new(store, &format!("{scope}.cross_fq.q"), d, d, true),
            fk: Linear::new(store, &format!("{scope}.cross_fq.k"), d, d, true),
            fv: Linear::new(store, &format!("{scope}.cross_fq.v"), d, d, true),
            fout: Linear::new(store, &format!("{scope}.cross_fq.out"), d, d, true),
        })
    }

    /// `queries [b,n,d]`, `features [b,c,h,w]` -> (updated queries, updated
    /// features), same shapes.
    pub fn forward(&self, g: &mut Graph, queries: Var, features: Var) -> Result<(Var, Var)> {
        let qs = g.shape(queries).to_vec();
        let fs = g.shape(features).to_vec();
        if qs.len() != 3 || qs[2] != self.d {
            return Err(Error::Shape(format!(
                "bi-attention queries must be [b,n,{}], got {qs:?}",
                self.d
            )));
        }
        if fs.len() != 4 || fs[1] != self.c || fs[0] != qs[0] {
            return Err(Error::Shape(format!(
                "bi-attention features must be [{},{},h,w], got {fs:?}",
                qs[0], self.c
            )));
        }
        let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        Ok(g.scoped(labels::EXTRA, |g| {
            // Feature tokens at width d.
            let flat = g.reshape(features, &[b, c, h * w]);
            let ftok = g.permute(flat, &[0, 2, 1]);
            let x = match &self.feat_in {
                Some(p) => g.scoped(labels::FEAT_PROJ, |g| p.forward(g, ftok)),
                None => ftok,
            };
            // (1) cross-attention, queries attend to features.
            let qn = self.norm_q1.forward(g, queries);
            let xn = self.norm_f1.forward(g, x);
            let qq = g.scoped(labels::ND2, |g| self.q1.forward(g, qn));
            let kk = g.scoped(labels::HWD2, |g| self.k1.forward(g, xn));
            let vv = g.scoped(labels::HWD2, |g| self.v1.forward(g, xn));
            let ctx1 = mh_ctx(g, qq, kk, vv, self.heads, labels::NHWD);
            let o1 = g.scoped(labels::ND2, |g| self.out1.forward(g, ctx1));
            let q1r = g.add(queries, o1);
            // (2) point-wise MLP on the queries.
            let qn2 = self.norm_q2.forward(g, q1r);
            let hmid = g.scoped(labels::ND2, |g| self.mlp1.forward(g, qn2));
            let hmid = g.silu(hmid);
            let hout = g.scoped(labels::ND2, |g| self.mlp2.forward(g, hmid));
            let q2r = g.add(q1r, hout);
            // (3) self-attention on the queries -> the updated query output.
            let qn3 = self.norm_q3.forward(g, q2r);
            let aq = g.scoped(labels::ND2, |g| self.sq.forward(g, qn3));
            let ak = g.scoped(labels::ND2, |g| self.sk.forward(g, qn3));
            let av = g.scoped(labels::ND2, |g| self.sv.forward(g, qn3));
            let ctx3 = mh_ctx(g, aq, ak, av, self.heads, labels::N2D);
            let o3 = g.scoped(labels::ND2, |g| self.sout.forward(g, ctx3));
            let q_out = g.add(q2r, o3);
            // Query transition feeding the feature update.
            let tn = self.norm_t.forward(g, q_out);
            let tlin = g.scoped(labels::ND2, |g| self.transition.forward(g, tn));
            let t = g.add(q_out, tlin);
            // (4) cross-attention, features attend to the transitioned
            // queries -> the updated feature output.
            let xn2 = self.norm_f2.forward(g, x);
            let tn2 = self.norm_t2.forward(g, t);
            let xq = g.scoped(labels::HWD2, |g| self.fq.forward(g, xn2));
            let tk = g.scoped(labels::ND2, |g| self.fk.forward(g, tn2));
            let tv = g.scoped(labels::ND2, |g| self.fv.forward(g, tn2));
            let ctx4 = mh_ctx(g, xq, tk, tv, self.heads, labels::NHWD);
            let o4 = g.scoped(labels::HWD2, |g| self.fout.forward(g, ctx4));
            let delta = match &self.feat_out {
                Some(p) => g.scoped(labels::FEAT_PROJ, |g| p.forward(g, o4)),
                None => o4,
            };
            let dmap = g.permute(delta, &[0, 2, 1]);
            let dmap = g.reshape(dmap, &[b, c, h, w]);
            let f_out = g.add(features, dmap);
            (q_out, f_out)
        }))
    }
}

// -------------------------------------------------- deformable attention

/// Multi-scale deformable attention over a joint token set built from a
/// dense query map plus one or more feature maps.
///
/// Every spatial location of every level becomes a query whose reference
/// point is its own normalized centre; per head, level, and point, an
/// offset head predicts where to sample each level's value map (bilinear,
/// zero-padded) and a weight head mixes the samples with a softmax over
/// `levels × points`. Each output location costs O(heads·levels·points),
/// so the whole op is linear in total pixel count.
pub struct DeformableFusion {
    pub d: usize,
    pub heads: usize,
    pub points: usize,
    pub channels: Vec<usize>,
    in_proj: Vec<Linear>,
    out_proj: Vec<Linear>,
    norm: LayerNorm,
    level_embed: Param,
    offset_head: Linear,
    weight_head: Linear,
    output: Linear,
}

impl DeformableFusion {
    /// `channels[0]` is the dense map's width; the rest are stage widths.
    pub fn new(
        store: &mut ParamStore,
        scope: &str,
        channels: &[usize],
        d: usize,
        heads: usize,
        points: usize,
    ) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::Config(
                "deformable fusion needs the dense map plus at least one stage".into(),
            ));
        }
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "deformable fusion: d={d} not divisible by heads={heads}"
            )));
        }
        if points == 0 {
            return Err(Error::Config("deformable fusion: points >= 1".into()));
        }
        let levels = channels.len();
        let in_proj = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(store, &format!("{scope}.level{l}.in_proj"), c, d, true))
            .collect();
        let out_proj = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(store, &format!("{scope}.level{l}.out_proj"), d, c, true))
            .collect();
        Ok(DeformableFusion {
            d,
            heads,
            points,
            channels: channels.to_vec(),
            in_proj,
            out_proj,
            norm: LayerNorm::new(store, &format!("{scope}.norm"), d),
            level_embed: store.make(
                &format!("{scope}.level_embed"),
                &[levels, d],
                Init::Normal(0.02),
            ),
            // Zero-init: offsets start at the reference points and the
            // softmax mixes all samples uniformly.
            offset_head: Linear::with_init(
                store,
                &format!("{scope}.offset_head"),
                d,
                heads * levels * points * 2,
                true,
                Init::Zeros,
            ),
            weight_head: Linear::with_init(
                store,
                &format!("{scope}.weight_head"),
                d,
                heads * levels * points,
                true,
                Init::Zeros,
            ),
            output: Linear::new(store, &format!("{scope}.output"), d, d, true),
        })
    }

    /// `maps[0]` is the dense query map; the rest are stage maps. Returns
    /// the updated maps in the same order and shapes.
    pub fn forward(&self, g: &mut Graph, maps: &[Var]) -> Result<Vec<Var>> {
        if maps.len() != self.channels.len() {
            return Err(Error::Shape(format!(
                "deformable fusion built for {} levels, got {}",
                self.channels.len(),
                maps.len()
            )));
        }
        let mut dims: Vec<(usize, usize)> = Vec::with_capacity(maps.len());
        let mut batch = 0usize;
        for (l, &m) in maps.iter().enumerate() {
            let s = g.shape(m).to_vec();
            if s.len() != 4 || s[1] != self.channels[l] {
                return Err(Error::Shape(format!(
                    "level {l} expects [b,{},h,w], got {s:?}",
                    self.channels[l]
                )));
            }
            if l == 0 {
                batch = s[0];
            } else if s[0] != batch {
                return Err(Error::Shape("deformable fusion: batch mismatch".into()));
            }
            dims.push((s[2], s[3]));
        }
        let (b, d, m, kpts) = (batch, self.d, self.heads, self.points);
        let levels = maps.len();
        let dh = d / m;
        Ok(g.scoped(labels::DEFORM, |g| {
            // Per-level tokens at width d.
            let mut toks = Vec::with_capacity(levels);
            for (l, &mp) in maps.iter().enumerate() {
                let (h, w) = dims[l];
                let flat = g.reshape(mp, &[b, self.channels[l], h * w]);
                let t = g.permute(flat, &[0, 2, 1]);
                toks.push(self.in_proj[l].forward(g, t));
            }
            // Joint query sequence with level embeddings.
            let le = g.param(&self.level_embed);
            let mut parts = Vec::with_capacity(levels);
            for (l, &t) in toks.iter().enumerate() {
                let row = g.narrow(le, 0, l, 1);
                let row = g.reshape(row, &[d]);
                parts.push(g.add_bias_last(t, row));
            }
            let tokens = g.concat(1, &parts);
            let n_total: usize = dims.iter().map(|&(h, w)| h * w).sum();
            let qn = self.norm.forward(g, tokens);
            let offsets = self.offset_head.forward(g, qn);
            let wlogits = self.weight_head.forward(g, qn);
            let wl = g.reshape(wlogits, &[b, n_total, m, levels * kpts]);
            let wsm = g.softmax_last(wl);
            let wflat = g.reshape(wsm, &[b, n_total, m * levels * kpts]);
            // Value maps per level.
            let vmaps: Vec<Var> = toks
                .iter()
                .enumerate()
                .map(|(l, &t)| {
                    let (h, w) = dims[l];
                    let tt = g.permute(t, &[0, 2, 1]);
                    g.reshape(tt, &[b, d, h, w])
                })
                .collect();
            // Reference points: each token's own normalized centre.
            let mut refs = ArrayD::zeros(IxDyn(&[b, n_total, 2]));
            {
                let mut base = 0;
                for &(h, w) in &dims {
                    for i in 0..h {
                        for j in 0..w {
                            for bi in 0..b {
                                refs[IxDyn(&[bi, base + i * w + j, 0])] =
                                    (j as f64 + 0.5) / w as f64;
                                refs[IxDyn(&[bi, base + i * w + j, 1])] =
                                    (i as f64 + 0.5) / h as f64;
                            }
                        }
                    }
                    base += h * w;
                }
            }
            let refs = g.constant(refs);
            // Sample, weight, and mix per head.
            let mut head_outs = Vec::with_capacity(m);
            for mi in 0..m {
                let mut acc: Option<Var> = None;
                for l2 in 0..levels {
                    let (h2, w2) = dims[l2];
                    let vslice = g.narrow(vmaps[l2], 1, mi * dh, dh);
                    for k in 0..kpts {
                        let oi = ((mi * levels + l2) * kpts + k) * 2;
                        let off = g.narrow(offsets, 2, oi, 2);
                        let ox = g.narrow(off, 2, 0, 1);
                        let ox = g.scale(ox, 1.0 / w2 as f64);
                        let oy = g.narrow(off, 2, 1, 1);
                        let oy = g.scale(oy, 1.0 / h2 as f64);
                        let on = g.concat(2, &[ox, oy]);
                        let coords = g.add(refs, on);
                        let s = g.bilinear_points(vslice, coords);
                        let wi = (mi * levels + l2) * kpts + k;
                        let wv = g.narrow(wflat, 2, wi, 1);
                        let wv = g.permute(wv, &[0, 2, 1]);
                        let wb = g.broadcast_axis1(wv, dh);
                        let contrib = g.mul(s, wb);
                        acc = Some(match acc {
                            Some(a) => g.add(a, contrib),
                            None => contrib,
                        });
                    }
                }
                head_outs.push(acc.expect("at least one level and point"));
            }
            let cat = g.concat(1, &head_outs);
            let catp = g.permute(cat, &[0, 2, 1]);
            let mixed = self.output.forward(g, catp);
            // Project back per level and apply residually.
            let mut outs = Vec::with_capacity(levels);
            let mut base = 0;
            for (l, &mp) in maps.iter().enumerate() {
                let (h, w) = dims[l];
                let part = g.narrow(mixed, 1, base, h * w);
                base += h * w;
                let part = self.out_proj[l].forward(g, part);
                let part = g.permute(part, &[0, 2, 1]);
                let dmap = g.reshape(part, &[b, self.channels[l], h, w]);
                outs.push(g.add(mp, dmap));
            }
            outs
        }))
    }
}

// ------------------------------------------------------------ the engine

/// Query-engine hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct QueryEngineConfig {
    /// Shared sparse-query dimension.
    pub d: usize,
    pub heads: usize,
    /// Sampling points per (head, level) in deformable fusion.
    pub points: usize,
    pub n_encoder: usize,
    pub n_fpn: usize,
    pub n_decoder: usize,
    /// Identity bypass when false (ablation switch).
    pub enabled: bool,
}

impl Default for QueryEngineConfig {
    fn default() -> Self {
        QueryEngineConfig {
            d: 256,
            heads: 8,
            points: 4,
            n_encoder: 4,
            n_fpn: 4,
            n_decoder: 1,
            enabled: true,
        }
    }
}

impl QueryEngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "query dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.points == 0 {
            return Err(Error::Config("deformable points >= 1".into()));
        }
        if self.n_encoder == 0 || self.n_fpn == 0 || self.n_decoder == 0 {
            return Err(Error::Config("query counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything the encoder pass of the query design produces.
pub struct EncoderQueryRun {
    pub pyramid: FeaturePyramid,
    /// Updated `[b, n, d]` encoder queries.
    pub q_encoder: Var,
    pub q_dense: DenseQueryMap,
}

/// Owns the per-stage bi-direction attention and deformable fusion modules
/// used inside the image encoder (parameters under `query_engine.*`).
pub struct QueryEngine {
    pub config: QueryEngineConfig,
    sparse: Vec<BiDirectionAttention>,
    dense: Vec<DeformableFusion>,
}

impl QueryEngine {
    pub fn new(
        store: &mut ParamStore,
        enc: &crate::backbone::EncoderConfig,
        config: QueryEngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut sparse = Vec::with_capacity(4);
        for (i, &c) in enc.stage_channels.iter().enumerate() {
            sparse.push(BiDirectionAttention::new(
                store,
                &format!("query_engine.sparse.stage{}", i + 1),
                c,
                config.d,
                config.heads,
            )?);
        }
        let mut dense = Vec::with_capacity(3);
        for i in 1..4 {
            dense.push(DeformableFusion::new(
                store,
                &format!("query_engine.dense.stage{}", i + 1),
                &[enc.stage_channels[0], enc.stage_channels[i]],
                config.d,
                config.heads,
                config.points,
            )?);
        }
        Ok(QueryEngine {
            config,
            sparse,
            dense,
        })
    }

    /// The encoder loop: per stage, bi-direction attention with the sparse
    /// encoder queries, then (from stage 2 on) deformable fusion between
    /// the dense map and the stage; the dense map starts as a copy of the
    /// updated first stage.
    pub fn run(
        &self,
        g: &mut Graph,
        encoder: &Encoder,
        images: Var,
        q_encoder: &SparseQuerySet,
    ) -> Result<EncoderQueryRun> {
        let b = g.shape(images)[0];
        let mut q = q_encoder.batched(g, b);
        if !self.config.enabled {
            let pyramid = encoder.encode(g, images)?;
            let q_dense = DenseQueryMap::init(g, pyramid.stages[0]);
            return Ok(EncoderQueryRun {
                pyramid,
                q_encoder: q,
                q_dense,
            });
        }
        let mut dense: Option<DenseQueryMap> = None;
        let pyramid = {
            let q_ref = &mut q;
            let dense_ref = &mut dense;
            let mut hook = |g: &mut Graph, i: usize, feat: Var| -> Result<Var> {
                let (q_new, f_new) = self.sparse[i].forward(g, *q_ref, feat)?;
                *q_ref = q_new;
                if i == 0 {
                    *dense_ref = Some(DenseQueryMap::init(g, f_new));
                    Ok(f_new)
                } else {
                    let dmap = dense_ref.as_ref().expect("dense init at stage 1").map;
                    let fused = self.dense[i - 1].forward(g, &[dmap, f_new])?;
                    *dense_ref = Some(DenseQueryMap {
                        map: fused[0],
                        channels: dense_ref.as_ref().unwrap().channels,
                    });
                    Ok(fused[1])
                }
            };
            encoder.encode_with(g, images, Some(&mut hook))?
        };
        Ok(EncoderQueryRun {
            pyramid,
            q_encoder: q,
            q_dense: dense.expect("four stages ran"),
        })
    }
}
