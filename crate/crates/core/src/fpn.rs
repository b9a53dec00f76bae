//! Tiny feature pyramid with top-down aggregation, sparse-query interaction
//! over the fused levels, the two early mask heads, and dense-prompt
//! injection.
//!
//! The pyramid projects all four encoder stages to one fusion width with
//! 1×1 convolutions, aggregates top-down by nearest upsampling and
//! addition, and smooths every level with a shared 3×3 convolution. The
//! concatenated encoder and pyramid query tokens then visit each level in
//! top-down order through bi-direction attention, updating both sides.
//!
//! Two light heads read out masks before the decoder runs: one from the
//! dense query map against the first encoder token, one from the
//! highest-resolution fused level against the first pyramid token. The
//! latter prediction can be folded back into every level as a dense
//! prompt.

use crate::backbone::{EncoderConfig, FeaturePyramid};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Mlp, ParamStore};
use crate::query::{BiDirectionAttention, DenseQueryMap};
use crate::{Error, Result};

/// Which head produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionStage {
    EarlyEncoder,
    EarlyFpn,
    Final,
}

impl PredictionStage {
    pub fn name(self) -> &'static str {
        match self {
            PredictionStage::EarlyEncoder => "early_encoder",
            PredictionStage::EarlyFpn => "early_fpn",
            PredictionStage::Final => "final",
        }
    }
}

/// Single-channel mask logits together with the head that produced them
/// and the logit threshold at which they binarize (0 ⇒ probability 0.5).
#[derive(Debug, Clone, Copy)]
pub struct MaskPrediction {
    pub logits: Var,
    pub stage: PredictionStage,
    pub threshold: f64,
}

impl MaskPrediction {
    /// Wraps `[b,1,h,w]` logits, rejecting non-finite values outright so a
    /// diverging model fails loudly at the head rather than in a metric.
    pub fn new(g: &Graph, logits: Var, stage: PredictionStage) -> Result<Self> {
        let s = g.shape(logits);
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!(
                "mask logits expect [b,1,h,w], got {s:?}"
            )));
        }
        if !g.value(logits).iter().all(|v| v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite logits in {} prediction",
                stage.name()
            )));
        }
        Ok(MaskPrediction {
            logits,
            stage,
            threshold: 0.0,
        })
    }

    /// Spatial size of the logits.
    pub fn resolution(&self, g: &Graph) -> (usize, usize) {
        let s = g.shape(self.logits);
        (s[2], s[3])
    }

    /// Binary mask per batch element: `logits > threshold`.
    pub fn binarize(&self, g: &Graph) -> Vec<ndarray::Array2<bool>> {
        let s = g.shape(self.logits).to_vec();
        let v = g.value(self.logits);
        (0..s[0])
            .map(|bi| {
                ndarray::Array2::from_shape_fn((s[2], s[3]), |(i, j)| {
                    v[ndarray::IxDyn(&[bi, 0, i, j])] > self.threshold
                })
            })
            .collect()
    }
}

/// Four aggregated maps at the encoder's stage resolutions, all at the
/// fusion width, ordered highest resolution first.
pub struct FusedPyramid {
    pub levels: [Var; 4],
    pub prompt_injected: bool,
}

impl FusedPyramid {
    pub fn shapes(&self, g: &Graph) -> [Vec<usize>; 4] {
        [
            g.shape(self.levels[0]).to_vec(),
            g.shape(self.levels[1]).to_vec(),
            g.shape(self.levels[2]).to_vec(),
            g.shape(self.levels[3]).to_vec(),
        ]
    }

    /// Highest-resolution level — the map early heads and the decoder read.
    pub fn top(&self) -> Var {
        self.levels[0]
    }
}

/// Configuration for the fusion pyramid and its heads.
#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    /// Channel width every level is projected to.
    pub fusion_channels: usize,
    /// Sparse-query token dimension.
    pub d: usize,
    /// Attention heads in the per-level query interaction.
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            fusion_channels: 256,
            d: 256,
            heads: 8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_channels == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// The pyramid, its query interaction, both early heads, and the prompt
/// encoder.
pub struct FusionFpn {
    pub config: FusionConfig,
    dense_channels: usize,
    laterals: Vec<Conv2d>,
    smooth: Conv2d,
    attn: Vec<BiDirectionAttention>,
    enc_head_conv: Conv2d,
    enc_head_mlp: Mlp,
    fpn_head_mlp: Mlp,
    prompt_conv1: Conv2d,
    prompt_conv2: Conv2d,
}

impl FusionFpn {
    pub fn new(
        store: &mut ParamStore,
        encoder: &EncoderConfig,
        config: FusionConfig,
    ) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        let f = config.fusion_channels;
        let m = encoder.stage_channels[0];
        let laterals = (0..4)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("fpn.lateral{}", i + 1),
                    encoder.stage_channels[i],
                    f,
                    1,
                    1,
                    0,
                    true,
                )
            })
            .collect();
        let smooth = Conv2d::new(store, "fpn.smooth", f, f, 3, 1, 1, true);
        let attn = (0..4)
            .map(|i| {
                BiDirectionAttention::new(
                    store,
                    &format!("fpn.attn.level{}", i + 1),
                    f,
                    config.d,
                    config.heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionFpn {
            config,
            dense_channels: m,
            laterals,
            smooth,
            attn,
            enc_head_conv: Conv2d::new(store, "fpn.early_encoder.conv", m, m, 3, 1, 1, true),
            enc_head_mlp: Mlp::new(store, "fpn.early_encoder.mlp", config.d, config.d, m),
            fpn_head_mlp: Mlp::new(store, "fpn.early_fpn.mlp", config.d, config.d, f),
            prompt_conv1: Conv2d::new(store, "fpn.prompt.conv1", 1, f, 3, 1, 1, true),
            prompt_conv2: Conv2d::new(store, "fpn.prompt.conv2", f, f, 3, 1, 1, true),
        })
    }

    /// The plain pyramid: lateral 1×1 projections, top-down nearest
    /// upsample + add, shared 3×3 smoothing on every level. No queries.
    pub fn tiny_forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<FusedPyramid> {
        let lat: Vec<Var> = g.scoped("fpn", |g| {
            pyramid
                .stages
                .iter()
                .enumerate()
                .map(|(i, &s)| self.laterals[i].forward(g, s))
                .collect()
        });
        for (i, &l) in lat.iter().enumerate() {
            let s = g.shape(l).to_vec();
            if s[1] != self.config.fusion_channels {
                return Err(Error::Shape(format!(
                    "lateral {i} produced {} channels",
                    s[1]
                )));
            }
        }
        Ok(g.scoped("fpn", |g| {
            let mut levels = [lat[0], lat[1], lat[2], lat[3]];
            for i in (0..3).rev() {
                let up = g.nearest_upsample(levels[i + 1], 2);
                levels[i] = g.add(levels[i], up);
            }
            for l in levels.iter_mut() {
                *l = self.smooth.forward(g, *l);
            }
            FusedPyramid {
                levels,
                prompt_injected: false,
            }
        }))
    }

    /// Full forward: tiny pyramid, then the concatenated query tokens
    /// (`q_encoder ⊕ q_fpn`) interact with each level from the lowest
    /// resolution upward, refining both the tokens and the levels.
    /// Returns the refined pyramid and the combined tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        pyramid: &FeaturePyramid,
        q_encoder: Var,
        q_fpn: Var,
    ) -> Result<(FusedPyramid, Var)> {
        for (name, q) in [("encoder", q_encoder), ("fpn", q_fpn)] {
            let s = g.shape(q);
            if s.len() != 3 || s[2] != self.config.d {
                return Err(Error::Shape(format!(
                    "{name} queries expect [b,n,{}], got {s:?}",
                    self.config.d
                )));
            }
        }
        let mut fused = self.tiny_forward(g, pyramid)?;
        let mut q_all = g.concat(1, &[q_encoder, q_fpn]);
        for i in (0..4).rev() {
            let (q2, f2) = self.attn[i].forward(g, q_all, fused.levels[i])?;
            q_all = q2;
            fused.levels[i] = f2;
        }
        Ok((fused, q_all))
    }

    /// Early mask from the encoder stage: a 3×3 convolution turns the dense
    /// query map into mask features, a two-layer MLP turns the first
    /// encoder token into their per-channel weights, and the logit at each
    /// location is their inner product.
    pub fn early_decode_encoder(
        &self,
        g: &mut Graph,
        q_dense: &DenseQueryMap,
        q_encoder: Var,
    ) -> Result<MaskPrediction> {
        if q_dense.channels != self.dense_channels {
            return Err(Error::Shape(format!(
                "dense map has {} channels, head built for {}",
                q_dense.channels, self.dense_channels
            )));
        }
        let logits = g.scoped("heads.early_encoder", |g| {
            let feat = self.enc_head_conv.forward(g, q_dense.map);
            let tok = g.narrow(q_encoder, 1, 0, 1);
            let wvec = self.enc_head_mlp.forward(g, tok);
            dot_head(g, wvec, feat)
        });
        MaskPrediction::new(g, logits, PredictionStage::EarlyEncoder)
    }

    /// Early mask from the pyramid stage: the highest-resolution fused
    /// level serves directly as mask features; the first pyramid token
    /// (first row of the second query group) supplies the weights.
    pub fn early_decode_fpn(
        &self,
        g: &mut Graph,
        fused: &FusedPyramid,
        q_fpn: Var,
    ) -> Result<MaskPrediction> {
        let s = g.shape(q_fpn);
        if s.len() != 3 || s[2] != self.config.d {
            return Err(Error::Shape(format!(
                "fpn queries expect [b,n,{}], got {s:?}",
                self.config.d
            )));
        }
        let logits = g.scoped("heads.early_fpn", |g| {
            let tok = g.narrow(q_fpn, 1, 0, 1);
            let wvec = self.fpn_head_mlp.forward(g, tok);
            dot_head(g, wvec, fused.top())
        });
        MaskPrediction::new(g, logits, PredictionStage::EarlyFpn)
    }

    /// Folds the pyramid-stage prediction back into every level: a
    /// two-convolution block lifts the single-channel logits to the fusion
    /// width, and the embedding is added to each level after
    /// nearest-neighbour downsampling to its resolution.
    pub fn inject_dense_prompt(
        &self,
        g: &mut Graph,
        pred: &MaskPrediction,
        fused: FusedPyramid,
    ) -> Result<FusedPyramid> {
        if fused.prompt_injected {
            return Err(Error::Config(
                "dense prompt already injected into this pyramid".into(),
            ));
        }
        if pred.stage != PredictionStage::EarlyFpn {
            return Err(Error::Config(format!(
                "dense prompt expects the early_fpn prediction, got {}",
                pred.stage.name()
            )));
        }
        let top = g.shape(fused.top()).to_vec();
        let ps = g.shape(pred.logits).to_vec();
        if ps[0] != top[0] || ps[2] != top[2] || ps[3] != top[3] {
            return Err(Error::Shape(format!(
                "prompt logits {ps:?} do not match top level {top:?}"
            )));
        }
        Ok(g.scoped("heads.prompt", |g| {
            let e = self.prompt_conv1.forward(g, pred.logits);
            let e = g.silu(e);
            let embed = self.prompt_conv2.forward(g, e);
            let mut levels = fused.levels;
            for l in levels.iter_mut() {
                let s = g.shape(*l).to_vec();
                let p = if s[2] == top[2] && s[3] == top[3] {
                    embed
                } else {
                    g.nearest_resize(embed, s[2], s[3])
                };
                *l = g.add(*l, p);
            }
            FusedPyramid {
                levels,
                prompt_injected: true,
            }
        }))
    }
}

/// Per-location inner product between a `[b,1,c]` weight vector and a
/// `[b,c,h,w]` feature map, producing `[b,1,h,w]` logits.
fn dot_head(g: &mut Graph, wvec: Var, feat: Var) -> Var {
    let s = g.shape(feat).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = g.reshape(feat, &[b, c, h * w]);
    let prod = g.bmm(wvec, flat, false);
    g.reshape(prod, &[b, 1, h, w])
}
