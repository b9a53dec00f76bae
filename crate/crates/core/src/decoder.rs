//! Mask decoder: stacked two-way transformer blocks over the concatenated
//! sparse queries and the highest-resolution fused level, followed by a
//! dot-product mask head.
//!
//! Each block runs token self-attention, token→image cross-attention, a
//! token MLP, and image→token cross-attention, all with residuals and
//! post-normalization; cross-attention compresses to half width
//! internally. Sinusoidal 2-D positional encodings are added to the image
//! tokens on every cross-attention. After the stack (plus one final
//! token→image attention) every token except the decoder query is
//! discarded: mask features come from two 3×3 convolutions over the
//! attended image map, a three-layer hypernetwork turns the decoder token
//! into per-channel weights, and the logit at each location is their inner
//! product, bilinearly resized to the requested output resolution.

use crate::fpn::{FusedPyramid, MaskPrediction, PredictionStage};
use crate::graph::{Graph, Var};
use crate::nn::{sincos_pos_2d, Attention, Conv2d, LayerNorm, Mlp, MlpN, ParamStore};
use crate::{Error, Result};

/// Decoder hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    /// Number of two-way blocks.
    pub depth: usize,
    /// Token dimension; must match the query dimension and the fused
    /// pyramid's channel width.
    pub d: usize,
    /// Token MLP expansion factor.
    pub mlp_ratio: usize,
    /// Attention heads.
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 2,
            d: 256,
            mlp_ratio: 8,
            heads: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::Config("decoder mlp_ratio must be at least 1".into()));
        }
        if self.d % 8 != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} must be divisible by 8 (mask features use d/8 channels)",
                self.d
            )));
        }
        if self.d % self.heads != 0 || (self.d / 2) % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} and its half must divide into {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_ti: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_it: Attention,
    norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new(store: &mut ParamStore, scope: &str, d: usize, mlp_ratio: usize, heads: usize) -> Self {
        TwoWayBlock {
            self_attn: Attention::new(store, &format!("{scope}.self_attn"), d, heads),
            norm1: LayerNorm::new(store, &format!("{scope}.norm1"), d),
            cross_ti: Attention::with_internal(store, &format!("{scope}.cross_ti"), d, d / 2, heads),
            norm2: LayerNorm::new(store, &format!("{scope}.norm2"), d),
            mlp: Mlp::new(store, &format!("{scope}.mlp"), d, d * mlp_ratio, d),
            norm3: LayerNorm::new(store, &format!("{scope}.norm3"), d),
            cross_it: Attention::with_internal(store, &format!("{scope}.cross_it"), d, d / 2, heads),
            norm4: LayerNorm::new(store, &format!("{scope}.norm4"), d),
        }
    }
}

/// Intermediate state handed back by [`MaskDecoder::decode_detailed`] so
/// diagnostics can inspect what fed the mask head.
pub struct DecodeState {
    /// All tokens after the final token→image attention, `[b,n,d]`.
    pub tokens: Var,
    /// Mask features, `[b,d/8,h,w]`.
    pub mask_features: Var,
    /// The finished prediction.
    pub prediction: MaskPrediction,
}

pub struct MaskDecoder {
    pub config: DecoderConfig,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    feat_conv1: Conv2d,
    feat_conv2: Conv2d,
    hyper: MlpN,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let blocks = (0..config.depth)
            .map(|i| {
                TwoWayBlock::new(
                    store,
                    &format!("decoder.block{i}"),
                    d,
                    config.mlp_ratio,
                    config.heads,
                )
            })
            .collect();
        Ok(MaskDecoder {
            config,
            blocks,
            final_attn: Attention::with_internal(store, "decoder.final_attn", d, d / 2, config.heads),
            norm_final: LayerNorm::new(store, "decoder.norm_final", d),
            feat_conv1: Conv2d::new(store, "decoder.mask_feat.conv1", d, d / 4, 3, 1, 1, true),
            feat_conv2: Conv2d::new(store, "decoder.mask_feat.conv2", d / 4, d / 8, 3, 1, 1, true),
            hyper: MlpN::new(store, "decoder.hyper", &[d, d, d, d / 8]),
        })
    }

    /// Dot-product head: the trailing `n_dec` tokens are mapped through the
    /// hypernetwork and multiplied into the mask features per location.
    /// Only those trailing tokens influence the result.
    pub fn mask_from_state(
        &self,
        g: &mut Graph,
        tokens: Var,
        mask_features: Var,
        n_dec: usize,
    ) -> Var {
        let nt = g.shape(tokens)[1];
        let s = g.shape(mask_features).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let dec = g.narrow(tokens, 1, nt - n_dec, n_dec);
        let weights = self.hyper.forward(g, dec);
        let flat = g.reshape(mask_features, &[b, c, h * w]);
        let prod = g.bmm(weights, flat, false);
        g.reshape(prod, &[b, n_dec, h, w])
    }

    /// Runs the full decode and returns the prediction along with the
    /// post-attention tokens and mask features.
    pub fn decode_detailed(
        &self,
        g: &mut Graph,
        fused: &FusedPyramid,
        q_encoder: Var,
        q_fpn: Var,
        q_decoder: Var,
        out_hw: (usize, usize),
    ) -> Result<DecodeState> {
        let d = self.config.d;
        let ts = g.shape(fused.top()).to_vec();
        if ts[1] != d {
            return Err(Error::Shape(format!(
                "decoder built for {d}-channel features, fused level has {}",
                ts[1]
            )));
        }
        let (b, h, w) = (ts[0], ts[2], ts[3]);
        for (name, q) in [("encoder", q_encoder), ("fpn", q_fpn), ("decoder", q_decoder)] {
            let s = g.shape(q);
            if s.len() != 3 || s[2] != d || s[0] != b {
                return Err(Error::Shape(format!(
                    "{name} queries expect [{b},n,{d}], got {s:?}"
                )));
            }
        }
        let n_dec = g.shape(q_decoder)[1];
        if n_dec != 1 {
            return Err(Error::Shape(format!(
                "the final mask reads one decoder token, got {n_dec}"
            )));
        }
        let (tokens, feats) = g.scoped("decoder", |g| {
            let mut tokens = g.concat(1, &[q_encoder, q_fpn, q_decoder]);
            let flat = g.reshape(fused.top(), &[b, d, h * w]);
            let mut img = g.permute(flat, &[0, 2, 1]);
            let pe_map = g.constant(sincos_pos_2d(d, h, w));
            let pe_flat = g.reshape(pe_map, &[d, h * w]);
            let pe_seq = g.permute(pe_flat, &[1, 0]);
            let pe = g.broadcast_batch(pe_seq, b);
            for blk in &self.blocks {
                let att = blk.self_attn.forward(g, tokens, tokens, tokens);
                let sum = g.add(tokens, att);
                tokens = blk.norm1.forward(g, sum);
                let kpe = g.add(img, pe);
                let att = blk.cross_ti.forward(g, tokens, kpe, img);
                let sum = g.add(tokens, att);
                tokens = blk.norm2.forward(g, sum);
                let ff = blk.mlp.forward(g, tokens);
                let sum = g.add(tokens, ff);
                tokens = blk.norm3.forward(g, sum);
                let qpe = g.add(img, pe);
                let att = blk.cross_it.forward(g, qpe, tokens, tokens);
                let sum = g.add(img, att);
                img = blk.norm4.forward(g, sum);
            }
            let kpe = g.add(img, pe);
            let att = self.final_attn.forward(g, tokens, kpe, img);
            let sum = g.add(tokens, att);
            tokens = self.norm_final.forward(g, sum);
            let img_t = g.permute(img, &[0, 2, 1]);
            let img_map = g.reshape(img_t, &[b, d, h, w]);
            let f1 = self.feat_conv1.forward(g, img_map);
            let f1 = g.silu(f1);
            let feats = self.feat_conv2.forward(g, f1);
            (tokens, feats)
        });
        let logits = g.scoped("decoder", |g| {
            let raw = self.mask_from_state(g, tokens, feats, n_dec);
            if (h, w) == out_hw {
                raw
            } else {
                g.bilinear_resize(raw, out_hw.0, out_hw.1)
            }
        });
        let prediction = MaskPrediction::new(g, logits, PredictionStage::Final)?;
        Ok(DecodeState {
            tokens,
            mask_features: feats,
            prediction,
        })
    }

    /// Final mask at `out_hw` resolution.
    pub fn decode(
        &self,
        g: &mut Graph,
        fused: &FusedPyramid,
        q_encoder: Var,
        q_fpn: Var,
        q_decoder: Var,
        out_hw: (usize, usize),
    ) -> Result<MaskPrediction> {
        Ok(self
            .decode_detailed(g, fused, q_encoder, q_fpn, q_decoder, out_hw)?
            .prediction)
    }
}
