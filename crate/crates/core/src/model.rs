//! Full detector: hierarchical encoder with query engine, fusion pyramid
//! with early heads and prompt injection, and the final mask decoder.

use crate::backbone::{Encoder, EncoderConfig};
use crate::decoder::{DecoderConfig, MaskDecoder};
use crate::fpn::{FusionConfig, FusionFpn, MaskPrediction};
use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use crate::query::{QueryEngine, QueryEngineConfig, QueryGroup, SparseQuerySet};
use crate::{Error, Result};

/// Complete model configuration. The sparse-query dimension must agree
/// everywhere tokens travel (engine, pyramid interaction, decoder), and the
/// fusion width must equal the decoder dimension because the decoder reads
/// the fused top level as its image embedding.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub queries: QueryEngineConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    /// Whether the pyramid-stage prediction is folded back into the fused
    /// levels before the final decode.
    pub inject_prompt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            queries: QueryEngineConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            inject_prompt: true,
        }
    }
}

impl ModelConfig {
    /// Small widths that keep every training loop CPU-friendly while
    /// preserving all structural properties.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                stem_downsample: 2,
                stage_channels: [8, 16, 32, 64],
                stage_depths: [1, 1, 2, 1],
                input_channels: 1,
            },
            queries: QueryEngineConfig {
                d: 32,
                heads: 8,
                points: 4,
                ..Default::default()
            },
            fusion: FusionConfig {
                fusion_channels: 32,
                d: 32,
                heads: 8,
            },
            decoder: DecoderConfig {
                depth: 2,
                d: 32,
                mlp_ratio: 4,
                heads: 8,
            },
            inject_prompt: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.queries.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if self.queries.d != self.fusion.d || self.fusion.d != self.decoder.d {
            return Err(Error::Config(format!(
                "query dimension must agree across modules: engine {}, fusion {}, decoder {}",
                self.queries.d, self.fusion.d, self.decoder.d
            )));
        }
        if self.fusion.fusion_channels != self.decoder.d {
            return Err(Error::Config(format!(
                "fusion width {} must equal decoder dim {} (the decoder reads the fused top level)",
                self.fusion.fusion_channels, self.decoder.d
            )));
        }
        if self.queries.n_decoder != 1 {
            return Err(Error::Config(format!(
                "the final mask reads one decoder query, configured {}",
                self.queries.n_decoder
            )));
        }
        Ok(())
    }
}

/// The three mask predictions one forward pass produces.
pub struct ModelOutputs {
    pub early_encoder: MaskPrediction,
    pub early_fpn: MaskPrediction,
    pub final_mask: MaskPrediction,
}

impl ModelOutputs {
    pub fn all(&self) -> [&MaskPrediction; 3] {
        [&self.early_encoder, &self.early_fpn, &self.final_mask]
    }
}

pub struct IrstdModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub engine: QueryEngine,
    pub q_encoder: SparseQuerySet,
    pub q_fpn: SparseQuerySet,
    pub q_decoder: SparseQuerySet,
    pub fpn: FusionFpn,
    pub decoder: MaskDecoder,
}

impl IrstdModel {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, config.encoder)?;
        let engine = QueryEngine::new(store, &config.encoder, config.queries)?;
        let d = config.queries.d;
        let q_encoder =
            SparseQuerySet::new(store, QueryGroup::Encoder, config.queries.n_encoder, d)?;
        let q_fpn = SparseQuerySet::new(store, QueryGroup::Fpn, config.queries.n_fpn, d)?;
        let q_decoder =
            SparseQuerySet::new(store, QueryGroup::Decoder, config.queries.n_decoder, d)?;
        let fpn = FusionFpn::new(store, &config.encoder, config.fusion)?;
        let decoder = MaskDecoder::new(store, config.decoder)?;
        Ok(IrstdModel {
            config,
            encoder,
            engine,
            q_encoder,
            q_fpn,
            q_decoder,
            fpn,
            decoder,
        })
    }

    /// Replicates a single-channel image to the encoder's input width; any
    /// other mismatch is left for the encoder's own shape check to report.
    fn adapt_channels(&self, g: &mut Graph, images: Var) -> Var {
        let s = g.shape(images).to_vec();
        let want = self.config.encoder.input_channels;
        if s.len() == 4 && s[1] == 1 && want > 1 {
            let copies = vec![images; want];
            g.concat(1, &copies)
        } else {
            images
        }
    }

    /// Full three-stage forward: early encoder mask, early pyramid mask
    /// (optionally injected back as a dense prompt), and the final decode
    /// at input resolution.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<ModelOutputs> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("images expect [b,c,h,w], got {s:?}")));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let x = self.adapt_channels(g, images);
        let run = self.engine.run(g, &self.encoder, x, &self.q_encoder)?;
        let early_encoder = self
            .fpn
            .early_decode_encoder(g, &run.q_dense, run.q_encoder)?;
        let q_fpn0 = self.q_fpn.batched(g, b);
        let (fused, q_all) = self.fpn.forward(g, &run.pyramid, run.q_encoder, q_fpn0)?;
        let n_enc = self.config.queries.n_encoder;
        let n_fpn = self.config.queries.n_fpn;
        let q_enc2 = g.narrow(q_all, 1, 0, n_enc);
        let q_fpn2 = g.narrow(q_all, 1, n_enc, n_fpn);
        let early_fpn = self.fpn.early_decode_fpn(g, &fused, q_fpn2)?;
        let fused = if self.config.inject_prompt {
            self.fpn.inject_dense_prompt(g, &early_fpn, fused)?
        } else {
            fused
        };
        let q_dec = self.q_decoder.batched(g, b);
        let final_mask = self
            .decoder
            .decode(g, &fused, q_enc2, q_fpn2, q_dec, (h, w))?;
        Ok(ModelOutputs {
            early_encoder,
            early_fpn,
            final_mask,
        })
    }
}
