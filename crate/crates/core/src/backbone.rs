//! Four-stage hierarchical image encoder.
//!
//! The encoder follows the usual pyramid contract: an embedding conv with a
//! configurable stride (1x, 2x or 4x "stem" downsampling), then four stages
//! whose resolutions halve stage to stage, with per-stage channel widths and
//! depths. Blocks are depthwise-separable with residuals (a depthwise 3x3
//! token mixer and a 1x1 expansion FFN); the exact block internals are a
//! swappable detail — everything downstream consumes only the
//! [`FeaturePyramid`] shape contract.

use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, DepthwiseConv2d, GroupNorm, ParamStore};
use crate::{Error, Result};

/// Encoder hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Stride of the initial embedding conv; one of {1, 2, 4}.
    pub stem_downsample: usize,
    /// Channel width of each stage.
    pub stage_channels: [usize; 4],
    /// Residual blocks per stage.
    pub stage_depths: [usize; 4],
    /// 1 (raw infrared) or 3 (replicated grayscale).
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem_downsample: 1,
            stage_channels: [64, 128, 256, 512],
            stage_depths: [2, 2, 6, 2],
            input_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.stem_downsample) {
            return Err(Error::Config(format!(
                "stem_downsample must be 1, 2 or 4, got {}",
                self.stem_downsample
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage_channels must be positive".into()));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("stage_depths must be positive".into()));
        }
        if ![1, 3].contains(&self.input_channels) {
            return Err(Error::Config(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Inputs must divide by this (stem stride times the three halvings).
    pub fn divisor(&self) -> usize {
        self.stem_downsample * 8
    }

    /// Spatial size of stage `i` (0-based) for an `(h, w)` input.
    pub fn stage_size(&self, i: usize, h: usize, w: usize) -> (usize, usize) {
        let f = self.stem_downsample << i;
        (h / f, w / f)
    }
}

/// The four stage outputs, shallowest (highest resolution) first.
pub struct FeaturePyramid {
    pub stages: [Var; 4],
    pub stem_downsample: usize,
}

impl FeaturePyramid {
    pub fn shapes(&self, g: &Graph) -> [Vec<usize>; 4] {
        [
            g.shape(self.stages[0]).to_vec(),
            g.shape(self.stages[1]).to_vec(),
            g.shape(self.stages[2]).to_vec(),
            g.shape(self.stages[3]).to_vec(),
        ]
    }
}

/// Largest group count <= 8 that divides `c` (so tiny test widths work).
pub(crate) fn norm_groups(c: usize) -> usize {
    for g in [8, 4, 2] {
        if c % g == 0 {
            return g;
        }
    }
    1
}

struct Block {
    dw: DepthwiseConv2d,
    norm1: GroupNorm,
    pw1: Conv2d,
    norm2: GroupNorm,
    pw2: Conv2d,
}

impl Block {
    fn new(store: &mut ParamStore, scope: &str, c: usize) -> Self {
        Block {
            dw: DepthwiseConv2d::new(store, &format!("{scope}.dw"), c, 3, 1, 1, true),
            norm1: GroupNorm::new(store, &format!("{scope}.norm1"), c, norm_groups(c)),
            pw1: Conv2d::new(store, &format!("{scope}.pw1"), c, 2 * c, 1, 1, 0, true),
            norm2: GroupNorm::new(store, &format!("{scope}.norm2"), c, norm_groups(c)),
            pw2: Conv2d::new(store, &format!("{scope}.pw2"), 2 * c, c, 1, 1, 0, true),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        // Token mixer: depthwise conv with a residual.
        let t = self.dw.forward(g, x);
        let t = self.norm1.forward(g, t);
        let t = g.add(x, t);
        // Channel mixer: 1x1 expand, SiLU, 1x1 project, residual.
        let f = self.norm2.forward(g, t);
        let f = self.pw1.forward(g, f);
        let f = g.silu(f);
        let f = self.pw2.forward(g, f);
        g.add(t, f)
    }
}

struct Stage {
    /// Stride-2 transition into this stage (stages 2..4 only).
    down: Option<(Conv2d, GroupNorm)>,
    blocks: Vec<Block>,
}

/// The encoder itself; parameters live in the owning [`ParamStore`] under
/// `encoder.stage{i}.*`.
pub struct Encoder {
    pub config: EncoderConfig,
    embed: Conv2d,
    embed_norm: GroupNorm,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.stage_channels;
        let embed = Conv2d::new(
            store,
            "encoder.stage1.embed",
            config.input_channels,
            c[0],
            3,
            config.stem_downsample,
            1,
            true,
        );
        let embed_norm = GroupNorm::new(store, "encoder.stage1.embed_norm", c[0], norm_groups(c[0]));
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let down = (i > 0).then(|| {
                (
                    Conv2d::new(
                        store,
                        &format!("encoder.stage{}.down", i + 1),
                        c[i - 1],
                        c[i],
                        3,
                        2,
                        1,
                        true,
                    ),
                    GroupNorm::new(
                        store,
                        &format!("encoder.stage{}.down_norm", i + 1),
                        c[i],
                        norm_groups(c[i]),
                    ),
                )
            });
            let blocks = (0..config.stage_depths[i])
                .map(|j| Block::new(store, &format!("encoder.stage{}.block{}", i + 1, j), c[i]))
                .collect();
            stages.push(Stage { down, blocks });
        }
        Ok(Encoder {
            config,
            embed,
            embed_norm,
            stages,
        })
    }

    /// Check an input shape against the config; returns `(b, h, w)`.
    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::Shape(format!(
                "encoder expects [b,{},h,w], got {:?}",
                self.config.input_channels, shape
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let div = self.config.divisor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by stem*8 = {div}"
            )));
        }
        Ok((shape[0], h, w))
    }

    /// Raw per-stage features (no query interaction).
    pub fn encode(&self, g: &mut Graph, images: Var) -> Result<FeaturePyramid> {
        self.encode_with(g, images, None)
    }

    /// Encode with an optional hook called after each stage (0-based index);
    /// the hook maps the stage output to its replacement, which also feeds
    /// the next stage. This lets the query engine interleave its updates
    /// without the encoder knowing about queries.
    pub fn encode_with(
        &self,
        g: &mut Graph,
        images: Var,
        mut hook: Option<&mut dyn FnMut(&mut Graph, usize, Var) -> Result<Var>>,
    ) -> Result<FeaturePyramid> {
        self.check_input(g.shape(images))?;
        let mut x = g.scoped("encoder.stage1", |g| {
            let x = self.embed.forward(g, images);
            let x = self.embed_norm.forward(g, x);
            g.silu(x)
        });
        let mut outs: Vec<Var> = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            x = g.scoped(&format!("encoder.stage{}", i + 1), |g| {
                let mut x = x;
                if let Some((down, norm)) = &stage.down {
                    x = down.forward(g, x);
                    x = norm.forward(g, x);
                    x = g.silu(x);
                }
                for b in &stage.blocks {
                    x = b.forward(g, x);
                }
                x
            });
            if let Some(h) = hook.as_mut() {
                x = h(g, i, x)?;
            }
            outs.push(x);
        }
        Ok(FeaturePyramid {
            stages: [outs[0], outs[1], outs[2], outs[3]],
            stem_downsample: self.config.stem_downsample,
        })
    }
}
