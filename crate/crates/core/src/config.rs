//! Flat dotted-key run configuration (`model.stem=2`, one key per line).
//!
//! Settings resolve in three layers — built-in defaults ← config file ←
//! command-line overrides — through a [`Resolver`] that records every value
//! it hands out and rejects keys nothing consumed. [`Resolver::finish`]
//! returns the fully resolved configuration as canonical text (sorted keys),
//! which run directories and checkpoints embed so any run can be reproduced
//! from its own artifacts.

use crate::backbone::EncoderConfig;
use crate::data::SynthConfig;
use crate::decoder::DecoderConfig;
use crate::distill::StudentConfig;
use crate::fpn::FusionConfig;
use crate::losses::LossConfig;
use crate::metrics::{EvalConfig, MatchRule};
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, LrSchedule};
use crate::query::QueryEngineConfig;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Environment variable naming the root that relative output directories
/// are created under.
pub const OUT_ROOT_ENV: &str = "IRSTD_OUT_ROOT";

/// An ordered `key=value` map, the parse target for config files and flag
/// overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key=value` lines; `#` starts a comment, blank lines are
    /// skipped. A repeated key within one source is a config error (across
    /// sources, later layers override via [`ConfigMap::merge`]).
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {}: expected key=value, got '{line}'",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(Error::Config(format!(
                    "config line {}: empty key",
                    lineno + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "config line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    /// Overlay `other` on top of this map (its values win).
    pub fn merge(&mut self, other: &ConfigMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Hands out typed values key by key, recording what each run actually
/// used; any key left unconsumed at [`Resolver::finish`] is rejected, so
/// typos never pass silently.
#[derive(Debug)]
pub struct Resolver {
    remaining: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(map: ConfigMap) -> Self {
        Resolver {
            remaining: map.entries,
            resolved: BTreeMap::new(),
        }
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.insert(key.to_string(), value);
    }

    /// Typed value with a default; the default is recorded when the key is
    /// absent, so the resolved text always shows what the run used.
    pub fn take<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr + ToString,
    {
        match self.remaining.remove(key) {
            Some(raw) => {
                let v: T = raw.parse().map_err(|_| {
                    Error::Config(format!("config key {key}: cannot parse '{raw}'"))
                })?;
                self.record(key, v.to_string());
                Ok(v)
            }
            None => {
                self.record(key, default.to_string());
                Ok(default)
            }
        }
    }

    /// Booleans accept `true/false/on/off/1/0` and canonicalize to
    /// `true`/`false` in the resolved text.
    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.remaining.remove(key) {
            Some(raw) => {
                let v = match raw.as_str() {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "config key {key}: expected true/false/on/off, got '{other}'"
                        )))
                    }
                };
                self.record(key, v.to_string());
                Ok(v)
            }
            None => {
                self.record(key, default.to_string());
                Ok(default)
            }
        }
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        let v = self
            .remaining
            .remove(key)
            .unwrap_or_else(|| default.to_string());
        self.record(key, v.clone());
        v
    }

    /// Optional value: recorded only when present.
    pub fn take_optional(&mut self, key: &str) -> Option<String> {
        let v = self.remaining.remove(key);
        if let Some(v) = &v {
            self.record(key, v.clone());
        }
        v
    }

    /// `a,b` pair of anything parseable.
    pub fn take_pair<T>(&mut self, key: &str, default: (T, T)) -> Result<(T, T)>
    where
        T: std::str::FromStr + ToString + Copy,
    {
        match self.remaining.remove(key) {
            Some(raw) => {
                let parts: Vec<&str> = raw.split(',').map(|p| p.trim()).collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!(
                        "config key {key}: expected 'a,b', got '{raw}'"
                    )));
                }
                let a: T = parts[0].parse().map_err(|_| {
                    Error::Config(format!("config key {key}: cannot parse '{}'", parts[0]))
                })?;
                let b: T = parts[1].parse().map_err(|_| {
                    Error::Config(format!("config key {key}: cannot parse '{}'", parts[1]))
                })?;
                self.record(key, format!("{},{}", a.to_string(), b.to_string()));
                Ok((a, b))
            }
            None => {
                self.record(
                    key,
                    format!("{},{}", default.0.to_string(), default.1.to_string()),
                );
                Ok(default)
            }
        }
    }

    /// Fixed-length comma list (the four stage widths/depths).
    pub fn take_array4(&mut self, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
        match self.remaining.remove(key) {
            Some(raw) => {
                let parts: Vec<&str> = raw.split(',').map(|p| p.trim()).collect();
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "config key {key}: expected four comma-separated values, got '{raw}'"
                    )));
                }
                let mut out = [0usize; 4];
                for (slot, part) in out.iter_mut().zip(&parts) {
                    *slot = part.parse().map_err(|_| {
                        Error::Config(format!("config key {key}: cannot parse '{part}'"))
                    })?;
                }
                self.record(
                    key,
                    out.iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                );
                Ok(out)
            }
            None => {
                self.record(
                    key,
                    default
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                );
                Ok(default)
            }
        }
    }

    /// Reject unconsumed keys; on success return the canonical resolved
    /// text (sorted `key=value` lines).
    pub fn finish(self) -> Result<String> {
        if !self.remaining.is_empty() {
            let unknown: Vec<&str> = self.remaining.keys().map(|s| s.as_str()).collect();
            return Err(Error::Config(format!(
                "unknown config key(s): {}",
                unknown.join(", ")
            )));
        }
        Ok(ConfigMap {
            entries: self.resolved,
        }
        .render())
    }
}

/// Named width presets: `desk` is CPU-scale, `paper` is the published
/// geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

pub fn resolve_profile(r: &mut Resolver) -> Result<Profile> {
    match r.take_string("profile", "desk").as_str() {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        other => Err(Error::Config(format!(
            "profile must be 'desk' or 'paper', got '{other}'"
        ))),
    }
}

fn base_model(profile: Profile) -> ModelConfig {
    match profile {
        Profile::Desk => ModelConfig::desk(),
        Profile::Paper => ModelConfig::default(),
    }
}

/// `model.*` keys on top of a profile's base. One width `model.d` and one
/// head count `model.heads` feed the query engine, the fusion pyramid and
/// the decoder alike, mirroring how the presets are built.
pub fn resolve_model(r: &mut Resolver, profile: Profile) -> Result<ModelConfig> {
    let base = base_model(profile);
    let d = r.take("model.d", base.queries.d)?;
    let heads = r.take("model.heads", base.queries.heads)?;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            stem_downsample: r.take("model.stem", base.encoder.stem_downsample)?,
            stage_channels: r.take_array4("model.channels", base.encoder.stage_channels)?,
            stage_depths: r.take_array4("model.depths", base.encoder.stage_depths)?,
            input_channels: r.take("model.input_channels", base.encoder.input_channels)?,
        },
        queries: QueryEngineConfig {
            d,
            heads,
            points: r.take("model.points", base.queries.points)?,
            n_encoder: r.take("model.n_encoder", base.queries.n_encoder)?,
            n_fpn: r.take("model.n_fpn", base.queries.n_fpn)?,
            n_decoder: r.take("model.n_decoder", base.queries.n_decoder)?,
            enabled: r.take_bool("model.queries_enabled", base.queries.enabled)?,
        },
        fusion: FusionConfig {
            // The decoder reads the fused top level, so the fused width
            // defaults to the shared query dimension.
            fusion_channels: r.take("model.fusion_channels", d)?,
            d,
            heads,
        },
        decoder: DecoderConfig {
            depth: r.take("model.decoder_depth", base.decoder.depth)?,
            d,
            mlp_ratio: r.take("model.decoder_mlp_ratio", base.decoder.mlp_ratio)?,
            heads,
        },
        inject_prompt: r.take_bool("model.inject_prompt", base.inject_prompt)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// The distillation student shares the model's encoder/query keys and adds
/// `model.head_dim` for its prompt/granularity head.
pub fn resolve_student(r: &mut Resolver, profile: Profile) -> Result<StudentConfig> {
    let model = resolve_model(r, profile)?;
    let base = match profile {
        Profile::Desk => StudentConfig::desk(),
        Profile::Paper => StudentConfig::default(),
    };
    let cfg = StudentConfig {
        encoder: model.encoder,
        queries: model.queries,
        head_dim: r.take("model.head_dim", base.head_dim)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `loss.*` keys.
pub fn resolve_loss(r: &mut Resolver) -> Result<LossConfig> {
    let base = LossConfig::default();
    let cfg = LossConfig {
        lambda_distill: r.take("loss.lambda_distill", base.lambda_distill)?,
        lambda_dice: r.take("loss.lambda_dice", base.lambda_dice)?,
        temperature: r.take("loss.temperature", base.temperature)?,
        dice_eps: r.take("loss.dice_eps", base.dice_eps)?,
        point_count: r.take("loss.point_count", base.point_count)?,
        oversample_ratio: r.take("loss.oversample_ratio", base.oversample_ratio)?,
        importance_fraction: r.take("loss.importance_fraction", base.importance_fraction)?,
        soft_teacher_targets: r.take_bool("loss.soft_teacher_targets", base.soft_teacher_targets)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `optim.*` keys.
pub fn resolve_optim(r: &mut Resolver) -> Result<AdamWConfig> {
    let base = AdamWConfig::default();
    Ok(AdamWConfig {
        beta1: r.take("optim.beta1", base.beta1)?,
        beta2: r.take("optim.beta2", base.beta2)?,
        eps: r.take("optim.eps", base.eps)?,
        weight_decay: r.take("optim.weight_decay", base.weight_decay)?,
    })
}

/// `schedule.*` keys. `kind_default` names the command's native schedule
/// ("multistep" for distillation, "cosine" for fine-tuning); milestones
/// default to 90%/95% of `steps` and the warm-up to 10 iterations.
pub fn resolve_schedule(
    r: &mut Resolver,
    kind_default: &str,
    steps: usize,
) -> Result<LrSchedule> {
    let kind = r.take_string("schedule.kind", kind_default);
    match kind.as_str() {
        "multistep" => {
            let base = LrSchedule::distill_default(steps);
            let (base_lr_d, gamma_d, miles_d) = match base {
                LrSchedule::MultiStep {
                    base_lr,
                    gamma,
                    milestones,
                } => (base_lr, gamma, milestones),
                _ => unreachable!("distill_default is multi-step"),
            };
            let base_lr = r.take("schedule.base_lr", base_lr_d)?;
            let gamma = r.take("schedule.gamma", gamma_d)?;
            let milestones = r.take_pair(
                "schedule.milestones",
                (miles_d[0], miles_d[1]),
            )?;
            Ok(LrSchedule::MultiStep {
                base_lr,
                gamma,
                milestones: vec![milestones.0, milestones.1],
            })
        }
        "cosine" => {
            let base = LrSchedule::finetune_default(steps);
            let (base_lr_d, min_lr_d, warmup_d) = match base {
                LrSchedule::Cosine {
                    base_lr,
                    min_lr,
                    warmup,
                    ..
                } => (base_lr, min_lr, warmup),
                _ => unreachable!("finetune_default is cosine"),
            };
            Ok(LrSchedule::Cosine {
                base_lr: r.take("schedule.base_lr", base_lr_d)?,
                min_lr: r.take("schedule.min_lr", min_lr_d)?,
                warmup: r.take("schedule.warmup", warmup_d)?,
                total_steps: steps,
            })
        }
        "constant" => Ok(LrSchedule::Constant {
            lr: r.take("schedule.base_lr", 1e-4)?,
        }),
        other => Err(Error::Config(format!(
            "schedule.kind must be multistep, cosine or constant, got '{other}'"
        ))),
    }
}

/// `synth.*` keys for the synthetic generator.
pub fn resolve_synth(r: &mut Resolver) -> Result<SynthConfig> {
    let base = SynthConfig::default();
    let cfg = SynthConfig {
        height: r.take("synth.height", base.height)?,
        width: r.take("synth.width", base.width)?,
        n_targets: r.take_pair("synth.n_targets", base.n_targets)?,
        radius: r.take_pair("synth.radius", base.radius)?,
        contrast: r.take_pair("synth.contrast", base.contrast)?,
        clutter_octaves: r.take("synth.clutter_octaves", base.clutter_octaves)?,
        seed: r.take("synth.seed", base.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `eval.*` keys: the component-match rule and the IoU aggregation mode.
pub fn resolve_eval(r: &mut Resolver) -> Result<EvalConfig> {
    let rule = r.take_string("eval.match_rule", "centroid");
    let match_rule = match rule.as_str() {
        "centroid" => MatchRule::CentroidDistance(r.take("eval.centroid_distance", 3.0)?),
        "overlap" => MatchRule::Overlap,
        other => {
            return Err(Error::Config(format!(
                "eval.match_rule must be 'centroid' or 'overlap', got '{other}'"
            )))
        }
    };
    Ok(EvalConfig {
        match_rule,
        per_image_iou: r.take_bool("eval.per_image_iou", false)?,
    })
}

/// Resolve an output directory against [`OUT_ROOT_ENV`]: relative paths are
/// created under the root when the variable is set.
pub fn resolve_out_dir(raw: &str) -> PathBuf {
    let path = PathBuf::from(raw);
    if path.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            if !root.is_empty() {
                return PathBuf::from(root).join(path);
            }
        }
    }
    path
}
