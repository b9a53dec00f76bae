//! Fine-tuning loop: all three mask heads (early encoder, early pyramid,
//! final decode) supervised with the point-sampled mask loss
//! `L_BCE + λ_DICE·L_DICE`, driven by AdamW under a warm-up + cosine
//! learning-rate schedule (1e-4 → 1e-6, 10 warm-up iterations by default).
//!
//! A run can warm-start from a distillation checkpoint: only the encoder
//! and its query projections carry over, the pyramid and decoder start
//! fresh. Every step appends one structured line to `train_log.txt`;
//! periodic evaluation reports IoU / P_d / F_a on the training set. All
//! randomness (batch choice, augmentation, point sampling) is keyed by
//! `(seed, step)`, so a resumed run continues bitwise.

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data::{augment, uniform_geometry, Sample};
use crate::graph::Graph;
use crate::losses::{point_mask_loss, sample_points, LossConfig, MaskLossBreakdown};
use crate::metrics::{evaluate, DetectionReport, EvalConfig};
use crate::model::{IrstdModel, ModelConfig};
use crate::nn::{seed_for, ParamStore};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Random resize + fixed-size crop, the fine-tuning augmentation. Absent
/// (`Option::None` in [`TrainRunConfig`]) every batch reads the raw samples
/// bitwise — the no-augmentation mode used for NUDT-style datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainAugment {
    /// Uniform scale range for the random resize.
    pub scale_range: (f64, f64),
    /// Crop size `(h, w)`; `(0, 0)` crops at the dataset's native size.
    pub crop: (usize, usize),
}

impl Default for TrainAugment {
    fn default() -> Self {
        TrainAugment {
            scale_range: (0.5, 2.0),
            crop: (0, 0),
        }
    }
}

impl TrainAugment {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "augment.scale_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    /// Crop size with `(0, 0)` resolved to the dataset's native `(h, w)`.
    fn crop_for(&self, native: (usize, usize)) -> (usize, usize) {
        if self.crop == (0, 0) {
            native
        } else {
            self.crop
        }
    }
}

/// Settings for one fine-tuning run.
#[derive(Debug, Clone)]
pub struct TrainRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Seed for parameter init, batch selection, augmentation and point
    /// sampling.
    pub seed: u64,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub schedule: LrSchedule,
    /// `None` disables augmentation (batches read raw samples bitwise).
    pub augment: Option<TrainAugment>,
    /// Save `checkpoint_step{N}.tar` every this many steps (0 = final only).
    pub checkpoint_every: usize,
    /// Evaluate IoU/P_d/F_a on the training set every this many steps
    /// (0 = final evaluation only).
    pub eval_every: usize,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
    /// Resume from this fine-tuning checkpoint (its `meta.step` sets the
    /// start step).
    pub resume: Option<PathBuf>,
    /// Warm-start from this distillation checkpoint: encoder and query
    /// projections carry over, pyramid and decoder stay freshly initialized.
    pub init_from: Option<PathBuf>,
    /// Resolved configuration text echoed into checkpoints.
    pub config_text: String,
}

impl TrainRunConfig {
    pub fn new(steps: usize, out_dir: &Path, seed: u64) -> Self {
        TrainRunConfig {
            steps,
            batch_size: 2,
            seed,
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            schedule: LrSchedule::finetune_default(steps),
            augment: Some(TrainAugment::default()),
            checkpoint_every: 0,
            eval_every: 0,
            eval: EvalConfig::default(),
            out_dir: out_dir.to_path_buf(),
            resume: None,
            init_from: None,
            config_text: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if self.resume.is_some() && self.init_from.is_some() {
            return Err(Error::Config(
                "train.resume and train.init_from are mutually exclusive".into(),
            ));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.loss.validate()
    }
}

/// Per-head and total loss values of one step, for logging.
#[derive(Debug, Clone, Copy)]
pub struct TrainBreakdown {
    pub encoder: MaskLossBreakdown,
    pub fpn: MaskLossBreakdown,
    pub final_mask: MaskLossBreakdown,
    pub total: f64,
}

/// One logged optimizer step (0-based index).
#[derive(Debug, Clone, Copy)]
pub struct TrainStepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: TrainBreakdown,
}

/// One evaluation of the training set, logged after `step` steps.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord {
    /// Number of optimizer steps taken when the evaluation ran.
    pub steps_taken: usize,
    pub iou: f64,
    /// `None` when the evaluated set holds no targets (0/0 is undefined).
    pub pd: Option<f64>,
    pub fa: f64,
}

/// Outcome of [`train_run`].
pub struct TrainRunResult {
    /// Parameter store holding the fine-tuned model.
    pub store: ParamStore,
    pub records: Vec<TrainStepRecord>,
    pub evals: Vec<EvalRecord>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn format_step_line(r: &TrainStepRecord) -> String {
    format!(
        "step={} lr={} total={} enc_bce={} enc_dice={} fpn_bce={} fpn_dice={} final_bce={} final_dice={}",
        r.step,
        r.lr,
        r.loss.total,
        r.loss.encoder.bce,
        r.loss.encoder.dice,
        r.loss.fpn.bce,
        r.loss.fpn.dice,
        r.loss.final_mask.bce,
        r.loss.final_mask.dice
    )
}

fn format_eval_line(r: &EvalRecord) -> String {
    let pd = match r.pd {
        Some(v) => v.to_string(),
        None => "undefined".to_string(),
    };
    format!(
        "eval steps={} iou={} pd={} fa={}",
        r.steps_taken, r.iou, pd, r.fa
    )
}

fn nan_dump(dir: &Path, step: usize, ids: &[&str], batch: &[usize], loss: &TrainBreakdown) -> PathBuf {
    let path = dir.join(format!("nan_dump_step{step}.txt"));
    let body = format!(
        "NaN/Inf loss at step {step}\nbatch_indices={batch:?}\nsample_ids={ids:?}\n\
         enc_bce={} enc_dice={} fpn_bce={} fpn_dice={} final_bce={} final_dice={} total={}\n",
        loss.encoder.bce,
        loss.encoder.dice,
        loss.fpn.bce,
        loss.fpn.dice,
        loss.final_mask.bce,
        loss.final_mask.dice,
        loss.total
    );
    let _ = std::fs::write(&path, body);
    path
}

/// Stack the chosen samples into `(images [b,c,h,w], targets [b,1,h,w])`,
/// augmenting each when `aug` is set. With `aug == None` the tensors are a
/// bitwise copy of the raw samples — the no-augmentation contract.
pub fn assemble_batch<R: Rng>(
    samples: &[Sample],
    indices: &[usize],
    aug: Option<&TrainAugment>,
    rng: &mut R,
) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    let first = samples
        .get(
            *indices
                .first()
                .ok_or_else(|| Error::Data("empty batch".into()))?,
        )
        .ok_or_else(|| Error::Data("batch index out of range".into()))?;
    let shape = first.image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (bh, bw) = match aug {
        Some(a) => a.crop_for((h, w)),
        None => (h, w),
    };
    let b = indices.len();
    let mut images = ArrayD::zeros(IxDyn(&[b, c, bh, bw]));
    let mut targets = ArrayD::zeros(IxDyn(&[b, 1, bh, bw]));
    for (bi, &ix) in indices.iter().enumerate() {
        let sample = samples
            .get(ix)
            .ok_or_else(|| Error::Data("batch index out of range".into()))?;
        match aug {
            Some(a) => {
                let out = augment(sample, a.scale_range, (bh, bw), rng);
                images.index_axis_mut(Axis(0), bi).assign(&out.image);
                targets
                    .index_axis_mut(Axis(0), bi)
                    .assign(&out.mask_f64());
            }
            None => {
                images.index_axis_mut(Axis(0), bi).assign(&sample.image);
                targets
                    .index_axis_mut(Axis(0), bi)
                    .assign(&sample.mask_f64());
            }
        }
    }
    Ok((images, targets))
}

/// Binarized final-head predictions for each sample, forwarded one at a time.
pub fn predict_masks(model: &IrstdModel, samples: &[Sample]) -> Result<Vec<Array2<bool>>> {
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        sample.validate()?;
        let shape = sample.image.shape().to_vec();
        let mut g = Graph::new();
        let image = sample
            .image
            .clone()
            .into_shape_with_order(IxDyn(&[1, shape[0], shape[1], shape[2]]))
            .expect("sample image is [c,h,w]");
        let images = g.constant(image);
        let outputs = model.forward(&mut g, images)?;
        out.push(outputs.final_mask.binarize(&g).remove(0));
    }
    Ok(out)
}

/// IoU / P_d / F_a of the model's final head over `samples`.
pub fn evaluate_model(
    model: &IrstdModel,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<DetectionReport> {
    let preds = predict_masks(model, samples)?;
    let pairs: Vec<(Array2<bool>, Array2<bool>)> = preds
        .into_iter()
        .zip(samples)
        .map(|(pred, s)| (pred, s.mask.clone()))
        .collect();
    evaluate(&pairs, cfg)
}

/// Run fine-tuning on `samples`.
///
/// Per step: a batch is drawn (and optionally augmented) with an RNG keyed
/// by `(seed, step)`, each head's logits are read at its own
/// importance-sampled points, and one AdamW step is applied at the cosine
/// schedule's rate. Every step appends a structured line to
/// `train_log.txt`; a NaN/Inf loss aborts with a diagnostic dump of the
/// offending batch.
pub fn train_run(
    samples: &[Sample],
    model_config: ModelConfig,
    run: &TrainRunConfig,
) -> Result<TrainRunResult> {
    run.validate()?;
    model_config.validate()?;
    let (c, _, _) = uniform_geometry(samples)?;
    if c != 1 && c != model_config.encoder.input_channels {
        return Err(Error::Data(format!(
            "samples have {c} channels but the encoder wants {}",
            model_config.encoder.input_channels
        )));
    }
    std::fs::create_dir_all(&run.out_dir)?;

    let mut store = ParamStore::new(run.seed);
    let model = IrstdModel::new(&mut store, model_config)?;

    let mut opt = AdamW::new(&store, run.optim);
    let mut start_step = 0usize;
    if let Some(resume_path) = &run.resume {
        let ckpt = load_checkpoint(resume_path)?;
        if ckpt.meta.kind != "train" {
            return Err(Error::Config(format!(
                "cannot resume fine-tuning from a '{}' checkpoint; \
                 use init_from to carry a distilled encoder over",
                ckpt.meta.kind
            )));
        }
        ckpt.apply_all(&store)?;
        opt.load_state(&ckpt.optim)?;
        start_step = ckpt.meta.step as usize;
        if start_step >= run.steps {
            return Err(Error::Config(format!(
                "checkpoint already at step {start_step} of {}",
                run.steps
            )));
        }
    } else if let Some(init_path) = &run.init_from {
        let ckpt = load_checkpoint(init_path)?;
        ckpt.apply_carry_over(&store)?;
    }

    let log_path = run.out_dir.join("train_log.txt");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let mut records = Vec::with_capacity(run.steps - start_step);
    let mut evals = Vec::new();
    for step in start_step..run.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(run.seed, &format!("step{step}")));
        let batch: Vec<usize> = (0..run.batch_size)
            .map(|_| rng.gen_range(0..samples.len()))
            .collect();
        let (images, targets) = assemble_batch(samples, &batch, run.augment.as_ref(), &mut rng)?;

        store.zero_grads();
        let mut g = Graph::new();
        let images_var = g.constant(images);
        let out = model.forward(&mut g, images_var)?;

        // Each head reads the shared target at its own sampled points.
        let mut head_losses = Vec::with_capacity(3);
        let mut breakdowns = Vec::with_capacity(3);
        for pred in out.all() {
            let logits_value = g.value(pred.logits).clone();
            let coords = sample_points(&mut rng, &logits_value, &run.loss);
            let (loss, breakdown) = point_mask_loss(&mut g, pred.logits, &targets, &coords, &run.loss)?;
            head_losses.push(loss);
            breakdowns.push(breakdown);
        }
        let partial = g.add(head_losses[0], head_losses[1]);
        let total = g.add(partial, head_losses[2]);
        let breakdown = TrainBreakdown {
            encoder: breakdowns[0],
            fpn: breakdowns[1],
            final_mask: breakdowns[2],
            total: g.scalar_value(total),
        };

        if !breakdown.total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| samples[i].id.as_str()).collect();
            let dump = nan_dump(&run.out_dir, step, &ids, &batch, &breakdown);
            return Err(Error::Training(format!(
                "non-finite mask loss at step {step}; diagnostics at {}",
                dump.display()
            )));
        }

        g.backward(total);
        let lr = run.schedule.lr(step);
        opt.step(&store, lr);

        let record = TrainStepRecord {
            step,
            lr,
            loss: breakdown,
        };
        writeln!(log, "{}", format_step_line(&record))?;
        records.push(record);

        let last = step + 1 == run.steps;
        if run.eval_every > 0 && (step + 1) % run.eval_every == 0 && !last {
            let report = evaluate_model(&model, samples, &run.eval)?;
            let eval = EvalRecord {
                steps_taken: step + 1,
                iou: report.iou,
                pd: report.pd,
                fa: report.fa,
            };
            writeln!(log, "{}", format_eval_line(&eval))?;
            evals.push(eval);
        }

        if run.checkpoint_every > 0 && (step + 1) % run.checkpoint_every == 0 && !last {
            let meta = CheckpointMeta::new("train", (step + 1) as u64, run.seed, run.steps as u64);
            save_checkpoint(
                &run.out_dir.join(format!("checkpoint_step{}.tar", step + 1)),
                &meta,
                &run.config_text,
                &store,
                &opt.state(),
            )?;
        }
    }

    let report = evaluate_model(&model, samples, &run.eval)?;
    let final_eval = EvalRecord {
        steps_taken: run.steps,
        iou: report.iou,
        pd: report.pd,
        fa: report.fa,
    };
    writeln!(log, "{}", format_eval_line(&final_eval))?;
    evals.push(final_eval);
    log.flush()?;

    let checkpoint_path = run.out_dir.join("checkpoint_final.tar");
    let meta = CheckpointMeta::new("train", run.steps as u64, run.seed, run.steps as u64);
    save_checkpoint(&checkpoint_path, &meta, &run.config_text, &store, &opt.state())?;

    Ok(TrainRunResult {
        store,
        records,
        evals,
        checkpoint_path,
        log_path,
    })
}
