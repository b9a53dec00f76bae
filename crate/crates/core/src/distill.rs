//! Knowledge-distillation stage: the mock granularity-aware teacher, the
//! student's prompt/granularity decoding head, and the distillation
//! training loop.
//!
//! The mock teacher stands in for a large interactive segmenter so the
//! distillation mechanics are testable offline. Given a ground-truth
//! mask it samples `N` point prompts (cycling over the foreground
//! components) and emits, per prompt, six granularity masks — the
//! prompted component dilated by radii {0,1,2,4,8,16} — encoded as
//! `±TEACHER_LOGIT` mask logits. The `6·N` intermediate masks distill
//! into the student's matching head; the radius-0 masks serve as the
//! teacher's final outputs.
//!
//! The student is the image encoder plus query engine plus a small
//! prompt-conditioned head (`distill_head.*`) that mirrors the teacher's
//! interface: 6 output masks per prompt, slot-aligned with the teacher.
//! At fine-tuning time the head is discarded; only `encoder.*`,
//! `queries.encoder` and `query_engine.*` carry over (see
//! [`crate::checkpoint::carries_over_to_finetune`]).

use crate::backbone::{Encoder, EncoderConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data::{uniform_geometry, Sample};
use crate::graph::{Graph, Param, Var};
use crate::losses::{distill_loss, DistillBreakdown, LossConfig};
use crate::metrics::connected_components;
use crate::nn::{seed_for, Conv2d, Init, Linear, Mlp, ParamStore};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::query::{QueryEngine, QueryEngineConfig, QueryGroup, SparseQuerySet};
use crate::{Error, Result};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Dilation radii of the six granularity levels, finest first.
pub const GRANULARITY_RADII: [usize; 6] = [0, 1, 2, 4, 8, 16];
/// Magnitude of the teacher's mask logits: near-saturated but finite so
/// KL terms stay well defined.
pub const TEACHER_LOGIT: f64 = 10.0;
/// Granularity levels per prompt.
pub const GRANULARITIES: usize = GRANULARITY_RADII.len();

/// Everything the teacher reports for one image.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    /// `[6N, h, w]` mask logits, slot `6·prompt + granularity`.
    pub mid: ArrayD<f64>,
    /// `[K, h, w]` selected final masks (the radius-0 slots).
    pub final_logits: ArrayD<f64>,
    /// The `(row, col)` point prompts, one per prompt slot.
    pub prompts: Vec<(usize, usize)>,
    /// Indices into `mid` of the final masks, `len == K`.
    pub selected: Vec<usize>,
}

impl TeacherOutputs {
    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }
}

/// Minimum squared distance from each pixel to the component, capped to
/// the largest dilation radius (pixels farther away stay at `inf`).
fn component_dist2(comp_pixels: &[(usize, usize)], h: usize, w: usize) -> Array2<f64> {
    let max_r = *GRANULARITY_RADII.last().unwrap() as isize;
    let mut dist2 = Array2::from_elem((h, w), f64::INFINITY);
    let (mut r0, mut r1, mut c0, mut c1) = (h as isize, -1isize, w as isize, -1isize);
    for &(r, c) in comp_pixels {
        r0 = r0.min(r as isize);
        r1 = r1.max(r as isize);
        c0 = c0.min(c as isize);
        c1 = c1.max(c as isize);
    }
    let rows = (r0 - max_r).max(0) as usize..=((r1 + max_r).min(h as isize - 1)) as usize;
    for r in rows {
        let cols = (c0 - max_r).max(0) as usize..=((c1 + max_r).min(w as isize - 1)) as usize;
        for c in cols {
            let mut best = f64::INFINITY;
            for &(pr, pc) in comp_pixels {
                let dr = pr as f64 - r as f64;
                let dc = pc as f64 - c as f64;
                best = best.min(dr * dr + dc * dc);
            }
            dist2[(r, c)] = best;
        }
    }
    dist2
}

/// Granularity-aware mock teacher.
///
/// Samples `n` point prompts by cycling over the foreground components of
/// `gt` (uniform pixel within each). Per prompt it emits six nested masks
/// — Euclidean dilations of the prompted component with radii
/// {0,1,2,4,8,16} — as `±TEACHER_LOGIT` logits; the radius-0 masks are the
/// final outputs. An empty ground truth yields uniformly placed
/// background prompts with all-empty masks. Deterministic given `seed`.
pub fn mock_teacher(gt: &Array2<bool>, n: usize, seed: u64) -> Result<TeacherOutputs> {
    if n == 0 {
        return Err(Error::Config("mock teacher needs n >= 1 prompts".into()));
    }
    let (h, w) = gt.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("mock teacher: empty mask".into()));
    }
    let comps = connected_components(gt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mid = Array3::from_elem((GRANULARITIES * n, h, w), -TEACHER_LOGIT);
    let mut finals = Array3::from_elem((n, h, w), -TEACHER_LOGIT);
    let mut prompts = Vec::with_capacity(n);
    let mut selected = Vec::with_capacity(n);

    for i in 0..n {
        selected.push(GRANULARITIES * i);
        if comps.is_empty() {
            // Background prompt: a uniform point, all six masks empty.
            prompts.push((rng.gen_range(0..h), rng.gen_range(0..w)));
            continue;
        }
        let comp = &comps[i % comps.len()];
        prompts.push(comp.pixels[rng.gen_range(0..comp.pixels.len())]);
        let dist2 = component_dist2(&comp.pixels, h, w);
        for (j, radius) in GRANULARITY_RADII.iter().enumerate() {
            let r2 = (radius * radius) as f64;
            let slot = GRANULARITIES * i + j;
            for r in 0..h {
                for c in 0..w {
                    if dist2[(r, c)] <= r2 {
                        mid[(slot, r, c)] = TEACHER_LOGIT;
                    }
                }
            }
        }
        for r in 0..h {
            for c in 0..w {
                finals[(i, r, c)] = mid[(GRANULARITIES * i, r, c)];
            }
        }
    }

    Ok(TeacherOutputs {
        mid: mid.into_dyn(),
        final_logits: finals.into_dyn(),
        prompts,
        selected,
    })
}

// ------------------------------------------------------------------ student

/// Architecture of the distillation student.
#[derive(Debug, Clone, Copy)]
pub struct StudentConfig {
    pub encoder: EncoderConfig,
    pub queries: QueryEngineConfig,
    /// Width of the prompt/granularity head.
    pub head_dim: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            encoder: EncoderConfig::default(),
            queries: QueryEngineConfig::default(),
            head_dim: 256,
        }
    }
}

impl StudentConfig {
    /// CPU-friendly widths matching [`crate::model::ModelConfig::desk`].
    pub fn desk() -> Self {
        let model = crate::model::ModelConfig::desk();
        StudentConfig {
            encoder: model.encoder,
            queries: model.queries,
            head_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.queries.validate()?;
        if self.head_dim == 0 {
            return Err(Error::Config("student head_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Student mask logits for one batch, in-graph.
#[derive(Debug, Clone, Copy)]
pub struct StudentOutputs {
    /// `[b, 6N, h, w]`, slot-aligned with the teacher's `mid`.
    pub mid: Var,
    /// `[b, K, h, w]`, rows picked by the teacher-selected indices.
    pub final_logits: Var,
}

/// Encoder + query engine + prompt/granularity decoding head.
///
/// The head projects the dense query map to `head_dim` channels, embeds
/// each point prompt from its normalized coordinates, offsets it with one
/// learned embedding per granularity level, and reads each mask out as a
/// per-pixel dot product, bilinearly upsampled to the input resolution.
pub struct DistillStudent {
    pub config: StudentConfig,
    pub encoder: Encoder,
    pub engine: QueryEngine,
    pub q_encoder: SparseQuerySet,
    feat_conv: Conv2d,
    point_mlp: Mlp,
    granularity: Param,
    token_proj: Linear,
}

impl DistillStudent {
    pub fn new(store: &mut ParamStore, config: StudentConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, config.encoder)?;
        let engine = QueryEngine::new(store, &config.encoder, config.queries)?;
        let q_encoder = SparseQuerySet::new(
            store,
            QueryGroup::Encoder,
            config.queries.n_encoder,
            config.queries.d,
        )?;
        let dh = config.head_dim;
        let c1 = config.encoder.stage_channels[0];
        let feat_conv = Conv2d::new(store, "distill_head.feat", c1, dh, 3, 1, 1, true);
        let point_mlp = Mlp::new(store, "distill_head.point", 2, dh, dh);
        let granularity = store.make(
            "distill_head.granularity",
            &[GRANULARITIES, dh],
            Init::Normal(0.02),
        );
        let token_proj = Linear::new(store, "distill_head.proj", dh, dh, true);
        Ok(DistillStudent {
            config,
            encoder,
            engine,
            q_encoder,
            feat_conv,
            point_mlp,
            granularity,
            token_proj,
        })
    }

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

    /// Forward one batch. `prompts[i]` are image `i`'s point prompts in
    /// `(row, col)` pixel coordinates; every image must have the same
    /// count, and `selected` (teacher-reported) picks the final slots.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: Var,
        prompts: &[Vec<(usize, usize)>],
        selected: &[usize],
    ) -> Result<StudentOutputs> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("images expect [b,c,h,w], got {s:?}")));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        if prompts.len() != b {
            return Err(Error::Shape(format!(
                "{} prompt lists for batch of {b}",
                prompts.len()
            )));
        }
        let n = prompts.first().map(|p| p.len()).unwrap_or(0);
        if n == 0 || prompts.iter().any(|p| p.len() != n) {
            return Err(Error::Shape(
                "every image needs the same nonzero prompt count".into(),
            ));
        }
        if selected.iter().any(|&ix| ix >= GRANULARITIES * n) {
            return Err(Error::Shape(format!(
                "selected index out of range for {} mid slots",
                GRANULARITIES * n
            )));
        }

        let x = self.adapt_channels(g, images);
        let run = self.engine.run(g, &self.encoder, x, &self.q_encoder)?;

        g.scoped("distill_head", |g| {
            // Dense query map -> head features.
            let feats = self.feat_conv.forward(g, run.q_dense.map);
            let feats = g.silu(feats);
            let fs = g.shape(feats).to_vec();
            let (dh, h1, w1) = (fs[1], fs[2], fs[3]);
            let feats = g.reshape(feats, &[b, dh, h1 * w1]);

            // Prompt coordinates, normalized to [0,1]² as (x, y).
            let mut coords = ArrayD::zeros(IxDyn(&[b, n, 2]));
            for (i, image_prompts) in prompts.iter().enumerate() {
                for (p, &(row, col)) in image_prompts.iter().enumerate() {
                    coords[IxDyn(&[i, p, 0])] = (col as f64 + 0.5) / w as f64;
                    coords[IxDyn(&[i, p, 1])] = (row as f64 + 0.5) / h as f64;
                }
            }
            let coords = g.constant(coords);
            let point_tokens = self.point_mlp.forward(g, coords); // [b, n, dh]

            // One token per (prompt, granularity): point + level embedding.
            let stacked = g.reshape(point_tokens, &[b * n, 1, dh]);
            let stacked = g.concat(1, &vec![stacked; GRANULARITIES]); // [b·n, 6, dh]
            let gran = g.param(&self.granularity); // [6, dh]
            let gran = g.broadcast_batch(gran, b * n);
            let tokens = g.add(stacked, gran);
            let tokens = self.token_proj.forward(g, tokens);
            let tokens = g.reshape(tokens, &[b, n * GRANULARITIES, dh]);

            // Per-pixel dot products, upsampled to the input resolution.
            let logits = g.bmm(tokens, feats, false); // [b, 6n, h1·w1]
            let logits = g.reshape(logits, &[b, n * GRANULARITIES, h1, w1]);
            let mid = if (h1, w1) == (h, w) {
                logits
            } else {
                g.bilinear_resize(logits, h, w)
            };

            let rows: Vec<Var> = selected
                .iter()
                .map(|&ix| g.narrow(mid, 1, ix, 1))
                .collect();
            let final_logits = g.concat(1, &rows);
            Ok(StudentOutputs { mid, final_logits })
        })
    }
}

// ----------------------------------------------------------------- training

/// Settings of one distillation run.
#[derive(Debug, Clone)]
pub struct DistillRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Point prompts per image fed to the teacher.
    pub n_prompts: usize,
    /// Seed for parameter init, prompt sampling and batch selection.
    pub seed: u64,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub schedule: LrSchedule,
    /// Save `checkpoint_step{N}.tar` every this many steps (0 = final only).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    /// Resume from this checkpoint (its `meta.step` sets the start step).
    pub resume: Option<PathBuf>,
    /// Resolved configuration text echoed into checkpoints.
    pub config_text: String,
}

impl DistillRunConfig {
    pub fn new(steps: usize, out_dir: &Path, seed: u64) -> Self {
        DistillRunConfig {
            steps,
            batch_size: 2,
            n_prompts: 2,
            seed,
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            schedule: LrSchedule::distill_default(steps),
            checkpoint_every: 0,
            out_dir: out_dir.to_path_buf(),
            resume: None,
            config_text: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("distill.steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("distill.batch must be >= 1".into()));
        }
        if self.n_prompts == 0 {
            return Err(Error::Config("distill.prompts must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// One logged optimizer step (0-based index).
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: DistillBreakdown,
}

/// Outcome of [`distill_run`].
pub struct DistillRunResult {
    /// Parameter store holding the trained student.
    pub store: ParamStore,
    pub records: Vec<StepRecord>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn format_step_line(r: &StepRecord) -> String {
    format!(
        "step={} lr={} total={} bce={} dice={} kl_spatial={} kl_channel={}",
        r.step, r.lr, r.loss.total, r.loss.bce, r.loss.dice, r.loss.kl_spatial, r.loss.kl_channel
    )
}

fn nan_dump(dir: &Path, step: usize, ids: &[&str], batch: &[usize], loss: &DistillBreakdown) -> PathBuf {
    let path = dir.join(format!("nan_dump_step{step}.txt"));
    let body = format!(
        "NaN/Inf loss at step {step}\nbatch_indices={batch:?}\nsample_ids={ids:?}\n\
         bce={} dice={} kl_spatial={} kl_channel={} total={}\n",
        loss.bce, loss.dice, loss.kl_spatial, loss.kl_channel, loss.total
    );
    let _ = std::fs::write(&path, body);
    path
}

/// Run distillation against the mock teacher.
///
/// Per step: a batch is drawn with an RNG keyed by `(seed, step)` (so a
/// resumed run continues bitwise), the teacher targets are read from a
/// per-sample cache keyed by `(seed, sample index)`, and one AdamW step
/// is applied at the schedule's rate. Every step appends a structured
/// line to `distill_log.txt`; a NaN/Inf loss aborts with a diagnostic
/// dump of the offending batch.
pub fn distill_run(
    samples: &[Sample],
    student_config: StudentConfig,
    run: &DistillRunConfig,
) -> Result<DistillRunResult> {
    run.validate()?;
    student_config.validate()?;
    let (c, h, w) = uniform_geometry(samples)?;
    if c != 1 && c != student_config.encoder.input_channels {
        return Err(Error::Data(format!(
            "samples have {c} channels but the encoder wants {}",
            student_config.encoder.input_channels
        )));
    }
    std::fs::create_dir_all(&run.out_dir)?;

    let mut store = ParamStore::new(run.seed);
    let student = DistillStudent::new(&mut store, student_config)?;

    // Teacher targets are a pure function of (seed, sample index).
    let teacher: Vec<TeacherOutputs> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            mock_teacher(
                &s.mask,
                run.n_prompts,
                seed_for(run.seed, &format!("teacher{i}")),
            )
        })
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(&store, run.optim);
    let mut start_step = 0usize;
    if let Some(resume_path) = &run.resume {
        let ckpt = load_checkpoint(resume_path)?;
        if ckpt.meta.kind != "distill" {
            return Err(Error::Config(format!(
                "cannot resume distillation from a '{}' checkpoint",
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
    }

    let log_path = run.out_dir.join("distill_log.txt");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let mut records = Vec::with_capacity(run.steps - start_step);
    for step in start_step..run.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(run.seed, &format!("step{step}")));
        let batch: Vec<usize> = (0..run.batch_size)
            .map(|_| rng.gen_range(0..samples.len()))
            .collect();

        // Stack images and teacher targets along the batch axis.
        let b = batch.len();
        let n = run.n_prompts;
        let mut images = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        let mut t_mid = ArrayD::zeros(IxDyn(&[b, GRANULARITIES * n, h, w]));
        let mut t_final = ArrayD::zeros(IxDyn(&[b, n, h, w]));
        let mut prompts = Vec::with_capacity(b);
        for (bi, &ix) in batch.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&samples[ix].image);
            t_mid
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&teacher[ix].mid);
            t_final
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&teacher[ix].final_logits);
            prompts.push(teacher[ix].prompts.clone());
        }
        let selected: Vec<usize> = (0..n).map(|i| GRANULARITIES * i).collect();

        store.zero_grads();
        let mut g = Graph::new();
        let images_var = g.constant(images);
        let out = student.forward(&mut g, images_var, &prompts, &selected)?;
        let (total, breakdown) =
            distill_loss(&mut g, out.mid, out.final_logits, &t_mid, &t_final, &run.loss)?;

        if !breakdown.total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| samples[i].id.as_str()).collect();
            let dump = nan_dump(&run.out_dir, step, &ids, &batch, &breakdown);
            return Err(Error::Training(format!(
                "non-finite distillation loss at step {step}; diagnostics at {}",
                dump.display()
            )));
        }

        g.backward(total);
        let lr = run.schedule.lr(step);
        opt.step(&store, lr);

        let record = StepRecord {
            step,
            lr,
            loss: breakdown,
        };
        writeln!(log, "{}", format_step_line(&record))?;
        records.push(record);

        if run.checkpoint_every > 0
            && (step + 1) % run.checkpoint_every == 0
            && step + 1 < run.steps
        {
            let meta = CheckpointMeta::new("distill", (step + 1) as u64, run.seed, run.steps as u64);
            save_checkpoint(
                &run.out_dir.join(format!("checkpoint_step{}.tar", step + 1)),
                &meta,
                &run.config_text,
                &store,
                &opt.state(),
            )?;
        }
    }
    log.flush()?;

    let checkpoint_path = run.out_dir.join("checkpoint_final.tar");
    let meta = CheckpointMeta::new("distill", run.steps as u64, run.seed, run.steps as u64);
    save_checkpoint(&checkpoint_path, &meta, &run.config_text, &store, &opt.state())?;

    Ok(DistillRunResult {
        store,
        records,
        checkpoint_path,
        log_path,
    })
}
