//! `irstd` — reproducible runs for the small-target detector: distillation,
//! fine-tuning, evaluation, prediction, synthetic data, and op-count
//! profiling.
//!
//! Settings resolve defaults ← `--config` file ← `--set key=value` flags ←
//! named flags; the fully resolved configuration is written into every
//! output directory (and embedded in checkpoints). Exit codes: 0 success,
//! 1 runtime failure, 2 usage/config error.

use clap::{Args, Parser, Subcommand};
use irstd_core::config::{
    resolve_eval, resolve_loss, resolve_model, resolve_optim, resolve_out_dir, resolve_profile,
    resolve_schedule, resolve_student, resolve_synth, ConfigMap, Resolver,
};
use irstd_core::data::{
    load_image, load_mask, save_mask, synth_generate, write_dataset, Dataset, DatasetOptions,
    Sample,
};
use irstd_core::distill::{distill_run, DistillRunConfig};
use irstd_core::graph::Graph;
use irstd_core::metrics::{evaluate, DetectionReport};
use irstd_core::model::IrstdModel;
use irstd_core::nn::ParamStore;
use irstd_core::query::{bi_attn_cost, labels, BiDirectionAttention};
use irstd_core::train::{train_run, TrainAugment, TrainRunConfig};
use irstd_core::Error;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "irstd",
    version,
    about = "Infrared small-target detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill the encoder + query engine from the mock granularity teacher.
    Distill(RunArgs),
    /// Fine-tune the full model with point-sampled mask losses.
    Train(RunArgs),
    /// Score predicted masks against ground truth (two directories).
    Eval(EvalArgs),
    /// Write binarized final-head masks for a directory of images.
    Predict(PredictArgs),
    /// Materialize a synthetic dataset to the standard layout.
    Synth(SynthArgs),
    /// Print the bi-direction attention cost model (and measured counters).
    Profile(ProfileArgs),
}

/// Flags shared by the two training commands. Named flags override
/// `--set`, which overrides the `--config` file.
#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable): --set loss.point_count=64
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Width preset: desk or paper.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (relative paths resolve under $IRSTD_OUT_ROOT).
    #[arg(long)]
    out: Option<String>,
    /// Dataset root, or "synth" for generated data.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Teacher point prompts per image (distill only).
    #[arg(long)]
    prompts: Option<usize>,
    /// Teacher implementation (distill only; "mock" is the only one).
    #[arg(long)]
    teacher: Option<String>,
    /// Augmentation switch (train only): on or off.
    #[arg(long)]
    augment: Option<String>,
    /// Warm-start from a distillation checkpoint (train only).
    #[arg(long = "init-from")]
    init_from: Option<String>,
    /// Resume a checkpoint of the same kind.
    #[arg(long)]
    resume: Option<String>,
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<usize>,
    /// Evaluate on the training set every N steps (train only).
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks (*.png).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks with matching stems.
    #[arg(long)]
    gt: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write a per-image CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fine-tuned checkpoint archive.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (reads images/), or "synth".
    #[arg(long)]
    data: String,
    /// Directory the masks are written to.
    #[arg(long)]
    out: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory the dataset is written to.
    #[arg(long)]
    out: String,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, default_value_t = 1)]
    b: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    /// Heads for the measured block (must divide d).
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Also run the instrumented block at these dims and print measured
    /// operation counters (expensive at paper-scale dims).
    #[arg(long, default_value_t = false)]
    measure: bool,
}

/// A failure carrying its process exit code: 2 for usage/config, 1 for
/// anything that went wrong at runtime.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("config error: {m}")),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Distill(a) => cmd_distill(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Profile(a) => cmd_profile(a),
    };
    match outcome {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {}", f.message());
            std::process::exit(f.code());
        }
    }
}

// ------------------------------------------------------------ plumbing

/// Layer the configuration: file ← --set pairs ← named-flag pairs.
fn overlay(
    file: &Option<PathBuf>,
    sets: &[String],
    flags: &[(&str, Option<String>)],
) -> Result<ConfigMap, Failure> {
    let mut map = match file {
        Some(path) => ConfigMap::from_file(path)?,
        None => ConfigMap::new(),
    };
    for pair in sets {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            Failure::Usage(format!("--set expects key=value, got '{pair}'"))
        })?;
        map.set(k.trim(), v.trim());
    }
    for (key, value) in flags {
        if let Some(v) = value {
            map.set(key, v);
        }
    }
    Ok(map)
}

/// Load training samples from `data.source`: "synth" generates
/// `synth.count` samples from the `synth.*` keys; anything else is a
/// dataset root in the standard layout.
fn load_samples(r: &mut Resolver) -> Result<Vec<Sample>, Failure> {
    let source = r.take_string("data.source", "synth");
    if source == "synth" {
        let cfg = resolve_synth(r)?;
        let count = r.take("synth.count", 32usize)?;
        return Ok(synth_generate(&cfg, count)?);
    }
    let root = PathBuf::from(&source);
    if !root.is_dir() {
        return Err(Failure::Usage(format!(
            "data root {} does not exist",
            root.display()
        )));
    }
    let manifest = match r.take_optional("data.manifest") {
        Some(m) => PathBuf::from(m),
        None => root.join("manifest.txt"),
    };
    let options = DatasetOptions {
        exclude: r.take_optional("data.exclude").map(PathBuf::from),
        resize_to: match r.take_optional("data.resize") {
            Some(raw) => Some(parse_resize(&raw)?),
            None => None,
        },
    };
    let dataset = Dataset::open(&root, &manifest, options)?;
    Ok(dataset.load_all()?)
}

fn parse_resize(raw: &str) -> Result<(usize, usize), Failure> {
    let parts: Vec<&str> = raw.split(',').map(|p| p.trim()).collect();
    let parsed: Option<(usize, usize)> = match parts.as_slice() {
        [a, b] => a.parse().ok().zip(b.parse().ok()),
        _ => None,
    };
    parsed.ok_or_else(|| Failure::Usage(format!("data.resize expects 'h,w', got '{raw}'")))
}

/// Every run directory gets the resolved config and an INCOMPLETE marker
/// that is removed only when the command finishes.
fn start_run_dir(out_dir: &Path, config_text: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), config_text)?;
    std::fs::write(
        out_dir.join("INCOMPLETE"),
        "run in progress or aborted; outputs may be partial\n",
    )?;
    Ok(())
}

fn finish_run_dir(out_dir: &Path) -> Result<(), Failure> {
    let marker = out_dir.join("INCOMPLETE");
    if marker.exists() {
        std::fs::remove_file(marker)?;
    }
    Ok(())
}

// ------------------------------------------------------------ commands

fn cmd_distill(a: RunArgs) -> CmdResult {
    if a.augment.is_some() || a.init_from.is_some() || a.eval_every.is_some() {
        return Err(Failure::Usage(
            "--augment/--init-from/--eval-every apply to `train`, not `distill`".into(),
        ));
    }
    let map = overlay(
        &a.config,
        &a.sets,
        &[
            ("profile", a.profile),
            ("seed", a.seed.map(|v| v.to_string())),
            ("out", a.out),
            ("data.source", a.data),
            ("distill.steps", a.steps.map(|v| v.to_string())),
            ("distill.batch", a.batch.map(|v| v.to_string())),
            ("distill.prompts", a.prompts.map(|v| v.to_string())),
            ("distill.teacher", a.teacher),
            ("distill.resume", a.resume),
            (
                "distill.checkpoint_every",
                a.checkpoint_every.map(|v| v.to_string()),
            ),
        ],
    )?;
    let mut r = Resolver::new(map);
    let profile = resolve_profile(&mut r)?;
    let student = resolve_student(&mut r, profile)?;
    let loss = resolve_loss(&mut r)?;
    let optim = resolve_optim(&mut r)?;
    let steps = r.take("distill.steps", 300usize)?;
    let schedule = resolve_schedule(&mut r, "multistep", steps)?;
    let teacher = r.take_string("distill.teacher", "mock");
    if teacher != "mock" {
        return Err(Failure::Usage(format!(
            "distill.teacher: only 'mock' is available, got '{teacher}'"
        )));
    }
    let batch_size = r.take("distill.batch", 2usize)?;
    let n_prompts = r.take("distill.prompts", 2usize)?;
    let checkpoint_every = r.take("distill.checkpoint_every", 0usize)?;
    let resume = r.take_optional("distill.resume").map(PathBuf::from);
    let seed = r.take("seed", 0u64)?;
    let out_dir = resolve_out_dir(&r.take_string("out", "runs/distill"));
    let samples = load_samples(&mut r)?;
    let config_text = r.finish()?;

    start_run_dir(&out_dir, &config_text)?;
    let run = DistillRunConfig {
        steps,
        batch_size,
        n_prompts,
        seed,
        loss,
        optim,
        schedule,
        checkpoint_every,
        out_dir: out_dir.clone(),
        resume,
        config_text,
    };
    let result = distill_run(&samples, student, &run)?;
    finish_run_dir(&out_dir)?;

    let first = result.records.first().expect("at least one step");
    let last = result.records.last().expect("at least one step");
    println!("samples={} steps={}", samples.len(), steps);
    println!("first_loss={} last_loss={}", first.loss.total, last.loss.total);
    println!("checkpoint={}", result.checkpoint_path.display());
    println!("log={}", result.log_path.display());
    Ok(())
}

fn cmd_train(a: RunArgs) -> CmdResult {
    if a.prompts.is_some() || a.teacher.is_some() {
        return Err(Failure::Usage(
            "--prompts/--teacher apply to `distill`, not `train`".into(),
        ));
    }
    let map = overlay(
        &a.config,
        &a.sets,
        &[
            ("profile", a.profile),
            ("seed", a.seed.map(|v| v.to_string())),
            ("out", a.out),
            ("data.source", a.data),
            ("train.steps", a.steps.map(|v| v.to_string())),
            ("train.batch", a.batch.map(|v| v.to_string())),
            ("train.augment", a.augment),
            ("train.init_from", a.init_from),
            ("train.resume", a.resume),
            (
                "train.checkpoint_every",
                a.checkpoint_every.map(|v| v.to_string()),
            ),
            ("train.eval_every", a.eval_every.map(|v| v.to_string())),
        ],
    )?;
    let mut r = Resolver::new(map);
    let profile = resolve_profile(&mut r)?;
    let model = resolve_model(&mut r, profile)?;
    let loss = resolve_loss(&mut r)?;
    let optim = resolve_optim(&mut r)?;
    let eval = resolve_eval(&mut r)?;
    let steps = r.take("train.steps", 500usize)?;
    let schedule = resolve_schedule(&mut r, "cosine", steps)?;
    let batch_size = r.take("train.batch", 2usize)?;
    let augment = if r.take_bool("train.augment", true)? {
        Some(TrainAugment {
            scale_range: r.take_pair("train.scale", (0.5, 2.0))?,
            crop: r.take_pair("train.crop", (0usize, 0usize))?,
        })
    } else {
        None
    };
    let checkpoint_every = r.take("train.checkpoint_every", 0usize)?;
    let eval_every = r.take("train.eval_every", 0usize)?;
    let resume = r.take_optional("train.resume").map(PathBuf::from);
    let init_from = r.take_optional("train.init_from").map(PathBuf::from);
    let seed = r.take("seed", 0u64)?;
    let out_dir = resolve_out_dir(&r.take_string("out", "runs/train"));
    let samples = load_samples(&mut r)?;
    let config_text = r.finish()?;

    start_run_dir(&out_dir, &config_text)?;
    let run = TrainRunConfig {
        steps,
        batch_size,
        seed,
        loss,
        optim,
        schedule,
        augment,
        checkpoint_every,
        eval_every,
        eval,
        out_dir: out_dir.clone(),
        resume,
        init_from,
        config_text,
    };
    let result = train_run(&samples, model, &run)?;
    finish_run_dir(&out_dir)?;

    let first = result.records.first().expect("at least one step");
    let last = result.records.last().expect("at least one step");
    let final_eval = result.evals.last().expect("final evaluation always runs");
    println!("samples={} steps={}", samples.len(), steps);
    println!("first_loss={} last_loss={}", first.loss.total, last.loss.total);
    println!(
        "final_iou={} final_pd={} final_fa={}",
        final_eval.iou,
        final_eval
            .pd
            .map(|v| v.to_string())
            .unwrap_or_else(|| "undefined".into()),
        final_eval.fa
    );
    println!("checkpoint={}", result.checkpoint_path.display());
    println!("log={}", result.log_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    for (name, dir) in [("pred", &a.pred), ("gt", &a.gt)] {
        if !dir.is_dir() {
            return Err(Failure::Usage(format!(
                "{name} directory {} does not exist",
                dir.display()
            )));
        }
    }
    let map = overlay(&a.config, &a.sets, &[])?;
    let mut r = Resolver::new(map);
    let eval_cfg = resolve_eval(&mut r)?;
    r.finish()?;

    let mut stems: Vec<String> = std::fs::read_dir(&a.pred)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Failure::Usage(format!(
            "no .png masks found in {}",
            a.pred.display()
        )));
    }
    let mut pairs: Vec<(Array2<bool>, Array2<bool>)> = Vec::with_capacity(stems.len());
    for stem in &stems {
        let gt_path = a.gt.join(format!("{stem}.png"));
        if !gt_path.exists() {
            return Err(Failure::Runtime(format!(
                "no ground-truth mask for '{stem}' (expected {})",
                gt_path.display()
            )));
        }
        let (pred, _) = load_mask(&a.pred.join(format!("{stem}.png")))?;
        let (gt, _) = load_mask(&gt_path)?;
        pairs.push((pred, gt));
    }
    let report = evaluate(&pairs, &eval_cfg)?;
    print!("{}", report.render_table());
    if let Some(path) = &a.json {
        let rendered =
            serde_json::to_string_pretty(&report.to_json()).expect("plain JSON value renders");
        std::fs::write(path, rendered + "\n")?;
        println!("json={}", path.display());
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, per_image_csv(&stems, &report))?;
        println!("csv={}", path.display());
    }
    Ok(())
}

fn per_image_csv(stems: &[String], report: &DetectionReport) -> String {
    let mut out = String::from("id,iou,n_targets,n_detected,false_pixels,total_pixels\n");
    for (stem, e) in stems.iter().zip(&report.per_image) {
        out.push_str(&format!(
            "{stem},{},{},{},{},{}\n",
            e.iou(),
            e.n_targets,
            e.n_detected,
            e.false_pixels,
            e.total_pixels
        ));
    }
    out
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let ckpt = irstd_core::checkpoint::load_checkpoint(&a.checkpoint)?;
    if ckpt.meta.kind != "train" {
        return Err(Failure::Usage(format!(
            "predict needs a fine-tuned checkpoint; {} is '{}'",
            a.checkpoint.display(),
            ckpt.meta.kind
        )));
    }
    // The embedded (already validated) config carries the model geometry;
    // extra run keys in it are ignored here.
    let mut r = Resolver::new(ConfigMap::parse(&ckpt.config_text)?);
    let profile = resolve_profile(&mut r)?;
    let model_cfg = resolve_model(&mut r, profile)?;
    let mut store = ParamStore::new(ckpt.meta.seed);
    let model = IrstdModel::new(&mut store, model_cfg)?;
    ckpt.apply_all(&store)?;

    // Inference inputs: generated samples, or images/*.png under the root.
    let map = overlay(&a.config, &a.sets, &[("data.source", Some(a.data.clone()))])?;
    let mut ir = Resolver::new(map);
    let source = ir.take_string("data.source", "synth");
    let resize = match ir.take_optional("data.resize") {
        Some(raw) => Some(parse_resize(&raw)?),
        None => None,
    };
    let mut inputs: Vec<(String, ArrayD<f64>)> = Vec::new();
    if source == "synth" {
        let cfg = resolve_synth(&mut ir)?;
        let count = ir.take("synth.count", 8usize)?;
        ir.finish()?;
        for s in synth_generate(&cfg, count)? {
            inputs.push((s.id.clone(), s.image.clone()));
        }
    } else {
        ir.finish()?;
        let root = PathBuf::from(&source);
        let images = root.join("images");
        if !images.is_dir() {
            return Err(Failure::Usage(format!(
                "data root {} does not exist (expected an images/ directory)",
                root.display()
            )));
        }
        let mut stems: Vec<String> = std::fs::read_dir(&images)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        stems.sort();
        for stem in stems {
            let mut img = load_image(&images.join(format!("{stem}.png")))?;
            if let Some((h, w)) = resize {
                let shape = img.shape().to_vec();
                let flat = img
                    .into_shape_with_order(IxDyn(&[shape[1], shape[2]]))
                    .expect("gray image");
                let gray: Array2<f64> = flat
                    .into_dimensionality()
                    .expect("2-d image");
                let resized = irstd_core::data::bilinear_resize_gray(&gray, h, w);
                img = resized
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[1, h, w]))
                    .expect("resized image");
            }
            inputs.push((stem, img));
        }
    }
    if inputs.is_empty() {
        return Err(Failure::Usage("no input images found".into()));
    }

    let out_dir = resolve_out_dir(&a.out);
    std::fs::create_dir_all(&out_dir)?;
    for (id, image) in &inputs {
        let shape = image.shape().to_vec();
        let mut g = Graph::new();
        let x = g.constant(
            image
                .clone()
                .into_shape_with_order(IxDyn(&[1, shape[0], shape[1], shape[2]]))
                .expect("image is [c,h,w]"),
        );
        let outputs = model.forward(&mut g, x)?;
        let mask = outputs.final_mask.binarize(&g).remove(0);
        save_mask(&out_dir.join(format!("{id}.png")), &mask)?;
    }
    println!("wrote {} masks to {}", inputs.len(), out_dir.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let map = overlay(
        &a.config,
        &a.sets,
        &[
            ("synth.count", a.count.map(|v| v.to_string())),
            ("synth.seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    let mut r = Resolver::new(map);
    let cfg = resolve_synth(&mut r)?;
    let count = r.take("synth.count", 32usize)?;
    let config_text = r.finish()?;

    let out_dir = resolve_out_dir(&a.out);
    let samples = synth_generate(&cfg, count)?;
    std::fs::create_dir_all(&out_dir)?;
    write_dataset(&out_dir, &samples)?;
    std::fs::write(out_dir.join("config.txt"), config_text)?;
    println!("wrote {} samples to {}", samples.len(), out_dir.display());
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> CmdResult {
    let cost = bi_attn_cost(a.b, a.n, a.d, a.h, a.w);
    println!("formula=34*b*n*d^2 + 8*b*h*w*d^2 + 8*b*n*h*w*d + 4*b*n^2*d");
    println!("b={} n={} d={} h={} w={}", a.b, a.n, a.d, a.h, a.w);
    println!("query_proj_ops={}", cost.query_proj_ops);
    println!("feature_proj_ops={}", cost.feature_proj_ops);
    println!("cross_ops={}", cost.cross_ops);
    println!("self_ops={}", cost.self_ops);
    println!("total_ops={}", cost.total_ops);

    if a.measure {
        if a.d % a.heads != 0 {
            return Err(Failure::Usage(format!(
                "--heads {} must divide --d {}",
                a.heads, a.d
            )));
        }
        let mut store = ParamStore::new(0);
        let block = BiDirectionAttention::new(&mut store, "bi_attn", a.d, a.d, a.heads)?;
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = g.constant(ArrayD::from_shape_fn(IxDyn(&[a.b, a.n, a.d]), |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let f = g.constant(ArrayD::from_shape_fn(
            IxDyn(&[a.b, a.d, a.h, a.w]),
            |_| rng.gen_range(-1.0..1.0),
        ));
        block.forward(&mut g, q, f)?;
        let counts = g.counts();
        let measured = [
            ("measured.query_proj_ops", 2 * counts.get(labels::ND2)),
            ("measured.feature_proj_ops", 2 * counts.get(labels::HWD2)),
            ("measured.cross_ops", 2 * counts.get(labels::NHWD)),
            ("measured.self_ops", 2 * counts.get(labels::N2D)),
        ];
        let mut total = 0u64;
        for (label, ops) in measured {
            println!("{label}={ops}");
            total += ops;
        }
        println!("measured.total_ops={total}");
        println!("measured.extra_ops={}", 2 * counts.get(labels::EXTRA));
        println!("measured.matches_formula={}", total == cost.total_ops);
    }
    Ok(())
}
