//! Command-line driver tying the stages together: generate the synthetic
//! corpus, pretrain the convolutional encoder on finding labels, train the
//! transformer classifier, evaluate on held-out splits, and render saliency
//! overlays.
//!
//! Every subcommand resolves its settings as flags > config file > defaults,
//! writes a run manifest into the output directory before doing any model
//! work, and finishes by rewriting that manifest with per-step logs, stats,
//! and artifact hashes. Given identical inputs and seed, every artifact a
//! command produces is byte-identical across reruns.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corvit::backbone::{BackboneConfig, NormKind};
use corvit::config::{resolve, ConfigFile};
use corvit::error::{Error, Result};
use corvit::metrics::{evaluate_scores, read_score_tsv, EvalReport, DEFAULT_TARGET_SENSITIVITY};
use corvit::model::{sha256_hex, ModelState};
use corvit::preprocess::{intensity_stats, load_image, run_pipeline, Image, PreprocessConfig};
use corvit::relevance::{relevance_propagate, render_overlay, save_overlay_png};
use corvit::synth::{self, SynthConfig, CLASS_NAMES, NUM_CLASSES};
use corvit::training::{
    load_split, pretrain_backbone, split_validation, train_classifier, LoadedSplit,
    PretrainConfig, RunManifest, TrainConfig,
};
use corvit::transformer::TransformerConfig;

#[derive(Parser)]
#[command(
    name = "corvit",
    version,
    about = "Two-stage image classifier: convolutional finding encoder + transformer head",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic benchmark corpus
    Synth(SynthArgs),
    /// Stage A: fit the convolutional encoder to the ten finding labels
    PretrainBackbone(PretrainArgs),
    /// Stage B: train the transformer classifier from a stage-A checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint (or an offline score file) and write reports
    Eval(EvalArgs),
    /// Render relevance overlays for individual images
    Saliency(SaliencyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Flat key=value config file (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving images/ and the dataset manifest
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square image edge in pixels
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest produced by `synth`
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split to train on
    #[arg(long)]
    split: Option<String>,
    /// Directory receiving the checkpoint and run manifest
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Normalization inside the encoder: `group<N>` or `batch`
    #[arg(long)]
    norm: Option<String>,
    /// Architecture preset: `desk` or `full`
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Stage-A checkpoint to start from
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Global gradient-norm bound
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Keep the encoder and finding heads fixed; only the transformer learns
    #[arg(long)]
    freeze_backbone: bool,
    /// Weight the loss by inverse class frequency
    #[arg(long)]
    class_weighted: bool,
    /// Fraction of the split carved off for validation
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split to evaluate (repeatable; default: every split in the manifest)
    #[arg(long)]
    split: Vec<String>,
    /// Offline mode: evaluate a delimited score file instead of a model
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sensitivity floor the threshold rule anchors to
    #[arg(long)]
    target_sensitivity: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image to explain (repeatable)
    #[arg(long)]
    image: Vec<PathBuf>,
    /// Class to explain, by name or index (default: the predicted class)
    #[arg(long)]
    class: Option<String>,
    /// Overlay strength in [0, 1]
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::PretrainBackbone(args) => run_pretrain(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Saliency(args) => run_saliency(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::empty()),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| {
        Error::invalid(
            "cli",
            format!("missing required setting `{flag}` (flag --{flag} or config key)"),
        )
    })
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))
}

fn class_name_list(n: usize) -> Vec<String> {
    if n == NUM_CLASSES {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("class{i}")).collect()
    }
}

/// Load and preprocess one split with its raw images kept alongside.
fn load_split_for(model: &ModelState, manifest: &Path, split: &str) -> Result<LoadedSplit> {
    let data = synth::load_manifest(manifest)?;
    let loaded = load_split(&data, split, &model.prep)?;
    if loaded.is_empty() {
        return Err(Error::invalid(
            "cli",
            format!("split `{split}` has no samples in {}", manifest.display()),
        ));
    }
    Ok(loaded)
}

fn write_report(
    report: &EvalReport,
    out_dir: &Path,
    tag: &str,
    manifest: &mut RunManifest,
) -> Result<()> {
    let txt = out_dir.join(format!("eval_{tag}.txt"));
    let tsv = out_dir.join(format!("eval_{tag}.tsv"));
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(format!("write {}", txt.display()), e))?;
    std::fs::write(&tsv, report.to_tsv()).map_err(|e| Error::io(format!("write {}", tsv.display()), e))?;
    manifest.stat(&format!("eval_{tag}_macro_auc"), format!("{:.12}", report.macro_auc));
    manifest.stat(&format!("report_{tag}_sha256"), sha256_hex(&tsv)?);
    Ok(())
}

// ---- synth ----

fn run_synth(args: SynthArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&["out-dir", "seed", "image-size"])?;
    let out_dir = required(
        args.out_dir.or_else(|| file.get("out-dir").map(PathBuf::from)),
        "out-dir",
    )?;
    let seed = resolve(args.seed, file.lookup("seed")?, 0);
    let image_size = resolve(args.image_size, file.lookup("image-size")?, 144);

    prepare_out_dir(&out_dir)?;
    let mut manifest = RunManifest::new("synth");
    manifest.config("out-dir", out_dir.display());
    manifest.config("seed", seed);
    manifest.config("image-size", image_size);
    let manifest_path = out_dir.join("synth.manifest");
    manifest.write(&manifest_path)?;

    let mut cfg = SynthConfig::desk(&out_dir, seed);
    cfg.image_size = image_size;
    let dataset_manifest = synth::generate(&cfg)?;
    let data = synth::load_manifest(&dataset_manifest)?;
    for split in data.split_names() {
        let counts = data.class_counts(&split);
        manifest.stat(
            &format!("split_{split}_counts"),
            counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
    }
    manifest.stat("dataset_manifest", dataset_manifest.display());
    manifest.stat("dataset_manifest_sha256", sha256_hex(&dataset_manifest)?);
    manifest.write(&manifest_path)?;
    println!("wrote {}", dataset_manifest.display());
    Ok(())
}

// ---- pretrain-backbone ----

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&[
        "manifest", "split", "out-dir", "seed", "steps", "lr", "batch-size", "norm", "preset",
    ])?;
    let manifest_path = required(
        args.manifest.or_else(|| file.get("manifest").map(PathBuf::from)),
        "manifest",
    )?;
    let out_dir = required(
        args.out_dir.or_else(|| file.get("out-dir").map(PathBuf::from)),
        "out-dir",
    )?;
    let split = resolve(args.split, file.get("split").map(String::from), "train".into());
    let seed = resolve(args.seed, file.lookup("seed")?, 0);
    let preset = resolve(args.preset, file.get("preset").map(String::from), "desk".into());
    let norm_str = resolve(args.norm, file.get("norm").map(String::from), "group8".into());
    let cfg = PretrainConfig {
        lr: resolve(args.lr, file.lookup("lr")?, 3e-4),
        steps: resolve(args.steps, file.lookup("steps")?, 400),
        batch_size: resolve(args.batch_size, file.lookup("batch-size")?, 8),
        seed,
    };

    let norm = NormKind::parse(&norm_str)
        .ok_or_else(|| Error::invalid("cli", format!("bad --norm `{norm_str}` (group<N> or batch)")))?;
    let (mut backbone, vit) = match preset.as_str() {
        "desk" => (BackboneConfig::desk(), TransformerConfig::desk()),
        "full" => (BackboneConfig::full_scale(), TransformerConfig::desk()),
        other => return Err(Error::invalid("cli", format!("bad --preset `{other}`"))),
    };
    backbone.norm = norm;

    prepare_out_dir(&out_dir)?;
    let mut run = RunManifest::new("pretrain-backbone");
    run.config("manifest", manifest_path.display());
    run.config("split", &split);
    run.config("out-dir", out_dir.display());
    run.config("seed", seed);
    run.config("steps", cfg.steps);
    run.config("lr", format!("{:e}", cfg.lr));
    run.config("batch-size", cfg.batch_size);
    run.config("norm", norm.as_str());
    run.config("preset", &preset);
    let run_path = out_dir.join("pretrain-backbone.manifest");
    run.write(&run_path)?;

    // dataset statistics feed the normalization stage and ride along in the
    // checkpoint
    let data = synth::load_manifest(&manifest_path)?;
    let images: Vec<Image> = data
        .samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| load_image(&s.path))
        .collect::<Result<_>>()?;
    if images.is_empty() {
        return Err(Error::invalid("cli", format!("split `{split}` is empty")));
    }
    let (mean, std) = intensity_stats(images.iter());
    let prep = PreprocessConfig {
        mean,
        std,
        ..PreprocessConfig::default()
    };
    run.stat("preprocess_mean", format!("{mean:.12e}"));
    run.stat("preprocess_std", format!("{std:.12e}"));

    let mut model = ModelState::init(backbone, vit, prep, seed)?;
    let mut loaded = LoadedSplit::default();
    for (img, sample) in images.iter().zip(data.samples.iter().filter(|s| s.split == split)) {
        loaded.inputs.push(run_pipeline(img, &model.prep)?);
        loaded.classes.push(sample.class);
        loaded.findings.push(sample.findings);
    }
    run.stat("samples", loaded.len());

    let stats = pretrain_backbone(&mut model, &loaded, &cfg, &mut run)?;
    let reduction = 1.0 - stats.final_bce / stats.initial_bce;
    run.stat("bce_reduction", format!("{reduction:.6}"));

    let ckpt = out_dir.join("stage_a.ckpt");
    model.save(&ckpt)?;
    run.checkpoint(&ckpt, &sha256_hex(&ckpt)?);
    run.write(&run_path)?;
    println!(
        "stage A done: finding BCE {:.4} -> {:.4} ({:.1}% reduction), checkpoint {}",
        stats.initial_bce,
        stats.final_bce,
        100.0 * reduction,
        ckpt.display()
    );
    Ok(())
}

// ---- train ----

fn run_train(args: TrainArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&[
        "manifest",
        "split",
        "checkpoint",
        "out-dir",
        "seed",
        "steps",
        "warmup",
        "lr",
        "momentum",
        "clip",
        "batch-size",
        "freeze-backbone",
        "class-weighted",
        "val-fraction",
    ])?;
    let manifest_path = required(
        args.manifest.or_else(|| file.get("manifest").map(PathBuf::from)),
        "manifest",
    )?;
    let ckpt_in = required(
        args.checkpoint.or_else(|| file.get("checkpoint").map(PathBuf::from)),
        "checkpoint",
    )?;
    let out_dir = required(
        args.out_dir.or_else(|| file.get("out-dir").map(PathBuf::from)),
        "out-dir",
    )?;
    let split = resolve(args.split, file.get("split").map(String::from), "train".into());
    let seed = resolve(args.seed, file.lookup("seed")?, 0);
    let freeze = args.freeze_backbone || file.lookup("freeze-backbone")?.unwrap_or(false);
    let class_weighted = args.class_weighted || file.lookup("class-weighted")?.unwrap_or(false);
    let val_fraction = resolve(args.val_fraction, file.lookup("val-fraction")?, 0.1);
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid("cli", "val-fraction must be in [0, 1)"));
    }
    let cfg = TrainConfig {
        lr: resolve(args.lr, file.lookup("lr")?, 1e-3),
        momentum: resolve(args.momentum, file.lookup("momentum")?, 0.9),
        max_grad_norm: resolve(args.clip, file.lookup("clip")?, 1.0),
        total_steps: resolve(args.steps, file.lookup("steps")?, 2000),
        warmup_steps: resolve(args.warmup, file.lookup("warmup")?, 100),
        batch_size: resolve(args.batch_size, file.lookup("batch-size")?, 8),
        backbone_trainable: !freeze,
        class_weighted,
        seed,
    };
    cfg.validate()?;

    prepare_out_dir(&out_dir)?;
    let mut run = RunManifest::new("train");
    run.config("manifest", manifest_path.display());
    run.config("split", &split);
    run.config("checkpoint", ckpt_in.display());
    run.config("checkpoint_sha256", sha256_hex(&ckpt_in)?);
    run.config("out-dir", out_dir.display());
    run.config("seed", seed);
    run.config("steps", cfg.total_steps);
    run.config("warmup", cfg.warmup_steps);
    run.config("lr", format!("{:e}", cfg.lr));
    run.config("momentum", cfg.momentum);
    run.config("clip", cfg.max_grad_norm);
    run.config("batch-size", cfg.batch_size);
    run.config("freeze-backbone", freeze);
    run.config("class-weighted", class_weighted);
    run.config("val-fraction", val_fraction);
    let run_path = out_dir.join("train.manifest");
    run.write(&run_path)?;

    // start from the stage-A encoder but a freshly seeded transformer
    let mut model = ModelState::load(&ckpt_in)?;
    let fresh = ModelState::init(model.backbone.clone(), model.vit.clone(), model.prep.clone(), seed)?;
    for (name, t) in fresh.params.iter() {
        if name.starts_with("vit.") {
            *model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::invalid("cli", format!("checkpoint lacks {name}")))? = t.clone();
        }
    }

    let all = load_split_for(&model, &manifest_path, &split)?;
    let (train_data, val_data) = split_validation(&all, val_fraction, seed);
    run.stat("train_samples", train_data.len());
    run.stat("val_samples", val_data.len());

    train_classifier(&mut model, &train_data, &cfg, &mut run)?;

    let ckpt_out = out_dir.join("stage_b.ckpt");
    model.save(&ckpt_out)?;
    run.checkpoint(&ckpt_out, &sha256_hex(&ckpt_out)?);

    if !val_data.is_empty() {
        let probs = corvit::training::predict_probs(&mut model, &val_data, cfg.batch_size)?;
        let names = class_name_list(model.vit.num_classes);
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        match evaluate_scores(
            &probs,
            model.vit.num_classes,
            &val_data.classes,
            &name_refs,
            DEFAULT_TARGET_SENSITIVITY,
        ) {
            Ok(report) => run.stat("val_macro_auc", format!("{:.12}", report.macro_auc)),
            Err(e) => run.stat("val_macro_auc", format!("unavailable ({e})")),
        }
    }
    run.write(&run_path)?;
    println!("stage B done: checkpoint {}", ckpt_out.display());
    Ok(())
}

// ---- eval ----

fn run_eval(args: EvalArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&[
        "manifest",
        "checkpoint",
        "split",
        "scores",
        "out-dir",
        "target-sensitivity",
        "batch-size",
    ])?;
    let out_dir = required(
        args.out_dir.or_else(|| file.get("out-dir").map(PathBuf::from)),
        "out-dir",
    )?;
    let target = resolve(
        args.target_sensitivity,
        file.lookup("target-sensitivity")?,
        DEFAULT_TARGET_SENSITIVITY,
    );
    let batch = resolve(args.batch_size, file.lookup("batch-size")?, 8);
    let scores = args.scores.or_else(|| file.get("scores").map(PathBuf::from));

    prepare_out_dir(&out_dir)?;
    let mut run = RunManifest::new("eval");
    run.config("out-dir", out_dir.display());
    run.config("target-sensitivity", target);
    let run_path = out_dir.join("eval.manifest");

    if let Some(score_path) = scores {
        // offline mode: no model involved
        run.config("scores", score_path.display());
        run.write(&run_path)?;
        let (labels, probs, names) = read_score_tsv(&score_path)?;
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let report = evaluate_scores(&probs, names.len(), &labels, &name_refs, target)?;
        print!("{}", report.to_text());
        write_report(&report, &out_dir, "scores", &mut run)?;
        run.write(&run_path)?;
        return Ok(());
    }

    let manifest_path = required(
        args.manifest.or_else(|| file.get("manifest").map(PathBuf::from)),
        "manifest",
    )?;
    let ckpt = required(
        args.checkpoint.or_else(|| file.get("checkpoint").map(PathBuf::from)),
        "checkpoint",
    )?;
    run.config("manifest", manifest_path.display());
    run.config("checkpoint", ckpt.display());
    run.config("checkpoint_sha256", sha256_hex(&ckpt)?);
    run.config("batch-size", batch);

    let data = synth::load_manifest(&manifest_path)?;
    let mut splits = if args.split.is_empty() {
        match file.get("split") {
            Some(s) => vec![s.to_string()],
            None => data.split_names(),
        }
    } else {
        args.split.clone()
    };
    splits.sort();
    splits.dedup();
    for s in &splits {
        run.config("split", s);
    }
    run.write(&run_path)?;

    let mut model = ModelState::load(&ckpt)?;
    let names = class_name_list(model.vit.num_classes);
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    for split in &splits {
        let loaded = load_split_for(&model, &manifest_path, split)?;
        let probs = corvit::training::predict_probs(&mut model, &loaded, batch)?;
        let report = evaluate_scores(&probs, model.vit.num_classes, &loaded.classes, &name_refs, target)?;
        println!("split {split}:");
        print!("{}", report.to_text());
        write_report(&report, &out_dir, split, &mut run)?;
    }
    run.write(&run_path)?;
    Ok(())
}

// ---- saliency ----

fn run_saliency(args: SaliencyArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    file.check_known(&["checkpoint", "image", "class", "alpha", "out-dir"])?;
    let ckpt = required(
        args.checkpoint.or_else(|| file.get("checkpoint").map(PathBuf::from)),
        "checkpoint",
    )?;
    let out_dir = required(
        args.out_dir.or_else(|| file.get("out-dir").map(PathBuf::from)),
        "out-dir",
    )?;
    let alpha = resolve(args.alpha, file.lookup("alpha")?, 0.6);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("cli", "alpha must be in [0, 1]"));
    }
    let mut images = args.image.clone();
    if images.is_empty() {
        if let Some(p) = file.get("image") {
            images.push(PathBuf::from(p));
        }
    }
    if images.is_empty() {
        return Err(Error::invalid("cli", "no --image given"));
    }
    let class_arg = args.class.or_else(|| file.get("class").map(String::from));

    prepare_out_dir(&out_dir)?;
    let mut run = RunManifest::new("saliency");
    run.config("checkpoint", ckpt.display());
    run.config("checkpoint_sha256", sha256_hex(&ckpt)?);
    run.config("out-dir", out_dir.display());
    run.config("alpha", alpha);
    for img in &images {
        run.config("image", img.display());
    }
    if let Some(c) = &class_arg {
        run.config("class", c);
    }
    let run_path = out_dir.join("saliency.manifest");
    run.write(&run_path)?;

    let mut model = ModelState::load(&ckpt)?;
    let names = class_name_list(model.vit.num_classes);
    let fixed_class = class_arg
        .map(|c| parse_class(&c, &names))
        .transpose()?;

    for path in &images {
        let img = load_image(path)?;
        let x = model.preprocess(&img)?;
        let (mut tape, _bound, trace) = model.forward(&x, true, false)?;
        let logits = tape.data(trace.logits).to_vec();
        let class = fixed_class.unwrap_or_else(|| argmax(&logits));
        let map = relevance_propagate(&mut tape, &trace, class)?;
        let rgb = render_overlay(&map, &img, alpha);
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("cli", format!("bad image path {}", path.display())))?;
        let out = out_dir.join(format!("{stem}_saliency.png"));
        save_overlay_png(&out, &rgb, img.height(), img.width())?;
        let (cy, cx) = map.argmax_cell();
        run.stat(&format!("saliency_{stem}_class"), &names[class]);
        run.stat(&format!("saliency_{stem}_cell"), format!("{cy},{cx}"));
        if map.degenerate {
            run.stat(&format!("saliency_{stem}_degenerate"), "true");
        }
        run.stat(&format!("saliency_{stem}_sha256"), sha256_hex(&out)?);
        println!("wrote {} (class {}, peak cell {},{})", out.display(), names[class], cy, cx);
    }
    run.write(&run_path)?;
    Ok(())
}

fn parse_class(s: &str, names: &[String]) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == s) {
        return Ok(i);
    }
    s.parse::<usize>()
        .ok()
        .filter(|&i| i < names.len())
        .ok_or_else(|| {
            Error::invalid(
                "cli",
                format!("unknown class `{s}` (expected one of {} or an index)", names.join(", ")),
            )
        })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
