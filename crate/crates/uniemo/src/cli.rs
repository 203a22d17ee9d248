//! Command-line interface: one binary with verb-style subcommands that
//! map onto the library's pipeline stages. All experiment state lands in
//! the chosen output directory (config snapshot, checkpoints, metrics,
//! plans) so runs are self-documenting.

use crate::config::Config;
use crate::data::{
    build_caption, load_image, load_manifest, load_samples, manifest_features, save_manifest,
    select_best_split, ImageSample, SplitPlan,
};
use crate::eval::{
    evaluate_checkpoint, export_heatmap, gradcam_heatmap, load_classifier, EvalReport,
};
use crate::train::{
    gradient_check_all, load_checkpoint, run_finetune, run_pretrain, GRADCHECK_TOL,
};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Top-level argument grammar.
#[derive(Debug, Parser)]
#[command(
    name = "uniemo",
    version,
    about = "Dual-stream masked-image pretraining with teacher-guided distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the dual-stream model on a manifest dataset.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint into a classifier.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on labeled samples.
    Eval(EvalArgs),
    /// Pick the lowest-divergence stratified split over candidate seeds.
    Split(SplitArgs),
    /// Fill in missing captions from record attributes.
    Caption(CaptionArgs),
    /// Export a saliency overlay for one image and target class.
    Saliency(SaliencyArgs),
    /// Verify every differentiable component against finite differences.
    Gradcheck(CommonArgs),
    /// Pretrain, fine-tune, and evaluate once per masking ratio.
    SweepMask(SweepArgs),
}

/// Flags shared by every verb.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat key = value config file (defaults apply for absent keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set optim.total_steps=10.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory for the config snapshot, metrics, and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a previously saved pretraining checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory for the config snapshot, metrics, and checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained checkpoint whose encoder is transferred.
    #[arg(long)]
    from: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fine-tuned checkpoint to evaluate.
    #[arg(long)]
    from: PathBuf,
    /// Split plan file; `eval.split_hint` picks train, val, or test.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Directory for the eval.json report (printed either way).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory for the split.json plan.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CaptionArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory for the captions.jsonl manifest copy.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SaliencyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fine-tuned checkpoint to explain.
    #[arg(long)]
    from: PathBuf,
    /// Image to explain (resized to the model's input size if needed).
    #[arg(long)]
    image: PathBuf,
    /// Class index whose evidence is highlighted.
    #[arg(long)]
    target: usize,
    /// Directory for the saliency.png overlay.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory; each ratio gets a subdirectory plus sweep.csv.
    #[arg(long)]
    out: PathBuf,
    /// Masking ratios to compare.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75, 0.85])]
    ratios: Vec<f64>,
}

/// Parse argv and run the chosen verb. Returns the process exit status:
/// zero on success, nonzero on bad flags, failures, or (for `gradcheck`)
/// any component outside tolerance.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = err.exit_code();
            let _ = err.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Split(args) => cmd_split(args),
        Command::Caption(args) => cmd_caption(args),
        Command::Saliency(args) => cmd_saliency(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::SweepMask(args) => cmd_sweep(args),
    }
}

/// Build the effective config. Precedence, lowest to highest: built-in
/// defaults, the config file, the `UNIEMO_SEED` environment variable,
/// `--seed`, then each `--set` in order.
fn resolve_config(common: &CommonArgs) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    config.apply_env_seed()?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    for kv in &common.set {
        config.apply_text(kv)?;
    }
    config.validate()?;
    Ok(config)
}

fn manifest_path(config: &Config) -> Result<PathBuf> {
    if config.manifest.is_empty() {
        return Err(Error::invalid(
            "no manifest configured; pass --set data.manifest=PATH or set it in the config file",
        ));
    }
    Ok(PathBuf::from(&config.manifest))
}

/// Manifest records, their root directory, and fully loaded samples.
fn manifest_samples(config: &Config) -> Result<(Vec<crate::data::ManifestRecord>, PathBuf, Vec<ImageSample>)> {
    let path = manifest_path(config)?;
    let records = load_manifest(&path)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let samples = load_samples(&records, &root)?;
    Ok((records, root, samples))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Snapshot the effective config into the run directory.
fn snapshot_config(out: &Path, config: &Config) -> Result<()> {
    ensure_dir(out)?;
    write_text(&out.join("config.txt"), &config.to_text())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    let (_, _, samples) = manifest_samples(&config)?;
    let resume = args
        .resume
        .as_deref()
        .map(load_checkpoint)
        .transpose()?;
    snapshot_config(&args.out, &config)?;
    let outcome = run_pretrain(&config, &samples, Some(&args.out), resume.as_ref())?;
    if let Some(last) = outcome.reports.last() {
        println!(
            "step {}: l1 {:.6} l2 {:.6} l3 {:.6} lt {:.6}",
            last.step, last.l1, last.l2, last.l3, last.lt
        );
    }
    println!("checkpoint: {}", args.out.join("pretrain.ckpt").display());
    Ok(0)
}

fn cmd_finetune(args: FinetuneArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    let (_, _, samples) = manifest_samples(&config)?;
    let pretrained = load_checkpoint(&args.from)?;
    snapshot_config(&args.out, &config)?;
    let outcome = run_finetune(&config, &pretrained, &samples, Some(&args.out))?;
    if let Some(last) = outcome.reports.last() {
        println!("step {}: lf {:.6} acc {:.4}", last.step, last.lf, last.acc);
    }
    match outcome.val_accuracy {
        Some(val) => println!(
            "train accuracy {:.4}, held-out accuracy {:.4}",
            outcome.train_accuracy, val
        ),
        None => println!("train accuracy {:.4}", outcome.train_accuracy),
    }
    println!("checkpoint: {}", args.out.join("finetune.ckpt").display());
    Ok(0)
}

/// Samples named by one part of a split plan.
fn plan_subset(samples: &[ImageSample], plan: &SplitPlan, which: &str) -> Result<Vec<ImageSample>> {
    let idx = match which {
        "train" => &plan.train,
        "val" => &plan.val,
        "test" => &plan.test,
        other => {
            return Err(Error::invalid(format!(
                "eval.split_hint must be train, val, or test, got {other:?}"
            )))
        }
    };
    idx.iter()
        .map(|&i| {
            samples.get(i).cloned().ok_or_else(|| {
                Error::invalid(format!(
                    "split index {i} is out of range for {} samples",
                    samples.len()
                ))
            })
        })
        .collect()
}

fn read_plan(path: &Path) -> Result<SplitPlan> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("malformed split plan {}: {e}", path.display())))
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    let (_, _, samples) = manifest_samples(&config)?;
    let subset = match &args.plan {
        Some(path) => {
            let plan = read_plan(path)?;
            plan_subset(&samples, &plan, &config.eval_split)?
        }
        None => samples,
    };
    let checkpoint = load_checkpoint(&args.from)?;
    let report = evaluate_checkpoint(&checkpoint, &subset)?;
    println!(
        "accuracy {:.4} over {} samples",
        report.accuracy,
        subset.len()
    );
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let path = out.join("eval.json");
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::invalid(format!("cannot serialize report: {e}")))?;
        write_text(&path, &text)?;
        println!("report: {}", path.display());
    }
    Ok(0)
}

fn cmd_split(args: SplitArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    let path = manifest_path(&config)?;
    let records = load_manifest(&path)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let (features, labels) = manifest_features(&records, &root, config.bins_per_channel)?;
    let plan = select_best_split(&features, &labels, config.split_candidates, config.seed)?;
    ensure_dir(&args.out)?;
    let out_path = args.out.join("split.json");
    let text = serde_json::to_string_pretty(&plan)
        .map_err(|e| Error::invalid(format!("cannot serialize split plan: {e}")))?;
    write_text(&out_path, &text)?;
    println!(
        "seed {} divergence {:.6} train/val/test {}/{}/{}",
        plan.seed,
        plan.divergence_score,
        plan.train.len(),
        plan.val.len(),
        plan.test.len()
    );
    println!("plan: {}", out_path.display());
    Ok(0)
}

fn cmd_caption(args: CaptionArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    let path = manifest_path(&config)?;
    let mut records = load_manifest(&path)?;
    let mut built = 0usize;
    for record in &mut records {
        if record.caption.is_none() && !record.attributes.is_empty() {
            record.caption = Some(build_caption(&record.attributes)?);
            built += 1;
        }
    }
    ensure_dir(&args.out)?;
    let out_path = args.out.join("captions.jsonl");
    save_manifest(&records, &out_path)?;
    println!(
        "wrote {} records ({built} captions built) to {}",
        records.len(),
        out_path.display()
    );
    Ok(0)
}

fn cmd_saliency(args: SaliencyArgs) -> Result<i32> {
    let _ = resolve_config(&args.common)?;
    let checkpoint = load_checkpoint(&args.from)?;
    let (config, backbone, params) = load_classifier(&checkpoint)?;
    let raw = load_image(&args.image)?;
    let size = config.backbone.image_size;
    let base = if raw.shape() == [size, size, config.backbone.in_channels] {
        raw
    } else {
        crate::data::bilinear_resize(&raw, size, size)?
    };
    let heat = gradcam_heatmap(&backbone, &params, config.precision, &base, args.target)?;
    ensure_dir(&args.out)?;
    let out_path = args.out.join("saliency.png");
    export_heatmap(&heat, &base, &out_path)?;
    println!("wrote {}", out_path.display());
    Ok(0)
}

fn cmd_gradcheck(common: CommonArgs) -> Result<i32> {
    let config = resolve_config(&common)?;
    let checks = gradient_check_all(config.seed)?;
    let mut all_pass = true;
    for check in &checks {
        println!(
            "{:<24} max rel err {:.3e} over {:>5} comparisons  {}",
            check.component,
            check.max_rel_err,
            check.compared,
            if check.passed() { "pass" } else { "FAIL" }
        );
        all_pass &= check.passed();
    }
    println!(
        "{} of {} components within {GRADCHECK_TOL:e}",
        checks.iter().filter(|c| c.passed()).count(),
        checks.len()
    );
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let base = resolve_config(&args.common)?;
    if args.ratios.is_empty() {
        return Err(Error::invalid("sweep needs at least one masking ratio"));
    }
    let (_, _, samples) = manifest_samples(&base)?;
    ensure_dir(&args.out)?;
    let csv_path = args.out.join("sweep.csv");
    let mut csv = std::fs::File::create(&csv_path).map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;
    for &ratio in &args.ratios {
        let mut config = base.clone();
        config.backbone.mask_ratio = ratio;
        config.validate()?;
        let dir = args.out.join(format!("ratio-{ratio}"));
        snapshot_config(&dir, &config)?;
        let pre = run_pretrain(&config, &samples, Some(&dir), None)?;
        let lt = pre.reports.last().map(|r| r.lt).unwrap_or(f64::NAN);
        let ft = run_finetune(&config, &pre.checkpoint, &samples, Some(&dir))?;
        let report: EvalReport = evaluate_checkpoint(&ft.checkpoint, &samples)?;
        writeln!(csv, "{ratio:?},{lt:?},{:?}", report.accuracy).map_err(|source| Error::Io {
            path: csv_path.clone(),
            source,
        })?;
        println!(
            "ratio {ratio}: final lt {lt:.6}, accuracy {:.4}",
            report.accuracy
        );
    }
    println!("comparison: {}", csv_path.display());
    Ok(0)
}
