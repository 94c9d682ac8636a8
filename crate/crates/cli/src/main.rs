//! `zsad`: generate synthetic feature sets, train, evaluate, score single
//! bundles and verify gradients.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use zsad_core::eval::{evaluate, infer, EvalOptions, EvalReport};
use zsad_core::io::{
    gen_synthetic, load_dataset, read_bundle, read_checkpoint, write_checkpoint, write_dataset, write_heatmap,
    Checkpoint, SynthSpec,
};
use zsad_core::metrics::{ProSweep, PRO_QUANTILES};
use zsad_core::train::train_with;
use zsad_core::verify::grad_check;
use zsad_core::{Error, Scoring, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "zsad", version, about = "Zero-shot anomaly detection on frozen encoder features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset of feature bundles plus a manifest.
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint with its loss history.
    Train(TrainArgs),
    /// Score a dataset split and write a JSON report.
    Eval(EvalArgs),
    /// Score one bundle; prints the image score.
    Infer(InferArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Retrain and evaluate across values of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, clap::Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    categories: Option<usize>,
    /// Bundles per split per category.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    /// Patch grid as HxW.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with any generator fields; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Keep only these categories.
    #[arg(long = "only", value_name = "CATEGORY")]
    only: Vec<String>,
    /// Drop these categories.
    #[arg(long = "exclude", value_name = "CATEGORY")]
    exclude: Vec<String>,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, clap::Args)]
struct ScoringArgs {
    /// Override the checkpoint's temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Override the checkpoint's global/local mix.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for one PGM heatmap per image.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    fpr_limit: f64,
    /// Quantile thresholds for the region-overlap curve; 0 sweeps every score.
    #[arg(long, default_value_t = PRO_QUANTILES)]
    pro_thresholds: usize,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Debug, clap::Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Debug, clap::Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepParam {
    Gamma,
    Xi,
}

#[derive(Debug, clap::Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Split to evaluate after each run.
    #[arg(long, default_value = "test")]
    eval_split: String,
    /// Categories to evaluate on; defaults to the excluded ones, or all.
    #[arg(long = "eval-only", value_name = "CATEGORY")]
    eval_only: Vec<String>,
    /// `.csv` writes CSV, anything else JSON. Printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?))
}

fn log_config<T: Serialize>(what: &str, value: &T) {
    eprintln!("{what}: {}", serde_json::to_string(value).expect("config serializes"));
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = args.categories {
        spec.n_categories = v;
    }
    if let Some(v) = args.samples {
        spec.samples_per_split = v;
    }
    if let Some(v) = args.anomaly_rate {
        spec.anomaly_rate = v;
    }
    if let Some(v) = args.grid {
        spec.grid = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    log_config("resolved spec", &spec);
    let ds = gen_synthetic(&spec)?;
    let manifest = write_dataset(&args.out, &ds)?;
    let n: usize = manifest.categories.iter().map(|c| c.train.len() + c.test.len()).sum();
    eprintln!("wrote {n} bundles in {} categories to {}", manifest.categories.len(), args.out.display());
    Ok(())
}

fn train_config(path: Option<&Path>, seed: Option<u64>, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn history_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ckpt.with_file_name(format!("{stem}.history.jsonl"))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = train_config(args.config.as_deref(), args.seed, args.epochs)?;
    for c in &args.data.exclude {
        if !cfg.exclude_categories.contains(c) {
            cfg.exclude_categories.push(c.clone());
        }
    }
    cfg.validate()?;
    log_config("resolved config", &cfg);
    let data = load_dataset(&args.data.data, "train", &args.data.only, &cfg.exclude_categories)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no training bundles under {}", args.data.data.display())).into());
    }
    eprintln!("training on {} bundles", data.len());

    let hist_path = history_path(&args.out);
    let mut lines = String::new();
    let start = Instant::now();
    let trained = train_with(&data, &cfg, |r| {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
        if r.step % 25 == 0 {
            eprintln!("epoch {} step {} total {:.6} lr {:.3e}", r.epoch, r.step, r.total, r.lr);
        }
    });
    // keep the history even when training aborts
    fs::write(&hist_path, &lines).with_context(|| format!("writing {}", hist_path.display()))?;
    let trained = trained?;
    let rel = hist_path.file_name().map(|n| n.to_string_lossy().into_owned());
    let ckpt = Checkpoint::from_model(&trained.model, &cfg, trained.rng, rel);
    write_checkpoint(&ckpt, &args.out)?;
    eprintln!("wrote {} after {} steps in {:.1?}", args.out.display(), trained.history.len(), start.elapsed());
    Ok(())
}

fn scoring_for(ckpt: &Checkpoint, o: &ScoringArgs) -> Result<Scoring> {
    let mut s = ckpt.train.scoring();
    s.tau = o.tau.unwrap_or(s.tau);
    s.gamma = o.gamma.unwrap_or(s.gamma);
    s.top_k = o.top_k.unwrap_or(s.top_k);
    if !(s.tau > 0.0) || !(0.0..=1.0).contains(&s.gamma) || s.top_k == 0 {
        bail!(Error::Config(format!("invalid scoring tau={} gamma={} top_k={}", s.tau, s.gamma, s.top_k)));
    }
    Ok(s)
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.ckpt)?;
    let model = ckpt.to_model()?;
    let opts = EvalOptions {
        scoring: scoring_for(&ckpt, &args.scoring)?,
        fpr_limit: args.fpr_limit,
        sweep: if args.pro_thresholds == 0 { ProSweep::Exhaustive } else { ProSweep::Quantiles(args.pro_thresholds) },
    };
    if !(opts.fpr_limit > 0.0 && opts.fpr_limit <= 1.0) {
        bail!(Error::Config(format!("fpr limit {} outside (0, 1]", opts.fpr_limit)));
    }
    log_config("checkpoint config", &ckpt.train);
    let data = load_dataset(&args.data.data, &args.split, &args.data.only, &args.data.exclude)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no `{}` bundles under {}", args.split, args.data.data.display())).into());
    }
    let outcome = evaluate(&model, &data, &opts)?;
    let mut report: EvalReport = outcome.report;
    report.meta.train_config = Some(ckpt.train.clone());
    fs::write(&args.report, report.to_json() + "\n").with_context(|| format!("writing {}", args.report.display()))?;
    if let Some(dir) = &args.heatmaps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for img in &outcome.images {
            write_heatmap(&img.map, dir.join(format!("{}.pgm", safe_name(&img.source_id))))?;
        }
    }
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
    eprintln!(
        "{} images: image auroc {} pixel auroc {} pro {}",
        report.counts.images,
        show(report.image.auroc),
        show(report.pixel.auroc),
        show(report.pixel.pro)
    );
    Ok(())
}

fn infer_one(args: InferArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.ckpt)?;
    let model = ckpt.to_model()?;
    let scoring = scoring_for(&ckpt, &args.scoring)?;
    let b = read_bundle(&args.bundle)?;
    let out = infer(&model, &b, scoring)?;
    if let Some(p) = &args.heatmap {
        write_heatmap(&out.maps.fused, p)?;
    }
    println!("{:.6}", out.scores.s_final);
    Ok(())
}

fn run_grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    let report = grad_check(args.seed, args.step)?;
    for m in &report.modules {
        let verdict = if m.worst_rel_error <= args.tol { "ok" } else { "FAIL" };
        println!(
            "{:<10} worst {:.3e} at {:<28} ({} tensors, {} entries) {verdict}",
            m.module, m.worst_rel_error, m.worst_param, m.tensors, m.entries
        );
    }
    let worst = report.worst();
    println!("worst {worst:.3e} tol {:.1e} in {:.2?}", args.tol, report.elapsed);
    Ok(if worst <= args.tol { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

#[derive(Serialize)]
struct SweepRow {
    param: &'static str,
    value: f64,
    image_auroc: Option<f64>,
    image_f1_max: Option<f64>,
    image_ap: Option<f64>,
    pixel_auroc: Option<f64>,
    pixel_pro: Option<f64>,
    pixel_ap: Option<f64>,
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut base = train_config(args.config.as_deref(), args.seed, args.epochs)?;
    for c in &args.data.exclude {
        if !base.exclude_categories.contains(c) {
            base.exclude_categories.push(c.clone());
        }
    }
    let train_data = load_dataset(&args.data.data, "train", &args.data.only, &base.exclude_categories)?;
    let eval_only = if !args.eval_only.is_empty() { args.eval_only.clone() } else { base.exclude_categories.clone() };
    let eval_data = load_dataset(&args.data.data, &args.eval_split, &eval_only, &[])?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Data("sweep needs nonempty training and evaluation sets".into()).into());
    }
    let name = match args.param {
        SweepParam::Gamma => "gamma",
        SweepParam::Xi => "xi",
    };
    let mut rows = Vec::new();
    for &v in &args.values {
        let mut cfg = base.clone();
        match args.param {
            SweepParam::Gamma => cfg.gamma = v,
            SweepParam::Xi => cfg.xi = v,
        }
        cfg.validate()?;
        log_config("resolved config", &cfg);
        let trained = train_with(&train_data, &cfg, |_| {})?;
        let opts = EvalOptions { scoring: cfg.scoring(), ..EvalOptions::default() };
        let r = evaluate(&trained.model, &eval_data, &opts)?.report;
        eprintln!("{name}={v}: image auroc {:?} pixel auroc {:?}", r.image.auroc, r.pixel.auroc);
        rows.push(SweepRow {
            param: name,
            value: v,
            image_auroc: r.image.auroc,
            image_f1_max: r.image.f1_max,
            image_ap: r.image.ap,
            pixel_auroc: r.pixel.auroc,
            pixel_pro: r.pixel.pro,
            pixel_ap: r.pixel.ap,
        });
    }
    let csv = args.out.as_ref().is_some_and(|p| p.extension().is_some_and(|e| e == "csv"));
    let text = if csv {
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let mut s = String::from("param,value,image_auroc,image_f1_max,image_ap,pixel_auroc,pixel_pro,pixel_ap\n");
        for r in &rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.param,
                r.value,
                cell(r.image_auroc),
                cell(r.image_f1_max),
                cell(r.image_ap),
                cell(r.pixel_auroc),
                cell(r.pixel_pro),
                cell(r.pixel_ap)
            ));
        }
        s
    } else {
        serde_json::to_string_pretty(&rows)? + "\n"
    };
    match &args.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) => e.exit_code() as u8,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Infer(a) => infer_one(a).map(|_| ExitCode::SUCCESS),
        Command::GradCheck(a) => run_grad_check(a),
        Command::Sweep(a) => sweep(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
