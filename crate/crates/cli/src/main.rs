use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtd_core::experiment::{load_prepared, prepare, write_prepared, DatasetSource, ExperimentConfig};
use mtd_core::metrics::{MetricsReport, CSV_HEADER};
use mtd_core::model::{Channels, ClassifierInput, ModelConfig, MtdModel};
use mtd_core::trainer::{evaluate, fit, RunRecord, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "mtd", version, about = "Train and evaluate two-channel multi-view weak multi-label classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate missing views/labels and write prepared dataset directories.
    Prepare(PrepareArgs),
    /// Train one model on a prepared directory.
    Train(TrainArgs),
    /// Train ablation variants and summarize test metrics per variant.
    Ablate(AblateArgs),
    /// Train over a grid of loss weights and mask rates.
    Sweep(SweepArgs),
    /// Score a checkpoint on the test split of a prepared directory.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Experiment TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Complete source dataset directory (views, labels.csv).
    #[arg(long, conflicts_with = "synthetic")]
    source: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading one.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic sample count [default: 600].
    #[arg(long)]
    n: Option<usize>,
    /// Synthetic view widths, comma separated [default: 40,60].
    #[arg(long, value_delimiter = ',')]
    view_dims: Option<Vec<usize>>,
    /// Synthetic label count [default: 5].
    #[arg(long)]
    num_labels: Option<usize>,
    /// Synthetic noise scale [default: 1.0].
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of instances removed from each view [default: 0.5].
    #[arg(long)]
    view_missing_rate: Option<f64>,
    /// Fraction of positives and negatives hidden per label [default: 0.5].
    #[arg(long)]
    label_missing_rate: Option<f64>,
    /// Fraction of samples used for training [default: 0.7].
    #[arg(long)]
    train_ratio: Option<f64>,
    /// Number of independently simulated copies [default: 1].
    #[arg(long)]
    repeats: Option<usize>,
    /// Base seed; copy r uses seed + r [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; copies go to <out>/seed_<s> [default: runs].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Experiment TOML supplying train/model settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SGD learning rate [default: 0.1].
    #[arg(long)]
    learning_rate: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<f64>,
    /// Mini-batch size [default: 128].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Graph regularization weight [default: 0.4].
    #[arg(long)]
    alpha: Option<f64>,
    /// Contrastive loss weight [default: 0.4].
    #[arg(long)]
    beta: Option<f64>,
    /// Reconstruction loss weight [default: 0.1].
    #[arg(long)]
    gamma: Option<f64>,
    /// Fraction of each instance zeroed by the fragment mask [default: 0.25].
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Graph similarity constant [default: 100].
    #[arg(long)]
    eta: Option<f64>,
    /// Weight decay [default: 0].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Evaluate every N epochs; 0 evaluates after the last epoch only [default: 0].
    #[arg(long)]
    eval_every: Option<usize>,
    /// Training seed [default: the prepared directory's seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width [default: 512].
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Encoder hidden widths, comma separated [default: 512,512].
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Use one encoder per view instead of shared + proprietary channels.
    #[arg(long)]
    single_channel: bool,
    /// Feed [S, O] to the classifier instead of the gated fusion.
    #[arg(long)]
    concat_classifier: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for run.json, losses.csv, metrics.csv and model.ckpt.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Prepared dataset directories; each contributes runs.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Variants, comma separated: full, no_mask, no_gc, no_re, no_ccc, single_channel.
    #[arg(long, value_delimiter = ',', default_value = "single_channel,full,no_mask")]
    variants: Vec<String>,
    /// Training seeds per directory, counting up from the base seed [default: 1].
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Output directory for summary.csv and runs.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    /// Prepared dataset directories.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Grid values for alpha, comma separated.
    #[arg(long = "alpha-grid", value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Grid values for beta.
    #[arg(long = "beta-grid", value_delimiter = ',')]
    beta_grid: Option<Vec<f64>>,
    /// Grid values for gamma.
    #[arg(long = "gamma-grid", value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    /// Grid values for the mask rate.
    #[arg(long = "mask-rate-grid", value_delimiter = ',')]
    mask_rate_grid: Option<Vec<f64>>,
    /// Training seeds per grid point and directory [default: 1].
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Output directory for sweep.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory; its test split is scored.
    #[arg(long)]
    data: PathBuf,
    /// Output file for the metrics JSON; a CSV row is written next to it.
    #[arg(long)]
    out: PathBuf,
}

impl TrainFlags {
    /// Train and model configuration: defaults, then the TOML, then flags.
    fn resolve(&self, seed: u64) -> Result<(TrainConfig, ModelConfig)> {
        let (mut train, mut model) = match &self.config {
            Some(path) => {
                let cfg = ExperimentConfig::load(path)?;
                (cfg.train, cfg.model)
            }
            None => (TrainConfig::default(), ModelConfig::default()),
        };
        train.seed = self.seed.unwrap_or(seed);
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set! {
            learning_rate => train.learning_rate,
            momentum => train.momentum,
            batch_size => train.batch_size,
            epochs => train.epochs,
            alpha => train.weights.alpha,
            beta => train.weights.beta,
            gamma => train.weights.gamma,
            mask_rate => train.mask_rate,
            eta => train.eta,
            weight_decay => train.weight_decay,
            eval_every => train.eval_every,
            embed_dim => model.embed_dim,
            hidden => model.hidden,
        }
        if self.single_channel {
            model.channels = Channels::Single;
        }
        if self.concat_classifier {
            model.classifier_input = ClassifierInput::Concat;
        }
        train.validate()?;
        Ok((train, model))
    }
}

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if args.source.is_none() && !args.synthetic => {
            bail!("prepare needs --config, --source or --synthetic")
        }
        None => ExperimentConfig::new(DatasetSource::default()),
    };
    if let Some(src) = &args.source {
        cfg.dataset = DatasetSource {
            path: Some(src.clone()),
            synthetic: None,
        };
    }
    if args.synthetic {
        let mut spec = cfg.dataset.synthetic.clone().unwrap_or_default();
        if let Some(v) = args.n {
            spec.n = v;
        }
        if let Some(v) = &args.view_dims {
            spec.view_dims = v.clone();
        }
        if let Some(v) = args.num_labels {
            spec.num_labels = v;
        }
        if let Some(v) = args.noise {
            spec.noise = v;
        }
        cfg.dataset = DatasetSource {
            path: None,
            synthetic: Some(spec),
        };
    }
    if let Some(v) = args.view_missing_rate {
        cfg.incompleteness.view_missing_rate = v;
    }
    if let Some(v) = args.label_missing_rate {
        cfg.incompleteness.label_missing_rate = v;
    }
    if let Some(v) = args.train_ratio {
        cfg.split.train_ratio = v;
    }
    if let Some(v) = args.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.out {
        cfg.output_dir = v.clone();
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("experiment.toml"), cfg.to_toml()?)?;
    for r in 0..cfg.repeats {
        let (data, manifest) = prepare(&cfg, r)?;
        let dir = cfg.output_dir.join(format!("seed_{}", manifest.seed));
        write_prepared(&dir, &data, &manifest).with_context(|| format!("writing {}", dir.display()))?;
        eprintln!("prepared {}", dir.display());
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn metrics_csv(report: &MetricsReport) -> String {
    format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let prepared = load_prepared(&args.data)?;
    let (train_cfg, model_cfg) = args.flags.resolve(prepared.manifest.seed)?;
    fs::create_dir_all(&args.out)?;
    let (model, mut record) = fit(&prepared.train, Some(&prepared.test), &model_cfg, &train_cfg)?;
    let ckpt = args.out.join("model.ckpt");
    model.save(&ckpt)?;
    record.checkpoint_path = Some(ckpt.display().to_string());
    write_json(&args.out.join("run.json"), &record)?;
    fs::write(args.out.join("losses.csv"), record.loss_csv())?;
    if let Some(report) = record.final_metrics() {
        fs::write(args.out.join("metrics.csv"), metrics_csv(report))?;
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// One training run per (directory, seed) for a fixed configuration.
fn run_grid_point(
    data: &[PathBuf],
    seeds: usize,
    flags: &TrainFlags,
    adjust: &dyn Fn(&mut TrainConfig, &mut ModelConfig),
) -> Result<Vec<(u64, RunRecord)>> {
    let mut out = Vec::new();
    for dir in data {
        let prepared = load_prepared(dir)?;
        for s in 0..seeds {
            let (mut train_cfg, mut model_cfg) = flags.resolve(prepared.manifest.seed)?;
            train_cfg.seed = train_cfg.seed.wrapping_add(s as u64);
            adjust(&mut train_cfg, &mut model_cfg);
            train_cfg.validate()?;
            let (_, record) = fit(&prepared.train, Some(&prepared.test), &model_cfg, &train_cfg)
                .with_context(|| format!("training on {}", dir.display()))?;
            out.push((train_cfg.seed, record));
        }
    }
    Ok(out)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let variants = args
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    fs::create_dir_all(&args.out)?;
    let metric_cols: Vec<String> = CSV_HEADER.iter().flat_map(|m| [format!("{m}_mean"), format!("{m}_std")]).collect();
    let mut summary = format!("variant,runs,{}\n", metric_cols.join(","));
    let mut runs = format!("variant,seed,{}\n", CSV_HEADER.join(","));
    for variant in variants {
        let records = run_grid_point(&args.data, args.seeds, &args.flags, &|t, m| {
            let (vm, vt) = variant.apply(m, t);
            *m = vm;
            *t = vt;
        })?;
        let reports: Vec<MetricsReport> = records
            .iter()
            .map(|(_, r)| r.final_metrics().copied().context("run produced no evaluation"))
            .collect::<Result<_>>()?;
        for ((seed, _), rep) in records.iter().zip(&reports) {
            runs.push_str(&format!("{variant},{seed},{}\n", rep.csv_row()));
        }
        let cells: Vec<String> = (0..6)
            .map(|k| {
                let (m, s) = mean_std(&reports.iter().map(|r| r.values()[k]).collect::<Vec<_>>());
                format!("{m},{s}")
            })
            .collect();
        summary.push_str(&format!("{variant},{},{}\n", reports.len(), cells.join(",")));
        eprintln!("finished {variant}");
    }
    fs::write(args.out.join("summary.csv"), summary)?;
    fs::write(args.out.join("runs.csv"), runs)?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let (base, _) = args.flags.resolve(0)?;
    let grid = |g: &Option<Vec<f64>>, default: f64| g.clone().unwrap_or_else(|| vec![default]);
    let alphas = grid(&args.alpha_grid, base.weights.alpha);
    let betas = grid(&args.beta_grid, base.weights.beta);
    let gammas = grid(&args.gamma_grid, base.weights.gamma);
    let rates = grid(&args.mask_rate_grid, base.mask_rate);
    fs::create_dir_all(&args.out)?;
    let mut csv = format!("alpha,beta,gamma,mask_rate,seed,{}\n", CSV_HEADER.join(","));
    for &a in &alphas {
        for &b in &betas {
            for &g in &gammas {
                for &r in &rates {
                    let records = run_grid_point(&args.data, args.seeds, &args.flags, &|t, _| {
                        t.weights.alpha = a;
                        t.weights.beta = b;
                        t.weights.gamma = g;
                        t.mask_rate = r;
                    })?;
                    for (seed, rec) in &records {
                        let rep = rec.final_metrics().context("run produced no evaluation")?;
                        csv.push_str(&format!("{a},{b},{g},{r},{seed},{}\n", rep.csv_row()));
                    }
                }
            }
        }
    }
    fs::write(args.out.join("sweep.csv"), csv)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = MtdModel::load(&args.checkpoint)?;
    let prepared = load_prepared(&args.data)?;
    let report = evaluate(&model, &prepared.test)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(&args.out, &report)?;
    fs::write(args.out.with_extension("csv"), metrics_csv(&report))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
