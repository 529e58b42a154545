use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crossscale::attention::AttentionVariant;
use crossscale::pipeline::{
    read_config, run_ablation, run_explain, run_gen, run_train, AblationConfig, DataConfig,
    ExplainRunConfig, GenConfig, ModelOptions, TrainRunConfig,
};
use crossscale::train::TrainConfig;

/// Multi-scale cross-patch attention forecaster with temporal saliency.
#[derive(Parser)]
#[command(name = "crossscale", version)]
struct Cli {
    /// Default parent directory for outputs when --out is not given.
    #[arg(long, env = "CROSSSCALE_OUT", global = true, default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its ground-truth saliency mask.
    Gen(GenArgs),
    /// Train a model and report test metrics.
    Train(TrainArgs),
    /// Compute saliency, faithfulness and attribution for a checkpoint.
    Explain(ExplainArgs),
    /// Sweep datasets x variants x seeds and tabulate MSE/MAE.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in dataset, SYN1..SYN8.
    #[arg(long, conflicts_with = "spec")]
    dataset: Option<String>,
    /// JSON recipe file.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Window length of the exported mask.
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file, or a built-in dataset name generated on the fly.
    #[arg(long)]
    data: Option<String>,
    /// Target column name; defaults to the last column.
    #[arg(long)]
    target: Option<String>,
    /// Rows to generate for built-in datasets.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn apply(&self, d: &mut DataConfig) {
        if let Some(v) = &self.data {
            d.source = v.clone();
        }
        if let Some(v) = &self.target {
            d.target = Some(v.clone());
        }
        if let Some(v) = self.samples {
            d.samples = v;
        }
        if let Some(v) = self.data_seed {
            d.data_seed = v;
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Disable per-window instance normalization.
    #[arg(long)]
    no_instance_norm: bool,
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelOptions) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.lookback, self.lookback);
        set(&mut m.horizon, self.horizon);
        set(&mut m.scales, self.scales);
        set(&mut m.patch, self.patch);
        set(&mut m.decomp_kernel, self.kernel);
        set(&mut m.hidden_dim, self.hidden);
        if self.no_instance_norm {
            m.instance_norm = false;
        }
    }
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl OptimArgs {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    variant: Option<AttentionVariant>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Ground-truth mask CSV; enables agreement scores.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Comma-separated kept/removed fractions.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    ig_steps: Option<usize>,
    #[arg(long)]
    ig_windows: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "dataset", alias = "datasets", value_delimiter = ',')]
    datasets: Option<Vec<String>>,
    #[arg(long = "variants", value_delimiter = ',')]
    variants: Option<Vec<AttentionVariant>>,
    #[arg(long = "seeds", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    samples: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load<T: Default + for<'de> serde::Deserialize<'de>>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_config(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(T::default()),
    }
}

fn out_dir(
    flag: &Option<PathBuf>,
    from_file: Option<&Path>,
    root: &Path,
    command: &str,
) -> PathBuf {
    match (flag, from_file) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => root.join(command),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let mut c: GenConfig = load(&a.config)?;
            if a.dataset.is_some() {
                c.dataset = a.dataset;
                c.spec = None;
            }
            if a.spec.is_some() {
                c.spec = a.spec;
            }
            c.samples = a.samples.or(c.samples);
            c.seed = a.seed.unwrap_or(c.seed);
            c.lookback = a.lookback.unwrap_or(c.lookback);
            let from_file = a.config.is_some().then_some(c.out.as_path());
            c.out = out_dir(&a.out, from_file, &cli.out_root, "gen");
            let files = run_gen(&c)?;
            println!("wrote {}", files.data.display());
            println!("wrote {}", files.sidecar.display());
            if let Some(m) = files.mask {
                println!("wrote {}", m.display());
            }
        }
        Command::Train(a) => {
            let mut c: TrainRunConfig = load(&a.config)?;
            a.data.apply(&mut c.data);
            if let Some(v) = a.variant {
                c.model.variant = v;
            }
            a.model.apply(&mut c.model);
            a.optim.apply(&mut c.train);
            if let Some(s) = a.seed {
                c.train.seed = s;
            }
            let from_file = a.config.is_some().then_some(c.out.as_path());
            c.out = out_dir(&a.out, from_file, &cli.out_root, "train");
            let o = run_train(&c)?;
            for e in &o.history.epochs {
                println!(
                    "epoch {:>3}  train {:.6}  val {:.6}",
                    e.epoch, e.train_mse, e.val_mse
                );
            }
            if let Some(t) = o.metrics.test {
                println!("test mse {:.6}  mae {:.6}", t.mse, t.mae);
            }
            println!("wrote {}", c.out.display());
        }
        Command::Explain(a) => {
            let mut c: ExplainRunConfig = load(&a.config)?;
            if let Some(p) = a.checkpoint {
                c.checkpoint = p;
            }
            a.data.apply(&mut c.data);
            if a.truth.is_some() {
                c.truth = a.truth;
            }
            if let Some(r) = a.ratios {
                c.explain.ratios = r;
            }
            if let Some(v) = a.ig_steps {
                c.explain.ig_steps = v;
            }
            if let Some(v) = a.ig_windows {
                c.explain.ig_windows = v;
            }
            let from_file = a.config.is_some().then_some(c.out.as_path());
            c.out = out_dir(&a.out, from_file, &cli.out_root, "explain");
            let r = run_explain(&c)?;
            for (i, ratio) in r.ratios.iter().enumerate() {
                println!(
                    "r={ratio:<4}  sufficiency {:.4}  comprehensiveness {:.4}",
                    r.sufficiency[i], r.comprehensiveness[i]
                );
            }
            if let Some(ag) = r.agreement {
                println!(
                    "precision@{} {:.4}  rank-auc {:.4}",
                    ag.k, ag.precision_at_k, ag.rank_auc
                );
            }
            println!("wrote {}", c.out.display());
        }
        Command::Ablation(a) => {
            let mut c: AblationConfig = load(&a.config)?;
            if let Some(v) = a.datasets {
                c.datasets = v;
            }
            if let Some(v) = a.variants {
                c.variants = v;
            }
            if let Some(v) = a.seeds {
                c.seeds = v;
            }
            if let Some(v) = a.samples {
                c.samples = v;
            }
            a.model.apply(&mut c.model);
            a.optim.apply(&mut c.train);
            let from_file = a.config.is_some().then_some(c.out.as_path());
            c.out = out_dir(&a.out, from_file, &cli.out_root, "ablation");
            let table = run_ablation(&c)?;
            print!("{}", table.to_markdown());
            for r in table.runs.iter().filter(|r| r.result.is_err()) {
                eprintln!(
                    "failed: {} {} seed {}: {}",
                    r.dataset,
                    r.variant,
                    r.seed,
                    r.result.as_ref().unwrap_err()
                );
            }
            if table.failures() > 0 {
                anyhow::bail!("{} run(s) failed", table.failures());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
