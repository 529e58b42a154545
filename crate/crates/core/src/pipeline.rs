//! End-to-end runs behind the command-line tool: generation, training,
//! explanation and ablation sweeps. Every run writes a resolved-config
//! snapshot next to its outputs so it can be replayed from that file alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::data::{make_windows, read_csv, Split, SplitFractions, Table, WindowDataset};
use crate::explain::{explain, ExplainConfig, ExplainReport};
use crate::model::{load_checkpoint, save_checkpoint, CrossScaleNet, ModelConfig};
use crate::synth::{self, SaliencyTruth, SynthSpec};
use crate::train::{evaluate, train, History, Metrics, TrainConfig};
use crate::{Error, Result};

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

fn write_snapshot<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(SNAPSHOT_FILE),
        serde_json::to_string_pretty(config)? + "\n",
    )?;
    Ok(())
}

/// Reads a JSON config; missing fields take their defaults.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    parse_json(&fs::read_to_string(path)?)
}

pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Built-in name such as `SYN1`; ignored when `spec` is set.
    pub dataset: Option<String>,
    /// JSON file holding a full recipe.
    pub spec: Option<PathBuf>,
    pub samples: Option<usize>,
    pub seed: u64,
    /// Window length of the exported ground-truth mask.
    pub lookback: usize,
    pub out: PathBuf,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            spec: None,
            samples: None,
            seed: synth::DEFAULT_SEED,
            lookback: 96,
            out: PathBuf::from("gen"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct GenSnapshot<'a> {
    config: &'a GenConfig,
    spec: &'a SynthSpec,
}

impl GenConfig {
    pub fn resolve_spec(&self) -> Result<SynthSpec> {
        let mut spec = match (&self.spec, &self.dataset) {
            (Some(path), _) => read_config::<SynthSpec>(path)?,
            (None, Some(name)) => synth::builtin_spec(name)?,
            (None, None) => {
                return Err(Error::Config(
                    "either a dataset name or a spec file is required".into(),
                ))
            }
        };
        spec.seed = self.seed;
        if let Some(n) = self.samples {
            spec.n_samples = n;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Writes `<NAME>.csv`, `<NAME>.json` and `<NAME>_mask.csv` under `out`.
pub fn run_gen(config: &GenConfig) -> Result<synth::ExportedFiles> {
    let spec = config.resolve_spec()?;
    synth::ground_truth_mask(&spec, config.lookback)?;
    let data = synth::generate(&spec)?;
    let files = synth::export_dataset(&data, &config.out, &spec.name, Some(config.lookback))?;
    write_snapshot(
        &config.out,
        &GenSnapshot {
            config,
            spec: &spec,
        },
    )?;
    Ok(files)
}

/// Where a run's rows come from: a CSV path or a built-in synthetic name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: String,
    /// Rows generated for built-in datasets.
    pub samples: usize,
    pub data_seed: u64,
    /// Target column; the last column when unset.
    pub target: Option<String>,
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: String::new(),
            samples: synth::DEFAULT_SAMPLES,
            data_seed: synth::DEFAULT_SEED,
            target: None,
            split: SplitFractions::default(),
        }
    }
}

impl DataConfig {
    /// The synthetic recipe when `source` names a built-in dataset and is
    /// not an existing file.
    pub fn synth_spec(&self) -> Option<SynthSpec> {
        if Path::new(&self.source).exists() {
            return None;
        }
        synth::builtin_spec(&self.source).ok().map(|s| SynthSpec {
            n_samples: self.samples,
            seed: self.data_seed,
            ..s
        })
    }

    pub fn table(&self) -> Result<Table> {
        if self.source.is_empty() {
            return Err(Error::Config("no data source given".into()));
        }
        match self.synth_spec() {
            Some(spec) => {
                let data = synth::generate(&spec)?;
                Ok(Table {
                    columns: data.column_names(),
                    values: data.table(),
                })
            }
            None => read_csv(&self.source),
        }
    }

    pub fn target_index(&self, table: &Table) -> Result<usize> {
        match &self.target {
            None => Ok(table.columns.len() - 1),
            Some(name) => table.column_index(name).ok_or_else(|| Error::Unknown {
                kind: "column",
                name: name.clone(),
            }),
        }
    }

    pub fn windows(&self, lookback: usize, horizon: usize) -> Result<WindowDataset> {
        let table = self.table()?;
        let target = self.target_index(&table)?;
        make_windows(&table, lookback, horizon, &self.split, &[target])
    }
}

/// Architecture options; the feature count comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub variant: AttentionVariant,
    pub lookback: usize,
    pub horizon: usize,
    pub scales: usize,
    pub patch: usize,
    pub decomp_kernel: usize,
    pub hidden_dim: usize,
    pub instance_norm: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let d = ModelConfig::new(96, 16, 1);
        Self {
            variant: d.variant,
            lookback: d.lookback,
            horizon: d.horizon,
            scales: d.n_scales,
            patch: d.patch_len,
            decomp_kernel: d.decomp_kernel,
            hidden_dim: d.hidden_dim,
            instance_norm: d.instance_norm,
        }
    }
}

impl ModelOptions {
    pub fn model_config(&self, n_features: usize) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            n_features,
            n_scales: self.scales,
            patch_len: self.patch,
            decomp_kernel: self.decomp_kernel,
            hidden_dim: self.hidden_dim,
            variant: self.variant,
            instance_norm: self.instance_norm,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: DataConfig,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub parameters: usize,
}

pub struct TrainOutcome {
    pub model: CrossScaleNet,
    pub data: WindowDataset,
    pub history: History,
    pub metrics: TrainMetrics,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Trains without touching the filesystem.
pub fn fit(config: &TrainRunConfig) -> Result<TrainOutcome> {
    config.train.validate()?;
    let data = config
        .data
        .windows(config.model.lookback, config.model.horizon)?;
    let model_config = config.model.model_config(data.n_features());
    model_config.validate()?;
    let mut model = CrossScaleNet::new(model_config, config.train.seed)?;
    let history = train(&mut model, &data, &config.train)?;
    let metric = |s| {
        (data.n_windows(s) > 0)
            .then(|| evaluate(&model, &data, s))
            .transpose()
    };
    let metrics = TrainMetrics {
        val: metric(Split::Val)?,
        test: metric(Split::Test)?,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        parameters: model.params.count(),
    };
    Ok(TrainOutcome {
        model,
        data,
        history,
        metrics,
    })
}

/// Trains and writes the checkpoint, history, metrics and snapshot.
pub fn run_train(config: &TrainRunConfig) -> Result<TrainOutcome> {
    // fail on bad settings before anything is written
    config.train.validate()?;
    config.model.model_config(1).validate()?;
    let outcome = fit(config)?;
    let out = &config.out;
    write_snapshot(out, config)?;
    save_checkpoint(&outcome.model, out.join(CHECKPOINT_FILE))?;
    fs::write(out.join("history.csv"), outcome.history.to_csv())?;
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&outcome.metrics)? + "\n",
    )?;
    Ok(outcome)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainRunConfig {
    pub checkpoint: PathBuf,
    pub data: DataConfig,
    pub truth: Option<PathBuf>,
    pub explain: ExplainConfig,
    pub out: PathBuf,
}

pub fn run_explain(config: &ExplainRunConfig) -> Result<ExplainReport> {
    let model = load_checkpoint(&config.checkpoint)?;
    let truth = config
        .truth
        .as_ref()
        .map(|p| {
            fs::read_to_string(p)
                .map_err(Error::from)
                .and_then(|t| SaliencyTruth::from_csv(&t))
        })
        .transpose()?;
    if let Some(t) = &truth {
        if t.lookback != model.config.lookback {
            return Err(Error::Config(format!(
                "truth mask covers {} steps but the checkpoint looks back {}",
                t.lookback, model.config.lookback
            )));
        }
    }
    let data = config
        .data
        .windows(model.config.lookback, model.config.horizon)?;
    let report = explain(&model, &data, &config.explain, truth.as_ref())?;
    write_snapshot(&config.out, config)?;
    report.write(&config.out, truth.as_ref())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub datasets: Vec<String>,
    pub variants: Vec<AttentionVariant>,
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub data_seed: u64,
    pub model: ModelOptions,
    /// `seed` is replaced per run.
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            datasets: vec!["SYN1".into()],
            variants: AttentionVariant::ALL.to_vec(),
            seeds: vec![42],
            samples: synth::DEFAULT_SAMPLES,
            data_seed: synth::DEFAULT_SEED,
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("ablation"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub dataset: String,
    pub variant: AttentionVariant,
    pub seed: u64,
    pub result: std::result::Result<Metrics, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub variant: AttentionVariant,
    pub runs: usize,
    pub failures: usize,
    /// Means over the successful seeds.
    pub mse: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,variant,mse,mae,runs,failures\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.dataset,
                r.variant,
                fmt(r.mse),
                fmt(r.mae),
                r.runs,
                r.failures
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset | Variant | MSE | MAE |\n|---|---|---|---|\n");
        for r in &self.rows {
            let fmt = |v: Option<f64>| {
                v.map(|x| format!("{x:.4}"))
                    .unwrap_or_else(|| "failed".into())
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                r.dataset,
                r.variant,
                fmt(r.mse),
                fmt(r.mae)
            );
        }
        out
    }
}

/// Every `(dataset, variant, seed)` combination; failures are recorded and
/// the sweep continues.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationTable> {
    if config.datasets.is_empty() || config.variants.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config(
            "datasets, variants and seeds must be non-empty".into(),
        ));
    }
    config.train.validate()?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for dataset in &config.datasets {
        for &variant in &config.variants {
            let mut ok = Vec::new();
            for &seed in &config.seeds {
                let run = TrainRunConfig {
                    data: DataConfig {
                        source: dataset.clone(),
                        samples: config.samples,
                        data_seed: config.data_seed,
                        ..DataConfig::default()
                    },
                    model: ModelOptions {
                        variant,
                        ..config.model.clone()
                    },
                    train: TrainConfig {
                        seed,
                        ..config.train.clone()
                    },
                    out: PathBuf::new(),
                };
                let result = fit(&run).and_then(|o| {
                    o.metrics
                        .test
                        .ok_or_else(|| Error::Data("test split holds no windows".into()))
                });
                if let Ok(m) = &result {
                    ok.push(*m);
                }
                runs.push(AblationRun {
                    dataset: dataset.clone(),
                    variant,
                    seed,
                    result: result.map_err(|e| e.to_string()),
                });
            }
            let mean = |f: fn(&Metrics) -> f64| {
                (!ok.is_empty()).then(|| ok.iter().map(f).sum::<f64>() / ok.len() as f64)
            };
            rows.push(AblationRow {
                dataset: dataset.clone(),
                variant,
                runs: config.seeds.len(),
                failures: config.seeds.len() - ok.len(),
                mse: mean(|m| m.mse),
                mae: mean(|m| m.mae),
            });
        }
    }
    let table = AblationTable { runs, rows };
    let out = &config.out;
    write_snapshot(out, config)?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    fs::write(out.join("ablation.md"), table.to_markdown())?;
    fs::write(
        out.join("runs.json"),
        serde_json::to_string_pretty(&table.runs)? + "\n",
    )?;
    Ok(table)
}
