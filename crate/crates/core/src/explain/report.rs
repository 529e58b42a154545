use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    aggregate_saliency, faithfulness, feature_ablation, saliency_agreement, Agreement, IgSummary,
};
use crate::attention::AttentionRecord;
use crate::data::{Split, WindowDataset};
use crate::model::CrossScaleNet;
use crate::synth::SaliencyTruth;
use crate::tensor::Tensor;
use crate::train::EVAL_BATCH;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub ratios: Vec<f64>,
    pub ig_steps: usize,
    /// Evaluation windows attributed with integrated gradients, taken
    /// evenly spaced from the split.
    pub ig_windows: usize,
    pub split: Split,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.2, 0.5],
            ig_steps: 64,
            ig_windows: 32,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub lookback: usize,
    pub columns: Vec<String>,
    pub split: Split,
    pub windows: usize,
    /// Attention saliency averaged over the split, max-normalized.
    pub saliency: Vec<f64>,
    pub feature_ablation: Vec<f64>,
    pub ig_feature_importance: Vec<f64>,
    pub ig_temporal: Vec<f64>,
    pub ig_steps: usize,
    pub ig_windows: usize,
    pub ig_max_completeness_gap: f64,
    pub ratios: Vec<f64>,
    pub sufficiency: Vec<f64>,
    pub comprehensiveness: Vec<f64>,
    pub e_full: f64,
    pub e_blank: f64,
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub agreement: Option<Agreement>,
    /// `[T, F]` mean |IG|, exported separately.
    #[serde(skip)]
    pub ig_map: Option<Tensor>,
}

/// Attention records averaged over every window of `split`.
pub fn mean_attention(
    model: &CrossScaleNet,
    data: &WindowDataset,
    split: Split,
) -> Result<Vec<AttentionRecord>> {
    let n = data.n_windows(split);
    if n == 0 {
        return Err(Error::Data(format!("{split:?} split holds no windows")));
    }
    let mut acc: Option<Vec<AttentionRecord>> = None;
    for chunk in data.chunks(split, EVAL_BATCH) {
        let (x, _) = data.batch(split, &chunk)?;
        let (_, records) = model.predict_with_attention(&x)?;
        let w = chunk.len() as f64 / n as f64;
        let scaled: Vec<AttentionRecord> = records
            .into_iter()
            .map(|r| AttentionRecord {
                patch: r.patch.map(|v| v * w),
                local: r.local.map(|v| v * w),
                ..r
            })
            .collect();
        acc = Some(match acc {
            None => scaled,
            Some(prev) => prev
                .into_iter()
                .zip(scaled)
                .map(|(a, b)| AttentionRecord {
                    patch: add(&a.patch, &b.patch),
                    local: add(&a.local, &b.local),
                    ..a
                })
                .collect(),
        });
    }
    Ok(acc.unwrap_or_default())
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Runs the full battery on one split.
pub fn explain(
    model: &CrossScaleNet,
    data: &WindowDataset,
    config: &ExplainConfig,
    truth: Option<&SaliencyTruth>,
) -> Result<ExplainReport> {
    if config.ratios.is_empty() {
        return Err(Error::Config("at least one ratio is required".into()));
    }
    if let Some(t) = truth {
        if t.lookback != data.lookback {
            return Err(Error::Config(format!(
                "truth mask covers {} steps but the model looks back {}",
                t.lookback, data.lookback
            )));
        }
    }
    let split = config.split;
    let records = mean_attention(model, data, split)?;
    let saliency = aggregate_saliency(&records, data.lookback)?;
    let faith = faithfulness(model, data, split, &saliency, &config.ratios)?;
    let ablation = feature_ablation(model, data, split)?;

    let n = data.n_windows(split);
    let k = config.ig_windows.clamp(1, n);
    let picks: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    let (x, _) = data.batch(split, &picks)?;
    let ig = IgSummary::compute(model, &x, config.ig_steps, &data.targets)?;

    let agreement = truth
        .map(|t| saliency_agreement(&saliency, &t.temporal))
        .transpose()?;
    Ok(ExplainReport {
        lookback: data.lookback,
        columns: data.columns.clone(),
        split,
        windows: n,
        saliency: saliency.values().to_vec(),
        feature_ablation: ablation,
        ig_feature_importance: ig.feature_importance,
        ig_temporal: ig.temporal,
        ig_steps: config.ig_steps,
        ig_windows: k,
        ig_max_completeness_gap: ig.max_completeness_gap,
        ratios: faith.ratios,
        sufficiency: faith.sufficiency,
        comprehensiveness: faith.comprehensiveness,
        e_full: faith.e_full,
        e_blank: faith.e_blank,
        degenerate: faith.degenerate,
        agreement,
        ig_map: Some(ig.map),
    })
}

/// 8-bit binary PGM of a row-major `height x width` grid; the largest
/// absolute value maps to 255.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::Data(format!(
            "{} values do not fill a {width}x{height} image",
            values.len()
        )));
    }
    let max = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if max > 0.0 {
            (v.abs() / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, out)?;
    Ok(())
}

fn transpose(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols)
        .flat_map(|c| (0..rows).map(move |r| values[r * cols + c]))
        .collect()
}

impl ExplainReport {
    /// Writes `report.json`, `saliency.csv`, `ig_map.csv` and PGM heatmaps
    /// (features down, time across).
    pub fn write(&self, dir: &Path, truth: Option<&SaliencyTruth>) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;

        let t = self.lookback;
        let mut csv = String::from(if truth.is_some() {
            "t,saliency,ig_temporal,truth\n"
        } else {
            "t,saliency,ig_temporal\n"
        });
        for i in 0..t {
            let _ = write!(
                csv,
                "{i},{:.17e},{:.17e}",
                self.saliency[i], self.ig_temporal[i]
            );
            if let Some(tr) = truth {
                let _ = write!(csv, ",{}", u8::from(tr.temporal[i]));
            }
            csv.push('\n');
        }
        fs::write(dir.join("saliency.csv"), csv)?;
        write_pgm(&dir.join("saliency.pgm"), &self.saliency, t, 1)?;

        if let Some(map) = &self.ig_map {
            let f = map.shape()[1];
            let mut csv = self.columns.join(",");
            csv.push('\n');
            for row in map.data().chunks(f) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            fs::write(dir.join("ig_map.csv"), csv)?;
            write_pgm(&dir.join("ig_map.pgm"), &transpose(map.data(), t, f), t, f)?;
        }
        if let Some(tr) = truth {
            let cells: Vec<f64> = tr.mask.iter().map(|&b| f64::from(u8::from(b))).collect();
            write_pgm(
                &dir.join("truth.pgm"),
                &transpose(&cells, t, tr.n_features),
                t,
                tr.n_features,
            )?;
        }
        Ok(())
    }
}
