//! Temporal saliency from attention, agreement with ground truth, and the
//! perturbation and gradient attribution battery.

mod ig;
mod perturb;
mod report;

pub use ig::{integrated_gradients, output_sum, window_mean_baseline, IgSummary};
pub use perturb::{
    comprehensiveness, faithfulness, feature_ablation, perturb, sufficiency, top_k_mask,
    Faithfulness, PerturbMode,
};
pub use report::{explain, mean_attention, write_pgm, ExplainConfig, ExplainReport};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Non-negative per-step scores, max-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector {
    values: Vec<f64>,
}

impl SaliencyVector {
    /// Scales `values` so the largest is 1. All-zero input stays zero.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("saliency vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(
                "saliency values must be finite and non-negative".into(),
            ));
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut values {
                *v /= max;
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-step score of one record at its own resolution: the attention mass
/// a step's patch receives times the mass the step receives inside its
/// patch. `record` must hold a single batch entry.
pub fn scale_saliency(record: &AttentionRecord) -> Result<Vec<f64>> {
    let r = if record.batch_size() == 1 {
        record.clone()
    } else {
        record.batch_mean()
    };
    let n = r.n_patches();
    let p = r.patch_len;
    if r.patch.shape() != [1, n, n] || r.local.shape() != [1, n, p, p] || r.seq_len > n * p {
        return Err(Error::Data(format!(
            "inconsistent attention record: patch {:?}, local {:?}, seq_len {}",
            r.patch.shape(),
            r.local.shape(),
            r.seq_len
        )));
    }
    let ap = r.patch.data();
    let s_patch: Vec<f64> = (0..n)
        .map(|col| (0..n).map(|row| ap[row * n + col]).sum::<f64>() / n as f64)
        .collect();
    let al = r.local.data();
    Ok((0..r.seq_len)
        .map(|t| {
            let (patch, pos) = (t / p, t % p);
            let block = &al[patch * p * p..(patch + 1) * p * p];
            let s_local = (0..p).map(|q| block[q * p + pos]).sum::<f64>() / p as f64;
            s_patch[patch] * s_local
        })
        .collect())
}

/// Combines per-scale saliency, resampled to `lookback`, into one vector.
pub fn aggregate_saliency(records: &[AttentionRecord], lookback: usize) -> Result<SaliencyVector> {
    if records.is_empty() {
        return Err(Error::Config(
            "attention saliency needs at least two scales; this model records no attention".into(),
        ));
    }
    let mut acc = vec![0.0; lookback];
    for r in records {
        let s = scale_saliency(r)?;
        let up = Tensor::from_vec(s).linear_interp(0, lookback)?;
        for (a, v) in acc.iter_mut().zip(up.data()) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= records.len() as f64;
    }
    SaliencyVector::new(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub k: usize,
    pub precision_at_k: f64,
    pub rank_auc: f64,
}

/// Precision of the top-k steps (k = number of true steps) and the
/// probability that a true step outranks a false one, ties counted half.
pub fn saliency_agreement(saliency: &SaliencyVector, truth: &[bool]) -> Result<Agreement> {
    if saliency.len() != truth.len() {
        return Err(Error::Data(format!(
            "saliency length {} differs from truth length {}",
            saliency.len(),
            truth.len()
        )));
    }
    let k = truth.iter().filter(|&&b| b).count();
    if k == 0 {
        return Err(Error::Data("ground truth marks no salient step".into()));
    }
    let s = saliency.values();
    let top = top_k_mask(saliency, k);
    let hits = top.iter().zip(truth).filter(|(&a, &b)| a && b).count();
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, _) in truth.iter().enumerate().filter(|(_, &b)| b) {
        for (j, _) in truth.iter().enumerate().filter(|(_, &b)| !b) {
            pairs += 1.0;
            if s[i] > s[j] {
                wins += 1.0;
            } else if s[i] == s[j] {
                wins += 0.5;
            }
        }
    }
    Ok(Agreement {
        k,
        precision_at_k: hits as f64 / k as f64,
        // with no negatives every ordering is perfect
        rank_auc: if pairs > 0.0 { wins / pairs } else { 1.0 },
    })
}
