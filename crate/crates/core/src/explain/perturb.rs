use serde::{Deserialize, Serialize};

use super::SaliencyVector;
use crate::data::{Split, WindowDataset};
use crate::model::Forecaster;
use crate::tensor::Tensor;
use crate::train::{evaluate, evaluate_with};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    /// Replace everything outside the mask.
    Keep,
    /// Replace everything inside the mask.
    Remove,
}

/// Mean-replaces masked cells of `[T, F]` or `[B, T, F]` windows. `mask`
/// has `T` entries (whole time steps) or `T * F` entries (cells). The
/// replacement value is the feature's mean over the window.
pub fn perturb(x: &Tensor, mask: &[bool], mode: PerturbMode) -> Result<Tensor> {
    let (t, f) = match *x.shape() {
        [t, f] | [_, t, f] => (t, f),
        ref s => {
            return Err(Error::Data(format!(
                "perturb expects [T, F] or [B, T, F], got {s:?}"
            )))
        }
    };
    let per_cell = match mask.len() {
        n if n == t => false,
        n if n == t * f => true,
        n => {
            return Err(Error::Data(format!(
                "mask of length {n} fits neither T={t} nor T*F={}",
                t * f
            )))
        }
    };
    let mut out = x.clone();
    for window in out.data_mut().chunks_mut(t * f) {
        let mut mean = vec![0.0; f];
        for row in window.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= t as f64;
        }
        for (ti, row) in window.chunks_mut(f).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let inside = if per_cell { mask[ti * f + j] } else { mask[ti] };
                let replace = match mode {
                    PerturbMode::Keep => !inside,
                    PerturbMode::Remove => inside,
                };
                if replace {
                    *v = mean[j];
                }
            }
        }
    }
    Ok(out)
}

/// The `k` highest-scoring steps; ties go to the earlier step.
pub fn top_k_mask(saliency: &SaliencyVector, k: usize) -> Vec<bool> {
    let s = saliency.values();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut mask = vec![false; s.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn steps_for_ratio(r: f64, lookback: usize) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("ratio {r} must lie in (0, 1]")));
    }
    Ok(((r * lookback as f64).ceil() as usize).min(lookback))
}

/// Sufficiency and comprehensiveness over a set of ratios, sharing the
/// reference errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub ratios: Vec<f64>,
    pub sufficiency: Vec<f64>,
    pub comprehensiveness: Vec<f64>,
    /// MSE on unperturbed inputs.
    pub e_full: f64,
    /// MSE with every step mean-replaced.
    pub e_blank: f64,
    /// Set when blanking the input does not hurt, making both scores 0.
    pub degenerate: bool,
}

fn normalized(e: f64, e_full: f64, e_blank: f64) -> f64 {
    if e_blank <= e_full {
        0.0
    } else {
        ((e - e_full) / (e_blank - e_full)).clamp(0.0, 1.0)
    }
}

pub fn faithfulness<M: Forecaster + ?Sized>(
    model: &M,
    data: &WindowDataset,
    split: Split,
    saliency: &SaliencyVector,
    ratios: &[f64],
) -> Result<Faithfulness> {
    let t = data.lookback;
    if saliency.len() != t {
        return Err(Error::Data(format!(
            "saliency length {} differs from lookback {t}",
            saliency.len()
        )));
    }
    let ks = ratios
        .iter()
        .map(|&r| steps_for_ratio(r, t))
        .collect::<Result<Vec<_>>>()?;
    let e_full = evaluate(model, data, split)?.mse;
    let blank = vec![true; t];
    let e_blank = evaluate_with(model, data, split, |x| {
        *x = perturb(x, &blank, PerturbMode::Remove)?;
        Ok(())
    })?
    .mse;
    let mut suff = Vec::with_capacity(ks.len());
    let mut comp = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mask = top_k_mask(saliency, k);
        let run = |mode| {
            evaluate_with(model, data, split, |x| {
                *x = perturb(x, &mask, mode)?;
                Ok(())
            })
            .map(|m| normalized(m.mse, e_full, e_blank))
        };
        suff.push(run(PerturbMode::Keep)?);
        comp.push(run(PerturbMode::Remove)?);
    }
    Ok(Faithfulness {
        ratios: ratios.to_vec(),
        sufficiency: suff,
        comprehensiveness: comp,
        e_full,
        e_blank,
        degenerate: e_blank <= e_full,
    })
}

/// Normalized error left when only the top `r` fraction of steps is kept.
pub fn sufficiency<M: Forecaster + ?Sized>(
    model: &M,
    data: &WindowDataset,
    split: Split,
    saliency: &SaliencyVector,
    r: f64,
) -> Result<f64> {
    Ok(faithfulness(model, data, split, saliency, &[r])?.sufficiency[0])
}

/// Normalized error caused by removing the top `r` fraction of steps.
pub fn comprehensiveness<M: Forecaster + ?Sized>(
    model: &M,
    data: &WindowDataset,
    split: Split,
    saliency: &SaliencyVector,
    r: f64,
) -> Result<f64> {
    Ok(faithfulness(model, data, split, saliency, &[r])?.comprehensiveness[0])
}

/// Relative error increase when each input column in turn is replaced by
/// its window mean.
pub fn feature_ablation<M: Forecaster + ?Sized>(
    model: &M,
    data: &WindowDataset,
    split: Split,
) -> Result<Vec<f64>> {
    let (t, f) = (data.lookback, data.n_features());
    let e_full = evaluate(model, data, split)?.mse;
    (0..f)
        .map(|j| {
            let mask: Vec<bool> = (0..t * f).map(|i| i % f == j).collect();
            let e = evaluate_with(model, data, split, |x| {
                *x = perturb(x, &mask, PerturbMode::Remove)?;
                Ok(())
            })?
            .mse;
            Ok((e - e_full) / e_full.max(1e-12))
        })
        .collect()
}
