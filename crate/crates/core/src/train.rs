//! Training loop and forecasting metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, WindowDataset};
use crate::model::{CrossScaleNet, Forecaster};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Windows per forward pass when no gradients are needed.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            seed: 42,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(
                "moment coefficients must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    /// Equals `train_mse` when the validation split is empty.
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.17e},{:.17e}", e.epoch, e.train_mse, e.val_mse);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Mean squared error between the target channels of `pred` and `y`.
pub fn target_mse<'t>(pred: Var<'t>, y: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    Ok(pred.select(2, targets)?.sub(y)?.square()?.mean()?)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Divergence {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut CrossScaleNet,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    targets: &[usize],
) -> Result<f64> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let (out, bound) = model.forward(&tape, xv, true)?;
    let loss = target_mse(out.prediction, yv, targets)?;
    let value = loss.value().item().expect("scalar loss");
    let grads = tape.backward(loss)?;
    let grad_list: Vec<Tensor> = bound
        .named()
        .into_iter()
        .map(|(_, v)| grads.wrt(*v))
        .collect();
    let grad_refs: Vec<&Tensor> = grad_list.iter().collect();
    opt.step(&mut model.params.tensors_mut(), &grad_refs)?;
    Ok(value)
}

/// Minimizes target MSE on the train windows and restores the parameters
/// with the best validation loss.
pub fn train(
    model: &mut CrossScaleNet,
    data: &WindowDataset,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    check_compatible(model, data)?;
    let n = data.n_windows(Split::Train);
    if n == 0 {
        return Err(Error::Data("train split holds no windows".into()));
    }
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();
    let mut best: Option<(f64, _)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = data.batch(Split::Train, chunk)?;
            let loss =
                train_step(model, &mut opt, &x, &y, &data.targets).map_err(diverged(epoch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
        }
        let train_mse = total / n as f64;
        let val_mse = if data.n_windows(Split::Val) > 0 {
            evaluate(model, data, Split::Val)
                .map_err(diverged(epoch))?
                .mse
        } else {
            train_mse
        };
        if !val_mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: val_mse,
            });
        }
        history.epochs.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
        if best.as_ref().map_or(true, |(b, _)| val_mse < *b) {
            best = Some((val_mse, model.params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(history)
}

fn check_compatible(model: &CrossScaleNet, data: &WindowDataset) -> Result<()> {
    let c = &model.config;
    if c.lookback != data.lookback || c.horizon != data.horizon || c.n_features != data.n_features()
    {
        return Err(Error::Config(format!(
            "model expects (T={}, H={}, D={}) but data has (T={}, H={}, D={})",
            c.lookback,
            c.horizon,
            c.n_features,
            data.lookback,
            data.horizon,
            data.n_features()
        )));
    }
    Ok(())
}

/// Metrics of `model` on `split` after applying `perturb` to every input
/// batch.
pub fn evaluate_with<M, P>(
    model: &M,
    data: &WindowDataset,
    split: Split,
    mut perturb: P,
) -> Result<Metrics>
where
    M: Forecaster + ?Sized,
    P: FnMut(&mut Tensor) -> Result<()>,
{
    let n = data.n_windows(split);
    if n == 0 {
        return Err(Error::Data(format!("{split:?} split holds no windows")));
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for chunk in data.chunks(split, EVAL_BATCH) {
        let (mut x, y) = data.batch(split, &chunk)?;
        perturb(&mut x)?;
        let pred = model.predict(&x)?;
        let d = pred.shape()[2];
        let pd = pred.data();
        let mut k = 0;
        for row in pd.chunks(d) {
            for &c in &data.targets {
                let e = row[c] - y.data()[k];
                se += e * e;
                ae += e.abs();
                k += 1;
            }
        }
        count += k;
    }
    Ok(Metrics {
        mse: se / count as f64,
        mae: ae / count as f64,
    })
}

pub fn evaluate<M: Forecaster + ?Sized>(
    model: &M,
    data: &WindowDataset,
    split: Split,
) -> Result<Metrics> {
    evaluate_with(model, data, split, |_| Ok(()))
}
