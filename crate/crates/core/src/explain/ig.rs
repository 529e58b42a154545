use serde::{Deserialize, Serialize};

use crate::model::Forecaster;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Path points evaluated per forward pass.
const PATH_CHUNK: usize = 64;

/// Per-feature mean over time, broadcast back to the `[T, F]` window.
pub fn window_mean_baseline(x: &Tensor) -> Result<Tensor> {
    let &[t, f] = x.shape() else {
        return Err(Error::Data(format!(
            "expected a [T, F] window, got {:?}",
            x.shape()
        )));
    };
    let mut mean = vec![0.0; f];
    for row in x.data().chunks(f) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / t as f64;
        }
    }
    Ok(Tensor::new(
        vec![t, f],
        mean.iter().copied().cycle().take(t * f).collect(),
    )?)
}

/// Sum of the forecast over the horizon and the `targets` channels for each
/// window in `x: [B, T, F]`.
pub fn output_sum<M: Forecaster + ?Sized>(
    model: &M,
    x: &Tensor,
    targets: &[usize],
) -> Result<Vec<f64>> {
    let pred = model.predict(x)?;
    let [b, h, d] = pred.shape()[..] else {
        return Err(Error::Data(format!(
            "forecast has shape {:?}",
            pred.shape()
        )));
    };
    Ok((0..b)
        .map(|i| {
            let block = &pred.data()[i * h * d..(i + 1) * h * d];
            block
                .chunks(d)
                .map(|row| targets.iter().map(|&c| row[c]).sum::<f64>())
                .sum()
        })
        .collect())
}

/// Attribution of the summed target forecast to each cell of `x: [T, F]`,
/// integrating gradients on a straight path from `baseline` (default: the
/// window mean) with a right Riemann sum of `steps` points.
pub fn integrated_gradients<M: Forecaster + ?Sized>(
    model: &M,
    x: &Tensor,
    steps: usize,
    baseline: Option<&Tensor>,
    targets: &[usize],
) -> Result<Tensor> {
    if steps < 1 {
        return Err(Error::Config(
            "integrated gradients needs at least one step".into(),
        ));
    }
    let &[t, f] = x.shape() else {
        return Err(Error::Data(format!(
            "expected a [T, F] window, got {:?}",
            x.shape()
        )));
    };
    let base = match baseline {
        Some(b) if b.shape() != x.shape() => {
            return Err(Error::Data(format!(
                "baseline shape {:?} differs from {:?}",
                b.shape(),
                x.shape()
            )))
        }
        Some(b) => b.clone(),
        None => window_mean_baseline(x)?,
    };
    let delta: Vec<f64> = x
        .data()
        .iter()
        .zip(base.data())
        .map(|(a, b)| a - b)
        .collect();
    let mut grad_sum = vec![0.0; t * f];
    let alphas: Vec<f64> = (1..=steps).map(|k| k as f64 / steps as f64).collect();
    for chunk in alphas.chunks(PATH_CHUNK) {
        let mut path = Vec::with_capacity(chunk.len() * t * f);
        for &a in chunk {
            path.extend(base.data().iter().zip(&delta).map(|(b, d)| b + a * d));
        }
        let tape = Tape::new();
        let input = tape.param(Tensor::new(vec![chunk.len(), t, f], path)?);
        let out = model.forecast(&tape, input)?.select(2, targets)?.sum()?;
        let g = tape.backward(out)?.wrt(input);
        for block in g.data().chunks(t * f) {
            for (s, v) in grad_sum.iter_mut().zip(block) {
                *s += v;
            }
        }
    }
    let attr = delta
        .iter()
        .zip(&grad_sum)
        .map(|(d, g)| d * g / steps as f64)
        .collect();
    Ok(Tensor::new(vec![t, f], attr)?)
}

/// Mean absolute attribution over a set of windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgSummary {
    pub windows: usize,
    pub steps: usize,
    /// Length `F`: mean |IG| over time and windows.
    pub feature_importance: Vec<f64>,
    /// Length `T`: mean |IG| over features and windows.
    pub temporal: Vec<f64>,
    /// `[T, F]` mean |IG| over windows.
    pub map: Tensor,
    /// Largest `|sum IG - (f(x) - f(baseline))| / max(|f(x) - f(baseline)|, 1e-12)`.
    pub max_completeness_gap: f64,
}

impl IgSummary {
    /// `x: [B, T, F]`.
    pub fn compute<M: Forecaster + ?Sized>(
        model: &M,
        x: &Tensor,
        steps: usize,
        targets: &[usize],
    ) -> Result<Self> {
        let &[b, t, f] = x.shape() else {
            return Err(Error::Data(format!(
                "expected [B, T, F] windows, got {:?}",
                x.shape()
            )));
        };
        if b == 0 {
            return Err(Error::Data("no windows to attribute".into()));
        }
        let mut map = vec![0.0; t * f];
        let mut worst_gap = 0.0f64;
        for i in 0..b {
            let w = x.slice_outer(i);
            let base = window_mean_baseline(&w)?;
            let ig = integrated_gradients(model, &w, steps, Some(&base), targets)?;
            for (m, v) in map.iter_mut().zip(ig.data()) {
                *m += v.abs() / b as f64;
            }
            let ends = Tensor::stack(&[w, base])?;
            let fx = output_sum(model, &ends, targets)?;
            let diff = fx[0] - fx[1];
            let total: f64 = ig.data().iter().sum();
            worst_gap = worst_gap.max((total - diff).abs() / diff.abs().max(1e-12));
        }
        let feature_importance = (0..f)
            .map(|j| (0..t).map(|ti| map[ti * f + j]).sum::<f64>() / t as f64)
            .collect();
        let temporal = map
            .chunks(f)
            .map(|r| r.iter().sum::<f64>() / f as f64)
            .collect();
        Ok(Self {
            windows: b,
            steps,
            feature_importance,
            temporal,
            map: Tensor::new(vec![t, f], map)?,
            max_completeness_gap: worst_gap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Var;

    /// `y[b, 0, 0] = sum_{t,j} w[t,j] x[b,t,j]`.
    struct Linear(Tensor);

    impl Forecaster for Linear {
        fn forecast<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
            let b = x.shape()[0];
            let n = self.0.numel();
            let w = tape.constant(self.0.clone().reshape(&[n, 1])?);
            Ok(x.reshape(&[b, n])?.matmul(w)?.reshape(&[b, 1, 1])?)
        }
    }

    fn window() -> Tensor {
        Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, 1.0]).unwrap()
    }

    #[test]
    fn exact_for_linear_models() {
        let w = Tensor::new(vec![3, 2], vec![0.2, -1.0, 0.7, 0.0, 1.5, 0.3]).unwrap();
        let model = Linear(w.clone());
        let x = window();
        let base = window_mean_baseline(&x).unwrap();
        for steps in [1, 3, 64] {
            let ig = integrated_gradients(&model, &x, steps, None, &[0]).unwrap();
            for i in 0..6 {
                let expect = w.data()[i] * (x.data()[i] - base.data()[i]);
                assert!((ig.data()[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_at_baseline() {
        let model = Linear(window());
        let x = Tensor::full(&[3, 2], 0.7);
        let ig = integrated_gradients(&model, &x, 8, None, &[0]).unwrap();
        assert!(ig.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(integrated_gradients(&Linear(window()), &window(), 0, None, &[0]).is_err());
    }

    #[test]
    fn baseline_is_column_mean() {
        let b = window_mean_baseline(&window()).unwrap();
        assert_eq!(b.data(), &[1.5, 1.0, 1.5, 1.0, 1.5, 1.0]);
    }
}
