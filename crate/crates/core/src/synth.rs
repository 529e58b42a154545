//! Synthetic datasets with known temporal and feature saliency.
//!
//! Every feature is an AR(1) process plus a sinusoid. The target is a linear
//! function of the current and lagged values of a few important features,
//! so the `(lag, feature)` cells that matter are known exactly.

use std::collections::BTreeSet;
use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const AR_COEF: f64 = 0.8;
pub const PERIOD_RANGE: (f64, f64) = (20.0, 60.0);
pub const COEF_RANGE: (f64, f64) = (0.5, 1.0);
pub const DEFAULT_FEATURES: usize = 6;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;
pub const BUILTIN_NAMES: [&str; 8] = [
    "SYN1", "SYN2", "SYN3", "SYN4", "SYN5", "SYN6", "SYN7", "SYN8",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    /// Sorted, distinct, all `>= 1`.
    pub important_lags: Vec<usize>,
    /// Sorted, distinct.
    pub important_features: Vec<usize>,
    pub noise_sigma: f64,
    pub n_features: usize,
    pub n_samples: usize,
    pub seed: u64,
}

fn lags(ranges: &[(usize, usize)]) -> Vec<usize> {
    ranges
        .iter()
        .flat_map(|&(a, b)| a..=b)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// One of the eight built-in recipes with default size and seed.
pub fn builtin_spec(name: &str) -> Result<SynthSpec> {
    let syn5 = lags(&[(71, 77)]);
    let syn6 = lags(&[(48, 57)]);
    let (lag_set, feats, noise) = match name.to_ascii_uppercase().as_str() {
        "SYN1" => (lags(&[(1, 15)]), vec![0, 1], 0.01),
        "SYN2" => (
            lags(&[
                (1, 5),
                (9, 10),
                (15, 16),
                (18, 18),
                (20, 20),
                (25, 26),
                (35, 36),
                (50, 52),
                (91, 95),
            ]),
            vec![0, 2],
            0.05,
        ),
        "SYN3" => (
            lags(&[
                (9, 10),
                (15, 16),
                (18, 18),
                (20, 25),
                (31, 31),
                (34, 34),
                (60, 65),
            ]),
            vec![1, 2],
            0.08,
        ),
        "SYN4" => (
            lags(&[(9, 10), (15, 16), (18, 21), (41, 42), (45, 46)]),
            vec![1, 2],
            0.10,
        ),
        "SYN5" => (syn5, vec![1, 2], 0.06),
        "SYN6" => (syn6, vec![0, 2], 0.05),
        "SYN7" => (lags(&[(60, 60), (62, 69)]), vec![0, 1], 0.02),
        "SYN8" => {
            let union = syn5.into_iter().chain(syn6).collect::<BTreeSet<_>>();
            (union.into_iter().collect(), vec![0, 1, 2], 0.11)
        }
        _ => {
            return Err(Error::Unknown {
                kind: "dataset",
                name: name.to_string(),
            })
        }
    };
    Ok(SynthSpec {
        name: name.to_ascii_uppercase(),
        important_lags: lag_set,
        important_features: feats,
        noise_sigma: noise,
        n_features: DEFAULT_FEATURES,
        n_samples: DEFAULT_SAMPLES,
        seed: DEFAULT_SEED,
    })
}

impl SynthSpec {
    pub fn max_lag(&self) -> usize {
        self.important_lags.iter().copied().max().unwrap_or(0)
    }

    /// Rows left after the warm-up rows are dropped.
    pub fn output_rows(&self) -> usize {
        self.n_samples.saturating_sub(self.max_lag())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth spec {}: {m}", self.name)));
        if self.n_features == 0 {
            return fail("n_features must be positive".into());
        }
        if self.important_lags.contains(&0) {
            return fail("lags must be >= 1".into());
        }
        if self.important_lags.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lags must be sorted and distinct".into());
        }
        if self.important_features.windows(2).any(|w| w[0] >= w[1]) {
            return fail("important features must be sorted and distinct".into());
        }
        if let Some(&j) = self
            .important_features
            .iter()
            .find(|&&j| j >= self.n_features)
        {
            return fail(format!(
                "feature {j} out of range for {} features",
                self.n_features
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            ));
        }
        if self.n_samples <= self.max_lag() {
            return fail(format!(
                "n_samples {} must exceed the largest lag {}",
                self.n_samples,
                self.max_lag()
            ));
        }
        Ok(())
    }
}

/// Z-scores in place with the population standard deviation. Returns
/// `(mean, std)`, or `None` when the values are constant.
pub fn zscore(values: &mut [f64]) -> Option<(f64, f64)> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return None;
    }
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
    Some((mean, std))
}

/// Sinusoid amplitude giving the same variance as the stationary AR(1) part.
pub fn sinusoid_amplitude() -> f64 {
    SQRT_2 / (1.0 - AR_COEF * AR_COEF).sqrt()
}

/// `[n_samples, n_features]`, every column z-scored.
pub fn generate_features(spec: &SynthSpec) -> Result<Tensor> {
    spec.validate()?;
    let (n, f) = (spec.n_samples, spec.n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stationary_sd = 1.0 / (1.0 - AR_COEF * AR_COEF).sqrt();
    let amp = sinusoid_amplitude();
    let mut data = vec![0.0; n * f];
    let mut col = vec![0.0; n];
    for j in 0..f {
        let period = rng.gen_range(PERIOD_RANGE.0..PERIOD_RANGE.1);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let z0: f64 = StandardNormal.sample(&mut rng);
        let mut ar = stationary_sd * z0;
        for (t, c) in col.iter_mut().enumerate() {
            if t > 0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                ar = AR_COEF * ar + e;
            }
            *c = ar + amp * (2.0 * PI * t as f64 / period + phase).sin();
        }
        zscore(&mut col).ok_or_else(|| Error::Data(format!("feature {j} is constant")))?;
        for (t, &c) in col.iter().enumerate() {
            data[t * f + j] = c;
        }
    }
    Ok(Tensor::new(vec![n, f], data)?)
}

/// Target weights: `current[i]` multiplies `X[t, feats[i]]` and
/// `lagged[i][k]` multiplies `X[t - lags[k], feats[i]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub current: Vec<f64>,
    pub lagged: Vec<Vec<f64>>,
}

impl Coefficients {
    /// Magnitudes from `U[0.5, 1]`; lagged signs alternate with lag order.
    pub fn draw<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        let mut current = Vec::with_capacity(spec.important_features.len());
        let mut lagged = Vec::with_capacity(spec.important_features.len());
        for _ in &spec.important_features {
            current.push(rng.gen_range(COEF_RANGE.0..COEF_RANGE.1));
            lagged.push(
                (0..spec.important_lags.len())
                    .map(|k| {
                        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                        sign * rng.gen_range(COEF_RANGE.0..COEF_RANGE.1)
                    })
                    .collect(),
            );
        }
        Self { current, lagged }
    }

    fn check(&self, spec: &SynthSpec) -> Result<()> {
        let nf = spec.important_features.len();
        let nl = spec.important_lags.len();
        if self.current.len() != nf
            || self.lagged.len() != nf
            || self.lagged.iter().any(|l| l.len() != nl)
        {
            return Err(Error::Config(format!(
                "coefficients must be {nf} current and {nf}x{nl} lagged values"
            )));
        }
        Ok(())
    }
}

fn target_rng(spec: &SynthSpec) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    rng
}

/// Target for rows `max_lag..n_samples` of `x`, z-scored.
pub fn generate_target(x: &Tensor, spec: &SynthSpec) -> Result<(Vec<f64>, Coefficients)> {
    spec.validate()?;
    let mut rng = target_rng(spec);
    let coefs = Coefficients::draw(spec, &mut rng);
    let y = target_with(x, spec, &coefs, &mut rng)?;
    Ok((y, coefs))
}

/// Like [`generate_target`] with caller-chosen coefficients.
pub fn generate_target_with(
    x: &Tensor,
    spec: &SynthSpec,
    coefs: &Coefficients,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = target_rng(spec);
    // keep the noise stream aligned with the drawn-coefficient path
    let _ = Coefficients::draw(spec, &mut rng);
    target_with(x, spec, coefs, &mut rng)
}

fn target_with(
    x: &Tensor,
    spec: &SynthSpec,
    coefs: &Coefficients,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    coefs.check(spec)?;
    let &[n, f] = x.shape() else {
        return Err(Error::Data(format!(
            "features must be [rows, features], got {:?}",
            x.shape()
        )));
    };
    if f != spec.n_features {
        return Err(Error::Data(format!(
            "expected {} feature columns, got {f}",
            spec.n_features
        )));
    }
    let start = spec.max_lag();
    if n <= start {
        return Err(Error::Data(format!("{n} rows cannot cover lag {start}")));
    }
    let xd = x.data();
    let mut y: Vec<f64> = (start..n)
        .map(|t| {
            let mut acc = 0.0;
            for (i, &j) in spec.important_features.iter().enumerate() {
                acc += coefs.current[i] * xd[t * f + j];
                for (k, &lag) in spec.important_lags.iter().enumerate() {
                    acc += coefs.lagged[i][k] * xd[(t - lag) * f + j];
                }
            }
            acc
        })
        .collect();
    zscore(&mut y)
        .ok_or_else(|| Error::Data(format!("{}: target signal is constant", spec.name)))?;
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut y {
            *v += noise.sample(rng);
        }
        zscore(&mut y).ok_or_else(|| Error::Data("noisy target is constant".into()))?;
    }
    Ok(y)
}

/// A generated dataset: features and target share rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub spec: SynthSpec,
    /// `[rows, n_features]`.
    pub features: Tensor,
    pub target: Vec<f64>,
    pub coefficients: Coefficients,
}

impl SynthData {
    pub fn rows(&self) -> usize {
        self.target.len()
    }

    /// `[rows, n_features + 1]` with the target as the last column.
    pub fn table(&self) -> Tensor {
        let f = self.spec.n_features;
        let mut data = Vec::with_capacity(self.rows() * (f + 1));
        for (row, &y) in self.features.data().chunks(f).zip(&self.target) {
            data.extend_from_slice(row);
            data.push(y);
        }
        Tensor::new(vec![self.rows(), f + 1], data).expect("row count matches")
    }

    pub fn column_names(&self) -> Vec<String> {
        (0..self.spec.n_features)
            .map(|j| format!("feat_{j}"))
            .chain(std::iter::once("target".to_string()))
            .collect()
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let x = generate_features(spec)?;
    let (target, coefficients) = generate_target(&x, spec)?;
    let start = spec.max_lag();
    let f = spec.n_features;
    let features = Tensor::new(vec![target.len(), f], x.data()[start * f..].to_vec())?;
    Ok(SynthData {
        spec: spec.clone(),
        features,
        target,
        coefficients,
    })
}

/// Binary `(time, feature)` mask over a lookback window; row `T - lag` is the
/// step `lag` positions before the window end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTruth {
    pub lookback: usize,
    pub n_features: usize,
    /// Row-major `[lookback, n_features]`.
    pub mask: Vec<bool>,
    /// Any over features, length `lookback`.
    pub temporal: Vec<bool>,
}

impl SaliencyTruth {
    pub fn at(&self, t: usize, j: usize) -> bool {
        self.mask[t * self.n_features + j]
    }

    pub fn n_salient_steps(&self) -> usize {
        self.temporal.iter().filter(|&&b| b).count()
    }

    /// Parses a 0/1 CSV matrix with one row per time step.
    pub fn from_csv(text: &str) -> Result<Self> {
        let is_cell = |c: &str| matches!(c.trim(), "0" | "1");
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        // optional header
        if lines.peek().is_some_and(|l| !l.split(',').all(is_cell)) {
            lines.next();
        }
        let mut rows: Vec<Vec<bool>> = Vec::new();
        for (i, line) in lines.enumerate() {
            if !line.split(',').all(is_cell) {
                return Err(Error::Data(format!(
                    "mask row {}: expected 0/1 cells",
                    i + 1
                )));
            }
            rows.push(line.split(',').map(|c| c.trim() == "1").collect());
        }
        let f = rows.first().map(Vec::len).unwrap_or(0);
        if f == 0 || rows.iter().any(|r| r.len() != f) {
            return Err(Error::Data(
                "mask rows must be non-empty and equally long".into(),
            ));
        }
        let temporal = rows.iter().map(|r| r.iter().any(|&b| b)).collect();
        Ok(Self {
            lookback: rows.len(),
            n_features: f,
            mask: rows.into_iter().flatten().collect(),
            temporal,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = (0..self.n_features)
            .map(|j| format!("feat_{j}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in self.mask.chunks(self.n_features) {
            let cells: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn ground_truth_mask(spec: &SynthSpec, lookback: usize) -> Result<SaliencyTruth> {
    if lookback <= spec.max_lag() {
        return Err(Error::Config(format!(
            "lookback {lookback} must exceed the largest lag {}",
            spec.max_lag()
        )));
    }
    let f = spec.n_features;
    let mut mask = vec![false; lookback * f];
    for &lag in &spec.important_lags {
        for &j in &spec.important_features {
            mask[(lookback - lag) * f + j] = true;
        }
    }
    let temporal = mask.chunks(f).map(|r| r.iter().any(|&b| b)).collect();
    Ok(SaliencyTruth {
        lookback,
        n_features: f,
        mask,
        temporal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: SynthSpec,
    pub seed: u64,
    pub rows: usize,
    pub columns: Vec<String>,
    pub coefficients: Coefficients,
}

/// Paths written by [`export_dataset`].
#[derive(Clone, Debug)]
pub struct ExportedFiles {
    pub data: PathBuf,
    pub sidecar: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Formats with 17 significant digits so parsing restores the exact value.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `<stem>.csv` and `<stem>.json`, plus `<stem>_mask.csv` when a
/// lookback is given.
pub fn export_dataset(
    data: &SynthData,
    dir: &Path,
    stem: &str,
    mask_lookback: Option<usize>,
) -> Result<ExportedFiles> {
    fs::create_dir_all(dir)?;
    let columns = data.column_names();
    let mut csv = columns.join(",");
    csv.push('\n');
    let table = data.table();
    for row in table.data().chunks(columns.len()) {
        let cells: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let data_path = dir.join(format!("{stem}.csv"));
    fs::write(&data_path, csv)?;

    let sidecar = Sidecar {
        spec: data.spec.clone(),
        seed: data.spec.seed,
        rows: data.rows(),
        columns,
        coefficients: data.coefficients.clone(),
    };
    let sidecar_path = dir.join(format!("{stem}.json"));
    fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;

    let mask = match mask_lookback {
        Some(t) => {
            let truth = ground_truth_mask(&data.spec, t)?;
            let p = dir.join(format!("{stem}_mask.csv"));
            fs::write(&p, truth.to_csv())?;
            Some(p)
        }
        None => None,
    };
    Ok(ExportedFiles {
        data: data_path,
        sidecar: sidecar_path,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str, n: usize) -> SynthSpec {
        SynthSpec {
            n_samples: n,
            ..builtin_spec(name).unwrap()
        }
    }

    #[test]
    fn builtin_rows() {
        let s1 = builtin_spec("SYN1").unwrap();
        assert_eq!(s1.important_lags, (1..=15).collect::<Vec<_>>());
        assert_eq!(s1.important_features, vec![0, 1]);
        assert_eq!(s1.noise_sigma, 0.01);
        let s5 = builtin_spec("SYN5").unwrap();
        assert_eq!(s5.important_lags, (71..=77).collect::<Vec<_>>());
        assert_eq!(s5.important_features, vec![1, 2]);
        assert_eq!(s5.noise_sigma, 0.06);
        let s7 = builtin_spec("syn7").unwrap();
        assert_eq!(s7.important_lags, [60, 62, 63, 64, 65, 66, 67, 68, 69]);
        let s8 = builtin_spec("SYN8").unwrap();
        let mut expect: Vec<usize> = (48..=57).chain(71..=77).collect();
        expect.sort();
        assert_eq!(s8.important_lags, expect);
        assert_eq!(s8.important_features, vec![0, 1, 2]);
        assert_eq!(s8.noise_sigma, 0.11);
        assert!(builtin_spec("SYN9").is_err());
        for n in BUILTIN_NAMES {
            builtin_spec(n).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn mask_positions() {
        let m = ground_truth_mask(&builtin_spec("SYN1").unwrap(), 96).unwrap();
        let idx: Vec<usize> = (0..96).filter(|&t| m.temporal[t]).collect();
        assert_eq!(idx, (81..=95).collect::<Vec<_>>());
        assert!(m.at(95, 0) && m.at(95, 1) && !m.at(95, 2));
        let m5 = ground_truth_mask(&builtin_spec("SYN5").unwrap(), 96).unwrap();
        let idx: Vec<usize> = (0..96).filter(|&t| m5.temporal[t]).collect();
        assert_eq!(idx, (19..=25).collect::<Vec<_>>());
        assert!(ground_truth_mask(&builtin_spec("SYN5").unwrap(), 77).is_err());
    }

    #[test]
    fn empty_lags_give_empty_mask() {
        let spec = SynthSpec {
            important_lags: vec![],
            ..builtin_spec("SYN1").unwrap()
        };
        let m = ground_truth_mask(&spec, 10).unwrap();
        assert_eq!(m.n_salient_steps(), 0);
    }

    #[test]
    fn mask_csv_round_trip() {
        let m = ground_truth_mask(&builtin_spec("SYN3").unwrap(), 96).unwrap();
        assert_eq!(SaliencyTruth::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn features_are_deterministic_and_standardized() {
        let spec = small("SYN1", 2000);
        let a = generate_features(&spec).unwrap();
        assert_eq!(a, generate_features(&spec).unwrap());
        let f = spec.n_features;
        for j in 0..f {
            let col: Vec<f64> = a.data().iter().skip(j).step_by(f).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_target_is_lagged_feature() {
        let spec = SynthSpec {
            name: "toy".into(),
            important_lags: vec![1],
            important_features: vec![0],
            noise_sigma: 0.0,
            n_features: 2,
            n_samples: 500,
            seed: 3,
        };
        let x = generate_features(&spec).unwrap();
        let coefs = Coefficients {
            current: vec![0.0],
            lagged: vec![vec![0.7]],
        };
        let y = generate_target_with(&x, &spec, &coefs).unwrap();
        let mut lagged: Vec<f64> = (0..499).map(|t| x.at(&[t, 0])).collect();
        zscore(&mut lagged).unwrap();
        for (a, b) in y.iter().zip(&lagged) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn coefficient_signs_alternate() {
        let spec = builtin_spec("SYN1").unwrap();
        let c = Coefficients::draw(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        for row in &c.lagged {
            for (k, a) in row.iter().enumerate() {
                assert!((0.5..=1.0).contains(&a.abs()));
                assert_eq!(*a > 0.0, k % 2 == 0);
            }
        }
        assert!(c.current.iter().all(|c| (0.5..1.0).contains(c)));
    }

    #[test]
    fn too_few_samples() {
        assert!(generate(&small("SYN5", 77)).is_err());
        assert_eq!(generate(&small("SYN5", 200)).unwrap().rows(), 123);
    }
}
