use crossscale::data::read_csv;
use crossscale::synth::{
    builtin_spec, export_dataset, generate, generate_features, generate_target,
    generate_target_with, ground_truth_mask, Coefficients, Sidecar, SynthSpec, BUILTIN_NAMES,
};
use crossscale::tensor::Tensor;
use nalgebra::{DMatrix, DVector};

/// Least-squares R² of `y` on the given regressor columns plus an intercept.
fn r_squared(columns: &[Vec<f64>], y: &[f64]) -> f64 {
    let n = y.len();
    let a = DMatrix::from_fn(n, columns.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            columns[j - 1][i]
        }
    });
    let b = DVector::from_column_slice(y);
    let coef = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
    let resid = &b - &a * coef;
    let mean = y.iter().sum::<f64>() / n as f64;
    let total: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    1.0 - resid.norm_squared() / total
}

/// Columns `X[t - lag, j]` for the rows the target covers.
fn lagged_design(x: &Tensor, spec: &SynthSpec, features: &[usize]) -> Vec<Vec<f64>> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let start = spec.max_lag();
    let mut cols = Vec::new();
    for &j in features {
        for lag in std::iter::once(0).chain(spec.important_lags.iter().copied()) {
            cols.push((start..n).map(|t| x.data()[(t - lag) * f + j]).collect());
        }
    }
    cols
}

fn stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn builtin_rows() {
    let syn1 = builtin_spec("SYN1").unwrap();
    assert_eq!(syn1.important_lags, (1..=15).collect::<Vec<_>>());
    assert_eq!(
        (syn1.important_features.clone(), syn1.noise_sigma),
        (vec![0, 1], 0.01)
    );
    let syn5 = builtin_spec("syn5").unwrap();
    assert_eq!(syn5.important_lags, (71..=77).collect::<Vec<_>>());
    assert_eq!(
        (syn5.important_features.clone(), syn5.noise_sigma),
        (vec![1, 2], 0.06)
    );
    let syn8 = builtin_spec("SYN8").unwrap();
    let mut union: Vec<usize> = (48..=57).chain(71..=77).collect();
    union.sort();
    assert_eq!(syn8.important_lags, union);
    assert_eq!(
        (syn8.important_features.clone(), syn8.noise_sigma),
        (vec![0, 1, 2], 0.11)
    );
    assert!(builtin_spec("SYN9").is_err());
    for name in BUILTIN_NAMES {
        builtin_spec(name).unwrap().validate().unwrap();
    }
}

#[test]
fn same_seed_same_bits() {
    let spec = SynthSpec {
        n_samples: 800,
        ..builtin_spec("SYN3").unwrap()
    };
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let other = generate(&SynthSpec {
        seed: 7,
        ..spec.clone()
    })
    .unwrap();
    assert_ne!(other.target, generate(&spec).unwrap().target);
}

#[test]
fn feature_statistics() {
    let spec = builtin_spec("SYN1").unwrap();
    let x = generate_features(&spec).unwrap();
    let f = spec.n_features;
    for j in 0..f {
        let col: Vec<f64> = x.data().iter().skip(j).step_by(f).copied().collect();
        let (mean, std) = stats(&col);
        assert!(
            mean.abs() < 0.05 && (std - 1.0).abs() < 0.05,
            "feature {j}: {mean} {std}"
        );
        let lag1 = col.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (col.len() - 1) as f64;
        assert!(lag1 > 0.5, "feature {j} lag-1 autocorrelation {lag1}");
    }
}

#[test]
fn degenerate_spec_is_a_pure_lag() {
    let spec = SynthSpec {
        name: "lag1".into(),
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
        lagged: vec![vec![0.8]],
    };
    let y = generate_target_with(&x, &spec, &coefs).unwrap();
    let prev: Vec<f64> = (0..499).map(|t| x.data()[t * 2]).collect();
    assert!((r_squared(&[prev], &y) - 1.0).abs() < 1e-12);
}

#[test]
fn syn1_least_squares_oracle() {
    let spec = builtin_spec("SYN1").unwrap();
    let x = generate_features(&spec).unwrap();
    let (y, _) = generate_target(&x, &spec).unwrap();
    let r2 = r_squared(&lagged_design(&x, &spec, &spec.important_features), &y);
    assert!(r2 > 0.95, "R² {r2}");
    for j in 3..spec.n_features {
        let r2 = r_squared(&lagged_design(&x, &spec, &[j]), &y);
        assert!(r2 < 0.1, "unimportant feature {j} explains R² {r2}");
    }
}

#[test]
fn every_builtin_is_identifiable() {
    for name in BUILTIN_NAMES {
        let spec = builtin_spec(name).unwrap();
        let x = generate_features(&spec).unwrap();
        let (y, _) = generate_target(&x, &spec).unwrap();
        let r2 = r_squared(&lagged_design(&x, &spec, &spec.important_features), &y);
        assert!(r2 > 0.9, "{name}: R² {r2}");
    }
}

#[test]
fn mask_layout() {
    let syn1 = ground_truth_mask(&builtin_spec("SYN1").unwrap(), 96).unwrap();
    let on: Vec<usize> = (0..96).filter(|&t| syn1.temporal[t]).collect();
    assert_eq!(on, (81..=95).collect::<Vec<_>>());
    assert!(syn1.at(95, 0) && syn1.at(95, 1) && !syn1.at(95, 2));
    let syn5 = ground_truth_mask(&builtin_spec("SYN5").unwrap(), 96).unwrap();
    let on: Vec<usize> = (0..96).filter(|&t| syn5.temporal[t]).collect();
    assert_eq!(on, (19..=25).collect::<Vec<_>>());
    assert!(ground_truth_mask(&builtin_spec("SYN5").unwrap(), 77).is_err());
    let empty = SynthSpec {
        important_lags: vec![],
        ..builtin_spec("SYN1").unwrap()
    };
    assert!(ground_truth_mask(&empty, 10)
        .unwrap()
        .mask
        .iter()
        .all(|&b| !b));
}

#[test]
fn mask_counts_and_recency() {
    for name in BUILTIN_NAMES {
        let spec = builtin_spec(name).unwrap();
        let truth = ground_truth_mask(&spec, 96).unwrap();
        assert_eq!(truth.n_salient_steps(), spec.important_lags.len(), "{name}");
        let on: Vec<usize> = (0..96).filter(|&t| truth.temporal[t]).collect();
        let median = on[on.len() / 2];
        match name {
            "SYN1" | "SYN2" | "SYN3" | "SYN4" => assert!(median > 48, "{name}: {median}"),
            "SYN5" | "SYN6" | "SYN7" => assert!(median < 48, "{name}: {median}"),
            _ => {}
        }
    }
}

#[test]
fn export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_samples: 600,
        ..builtin_spec("SYN2").unwrap()
    };
    let data = generate(&spec).unwrap();
    let files = export_dataset(&data, dir.path(), "SYN2", Some(96)).unwrap();
    let table = read_csv(&files.data).unwrap();
    assert_eq!(table.rows(), spec.n_samples - spec.max_lag());
    assert_eq!(table.values, data.table());
    assert_eq!(table.columns.last().map(String::as_str), Some("target"));
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(&files.sidecar).unwrap()).unwrap();
    assert_eq!(sidecar.spec, spec);
    assert_eq!(
        SynthSpec {
            n_samples: 10_000,
            ..sidecar.spec
        },
        builtin_spec("SYN2").unwrap()
    );
    let mask = std::fs::read_to_string(files.mask.unwrap()).unwrap();
    let truth = crossscale::synth::SaliencyTruth::from_csv(&mask).unwrap();
    assert_eq!(truth, ground_truth_mask(&spec, 96).unwrap());
}
