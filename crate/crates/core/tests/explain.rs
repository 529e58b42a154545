use crossscale::attention::{AttentionRecord, AttentionVariant};
use crossscale::data::{make_windows, Split, SplitFractions, Table};
use crossscale::explain::{
    aggregate_saliency, faithfulness, feature_ablation, integrated_gradients, perturb,
    saliency_agreement, scale_saliency, top_k_mask, write_pgm, IgSummary, PerturbMode,
    SaliencyVector,
};
use crossscale::model::{CrossScaleNet, Forecaster, ModelConfig};
use crossscale::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn record(n: usize, p: usize, seq_len: usize, patch: Vec<f64>, local: Vec<f64>) -> AttentionRecord {
    AttentionRecord {
        scale: 2,
        patch_len: p,
        seq_len,
        patch: Tensor::new(vec![1, n, n], patch).unwrap(),
        local: Tensor::new(vec![1, n, p, p], local).unwrap(),
    }
}

#[test]
fn toy_saliency_oracle() {
    // column means: A_P -> [0.55, 0.45]; A_L -> [0.55, 0.45] and [0.4, 0.6]
    let r = record(
        2,
        2,
        4,
        vec![0.7, 0.3, 0.4, 0.6],
        vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.3, 0.7],
    );
    let raw = [0.55 * 0.55, 0.55 * 0.45, 0.45 * 0.4, 0.45 * 0.6];
    let s = scale_saliency(&r).unwrap();
    assert!(s.iter().zip(raw).all(|(a, b)| (a - b).abs() < 1e-15));
    let agg = aggregate_saliency(&[r], 4).unwrap();
    for (a, b) in agg.values().iter().zip(raw) {
        assert!((a - b / raw[0]).abs() < 1e-15);
    }
}

#[test]
fn patch_mass_on_one_patch_peaks_there() {
    let n = 3;
    let mut patch = vec![0.0; n * n];
    for row in 0..n {
        patch[row * n + 1] = 1.0;
    }
    let r = record(n, 4, 12, patch, vec![0.25; n * 16]);
    let s = aggregate_saliency(&[r], 12).unwrap();
    let peak: Vec<usize> = (0..12).filter(|&t| s.values()[t] == 1.0).collect();
    assert_eq!(peak, (4..8).collect::<Vec<_>>());
}

#[test]
fn top_k_breaks_ties_by_position() {
    let s = SaliencyVector::new(vec![0.5, 1.0, 0.5, 0.5, 0.2]).unwrap();
    assert_eq!(top_k_mask(&s, 3), vec![true, true, true, false, false]);
    assert!(SaliencyVector::new(vec![0.1, -0.2]).is_err());
    assert!(SaliencyVector::new(vec![f64::NAN]).is_err());
}

#[test]
fn pgm_header_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.pgm");
    write_pgm(&path, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5\n2 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64]);
}

fn model_and_data(seed: u64) -> (CrossScaleNet, crossscale::data::WindowDataset) {
    let config = ModelConfig {
        n_scales: 2,
        patch_len: 4,
        decomp_kernel: 3,
        hidden_dim: 8,
        variant: AttentionVariant::CrossDualKey,
        ..ModelConfig::new(16, 4, 3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 200;
    let table = Table {
        columns: vec!["a".into(), "b".into(), "y".into()],
        values: Tensor::uniform(&[rows, 3], -1.0, 1.0, &mut rng),
    };
    let data = make_windows(&table, 16, 4, &SplitFractions::default(), &[2]).unwrap();
    (CrossScaleNet::new(config, seed).unwrap(), data)
}

/// Repeats the last observed step over the horizon.
struct Persistence(usize);

impl Forecaster for Persistence {
    fn forecast<'t>(&self, _tape: &'t Tape, x: Var<'t>) -> crossscale::Result<Var<'t>> {
        let t = x.shape()[1];
        Ok(x.select(1, &vec![t - 1; self.0])?)
    }
}

fn smooth_data() -> crossscale::data::WindowDataset {
    let rows = 400;
    let values = (0..rows)
        .flat_map(|r| {
            let t = r as f64;
            [(t / 9.0).sin(), (t / 13.0).cos() + 0.1 * (t / 3.0).sin()]
        })
        .collect();
    let table = Table {
        columns: vec!["a".into(), "y".into()],
        values: Tensor::new(vec![rows, 2], values).unwrap(),
    };
    make_windows(&table, 16, 4, &SplitFractions::default(), &[1]).unwrap()
}

#[test]
fn faithfulness_endpoints_are_exact() {
    let data = smooth_data();
    let recency = SaliencyVector::new((1..=16).map(f64::from).collect()).unwrap();
    let f = faithfulness(
        &Persistence(4),
        &data,
        Split::Test,
        &recency,
        &[0.1, 0.2, 0.5, 1.0],
    )
    .unwrap();
    assert!(!f.degenerate);
    assert_eq!(f.sufficiency[3], 0.0);
    assert_eq!(f.comprehensiveness[3], 1.0);
    // the forecast reads only the last step, which every ratio keeps
    assert!(f.sufficiency[..3].iter().all(|&v| v == 0.0));
    assert!(f.comprehensiveness[..3].iter().all(|&v| v == 1.0));
    assert!(faithfulness(&Persistence(4), &data, Split::Test, &recency, &[0.0]).is_err());

    let (model, data) = model_and_data(3);
    let records = crossscale::explain::mean_attention(&model, &data, Split::Test).unwrap();
    let s = aggregate_saliency(&records, 16).unwrap();
    let f = faithfulness(&model, &data, Split::Test, &s, &[1.0]).unwrap();
    if !f.degenerate {
        assert_eq!((f.sufficiency[0], f.comprehensiveness[0]), (0.0, 1.0));
    }
}

/// Forecasts the window mean of channel 0 for every output cell.
struct FirstChannelMean(usize, usize);

impl Forecaster for FirstChannelMean {
    fn forecast<'t>(&self, _tape: &'t Tape, x: Var<'t>) -> crossscale::Result<Var<'t>> {
        let b = x.shape()[0];
        Ok(x.select(2, &[0])?
            .mean_axis(1)?
            .reshape(&[b, 1, 1])?
            .expand(1, self.0)?
            .expand(2, self.1)?)
    }
}

#[test]
fn unread_features_score_zero() {
    let (_, data) = model_and_data(4);
    let scores = feature_ablation(&FirstChannelMean(4, 3), &data, Split::Test).unwrap();
    // mean replacement leaves the window mean of channel 0 unchanged too
    assert!(scores.iter().all(|&s| s.abs() < 1e-12), "{scores:?}");
}

#[test]
fn ig_zero_at_baseline_and_complete_on_toy_model() {
    let (model, data) = model_and_data(5);
    let (x, _) = data.batch(Split::Test, &[0, 3, 7, 11, 15]).unwrap();
    let w = x.slice_outer(1);
    let ig = integrated_gradients(&model, &w, 16, Some(&w), &[2]).unwrap();
    assert!(ig.data().iter().all(|&v| v == 0.0));
    let flat = Tensor::full(&[16, 3], 0.5);
    let ig = integrated_gradients(&model, &flat, 16, None, &[2]).unwrap();
    assert!(ig.data().iter().all(|&v| v == 0.0));
    let summary = IgSummary::compute(&model, &x, 64, &[2]).unwrap();
    assert!(
        summary.max_completeness_gap < 0.02,
        "gap {}",
        summary.max_completeness_gap
    );
    assert!(integrated_gradients(&model, &x.slice_outer(0), 0, None, &[2]).is_err());
}

#[test]
fn agreement_uses_truth_size() {
    let s = SaliencyVector::new(vec![0.1, 0.9, 1.0, 0.2]).unwrap();
    let a = saliency_agreement(&s, &[false, true, true, false]).unwrap();
    assert_eq!((a.k, a.precision_at_k, a.rank_auc), (2, 1.0, 1.0));
    let a = saliency_agreement(&s, &[true, false, true, false]).unwrap();
    assert_eq!((a.precision_at_k, a.rank_auc), (0.5, 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn keep_and_remove_are_dual(
        values in proptest::collection::vec(-5.0f64..5.0, 2 * 6 * 3),
        mask in proptest::collection::vec(any::<bool>(), 6),
        cells in proptest::collection::vec(any::<bool>(), 18),
    ) {
        let x = Tensor::new(vec![2, 6, 3], values).unwrap();
        for m in [&mask, &cells] {
            let inverse: Vec<bool> = m.iter().map(|b| !b).collect();
            prop_assert_eq!(perturb(&x, m, PerturbMode::Keep).unwrap(), perturb(&x, &inverse, PerturbMode::Remove).unwrap());
        }
        prop_assert_eq!(perturb(&x, &[true; 6], PerturbMode::Keep).unwrap(), x.clone());
        prop_assert_eq!(perturb(&x, &[false; 6], PerturbMode::Remove).unwrap(), x);
    }

    #[test]
    fn saliency_ignores_batch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CrossScaleNet::new(
            ModelConfig { n_scales: 3, patch_len: 4, decomp_kernel: 3, hidden_dim: 8, ..ModelConfig::new(32, 4, 2) },
            seed,
        ).unwrap();
        let windows: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[32, 2], -2.0, 2.0, &mut rng)).collect();
        let order = [3, 1, 0, 2];
        let a = Tensor::stack(&windows).unwrap();
        let b = Tensor::stack(&order.map(|i| windows[i].clone())).unwrap();
        let (_, ra) = model.predict_with_attention(&a).unwrap();
        let (_, rb) = model.predict_with_attention(&b).unwrap();
        let sa = aggregate_saliency(&ra, 32).unwrap();
        let sb = aggregate_saliency(&rb, 32).unwrap();
        for (x, y) in sa.values().iter().zip(sb.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
