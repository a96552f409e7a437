use motion_ood::benchmark::{
    aggregate_seeds, ood_average, read_table_csv, recursive_predict, recursive_predict_batch, run_benchmark, table_text,
    emit_table, BenchmarkConfig, BenchmarkResult, ModelVariant, Predictor, TableFormat, LONG_HORIZONS_MS, OOD_AVERAGE,
    SHORT_HORIZONS_MS,
};
use motion_ood::data::{synthetic_preset, Representation, SplitSpec, SyntheticPreset};
use motion_ood::losses::HorizonMetric;
use motion_ood::model::{GcnConfig, ModelConfig, VaeConfig};
use motion_ood::train::TrainConfig;
use motion_ood::{Result, Tensor};

/// Continues the last observed velocity, exact on straight lines.
struct Extrapolate {
    n: usize,
    t: usize,
}

impl Predictor for Extrapolate {
    fn observed(&self) -> usize {
        self.n
    }
    fn future(&self) -> usize {
        self.t
    }
    fn predict(&self, histories: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(histories
            .iter()
            .map(|h| {
                let n = h.cols();
                Tensor::from_fn(&[h.rows(), self.t], |i| {
                    let (k, t) = (i / self.t, i % self.t);
                    let v = h.at2(k, n - 1) - h.at2(k, n - 2);
                    h.at2(k, n - 1) + v * (t + 1) as f64
                })
            })
            .collect())
    }
}

#[test]
fn recursion_continues_straight_lines() {
    let p = Extrapolate { n: 4, t: 3 };
    let line = |k: usize, t: usize| 0.5 * k as f64 - 0.25 * t as f64 + 1.0;
    let history = Tensor::from_fn(&[3, 4], |i| line(i / 4, i % 4));
    for total in [1, 3, 4, 10] {
        let out = recursive_predict(&p, &history, total).unwrap();
        assert_eq!(out.shape(), [3, total]);
        for k in 0..3 {
            for t in 0..total {
                assert!((out.at2(k, t) - line(k, 4 + t)).abs() < 1e-12);
            }
        }
    }
    let other = history.map(|v| -v);
    let batch = recursive_predict_batch(&p, &[history.clone(), other.clone()], 10).unwrap();
    assert_eq!(batch[0], recursive_predict(&p, &history, 10).unwrap());
    assert_eq!(batch[1], recursive_predict(&p, &other, 10).unwrap());
    assert!(recursive_predict(&p, &history, 0).is_err());
}

fn result(model: &str, action: &str, seed: u64, value: f64) -> BenchmarkResult {
    BenchmarkResult {
        model: model.into(),
        action: action.into(),
        horizon_ms: 80.0,
        value,
        seed,
        representation: Representation::ExpMap,
    }
}

#[test]
fn aggregation_uses_sample_std() {
    let rows = vec![
        result("m", "a", 1, 1.0),
        result("m", "a", 2, 2.0),
        result("m", "a", 3, 4.0),
        result("m", "b", 1, 5.0),
    ];
    let agg = aggregate_seeds(&rows);
    assert_eq!(agg.len(), 2);
    assert!((agg[0].mean - 7.0 / 3.0).abs() < 1e-15);
    assert!((agg[0].std - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!(agg[1].single_seed());
    assert_eq!(agg[1].std, 0.0);

    let avg = ood_average(&rows, &["a".into(), "b".into()]);
    assert_eq!(avg.iter().map(|r| (r.seed, r.value)).collect::<Vec<_>>(), vec![(1, 3.0), (2, 2.0), (3, 4.0)]);
    assert!(avg.iter().all(|r| r.action == OOD_AVERAGE));

    let text = table_text(&agg);
    assert!(text.contains("2.3333 ± 1.5275"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    emit_table(&agg, TableFormat::Csv, &path).unwrap();
    assert_eq!(read_table_csv(&path).unwrap(), agg);
}

fn small_config(seeds: Vec<u64>, output_dir: Option<std::path::PathBuf>) -> BenchmarkConfig {
    let mut horizons = SHORT_HORIZONS_MS.to_vec();
    horizons.extend(LONG_HORIZONS_MS);
    BenchmarkConfig {
        observed: 10,
        future: 10,
        horizons_ms: horizons,
        fps: 25.0,
        metric: HorizonMetric::MeanAbs,
        train_stride: 10,
        test_stride: None,
        model: ModelConfig {
            gcn: GcnConfig { joints: 8, dct_coeffs: 20, hidden: 16, blocks: 1, p_drop: 0.0 },
            vae: Some(VaeConfig { latent: 2, encoder_blocks: 1, decoder_blocks: 1 }),
        },
        train: TrainConfig { epochs: 2, patience: None, ..Default::default() },
        seeds,
        output_dir,
    }
}

#[test]
fn two_class_run_is_complete_and_reproducible() {
    let ds = synthetic_preset(&SyntheticPreset { classes: 2, ..Default::default() }, 3).unwrap();
    let spec = SplitSpec::synthetic(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(vec![4], Some(dir.path().to_path_buf()));
    for variant in [ModelVariant::plain(), ModelVariant::hybrid()] {
        let a = run_benchmark(&ds, &spec, &cfg, &variant).unwrap();
        assert!(a.failures.is_empty());
        // 2 actions × 6 horizons, the long ones via recursion
        assert_eq!(a.results.len(), 12);
        assert!(a.results.iter().all(|r| r.value.is_finite() && r.value > 0.0 && r.model == variant.tag));
        let b = run_benchmark(&ds, &spec, &small_config(vec![4], None), &variant).unwrap();
        assert_eq!(a.results, b.results);
        let seed_dir = dir.path().join(&variant.tag).join("seed_4");
        assert!(seed_dir.join("loss_log.csv").is_file());
        assert!(seed_dir.join("best.ckpt").is_file());
    }
}

#[test]
fn failing_seed_does_not_stop_the_others() {
    let ds = synthetic_preset(&SyntheticPreset { classes: 2, ..Default::default() }, 3).unwrap();
    let spec = SplitSpec::synthetic(2);
    let mut cfg = small_config(vec![1, 2], None);
    cfg.model.vae = None;
    // the hybrid variant needs a VAE configuration, so every seed fails
    let out = run_benchmark(&ds, &spec, &cfg, &ModelVariant::hybrid()).unwrap();
    assert_eq!(out.failures.len(), 2);
    assert!(out.results.is_empty());
    let ok = run_benchmark(&ds, &spec, &cfg, &ModelVariant::plain()).unwrap();
    assert!(ok.failures.is_empty());
    assert!(run_benchmark(&ds, &spec, &small_config(vec![], None), &ModelVariant::plain()).is_err());
}
