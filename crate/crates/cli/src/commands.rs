use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use motion_ood::benchmark::{
    aggregate_seeds, emit_table, ood_average, run_benchmark, table_text, BenchmarkConfig, BenchmarkResult, TableFormat,
};
use motion_ood::classifier::{confusion_matrix, precision_recall, train_classifier, ClassifierConfig, LabeledSet};
use motion_ood::data::{load_dataset, make_ood_split, synthetic_preset, windows_of, Dataset, LoadConfig, SplitSpec};
use motion_ood::dct::{DctBasis, TrajectoryWindow};
use motion_ood::gradcheck::GradCheckConfig;
use motion_ood::latent::{export_latents_csv, export_projection_csv, extract_latents, project_pca_2d};
use motion_ood::model::{load_checkpoint, GcnConfig, HybridModel, LoadOptions, ModelConfig, VaeConfig};
use motion_ood::train::{check_loss_gradients, prepare_samples, train, Sample};
use motion_ood::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

fn load_data(cfg: &RunConfig) -> Result<(Dataset, SplitSpec)> {
    let d = &cfg.data;
    let dataset = match &d.root {
        Some(root) => load_dataset(
            root,
            &LoadConfig { representation: d.representation, drop_global: d.drop_global, extension: None },
        )
        .with_context(|| format!("loading dataset from {}", root.display()))?,
        None => synthetic_preset(&d.synthetic, d.synthetic_seed)?,
    };
    let spec = match d.preset.as_str() {
        "synthetic" => SplitSpec::synthetic(dataset.actions().len()),
        other => SplitSpec::preset(other)?,
    };
    Ok((dataset, spec))
}

fn channels(ds: &Dataset) -> Result<usize> {
    ds.channels().ok_or_else(|| anyhow!("dataset has no sequences"))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let (dataset, spec) = load_data(cfg)?;
    let split = make_ood_split(&dataset, &spec)?;
    let (n, t) = (cfg.data.observed, cfg.data.future);
    let model_cfg = cfg.model_config(channels(&dataset)?);
    let basis = DctBasis::new(model_cfg.gcn.dct_coeffs, n + t)?;
    let train_set = prepare_samples(&windows_of(&split.train, n, t, cfg.train.stride)?, &basis)?;
    let val_set = prepare_samples(&windows_of(&split.val, n, t, t)?, &basis)?;

    let mut model = HybridModel::new(model_cfg, cfg.seed)?;
    let mut tcfg = cfg.train_config(cfg.seed);
    tcfg.output_dir = Some(cfg.output.clone());
    println!(
        "training on {} windows ({} validation), {} parameters, lambda {}",
        train_set.len(),
        val_set.len(),
        model.parameter_count(),
        tcfg.lambda
    );
    let report = train(&mut model, &train_set, &val_set, &tcfg)?;
    println!(
        "{} steps over {} epochs; best epoch {} with validation L1 {:.6}",
        report.steps.len(),
        report.epochs.len(),
        report.best_epoch,
        report.best_val
    );
    println!("checkpoint {}", cfg.output.join("best.ckpt").display());
    println!("loss log   {}", cfg.output.join("loss_log.csv").display());
    Ok(())
}

fn per_seed_csv(results: &[BenchmarkResult]) -> String {
    let mut s = String::from("model,action,horizon_ms,seed,value,representation\n");
    for r in results {
        writeln!(s, "{},{},{},{},{:?},{}", r.model, r.action, r.horizon_ms, r.seed, r.value, r.representation.name())
            .expect("string write");
    }
    s
}

pub fn benchmark_cmd(cfg: &RunConfig) -> Result<()> {
    let (dataset, spec) = load_data(cfg)?;
    let seeds: Vec<u64> = (0..cfg.benchmark.seeds as u64).map(|i| cfg.seed + i).collect();
    let b = &cfg.benchmark;
    let mut model = cfg.model_config(channels(&dataset)?);
    if model.vae.is_none() {
        // the hybrid variant always needs the branch shape
        model.vae = Some(VaeConfig {
            latent: cfg.model.latent,
            encoder_blocks: cfg.model.encoder_blocks,
            decoder_blocks: cfg.model.decoder_blocks,
        });
    }
    let bcfg = BenchmarkConfig {
        observed: cfg.data.observed,
        future: cfg.data.future,
        horizons_ms: b.horizons_ms.clone(),
        fps: cfg.data.fps,
        metric: b.metric,
        train_stride: cfg.train.stride,
        test_stride: (b.test_stride > 0).then_some(b.test_stride),
        model,
        train: cfg.train_config(cfg.seed),
        seeds: seeds.clone(),
        output_dir: Some(cfg.output.clone()),
    };
    let mut results = Vec::new();
    let mut failed = 0;
    let mut attempted = 0;
    for variant in cfg.variants() {
        println!("running {} on seeds {seeds:?}", variant.tag);
        let out = run_benchmark(&dataset, &spec, &bcfg, &variant)?;
        attempted += seeds.len();
        for f in &out.failures {
            failed += 1;
            eprintln!("warning: {} seed {} failed: {}", variant.tag, f.seed, f.error);
        }
        results.extend(out.results);
    }
    if failed == attempted {
        bail!("all {attempted} benchmark runs failed");
    }
    let mut all = results.clone();
    all.extend(ood_average(&results, &spec.ood_actions));
    let rows = aggregate_seeds(&all);
    write_file(&cfg.output.join("per_seed.csv"), per_seed_csv(&all))?;
    emit_table(&rows, TableFormat::Csv, &cfg.output.join("results.csv"))?;
    emit_table(&rows, TableFormat::AlignedText, &cfg.output.join("results.txt"))?;
    print!("{}", table_text(&rows));
    println!("{failed} of {attempted} runs failed; tables in {}", cfg.output.display());
    Ok(())
}

pub fn classify_cmd(cfg: &RunConfig) -> Result<()> {
    let (dataset, spec) = load_data(cfg)?;
    let mut train_subjects = spec.train_subjects.clone();
    train_subjects.extend(spec.validation_subject.clone());
    let (n, t, m) = (cfg.data.observed, cfg.data.future, cfg.model.dct);
    let train_set = LabeledSet::from_dataset(&dataset, &train_subjects, n, t, cfg.classifier.stride, m)?;
    let test_set = LabeledSet::from_dataset(&dataset, &[spec.test_subject.clone()], n, t, cfg.classifier.stride, m)?;
    let c = &cfg.classifier;
    let ccfg = ClassifierConfig {
        dropout: c.dropout,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        epochs: c.epochs,
        seed: cfg.seed,
        ..ClassifierConfig::new(train_set.inputs.cols(), train_set.class_names.len())
    };
    println!("{} training windows, {} test windows, {} classes", train_set.len(), test_set.len(), ccfg.classes);
    let clf = train_classifier(&train_set, &ccfg)?;
    let matrix = confusion_matrix(&clf, &test_set)?;
    matrix.write_csv(&cfg.output.join("confusion.csv"))?;
    let mut scores = String::from("class,precision,recall\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_else(|| "nan".into());
    for (name, s) in matrix.class_names.iter().zip(precision_recall(&matrix)) {
        writeln!(scores, "{name},{},{}", fmt(s.precision), fmt(s.recall)).expect("string write");
        let marker = if *name == spec.id_action { " (ID)" } else { "" };
        println!("{name:<24} precision {:>8} recall {:>8}{marker}", fmt(s.precision), fmt(s.recall));
    }
    write_file(&cfg.output.join("scores.csv"), scores)?;
    println!("confusion matrix {}", cfg.output.join("confusion.csv").display());
    Ok(())
}

pub fn latents_cmd(cfg: &RunConfig) -> Result<()> {
    let path = cfg.latents.checkpoint.as_deref().expect("checked at startup");
    let model = load_checkpoint(path, LoadOptions::default()).with_context(|| format!("loading {}", path.display()))?;
    if !model.has_vae() {
        bail!(
            "checkpoint {} has no VAE branch; latent extraction needs a model trained with model.vae = true",
            path.display()
        );
    }
    let (dataset, _) = load_data(cfg)?;
    let dataset = if cfg.latents.subjects.is_empty() {
        dataset
    } else {
        let keep = dataset.sequences.into_iter().filter(|s| cfg.latents.subjects.contains(&s.subject)).collect();
        Dataset::new(keep)?
    };
    if dataset.sequences.is_empty() {
        bail!("no sequences for subjects {:?}", cfg.latents.subjects);
    }
    let stride = if cfg.latents.stride > 0 { cfg.latents.stride } else { cfg.data.future };
    let records = extract_latents(&model, &dataset, cfg.data.observed, cfg.data.future, stride)?;
    let projection = project_pca_2d(&records)?;
    export_latents_csv(&records, &cfg.output.join("latents.csv"))?;
    export_projection_csv(&projection, &cfg.output.join("projection.csv"))?;
    let [a, b] = projection.explained_variance;
    println!(
        "{} latent vectors of width {}; 2-D projection keeps {:.1}% of the variance",
        records.len(),
        records[0].z.len(),
        100.0 * (a + b) / projection.total_variance.max(f64::MIN_POSITIVE)
    );
    println!("wrote {} and {}", cfg.output.join("latents.csv").display(), cfg.output.join("projection.csv").display());
    Ok(())
}

pub fn grad_check_cmd(cfg: &RunConfig) -> Result<()> {
    let g = &cfg.gradcheck;
    if g.observed < 2 || g.observed >= g.frames || g.dct == 0 || g.dct > g.frames || g.batch == 0 {
        bail!("gradcheck needs 2 <= observed < frames, 1 <= dct <= frames and batch >= 1");
    }
    let model_cfg = ModelConfig {
        gcn: GcnConfig { joints: g.joints, dct_coeffs: g.dct, hidden: g.hidden, blocks: g.blocks, p_drop: g.p_drop },
        vae: Some(VaeConfig { latent: g.latent, encoder_blocks: g.blocks, decoder_blocks: g.blocks }),
    };
    let model = HybridModel::new(model_cfg, cfg.seed)?;
    // uniform noise windows exercise every parameter without any structure to hide behind
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let windows = (0..g.batch)
        .map(|_| TrajectoryWindow::new(Tensor::from_fn(&[g.joints, g.frames], |_| rng.random_range(-1.0..1.0)), g.observed))
        .collect::<motion_ood::Result<Vec<_>>>()?;
    let basis = DctBasis::new(g.dct, g.frames)?;
    let samples = prepare_samples(&windows, &basis)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let check = GradCheckConfig { step: g.step, tolerance: g.tolerance, stencil: g.stencil, ..Default::default() };

    let mut csv = String::from("lambda,tensor,elements,max_rel_error,max_abs_error,passed\n");
    let mut failures = Vec::new();
    println!("{} parameters, batch {}, step {:e}, tolerance {:e}", model.parameter_count(), batch.len(), g.step, g.tolerance);
    for &lambda in &g.lambdas {
        let report = check_loss_gradients(&model, &batch, &basis, lambda, cfg.seed, check)?;
        println!("lambda {lambda}: worst relative error {:.3e}", report.worst());
        for l in &report.leaves {
            writeln!(csv, "{lambda:?},{},{},{:e},{:e},{}", l.name, l.elements, l.max_rel_error, l.max_abs_error, l.passed)
                .expect("string write");
            if !l.passed {
                println!("  FAIL {:<24} rel {:.3e} abs {:.3e}", l.name, l.max_rel_error, l.max_abs_error);
                failures.push(format!("{} at lambda {lambda}", l.name));
            }
        }
    }
    write_file(&cfg.output.join("gradcheck.csv"), csv)?;
    if !failures.is_empty() {
        bail!("gradient check failed for {}", failures.join(", "));
    }
    println!("all tensors within tolerance");
    Ok(())
}

fn write_file(p: &Path, text: String) -> Result<()> {
    fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))
}
