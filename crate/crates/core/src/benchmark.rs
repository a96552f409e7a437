//! Out-of-distribution benchmark: train on the ID action, evaluate every
//! test action at a grid of horizons, aggregate over seeds and emit tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{make_ood_split, windows_of, Dataset, MotionSequence, Representation, SplitSpec};
use crate::dct::{columns, pad_replicate, DctBasis};
use crate::error::{Error, Result};
use crate::losses::{horizon_errors, horizon_frame, HorizonMetric};
use crate::model::{HybridModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{prepare_samples, train, TrainConfig, TrainReport};

/// Anything mapping `N` observed frames to the next `T`.
pub trait Predictor {
    fn observed(&self) -> usize;
    fn future(&self) -> usize;
    /// Histories are `K × N`; returns one `K × T` block per history.
    fn predict(&self, histories: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Pads, encodes, runs the network in eval mode and decodes the future frames.
pub struct DctPredictor<'m> {
    model: &'m HybridModel,
    basis: DctBasis,
    observed: usize,
    future: usize,
}

impl<'m> DctPredictor<'m> {
    pub fn new(model: &'m HybridModel, observed: usize, future: usize) -> Result<Self> {
        let basis = DctBasis::new(model.config().gcn.dct_coeffs, observed + future)?;
        Ok(DctPredictor { model, basis, observed, future })
    }
}

impl Predictor for DctPredictor<'_> {
    fn observed(&self) -> usize {
        self.observed
    }

    fn future(&self) -> usize {
        self.future
    }

    fn predict(&self, histories: &[Tensor]) -> Result<Vec<Tensor>> {
        let inputs = histories
            .iter()
            .map(|h| {
                if h.rank() != 2 || h.cols() != self.observed {
                    return Err(Error::shape("predict", format!("history {:?}, expected N = {}", h.shape(), self.observed)));
                }
                self.basis.encode(pad_replicate(h, self.future)?.data())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(histories.len());
        for chunk in inputs.chunks(128) {
            let pred = self.model.predict_dct(&Tensor::stack(chunk)?)?;
            for b in 0..chunk.len() {
                let traj = self.basis.decode(&pred.index0(b))?;
                out.push(columns(&traj, self.observed, self.future));
            }
        }
        Ok(out)
    }
}

/// Feeds predictions back as history until `total_future` frames exist.
/// Performs `⌈total_future / T⌉` predictor calls.
pub fn recursive_predict_batch(p: &dyn Predictor, histories: &[Tensor], total_future: usize) -> Result<Vec<Tensor>> {
    if total_future == 0 {
        return Err(Error::invalid("total_future must be at least 1"));
    }
    let (n, t) = (p.observed(), p.future());
    let mut hist: Vec<Tensor> = histories.to_vec();
    let mut acc: Vec<Vec<Tensor>> = vec![Vec::new(); histories.len()];
    let mut produced = 0;
    while produced < total_future {
        let preds = p.predict(&hist)?;
        for (i, pred) in preds.into_iter().enumerate() {
            let joined = concat_cols(&hist[i], &pred);
            hist[i] = columns(&joined, joined.cols() - n, n);
            acc[i].push(pred);
        }
        produced += t;
    }
    acc.into_iter()
        .map(|parts| {
            let all = parts.iter().skip(1).fold(parts[0].clone(), |a, b| concat_cols(&a, b));
            Ok(columns(&all, 0, total_future))
        })
        .collect()
}

pub fn recursive_predict(p: &dyn Predictor, history: &Tensor, total_future: usize) -> Result<Tensor> {
    Ok(recursive_predict_batch(p, std::slice::from_ref(history), total_future)?.remove(0))
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(k * (ca + cb));
    for r in 0..k {
        out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    Tensor::new(vec![k, ca + cb], out).expect("concat shape")
}

/// Hyperparameters distinguishing the compared models.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelVariant {
    pub tag: String,
    pub lambda: f64,
    pub p_drop: f64,
    /// Whether the VAE branch is built at all.
    pub vae: bool,
}

impl ModelVariant {
    /// Discriminative network alone, `λ = 0`, `p_drop = 0.5`.
    pub fn plain() -> Self {
        ModelVariant { tag: "gcn".into(), lambda: 0.0, p_drop: 0.5, vae: false }
    }

    /// With the VAE regulariser, `λ = 0.003`, `p_drop = 0.3`.
    pub fn hybrid() -> Self {
        ModelVariant { tag: "hybrid".into(), lambda: 0.003, p_drop: 0.3, vae: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub observed: usize,
    pub future: usize,
    /// Horizons in milliseconds; beyond `T` frames the model is applied recursively.
    pub horizons_ms: Vec<f64>,
    pub fps: f64,
    pub metric: HorizonMetric,
    pub train_stride: usize,
    /// Stride of evaluation windows; defaults to `T` so futures do not overlap.
    pub test_stride: Option<usize>,
    /// Base model shape; each variant sets `p_drop` and the VAE branch.
    pub model: ModelConfig,
    /// Base training settings; each run sets `lambda` and `seed`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Per-seed loss logs and checkpoints go under `<dir>/<tag>/seed_<s>/`.
    pub output_dir: Option<PathBuf>,
}

pub const SHORT_HORIZONS_MS: [f64; 4] = [80.0, 160.0, 320.0, 400.0];
pub const LONG_HORIZONS_MS: [f64; 2] = [560.0, 1000.0];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkResult {
    pub model: String,
    pub action: String,
    pub horizon_ms: f64,
    pub value: f64,
    pub seed: u64,
    pub representation: Representation,
}

/// Per-seed failure; other seeds carry on.
#[derive(Debug)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct BenchmarkOutcome {
    pub results: Vec<BenchmarkResult>,
    pub failures: Vec<SeedFailure>,
    pub reports: Vec<(u64, TrainReport)>,
}

/// Mean horizon error over the windows of one action.
fn evaluate_action(
    p: &dyn Predictor,
    seqs: &[MotionSequence],
    cfg: &BenchmarkConfig,
    total_future: usize,
) -> Result<Vec<f64>> {
    let stride = cfg.test_stride.unwrap_or(cfg.future);
    let windows = windows_of(seqs, cfg.observed, total_future, stride)?;
    let histories: Vec<Tensor> = windows.iter().map(|w| w.observed_part()).collect();
    let preds = recursive_predict_batch(p, &histories, total_future)?;
    let mut sums = vec![0.0; cfg.horizons_ms.len()];
    for (w, pred) in windows.iter().zip(&preds) {
        let errs = horizon_errors(pred, &w.future_part(), &cfg.horizons_ms, cfg.fps, cfg.metric)?;
        for (s, e) in sums.iter_mut().zip(errs) {
            *s += e;
        }
    }
    Ok(sums.into_iter().map(|s| s / windows.len() as f64).collect())
}

/// Trains and evaluates one seed of one variant.
pub fn run_seed(
    dataset: &Dataset,
    spec: &SplitSpec,
    cfg: &BenchmarkConfig,
    variant: &ModelVariant,
    seed: u64,
) -> Result<(Vec<BenchmarkResult>, TrainReport)> {
    let split = make_ood_split(dataset, spec)?;
    let mut model_cfg = cfg.model;
    model_cfg.gcn.p_drop = variant.p_drop;
    if !variant.vae {
        model_cfg.vae = None;
    } else if model_cfg.vae.is_none() {
        return Err(Error::invalid(format!("variant {} needs a VAE configuration", variant.tag)));
    }
    let length = cfg.observed + cfg.future;
    let basis = DctBasis::new(model_cfg.gcn.dct_coeffs, length)?;
    let train_set = prepare_samples(&windows_of(&split.train, cfg.observed, cfg.future, cfg.train_stride)?, &basis)?;
    let val_set = prepare_samples(&windows_of(&split.val, cfg.observed, cfg.future, cfg.future)?, &basis)?;

    let mut model = HybridModel::new(model_cfg, seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.lambda = variant.lambda;
    tcfg.seed = seed;
    tcfg.output_dir = cfg.output_dir.as_ref().map(|d| d.join(&variant.tag).join(format!("seed_{seed}")));
    let report = train(&mut model, &train_set, &val_set, &tcfg)?;

    let max_frame = cfg.horizons_ms.iter().map(|&ms| horizon_frame(ms, cfg.fps)).max().unwrap_or(0);
    if max_frame == 0 {
        return Err(Error::invalid("no horizon reaches a future frame"));
    }
    let predictor = DctPredictor::new(&model, cfg.observed, cfg.future)?;
    let representation = split.train[0].representation;
    let mut actions: Vec<(&str, &[MotionSequence])> = vec![(spec.id_action.as_str(), &split.test_id)];
    for a in &spec.ood_actions {
        actions.push((a.as_str(), &split.test_ood[a]));
    }
    let mut results = Vec::new();
    for (action, seqs) in actions {
        let errs = evaluate_action(&predictor, seqs, cfg, max_frame)?;
        for (&h, v) in cfg.horizons_ms.iter().zip(errs) {
            results.push(BenchmarkResult {
                model: variant.tag.clone(),
                action: action.to_string(),
                horizon_ms: h,
                value: v,
                seed,
                representation,
            });
        }
    }
    Ok((results, report))
}

/// Runs every seed on its own thread. Failed seeds are collected, not fatal.
pub fn run_benchmark(dataset: &Dataset, spec: &SplitSpec, cfg: &BenchmarkConfig, variant: &ModelVariant) -> Result<BenchmarkOutcome> {
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("benchmark needs at least one seed"));
    }
    spec.validate()?;
    let outcomes: Vec<(u64, Result<(Vec<BenchmarkResult>, TrainReport)>)> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| (seed, s.spawn(move || run_seed(dataset, spec, cfg, variant, seed))))
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| (seed, h.join().unwrap_or_else(|_| Err(Error::invalid("benchmark worker panicked")))))
            .collect()
    });
    let mut out = BenchmarkOutcome::default();
    for (seed, r) in outcomes {
        match r {
            Ok((rows, report)) => {
                out.results.extend(rows);
                out.reports.push((seed, report));
            }
            Err(error) => out.failures.push(SeedFailure { seed, error }),
        }
    }
    Ok(out)
}

pub const OOD_AVERAGE: &str = "ood_average";

/// Per (model, seed, horizon) unweighted mean over the given OoD actions.
pub fn ood_average(results: &[BenchmarkResult], ood_actions: &[String]) -> Vec<BenchmarkResult> {
    let mut cells: BTreeMap<(String, u64, u64), (Vec<f64>, Representation, f64)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in results.iter().filter(|r| ood_actions.contains(&r.action)) {
        let key = (r.model.clone(), r.seed, r.horizon_ms.to_bits());
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        cells.entry(key).or_insert_with(|| (Vec::new(), r.representation, r.horizon_ms)).0.push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let (vals, representation, horizon_ms) = &cells[&key];
            BenchmarkResult {
                model: key.0.clone(),
                action: OOD_AVERAGE.into(),
                horizon_ms: *horizon_ms,
                value: vals.iter().sum::<f64>() / vals.len() as f64,
                seed: key.1,
                representation: *representation,
            }
        })
        .collect()
}

/// Mean and sample standard deviation over seeds for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub model: String,
    pub action: String,
    pub horizon_ms: f64,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

impl AggregateRow {
    /// A single seed has no spread; its std is reported as 0.
    pub fn single_seed(&self) -> bool {
        self.n_seeds == 1
    }
}

/// Groups by (model, action, horizon) in first-seen order; std uses `n − 1`.
pub fn aggregate_seeds(results: &[BenchmarkResult]) -> Vec<AggregateRow> {
    let mut groups: Vec<((String, String, f64), Vec<f64>)> = Vec::new();
    for r in results {
        let key = (r.model.clone(), r.action.clone(), r.horizon_ms);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.value),
            None => groups.push((key, vec![r.value])),
        }
    }
    groups
        .into_iter()
        .map(|((model, action, horizon_ms), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow { model, action, horizon_ms, mean, std, n_seeds: n }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    AlignedText,
}

pub const TABLE_HEADER: &str = "model,action,horizon_ms,mean,std,n_seeds";

pub fn table_csv(rows: &[AggregateRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{:?},{:?},{}", r.model, r.action, r.horizon_ms, r.mean, r.std, r.n_seeds).expect("string write");
    }
    s
}

/// One block per action; horizons across, models down, cells `mean ± std`.
pub fn table_text(rows: &[AggregateRow]) -> String {
    let mut actions: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    let mut horizons: Vec<f64> = Vec::new();
    for r in rows {
        if !actions.contains(&r.action.as_str()) {
            actions.push(&r.action);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !horizons.contains(&r.horizon_ms) {
            horizons.push(r.horizon_ms);
        }
    }
    let name_w = models.iter().map(|m| m.len()).max().unwrap_or(0).max(12);
    let cell_w = 17;
    let mut s = String::new();
    for action in actions {
        writeln!(s, "{action}").expect("string write");
        write!(s, "{:<name_w$}", "milliseconds").expect("string write");
        for h in &horizons {
            write!(s, " {:>cell_w$}", h).expect("string write");
        }
        s.push('\n');
        for model in &models {
            write!(s, "{model:<name_w$}").expect("string write");
            for h in &horizons {
                let cell = rows
                    .iter()
                    .find(|r| r.action == action && r.model == *model && r.horizon_ms == *h)
                    .map(|r| format!("{:.4} ± {:.4}", r.mean, r.std))
                    .unwrap_or_else(|| "-".into());
                write!(s, " {cell:>cell_w$}").expect("string write");
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

pub fn emit_table(rows: &[AggregateRow], format: TableFormat, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("no rows to emit"));
    }
    let text = match format {
        TableFormat::Csv => table_csv(rows),
        TableFormat::AlignedText => table_text(rows),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_table_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TABLE_HEADER => {}
        _ => return Err(Error::Parse { path: path.into(), line: 1, msg: format!("expected header {TABLE_HEADER}") }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |msg: &str| Error::Parse { path: path.into(), line: i + 1, msg: msg.into() };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("non-numeric field"));
            Ok(AggregateRow {
                model: f[0].into(),
                action: f[1].into(),
                horizon_ms: num(f[2])?,
                mean: num(f[3])?,
                std: num(f[4])?,
                n_seeds: f[5].parse().map_err(|_| err("bad seed count"))?,
            })
        })
        .collect()
}
