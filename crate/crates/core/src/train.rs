//! Adam training loop with global gradient clipping and validation-based
//! model selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::autodiff::Var;
use crate::dct::{pad_replicate, DctBasis, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::gradcheck::{compare, GradCheckConfig, GradCheckReport};
use crate::losses::{combined_graph, gaussian_loglik_graph, kl_graph, l1_loss_graph, Reduction};
use crate::model::{save_checkpoint, stream_rng, streams, ForwardRngs, ForwardVars, HybridModel, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Maximum global L2 norm of the gradient.
    pub clip_norm: f64,
    /// Weight of the variational lower bound.
    pub lambda: f64,
    /// Seeds batch shuffling, dropout masks and VAE noise.
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Hard cap on optimiser steps across all epochs.
    pub max_steps: Option<usize>,
    /// When set, the loss log and best checkpoint are written here after every epoch.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 16,
            epochs: 50,
            clip_norm: 1.0,
            lambda: 0.003,
            seed: 0,
            patience: Some(10),
            max_steps: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, v: m.clone(), m }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / g` when the global norm `g`
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", format!("{:?} / {:?} / {:?}", p.shape(), g.shape(), m.shape())));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// A window prepared for training: DCT of the padded observation, the full
/// ground-truth trajectory and its DCT.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `K × M`.
    pub input: Tensor,
    /// `K × (N + T)`.
    pub target: Tensor,
    /// `K × M`.
    pub target_dct: Tensor,
}

pub fn prepare_samples(windows: &[TrajectoryWindow], basis: &DctBasis) -> Result<Vec<Sample>> {
    windows
        .iter()
        .map(|w| {
            if w.len() != basis.length() {
                return Err(Error::shape("prepare_samples", format!("window length {} vs basis {}", w.len(), basis.length())));
            }
            let padded = pad_replicate(&w.observed_part(), w.future())?;
            Ok(Sample {
                input: basis.encode(padded.data())?,
                target: w.data().clone(),
                target_dct: basis.encode(w.data())?,
            })
        })
        .collect()
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub disc: f64,
    /// Zero for models without a VAE branch.
    pub kl: f64,
    /// Negative Gaussian log-likelihood; zero without a VAE branch.
    pub nll: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// Extremes of every clamped log-variance produced by the forward.
    pub log_var_range: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<LossRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Graph nodes of one training loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub forward: ForwardVars,
    pub disc: Var,
    /// KL divergence and Gaussian log-likelihood, when the model has a VAE branch.
    pub vae: Option<(Var, Var)>,
    pub total: Var,
}

/// `[B, ...]` stack of one sample field.
fn stack(samples: &[&Sample], f: impl Fn(&Sample) -> &Tensor) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
}

/// Records the full training loss for a batch.
pub fn training_loss(
    session: &mut Session<'_>,
    batch: &[&Sample],
    basis: &DctBasis,
    lambda: f64,
    rngs: &mut ForwardRngs,
) -> Result<LossVars> {
    let x = session.graph.constant(stack(batch, |s| &s.input)?);
    let target = session.graph.constant(stack(batch, |s| &s.target)?);
    let fwd = session.forward(x, rngs, true)?;
    let inv = session.graph.constant(basis.inverse_matrix().clone());
    let pred_time = session.graph.matmul(fwd.prediction, inv)?;
    let disc = l1_loss_graph(&mut session.graph, pred_time, target, Reduction::Mean)?;
    match (fwd.latent, fwd.decoded) {
        (Some(lat), Some(dec)) => {
            let target_dct = session.graph.constant(stack(batch, |s| &s.target_dct)?);
            let kl = kl_graph(&mut session.graph, lat.mu, lat.log_var)?;
            let ll = gaussian_loglik_graph(&mut session.graph, dec.mu, dec.log_var, target_dct)?;
            let total = combined_graph(&mut session.graph, disc, ll, kl, lambda)?;
            Ok(LossVars { forward: fwd, disc, vae: Some((kl, ll)), total })
        }
        _ => Ok(LossVars { forward: fwd, disc, vae: None, total: disc }),
    }
}

/// Finite-difference check of the training-loss gradient for every trainable
/// tensor. Dropout masks and VAE noise are replayed from `forward_seed` at
/// every evaluation, so the loss is a deterministic function of the weights.
pub fn check_loss_gradients(
    model: &HybridModel,
    batch: &[&Sample],
    basis: &DctBasis,
    lambda: f64,
    forward_seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let idx: Vec<usize> = model.params().trainable().collect();
    let leaves: Vec<(String, Tensor)> =
        idx.iter().map(|&i| (model.params().entry(i).name.clone(), model.params().get(i).clone())).collect();

    let mut s = model.session(true);
    let vars = training_loss(&mut s, batch, basis, lambda, &mut ForwardRngs::new(forward_seed))?;
    let mut grads = s.graph.backward_scalar(vars.total)?;
    let registered = s.registered_params();
    let analytic: Vec<Tensor> = idx
        .iter()
        .map(|&i| {
            registered
                .iter()
                .find(|(j, _)| *j == i)
                .and_then(|&(_, v)| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(model.params().get(i).shape()))
        })
        .collect();

    let mut probe = model.clone();
    compare(
        &leaves,
        &analytic,
        |vals| {
            for (&i, v) in idx.iter().zip(vals) {
                probe.params_mut().set(i, v.clone())?;
            }
            let mut s = probe.session(true);
            let vars = training_loss(&mut s, batch, basis, lambda, &mut ForwardRngs::new(forward_seed))?;
            Ok(s.graph.value(vars.total).item())
        },
        cfg,
    )
}

/// Eval-mode mean L1 error of the time-domain reconstruction.
pub fn evaluate_l1(model: &HybridModel, samples: &[Sample], basis: &DctBasis) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let input = Tensor::stack(&chunk.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let pred = model.predict_dct(&input)?;
        for (b, s) in chunk.iter().enumerate() {
            let rec = basis.decode(&pred.index0(b))?;
            total += crate::losses::joint_angle_l1(&rec, &s.target)?;
        }
    }
    Ok(total / samples.len() as f64)
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged { epoch, step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Trains in place and leaves the model at its best validation epoch.
pub fn train(model: &mut HybridModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_observer(model, train_set, val_set, cfg, &mut |_, _| {})
}

/// [`train`], calling `observer` with each step's record and the updated model.
pub fn train_with_observer(
    model: &mut HybridModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LossRecord, &HybridModel),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let g = model.config().gcn;
    let k = g.joints;
    let length = train_set[0].target.cols();
    if train_set[0].input.shape() != [k, g.dct_coeffs] {
        return Err(Error::shape(
            "train",
            format!("samples {:?}, model expects [{k}, {}]", train_set[0].input.shape(), g.dct_coeffs),
        ));
    }
    let basis = DctBasis::new(g.dct_coeffs, length)?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let trainable: Vec<usize> = model.params().trainable().collect();
    let mut adam = AdamState::new(trainable.iter().map(|&i| model.params().get(i).shape()));
    let mut shuffle_rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut rngs = ForwardRngs::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut report = TrainReport { steps: Vec::new(), epochs: Vec::new(), best_epoch: 0, best_val: f64::INFINITY };
    let mut best = model.clone();
    let mut since_best = 0;
    let mut step = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            step += 1;
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (record, mut grads, bn) = {
                let mut session = model.session(true);
                let LossVars { forward: fwd, disc, vae: vae_terms, total } =
                    training_loss(&mut session, &batch, &basis, cfg.lambda, &mut rngs).map_err(|e| diverged(epoch, step, e))?;
                let gr = &session.graph;
                let total_v = gr.value(total).item();
                if !total_v.is_finite() {
                    return Err(Error::Diverged { epoch, step, detail: format!("loss is {total_v}") });
                }
                let (kl, nll) = vae_terms.map_or((0.0, 0.0), |(kl, ll)| (gr.value(kl).item(), -gr.value(ll).item()));
                let log_var_range = fwd.latent.zip(fwd.decoded).map(|(l, d)| {
                    let vals = gr.value(l.log_var).data().iter().chain(gr.value(d.log_var).data());
                    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
                });
                let mut grads_out = session.graph.backward_scalar(total).map_err(|e| diverged(epoch, step, e))?;
                let registered = session.registered_params();
                let mut grads = Vec::with_capacity(trainable.len());
                for &i in &trainable {
                    let var = registered.iter().find(|(j, _)| *j == i).map(|(_, v)| *v);
                    let g = var.and_then(|v| grads_out.take(v));
                    grads.push(g.unwrap_or_else(|| Tensor::zeros(model.params().get(i).shape())));
                }
                let rec = LossRecord {
                    epoch,
                    step,
                    disc: gr.value(disc).item(),
                    kl,
                    nll,
                    total: total_v,
                    grad_norm: 0.0,
                    clipped_norm: 0.0,
                    log_var_range,
                };
                (rec, grads, session.take_bn_updates())
            };
            let mut record = record;
            record.grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
            record.clipped_norm = global_norm(&grads);
            debug_assert!(record.clipped_norm <= cfg.clip_norm + 1e-12);
            if !record.grad_norm.is_finite() {
                return Err(Error::Diverged { epoch, step, detail: "gradient norm is not finite".into() });
            }
            model.update_running_stats(&bn);
            adam_step(&mut model.params_mut().trainable_mut(), &grads, &mut adam, cfg.learning_rate)?;
            observer(&record, model);
            epoch_loss += record.total;
            epoch_steps += 1;
            report.steps.push(record);
        }
        if epoch_steps == 0 {
            break;
        }
        let val_error = evaluate_l1(model, val_set, &basis).map_err(|e| diverged(epoch, step, e))?;
        report.epochs.push(EpochRecord { epoch, mean_loss: epoch_loss / epoch_steps as f64, val_error });
        if val_error < report.best_val {
            report.best_val = val_error;
            report.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
            if let Some(dir) = &cfg.output_dir {
                save_checkpoint(&best, &dir.join("best.ckpt"))?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = &cfg.output_dir {
            write_loss_log(&report.steps, &dir.join("loss_log.csv"))?;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) || cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }
    *model = best;
    Ok(report)
}

pub const LOSS_LOG_HEADER: &str = "epoch,step,disc_loss,kl,nll,total";

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for r in records {
        writeln!(s, "{},{},{:?},{:?},{:?},{:?}", r.epoch, r.step, r.disc, r.kl, r.nll, r.total).expect("string write");
    }
    s
}

pub fn write_loss_log(records: &[LossRecord], path: &Path) -> Result<()> {
    fs::write(path, loss_log_csv(records)).map_err(|e| Error::io(path, e))
}

/// Trailing-window moving average; the first `window − 1` entries are skipped.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
