//! Training losses and evaluation metrics.
//!
//! Each loss exists in two forms: a plain function on tensors, and a graph
//! builder used during training. Tests tie the two together.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the discriminative term is reduced over elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the variational lower bound; 0 disables the generative term.
    pub lambda: f64,
    pub reduction: Reduction,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(LossConfig { lambda, reduction: Reduction::Mean })
    }
}

/// Gaussian latent parameters (`σ`, not log-variance).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Gaussian output head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub mu: Tensor,
    pub log_var: Tensor,
}

/// Cartesian joint positions, `[frames, J, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose3dWindow {
    frames: Tensor,
}

impl Pose3dWindow {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 3 || frames.shape()[2] != 3 {
            return Err(Error::shape("Pose3dWindow", format!("{:?} is not [L, J, 3]", frames.shape())));
        }
        Ok(Pose3dWindow { frames })
    }

    /// Reinterprets a `3J × L` trajectory (xyz per joint in consecutive rows).
    pub fn from_trajectory(traj: &Tensor) -> Result<Self> {
        if traj.rank() != 2 || traj.rows() % 3 != 0 {
            return Err(Error::shape("Pose3dWindow", format!("{:?} rows not a multiple of 3", traj.shape())));
        }
        let (k, l) = (traj.rows(), traj.cols());
        let frames = Tensor::from_fn(&[l, k / 3, 3], |i| {
            let (n, r) = (i / k, i % k);
            traj.at2(r, n)
        });
        Ok(Pose3dWindow { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }
}

/// `(1 / K·L) Σ |x̂ − x|`.
pub fn joint_angle_l1(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let d = pred.zip_map(truth, |a, b| (a - b).abs())?;
    Ok(d.sum() / d.len() as f64)
}

/// Mean over frames and joints of `‖p̂ − p‖₂` (or its square when `squared`).
pub fn mpjpe(pred: &Pose3dWindow, truth: &Pose3dWindow, squared: bool) -> Result<f64> {
    if pred.frames.shape() != truth.frames.shape() {
        return Err(Error::shape(
            "mpjpe",
            format!("{:?} vs {:?}", pred.frames.shape(), truth.frames.shape()),
        ));
    }
    let dists: Vec<f64> = pred
        .frames
        .data()
        .chunks(3)
        .zip(truth.frames.data().chunks(3))
        .map(|(a, b)| {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            if squared {
                sq
            } else {
                sq.sqrt()
            }
        })
        .collect();
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// `½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_divergence(latent: &LatentParams) -> Result<f64> {
    if latent.mu.shape() != latent.sigma.shape() {
        return Err(Error::shape("kl_divergence", "mu and sigma differ in shape"));
    }
    if latent.sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("sigma must be strictly positive"));
    }
    Ok(0.5
        * latent
            .mu
            .data()
            .iter()
            .zip(latent.sigma.data())
            .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
            .sum::<f64>())
}

/// Gaussian log-likelihood `−½ Σ (log σ² + log 2π + (C − μ)² / σ²)`; larger is better.
pub fn gaussian_nll(out: &DecoderOutput, target: &Tensor) -> Result<f64> {
    if out.mu.shape() != target.shape() || out.log_var.shape() != target.shape() {
        return Err(Error::shape(
            "gaussian_nll",
            format!("mu {:?}, log_var {:?}, target {:?}", out.mu.shape(), out.log_var.shape(), target.shape()),
        ));
    }
    let ln2pi = (2.0 * PI).ln();
    Ok(-0.5
        * out
            .mu
            .data()
            .iter()
            .zip(out.log_var.data())
            .zip(target.data())
            .map(|((m, lv), c)| lv + ln2pi + (c - m) * (c - m) / lv.exp())
            .sum::<f64>())
}

/// `disc − λ·(ℓ_G − ℓ_l)`.
pub fn combined_loss(disc: f64, log_lik: f64, kl: f64, cfg: &LossConfig) -> f64 {
    if cfg.lambda == 0.0 {
        return disc;
    }
    disc - cfg.lambda * (log_lik - kl)
}

/// Per-frame error used for horizon reporting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HorizonMetric {
    /// Mean absolute error over the `K` channels (per-frame form of the L1 loss).
    #[default]
    MeanAbs,
    /// Euclidean norm of the `K`-vector difference.
    Euclidean,
    /// Mean per-joint position error; rows are xyz triples.
    Mpjpe,
}

impl HorizonMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean-abs" | "l1" => Ok(HorizonMetric::MeanAbs),
            "euclidean" => Ok(HorizonMetric::Euclidean),
            "mpjpe" => Ok(HorizonMetric::Mpjpe),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HorizonMetric::MeanAbs => "mean-abs",
            HorizonMetric::Euclidean => "euclidean",
            HorizonMetric::Mpjpe => "mpjpe",
        }
    }

    /// Error between two `K`-vectors for one frame.
    pub fn frame_error(self, pred: &[f64], truth: &[f64]) -> f64 {
        match self {
            HorizonMetric::MeanAbs => {
                pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
            }
            HorizonMetric::Euclidean => pred
                .iter()
                .zip(truth)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            HorizonMetric::Mpjpe => {
                let joints = pred.len() / 3;
                pred.chunks(3)
                    .zip(truth.chunks(3))
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                    .sum::<f64>()
                    / joints as f64
            }
        }
    }
}

/// Future frame (1-based) reached after `ms` milliseconds.
pub fn horizon_frame(ms: f64, fps: f64) -> usize {
    (ms * fps / 1000.0).round() as usize
}

/// Error at the single frame of each horizon. `pred` and `truth` are `K × F`
/// future trajectories whose column 0 is the first predicted frame.
pub fn horizon_errors(
    pred: &Tensor,
    truth: &Tensor,
    horizons_ms: &[f64],
    fps: f64,
    metric: HorizonMetric,
) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || pred.rank() != 2 {
        return Err(Error::shape("horizon_errors", format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    if metric == HorizonMetric::Mpjpe && pred.rows() % 3 != 0 {
        return Err(Error::invalid("MPJPE needs xyz rows (K multiple of 3)"));
    }
    let future = pred.cols();
    horizons_ms
        .iter()
        .map(|&ms| {
            let f = horizon_frame(ms, fps);
            if f == 0 || f > future {
                return Err(Error::invalid(format!(
                    "horizon {ms} ms is frame {f}, outside the {future} predicted frames at {fps} fps"
                )));
            }
            let col = |t: &Tensor| (0..t.rows()).map(|k| t.at2(k, f - 1)).collect::<Vec<_>>();
            Ok(metric.frame_error(&col(pred), &col(truth)))
        })
        .collect()
}

/// Batch mean of the per-sample L1 loss between `[B, K, L]` trajectories.
pub fn l1_loss_graph(g: &mut Graph, pred: Var, truth: Var, reduction: Reduction) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let a = g.abs(d)?;
    match reduction {
        Reduction::Mean => g.mean(a),
        Reduction::Sum => {
            let batch = g.shape(a)[0] as f64;
            let s = g.sum(a)?;
            g.scale(s, 1.0 / batch)
        }
    }
}

/// Batch mean of the per-sample KL divergence; inputs are `[B, D]`.
pub fn kl_graph(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let batch = g.shape(mu)[0] as f64;
    let mu2 = g.square(mu)?;
    let var = g.exp(log_var)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum(t)?;
    g.scale(s, 0.5 / batch)
}

/// Batch mean of the per-sample Gaussian log-likelihood.
pub fn gaussian_loglik_graph(g: &mut Graph, mu: Var, log_var: Var, target: Var) -> Result<Var> {
    let batch = g.shape(mu)[0] as f64;
    let d = g.sub(target, mu)?;
    let d2 = g.square(d)?;
    let neg = g.scale(log_var, -1.0)?;
    let prec = g.exp(neg)?;
    let q = g.mul(d2, prec)?;
    let t = g.add(q, log_var)?;
    let t = g.add_scalar(t, (2.0 * PI).ln())?;
    let s = g.sum(t)?;
    g.scale(s, -0.5 / batch)
}

/// `disc − λ·(log_lik − kl)`; with `λ = 0` the discriminative node itself is returned.
pub fn combined_graph(g: &mut Graph, disc: Var, log_lik: Var, kl: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(disc);
    }
    let vlb = g.sub(log_lik, kl)?;
    let w = g.scale(vlb, lambda)?;
    g.sub(disc, w)
}
