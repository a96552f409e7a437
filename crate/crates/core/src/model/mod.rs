//! Graph convolutional motion predictor with an optional VAE branch.
//!
//! The discriminative path is
//! `input GCL → BN → tanh → dropout → blocks × GCB → output GCL → + input`,
//! where each GCB computes `A + f(f(A))` with
//! `f = dropout ∘ tanh ∘ batchnorm ∘ GCL` and every GCL is `S·A·W + b`.
//! When the VAE branch is present, the activation after the first
//! `encoder_blocks` blocks is flattened and mapped by one fully connected
//! layer to `(μ_z, log σ_z²)`; the decoder maps `z` back to `K × hidden` with
//! another fully connected layer, runs its own GCBs and ends in a GCL head
//! with `2M` outputs split into `(μ, log σ²)`.

mod checkpoint;
mod config;
mod count;
mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_from, save_checkpoint, write_checkpoint, LoadOptions};
pub use config::{GcnConfig, ModelConfig, VaeConfig};
pub use count::{analytic_parameter_count, ParameterCount};
pub use params::{Branch, ParamEntry, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bounds applied to every predicted log-variance.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 3.0;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// RNG streams derived from one seed. Keeping them separate lets a run with
/// the VAE branch draw exactly the same dropout masks for the shared network
/// as a run without it.
pub mod streams {
    pub const INIT_GCN: u64 = 0;
    pub const INIT_VAE: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const GCN_DROPOUT: u64 = 3;
    pub const VAE_NOISE: u64 = 4;
    pub const CLASSIFIER: u64 = 5;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Gcl {
    s: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Gcb {
    gcl: [Gcl; 2],
    bn: [Bn; 2],
}

#[derive(Clone, Debug, PartialEq)]
struct GcnLayers {
    input: Gcl,
    input_bn: Bn,
    blocks: Vec<Gcb>,
    output: Gcl,
}

#[derive(Clone, Debug, PartialEq)]
struct VaeLayers {
    enc_w: usize,
    enc_b: usize,
    dec_w: usize,
    dec_b: usize,
    blocks: Vec<Gcb>,
    head: Gcl,
}

/// How parameters are initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Random,
    Zero,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    init: Init,
    branch: Branch,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let value = match self.init {
            Init::Random => Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound)),
            Init::Zero => Tensor::zeros(shape),
        };
        self.store.push(name, value, self.branch, true)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.push(name, Tensor::zeros(shape), self.branch, true)
    }

    fn gcl(&mut self, prefix: &str, k: usize, n_in: usize, n_out: usize) -> Gcl {
        Gcl {
            s: self.uniform(format!("{prefix}.s"), &[k, k], 1.0 / (k as f64).sqrt()),
            w: self.uniform(format!("{prefix}.w"), &[n_in, n_out], 1.0 / (n_in as f64).sqrt()),
            b: self.zeros(format!("{prefix}.b"), &[n_out]),
        }
    }

    fn bn(&mut self, prefix: &str, features: usize) -> Bn {
        Bn {
            gamma: self.store.push(format!("{prefix}.gamma"), Tensor::ones(&[features]), self.branch, true),
            beta: self.store.push(format!("{prefix}.beta"), Tensor::zeros(&[features]), self.branch, true),
            mean: self.store.push(format!("{prefix}.running_mean"), Tensor::zeros(&[features]), self.branch, false),
            var: self.store.push(format!("{prefix}.running_var"), Tensor::ones(&[features]), self.branch, false),
        }
    }

    fn gcb(&mut self, prefix: &str, k: usize, h: usize) -> Gcb {
        Gcb {
            gcl: [self.gcl(&format!("{prefix}.gcl1"), k, h, h), self.gcl(&format!("{prefix}.gcl2"), k, h, h)],
            bn: [self.bn(&format!("{prefix}.bn1"), k * h), self.bn(&format!("{prefix}.bn2"), k * h)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    config: ModelConfig,
    store: ParamStore,
    gcn: GcnLayers,
    vae: Option<VaeLayers>,
}

impl HybridModel {
    /// Randomly initialised model: `S ~ U(±1/√K)`, `W ~ U(±1/√n_in)`, zero
    /// biases, unit batch-norm scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, Init::Random)
    }

    /// Every weight and bias zero, batch norm identity.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, 0, Init::Zero)
    }

    fn build(config: ModelConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let g = config.gcn;
        let (k, m, h) = (g.joints, g.dct_coeffs, g.hidden);
        let mut store = ParamStore::default();
        let gcn = {
            let mut b = Builder {
                store: &mut store,
                rng: stream_rng(seed, streams::INIT_GCN),
                init,
                branch: Branch::Gcn,
            };
            let input = b.gcl("gcn.in", k, m, h);
            let input_bn = b.bn("gcn.in_bn", k * h);
            let blocks = (0..g.blocks).map(|i| b.gcb(&format!("gcn.block{i}"), k, h)).collect();
            let output = b.gcl("gcn.out", k, h, m);
            GcnLayers { input, input_bn, blocks, output }
        };
        let vae = config.vae.map(|v| {
            let mut b = Builder {
                store: &mut store,
                rng: stream_rng(seed, streams::INIT_VAE),
                init,
                branch: Branch::Vae,
            };
            let (flat, lat) = (k * h, k * v.latent);
            let enc_w = b.uniform("vae.enc.w".into(), &[flat, 2 * lat], 1.0 / (flat as f64).sqrt());
            let enc_b = b.zeros("vae.enc.b".into(), &[2 * lat]);
            let dec_w = b.uniform("vae.dec.w".into(), &[lat, flat], 1.0 / (lat as f64).sqrt());
            let dec_b = b.zeros("vae.dec.b".into(), &[flat]);
            let blocks = (0..v.decoder_blocks).map(|i| b.gcb(&format!("vae.block{i}"), k, h)).collect();
            let head = b.gcl("vae.head", k, h, 2 * m);
            VaeLayers { enc_w, enc_b, dec_w, dec_b, blocks, head }
        });
        Ok(HybridModel { config, store, gcn, vae })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_vae(&self) -> bool {
        self.vae.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_elements()
    }

    /// Copy with the generative branch removed; the discriminative network is untouched.
    pub fn without_vae(&self) -> Result<Self> {
        let mut out = HybridModel::zeroed(self.config.without_vae())?;
        for i in 0..out.store.len() {
            let name = out.store.entry(i).name.clone();
            let src = self.store.find(&name).expect("GCN tensor present in source model");
            out.store.set(i, self.store.get(src).clone())?;
        }
        Ok(out)
    }

    pub fn session(&self, training: bool) -> Session<'_> {
        Session {
            model: self,
            graph: Graph::new(),
            vars: vec![None; self.store.len()],
            training,
            bn_stats: Vec::new(),
        }
    }

    /// Folds batch statistics from a training forward into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BnUpdate]) {
        for u in stats {
            let b = u.batch as f64;
            let unbias = if u.batch > 1 { b / (b - 1.0) } else { 1.0 };
            let mean = self.store.get_mut(u.mean_idx);
            for (r, m) in mean.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = self.store.get_mut(u.var_idx);
            for (r, v) in var.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    /// Eval-mode prediction for a batch of DCT inputs `[B, K, M]` (or a single `[K, M]`).
    pub fn predict_dct(&self, input: &Tensor) -> Result<Tensor> {
        let single = input.rank() == 2;
        let x = if single {
            input.clone().reshape(&[1, input.rows(), input.cols()])?
        } else {
            input.clone()
        };
        let mut s = self.session(false);
        let xv = s.graph.constant(x);
        let mut rngs = ForwardRngs::new(0);
        let out = s.forward(xv, &mut rngs, false)?;
        let y = s.graph.value(out.prediction).clone();
        if single {
            y.reshape(input.shape())
        } else {
            Ok(y)
        }
    }

    /// Deterministic latent means `[B, K·n_z]` for a batch of DCT inputs.
    pub fn latent_means(&self, input: &Tensor) -> Result<Tensor> {
        if self.vae.is_none() {
            return Err(Error::MissingVaeBranch);
        }
        let mut s = self.session(false);
        let xv = s.graph.constant(input.clone());
        let mut rngs = ForwardRngs::new(0);
        let out = s.forward(xv, &mut rngs, true)?;
        let latent = out.latent.expect("VAE branch present");
        Ok(s.graph.value(latent.mu).clone())
    }
}

/// Batch statistics awaiting [`HybridModel::update_running_stats`].
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean_idx: usize,
    var_idx: usize,
    batch: usize,
    stats: BatchStats,
}

/// Per-forward randomness: discriminative dropout and VAE sampling are drawn
/// from independent streams.
#[derive(Clone, Debug)]
pub struct ForwardRngs {
    pub gcn: ChaCha8Rng,
    pub vae: ChaCha8Rng,
}

impl ForwardRngs {
    pub fn new(seed: u64) -> Self {
        ForwardRngs {
            gcn: stream_rng(seed, streams::GCN_DROPOUT),
            vae: stream_rng(seed, streams::VAE_NOISE),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    /// `[B, K·n_z]`.
    pub mu: Var,
    /// Clamped log-variance, `[B, K·n_z]`.
    pub log_var: Var,
    /// Sample fed to the decoder (`μ` in eval mode).
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    /// `[B, K, M]`.
    pub mu: Var,
    /// Clamped log-variance, `[B, K, M]`.
    pub log_var: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Predicted DCT coefficients `[B, K, M]`.
    pub prediction: Var,
    pub latent: Option<LatentVars>,
    pub decoded: Option<DecoderVars>,
}

/// One forward pass recorded on a fresh graph.
pub struct Session<'m> {
    model: &'m HybridModel,
    pub graph: Graph,
    vars: Vec<Option<Var>>,
    training: bool,
    bn_stats: Vec<BnUpdate>,
}

impl Session<'_> {
    pub fn training(&self) -> bool {
        self.training
    }

    /// Graph handle of a stored tensor, registered on first use.
    pub fn var(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let e = self.model.store.entry(idx);
        let v = if e.trainable {
            self.graph.param(e.value.clone())
        } else {
            self.graph.constant(e.value.clone())
        };
        self.vars[idx] = Some(v);
        v
    }

    /// `(store index, graph var)` for every registered trainable tensor.
    pub fn registered_params(&self) -> Vec<(usize, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.model.store.entry(i).trainable).map(|v| (i, v)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_stats)
    }

    pub(crate) fn gcl(&mut self, l: Gcl, a: Var) -> Result<Var> {
        let (s, w, b) = (self.var(l.s), self.var(l.w), self.var(l.b));
        let mixed = self.graph.node_mix(s, a)?;
        let y = self.graph.matmul(mixed, w)?;
        self.graph.add_bias(y, b)
    }

    fn bn(&mut self, l: Bn, a: Var) -> Result<Var> {
        let shape = self.graph.shape(a).to_vec();
        let batch = shape[0];
        let flat = self.graph.reshape(a, &[batch, shape[1..].iter().product()])?;
        let (gamma, beta) = (self.var(l.gamma), self.var(l.beta));
        let y = if self.training {
            let (y, stats) = self.graph.batch_norm(flat, gamma, beta, BN_EPS)?;
            self.bn_stats.push(BnUpdate { mean_idx: l.mean, var_idx: l.var, batch, stats });
            y
        } else {
            let store = &self.model.store;
            self.graph.batch_norm_eval(
                flat,
                gamma,
                beta,
                store.get(l.mean).data(),
                store.get(l.var).data(),
                BN_EPS,
            )?
        };
        self.graph.reshape(y, &shape)
    }

    fn dropout(&mut self, a: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let p = self.model.config.gcn.p_drop;
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(self.graph.shape(a), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.graph.constant(mask);
        self.graph.mul(a, m)
    }

    fn activation(&mut self, l: Gcl, bn: Bn, a: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let y = self.gcl(l, a)?;
        let y = self.bn(bn, y)?;
        let y = self.graph.tanh(y)?;
        self.dropout(y, rng)
    }

    pub(crate) fn gcb(&mut self, blk: Gcb, a: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let y = self.activation(blk.gcl[0], blk.bn[0], a, rng)?;
        let y = self.activation(blk.gcl[1], blk.bn[1], y, rng)?;
        self.graph.add(a, y)
    }

    /// Runs the network on DCT input `[B, K, M]`. The VAE branch is evaluated
    /// only when `with_vae` is set and the model has one.
    pub fn forward(&mut self, input: Var, rngs: &mut ForwardRngs, with_vae: bool) -> Result<ForwardVars> {
        let g = self.model.config.gcn;
        let shape = self.graph.shape(input).to_vec();
        if shape.len() != 3 || shape[1] != g.joints || shape[2] != g.dct_coeffs {
            return Err(Error::shape(
                "forward",
                format!("input {shape:?}, expected [B, {}, {}]", g.joints, g.dct_coeffs),
            ));
        }
        let layers = &self.model.gcn;
        let run_vae = with_vae && self.model.vae.is_some();
        let encoder_blocks = self.model.config.vae.map_or(0, |v| v.encoder_blocks);

        let mut a = self.activation(layers.input, layers.input_bn, input, &mut rngs.gcn)?;
        let mut trunk = None;
        for (i, blk) in layers.blocks.clone().into_iter().enumerate() {
            a = self.gcb(blk, a, &mut rngs.gcn)?;
            if run_vae && i + 1 == encoder_blocks {
                trunk = Some(a);
            }
        }
        let y = self.gcl(layers.output, a)?;
        let prediction = self.graph.add(y, input)?;

        let (latent, decoded) = match trunk {
            Some(t) => {
                let latent = self.recognize(t, &mut rngs.vae)?;
                let decoded = self.decode(latent.z, &mut rngs.vae)?;
                (Some(latent), Some(decoded))
            }
            None => (None, None),
        };
        Ok(ForwardVars { prediction, latent, decoded })
    }

    fn recognize(&mut self, trunk: Var, rng: &mut ChaCha8Rng) -> Result<LatentVars> {
        let vae = self.model.vae.as_ref().ok_or(Error::MissingVaeBranch)?;
        let (enc_w, enc_b) = (vae.enc_w, vae.enc_b);
        let shape = self.graph.shape(trunk).to_vec();
        let batch = shape[0];
        let flat = self.graph.reshape(trunk, &[batch, shape[1] * shape[2]])?;
        let (w, b) = (self.var(enc_w), self.var(enc_b));
        let h = self.graph.matmul(flat, w)?;
        let h = self.graph.add_bias(h, b)?;
        let lat = self.graph.shape(h)[1] / 2;
        let mu = self.graph.slice_last(h, 0, lat)?;
        let raw = self.graph.slice_last(h, lat, lat)?;
        let log_var = self.graph.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let z = if self.training {
            let eps = Tensor::from_fn(&[batch, lat], |_| rng.sample(StandardNormal));
            let eps = self.graph.constant(eps);
            reparameterize(&mut self.graph, mu, log_var, eps)?
        } else {
            mu
        };
        Ok(LatentVars { mu, log_var, z })
    }

    fn decode(&mut self, z: Var, rng: &mut ChaCha8Rng) -> Result<DecoderVars> {
        let g = self.model.config.gcn;
        let vae = self.model.vae.clone().ok_or(Error::MissingVaeBranch)?;
        let batch = self.graph.shape(z)[0];
        let (w, b) = (self.var(vae.dec_w), self.var(vae.dec_b));
        let h = self.graph.matmul(z, w)?;
        let h = self.graph.add_bias(h, b)?;
        let mut a = self.graph.reshape(h, &[batch, g.joints, g.hidden])?;
        for blk in vae.blocks {
            a = self.gcb(blk, a, rng)?;
        }
        let out = self.gcl(vae.head, a)?;
        let mu = self.graph.slice_last(out, 0, g.dct_coeffs)?;
        let raw = self.graph.slice_last(out, g.dct_coeffs, g.dct_coeffs)?;
        let log_var = self.graph.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(DecoderVars { mu, log_var })
    }
}

/// `z = μ + exp(½ log σ²) ⊙ ε`; `eps` should be a constant so no gradient reaches it.
pub fn reparameterize(g: &mut Graph, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = g.scale(log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let noise = g.mul(sigma, eps)?;
    g.add(mu, noise)
}

/// `S·A·W + b` on plain tensors; `a` is `[K, n_in]` or `[B, K, n_in]`.
pub fn gcl_forward(s: &Tensor, w: &Tensor, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (s, w, b, a) = (g.constant(s.clone()), g.constant(w.clone()), g.constant(b.clone()), g.constant(a.clone()));
    let m = g.node_mix(s, a)?;
    let y = g.matmul(m, w)?;
    let y = g.add_bias(y, b)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(vae: bool) -> ModelConfig {
        ModelConfig {
            gcn: GcnConfig { joints: 4, dct_coeffs: 6, hidden: 5, blocks: 2, p_drop: 0.0 },
            vae: vae.then_some(VaeConfig { latent: 3, encoder_blocks: 1, decoder_blocks: 1 }),
        }
    }

    #[test]
    fn zero_model_is_identity_in_both_modes() {
        let m = HybridModel::zeroed(small(true)).unwrap();
        let x = Tensor::from_fn(&[3, 4, 6], |i| (i as f64 * 0.37).sin());
        assert_eq!(m.predict_dct(&x).unwrap(), x);
        let mut s = m.session(true);
        let xv = s.graph.constant(x.clone());
        let out = s.forward(xv, &mut ForwardRngs::new(1), true).unwrap();
        assert_eq!(s.graph.value(out.prediction), &x);
        let dec = out.decoded.unwrap();
        assert!(s.graph.value(dec.mu).data().iter().all(|&v| v == 0.0));
        assert!(s.graph.value(dec.log_var).data().iter().all(|&v| v == 0.0));
        let lat = out.latent.unwrap();
        assert!(s.graph.value(lat.mu).data().iter().all(|&v| v == 0.0));
        assert!(s.graph.value(lat.log_var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_parameters_match_with_and_without_vae() {
        let a = HybridModel::new(small(true), 9).unwrap();
        let b = HybridModel::new(small(false), 9).unwrap();
        assert_eq!(a.without_vae().unwrap(), b);
    }

    #[test]
    fn input_shape_is_checked() {
        let m = HybridModel::new(small(false), 1).unwrap();
        assert!(m.predict_dct(&Tensor::zeros(&[2, 5, 6])).is_err());
        assert!(m.predict_dct(&Tensor::zeros(&[4, 6])).is_ok());
    }

    #[test]
    fn latents_need_vae() {
        let m = HybridModel::new(small(false), 1).unwrap();
        assert!(matches!(m.latent_means(&Tensor::zeros(&[1, 4, 6])), Err(Error::MissingVaeBranch)));
    }

    #[test]
    fn eval_forward_ignores_rng() {
        let mut cfg = small(true);
        cfg.gcn.p_drop = 0.5;
        let m = HybridModel::new(cfg, 3).unwrap();
        let x = Tensor::from_fn(&[2, 4, 6], |i| (i as f64).cos());
        let run = |seed| {
            let mut s = m.session(false);
            let xv = s.graph.constant(x.clone());
            let out = s.forward(xv, &mut ForwardRngs::new(seed), true).unwrap();
            s.graph.value(out.prediction).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = HybridModel::new(small(false), 2).unwrap();
        let x = Tensor::from_fn(&[3, 4, 6], |i| (i as f64 * 0.1).sin());
        let mut s = m.session(true);
        let xv = s.graph.constant(x);
        s.forward(xv, &mut ForwardRngs::new(0), false).unwrap();
        let updates = s.take_bn_updates();
        assert_eq!(updates.len(), 1 + 2 * 2);
        let first = updates[0].clone();
        m.update_running_stats(&updates);
        let mean = m.params().get(first.mean_idx);
        for (r, b) in mean.data().iter().zip(&first.stats.mean) {
            assert!((r - 0.1 * b).abs() < 1e-15);
        }
        let var = m.params().get(first.var_idx);
        for (r, b) in var.data().iter().zip(&first.stats.var) {
            assert!((r - (0.9 + 0.1 * b * 1.5)).abs() < 1e-15);
        }
    }
}
