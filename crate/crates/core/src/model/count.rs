use super::ModelConfig;

/// Closed-form trainable parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub gcn: usize,
    pub vae: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.gcn + self.vae
    }
}

/// Counts parameters from the configuration alone, without building a model.
///
/// A GCL contributes `K² + n_in·n_out + n_out`; a batch norm over `K·h`
/// features contributes `2·K·h`; a block is two GCLs and two batch norms.
pub fn analytic_parameter_count(cfg: &ModelConfig) -> ParameterCount {
    let g = &cfg.gcn;
    let (k, m, h) = (g.joints, g.dct_coeffs, g.hidden);
    let gcl = |n_in: usize, n_out: usize| k * k + n_in * n_out + n_out;
    let bn = 2 * k * h;
    let block = 2 * gcl(h, h) + 2 * bn;
    let gcn = gcl(m, h) + bn + g.blocks * block + gcl(h, m);
    let vae = cfg.vae.map_or(0, |v| {
        let flat = k * h;
        let lat = k * v.latent;
        let encoder = flat * 2 * lat + 2 * lat;
        let decoder = lat * flat + flat;
        encoder + decoder + v.decoder_blocks * block + gcl(h, 2 * m)
    });
    ParameterCount { gcn, vae }
}
