use crate::error::{Error, Result};

/// Discriminative graph network shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GcnConfig {
    /// Graph nodes `K` (joints or joint parameters).
    pub joints: usize,
    /// Input/output width `M`: retained DCT coefficients.
    pub dct_coeffs: usize,
    pub hidden: usize,
    /// Residual graph convolutional blocks.
    pub blocks: usize,
    pub p_drop: f64,
}

impl GcnConfig {
    pub fn new(joints: usize, dct_coeffs: usize) -> Self {
        GcnConfig { joints, dct_coeffs, hidden: 256, blocks: 12, p_drop: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.dct_coeffs == 0 {
            return Err(Error::invalid("joints and DCT coefficient count must be positive"));
        }
        if self.hidden == 0 || self.blocks == 0 {
            return Err(Error::invalid("hidden width and block count must be positive"));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::invalid(format!("p_drop {} outside [0, 1)", self.p_drop)));
        }
        Ok(())
    }
}

/// Generative branch shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeConfig {
    /// Latent width per joint, `n_z`.
    pub latent: usize,
    /// Leading discriminative blocks shared as the recognition trunk.
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { latent: 8, encoder_blocks: 6, decoder_blocks: 6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub gcn: GcnConfig,
    pub vae: Option<VaeConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.gcn.validate()?;
        if let Some(v) = &self.vae {
            if v.latent == 0 || v.decoder_blocks == 0 {
                return Err(Error::invalid("latent width and decoder blocks must be positive"));
            }
            if v.encoder_blocks == 0 || v.encoder_blocks > self.gcn.blocks {
                return Err(Error::invalid(format!(
                    "encoder shares {} blocks but the network has {}",
                    v.encoder_blocks, self.gcn.blocks
                )));
            }
        }
        Ok(())
    }

    pub fn without_vae(mut self) -> Self {
        self.vae = None;
        self
    }

    /// `key=value` lines, used in checkpoint headers.
    pub fn to_kv(&self) -> String {
        let g = &self.gcn;
        let mut s = format!(
            "joints={}\ndct_coeffs={}\nhidden={}\nblocks={}\np_drop={:?}\n",
            g.joints, g.dct_coeffs, g.hidden, g.blocks, g.p_drop
        );
        if let Some(v) = &self.vae {
            s += &format!(
                "latent={}\nencoder_blocks={}\ndecoder_blocks={}\n",
                v.latent, v.encoder_blocks, v.decoder_blocks
            );
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k).ok_or_else(|| Error::Checkpoint(format!("config missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("config {k} is not an integer")))
        };
        let gcn = GcnConfig {
            joints: num("joints")?,
            dct_coeffs: num("dct_coeffs")?,
            hidden: num("hidden")?,
            blocks: num("blocks")?,
            p_drop: get("p_drop")?
                .parse()
                .map_err(|_| Error::Checkpoint("config p_drop is not a number".into()))?,
        };
        let vae = if map.contains_key("latent") {
            Some(VaeConfig {
                latent: num("latent")?,
                encoder_blocks: num("encoder_blocks")?,
                decoder_blocks: num("decoder_blocks")?,
            })
        } else {
            None
        };
        let cfg = ModelConfig { gcn, vae };
        cfg.validate()?;
        Ok(cfg)
    }
}
