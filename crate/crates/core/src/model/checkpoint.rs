//! Versioned binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MOODCKPT"
//! version      u32      1
//! config_len   u32, followed by that many bytes of `key=value` lines
//! tensor_count u32
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   flags    u8   bit 0: trainable, bit 1: VAE branch
//!   rank     u8, then rank × u64 dims
//!   values   f64 × product(dims), row-major
//! end marker   4 bytes  "END\n"
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Branch, HybridModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MOODCKPT";
const VERSION: u32 = 1;
const END: &[u8; 4] = b"END\n";
const FLAG_TRAINABLE: u8 = 1;
const FLAG_VAE: u8 = 2;

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Skip the generative branch; the result is a prediction-only model.
    pub prediction_only: bool,
}

pub fn write_checkpoint(model: &HybridModel, w: &mut impl Write) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    let entries = model.params().entries();
    let cfg = model.config().to_kv();
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg.as_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for e in entries {
        w.write_all(&(e.name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(e.name.as_bytes()).map_err(io)?;
        let mut flags = 0u8;
        if e.trainable {
            flags |= FLAG_TRAINABLE;
        }
        if e.branch == Branch::Vae {
            flags |= FLAG_VAE;
        }
        w.write_all(&[flags, e.value.rank() as u8]).map_err(io)?;
        for &d in e.value.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(e.value.len() * 8);
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.write_all(END).map_err(io)?;
    Ok(())
}

pub fn save_checkpoint(model: &HybridModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated or unreadable file: {e}")))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn load_checkpoint_from(r: impl Read, opts: LoadOptions) -> Result<HybridModel> {
    let mut r = Reader { inner: r };
    if &r.array::<8>()? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.bytes(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let mut config = ModelConfig::from_kv(&cfg_text)?;
    if opts.prediction_only {
        config = config.without_vae();
    }
    let mut model = HybridModel::zeroed(config)?;
    let mut filled = vec![false; model.params().len()];

    let count = r.u32()?;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let flags = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        if opts.prediction_only && flags & FLAG_VAE != 0 {
            continue;
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let idx = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if model.params().entry(idx).trainable != (flags & FLAG_TRAINABLE != 0) {
            return Err(Error::Checkpoint(format!("tensor {name} has inconsistent flags")));
        }
        model
            .params_mut()
            .set(idx, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        filled[idx] = true;
    }
    if &r.array::<4>()? != END {
        return Err(Error::Checkpoint("missing end marker".into()));
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        return Err(Error::Checkpoint(format!(
            "tensor {} missing from file",
            model.params().entry(i).name
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path, opts: LoadOptions) -> Result<HybridModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_from(BufReader::new(file), opts)
}
