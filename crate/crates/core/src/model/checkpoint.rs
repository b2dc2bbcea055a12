//! Checkpoint file: magic `LLCK`, `u32` version, then the config as
//! `d_model, n_layers, n_heads, d_ff, vocab_size, latent_k, adapter_width,
//! max_seq_len` (`u64` each), `rms_eps, rope_base` (`f64`), `init_seed`
//! (`u64`), a `u8` latent-head flag, and finally every parameter array in
//! [`ModelParams::tensors`] order as little-endian doubles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::pca::read_f64s;

const MAGIC: &[u8; 4] = b"LLCK";
const FORMAT_VERSION: u32 = 1;

impl ModelParams {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_ff,
            c.vocab_size,
            c.latent_k,
            c.adapter_width,
            c.max_seq_len,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.rms_eps.to_le_bytes())?;
        w.write_all(&c.rope_base.to_le_bytes())?;
        w.write_all(&c.init_seed.to_le_bytes())?;
        w.write_all(&[u8::from(self.latent_head.is_some())])?;
        for t in self.tensors() {
            for v in t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::FileFormat("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::FileFormat(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut u = [0usize; 8];
        for slot in u.iter_mut() {
            r.read_exact(&mut b8)?;
            *slot = u64::from_le_bytes(b8) as usize;
        }
        r.read_exact(&mut b8)?;
        let rms_eps = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let rope_base = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let init_seed = u64::from_le_bytes(b8);
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let config = ModelConfig {
            d_model: u[0],
            n_layers: u[1],
            n_heads: u[2],
            d_ff: u[3],
            vocab_size: u[4],
            latent_k: u[5],
            adapter_width: u[6],
            max_seq_len: u[7],
            rms_eps,
            rope_base,
            init_seed,
        };
        config.validate().map_err(|e| Error::FileFormat(format!("bad config: {e}")))?;

        // Allocate the right shapes, then overwrite every array from the file.
        let mut params = ModelParams::init(config.clone())?;
        if flag[0] == 1 {
            let (k, a, d) = (config.latent_k, config.adapter_width, config.d_model);
            params.latent_head = Some(super::LatentHead {
                proj: Mat::zeros(k, d),
                gate: Mat::zeros(a, k),
                up: Mat::zeros(a, k),
                out: Mat::zeros(k, a),
                bias: vec![0.0; k],
            });
        } else if flag[0] != 0 {
            return Err(Error::FileFormat("bad latent-head flag".into()));
        }
        for t in params.tensors_mut() {
            let values = read_f64s(&mut r, t.data.len())?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::FileFormat(format!("non-finite values in {}", t.name)));
            }
            t.data.copy_from_slice(&values);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::FileFormat("trailing bytes after checkpoint".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
