//! Toy pre-norm decoder with a language head and a PCA-aligned latent head.

mod checkpoint;
mod forward;
mod params;
pub(crate) mod tape;

use serde::{Deserialize, Serialize};

use crate::data::tokens::{TokenId, RESERVED_TOKENS};
use crate::error::{Error, Result};

pub use forward::{
    forward_prefix, forward_trace, latent_coeffs, lm_logits, KvCache, PositionOutput,
    ResidualTrace,
};
pub use params::{Block, LatentHead, ModelParams, ParamGroup, ParamTensor, ParamTensorMut};
pub use tape::Tape;
pub(crate) use forward::latent_head_forward;
pub(crate) use tape::{latent_head_backward, lm_head_backward};

/// Default adapter perturbation used by [`ModelParams::init_latent_head`].
pub const ADAPTER_INIT_STD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub latent_k: usize,
    pub adapter_width: usize,
    pub max_seq_len: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// d = 64, L = 4, 4 heads, d_ff = 256; the adapter width follows k.
    pub fn desk_scale(vocab_size: usize, latent_k: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            latent_k,
            adapter_width: latent_k,
            max_seq_len: 128,
            rms_eps: 1e-6,
            rope_base: 10_000.0,
            init_seed: 12345,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.latent_k == 0 || self.latent_k > self.d_model {
            return bad(format!(
                "latent_k {} must be in 1..={}",
                self.latent_k, self.d_model
            ));
        }
        if self.adapter_width == 0 {
            return bad("adapter_width must be positive".into());
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return bad(format!(
                "vocab_size {} must exceed the {RESERVED_TOKENS} reserved format tokens",
                self.vocab_size
            ));
        }
        if !(self.rms_eps >= 0.0) || !(self.rope_base > 1.0) {
            return bad("rms_eps must be >= 0 and rope_base > 1".into());
        }
        Ok(())
    }
}

/// One input position: a vocabulary token or a raw d-dimensional embedding
/// injected without touching the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSlot {
    Token(TokenId),
    Latent(Vec<f64>),
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d silu / dx.
#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Cos/sin tables for interleaved-pair rotary encoding.
#[derive(Debug, Clone)]
pub(crate) struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub(crate) fn new(head_dim: usize, positions: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (p as f64 * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head vector in place for position `pos`.
    pub(crate) fn apply(&self, x: &mut [f64], pos: usize) {
        let base = pos * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }

    /// Applies the inverse (transpose) rotation; used for gradients.
    pub(crate) fn apply_inverse(&self, x: &mut [f64], pos: usize) {
        let base = pos * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c + b * s;
            x[2 * i + 1] = -a * s + b * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = ModelConfig::desk_scale(40, 8);
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.latent_k = 65;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.vocab_size = RESERVED_TOKENS;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rope_is_orthogonal() {
        let rope = Rope::new(8, 20, 10_000.0);
        let x = vec![0.3, -1.0, 2.0, 0.5, 0.1, 0.0, -0.7, 1.1];
        let mut y = x.clone();
        rope.apply(&mut y, 13);
        let n0: f64 = x.iter().map(|v| v * v).sum();
        let n1: f64 = y.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
        rope.apply_inverse(&mut y, 13);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
        let mut z = x.clone();
        rope.apply(&mut z, 0);
        assert_eq!(z, x);
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        for &x in &[-6.0, -1.3, 0.0, 0.4, 3.0, 40.0, -40.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
