use serde::{Deserialize, Serialize};

use super::{ModelConfig, ADAPTER_INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};
use crate::pca::PcaBasis;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub mlp_norm: Vec<f64>,
    pub w_gate: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

/// Maps a normalized decoder state to PCA coefficients:
/// `z = proj·h̄`, `c = z + out·(silu(gate·z) ⊙ up·z) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHead {
    /// `k × d`, initialized from `Pₖᵀ`.
    pub proj: Mat,
    pub gate: Mat,
    pub up: Mat,
    pub out: Mat,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab × d`.
    pub embed: Mat,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    /// `vocab × d`.
    pub lm_head: Mat,
    pub latent_head: Option<LatentHead>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LatentHead,
}

pub struct ParamTensor<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a [f64],
}

pub struct ParamTensorMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [f64],
}

fn scaled_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| std * rng.normal())
}

impl ModelParams {
    /// Scaled-normal initialization (`N(0, 1/fan_in)` for projections, unit
    /// normal embeddings, unit gains) seeded by `config.init_seed`. The latent
    /// head is left empty until [`ModelParams::init_latent_head`].
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.init_seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let sd = 1.0 / (d as f64).sqrt();
        let sff = 1.0 / (ff as f64).sqrt();
        let embed = scaled_normal(&mut rng, config.vocab_size, d, 1.0);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: vec![1.0; d],
                wq: scaled_normal(&mut rng, d, d, sd),
                wk: scaled_normal(&mut rng, d, d, sd),
                wv: scaled_normal(&mut rng, d, d, sd),
                wo: scaled_normal(&mut rng, d, d, sd),
                mlp_norm: vec![1.0; d],
                w_gate: scaled_normal(&mut rng, ff, d, sd),
                w_up: scaled_normal(&mut rng, ff, d, sd),
                w_down: scaled_normal(&mut rng, d, ff, sff),
            })
            .collect();
        let lm_head = scaled_normal(&mut rng, config.vocab_size, d, sd);
        Ok(Self {
            embed,
            blocks,
            final_norm: vec![1.0; d],
            lm_head,
            latent_head: None,
            config,
        })
    }

    /// Sets the down-projection to `Pₖᵀ` and draws the adapter so that at
    /// `perturbation = 0` the head computes exactly `Pₖᵀh̄`.
    pub fn init_latent_head(&mut self, basis: &PcaBasis, rng: &mut Rng, perturbation: f64) -> Result<()> {
        let d = self.config.d_model;
        let k = self.config.latent_k;
        if basis.dim() != d || basis.k() != k {
            return Err(Error::InvalidArgument(format!(
                "basis is d={} k={}, model expects d={d} k={k}",
                basis.dim(),
                basis.k()
            )));
        }
        if !(perturbation >= 0.0) {
            return Err(Error::InvalidArgument("perturbation must be >= 0".into()));
        }
        let a = self.config.adapter_width;
        let proj = basis.components().transpose();
        let sk = 1.0 / (k as f64).sqrt();
        let gate = scaled_normal(rng, a, k, sk);
        let up = scaled_normal(rng, a, k, sk);
        let out = if perturbation > 0.0 {
            scaled_normal(rng, k, a, perturbation)
        } else {
            Mat::zeros(k, a)
        };
        self.latent_head = Some(LatentHead {
            proj,
            gate,
            up,
            out,
            bias: vec![0.0; k],
        });
        Ok(())
    }

    pub fn init_latent_head_default(&mut self, basis: &PcaBasis, rng: &mut Rng) -> Result<()> {
        self.init_latent_head(basis, rng, ADAPTER_INIT_STD)
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// All parameter arrays in checkpoint order.
    pub fn tensors<'a>(&'a self) -> Vec<ParamTensor<'a>> {
        let mut out = Vec::new();
        let bb = ParamGroup::Backbone;
        let mut push = |name: String, group, data: &'a [f64]| {
            out.push(ParamTensor { name, group, data });
        };
        push("embed".into(), bb, self.embed.as_slice());
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("blocks.{i}.attn_norm"), bb, &b.attn_norm);
            push(format!("blocks.{i}.wq"), bb, b.wq.as_slice());
            push(format!("blocks.{i}.wk"), bb, b.wk.as_slice());
            push(format!("blocks.{i}.wv"), bb, b.wv.as_slice());
            push(format!("blocks.{i}.wo"), bb, b.wo.as_slice());
            push(format!("blocks.{i}.mlp_norm"), bb, &b.mlp_norm);
            push(format!("blocks.{i}.w_gate"), bb, b.w_gate.as_slice());
            push(format!("blocks.{i}.w_up"), bb, b.w_up.as_slice());
            push(format!("blocks.{i}.w_down"), bb, b.w_down.as_slice());
        }
        push("final_norm".into(), bb, &self.final_norm);
        push("lm_head".into(), bb, self.lm_head.as_slice());
        if let Some(h) = &self.latent_head {
            let lh = ParamGroup::LatentHead;
            push("latent_head.proj".into(), lh, h.proj.as_slice());
            push("latent_head.gate".into(), lh, h.gate.as_slice());
            push("latent_head.up".into(), lh, h.up.as_slice());
            push("latent_head.out".into(), lh, h.out.as_slice());
            push("latent_head.bias".into(), lh, &h.bias);
        }
        out
    }

    pub fn tensors_mut<'a>(&'a mut self) -> Vec<ParamTensorMut<'a>> {
        let mut out = Vec::new();
        let bb = ParamGroup::Backbone;
        let mut push = |name: String, group, data: &'a mut [f64]| {
            out.push(ParamTensorMut { name, group, data });
        };
        push("embed".into(), bb, self.embed.as_mut_slice());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push(format!("blocks.{i}.attn_norm"), bb, &mut b.attn_norm);
            push(format!("blocks.{i}.wq"), bb, b.wq.as_mut_slice());
            push(format!("blocks.{i}.wk"), bb, b.wk.as_mut_slice());
            push(format!("blocks.{i}.wv"), bb, b.wv.as_mut_slice());
            push(format!("blocks.{i}.wo"), bb, b.wo.as_mut_slice());
            push(format!("blocks.{i}.mlp_norm"), bb, &mut b.mlp_norm);
            push(format!("blocks.{i}.w_gate"), bb, b.w_gate.as_mut_slice());
            push(format!("blocks.{i}.w_up"), bb, b.w_up.as_mut_slice());
            push(format!("blocks.{i}.w_down"), bb, b.w_down.as_mut_slice());
        }
        push("final_norm".into(), bb, &mut self.final_norm);
        push("lm_head".into(), bb, self.lm_head.as_mut_slice());
        if let Some(h) = &mut self.latent_head {
            let lh = ParamGroup::LatentHead;
            push("latent_head.proj".into(), lh, h.proj.as_mut_slice());
            push("latent_head.gate".into(), lh, h.gate.as_mut_slice());
            push("latent_head.up".into(), lh, h.up.as_mut_slice());
            push("latent_head.out".into(), lh, h.out.as_mut_slice());
            push("latent_head.bias".into(), lh, &mut h.bias);
        }
        out
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::numerics::axpy(alpha, src.data, dst.data);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        let mut c = ModelConfig::desk_scale(20, 4);
        c.d_model = 16;
        c.d_ff = 32;
        c.n_layers = 2;
        c
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(config()).unwrap();
        let b = ModelParams::init(config()).unwrap();
        assert_eq!(a, b);
        let mut other = config();
        other.init_seed += 1;
        assert_ne!(a, ModelParams::init(other).unwrap());
    }

    #[test]
    fn tensor_listing_is_complete() {
        let p = ModelParams::init(config()).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names.len(), 1 + 9 * 2 + 2);
        assert_eq!(names[0], "embed");
        assert_eq!(names.last().unwrap(), "lm_head");
        let z = p.zeros_like();
        assert!(z.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert_eq!(z.parameter_count(), p.parameter_count());
    }
}
