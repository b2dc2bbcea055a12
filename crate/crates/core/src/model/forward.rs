//! Position-by-position inference forward pass over a KV cache.

use super::{silu, InputSlot, LatentHead, ModelParams, Rope};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{axpy, dot, rmsnorm_into};

/// Per-layer keys (after rotary encoding) and values for consumed positions.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    rope: Option<Rope>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
            rope: None,
        }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::new(params.config.n_layers)
    }

    /// Number of consumed positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionOutput {
    /// Residual stream after the last block, before the final norm.
    pub hidden: Vec<f64>,
    /// Final-RMSNorm output consumed by both heads.
    pub normed: Vec<f64>,
}

/// Residual states and updates at every sublayer boundary.
///
/// `states[s][p]` is the stream entering sublayer step `s` at position `p`
/// (`s = 0` is the input embedding; steps alternate attention and MLP), and
/// `states[s + 1][p] = states[s][p] + updates[s][p]`.
#[derive(Debug, Clone)]
pub struct ResidualTrace {
    pub states: Vec<Vec<Vec<f64>>>,
    pub updates: Vec<Vec<Vec<f64>>>,
    pub outputs: Vec<PositionOutput>,
}

impl ResidualTrace {
    /// Residual stream at block boundary `layer` (0 = input, L = last block output).
    pub fn block_states(&self, layer: usize) -> &[Vec<f64>] {
        &self.states[2 * layer]
    }
}

/// Extends `cache` with `slots` and returns `(h^(L), h̄)` for each new position.
pub fn forward_prefix(
    params: &ModelParams,
    slots: &[InputSlot],
    cache: &mut KvCache,
) -> Result<Vec<PositionOutput>> {
    run(params, slots, cache, None)
}

/// Full forward from an empty cache, recording every residual update.
pub fn forward_trace(params: &ModelParams, slots: &[InputSlot]) -> Result<ResidualTrace> {
    let steps = 2 * params.config.n_layers;
    let mut trace = ResidualTrace {
        states: vec![Vec::with_capacity(slots.len()); steps + 1],
        updates: vec![Vec::with_capacity(slots.len()); steps],
        outputs: Vec::new(),
    };
    let mut cache = KvCache::for_model(params);
    trace.outputs = run(params, slots, &mut cache, Some(&mut trace))?;
    Ok(trace)
}

fn run(
    params: &ModelParams,
    slots: &[InputSlot],
    cache: &mut KvCache,
    mut trace: Option<&mut ResidualTrace>,
) -> Result<Vec<PositionOutput>> {
    let cfg = &params.config;
    if cache.keys.len() != cfg.n_layers {
        return Err(Error::InvalidArgument("cache layer count does not match model".into()));
    }
    let requested = cache.len + slots.len();
    if requested > cfg.max_seq_len {
        return Err(Error::SequenceOverflow {
            requested,
            max: cfg.max_seq_len,
        });
    }
    for slot in slots {
        match slot {
            InputSlot::Token(t) if *t as usize >= cfg.vocab_size => {
                return Err(Error::InvalidArgument(format!(
                    "token {t} outside vocabulary of {}",
                    cfg.vocab_size
                )))
            }
            InputSlot::Latent(v) => ensure_dim("latent input slot", cfg.d_model, v.len())?,
            _ => {}
        }
    }
    if cache.rope.is_none() {
        cache.rope = Some(Rope::new(cfg.head_dim(), cfg.max_seq_len, cfg.rope_base));
    }

    let mut outputs = Vec::with_capacity(slots.len());
    for slot in slots {
        let x = match slot {
            InputSlot::Token(t) => params.embed.row(*t as usize).to_vec(),
            InputSlot::Latent(v) => v.clone(),
        };
        outputs.push(step(params, x, cache, trace.as_deref_mut()));
    }
    Ok(outputs)
}

fn step(
    params: &ModelParams,
    mut x: Vec<f64>,
    cache: &mut KvCache,
    mut trace: Option<&mut ResidualTrace>,
) -> PositionOutput {
    let cfg = &params.config;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let pos = cache.len;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut normed = vec![0.0; d];
    let mut record = |s: usize, state: &[f64], update: &[f64]| {
        if let Some(t) = trace.as_deref_mut() {
            t.states[s].push(state.to_vec());
            t.updates[s].push(update.to_vec());
        }
    };

    for (l, block) in params.blocks.iter().enumerate() {
        rmsnorm_into(&x, &block.attn_norm, cfg.rms_eps, &mut normed);
        let mut q = block.wq.matvec(&normed).expect("shape");
        let mut k = block.wk.matvec(&normed).expect("shape");
        let v = block.wv.matvec(&normed).expect("shape");
        let rope = cache.rope.as_ref().expect("rope table");
        for h in 0..cfg.n_heads {
            rope.apply(&mut q[h * hd..(h + 1) * hd], pos);
            rope.apply(&mut k[h * hd..(h + 1) * hd], pos);
        }
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);

        let keys = &cache.keys[l];
        let values = &cache.values[l];
        let mut attended = vec![0.0; d];
        let mut scores = vec![0.0; pos + 1];
        for h in 0..cfg.n_heads {
            let qh = &q[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = scale * dot(qh, &keys[j * d + h * hd..j * d + (h + 1) * hd]);
            }
            softmax_in_place(&mut scores);
            let out = &mut attended[h * hd..(h + 1) * hd];
            for (j, &p) in scores.iter().enumerate() {
                axpy(p, &values[j * d + h * hd..j * d + (h + 1) * hd], out);
            }
        }
        let update = block.wo.matvec(&attended).expect("shape");
        record(2 * l, &x, &update);
        axpy(1.0, &update, &mut x);

        rmsnorm_into(&x, &block.mlp_norm, cfg.rms_eps, &mut normed);
        let gate = block.w_gate.matvec(&normed).expect("shape");
        let up = block.w_up.matvec(&normed).expect("shape");
        let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let update = block.w_down.matvec(&hidden).expect("shape");
        record(2 * l + 1, &x, &update);
        axpy(1.0, &update, &mut x);
    }
    cache.len += 1;
    if let Some(t) = trace {
        t.states[2 * cfg.n_layers].push(x.clone());
    }
    rmsnorm_into(&x, &params.final_norm, cfg.rms_eps, &mut normed);
    PositionOutput {
        hidden: x,
        normed,
    }
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `W_vocab · h̄` (no softmax).
pub fn lm_logits(params: &ModelParams, h_bar: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("lm_logits", params.config.d_model, h_bar.len())?;
    params.lm_head.matvec(h_bar)
}

/// PCA coefficients `F_θ(h̄)` from the latent head.
pub fn latent_coeffs(params: &ModelParams, h_bar: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("latent_coeffs", params.config.d_model, h_bar.len())?;
    let head = params.latent_head.as_ref().ok_or(Error::LatentHeadMissing)?;
    Ok(latent_head_forward(head, h_bar).coeffs)
}

pub(crate) struct LatentHeadActivations {
    pub z: Vec<f64>,
    pub gate: Vec<f64>,
    pub up: Vec<f64>,
    pub hidden: Vec<f64>,
    pub coeffs: Vec<f64>,
}

pub(crate) fn latent_head_forward(head: &LatentHead, h_bar: &[f64]) -> LatentHeadActivations {
    let z = head.proj.matvec(h_bar).expect("shape");
    let gate = head.gate.matvec(&z).expect("shape");
    let up = head.up.matvec(&z).expect("shape");
    let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    let mut coeffs = head.out.matvec(&hidden).expect("shape");
    for ((c, zi), b) in coeffs.iter_mut().zip(&z).zip(&head.bias) {
        *c += zi + b;
    }
    LatentHeadActivations {
        z,
        gate,
        up,
        hidden,
        coeffs,
    }
}
