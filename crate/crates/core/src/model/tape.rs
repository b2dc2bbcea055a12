//! Whole-sequence forward pass that keeps activations, and the matching
//! reverse-mode gradient computation for every backbone parameter.

use super::forward::{softmax_in_place, LatentHeadActivations};
use super::{silu, silu_grad, InputSlot, LatentHead, ModelParams, Rope};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{axpy, dot, rmsnorm_into, Mat};

struct LayerTape {
    x_in: Vec<f64>,
    n1: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × n × n`, lower triangle used.
    probs: Vec<f64>,
    attended: Vec<f64>,
    x_mid: Vec<f64>,
    n2: Vec<f64>,
    inv2: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    hidden: Vec<f64>,
}

/// Activations of one full-sequence forward pass.
pub struct Tape {
    n: usize,
    d: usize,
    tokens: Vec<Option<u32>>,
    layers: Vec<LayerTape>,
    x_final: Vec<f64>,
    inv_final: Vec<f64>,
    normed: Vec<f64>,
    rope: Rope,
}

impl Tape {
    pub fn forward(params: &ModelParams, slots: &[InputSlot]) -> Result<Self> {
        let cfg = &params.config;
        let n = slots.len();
        let d = cfg.d_model;
        if n == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        if n > cfg.max_seq_len {
            return Err(Error::SequenceOverflow {
                requested: n,
                max: cfg.max_seq_len,
            });
        }
        let mut x = Vec::with_capacity(n * d);
        let mut tokens = Vec::with_capacity(n);
        for slot in slots {
            match slot {
                InputSlot::Token(t) => {
                    if *t as usize >= cfg.vocab_size {
                        return Err(Error::InvalidArgument(format!("token {t} outside vocabulary")));
                    }
                    x.extend_from_slice(params.embed.row(*t as usize));
                    tokens.push(Some(*t));
                }
                InputSlot::Latent(v) => {
                    ensure_dim("latent input slot", d, v.len())?;
                    x.extend_from_slice(v);
                    tokens.push(None);
                }
            }
        }

        let rope = Rope::new(cfg.head_dim(), n, cfg.rope_base);
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for block in &params.blocks {
            let (n1, inv1) = rmsnorm_rows(&x, &block.attn_norm, cfg.rms_eps, d);
            let mut q = linear(&n1, &block.wq);
            let mut k = linear(&n1, &block.wk);
            let v = linear(&n1, &block.wv);
            for i in 0..n {
                for h in 0..heads {
                    rope.apply(&mut q[i * d + h * hd..i * d + (h + 1) * hd], i);
                    rope.apply(&mut k[i * d + h * hd..i * d + (h + 1) * hd], i);
                }
            }
            let mut probs = vec![0.0; heads * n * n];
            let mut attended = vec![0.0; n * d];
            for h in 0..heads {
                for i in 0..n {
                    let qi = &q[i * d + h * hd..i * d + (h + 1) * hd];
                    let row = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = scale * dot(qi, &k[j * d + h * hd..j * d + (h + 1) * hd]);
                    }
                    softmax_in_place(row);
                    let out = &mut attended[i * d + h * hd..i * d + (h + 1) * hd];
                    for (j, &p) in row.iter().enumerate() {
                        axpy(p, &v[j * d + h * hd..j * d + (h + 1) * hd], out);
                    }
                }
            }
            let mut x_mid = x.clone();
            axpy(1.0, &linear(&attended, &block.wo), &mut x_mid);
            let (n2, inv2) = rmsnorm_rows(&x_mid, &block.mlp_norm, cfg.rms_eps, d);
            let gate = linear(&n2, &block.w_gate);
            let up = linear(&n2, &block.w_up);
            let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let mut x_out = x_mid.clone();
            axpy(1.0, &linear(&hidden, &block.w_down), &mut x_out);
            layers.push(LayerTape {
                x_in: std::mem::replace(&mut x, x_out),
                n1,
                inv1,
                q,
                k,
                v,
                probs,
                attended,
                x_mid,
                n2,
                inv2,
                gate,
                up,
                hidden,
            });
        }
        let (normed, inv_final) = rmsnorm_rows(&x, &params.final_norm, cfg.rms_eps, d);
        Ok(Self {
            n,
            d,
            tokens,
            layers,
            x_final: x,
            inv_final,
            normed,
            rope,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// h̄ at `pos`.
    pub fn normed(&self, pos: usize) -> &[f64] {
        &self.normed[pos * self.d..(pos + 1) * self.d]
    }

    /// h^(L) at `pos`.
    pub fn hidden(&self, pos: usize) -> &[f64] {
        &self.x_final[pos * self.d..(pos + 1) * self.d]
    }

    /// Back-propagates `∂L/∂h̄` (`n × d`, row-major) through the backbone,
    /// accumulating into `grads`. Returns `∂L/∂x₀` for every input position.
    pub fn backward(&self, params: &ModelParams, d_normed: &[f64], grads: &mut ModelParams) -> Vec<f64> {
        let cfg = &params.config;
        let (n, d) = (self.n, self.d);
        assert_eq!(d_normed.len(), n * d, "gradient buffer shape");
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut dx = rmsnorm_rows_backward(
            &self.x_final,
            &self.inv_final,
            &params.final_norm,
            d_normed,
            &mut grads.final_norm,
        );

        for (l, lt) in self.layers.iter().enumerate().rev() {
            let block = &params.blocks[l];
            let gb = &mut grads.blocks[l];

            let d_hidden = linear_backward(&lt.hidden, &dx, &block.w_down, &mut gb.w_down);
            let mut d_gate = vec![0.0; d_hidden.len()];
            let mut d_up = vec![0.0; d_hidden.len()];
            for i in 0..d_hidden.len() {
                d_gate[i] = d_hidden[i] * lt.up[i] * silu_grad(lt.gate[i]);
                d_up[i] = d_hidden[i] * silu(lt.gate[i]);
            }
            let mut d_n2 = linear_backward(&lt.n2, &d_gate, &block.w_gate, &mut gb.w_gate);
            axpy(1.0, &linear_backward(&lt.n2, &d_up, &block.w_up, &mut gb.w_up), &mut d_n2);
            let mut d_mid = dx;
            axpy(
                1.0,
                &rmsnorm_rows_backward(&lt.x_mid, &lt.inv2, &block.mlp_norm, &d_n2, &mut gb.mlp_norm),
                &mut d_mid,
            );

            let d_att = linear_backward(&lt.attended, &d_mid, &block.wo, &mut gb.wo);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                for i in 0..n {
                    let probs = &lt.probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                    let d_out = &d_att[i * d + cols.start..i * d + cols.end];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        dp[j] = dot(d_out, &lt.v[j * d + cols.start..j * d + cols.end]);
                        weighted += probs[j] * dp[j];
                        axpy(probs[j], d_out, &mut dv[j * d + cols.start..j * d + cols.end]);
                    }
                    let qi = &lt.q[i * d + cols.start..i * d + cols.end];
                    for j in 0..=i {
                        let ds = scale * probs[j] * (dp[j] - weighted);
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(
                            ds,
                            &lt.k[j * d + cols.start..j * d + cols.end],
                            &mut dq[i * d + cols.start..i * d + cols.end],
                        );
                        axpy(ds, qi, &mut dk[j * d + cols.start..j * d + cols.end]);
                    }
                }
            }
            for i in 0..n {
                for h in 0..heads {
                    self.rope.apply_inverse(&mut dq[i * d + h * hd..i * d + (h + 1) * hd], i);
                    self.rope.apply_inverse(&mut dk[i * d + h * hd..i * d + (h + 1) * hd], i);
                }
            }
            let mut d_n1 = linear_backward(&lt.n1, &dq, &block.wq, &mut gb.wq);
            axpy(1.0, &linear_backward(&lt.n1, &dk, &block.wk, &mut gb.wk), &mut d_n1);
            axpy(1.0, &linear_backward(&lt.n1, &dv, &block.wv, &mut gb.wv), &mut d_n1);
            dx = d_mid;
            axpy(
                1.0,
                &rmsnorm_rows_backward(&lt.x_in, &lt.inv1, &block.attn_norm, &d_n1, &mut gb.attn_norm),
                &mut dx,
            );
        }

        for (i, t) in self.tokens.iter().enumerate() {
            if let Some(t) = t {
                axpy(1.0, &dx[i * d..(i + 1) * d], grads.embed.row_mut(*t as usize));
            }
        }
        dx
    }
}

/// `y = x·Wᵀ` for row-major `x` (`n × in`) and `W` (`out × in`).
fn linear(x: &[f64], w: &Mat) -> Vec<f64> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    let n = x.len() / in_dim;
    let mut y = vec![0.0; n * out_dim];
    for i in 0..n {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        for (o, yo) in y[i * out_dim..(i + 1) * out_dim].iter_mut().enumerate() {
            *yo = dot(xi, w.row(o));
        }
    }
    y
}

/// Returns `∂/∂x` and accumulates `∂/∂W` for [`linear`].
fn linear_backward(x: &[f64], dy: &[f64], w: &Mat, dw: &mut Mat) -> Vec<f64> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    let n = x.len() / in_dim;
    let mut dx = vec![0.0; n * in_dim];
    for i in 0..n {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        let dyi = &dy[i * out_dim..(i + 1) * out_dim];
        let dxi = &mut dx[i * in_dim..(i + 1) * in_dim];
        for (o, &g) in dyi.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), dxi);
                axpy(g, xi, dw.row_mut(o));
            }
        }
    }
    dx
}

fn rmsnorm_rows(x: &[f64], gain: &[f64], eps: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(n);
    for i in 0..n {
        inv.push(rmsnorm_into(&x[i * d..(i + 1) * d], gain, eps, &mut out[i * d..(i + 1) * d]));
    }
    (out, inv)
}

fn rmsnorm_rows_backward(x: &[f64], inv: &[f64], gain: &[f64], dy: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let d = gain.len();
    let mut dx = vec![0.0; x.len()];
    for (i, &r) in inv.iter().enumerate() {
        let xi = &x[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut proj = 0.0;
        for j in 0..d {
            dgain[j] += dyi[j] * xi[j] * r;
            proj += dyi[j] * gain[j] * xi[j];
        }
        let coef = r * r * r * proj / d as f64;
        for j in 0..d {
            dx[i * d + j] = r * gain[j] * dyi[j] - coef * xi[j];
        }
    }
    dx
}

/// Accumulates latent-head gradients for `∂L/∂c` and returns `∂L/∂h̄`.
pub(crate) fn latent_head_backward(
    head: &LatentHead,
    h_bar: &[f64],
    acts: &LatentHeadActivations,
    d_coeffs: &[f64],
    grads: &mut LatentHead,
) -> Vec<f64> {
    axpy(1.0, d_coeffs, &mut grads.bias);
    for (r, &g) in d_coeffs.iter().enumerate() {
        axpy(g, &acts.hidden, grads.out.row_mut(r));
    }
    let d_hidden = head.out.matvec_t(d_coeffs).expect("shape");
    let mut dz = d_coeffs.to_vec();
    for (a, &dh) in d_hidden.iter().enumerate() {
        let d_gate = dh * acts.up[a] * silu_grad(acts.gate[a]);
        let d_up = dh * silu(acts.gate[a]);
        axpy(d_gate, &acts.z, grads.gate.row_mut(a));
        axpy(d_up, &acts.z, grads.up.row_mut(a));
        axpy(d_gate, head.gate.row(a), &mut dz);
        axpy(d_up, head.up.row(a), &mut dz);
    }
    for (r, &g) in dz.iter().enumerate() {
        axpy(g, h_bar, grads.proj.row_mut(r));
    }
    head.proj.matvec_t(&dz).expect("shape")
}

/// Accumulates LM-head gradients for `∂L/∂logits` and adds `∂L/∂h̄` into `d_h`.
pub(crate) fn lm_head_backward(
    lm_head: &Mat,
    h_bar: &[f64],
    d_logits: &[f64],
    grads: &mut Mat,
    d_h: &mut [f64],
) {
    for (r, &g) in d_logits.iter().enumerate() {
        if g != 0.0 {
            axpy(g, h_bar, grads.row_mut(r));
            axpy(g, lm_head.row(r), d_h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_prefix, KvCache, ModelConfig};
    use crate::numerics::Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 12,
            n_layers: 2,
            n_heads: 3,
            d_ff: 20,
            vocab_size: 14,
            latent_k: 3,
            adapter_width: 4,
            max_seq_len: 16,
            rms_eps: 1e-6,
            rope_base: 10_000.0,
            init_seed: 3,
        }
    }

    fn slots(rng: &mut Rng) -> Vec<InputSlot> {
        (0..7)
            .map(|i| {
                if i % 2 == 1 {
                    InputSlot::Latent((0..12).map(|_| rng.normal()).collect())
                } else {
                    InputSlot::Token(9 + rng.below(5) as u32)
                }
            })
            .collect()
    }

    #[test]
    fn tape_matches_cached_forward() {
        let p = ModelParams::init(config()).unwrap();
        let mut rng = Rng::new(1);
        let s = slots(&mut rng);
        let tape = Tape::forward(&p, &s).unwrap();
        let cached = forward_prefix(&p, &s, &mut KvCache::for_model(&p)).unwrap();
        for (i, o) in cached.iter().enumerate() {
            for (a, b) in o.normed.iter().zip(tape.normed(i)) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in o.hidden.iter().zip(tape.hidden(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    /// Weighted sum of h̄ as a scalar probe; checks every backbone tensor
    /// against central differences.
    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let p = ModelParams::init(config()).unwrap();
        let mut rng = Rng::new(2);
        let s = slots(&mut rng);
        let n = s.len();
        let weights: Vec<f64> = (0..n * 12).map(|_| rng.normal()).collect();
        let loss = |q: &ModelParams| -> f64 {
            let t = Tape::forward(q, &s).unwrap();
            (0..n).map(|i| dot(t.normed(i), &weights[i * 12..(i + 1) * 12])).sum()
        };
        let tape = Tape::forward(&p, &s).unwrap();
        let mut grads = p.zeros_like();
        let dx = tape.backward(&p, &weights, &mut grads);

        let h = 1e-5;
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
        let names: Vec<String> = grads.tensors().into_iter().map(|t| t.name).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            for idx in [0, len / 3, len / 2, len - 1] {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data[idx] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[ti][idx];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-5, "{name}[{idx}]: analytic {a} fd {fd}");
            }
        }

        // input-gradient for a latent slot
        let pos = 1;
        let base = match &s[pos] {
            InputSlot::Latent(v) => v.clone(),
            _ => unreachable!(),
        };
        for j in [0, 5, 11] {
            let mut sp = s.clone();
            let mut sm = s.clone();
            let mut vp = base.clone();
            vp[j] += h;
            let mut vm = base.clone();
            vm[j] -= h;
            sp[pos] = InputSlot::Latent(vp);
            sm[pos] = InputSlot::Latent(vm);
            let f = |slots: &[InputSlot]| -> f64 {
                let t = Tape::forward(&p, slots).unwrap();
                (0..n).map(|i| dot(t.normed(i), &weights[i * 12..(i + 1) * 12])).sum()
            };
            let fd = (f(&sp) - f(&sm)) / (2.0 * h);
            assert!((fd - dx[pos * 12 + j]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
