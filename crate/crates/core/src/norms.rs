//! Layer-wise log-norm profiling of the residual stream and EMA norm
//! calibration for generated latents.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::model::{forward_trace, InputSlot, ModelParams};
use crate::numerics::{l2, log_l2};

pub const DEFAULT_EMA_DECAY: f64 = 0.9;

const DIRECTION_GRID: f64 = (1u64 << 26) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Text,
    Vision,
}

impl TokenClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Text => "text",
            TokenClass::Vision => "vision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormCell {
    pub layer: usize,
    pub class: TokenClass,
    pub mean_log_norm: f64,
    /// Population standard deviation.
    pub std_log_norm: f64,
    pub count: usize,
}

/// Log-L2-norm statistics per (layer, class). Layer 0 is the input
/// embedding; layer `ℓ` is the residual stream after block `ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub n_layers: usize,
    pub cells: Vec<NormCell>,
}

impl NormProfile {
    pub fn cell(&self, layer: usize, class: TokenClass) -> Option<&NormCell> {
        self.cells.iter().find(|c| c.layer == layer && c.class == class)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "class", "mean_log_norm", "std_log_norm", "count"])?;
        for c in &self.cells {
            out.write_record([
                c.layer.to_string(),
                c.class.as_str().to_string(),
                format!("{:.17e}", c.mean_log_norm),
                format!("{:.17e}", c.std_log_norm),
                c.count.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One sequence to profile with a class label per position.
#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub slots: Vec<InputSlot>,
    pub classes: Vec<TokenClass>,
}

impl LabeledSequence {
    /// Latent slots are labeled vision, token slots text.
    pub fn from_slots(slots: Vec<InputSlot>) -> Self {
        let classes = slots
            .iter()
            .map(|s| match s {
                InputSlot::Token(_) => TokenClass::Text,
                InputSlot::Latent(_) => TokenClass::Vision,
            })
            .collect();
        Self { slots, classes }
    }
}

/// Log norms `[layer][position]` for one sequence.
fn sequence_log_norms(params: &ModelParams, seq: &LabeledSequence) -> Result<Vec<Vec<f64>>> {
    ensure_dim("profile_norms labels", seq.slots.len(), seq.classes.len())?;
    let trace = forward_trace(params, &seq.slots)?;
    (0..=params.config.n_layers)
        .map(|l| {
            trace
                .block_states(l)
                .iter()
                .map(|x| log_l2(x).map_err(|_| Error::ZeroNorm("residual state")))
                .collect()
        })
        .collect()
}

/// Sequences are processed in parallel on the current rayon pool; the merge
/// runs in input order, so the result does not depend on the worker count.
pub fn profile_norms(params: &ModelParams, batch: &[LabeledSequence]) -> Result<NormProfile> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_seq: Vec<Vec<Vec<f64>>> = batch
        .par_iter()
        .map(|s| sequence_log_norms(params, s))
        .collect::<Result<_>>()?;

    let layers = params.config.n_layers + 1;
    let mut cells = Vec::new();
    for layer in 0..layers {
        for class in [TokenClass::Text, TokenClass::Vision] {
            let values: Vec<f64> = batch
                .iter()
                .zip(&per_seq)
                .flat_map(|(seq, norms)| {
                    seq.classes
                        .iter()
                        .zip(&norms[layer])
                        .filter(move |(c, _)| **c == class)
                        .map(|(_, v)| *v)
                })
                .collect();
            if values.is_empty() {
                continue;
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            cells.push(NormCell {
                layer,
                class,
                mean_log_norm: mean,
                std_log_norm: var.sqrt(),
                count: values.len(),
            });
        }
    }
    Ok(NormProfile {
        n_layers: params.config.n_layers,
        cells,
    })
}

/// Geometric-mean norm ratio `exp(mean_a − mean_b)` between two cells.
pub fn norm_ratio(
    profile: &NormProfile,
    layer_a: usize,
    class_a: TokenClass,
    layer_b: usize,
    class_b: TokenClass,
) -> Result<f64> {
    let missing = |l: usize, c: TokenClass| Error::InvalidArgument(format!("no samples for layer {l}, class {}", c.as_str()));
    let a = profile.cell(layer_a, class_a).ok_or_else(|| missing(layer_a, class_a))?;
    let b = profile.cell(layer_b, class_b).ok_or_else(|| missing(layer_b, class_b))?;
    Ok((a.mean_log_norm - b.mean_log_norm).exp())
}

/// Running average of reference latent norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub mean: f64,
    pub decay: f64,
    pub count: u64,
}

fn check_positive(x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("norm must be positive and finite, got {x}")))
    }
}

/// Starts the average at the mean of the query's vision-embedding norms.
pub fn ema_init(norms: &[f64], decay: f64) -> Result<EmaState> {
    if norms.is_empty() {
        return Err(Error::InvalidArgument("no reference norms".into()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1]")));
    }
    for &n in norms {
        check_positive(n)?;
    }
    Ok(EmaState {
        mean: norms.iter().sum::<f64>() / norms.len() as f64,
        decay,
        count: norms.len() as u64,
    })
}

impl EmaState {
    /// `n̄ ← β·n̄ + (1 − β)·observed`.
    pub fn update(&mut self, observed: f64) -> Result<()> {
        check_positive(observed)?;
        self.mean = self.decay * self.mean + (1.0 - self.decay) * observed;
        self.count += 1;
        Ok(())
    }

    /// `n̄ · v / ‖v‖`.
    ///
    /// The unit direction is snapped to a 2⁻²⁶ grid before the final scaling,
    /// so inputs that differ only by a positive factor (and the rounding that
    /// comes with it) map to bitwise-identical outputs.
    pub fn rescale(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = l2(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm("ema_rescale input"));
        }
        let unit: Vec<f64> = v
            .iter()
            .map(|x| (x / n * DIRECTION_GRID).round() / DIRECTION_GRID)
            .collect();
        let s = self.mean / l2(&unit);
        Ok(unit.iter().map(|x| x * s).collect())
    }
}

pub fn ema_update(state: &mut EmaState, observed: f64) -> Result<()> {
    state.update(observed)
}

pub fn ema_rescale(state: &EmaState, v: &[f64]) -> Result<Vec<f64>> {
    state.rescale(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{dot, Rng};

    fn config(layers: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: layers,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            latent_k: 4,
            adapter_width: 4,
            max_seq_len: 32,
            rms_eps: 1e-6,
            rope_base: 10_000.0,
            init_seed: 11,
        }
    }

    fn batch(rng: &mut Rng) -> Vec<LabeledSequence> {
        (0..4)
            .map(|_| {
                let slots = (0..10)
                    .map(|i| {
                        if i < 3 {
                            InputSlot::Latent((0..16).map(|_| 3.0 * rng.normal()).collect())
                        } else {
                            InputSlot::Token(9 + rng.below(11) as u32)
                        }
                    })
                    .collect();
                LabeledSequence::from_slots(slots)
            })
            .collect()
    }

    #[test]
    fn zero_sublayers_keep_input_profile() {
        let mut p = ModelParams::init(config(3)).unwrap();
        for b in &mut p.blocks {
            b.wo = crate::numerics::Mat::zeros(16, 16);
            b.w_down = crate::numerics::Mat::zeros(16, 32);
        }
        let prof = profile_norms(&p, &batch(&mut Rng::new(1))).unwrap();
        for class in [TokenClass::Text, TokenClass::Vision] {
            for l in 0..=3 {
                assert_eq!(prof.cell(l, class).unwrap(), &NormCell { layer: l, ..prof.cell(0, class).unwrap().clone() });
            }
            assert_eq!(norm_ratio(&prof, 3, class, 0, class).unwrap(), 1.0);
        }
    }

    #[test]
    fn input_row_independent_of_depth() {
        let b = batch(&mut Rng::new(2));
        let p1 = profile_norms(&ModelParams::init(config(1)).unwrap(), &b).unwrap();
        let p4 = profile_norms(&ModelParams::init(config(4)).unwrap(), &b).unwrap();
        assert_eq!(p1.cell(0, TokenClass::Vision), p4.cell(0, TokenClass::Vision));
        // token embeddings come from an identically seeded table
        assert_eq!(p1.cell(0, TokenClass::Text), p4.cell(0, TokenClass::Text));
    }

    #[test]
    fn ratio_and_csv() {
        let p = ModelParams::init(config(2)).unwrap();
        let prof = profile_norms(&p, &batch(&mut Rng::new(3))).unwrap();
        assert_eq!(norm_ratio(&prof, 1, TokenClass::Text, 1, TokenClass::Text).unwrap(), 1.0);
        assert!(norm_ratio(&prof, 7, TokenClass::Text, 0, TokenClass::Text).is_err());
        let mut buf = Vec::new();
        prof.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,class,mean_log_norm,std_log_norm,count\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert!(prof.cells.iter().all(|c| c.count > 0 && c.std_log_norm >= 0.0));
    }

    #[test]
    fn profile_rejects_bad_input() {
        let p = ModelParams::init(config(1)).unwrap();
        assert!(profile_norms(&p, &[]).is_err());
        let mut b = batch(&mut Rng::new(4));
        b[0].classes.pop();
        assert!(profile_norms(&p, &b).is_err());
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_init(&[50.5], 0.9).unwrap().mean, 50.5);
        assert_eq!(ema_init(&[1.0, 1.0, 1.0], 0.9).unwrap().mean, 1.0);
        assert_eq!(ema_init(&[2.0, 4.0], 0.9).unwrap().mean, 3.0);
        assert!(ema_init(&[], 0.9).is_err());
        assert!(ema_init(&[1.0, 0.0], 0.9).is_err());

        let mut s = ema_init(&[10.0], 0.9).unwrap();
        ema_update(&mut s, 20.0).unwrap();
        assert!((s.mean - 11.0).abs() < 1e-12);
        assert_eq!(s.count, 2);
        let mut frozen = ema_init(&[10.0], 1.0).unwrap();
        frozen.update(99.0).unwrap();
        assert_eq!(frozen.mean, 10.0);
        let mut follow = ema_init(&[10.0], 0.0).unwrap();
        follow.update(99.0).unwrap();
        assert_eq!(follow.mean, 99.0);
        assert!(s.update(-1.0).is_err());
    }

    #[test]
    fn rescale_contract() {
        let s = ema_init(&[50.5], 0.9).unwrap();
        let mut rng = Rng::new(5);
        let v: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let scale = 441.4 / l2(&v);
        let v: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let out = ema_rescale(&s, &v).unwrap();
        assert!((l2(&out) - 50.5).abs() < 1e-10);
        let cos = dot(&out, &v) / (l2(&out) * l2(&v));
        assert!((cos - 1.0).abs() < 1e-12);

        let v10: Vec<f64> = v.iter().map(|x| 10.0 * x).collect();
        assert_eq!(ema_rescale(&s, &v10).unwrap(), out);
        for _ in 0..200 {
            let w: Vec<f64> = (0..64).map(|_| 5.0 * rng.normal()).collect();
            let w10: Vec<f64> = w.iter().map(|x| 10.0 * x).collect();
            assert_eq!(ema_rescale(&s, &w).unwrap(), ema_rescale(&s, &w10).unwrap());
        }

        let exact = ema_init(&[l2(&v)], 0.9).unwrap();
        // Direction snapping moves each coordinate by at most half a grid step.
        let same = ema_rescale(&exact, &v).unwrap();
        for (a, b) in same.iter().zip(&v) {
            assert!((a - b).abs() < 2e-8 * l2(&v));
        }
        assert!(ema_rescale(&s, &[0.0; 4]).is_err());
    }
}
