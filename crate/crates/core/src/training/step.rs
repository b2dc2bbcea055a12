//! Loss and gradient of `ℒ = ℒ_LM + λ·ℒ_latent` for one example.

use super::loss::{log_sum_exp, LossBreakdown};
use super::sequence::TrainingSequence;
use crate::data::TrainingExample;
use crate::error::{ensure_dim, Error, Result};
use crate::model::{
    latent_head_backward, latent_head_forward, lm_head_backward, InputSlot, ModelParams, Tape,
};
use crate::numerics::Rng;
use crate::pca::PcaBasis;

fn check_basis(params: &ModelParams, basis: &PcaBasis) -> Result<()> {
    ensure_dim("basis dimension", params.config.d_model, basis.dim())?;
    ensure_dim("basis rank", params.config.latent_k, basis.k())
}

/// Per-position heads on a finished tape. With `grads`, also accumulates the
/// gradient of the total loss into it.
fn heads(
    params: &ModelParams,
    basis: &PcaBasis,
    seq: &TrainingSequence,
    tape: &Tape,
    lambda: f64,
    grads: Option<&mut ModelParams>,
) -> Result<LossBreakdown> {
    let d = params.config.d_model;
    let n_lm = seq.lm_targets.len();
    let n_lat = seq.latent_targets.len();
    if n_lm == 0 {
        return Err(Error::InvalidArgument("sequence has no token targets".into()));
    }
    let mut d_normed = grads.as_ref().map(|_| vec![0.0; tape.len() * d]);
    let mut grads = grads;

    let mut lm = 0.0;
    for &(pos, target) in &seq.lm_targets {
        let h = tape.normed(pos);
        let mut logits = params.lm_head.matvec(h)?;
        let lse = log_sum_exp(&logits);
        lm += lse - logits[target as usize];
        if let (Some(g), Some(dn)) = (grads.as_deref_mut(), d_normed.as_mut()) {
            for l in logits.iter_mut() {
                *l = (*l - lse).exp() / n_lm as f64;
            }
            logits[target as usize] -= 1.0 / n_lm as f64;
            lm_head_backward(&params.lm_head, h, &logits, &mut g.lm_head, &mut dn[pos * d..(pos + 1) * d]);
        }
    }
    lm /= n_lm as f64;

    let mut latent = 0.0;
    if n_lat > 0 {
        check_basis(params, basis)?;
        let head = params.latent_head.as_ref().ok_or(Error::LatentHeadMissing)?;
        let p = basis.components();
        for (pos, target) in &seq.latent_targets {
            let h = tape.normed(*pos);
            let acts = latent_head_forward(head, h);
            let v_hat = basis.reconstruct(&acts.coeffs)?;
            let r: Vec<f64> = v_hat.iter().zip(target).map(|(a, b)| a - b).collect();
            latent += r.iter().map(|x| x * x).sum::<f64>();
            if lambda == 0.0 {
                continue;
            }
            if let (Some(g), Some(dn)) = (grads.as_deref_mut(), d_normed.as_mut()) {
                let scale = 2.0 * lambda / n_lat as f64;
                let d_c: Vec<f64> = p.matvec_t(&r)?.into_iter().map(|x| x * scale).collect();
                let gh = g.latent_head.as_mut().expect("gradient buffer mirrors params");
                let dh = latent_head_backward(head, h, &acts, &d_c, gh);
                crate::numerics::axpy(1.0, &dh, &mut dn[pos * d..(pos + 1) * d]);
            }
        }
        latent /= n_lat as f64;
    }

    if let (Some(g), Some(dn)) = (grads, d_normed) {
        tape.backward(params, &dn, g);
    }
    Ok(LossBreakdown::new(lm, latent, lambda, n_lm, n_lat))
}

pub fn evaluate(params: &ModelParams, basis: &PcaBasis, seq: &TrainingSequence, lambda: f64) -> Result<LossBreakdown> {
    let tape = Tape::forward(params, &seq.slots)?;
    heads(params, basis, seq, &tape, lambda, None)
}

/// Loss and full gradient for a prepared sequence.
pub fn loss_and_grad(
    params: &ModelParams,
    basis: &PcaBasis,
    seq: &TrainingSequence,
    lambda: f64,
) -> Result<(LossBreakdown, ModelParams)> {
    let tape = Tape::forward(params, &seq.slots)?;
    let mut grads = params.zeros_like();
    let loss = heads(params, basis, seq, &tape, lambda, Some(&mut grads))?;
    Ok((loss, grads))
}

/// One pass with every pad fed its auxiliary target.
pub fn teacher_forced_step(
    params: &ModelParams,
    basis: &PcaBasis,
    example: &TrainingExample,
    lambda: f64,
) -> Result<(LossBreakdown, ModelParams)> {
    let seq = TrainingSequence::from_example(example)?;
    loss_and_grad(params, basis, &seq, lambda)
}

#[derive(Debug, Clone)]
pub struct ScheduledOutput {
    pub loss: LossBreakdown,
    pub grads: ModelParams,
    /// Pads whose input was replaced by the model's own prediction.
    pub replaced: usize,
    pub pads: usize,
}

/// Replaces each pad input, with probability `mix`, by the reconstruction the
/// model predicts for it in a teacher-forced first pass. Losses and gradients
/// come from the second pass; replacements are constants.
pub fn scheduled_sampling_sequence(
    params: &ModelParams,
    basis: &PcaBasis,
    seq: &TrainingSequence,
    mix: f64,
    rng: &mut Rng,
) -> Result<(TrainingSequence, usize)> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::InvalidArgument(format!("mix probability {mix} outside [0, 1]")));
    }
    let mut second = seq.clone();
    if mix == 0.0 || seq.pad_slots.is_empty() {
        return Ok((second, 0));
    }
    check_basis(params, basis)?;
    let head = params.latent_head.as_ref().ok_or(Error::LatentHeadMissing)?;
    let tape = Tape::forward(params, &seq.slots)?;
    let mut replaced = 0;
    for &slot in &seq.pad_slots {
        if rng.bernoulli(mix) {
            let coeffs = latent_head_forward(head, tape.normed(slot - 1)).coeffs;
            second.slots[slot] = InputSlot::Latent(basis.reconstruct(&coeffs)?);
            replaced += 1;
        }
    }
    Ok((second, replaced))
}

pub fn scheduled_sampling_step(
    params: &ModelParams,
    basis: &PcaBasis,
    example: &TrainingExample,
    lambda: f64,
    mix: f64,
    rng: &mut Rng,
) -> Result<ScheduledOutput> {
    let seq = TrainingSequence::from_example(example)?;
    let (second, replaced) = scheduled_sampling_sequence(params, basis, &seq, mix, rng)?;
    let (loss, grads) = loss_and_grad(params, basis, &second, lambda)?;
    Ok(ScheduledOutput {
        loss,
        grads,
        replaced,
        pads: seq.pad_slots.len(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::synthetic::{SyntheticConfig, SyntheticTask};
    use crate::data::strip_latent;
    use crate::model::ModelConfig;

    pub(crate) fn setup(d: usize, layers: usize) -> (SyntheticTask, PcaBasis, ModelParams) {
        let task = SyntheticTask::new(SyntheticConfig {
            d_model: d,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut rng = Rng::new(3);
        let samples: Vec<Vec<f64>> = (0..64)
            .flat_map(|i| task.sample(&mut rng, i).unwrap().latent_targets().unwrap().to_vec())
            .collect();
        let basis = PcaBasis::fit(&samples, 0.95).unwrap();
        let config = ModelConfig {
            d_model: d,
            n_layers: layers,
            n_heads: 2,
            d_ff: 2 * d,
            vocab_size: task.vocab_size(),
            latent_k: basis.k(),
            adapter_width: basis.k(),
            max_seq_len: 32,
            rms_eps: 1e-6,
            rope_base: 10_000.0,
            init_seed: 5,
        };
        let mut params = ModelParams::init(config).unwrap();
        params.init_latent_head(&basis, &mut rng, 0.1).unwrap();
        (task, basis, params)
    }

    #[test]
    fn text_only_total_is_lm() {
        let (task, basis, params) = setup(8, 1);
        let ex = task.sample(&mut Rng::new(1), 0).unwrap();
        let (s, _) = strip_latent(&ex);
        let (loss, grads) = teacher_forced_step(&params, &basis, &s, 1.0).unwrap();
        assert_eq!(loss.latent_positions, 0);
        assert_eq!(loss.total, loss.lm_loss);
        assert!(grads.latent_head.unwrap().out.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_lambda_leaves_head_untouched() {
        let (task, basis, params) = setup(8, 1);
        let ex = task.sample(&mut Rng::new(1), 0).unwrap();
        let (loss, grads) = teacher_forced_step(&params, &basis, &ex, 0.0).unwrap();
        assert!(loss.latent_loss > 0.0);
        assert_eq!(loss.total, loss.lm_loss);
        let head = grads.latent_head.unwrap();
        for m in [&head.proj, &head.gate, &head.up, &head.out] {
            assert!(m.as_slice().iter().all(|&g| g == 0.0));
        }
        let (_, with) = teacher_forced_step(&params, &basis, &ex, 1.0).unwrap();
        assert!(with.latent_head.unwrap().out.as_slice().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn teacher_forcing_lm_ignores_head() {
        let (task, basis, mut params) = setup(8, 2);
        let ex = task.sample(&mut Rng::new(2), 0).unwrap();
        let (a, _) = teacher_forced_step(&params, &basis, &ex, 1.0).unwrap();
        let head = params.latent_head.as_mut().unwrap();
        head.proj = crate::numerics::Mat::zeros(head.proj.rows(), head.proj.cols());
        head.out = crate::numerics::Mat::zeros(head.out.rows(), head.out.cols());
        let (b, _) = teacher_forced_step(&params, &basis, &ex, 1.0).unwrap();
        assert_eq!(a.lm_loss, b.lm_loss);
        assert_ne!(a.latent_loss, b.latent_loss);
    }

    #[test]
    fn latent_loss_needs_head() {
        let (task, basis, mut params) = setup(8, 1);
        params.latent_head = None;
        let ex = task.sample(&mut Rng::new(2), 0).unwrap();
        assert!(matches!(
            teacher_forced_step(&params, &basis, &ex, 1.0),
            Err(Error::LatentHeadMissing)
        ));
    }

    #[test]
    fn scheduled_sampling_extremes() {
        let (task, basis, params) = setup(8, 2);
        let ex = task.sample(&mut Rng::new(4), 0).unwrap();
        let (tf, tf_grads) = teacher_forced_step(&params, &basis, &ex, 1.0).unwrap();
        let s0 = scheduled_sampling_step(&params, &basis, &ex, 1.0, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(s0.loss, tf);
        assert_eq!(s0.grads, tf_grads);
        assert_eq!(s0.replaced, 0);

        let seq = TrainingSequence::from_example(&ex).unwrap();
        let (second, replaced) = scheduled_sampling_sequence(&params, &basis, &seq, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(replaced, seq.pad_slots.len());
        for &slot in &seq.pad_slots {
            match &second.slots[slot] {
                InputSlot::Latent(v) => assert!(basis.off_subspace_norm(v).unwrap() < 1e-8),
                _ => panic!("pad slot lost its latent"),
            }
        }
        // targets are unchanged by replacement
        assert_eq!(second.latent_targets, seq.latent_targets);
    }

    #[test]
    fn scheduled_sampling_rate() {
        let (task, basis, params) = setup(8, 1);
        let mut rng = Rng::new(8);
        let mut replaced = 0;
        let mut pads = 0;
        let mut seqs = Vec::new();
        for i in 0..50 {
            seqs.push(TrainingSequence::from_example(&task.sample(&mut rng, i).unwrap()).unwrap());
        }
        while pads < 10_000 {
            for seq in &seqs {
                let (_, r) = scheduled_sampling_sequence(&params, &basis, seq, 0.5, &mut rng).unwrap();
                replaced += r;
                pads += seq.pad_slots.len();
            }
        }
        let frac = replaced as f64 / pads as f64;
        let sigma = (0.25 / pads as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sigma, "fraction {frac}");
    }
}
