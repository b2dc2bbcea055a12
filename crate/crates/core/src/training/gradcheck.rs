//! Central-difference verification of the analytic gradient.
//!
//! Checking every scalar of a desk-scale model is too slow, so each tensor
//! contributes a seeded sample of entries plus its largest-gradient entry.

use serde::{Deserialize, Serialize};

use super::sequence::TrainingSequence;
use super::step::{evaluate, loss_and_grad};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};
use crate::numerics::Rng;
use crate::pca::PcaBasis;

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub fd_step: f64,
    pub samples_per_tensor: usize,
    pub lambda_latent: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            samples_per_tensor: 6,
            lambda_latent: 1.0,
            seed: 12345,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub group: ParamGroup,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn group_max(&self, group: ParamGroup) -> Option<f64> {
        self.tensors
            .iter()
            .filter(|t| t.group == group)
            .map(|t| t.max_rel_error)
            .reduce(f64::max)
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

fn mean_loss(params: &ModelParams, basis: &PcaBasis, seqs: &[TrainingSequence], lambda: f64) -> Result<f64> {
    let mut sum = 0.0;
    for s in seqs {
        sum += evaluate(params, basis, s, lambda)?.total;
    }
    Ok(sum / seqs.len() as f64)
}

/// Analytic gradient of the mean total loss over `seqs`.
pub fn mean_gradient(
    params: &ModelParams,
    basis: &PcaBasis,
    seqs: &[TrainingSequence],
    lambda: f64,
) -> Result<ModelParams> {
    let mut acc = params.zeros_like();
    for s in seqs {
        let (_, g) = loss_and_grad(params, basis, s, lambda)?;
        acc.add_scaled(1.0 / seqs.len() as f64, &g);
    }
    Ok(acc)
}

/// Compares `analytic` with central differences of the mean total loss.
pub fn compare_gradient(
    params: &ModelParams,
    basis: &PcaBasis,
    seqs: &[TrainingSequence],
    analytic: &ModelParams,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("grad check needs at least one example".into()));
    }
    let h = config.fd_step;
    let mut rng = Rng::new(config.seed);
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    for (ti, t) in analytic.tensors().iter().enumerate() {
        let len = t.data.len();
        let mut idx: Vec<usize> = (0..config.samples_per_tensor.min(len)).map(|_| rng.below(len)).collect();
        let argmax = (0..len)
            .max_by(|&a, &b| t.data[a].abs().total_cmp(&t.data[b].abs()))
            .unwrap_or(0);
        idx.push(argmax);
        idx.sort_unstable();
        idx.dedup();

        let mut worst = TensorCheck {
            name: t.name.clone(),
            group: t.group,
            entries: idx.len(),
            max_rel_error: 0.0,
            worst_index: idx[0],
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &idx {
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + h;
            let plus = mean_loss(&probe, basis, seqs, config.lambda_latent)?;
            probe.tensors_mut()[ti].data[i] = orig - h;
            let minus = mean_loss(&probe, basis, seqs, config.lambda_latent)?;
            probe.tensors_mut()[ti].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = t.data[i];
            let err = rel_error(a, numeric);
            if err >= worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        tensors.push(worst);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_error })
}

pub fn grad_check(
    params: &ModelParams,
    basis: &PcaBasis,
    seqs: &[TrainingSequence],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = mean_gradient(params, basis, seqs, config.lambda_latent)?;
    compare_gradient(params, basis, seqs, &analytic, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use crate::training::step::tests::setup;

    fn seqs(task: &crate::data::SyntheticTask, n: usize) -> Vec<TrainingSequence> {
        let mut rng = Rng::new(21);
        (0..n)
            .map(|i| TrainingSequence::from_example(&task.sample(&mut rng, i).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn small_model_passes() {
        let (task, basis, params) = setup(8, 2);
        let s = seqs(&task, 2);
        let report = grad_check(&params, &basis, &s, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:#?}");
        assert!(report.group_max(ParamGroup::LatentHead).is_some());
    }

    #[test]
    fn zero_sublayer_model_passes() {
        let (task, basis, mut params) = setup(8, 2);
        for b in &mut params.blocks {
            b.wo = Mat::zeros(8, 8);
            b.w_down = Mat::zeros(8, 16);
        }
        let s = seqs(&task, 2);
        let report = grad_check(&params, &basis, &s, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:#?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (task, basis, params) = setup(8, 1);
        let s = seqs(&task, 2);
        let mut g = mean_gradient(&params, &basis, &s, 1.0).unwrap();
        for v in g.lm_head.as_mut_slice() {
            *v *= 1.1;
        }
        let report = compare_gradient(&params, &basis, &s, &g, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error > 1e-2);
    }
}
