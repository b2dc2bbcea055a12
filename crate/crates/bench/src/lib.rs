//! Fixtures shared by the criterion benches.

use latentloop::data::{SupervisionMode, SyntheticConfig, SyntheticTask, TrainingExample};
use latentloop::experiment::{fit_latent_basis, init_model, synthetic_train, DEFAULT_VARIANCE_TARGET};
use latentloop::training::TrainingSequence;
use latentloop::{Mat, ModelParams, PcaBasis, Rng};

pub struct DeskFixture {
    pub train: Vec<TrainingExample>,
    pub basis: PcaBasis,
    pub params: ModelParams,
    pub sequence: TrainingSequence,
}

/// Desk-scale model and one latent-supervised training sequence.
pub fn desk_fixture() -> DeskFixture {
    let cfg = SyntheticConfig::default();
    let train = synthetic_train(&cfg, 256, 1).expect("synthetic data");
    let basis = fit_latent_basis(&train, DEFAULT_VARIANCE_TARGET).expect("basis");
    let vocab = SyntheticTask::new(cfg).expect("task").vocab_size();
    let params = init_model(vocab, &basis, 1).expect("model");
    let example = train
        .iter()
        .find(|e| e.mode == SupervisionMode::Latent)
        .expect("a latent example");
    let sequence = TrainingSequence::from_example(example).expect("sequence");
    DeskFixture {
        train,
        basis,
        params,
        sequence,
    }
}

/// `n` Gaussian rows of width `d` with a decaying spectrum.
pub fn corpus(n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(3);
    (0..n)
        .map(|_| (0..d).map(|j| rng.normal() * 0.9f64.powi(j as i32)).collect())
        .collect()
}

/// Sample covariance of [`corpus`] rows, symmetric by construction.
pub fn covariance(rows: &[Vec<f64>]) -> Mat {
    let d = rows[0].len();
    let n = rows.len() as f64;
    Mat::from_fn(d, d, |i, j| rows.iter().map(|r| r[i] * r[j]).sum::<f64>() / n)
}
