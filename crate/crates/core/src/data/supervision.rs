//! Difficulty-aware routing: estimate how often a base model already answers
//! a query, then keep latent supervision only for queries it does not solve.

use super::example::{Accuracy, SupervisionMode, TrainingExample};
use super::format::ResponseSegments;
use crate::error::{Error, Result};

/// Default difficulty threshold: only never-solved queries get latent supervision.
pub const DEFAULT_TAU: f64 = 0.0;
/// Default number of base-model attempts per query.
pub const DEFAULT_ATTEMPTS: u32 = 8;

/// Answers one attempt at a query. Must be deterministic in
/// `(example, attempt, seed)`.
pub trait AnswerSampler {
    fn attempt(&self, example: &TrainingExample, attempt: u32, seed: u64) -> std::result::Result<bool, String>;
}

impl<F> AnswerSampler for F
where
    F: Fn(&TrainingExample, u32, u64) -> std::result::Result<bool, String>,
{
    fn attempt(&self, example: &TrainingExample, attempt: u32, seed: u64) -> std::result::Result<bool, String> {
        self(example, attempt, seed)
    }
}

pub fn estimate_accuracy(
    sampler: &impl AnswerSampler,
    example: &TrainingExample,
    attempts: u32,
    seed: u64,
) -> Result<Accuracy> {
    if attempts == 0 {
        return Err(Error::InvalidArgument("need at least one attempt".into()));
    }
    let mut correct = 0;
    for attempt in 0..attempts {
        let ok = sampler
            .attempt(example, attempt, seed)
            .map_err(|message| Error::Sampler { attempt, message })?;
        correct += u32::from(ok);
    }
    Ok(Accuracy::new(correct, attempts))
}

/// Text-only when `â > τ`, latent when `â ≤ τ`.
pub fn assign_supervision(accuracy: Accuracy, tau: f64) -> SupervisionMode {
    // Compare exactly: â = m/N > τ  ⇔  m > τ·N.
    if f64::from(accuracy.correct) > tau * f64::from(accuracy.attempts) {
        SupervisionMode::TextOnly
    } else {
        SupervisionMode::Latent
    }
}

/// Removes the latent span, its targets and the parser section, leaving a
/// language-modeling-only example. The flag is `false` when the input was
/// already stripped (the example is returned unchanged apart from the mode).
pub fn strip_latent(example: &TrainingExample) -> (TrainingExample, bool) {
    let s = &example.segments;
    let had_latent = s.latent.is_some() || !s.parser_text.is_empty();
    let mut think = s.think_prefix.clone();
    think.extend_from_slice(&s.think_suffix);
    let stripped = TrainingExample {
        segments: ResponseSegments {
            think_prefix: think,
            latent: None,
            parser_text: Vec::new(),
            think_suffix: Vec::new(),
            answer: s.answer.clone(),
        },
        mode: SupervisionMode::TextOnly,
        ..example.clone()
    };
    (stripped, had_latent)
}

/// Applies the routing rule and strips text-only examples.
pub fn route(example: TrainingExample, tau: f64) -> TrainingExample {
    match assign_supervision(example.accuracy, tau) {
        SupervisionMode::Latent => TrainingExample {
            mode: SupervisionMode::Latent,
            ..example
        },
        SupervisionMode::TextOnly => strip_latent(&example).0,
    }
}
