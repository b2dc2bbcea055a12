use serde::{Deserialize, Serialize};

use super::example::{SupervisionMode, TrainingExample};
use super::supervision::{assign_supervision, DEFAULT_TAU};
use crate::numerics::l2;

/// Targets with a smaller norm count as degenerate.
pub const MIN_TARGET_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub tau: f64,
    pub parser_min: usize,
    pub parser_max: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            parser_min: 3,
            parser_max: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    DegenerateEmbedding,
    ParserLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Keep,
    /// The base model already solves it: keep, but as a text-only example.
    RouteTextOnly,
    Reject(RejectReason),
}

/// Checks run in order: difficulty routing, target quality, parser length.
pub fn quality_filter(example: &TrainingExample, config: &FilterConfig) -> FilterVerdict {
    if assign_supervision(example.accuracy, config.tau) == SupervisionMode::TextOnly {
        return FilterVerdict::RouteTextOnly;
    }
    let targets = example.latent_targets().unwrap_or(&[]);
    if example.segments.latent.is_none() || targets.is_empty() {
        return FilterVerdict::Reject(RejectReason::DegenerateEmbedding);
    }
    let degenerate = targets
        .iter()
        .any(|v| v.iter().any(|x| !x.is_finite()) || l2(v) < MIN_TARGET_NORM);
    if degenerate {
        return FilterVerdict::Reject(RejectReason::DegenerateEmbedding);
    }
    let n = example.segments.parser_text.len();
    if n < config.parser_min || n > config.parser_max {
        return FilterVerdict::Reject(RejectReason::ParserLength);
    }
    FilterVerdict::Keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::example::{Accuracy, ExampleMetadata};
    use crate::data::format::{LatentSpan, ResponseSegments};
    use crate::data::tokens::RESERVED_TOKENS;

    fn example(targets: Vec<Vec<f64>>, parser: usize, correct: u32) -> TrainingExample {
        let w = RESERVED_TOKENS as u32;
        TrainingExample {
            query_image: vec![],
            query_tokens: vec![w],
            segments: ResponseSegments {
                think_prefix: vec![w],
                latent: Some(LatentSpan {
                    budget: targets.len(),
                    targets: Some(targets),
                }),
                parser_text: vec![w; parser],
                think_suffix: vec![],
                answer: vec![w],
            },
            accuracy: Accuracy::new(correct, 8),
            mode: SupervisionMode::Latent,
            metadata: ExampleMetadata::default(),
        }
    }

    #[test]
    fn verdicts() {
        let cfg = FilterConfig::default();
        let good = vec![vec![1.0, 0.0]; 4];
        assert_eq!(quality_filter(&example(good.clone(), 5, 0), &cfg), FilterVerdict::Keep);
        assert_eq!(quality_filter(&example(good.clone(), 5, 2), &cfg), FilterVerdict::RouteTextOnly);
        assert_eq!(
            quality_filter(&example(good.clone(), 0, 0), &cfg),
            FilterVerdict::Reject(RejectReason::ParserLength)
        );
        assert_eq!(
            quality_filter(&example(good, 513, 0), &cfg),
            FilterVerdict::Reject(RejectReason::ParserLength)
        );
        let mut zero = vec![vec![1.0, 0.0]; 4];
        zero[2] = vec![0.0, 0.0];
        assert_eq!(
            quality_filter(&example(zero, 5, 0), &cfg),
            FilterVerdict::Reject(RejectReason::DegenerateEmbedding)
        );
        let mut nan = vec![vec![1.0, 0.0]; 4];
        nan[0][1] = f64::NAN;
        assert_eq!(
            quality_filter(&example(nan, 5, 0), &cfg),
            FilterVerdict::Reject(RejectReason::DegenerateEmbedding)
        );
    }
}
