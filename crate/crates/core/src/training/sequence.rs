use crate::data::tokens::{TokenId, LATENT_PAD};
use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::model::InputSlot;

/// A training example laid out as model inputs with per-position targets.
///
/// Position `i` is supervised on the slot at `i + 1`: a token target when
/// that slot is a response token, a latent target when it is a pad. Prompt
/// slots are never targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub slots: Vec<InputSlot>,
    pub prompt_len: usize,
    /// `(position, next token)` pairs for the language-modeling loss.
    pub lm_targets: Vec<(usize, TokenId)>,
    /// `(position, target vector)` pairs for the latent loss.
    pub latent_targets: Vec<(usize, Vec<f64>)>,
    /// Slot indices holding pad inputs, in order.
    pub pad_slots: Vec<usize>,
}

impl TrainingSequence {
    /// Pads are fed their targets (teacher forcing).
    pub fn from_example(example: &TrainingExample) -> Result<Self> {
        let response = example.response_tokens()?;
        let targets = example.latent_targets();
        let budget = example.segments.budget();
        if budget > 0 && targets.is_none() {
            return Err(Error::InvalidArgument(format!(
                "example {} has a latent span without targets",
                example.metadata.source_id
            )));
        }
        let mut slots = example.prompt_slots();
        let prompt_len = slots.len();
        let mut pad_slots = Vec::with_capacity(budget);
        let mut next_target = 0;
        for &t in &response {
            if t == LATENT_PAD {
                let v = targets
                    .and_then(|ts| ts.get(next_target))
                    .ok_or_else(|| Error::InvalidArgument("more pads than targets".into()))?;
                next_target += 1;
                pad_slots.push(slots.len());
                slots.push(InputSlot::Latent(v.clone()));
            } else {
                slots.push(InputSlot::Token(t));
            }
        }
        if prompt_len == 0 {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let mut lm_targets = Vec::new();
        let mut latent_targets = Vec::new();
        for (next, slot) in slots.iter().enumerate().skip(prompt_len) {
            match slot {
                InputSlot::Token(t) => lm_targets.push((next - 1, *t)),
                InputSlot::Latent(v) => latent_targets.push((next - 1, v.clone())),
            }
        }
        Ok(Self {
            slots,
            prompt_len,
            lm_targets,
            latent_targets,
            pad_slots,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{SyntheticConfig, SyntheticTask};
    use crate::data::tokens::*;
    use crate::data::{route, strip_latent};
    use crate::numerics::Rng;

    #[test]
    fn layout_of_latent_example() {
        let task = SyntheticTask::new(SyntheticConfig::default()).unwrap();
        let ex = task.sample(&mut Rng::new(1), 0).unwrap();
        let seq = TrainingSequence::from_example(&ex).unwrap();
        let resp = ex.response_tokens().unwrap();
        assert_eq!(seq.len(), seq.prompt_len + resp.len());
        assert_eq!(seq.prompt_len, 4);
        assert_eq!(seq.latent_targets.len(), 4);
        assert_eq!(seq.lm_targets.len() + seq.latent_targets.len(), resp.len());
        // the latent_start position predicts the first pad
        let start = seq.slots.iter().position(|s| *s == InputSlot::Token(LATENT_START)).unwrap();
        assert_eq!(seq.latent_targets[0].0, start);
        assert_eq!(seq.pad_slots, (start + 1..start + 5).collect::<Vec<_>>());
        assert_eq!(&seq.latent_targets[0].1, &ex.latent_targets().unwrap()[0]);
        // first response token is predicted from the last prompt slot
        assert_eq!(seq.lm_targets[0], (seq.prompt_len - 1, THINK_START));
    }

    #[test]
    fn text_only_has_no_latent_targets() {
        let task = SyntheticTask::new(SyntheticConfig::default()).unwrap();
        let ex = task.sample(&mut Rng::new(1), 0).unwrap();
        let (s, _) = strip_latent(&ex);
        let seq = TrainingSequence::from_example(&s).unwrap();
        assert!(seq.latent_targets.is_empty());
        assert!(seq.pad_slots.is_empty());
        let routed = route(ex, 0.0);
        assert!(TrainingSequence::from_example(&routed).is_ok());
    }
}
