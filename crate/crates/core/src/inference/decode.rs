//! Greedy interleaved decoding: text tokens from the language head, latent
//! spans from the latent head fed back through the PCA reconstruction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::intervention::{apply_intervention, InterventionMode};
use super::transcript::{Event, StopReason, Transcript};
use crate::data::tokens::{TokenId, ANSWER_END, LATENT_END, LATENT_PAD, LATENT_START, THINK_START};
use crate::data::{is_square_budget, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{forward_prefix, latent_coeffs, lm_logits, InputSlot, KvCache, ModelParams};
use crate::norms::{ema_init, EmaState};
use crate::numerics::{l2, Rng};
use crate::pca::PcaBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaOptions {
    pub decay: f64,
    /// Used when the prompt has no latent slots.
    pub reference_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub budget: usize,
    pub mode: InterventionMode,
    pub ema: Option<EmaOptions>,
    /// Upper bound on generated text tokens.
    pub max_tokens: usize,
    /// Emit `<|latent_start|>` as the first generated token.
    pub force_span: bool,
}

impl DecodeOptions {
    pub fn new(budget: usize, mode: InterventionMode) -> Self {
        Self {
            budget,
            mode,
            ema: None,
            max_tokens: 32,
            force_span: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let zero = self.mode == InterventionMode::ZeroLatent;
        if !(is_square_budget(self.budget) || (self.budget == 0 && zero)) {
            return Err(Error::BudgetNotSquare(self.budget));
        }
        if let Some(e) = &self.ema {
            if !(0.0..=1.0).contains(&e.decay) {
                return Err(Error::InvalidArgument(format!("EMA decay {} outside [0, 1]", e.decay)));
            }
        }
        Ok(())
    }
}

fn argmax_masked(logits: &[f64], banned: &[TokenId]) -> TokenId {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if banned.contains(&(i as TokenId)) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i as TokenId)
}

fn ema_state(prompt: &[InputSlot], opts: &EmaOptions) -> Result<EmaState> {
    let norms: Vec<f64> = prompt
        .iter()
        .filter_map(|s| match s {
            InputSlot::Latent(v) => Some(l2(v)),
            InputSlot::Token(_) => None,
        })
        .collect();
    if norms.is_empty() {
        ema_init(&opts.reference_norms, opts.decay)
    } else {
        ema_init(&norms, opts.decay)
    }
}

pub fn decode(
    params: &ModelParams,
    basis: &PcaBasis,
    prompt: &[InputSlot],
    options: &DecodeOptions,
    rng: &mut Rng,
) -> Result<Transcript> {
    options.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let latent_on = options.mode != InterventionMode::ZeroLatent;
    if latent_on {
        crate::error::ensure_dim("basis dimension", params.config.d_model, basis.dim())?;
        crate::error::ensure_dim("basis rank", params.config.latent_k, basis.k())?;
        if params.latent_head.is_none() {
            return Err(Error::LatentHeadMissing);
        }
    }
    let mut ema = match (&options.ema, latent_on) {
        (Some(e), true) => Some(ema_state(prompt, e)?),
        _ => None,
    };
    let banned: &[TokenId] = if latent_on { &[LATENT_PAD] } else { &[LATENT_PAD, LATENT_START] };

    let mut events: Vec<Event> = prompt
        .iter()
        .enumerate()
        .map(|(position, s)| match s {
            InputSlot::Token(token) => Event::PromptToken { position, token: *token },
            InputSlot::Latent(v) => Event::PromptLatent {
                position,
                embedding: v.clone(),
            },
        })
        .collect();
    let mut cache = KvCache::for_model(params);
    let mut h = forward_prefix(params, prompt, &mut cache)?
        .pop()
        .expect("non-empty prompt")
        .normed;

    let mut forced = (options.force_span && latent_on).then_some(LATENT_START);
    let mut generated = 0;
    let stop = loop {
        if generated >= options.max_tokens {
            break StopReason::MaxTokens;
        }
        let (token, was_forced) = match forced.take() {
            Some(t) => (t, true),
            None => (argmax_masked(&lm_logits(params, &h)?, banned), false),
        };
        events.push(Event::Token {
            position: cache.len(),
            token,
            forced: was_forced,
        });
        generated += 1;
        h = forward_prefix(params, &[InputSlot::Token(token)], &mut cache)?
            .pop()
            .expect("one slot")
            .normed;
        if token == ANSWER_END {
            break StopReason::AnswerEnd;
        }
        if token == LATENT_START && latent_on {
            for step in 0..options.budget {
                let coeffs = latent_coeffs(params, &h)?;
                let mut v = apply_intervention(&options.mode, &coeffs, basis, rng)?;
                let mut ema_norm = None;
                if let Some(state) = ema.as_mut() {
                    state.update(l2(&v))?;
                    v = state.rescale(&v)?;
                    ema_norm = Some(state.mean);
                }
                events.push(Event::Latent {
                    position: cache.len(),
                    step,
                    coeffs,
                    injected: v.clone(),
                    mode: options.mode,
                    ema_norm,
                });
                h = forward_prefix(params, &[InputSlot::Latent(v)], &mut cache)?
                    .pop()
                    .expect("one slot")
                    .normed;
            }
            forced = Some(LATENT_END);
        }
    };
    Ok(Transcript { events, stop })
}

/// Query slots plus `<think>` and the think prefix, the point at which a
/// latent-supervised response opens its span.
pub fn span_prompt(example: &TrainingExample) -> Vec<InputSlot> {
    let mut p = example.prompt_slots();
    p.push(InputSlot::Token(THINK_START));
    p.extend(example.segments.think_prefix.iter().map(|&t| InputSlot::Token(t)));
    p
}

/// Decodes every example on a pool of `workers` threads. Example `i` uses
/// `Rng::derive(seed, i)`, so results do not depend on the worker count.
pub fn decode_all(
    params: &ModelParams,
    basis: &PcaBasis,
    examples: &[TrainingExample],
    options: &DecodeOptions,
    seed: u64,
    workers: usize,
) -> Result<Vec<Transcript>> {
    options.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        examples
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let prompt = if options.force_span { span_prompt(ex) } else { ex.prompt_slots() };
                decode(params, basis, &prompt, options, &mut Rng::derive(seed, i as u64))
            })
            .collect()
    })
}

pub fn is_correct(transcript: &Transcript, example: &TrainingExample) -> bool {
    transcript.answer().as_deref() == Some(example.segments.answer.as_slice())
}

/// Exact-match accuracy of decoded answers.
pub fn accuracy(transcripts: &[Transcript], examples: &[TrainingExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let correct = transcripts
        .iter()
        .zip(examples)
        .filter(|(t, e)| is_correct(t, e))
        .count();
    correct as f64 / examples.len() as f64
}
