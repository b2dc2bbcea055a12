use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::intervention::InterventionMode;
use crate::data::tokens::{TokenId, ANSWER_END, ANSWER_START, LATENT_END, LATENT_START};
use crate::error::{Error, Result};
use crate::model::InputSlot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    PromptToken { position: usize, token: TokenId },
    PromptLatent { position: usize, embedding: Vec<f64> },
    Token { position: usize, token: TokenId, forced: bool },
    Latent {
        position: usize,
        /// Index within the span.
        step: usize,
        coeffs: Vec<f64>,
        /// The vector actually injected as the next input slot.
        injected: Vec<f64>,
        mode: InterventionMode,
        ema_norm: Option<f64>,
    },
}

impl Event {
    pub fn position(&self) -> usize {
        match self {
            Event::PromptToken { position, .. }
            | Event::PromptLatent { position, .. }
            | Event::Token { position, .. }
            | Event::Latent { position, .. } => *position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AnswerEnd,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub events: Vec<Event>,
    pub stop: StopReason,
}

impl Transcript {
    pub fn prompt_len(&self) -> usize {
        self.events
            .iter()
            .take_while(|e| matches!(e, Event::PromptToken { .. } | Event::PromptLatent { .. }))
            .count()
    }

    pub fn prompt_slots(&self) -> Vec<InputSlot> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::PromptToken { token, .. } => Some(InputSlot::Token(*token)),
                Event::PromptLatent { embedding, .. } => Some(InputSlot::Latent(embedding.clone())),
                _ => None,
            })
            .collect()
    }

    /// Generated text tokens in order.
    pub fn tokens(&self) -> Vec<TokenId> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Token { token, .. } => Some(*token),
                _ => None,
            })
            .collect()
    }

    pub fn latent_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| matches!(e, Event::Latent { .. }))
    }

    pub fn injected_latents(&self) -> Vec<&[f64]> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Latent { injected, .. } => Some(injected.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Tokens between the last generated `<answer>` and the following
    /// `</answer>` (or the end of the transcript).
    pub fn answer(&self) -> Option<Vec<TokenId>> {
        let toks = self.tokens();
        let start = toks.iter().rposition(|&t| t == ANSWER_START)? + 1;
        let end = toks[start..]
            .iter()
            .position(|&t| t == ANSWER_END)
            .map_or(toks.len(), |i| start + i);
        Some(toks[start..end].to_vec())
    }

    /// Checks event ordering and span structure.
    pub fn validate(&self) -> Result<()> {
        let mut in_span = false;
        let mut prev: Option<usize> = None;
        for e in &self.events {
            let p = e.position();
            if prev.is_some_and(|q| p <= q) {
                return Err(Error::InvalidArgument(format!("event position {p} is not increasing")));
            }
            prev = Some(p);
            match e {
                Event::Token { token, .. } if *token == LATENT_START => in_span = true,
                Event::Token { token, .. } if *token == LATENT_END => in_span = false,
                Event::Latent { .. } if !in_span => {
                    return Err(Error::InvalidArgument(format!("latent event at {p} outside a span")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Event>> {
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}
