//! Response token layout:
//!
//! ```text
//! <think> prefix <|latent_start|> <|latent_pad|>×T <|latent_end|>
//!         <parser> parser_text </parser> suffix </think> <answer> answer </answer>
//! ```
//!
//! Text-only responses drop the latent span and the parser section; their
//! think text is held entirely in `think_prefix`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tokens::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpan {
    /// Number of pad tokens; always a perfect square.
    pub budget: usize,
    /// One target embedding per pad, when latent-supervised.
    pub targets: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseSegments {
    pub think_prefix: Vec<TokenId>,
    pub latent: Option<LatentSpan>,
    pub parser_text: Vec<TokenId>,
    pub think_suffix: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    Expected { expected: &'static str, found: Option<TokenId> },
    UnclosedSpan,
    NestedSpan,
    MissingAnswerEnd,
    TrailingTokens,
    InvalidBudget(usize),
    ReservedInText(TokenId),
    ParserWithoutSpan,
    TargetCount { budget: usize, targets: usize },
}

/// Parse or validation failure, with the token offset where it was found.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct FormatError {
    pub position: usize,
    pub kind: FormatErrorKind,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use FormatErrorKind::*;
        write!(f, "at token {}: ", self.position)?;
        match &self.kind {
            Expected { expected, found: Some(t) } => {
                write!(f, "expected {expected}, found {}", token_name(*t))
            }
            Expected { expected, found: None } => write!(f, "expected {expected}, found end of stream"),
            UnclosedSpan => f.write_str("<|latent_start|> without <|latent_end|>"),
            NestedSpan => f.write_str("nested <|latent_start|>"),
            MissingAnswerEnd => f.write_str("missing </answer>"),
            TrailingTokens => f.write_str("tokens after </answer>"),
            InvalidBudget(t) => write!(f, "latent budget {t} is not a positive perfect square"),
            ReservedInText(t) => write!(f, "format token {} inside a text segment", token_name(*t)),
            ParserWithoutSpan => f.write_str("parser text without a latent span"),
            TargetCount { budget, targets } => {
                write!(f, "{targets} latent targets for a budget of {budget}")
            }
        }
    }
}

fn err(position: usize, kind: FormatErrorKind) -> FormatError {
    FormatError { position, kind }
}

/// True for 1, 4, 9, 16, ...
pub fn is_square_budget(t: usize) -> bool {
    if t == 0 {
        return false;
    }
    let r = (t as f64).sqrt().round() as usize;
    r * r == t
}

impl ResponseSegments {
    pub fn validate(&self) -> Result<(), FormatError> {
        for seg in [&self.think_prefix, &self.parser_text, &self.think_suffix, &self.answer] {
            if let Some(&t) = seg.iter().find(|&&t| is_reserved(t)) {
                return Err(err(0, FormatErrorKind::ReservedInText(t)));
            }
        }
        match &self.latent {
            Some(span) => {
                if !is_square_budget(span.budget) {
                    return Err(err(0, FormatErrorKind::InvalidBudget(span.budget)));
                }
                if let Some(targets) = &span.targets {
                    if targets.len() != span.budget {
                        return Err(err(
                            0,
                            FormatErrorKind::TargetCount {
                                budget: span.budget,
                                targets: targets.len(),
                            },
                        ));
                    }
                }
            }
            None => {
                if !self.parser_text.is_empty() {
                    return Err(err(0, FormatErrorKind::ParserWithoutSpan));
                }
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.latent.as_ref().map_or(0, |s| s.budget)
    }
}

pub fn serialize_response(segments: &ResponseSegments) -> Result<Vec<TokenId>, FormatError> {
    segments.validate()?;
    let mut out = Vec::with_capacity(
        8 + segments.think_prefix.len()
            + segments.budget()
            + segments.parser_text.len()
            + segments.think_suffix.len()
            + segments.answer.len(),
    );
    out.push(THINK_START);
    out.extend_from_slice(&segments.think_prefix);
    if let Some(span) = &segments.latent {
        out.push(LATENT_START);
        out.extend(std::iter::repeat_n(LATENT_PAD, span.budget));
        out.push(LATENT_END);
        out.push(PARSER_START);
        out.extend_from_slice(&segments.parser_text);
        out.push(PARSER_END);
    }
    out.extend_from_slice(&segments.think_suffix);
    out.push(THINK_END);
    out.push(ANSWER_START);
    out.extend_from_slice(&segments.answer);
    out.push(ANSWER_END);
    Ok(out)
}

struct Cursor<'a> {
    tokens: &'a [TokenId],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<TokenId> {
        self.tokens.get(self.pos).copied()
    }

    fn expect(&mut self, token: TokenId, expected: &'static str) -> Result<(), FormatError> {
        match self.peek() {
            Some(t) if t == token => {
                self.pos += 1;
                Ok(())
            }
            found => Err(err(self.pos, FormatErrorKind::Expected { expected, found })),
        }
    }

    /// Consumes ordinary tokens up to the next reserved one.
    fn text(&mut self) -> Vec<TokenId> {
        let start = self.pos;
        while matches!(self.peek(), Some(t) if !is_reserved(t)) {
            self.pos += 1;
        }
        self.tokens[start..self.pos].to_vec()
    }
}

/// Inverse of [`serialize_response`]; latent targets come back as `None`.
pub fn parse_response(tokens: &[TokenId]) -> Result<ResponseSegments, FormatError> {
    let mut c = Cursor { tokens, pos: 0 };
    c.expect(THINK_START, "<think>")?;
    let think_prefix = c.text();
    let mut latent = None;
    let mut parser_text = Vec::new();
    if c.peek() == Some(LATENT_START) {
        let open = c.pos;
        c.pos += 1;
        let mut budget = 0;
        loop {
            match c.peek() {
                Some(LATENT_PAD) => {
                    budget += 1;
                    c.pos += 1;
                }
                Some(LATENT_END) => {
                    c.pos += 1;
                    break;
                }
                Some(LATENT_START) => return Err(err(c.pos, FormatErrorKind::NestedSpan)),
                _ => return Err(err(open, FormatErrorKind::UnclosedSpan)),
            }
        }
        if !is_square_budget(budget) {
            return Err(err(open, FormatErrorKind::InvalidBudget(budget)));
        }
        latent = Some(LatentSpan {
            budget,
            targets: None,
        });
        c.expect(PARSER_START, "<parser>")?;
        parser_text = c.text();
        c.expect(PARSER_END, "</parser>")?;
    }
    let think_suffix = c.text();
    if c.peek() == Some(LATENT_START) {
        return Err(err(c.pos, FormatErrorKind::NestedSpan));
    }
    c.expect(THINK_END, "</think>")?;
    c.expect(ANSWER_START, "<answer>")?;
    let answer = c.text();
    if c.peek() != Some(ANSWER_END) {
        return Err(err(c.pos, FormatErrorKind::MissingAnswerEnd));
    }
    c.pos += 1;
    if c.pos != tokens.len() {
        return Err(err(c.pos, FormatErrorKind::TrailingTokens));
    }
    Ok(ResponseSegments {
        think_prefix,
        latent,
        parser_text,
        think_suffix,
        answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const W: TokenId = RESERVED_TOKENS as TokenId;

    fn latent_segments(budget: usize) -> ResponseSegments {
        ResponseSegments {
            think_prefix: vec![],
            latent: Some(LatentSpan {
                budget,
                targets: None,
            }),
            parser_text: vec![],
            think_suffix: vec![],
            answer: vec![],
        }
    }

    #[test]
    fn four_pads_between_markers() {
        let toks = serialize_response(&latent_segments(4)).unwrap();
        let start = toks.iter().position(|&t| t == LATENT_START).unwrap();
        let end = toks.iter().position(|&t| t == LATENT_END).unwrap();
        assert_eq!(end - start - 1, 4);
        assert!(toks[start + 1..end].iter().all(|&t| t == LATENT_PAD));
        assert_eq!(parse_response(&toks).unwrap().budget(), 4);
    }

    #[test]
    fn main_setting_budget() {
        let toks = serialize_response(&latent_segments(36)).unwrap();
        assert_eq!(toks.iter().filter(|&&t| t == LATENT_PAD).count(), 36);
    }

    #[test]
    fn exact_layout() {
        let s = ResponseSegments {
            think_prefix: vec![W],
            latent: Some(LatentSpan {
                budget: 1,
                targets: None,
            }),
            parser_text: vec![W + 1],
            think_suffix: vec![W + 2],
            answer: vec![W + 3],
        };
        assert_eq!(
            serialize_response(&s).unwrap(),
            vec![
                THINK_START,
                W,
                LATENT_START,
                LATENT_PAD,
                LATENT_END,
                PARSER_START,
                W + 1,
                PARSER_END,
                W + 2,
                THINK_END,
                ANSWER_START,
                W + 3,
                ANSWER_END
            ]
        );
    }

    #[test]
    fn malformed_segments_rejected() {
        assert!(serialize_response(&latent_segments(0)).is_err());
        assert!(serialize_response(&latent_segments(5)).is_err());
        let mut s = latent_segments(4);
        s.answer = vec![LATENT_PAD];
        assert!(serialize_response(&s).is_err());
        let s = ResponseSegments {
            parser_text: vec![W],
            ..Default::default()
        };
        assert_eq!(
            serialize_response(&s).unwrap_err().kind,
            FormatErrorKind::ParserWithoutSpan
        );
    }

    #[test]
    fn parse_errors() {
        let unclosed = [THINK_START, LATENT_START, LATENT_PAD, THINK_END, ANSWER_START, ANSWER_END];
        assert_eq!(parse_response(&unclosed).unwrap_err().kind, FormatErrorKind::UnclosedSpan);

        let nested = [THINK_START, LATENT_START, LATENT_PAD, LATENT_START];
        assert_eq!(parse_response(&nested).unwrap_err().kind, FormatErrorKind::NestedSpan);

        let no_end = [THINK_START, THINK_END, ANSWER_START, W];
        assert_eq!(parse_response(&no_end).unwrap_err().kind, FormatErrorKind::MissingAnswerEnd);

        let trailing = [THINK_START, THINK_END, ANSWER_START, ANSWER_END, W];
        assert_eq!(parse_response(&trailing).unwrap_err().kind, FormatErrorKind::TrailingTokens);

        let two_pads = [
            THINK_START,
            LATENT_START,
            LATENT_PAD,
            LATENT_PAD,
            LATENT_END,
            PARSER_START,
            PARSER_END,
            THINK_END,
            ANSWER_START,
            ANSWER_END,
        ];
        assert_eq!(parse_response(&two_pads).unwrap_err().kind, FormatErrorKind::InvalidBudget(2));
        assert!(parse_response(&[]).is_err());
    }

    fn text() -> impl Strategy<Value = Vec<TokenId>> {
        prop::collection::vec(W..W + 30, 0..6)
    }

    fn segments() -> impl Strategy<Value = ResponseSegments> {
        (text(), text(), text(), text(), prop::option::of(1usize..7)).prop_map(
            |(prefix, parser, suffix, answer, root)| match root {
                Some(r) => ResponseSegments {
                    think_prefix: prefix,
                    latent: Some(LatentSpan {
                        budget: r * r,
                        targets: None,
                    }),
                    parser_text: parser,
                    think_suffix: suffix,
                    answer,
                },
                None => ResponseSegments {
                    think_prefix: prefix,
                    latent: None,
                    parser_text: vec![],
                    think_suffix: vec![],
                    answer,
                },
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip(s in segments()) {
            let toks = serialize_response(&s).unwrap();
            prop_assert_eq!(parse_response(&toks).unwrap(), s);
        }
    }
}
