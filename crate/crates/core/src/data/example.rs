use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::format::{serialize_response, FormatError, ResponseSegments};
use super::tokens::TokenId;
use crate::model::InputSlot;

/// Empirical accuracy as an exact fraction `correct / attempts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u32,
    pub attempts: u32,
}

impl Accuracy {
    pub fn new(correct: u32, attempts: u32) -> Self {
        assert!(attempts > 0 && correct <= attempts, "invalid accuracy {correct}/{attempts}");
        Self { correct, attempts }
    }

    pub fn value(&self) -> f64 {
        f64::from(self.correct) / f64::from(self.attempts)
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.correct, self.attempts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    TextOnly,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExampleMetadata {
    pub source_id: String,
    /// Hex SHA-256 of the query image bytes.
    pub image_hash: Option<String>,
    /// Hex SHA-256 of the normalized question text.
    pub question_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Query image as embedding rows, injected ahead of the query tokens.
    pub query_image: Vec<Vec<f64>>,
    pub query_tokens: Vec<TokenId>,
    pub segments: ResponseSegments,
    pub accuracy: Accuracy,
    pub mode: SupervisionMode,
    pub metadata: ExampleMetadata,
}

impl TrainingExample {
    pub fn response_tokens(&self) -> Result<Vec<TokenId>, FormatError> {
        serialize_response(&self.segments)
    }

    /// Query image rows followed by the query tokens.
    pub fn prompt_slots(&self) -> Vec<InputSlot> {
        self.query_image
            .iter()
            .cloned()
            .map(InputSlot::Latent)
            .chain(self.query_tokens.iter().copied().map(InputSlot::Token))
            .collect()
    }

    pub fn latent_targets(&self) -> Option<&[Vec<f64>]> {
        self.segments.latent.as_ref()?.targets.as_deref()
    }
}

/// Lowercase, drop every character that is neither alphanumeric nor
/// whitespace, then collapse whitespace runs to one ASCII space and trim.
pub fn normalize_question(text: &str) -> String {
    let kept: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn question_hash(text: &str) -> String {
    hex::encode(Sha256::digest(normalize_question(text).as_bytes()))
}

pub fn image_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Little-endian bytes of embedding rows, the "image bytes" of a query image.
pub fn embedding_bytes(rows: &[Vec<f64>]) -> Vec<u8> {
    rows.iter()
        .flat_map(|r| r.iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rule() {
        assert_eq!(normalize_question("  What's   the\tCOLOR?\n"), "whats the color");
        assert_eq!(normalize_question("a-b, c"), "ab c");
        assert_eq!(question_hash("Hello, World!"), question_hash("hello   world"));
        assert_ne!(question_hash("hello world"), question_hash("hello word"));
    }

    #[test]
    fn accuracy_value() {
        assert_eq!(Accuracy::new(3, 8).value(), 0.375);
        assert_eq!(Accuracy::new(3, 8).to_string(), "3/8");
    }
}
