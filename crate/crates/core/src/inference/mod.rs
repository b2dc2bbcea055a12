//! Interleaved text/latent decoding, latent interventions and the budget sweep.

pub mod decode;
pub mod intervention;
pub mod sweep;
pub mod transcript;

pub use decode::{accuracy, decode, decode_all, is_correct, span_prompt, DecodeOptions, EmaOptions};
pub use intervention::{apply_intervention, InterventionMode};
pub use sweep::{budget_sweep, check_budgets, mean_std, BudgetSummary, SweepRow, SweepTable};
pub use transcript::{Event, StopReason, Transcript};
