//! Response serialization, difficulty-aware supervision, filtering, leakage
//! audit, dataset files and the synthetic desk-scale task.

pub mod audit;
pub mod example;
pub mod filter;
pub mod format;
pub mod io;
pub mod supervision;
pub mod synthetic;
pub mod tokens;

pub use audit::{leakage_audit, AuditReport, Collision};
pub use example::{
    embedding_bytes, image_hash, normalize_question, question_hash, Accuracy, ExampleMetadata, SupervisionMode,
    TrainingExample,
};
pub use filter::{quality_filter, FilterConfig, FilterVerdict, RejectReason};
pub use format::{
    is_square_budget, parse_response, serialize_response, FormatError, FormatErrorKind, LatentSpan,
    ResponseSegments,
};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use supervision::{assign_supervision, estimate_accuracy, route, strip_latent, AnswerSampler};
pub use synthetic::{gen_synthetic_task, SimulatedBase, SyntheticConfig, SyntheticTask};
pub use tokens::TokenId;
