//! Variational question-answer pair generation.
//!
//! This crate implements a conditional variational model that reads a
//! paragraph and generates question-answer pairs from it: a pointer-network
//! decoder extracts answer spans and an attention/copy decoder writes
//! questions, each driven by its own Gaussian latent variable whose KL term
//! is held near a configurable capacity target during training. Around the
//! model sit dataset ingestion, training, synthesis with quality filters,
//! likelihood estimation, and an evaluation metric suite.

pub mod answer_decoder;
pub mod corpus;
pub mod error;
pub mod latent;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod question_decoder;
pub mod synthesis;
pub mod tape;
pub mod testing;
pub mod toy;

pub use answer_decoder::{AnswerSpan, DecodeMode, SpanDistribution};
pub use corpus::{
    LoadReport, ParagraphRecord, QaAnnotation, Token, TokenizedExample, Vocabulary,
};
pub use error::{Result, VqagError};
pub use latent::{GaussianParams, LatentKind, LatentSample};
pub use likelihood::NLLReport;
pub use metrics::{AEReport, QGReport};
pub use model::{ContextInput, Model};
pub use objective::{LossBreakdown, TrainConfig, TrainReport};
pub use params::{ModelConfig, ParameterStore};
pub use question_decoder::{DecoderStepOutput, GenerationStrategy};
pub use synthesis::{FilterPolicy, QAPairRecord, RejectionReason};
