use std::error::Error;
use std::io;

use canlm::baselines::{BaselineError, MetricsError};
use canlm::calibration::CalibrationError;
use canlm::datagen::DatagenError;
use canlm::finetune::FinetuneError;
use canlm::frames::FrameIoError;
use canlm::model::{CheckpointError, ModelError};
use canlm::pipeline::{ManifestError, PipelineError};
use canlm::pretrain::PretrainError;
use canlm::schema::SchemaError;
use canlm::tokenizer::{TokenFileError, TokenizerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Internal,
    Usage,
    MissingInput,
    HashMismatch,
    Validation,
    NonFinite,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Internal => 1,
            Category::Usage => 2,
            Category::MissingInput => 3,
            Category::HashMismatch => 4,
            Category::Validation => 5,
            Category::NonFinite => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::MissingInput => "missing_input",
            Category::HashMismatch => "hash_mismatch",
            Category::Validation => "validation",
            Category::NonFinite => "non_finite",
        }
    }
}

/// Error raised by the CLI itself with an explicit category.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

pub fn fail(category: Category, message: impl Into<String>) -> anyhow::Error {
    CliError {
        category,
        message: message.into(),
    }
    .into()
}

fn io(e: &io::Error) -> Category {
    if e.kind() == io::ErrorKind::NotFound {
        Category::MissingInput
    } else {
        Category::Internal
    }
}

fn model(e: &ModelError) -> Category {
    match e {
        ModelError::NonFinite { .. } => Category::NonFinite,
        _ => Category::Validation,
    }
}

fn checkpoint(e: &CheckpointError) -> Category {
    match e {
        CheckpointError::Io(e) => io(e),
        CheckpointError::Hash { .. } | CheckpointError::Vocabulary { .. } | CheckpointError::Version { .. } => {
            Category::HashMismatch
        }
        CheckpointError::Manifest(_) => Category::Validation,
        CheckpointError::Model(e) => model(e),
    }
}

fn calibration(e: &CalibrationError) -> Category {
    match e {
        CalibrationError::SchemaMismatch { .. } => Category::HashMismatch,
        _ => Category::Validation,
    }
}

fn tokenizer(e: &TokenizerError) -> Category {
    match e {
        TokenizerError::StaleVocabulary { .. } | TokenizerError::SchemaMismatch { .. } => Category::HashMismatch,
        TokenizerError::StaleCalibration(c) => match calibration(c) {
            Category::Validation => Category::HashMismatch,
            other => other,
        },
        _ => Category::Validation,
    }
}

fn token_file(e: &TokenFileError) -> Category {
    match e {
        TokenFileError::Io(e) => io(e),
        _ => Category::Validation,
    }
}

fn pretrain(e: &PretrainError) -> Category {
    match e {
        PretrainError::VocabMismatch { .. } => Category::HashMismatch,
        PretrainError::NonFinite { .. } => Category::NonFinite,
        PretrainError::Model(e) => model(e),
        PretrainError::Checkpoint(e) => checkpoint(e),
        PretrainError::Io(e) => io(e),
        _ => Category::Validation,
    }
}

fn finetune(e: &FinetuneError) -> Category {
    match e {
        FinetuneError::NonFinite { .. } => Category::NonFinite,
        FinetuneError::Model(e) => model(e),
        _ => Category::Validation,
    }
}

fn manifest(e: &ManifestError) -> Category {
    match e {
        ManifestError::Io { source, .. } => io(source),
        ManifestError::HashMismatch { .. } | ManifestError::Unlisted { .. } => Category::HashMismatch,
        ManifestError::Malformed { .. } => Category::Validation,
    }
}

fn pipeline(e: &PipelineError) -> Category {
    match e {
        PipelineError::Io { source, .. } => io(source),
        PipelineError::Calibration(e) => calibration(e),
        PipelineError::Tokenizer(e) => tokenizer(e),
        PipelineError::TokenFile(e) => token_file(e),
        PipelineError::Pretrain(e) => pretrain(e),
        PipelineError::Finetune(e) => finetune(e),
        PipelineError::Baseline(BaselineError::NonFinite { .. }) => Category::NonFinite,
        PipelineError::Checkpoint(e) => checkpoint(e),
        PipelineError::Model(e) => model(e),
        PipelineError::Manifest(e) => manifest(e),
        _ => Category::Validation,
    }
}

fn classify(e: &(dyn Error + 'static)) -> Option<Category> {
    if let Some(e) = e.downcast_ref::<CliError>() {
        return Some(e.category);
    }
    if let Some(e) = e.downcast_ref::<PipelineError>() {
        return Some(pipeline(e));
    }
    if let Some(e) = e.downcast_ref::<ManifestError>() {
        return Some(manifest(e));
    }
    if let Some(e) = e.downcast_ref::<CheckpointError>() {
        return Some(checkpoint(e));
    }
    if let Some(e) = e.downcast_ref::<PretrainError>() {
        return Some(pretrain(e));
    }
    if let Some(e) = e.downcast_ref::<FinetuneError>() {
        return Some(finetune(e));
    }
    if let Some(e) = e.downcast_ref::<TokenizerError>() {
        return Some(tokenizer(e));
    }
    if let Some(e) = e.downcast_ref::<TokenFileError>() {
        return Some(token_file(e));
    }
    if let Some(e) = e.downcast_ref::<CalibrationError>() {
        return Some(calibration(e));
    }
    if let Some(e) = e.downcast_ref::<ModelError>() {
        return Some(model(e));
    }
    if let Some(e) = e.downcast_ref::<BaselineError>() {
        return Some(match e {
            BaselineError::NonFinite { .. } => Category::NonFinite,
            _ => Category::Validation,
        });
    }
    if e.downcast_ref::<SchemaError>().is_some()
        || e.downcast_ref::<DatagenError>().is_some()
        || e.downcast_ref::<FrameIoError>().is_some()
        || e.downcast_ref::<MetricsError>().is_some()
        || e.downcast_ref::<toml::de::Error>().is_some()
        || e.downcast_ref::<serde_json::Error>().is_some()
    {
        return Some(Category::Validation);
    }
    e.downcast_ref::<io::Error>().map(io)
}

/// First recognised error in the chain decides the category.
pub fn categorize(err: &anyhow::Error) -> Category {
    err.chain().find_map(classify).unwrap_or(Category::Internal)
}
