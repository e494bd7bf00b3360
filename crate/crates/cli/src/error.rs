//! Error kind per failure class. Each kind owns a distinct exit code and
//! renders as a single `error: code=<kind> msg=<text>` line.

use std::path::Path;

use waveformer::attention::AttentionError;
use waveformer::autograd::TensorError;
use waveformer::dsp::DspError;
use waveformer::metrics::MetricError;
use waveformer::model::ModelError;
use waveformer::record_io::RecordError;
use waveformer::stratify::StratifyError;
use waveformer::synth::SynthError;
use waveformer::train::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags or configuration schema violations.
    Usage,
    /// Missing or unreadable files.
    Io,
    FoldRange,
    /// Malformed or inconsistent input data.
    Data,
    /// Non-finite values during training or inference.
    Numeric,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::FoldRange => "fold_range",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::FoldRange => 4,
            ErrorKind::Data => 5,
            ErrorKind::Numeric => 6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("error: code={} msg={}", kind.name(), one_line(msg))]
pub struct CliError {
    pub kind: ErrorKind,
    pub msg: String,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl CliError {
    pub fn new(kind: ErrorKind, msg: impl Into<String>) -> Self {
        Self { kind, msg: msg.into() }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, msg)
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, msg)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {e}", path.display()))
    }
}

fn record_kind(e: &RecordError) -> ErrorKind {
    match e {
        RecordError::Io { .. } => ErrorKind::Io,
        _ => ErrorKind::Data,
    }
}

fn tensor_kind(e: &TensorError) -> ErrorKind {
    match e {
        TensorError::NonFinite { .. } => ErrorKind::Numeric,
        TensorError::Io(_) => ErrorKind::Io,
        _ => ErrorKind::Data,
    }
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::Config(_) => ErrorKind::Usage,
        ModelError::Tensor(t) => tensor_kind(t),
        _ => ErrorKind::Data,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) => ErrorKind::Usage,
            TrainError::FoldOutOfRange { .. } => ErrorKind::FoldRange,
            TrainError::Diverged { .. } => ErrorKind::Numeric,
            TrainError::Io { .. } => ErrorKind::Io,
            TrainError::Record { source, .. } => {
                if let Some(r) = source.downcast_ref::<RecordError>() {
                    record_kind(r)
                } else if source.is::<std::io::Error>() {
                    ErrorKind::Io
                } else {
                    ErrorKind::Data
                }
            }
            TrainError::Model(m) => model_kind(m),
            TrainError::Dsp(DspError::Config(_)) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        Self::new(record_kind(&e), e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let kind = match &e {
            SynthError::Config(_) => ErrorKind::Usage,
            SynthError::Io { .. } => ErrorKind::Io,
            SynthError::Record(r) => record_kind(r),
            SynthError::Metric(_) => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<StratifyError> for CliError {
    fn from(e: StratifyError) -> Self {
        let kind = match &e {
            StratifyError::BadK(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let kind = match &e {
            MetricError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e.to_string())
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        let kind = match &e {
            DspError::Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<AttentionError> for CliError {
    fn from(e: AttentionError) -> Self {
        let kind = match &e {
            AttentionError::LayerOutOfRange { .. } | AttentionError::HeadOutOfRange { .. } => ErrorKind::Usage,
            AttentionError::Io { .. } => ErrorKind::Io,
            AttentionError::Parse { .. } => ErrorKind::Data,
            AttentionError::Model(m) => model_kind(m),
        };
        Self::new(kind, e.to_string())
    }
}
