use std::path::PathBuf;

use thiserror::Error;

use crate::coding::CodeLevel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can surface. `code()` yields the stable
/// upper-case identifier used by the CLI and the HTTP API.
#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest malformed: {0}")]
    ManifestMalformed(String),
    #[error("attachment missing: {0}")]
    AttachmentMissing(PathBuf),
    #[error("duplicate section id `{0}`")]
    DuplicateSectionId(String),
    #[error("unknown section id `{0}`")]
    UnknownSectionId(String),

    #[error("no transcript entry matches {agent}/{tag}")]
    NoMatchingEntry { agent: String, tag: String },
    #[error("remote failure after {attempts} attempt(s): {last}")]
    RemoteFailure { attempts: u32, last: String },
    #[error("provider output truncated at {limit} chars")]
    OutputTruncated { limit: usize },
    #[error("transcript malformed at line {line}: {reason}")]
    TranscriptMalformed { line: usize, reason: String },
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),

    #[error("summarizer returned an empty summary for section `{0}`")]
    EmptySummary(String),
    #[error("plan unparseable: {0}")]
    PlanUnparseable(String),
    #[error("plan invalid: {0}")]
    PlanInvalid(String),
    #[error("augmentation budget exhausted for `{name}`: {feedback}")]
    AugmentBudgetExhausted { name: String, feedback: String },

    #[error("patch unparseable: {0}")]
    PatchUnparseable(String),
    #[error("no 20-asterisk fence found")]
    NoFenceFound,
    #[error("fence opened at line {0} is never closed")]
    UnterminatedFence(usize),
    #[error("fence opened at line {0} has no `SUBFUNCTION: <name>` label")]
    MissingNameLabel(usize),
    #[error("ambiguous definition of `{0}`")]
    AmbiguousDefinition(String),
    #[error("patch body does not consist of exactly one definition of `{name}`: {reason}")]
    PatchBodyMismatch { name: String, reason: String },
    #[error("malformed {level} source near line {line}: {reason}")]
    SourceMalformed { level: CodeLevel, line: usize, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("oracle execution failed: {0}")]
    OracleExecutionFailed(String),
    #[error("no tests available for `{0}`")]
    NoTestsAvailable(String),
    #[error("harness generation failed: {0}")]
    HarnessGenerationFailed(String),

    #[error("toolchain missing: {0}")]
    ToolchainMissing(String),
    #[error("sandbox i/o failure: {0}")]
    Sandbox(String),

    #[error("ruleset malformed: {0}")]
    RulesetMalformed(String),
    #[error("HLS optimization budget exhausted with {remaining} blocking violation(s)")]
    HlsBudgetExhausted { remaining: usize },

    #[error("intervention `{0}` already answered")]
    AlreadyAnswered(String),
    #[error("unknown intervention request `{0}`")]
    UnknownRequest(String),
    #[error("run blocked on intervention `{0}`")]
    BlockedOnIntervention(String),

    #[error("config invalid: {0}")]
    ConfigInvalid(String),
    #[error("event log corrupt: {0}")]
    LogCorrupt(String),
    #[error("replay diverged at seq {seq}: {reason}")]
    ReplayDiverged { seq: u64, reason: String },
    #[error("run `{0}` is terminal")]
    RunTerminal(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{0}` is being written by another process")]
    ConcurrentWrite(String),
    #[error("synthesizer failed: {0}")]
    SynthesisFailed(String),
    #[error("end of recorded log reached")]
    EndOfLog,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::ManifestMalformed(_) => "MANIFEST_MALFORMED",
            Error::AttachmentMissing(_) => "ATTACHMENT_MISSING",
            Error::DuplicateSectionId(_) => "DUPLICATE_SECTION_ID",
            Error::UnknownSectionId(_) => "UNKNOWN_SECTION_ID",
            Error::NoMatchingEntry { .. } => "NO_MATCHING_ENTRY",
            Error::RemoteFailure { .. } => "REMOTE_FAILURE",
            Error::OutputTruncated { .. } => "OUTPUT_TRUNCATED",
            Error::TranscriptMalformed { .. } => "TRANSCRIPT_MALFORMED",
            Error::UnknownAgent(_) => "UNKNOWN_AGENT",
            Error::EmptySummary(_) => "EMPTY_SUMMARY",
            Error::PlanUnparseable(_) => "PLAN_UNPARSEABLE",
            Error::PlanInvalid(_) => "PLAN_INVALID",
            Error::AugmentBudgetExhausted { .. } => "AUGMENT_BUDGET_EXHAUSTED",
            Error::PatchUnparseable(_) => "PATCH_UNPARSEABLE",
            Error::NoFenceFound => "NO_FENCE_FOUND",
            Error::UnterminatedFence(_) => "UNTERMINATED_FENCE",
            Error::MissingNameLabel(_) => "MISSING_NAME_LABEL",
            Error::AmbiguousDefinition(_) => "AMBIGUOUS_DEFINITION",
            Error::PatchBodyMismatch { .. } => "PATCH_BODY_MISMATCH",
            Error::SourceMalformed { .. } => "SOURCE_MALFORMED",
            Error::Precondition(_) => "PRECONDITION_VIOLATED",
            Error::OracleExecutionFailed(_) => "ORACLE_EXECUTION_FAILED",
            Error::NoTestsAvailable(_) => "NO_TESTS_AVAILABLE",
            Error::HarnessGenerationFailed(_) => "HARNESS_GENERATION_FAILED",
            Error::ToolchainMissing(_) => "TOOLCHAIN_MISSING",
            Error::Sandbox(_) => "SANDBOX_FAILURE",
            Error::RulesetMalformed(_) => "RULESET_MALFORMED",
            Error::HlsBudgetExhausted { .. } => "HLS_BUDGET_EXHAUSTED",
            Error::AlreadyAnswered(_) => "ALREADY_ANSWERED",
            Error::UnknownRequest(_) => "UNKNOWN_REQUEST",
            Error::BlockedOnIntervention(_) => "BLOCKED_ON_INTERVENTION",
            Error::ConfigInvalid(_) => "CONFIG_INVALID",
            Error::LogCorrupt(_) => "LOG_CORRUPT",
            Error::ReplayDiverged { .. } => "REPLAY_DIVERGED",
            Error::RunTerminal(_) => "RUN_TERMINAL",
            Error::UnknownRun(_) => "UNKNOWN_RUN",
            Error::ConcurrentWrite(_) => "CONCURRENT_WRITE",
            Error::SynthesisFailed(_) => "SYNTHESIS_FAILED",
            Error::EndOfLog => "END_OF_LOG",
            Error::Io { .. } => "IO",
            Error::Json(_) => "JSON",
        }
    }

    /// Marker-protocol violations that warrant a protocol-reminder reprompt.
    pub fn is_patch_protocol(&self) -> bool {
        matches!(
            self,
            Error::PatchUnparseable(_)
                | Error::NoFenceFound
                | Error::UnterminatedFence(_)
                | Error::MissingNameLabel(_)
                | Error::PatchBodyMismatch { .. }
        )
    }
}
