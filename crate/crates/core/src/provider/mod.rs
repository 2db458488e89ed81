//! Completion interface shared by every agent.
//!
//! Two implementations ship: [`ScriptedProvider`] serves responses from a
//! transcript file and is fully deterministic; [`HttpProvider`] talks to an
//! OpenAI-compatible chat-completions endpoint. Usage is accounted in
//! characters so numbers are comparable across models.

mod http;
mod retry;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::{HttpConfig, HttpProvider};
pub use retry::{with_retry, RetryPolicy};
pub use scripted::{load_transcript, parse_transcript, ScriptedProvider, Transcript, TranscriptEntry};

use crate::document::attachment_placeholder;
use crate::error::Result;
use crate::orchestrator::events::{Event, RunEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Agent {
    Summarizer,
    Decomposer,
    Describer,
    Verifier,
    Coder,
    PromptOptimizer,
    Analyzer,
    Reflector,
    CodeOptimizer,
    NoiseInjector,
}

impl Agent {
    pub const ALL: [Agent; 10] = [
        Agent::Summarizer,
        Agent::Decomposer,
        Agent::Describer,
        Agent::Verifier,
        Agent::Coder,
        Agent::PromptOptimizer,
        Agent::Analyzer,
        Agent::Reflector,
        Agent::CodeOptimizer,
        Agent::NoiseInjector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Agent::Summarizer => "Summarizer",
            Agent::Decomposer => "Decomposer",
            Agent::Describer => "Describer",
            Agent::Verifier => "Verifier",
            Agent::Coder => "Coder",
            Agent::PromptOptimizer => "PromptOptimizer",
            Agent::Analyzer => "Analyzer",
            Agent::Reflector => "Reflector",
            Agent::CodeOptimizer => "CodeOptimizer",
            Agent::NoiseInjector => "NoiseInjector",
        }
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Agent {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Agent::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| crate::error::Error::UnknownAgent(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Part {
    Text(String),
    ImageRef(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, parts: vec![Part::Text(text.into())] }
    }

    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, parts: vec![Part::Text(text.into())] }
    }

    pub fn with_images(mut self, paths: &[String]) -> Self {
        self.parts.extend(paths.iter().cloned().map(Part::ImageRef));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub agent: Agent,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_chars: usize,
    /// Pipeline phase label, e.g. `draft` or `verify-code`.
    pub tag: String,
}

pub const DEFAULT_MAX_OUTPUT_CHARS: usize = 64_000;

impl CompletionRequest {
    pub fn new(agent: Agent, tag: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        CompletionRequest {
            agent,
            messages,
            temperature: 0.0,
            max_output_chars: DEFAULT_MAX_OUTPUT_CHARS,
            tag: tag.into(),
        }
    }

    /// Flat text form used for transcript matching, hashing and usage.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "SYSTEM",
                Role::User => "USER",
                Role::Assistant => "ASSISTANT",
            };
            out.push_str(role);
            out.push_str(":\n");
            for p in &m.parts {
                match p {
                    Part::Text(t) => out.push_str(t),
                    Part::ImageRef(path) => out.push_str(&attachment_placeholder(path)),
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.agent.as_str().as_bytes());
        h.update([0]);
        h.update(self.tag.as_bytes());
        h.update([0]);
        h.update(self.render().as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_chars: u64,
    pub completion_chars: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.prompt_chars += other.prompt_chars;
        self.completion_chars += other.completion_chars;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub usage: Usage,
    pub provider_id: String,
    /// Index of the transcript entry that served this result (scripted only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_entry: Option<usize>,
}

pub trait Provider: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult>;

    /// Deterministic providers are never retried.
    fn is_deterministic(&self) -> bool {
        false
    }

    /// Replays transcript consumption recorded in a run log.
    fn restore(&self, _consumed_entries: &[usize]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTable {
    pub per_agent: BTreeMap<String, Usage>,
    pub total: Usage,
}

/// Sums PROVIDER_CALL usage per agent.
pub fn usage_totals(events: &[RunEvent]) -> UsageTable {
    let mut table = UsageTable::default();
    for ev in events {
        if let Ok(Event::ProviderCall(call)) = ev.event() {
            table.per_agent.entry(call.agent.to_string()).or_default().add(call.usage);
            table.total.add(call.usage);
        }
    }
    table
}
