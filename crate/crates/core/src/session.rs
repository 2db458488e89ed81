//! The capability bundle every pipeline operation runs against: provider
//! completions, sandbox execution and event emission.

use crate::error::Result;
use crate::level::CodeLevel;
use crate::orchestrator::events::{Event, ProviderCall};
use crate::provider::{with_retry, CompletionRequest, CompletionResult, Provider, RetryPolicy};
use crate::sandbox::{ExecutionResult, Executor};

pub trait Session: Executor {
    /// Performs (or replays) one completion and records a PROVIDER_CALL.
    fn complete(&mut self, request: CompletionRequest) -> Result<CompletionResult>;

    fn emit(&mut self, event: Event) -> Result<()>;

    /// Events emitted so far, oldest first.
    fn history(&self) -> Vec<Event>;
}

pub(crate) fn provider_call_event(request: &CompletionRequest, result: &CompletionResult) -> Event {
    Event::ProviderCall(ProviderCall {
        agent: request.agent,
        tag: request.tag.clone(),
        fingerprint: request.fingerprint(),
        response: result.text.clone(),
        usage: result.usage,
        provider_id: result.provider_id.clone(),
        transcript_entry: result.transcript_entry,
    })
}

/// In-memory session: live provider, any executor, events kept in a vector.
pub struct MemorySession {
    pub provider: Box<dyn Provider>,
    pub executor: Box<dyn Executor>,
    pub retry: RetryPolicy,
    pub events: Vec<Event>,
}

impl MemorySession {
    pub fn new(provider: Box<dyn Provider>, executor: Box<dyn Executor>) -> Self {
        MemorySession { provider, executor, retry: RetryPolicy::default(), events: Vec::new() }
    }

    pub fn provider_calls(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::ProviderCall(_))).count()
    }
}

impl Executor for MemorySession {
    fn run(&mut self, level: CodeLevel, program: &str, harness: &str) -> Result<ExecutionResult> {
        self.executor.run(level, program, harness)
    }
}

impl Session for MemorySession {
    fn complete(&mut self, request: CompletionRequest) -> Result<CompletionResult> {
        let result = with_retry(self.provider.as_ref(), &request, &self.retry)?;
        self.events.push(provider_call_event(&request, &result));
        Ok(result)
    }

    fn emit(&mut self, event: Event) -> Result<()> {
        self.events.push(event);
        Ok(())
    }

    fn history(&self) -> Vec<Event> {
        self.events.clone()
    }
}
