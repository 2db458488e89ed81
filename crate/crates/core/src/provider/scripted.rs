use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Agent, CompletionRequest, CompletionResult, Provider, Usage};
use crate::error::{Error, Result};

/// One scripted response. The entry matches a request when the agent is
/// equal and every pattern occurs in the rendered request text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub agent: Agent,
    pub patterns: Vec<String>,
    pub response: String,
    /// `None` means unlimited.
    pub max_uses: Option<u32>,
}

impl TranscriptEntry {
    pub fn matches(&self, agent: Agent, rendered: &str) -> bool {
        self.agent == agent && self.patterns.iter().all(|p| rendered.contains(p.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    agent: String,
    #[serde(rename = "match", default)]
    patterns: Vec<String>,
    response: String,
    #[serde(default)]
    max_uses: Option<MaxUses>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MaxUses {
    Count(u32),
    Word(String),
}

/// Parses the line-delimited transcript format: one JSON object per line with
/// `agent`, `match` (list of substrings), `response`, and optional `max_uses`
/// (a count, or `"unlimited"`; default 1). Blank lines are ignored.
pub fn parse_transcript(raw: &str) -> Result<Transcript> {
    let mut entries = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::TranscriptMalformed { line: i + 1, reason };
        let rec: EntryRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let agent = rec.agent.parse::<Agent>().map_err(|e| bad(e.to_string()))?;
        if rec.patterns.iter().any(|p| p.is_empty()) {
            return Err(bad("empty match pattern".into()));
        }
        let max_uses = match rec.max_uses {
            None => Some(1),
            Some(MaxUses::Count(0)) => return Err(bad("max_uses must be at least 1".into())),
            Some(MaxUses::Count(n)) => Some(n),
            Some(MaxUses::Word(w)) if w == "unlimited" => None,
            Some(MaxUses::Word(w)) => return Err(bad(format!("bad max_uses `{w}`"))),
        };
        entries.push(TranscriptEntry { agent, patterns: rec.patterns, response: rec.response, max_uses });
    }
    Ok(Transcript { entries })
}

pub fn load_transcript(path: &Path) -> Result<Transcript> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_transcript(&raw)
}

/// Deterministic provider backed by a [`Transcript`]. Consumption is
/// serialized behind a mutex so concurrent callers observe one total order.
#[derive(Debug)]
pub struct ScriptedProvider {
    transcript: Transcript,
    uses: Mutex<Vec<u32>>,
}

impl ScriptedProvider {
    pub fn new(transcript: Transcript) -> Self {
        let n = transcript.entries.len();
        ScriptedProvider { transcript, uses: Mutex::new(vec![0; n]) }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(load_transcript(path)?))
    }

    /// Total number of successful completions served so far.
    pub fn consumed(&self) -> u64 {
        self.uses.lock().expect("transcript lock").iter().map(|&u| u as u64).sum()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

impl Provider for ScriptedProvider {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let rendered = request.render();
        let mut uses = self.uses.lock().expect("transcript lock");
        let found = self.transcript.entries.iter().enumerate().find(|(i, e)| {
            e.max_uses.is_none_or(|m| uses[*i] < m) && e.matches(request.agent, &rendered)
        });
        let Some((idx, entry)) = found else {
            return Err(Error::NoMatchingEntry { agent: request.agent.to_string(), tag: request.tag.clone() });
        };
        let completion_chars = entry.response.chars().count();
        if completion_chars > request.max_output_chars {
            return Err(Error::OutputTruncated { limit: request.max_output_chars });
        }
        uses[idx] += 1;
        Ok(CompletionResult {
            text: entry.response.clone(),
            usage: Usage { prompt_chars: rendered.chars().count() as u64, completion_chars: completion_chars as u64 },
            provider_id: self.id().to_string(),
            transcript_entry: Some(idx),
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn restore(&self, consumed_entries: &[usize]) -> Result<()> {
        let mut uses = self.uses.lock().expect("transcript lock");
        for &i in consumed_entries {
            let slot = uses.get_mut(i).ok_or_else(|| {
                Error::LogCorrupt(format!("log references transcript entry {i} beyond the transcript"))
            })?;
            *slot += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ChatMessage;

    fn req(agent: Agent, text: &str) -> CompletionRequest {
        CompletionRequest::new(agent, "t", vec![ChatMessage::user(text)])
    }

    const T: &str = r#"{"agent":"Coder","match":["@subfunction A"],"response":"a1"}
{"agent":"Coder","match":["@subfunction A"],"response":"a2","max_uses":"unlimited"}

{"agent":"Coder","match":["@subfunction B","@level SCRIPT"],"response":"b","max_uses":2}
{"agent":"Verifier","match":[],"response":"v"}
"#;

    #[test]
    fn entries_consumed_in_order_of_first_match() {
        let p = ScriptedProvider::new(parse_transcript(T).unwrap());
        assert_eq!(p.complete(&req(Agent::Coder, "@subfunction A")).unwrap().text, "a1");
        assert_eq!(p.complete(&req(Agent::Coder, "@subfunction A")).unwrap().text, "a2");
        assert_eq!(p.complete(&req(Agent::Coder, "@subfunction A")).unwrap().text, "a2");
        let r = p.complete(&req(Agent::Coder, "@subfunction B\n@level SCRIPT")).unwrap();
        assert_eq!((r.text.as_str(), r.transcript_entry), ("b", Some(2)));
        assert_eq!(p.consumed(), 4);
    }

    #[test]
    fn budget_exhaustion_falls_through_then_errors() {
        let p = ScriptedProvider::new(parse_transcript(T).unwrap());
        let b = req(Agent::Coder, "@subfunction B @level SCRIPT");
        p.complete(&b).unwrap();
        p.complete(&b).unwrap();
        let err = p.complete(&b).unwrap_err();
        assert_eq!(err.code(), "NO_MATCHING_ENTRY");
        // agent must match too
        assert_eq!(p.complete(&req(Agent::Verifier, "anything")).unwrap().text, "v");
        assert!(p.complete(&req(Agent::Analyzer, "anything")).is_err());
    }

    #[test]
    fn usage_counts_characters() {
        let p = ScriptedProvider::new(parse_transcript(T).unwrap());
        let r = req(Agent::Verifier, "xyz");
        let out = p.complete(&r).unwrap();
        assert_eq!(out.usage.prompt_chars, r.render().chars().count() as u64);
        assert_eq!(out.usage.completion_chars, 1);
    }

    #[test]
    fn truncated_output_is_an_error_and_not_consumed() {
        let p = ScriptedProvider::new(parse_transcript(T).unwrap());
        let mut r = req(Agent::Coder, "@subfunction A");
        r.max_output_chars = 2;
        p.complete(&r).unwrap();
        let mut r2 = req(Agent::Verifier, "x");
        r2.max_output_chars = 0;
        assert_eq!(p.complete(&r2).unwrap_err().code(), "OUTPUT_TRUNCATED");
        assert_eq!(p.consumed(), 1);
    }

    #[test]
    fn restore_replays_consumption() {
        let p = ScriptedProvider::new(parse_transcript(T).unwrap());
        p.restore(&[0]).unwrap();
        assert_eq!(p.complete(&req(Agent::Coder, "@subfunction A")).unwrap().text, "a2");
        assert!(p.restore(&[99]).is_err());
    }

    #[test]
    fn malformed_lines_are_reported_with_line_numbers() {
        let err = parse_transcript("{\"agent\":\"Coder\",\"response\":\"x\"}\n{\"agent\":\"Nobody\",\"response\":\"x\"}").unwrap_err();
        assert!(matches!(err, Error::TranscriptMalformed { line: 2, .. }));
        let err = parse_transcript("{\"agent\":\"Coder\",\"response\":\"x\",\"max_uses\":0}").unwrap_err();
        assert!(matches!(err, Error::TranscriptMalformed { line: 1, .. }));
    }
}
