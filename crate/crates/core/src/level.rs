use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Abstraction level of generated code, in strict lowering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CodeLevel {
    /// Structured, non-executable pseudocode.
    Pseudo,
    /// Interpreted scripting language (Python).
    Script,
    /// Compilable systems language aimed at high-level synthesis (C++).
    Synth,
}

impl CodeLevel {
    pub const ALL: [CodeLevel; 3] = [CodeLevel::Pseudo, CodeLevel::Script, CodeLevel::Synth];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeLevel::Pseudo => "PSEUDO",
            CodeLevel::Script => "SCRIPT",
            CodeLevel::Synth => "SYNTH",
        }
    }

    /// The next-higher (more abstract) level, if any.
    pub fn higher(self) -> Option<CodeLevel> {
        match self {
            CodeLevel::Pseudo => None,
            CodeLevel::Script => Some(CodeLevel::Pseudo),
            CodeLevel::Synth => Some(CodeLevel::Script),
        }
    }

    pub fn lower(self) -> Option<CodeLevel> {
        match self {
            CodeLevel::Pseudo => Some(CodeLevel::Script),
            CodeLevel::Script => Some(CodeLevel::Synth),
            CodeLevel::Synth => None,
        }
    }

    pub fn is_executable(self) -> bool {
        self != CodeLevel::Pseudo
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CodeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PSEUDO" => Ok(CodeLevel::Pseudo),
            "SCRIPT" => Ok(CodeLevel::Script),
            "SYNTH" => Ok(CodeLevel::Synth),
            other => Err(format!("unknown code level `{other}`")),
        }
    }
}
