use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider::{HttpConfig, RetryPolicy};
use crate::sandbox::Toolchain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub max_attempts_per_level: u32,
    pub augment_max_rounds: u32,
    pub optimizer_trigger: u32,
    pub max_reflections_per_subfunction: u32,
    pub hls_budget: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            max_attempts_per_level: 10,
            augment_max_rounds: 3,
            optimizer_trigger: 3,
            max_reflections_per_subfunction: 3,
            hls_budget: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NoiseStage {
    Understanding,
    Pseudo,
    Script,
    Synth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub stage: NoiseStage,
    /// Defaults to the first plan entry.
    #[serde(default)]
    pub subfunction: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Pipeline,
    SingleShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Scripted { transcript: PathBuf },
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    /// Character budget for rendered document context in prompts.
    pub chars: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { chars: 24_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HlsConfig {
    /// JSONL ruleset; the built-in rules when absent.
    pub ruleset: Option<PathBuf>,
    /// External synthesis command with a `{file}` placeholder.
    pub synthesizer_cmd: Option<String>,
    pub synthesizer_timeout_secs: u64,
}

impl Default for HlsConfig {
    fn default() -> Self {
        HlsConfig { ruleset: None, synthesizer_cmd: None, synthesizer_timeout_secs: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: String,
    /// Document bundle directory.
    pub bundle: PathBuf,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub toolchain: Toolchain,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub context: ContextConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub hls: HlsConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Loads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.bundle);
        if let ProviderConfig::Scripted { transcript } = &mut self.provider {
            fix(transcript);
        }
        if let Some(r) = &mut self.hls.ruleset {
            fix(r);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.budgets;
        for (name, v) in [
            ("max_attempts_per_level", b.max_attempts_per_level),
            ("augment_max_rounds", b.augment_max_rounds),
            ("optimizer_trigger", b.optimizer_trigger),
            ("max_reflections_per_subfunction", b.max_reflections_per_subfunction),
            ("hls_budget", b.hls_budget),
        ] {
            if v == 0 {
                return Err(Error::ConfigInvalid(format!("budgets.{name} must be at least 1")));
            }
        }
        if self.target.trim().is_empty() {
            return Err(Error::ConfigInvalid("target is empty".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::ConfigInvalid("retry.max_attempts must be at least 1".into()));
        }
        if self.context.chars == 0 {
            return Err(Error::ConfigInvalid("context.chars must be at least 1".into()));
        }
        if self.toolchain.timeout_secs == 0 {
            return Err(Error::ConfigInvalid("toolchain.timeout_secs must be at least 1".into()));
        }
        Ok(())
    }
}
