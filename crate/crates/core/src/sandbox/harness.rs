//! Test-driver generation and result parsing.
//!
//! The generated driver calls the entry point once per case and writes one
//! `CASE <id> <value>...` line per case to [`CASE_LOG`] in the working
//! directory, so anything the program itself prints cannot interfere.
//! Outputs declared with a bit width are printed as `0x` lowercase hex, others
//! in decimal.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ExecStatus, ExecutionResult, Executor};
use crate::coding::TestCase;
use crate::error::{Error, Result};
use crate::level::CodeLevel;
use crate::patcher::{is_identifier, parameter_count, IntegratedSource};

pub const CASE_LOG: &str = "cases.out";

/// How to call an entry point and print its outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySignature {
    pub name: String,
    pub inputs: usize,
    /// One flag per output: print as hex.
    pub outputs_hex: Vec<bool>,
}

/// One call in a generated harness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessCase {
    pub id: String,
    pub entry: String,
    pub inputs: Vec<String>,
}

/// Observed output values, or the reason none were produced.
pub type Observation = std::result::Result<Vec<String>, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaseStatus {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub status: CaseStatus,
    pub observed: String,
}

/// Parses a decimal or `0x` hex integer literal.
pub fn parse_literal(s: &str) -> Option<i128> {
    let t = s.trim();
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let v = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        if h.is_empty() || !h.chars().all(|c| c.is_ascii_hexdigit() || c == '_') {
            return None;
        }
        i128::from_str_radix(&h.replace('_', ""), 16).ok()?
    } else {
        if t.is_empty() || !t.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        t.parse::<i128>().ok()?
    };
    Some(if neg { -v } else { v })
}

/// Numeric equality when both sides are integer literals (hex or decimal),
/// whitespace-insensitive text equality otherwise.
pub fn canonical_eq(observed: &str, expected: &str) -> bool {
    match (parse_literal(observed), parse_literal(expected)) {
        (Some(a), Some(b)) => a == b,
        _ => {
            let squash = |s: &str| s.split_whitespace().collect::<String>();
            squash(observed) == squash(expected)
        }
    }
}

fn literal_for(level: CodeLevel, raw: &str) -> Result<String> {
    let v = parse_literal(raw)
        .ok_or_else(|| Error::HarnessGenerationFailed(format!("input `{raw}` is not an integer literal")))?;
    let body = if v < 0 { format!("-0x{:x}", -v) } else { format!("0x{v:x}") };
    Ok(match level {
        CodeLevel::Synth if v > i64::MAX as i128 => format!("{body}ULL"),
        _ => body,
    })
}

fn script_harness(cases: &[(HarnessCase, &EntrySignature)]) -> Result<String> {
    let mut h = String::from(
        "\n\ndef __hwf_fmt(v, hexa):\n    if hexa:\n        return hex(int(v))\n    return str(int(v)) if isinstance(v, (int, bool)) else str(v)\n\n\
def __hwf_case(out, cid, call, hexes):\n    try:\n        r = call()\n        vals = list(r) if len(hexes) > 1 else [r]\n        if len(vals) != len(hexes):\n            raise ValueError(\"expected %d outputs, got %d\" % (len(hexes), len(vals)))\n        out.write(\"CASE \" + cid + \" \" + \" \".join(__hwf_fmt(v, x) for v, x in zip(vals, hexes)) + \"\\n\")\n    except BaseException as e:\n        out.write(\"CASE \" + cid + \" !ERROR \" + type(e).__name__ + \": \" + str(e).replace(\"\\n\", \" \") + \"\\n\")\n    out.flush()\n\n\
with open(\"cases.out\", \"w\") as __hwf_out:\n",
    );
    for (case, sig) in cases {
        let args: Vec<String> = case.inputs.iter().map(|i| literal_for(CodeLevel::Script, i)).collect::<Result<_>>()?;
        let hexes: Vec<&str> = sig.outputs_hex.iter().map(|&b| if b { "True" } else { "False" }).collect();
        writeln!(
            h,
            "    __hwf_case(__hwf_out, \"{}\", lambda: {}({}), [{}])",
            case.id,
            case.entry,
            args.join(", "),
            hexes.join(", ")
        )
        .expect("string write");
    }
    if cases.is_empty() {
        h.push_str("    pass\n");
    }
    Ok(h)
}

fn synth_harness(cases: &[(HarnessCase, &EntrySignature)]) -> Result<String> {
    let mut h = String::from(
        "\n#include <cstdio>\nint main() {\n    std::FILE* hwf_out = std::fopen(\"cases.out\", \"w\");\n    if (!hwf_out) return 3;\n",
    );
    for (case, sig) in cases {
        if sig.outputs_hex.len() != 1 {
            return Err(Error::HarnessGenerationFailed(format!(
                "`{}` declares {} outputs; SYNTH harnesses support exactly one return value",
                sig.name,
                sig.outputs_hex.len()
            )));
        }
        let args: Vec<String> = case.inputs.iter().map(|i| literal_for(CodeLevel::Synth, i)).collect::<Result<_>>()?;
        let print = if sig.outputs_hex[0] {
            format!("std::fprintf(hwf_out, \"CASE {} 0x%llx\\n\", (unsigned long long)(hwf_v));", case.id)
        } else {
            format!("std::fprintf(hwf_out, \"CASE {} %lld\\n\", (long long)(hwf_v));", case.id)
        };
        writeln!(h, "    {{ auto hwf_v = {}({}); {} std::fflush(hwf_out); }}", case.entry, args.join(", "), print)
            .expect("string write");
    }
    h.push_str("    std::fclose(hwf_out);\n    return 0;\n}\n");
    Ok(h)
}

fn parse_case_log(log: &str) -> BTreeMap<String, Observation> {
    let mut out = BTreeMap::new();
    for line in log.lines() {
        let Some(rest) = line.strip_prefix("CASE ") else { continue };
        let (id, values) = rest.split_once(' ').unwrap_or((rest, ""));
        let obs = match values.strip_prefix("!ERROR") {
            Some(msg) => Err(msg.trim().to_string()),
            None => Ok(values.split_whitespace().map(str::to_string).collect()),
        };
        out.entry(id.to_string()).or_insert(obs);
    }
    out
}

fn failure_reason(exec: &ExecutionResult) -> String {
    let first = exec.stderr.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    format!("{:?} (exit {}): {}", exec.status, exec.exit_code, first.trim())
}

/// Runs every case against `source` in one execution and returns one
/// observation per case, in order, plus the raw execution result.
pub fn execute_cases(
    exec: &mut dyn Executor,
    source: &IntegratedSource,
    cases: &[HarnessCase],
    signatures: &dyn Fn(&str) -> Option<EntrySignature>,
) -> Result<(Vec<Observation>, ExecutionResult)> {
    if !source.level.is_executable() {
        return Err(Error::Precondition("PSEUDO sources cannot be executed".into()));
    }
    let mut seen = HashSet::new();
    let mut resolved = Vec::with_capacity(cases.len());
    for case in cases {
        if case.id.is_empty() || !case.id.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
            return Err(Error::HarnessGenerationFailed(format!("invalid case id `{}`", case.id)));
        }
        if !seen.insert(case.id.clone()) {
            return Err(Error::HarnessGenerationFailed(format!("duplicate case id `{}`", case.id)));
        }
        if !is_identifier(&case.entry) {
            return Err(Error::HarnessGenerationFailed(format!("invalid entry `{}`", case.entry)));
        }
        let sig = signatures(&case.entry)
            .ok_or_else(|| Error::HarnessGenerationFailed(format!("no declared signature for `{}`", case.entry)))?;
        let declared = parameter_count(source, &case.entry).ok_or_else(|| {
            Error::HarnessGenerationFailed(format!("`{}` is not defined in the {} source", case.entry, source.level))
        })?;
        if declared != sig.inputs {
            return Err(Error::HarnessGenerationFailed(format!(
                "`{}` takes {declared} parameter(s) in the source but its signature declares {}",
                case.entry, sig.inputs
            )));
        }
        if case.inputs.len() != sig.inputs {
            return Err(Error::HarnessGenerationFailed(format!(
                "case `{}` supplies {} input(s) for `{}` which declares {}",
                case.id,
                case.inputs.len(),
                case.entry,
                sig.inputs
            )));
        }
        resolved.push((case.clone(), sig));
    }
    let pairs: Vec<(HarnessCase, &EntrySignature)> = resolved.iter().map(|(c, s)| (c.clone(), s)).collect();
    let harness = match source.level {
        CodeLevel::Script => script_harness(&pairs)?,
        _ => synth_harness(&pairs)?,
    };
    let result = exec.run(source.level, &source.text, &harness)?;
    let mut log = parse_case_log(&result.case_log);
    let reason = failure_reason(&result);
    let observations = cases
        .iter()
        .map(|c| match log.remove(&c.id) {
            Some(obs) => obs,
            None if result.status == ExecStatus::Ok => Err("no result line emitted".to_string()),
            None => Err(reason.clone()),
        })
        .collect();
    Ok((observations, result))
}

/// Runs test cases (each against its own entry, defaulting to `entry`) and
/// grades them mechanically.
pub fn run_testcases(
    exec: &mut dyn Executor,
    source: &IntegratedSource,
    entry: &str,
    tests: &[TestCase],
    signatures: &dyn Fn(&str) -> Option<EntrySignature>,
) -> Result<(Vec<CaseResult>, ExecutionResult)> {
    if tests.is_empty() {
        return Err(Error::Precondition("run_testcases needs at least one case".into()));
    }
    if let Some(t) = tests.iter().find(|t| t.level != source.level) {
        return Err(Error::Precondition(format!("case `{}` targets {} but source is {}", t.id, t.level, source.level)));
    }
    let calls: Vec<HarnessCase> = tests
        .iter()
        .map(|t| HarnessCase {
            id: t.id.clone(),
            entry: t.entry.clone().unwrap_or_else(|| entry.to_string()),
            inputs: t.inputs.clone(),
        })
        .collect();
    let (observations, exec_result) = execute_cases(exec, source, &calls, signatures)?;
    let results = tests
        .iter()
        .zip(observations)
        .map(|(t, obs)| match obs {
            Ok(values) => {
                let pass = values.len() == t.expected.len()
                    && values.iter().zip(&t.expected).all(|(o, e)| canonical_eq(o, e));
                CaseResult {
                    id: t.id.clone(),
                    status: if pass { CaseStatus::Pass } else { CaseStatus::Fail },
                    observed: values.join(" "),
                }
            }
            Err(msg) => CaseResult { id: t.id.clone(), status: CaseStatus::Error, observed: msg },
        })
        .collect();
    Ok((results, exec_result))
}
