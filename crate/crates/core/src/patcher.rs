//! Marker-protocol patches and function-level splicing.
//!
//! Agents answer with exactly one sub-function wrapped in a fence:
//!
//! ```text
//! ********************
//! SUBFUNCTION: AddRoundKey
//! <code>
//! ********************
//! ```
//!
//! The block replaces the existing definition of that name in the integrated
//! source for its level, or is appended when the name is not yet defined.
//! Definitions are located with one rule per level:
//!
//! * PSEUDO: `FUNCTION <name>` through the next `END FUNCTION` line.
//! * SCRIPT: a column-0 `def <name>(` through the last line before the next
//!   non-blank column-0 line (trailing blank lines excluded).
//! * SYNTH: a column-0 `<type> <name>(` header through its balanced closing brace.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::level::CodeLevel;

pub const FENCE_LEN: usize = 20;
pub const NAME_LABEL: &str = "SUBFUNCTION:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBlock {
    pub subfunction_name: String,
    pub body: String,
}

/// Line span of one definition: `start_line` inclusive, `end_line` exclusive, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start_line: usize,
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegratedSource {
    pub level: CodeLevel,
    pub text: String,
    pub index: BTreeMap<String, Span>,
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

fn is_fence(line: &str) -> bool {
    let t = line.trim();
    t.len() == FENCE_LEN && t.bytes().all(|b| b == b'*')
}

/// Collapses trailing blank lines and guarantees exactly one final newline.
pub fn normalize_body(body: &str) -> String {
    let mut lines: Vec<&str> = body.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return String::new();
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// Extracts the first fenced block from a raw agent response.
pub fn parse_patch(raw: &str) -> Result<PatchBlock> {
    let lines: Vec<&str> = raw.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    let open = lines.iter().position(|l| is_fence(l)).ok_or(Error::NoFenceFound)?;
    let label = lines.get(open + 1).map(|l| l.trim()).unwrap_or("");
    let name = label
        .strip_prefix(NAME_LABEL)
        .map(str::trim)
        .filter(|n| is_identifier(n))
        .ok_or(Error::MissingNameLabel(open + 1))?;
    let close = lines[open + 2..]
        .iter()
        .position(|l| is_fence(l))
        .map(|p| p + open + 2)
        .ok_or(Error::UnterminatedFence(open + 1))?;
    let body = normalize_body(&lines[open + 2..close].join("\n"));
    if body.is_empty() {
        return Err(Error::PatchUnparseable(format!("block for `{name}` has an empty body")));
    }
    let extra = lines[close + 1..].iter().filter(|l| is_fence(l)).count() / 2;
    if extra > 0 {
        tracing::warn!(name, extra, "response carried additional patch blocks; only the first is used");
    }
    Ok(PatchBlock { subfunction_name: name.to_string(), body })
}

/// Renders a block in the marker protocol (inverse of [`parse_patch`]).
pub fn render_patch(block: &PatchBlock) -> String {
    let fence = "*".repeat(FENCE_LEN);
    format!("{fence}\n{NAME_LABEL} {}\n{}{fence}\n", block.subfunction_name, normalize_body(&block.body))
}

fn pseudo_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*FUNCTION\s+([A-Za-z_]\w*)\b").unwrap())
}

fn pseudo_end() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*END\s+FUNCTION\b").unwrap())
}

fn script_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^def\s+([A-Za-z_]\w*)\s*\(").unwrap())
}

fn synth_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(?:[A-Za-z_][\w:<>,\*&\s]*?[\s\*&])?([A-Za-z_]\w*)\s*\(").unwrap()
    })
}

const SYNTH_KEYWORDS: &[&str] = &[
    "if", "for", "while", "switch", "return", "sizeof", "do", "else", "case", "static_assert",
    "decltype", "alignof", "typedef", "using", "namespace",
];

/// Replaces comments and string/char literal contents with spaces, keeping
/// newlines and byte offsets intact.
pub fn mask_c_like(text: &str) -> String {
    #[derive(PartialEq)]
    enum St {
        Code,
        Line,
        Block,
        Str(u8),
    }
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut st = St::Code;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let next = bytes.get(i + 1).copied();
        match st {
            St::Code => match (b, next) {
                (b'/', Some(b'/')) => {
                    st = St::Line;
                    out.extend_from_slice(b"  ");
                    i += 2;
                    continue;
                }
                (b'/', Some(b'*')) => {
                    st = St::Block;
                    out.extend_from_slice(b"  ");
                    i += 2;
                    continue;
                }
                (b'"', _) | (b'\'', _) => {
                    st = St::Str(b);
                    out.push(b);
                }
                _ => out.push(b),
            },
            St::Line => {
                if b == b'\n' {
                    st = St::Code;
                    out.push(b'\n');
                } else {
                    out.push(if b.is_ascii() { b' ' } else { b });
                }
            }
            St::Block => {
                if b == b'*' && next == Some(b'/') {
                    st = St::Code;
                    out.extend_from_slice(b"  ");
                    i += 2;
                    continue;
                }
                out.push(if b == b'\n' || !b.is_ascii() { b } else { b' ' });
            }
            St::Str(q) => {
                if b == b'\\' && next.is_some() {
                    out.push(b' ');
                    out.push(if next == Some(b'\n') { b'\n' } else { b' ' });
                    i += 2;
                    continue;
                }
                if b == q {
                    st = St::Code;
                    out.push(b);
                } else if b == b'\n' {
                    // unterminated literal; resynchronise at end of line
                    st = St::Code;
                    out.push(b'\n');
                } else {
                    out.push(if b.is_ascii() { b' ' } else { b });
                }
            }
        }
        i += 1;
    }
    // Only ASCII bytes were substituted, so UTF-8 validity is preserved.
    String::from_utf8(out).expect("masking preserves utf-8")
}

/// Lines of `text`, each including its terminator.
fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

fn strip_eol(l: &str) -> &str {
    let l = l.strip_suffix('\n').unwrap_or(l);
    l.strip_suffix('\r').unwrap_or(l)
}

fn malformed(level: CodeLevel, line: usize, reason: impl Into<String>) -> Error {
    Error::SourceMalformed { level, line: line + 1, reason: reason.into() }
}

fn index_pseudo(lines: &[&str]) -> Result<Vec<(String, Span)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if let Some(cap) = pseudo_header().captures(strip_eol(lines[i])) {
            let name = cap[1].to_string();
            let mut j = i + 1;
            loop {
                let Some(l) = lines.get(j) else {
                    return Err(malformed(CodeLevel::Pseudo, i, format!("`{name}` lacks END FUNCTION")));
                };
                let l = strip_eol(l);
                if pseudo_end().is_match(l) {
                    break;
                }
                if pseudo_header().is_match(l) {
                    return Err(malformed(CodeLevel::Pseudo, j, "nested FUNCTION header"));
                }
                j += 1;
            }
            out.push((name, Span { start_line: i, end_line: j + 1 }));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

fn index_script(lines: &[&str]) -> Result<Vec<(String, Span)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if let Some(cap) = script_header().captures(strip_eol(lines[i])) {
            let name = cap[1].to_string();
            let mut last = i;
            let mut j = i + 1;
            while j < lines.len() {
                let l = strip_eol(lines[j]);
                if l.trim().is_empty() {
                    j += 1;
                    continue;
                }
                if !l.starts_with([' ', '\t']) {
                    break;
                }
                last = j;
                j += 1;
            }
            out.push((name, Span { start_line: i, end_line: last + 1 }));
            i = last + 1;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

fn index_synth(text: &str) -> Result<Vec<(String, Span)>> {
    let masked = mask_c_like(text);
    let lines = split_lines(&masked);
    let mut out = Vec::new();
    let mut depth: i64 = 0;
    let mut i = 0;
    while i < lines.len() {
        let line = strip_eol(lines[i]);
        let candidate = if depth == 0 && !line.starts_with([' ', '\t', '#', '}']) {
            synth_header()
                .captures(line)
                .map(|c| c[1].to_string())
                .filter(|n| !SYNTH_KEYWORDS.contains(&n.as_str()))
        } else {
            None
        };
        if let Some(name) = candidate {
            // Scan forward for the first `{` or `;` at paren depth 0.
            let mut parens: i64 = 0;
            let mut body_open = None;
            'scan: for (j, l) in lines.iter().enumerate().skip(i) {
                for ch in l.chars() {
                    match ch {
                        '(' => parens += 1,
                        ')' => parens -= 1,
                        ';' if parens == 0 => break 'scan,
                        '{' if parens == 0 => {
                            body_open = Some(j);
                            break 'scan;
                        }
                        _ => {}
                    }
                }
            }
            if body_open.is_some() {
                let mut braces: i64 = 0;
                let mut opened = false;
                let mut close = None;
                'outer: for (j, l) in lines.iter().enumerate().skip(i) {
                    for ch in l.chars() {
                        match ch {
                            '{' => {
                                braces += 1;
                                opened = true;
                            }
                            '}' => {
                                braces -= 1;
                                if opened && braces == 0 {
                                    close = Some(j);
                                    break 'outer;
                                }
                            }
                            _ => {}
                        }
                    }
                }
                let close = close.ok_or_else(|| {
                    malformed(CodeLevel::Synth, i, format!("unbalanced braces in `{name}`"))
                })?;
                out.push((name, Span { start_line: i, end_line: close + 1 }));
                i = close + 1;
                continue;
            }
        }
        for ch in line.chars() {
            match ch {
                '{' => depth += 1,
                '}' => depth -= 1,
                _ => {}
            }
        }
        i += 1;
    }
    Ok(out)
}

fn index_definitions(level: CodeLevel, text: &str) -> Result<Vec<(String, Span)>> {
    match level {
        CodeLevel::Pseudo => index_pseudo(&split_lines(text)),
        CodeLevel::Script => index_script(&split_lines(text)),
        CodeLevel::Synth => index_synth(text),
    }
}

impl IntegratedSource {
    /// Indexes `text`, rejecting duplicate definitions.
    pub fn new(level: CodeLevel, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let mut index = BTreeMap::new();
        for (name, span) in index_definitions(level, &text)? {
            if index.insert(name.clone(), span).is_some() {
                return Err(Error::AmbiguousDefinition(name));
            }
        }
        Ok(IntegratedSource { level, text, index })
    }

    /// Starting skeleton for a level.
    pub fn skeleton(level: CodeLevel) -> Self {
        let text = match level {
            CodeLevel::Pseudo => "",
            CodeLevel::Script => "",
            CodeLevel::Synth => "#include <cstdint>\n\n",
        };
        IntegratedSource::new(level, text).expect("skeletons are well-formed")
    }

    /// Text of a definition, if present.
    pub fn extract(&self, name: &str) -> Option<String> {
        let span = self.index.get(name)?;
        Some(split_lines(&self.text)[span.start_line..span.end_line].concat())
    }

    /// Byte range covered by a span.
    pub fn byte_range(&self, span: Span) -> std::ops::Range<usize> {
        let lines = split_lines(&self.text);
        let start: usize = lines[..span.start_line].iter().map(|l| l.len()).sum();
        let len: usize = lines[span.start_line..span.end_line].iter().map(|l| l.len()).sum();
        start..start + len
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.text)
    }
}

pub fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

pub fn locate_function(source: &IntegratedSource, name: &str) -> Option<Span> {
    source.index.get(name).copied()
}

/// Splices `block` into `source`. Bytes outside the replaced span are kept as-is.
pub fn apply_patch(source: &IntegratedSource, block: &PatchBlock) -> Result<IntegratedSource> {
    let body = normalize_body(&block.body);
    let name = &block.subfunction_name;
    let defs = index_definitions(source.level, &body).map_err(|e| Error::PatchBodyMismatch {
        name: name.clone(),
        reason: e.to_string(),
    })?;
    let body_lines = split_lines(&body).len();
    match defs.as_slice() {
        [(n, span)] if n == name && span.start_line == 0 && span.end_line == body_lines => {}
        [(n, _)] if n != name => {
            return Err(Error::PatchBodyMismatch {
                name: name.clone(),
                reason: format!("body defines `{n}`"),
            })
        }
        [] => {
            return Err(Error::PatchBodyMismatch {
                name: name.clone(),
                reason: format!("no {} definition header found", source.level),
            })
        }
        [_] => {
            return Err(Error::PatchBodyMismatch {
                name: name.clone(),
                reason: "body contains lines outside the definition".into(),
            })
        }
        _ => {
            return Err(Error::PatchBodyMismatch {
                name: name.clone(),
                reason: format!("body holds {} definitions", defs.len()),
            })
        }
    }

    let text = match locate_function(source, name) {
        Some(span) => {
            let range = source.byte_range(span);
            let mut t = String::with_capacity(source.text.len() + body.len());
            t.push_str(&source.text[..range.start]);
            t.push_str(&body);
            t.push_str(&source.text[range.end..]);
            t
        }
        None => {
            let mut t = source.text.clone();
            if !t.is_empty() && !t.ends_with('\n') {
                t.push('\n');
            }
            if !t.is_empty() && !t.ends_with("\n\n") {
                t.push('\n');
            }
            t.push_str(&body);
            t
        }
    };
    IntegratedSource::new(source.level, text)
}

/// Parameter count of a definition's header, read from its first parenthesised list.
pub fn parameter_count(source: &IntegratedSource, name: &str) -> Option<usize> {
    let def = source.extract(name)?;
    let def = if source.level == CodeLevel::Synth { mask_c_like(&def) } else { def };
    let open = def.find(&format!("{name}")).and_then(|p| def[p..].find('(').map(|q| p + q))?;
    let mut depth = 0;
    let mut params = String::new();
    for ch in def[open..].chars() {
        match ch {
            '(' => {
                depth += 1;
                if depth == 1 {
                    continue;
                }
            }
            ')' => {
                depth -= 1;
                if depth == 0 {
                    break;
                }
            }
            _ => {}
        }
        params.push(ch);
    }
    let trimmed = params.trim();
    if trimmed.is_empty() || trimmed == "void" {
        return Some(0);
    }
    // Top-level commas only.
    let mut count = 1;
    let mut nest = 0;
    for ch in trimmed.chars() {
        match ch {
            '(' | '<' | '[' => nest += 1,
            ')' | '>' | ']' => nest -= 1,
            ',' if nest == 0 => count += 1,
            _ => {}
        }
    }
    Some(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fence(n: usize) -> String {
        "*".repeat(n)
    }

    #[test]
    fn parses_marker_block() {
        let raw = format!(
            "Here you go.\n{}\nSUBFUNCTION: AddRoundKey\ndef AddRoundKey(s, k):\n    return s ^ k\n\n{}\nThanks",
            fence(20),
            fence(20)
        );
        let b = parse_patch(&raw).unwrap();
        assert_eq!(b.subfunction_name, "AddRoundKey");
        assert_eq!(b.body, "def AddRoundKey(s, k):\n    return s ^ k\n");
    }

    #[test]
    fn fence_length_must_be_exactly_twenty() {
        for n in [19, 21] {
            let raw = format!("{}\nSUBFUNCTION: F\nx\n{}\n", fence(n), fence(n));
            assert!(matches!(parse_patch(&raw), Err(Error::NoFenceFound)), "length {n}");
        }
    }

    #[test]
    fn missing_label_and_unterminated() {
        let raw = format!("{}\ndef f():\n    pass\n{}\n", fence(20), fence(20));
        assert!(matches!(parse_patch(&raw), Err(Error::MissingNameLabel(_))));
        let raw = format!("{}\nSUBFUNCTION: f\ndef f():\n    pass\n", fence(20));
        assert!(matches!(parse_patch(&raw), Err(Error::UnterminatedFence(_))));
    }

    #[test]
    fn render_then_parse_is_identity() {
        let b = PatchBlock { subfunction_name: "F".into(), body: "FUNCTION F\nEND FUNCTION\n".into() };
        assert_eq!(parse_patch(&render_patch(&b)).unwrap(), b);
    }

    const SYNTH: &str = "#include <cstdint>\n\n// helper\nstatic const uint8_t T[2] = {1, 2};\n\nuint16_t A(uint16_t x) {\n    if (x) { return x; }\n    return 0; // }\n}\n\nuint16_t B(uint16_t x, uint16_t y);\n\nuint16_t C(uint16_t x,\n           uint16_t y)\n{\n    const char* s = \"{\";\n    return A(x) ^ y;\n}\n";

    #[test]
    fn synth_index_uses_brace_balancing() {
        let src = IntegratedSource::new(CodeLevel::Synth, SYNTH).unwrap();
        assert_eq!(src.index.len(), 2, "{:?}", src.index);
        assert_eq!(src.index["A"], Span { start_line: 5, end_line: 9 });
        assert_eq!(src.index["C"], Span { start_line: 12, end_line: 18 });
        assert_eq!(parameter_count(&src, "C"), Some(2));
        assert_eq!(parameter_count(&src, "A"), Some(1));
    }

    #[test]
    fn replace_grows_file_and_keeps_neighbours() {
        let src = IntegratedSource::new(
            CodeLevel::Script,
            "def a(x):\n    y = x\n    return y\n\ndef b(x):\n    return x\n",
        )
        .unwrap();
        let block = PatchBlock {
            subfunction_name: "a".into(),
            body: "def a(x):\n    y = x\n    y = y + 1\n    y = y - 1\n    return y\n".into(),
        };
        let out = apply_patch(&src, &block).unwrap();
        assert_eq!(out.text.lines().count(), src.text.lines().count() + 2);
        assert_eq!(out.extract("b"), src.extract("b"));
        assert_eq!(out.extract("a").unwrap(), block.body);
        assert_eq!(apply_patch(&out, &block).unwrap(), out);
    }

    #[test]
    fn first_insertion_into_empty_skeleton() {
        let sk = IntegratedSource::skeleton(CodeLevel::Pseudo);
        let block = PatchBlock {
            subfunction_name: "F".into(),
            body: "FUNCTION F(x)\n  RETURN x\nEND FUNCTION\n".into(),
        };
        let out = apply_patch(&sk, &block).unwrap();
        assert_eq!(out.text, format!("{}{}", sk.text, block.body));
        assert_eq!(locate_function(&out, "F"), Some(Span { start_line: 0, end_line: 3 }));
        assert_eq!(locate_function(&out, "G"), None);
    }

    #[test]
    fn duplicate_definitions_are_ambiguous() {
        let err = IntegratedSource::new(CodeLevel::Script, "def f():\n    pass\ndef f():\n    pass\n").unwrap_err();
        assert!(matches!(err, Error::AmbiguousDefinition(n) if n == "f"));
    }

    #[test]
    fn body_must_define_labelled_function() {
        let sk = IntegratedSource::skeleton(CodeLevel::Script);
        let block = PatchBlock { subfunction_name: "f".into(), body: "def g():\n    pass\n".into() };
        assert!(matches!(apply_patch(&sk, &block), Err(Error::PatchBodyMismatch { .. })));
        let block = PatchBlock { subfunction_name: "f".into(), body: "X = 1\ndef f():\n    pass\n".into() };
        assert!(matches!(apply_patch(&sk, &block), Err(Error::PatchBodyMismatch { .. })));
    }

    #[test]
    fn mask_preserves_layout() {
        let s = "a /* { */ b // }\n\"{\" '}' c";
        let m = mask_c_like(s);
        assert_eq!(m.len(), s.len());
        assert!(!m.contains('{') && !m.contains('}'));
        assert_eq!(m.lines().count(), 2);
    }
}
