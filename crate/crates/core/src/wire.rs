//! Small helpers for the line- and block-oriented formats agents speak.

/// Renders `@key value` header lines. Scripted transcripts match on these.
pub fn header(pairs: &[(&str, &str)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push('@');
        out.push_str(k);
        if !v.is_empty() {
            out.push(' ');
            out.push_str(v);
        }
        out.push('\n');
    }
    out
}

/// Body of the first fenced block whose info string is `lang`.
pub fn fenced_block<'a>(text: &'a str, lang: &str) -> Option<&'a str> {
    let mut start = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        match start {
            None if t.strip_prefix("```").is_some_and(|info| info.trim() == lang) => start = Some(offset + line.len()),
            Some(s) if t == "```" => return Some(&text[s..offset]),
            _ => {}
        }
        offset += line.len();
    }
    None
}

/// Value of the first `KEY:` line (case-sensitive key, trimmed value).
pub fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.trim_start().strip_prefix(key)?.strip_prefix(':').map(str::trim))
}

/// All `- item` bullet lines.
pub fn bullets(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.trim_start().strip_prefix("- ").map(|s| s.trim().to_string()))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Stable pretty JSON (sorted keys come from serde_json's default map).
pub fn pretty<T: serde::Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string_pretty(&v).expect("json value")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_blocks() {
        let t = "prose\n```json\n{\"a\": 1}\n```\nmore\n```json\n{}\n```";
        assert_eq!(fenced_block(t, "json"), Some("{\"a\": 1}\n"));
        assert_eq!(fenced_block("```json\n{}", "json"), None);
        assert_eq!(fenced_block("```cpp\nx\n```", "json"), None);
    }

    #[test]
    fn fields_and_bullets() {
        let t = "VERDICT: REVISE\n- missing width\n-not a bullet\n  - second\n";
        assert_eq!(field(t, "VERDICT"), Some("REVISE"));
        assert_eq!(field(t, "SUSPICION"), None);
        assert_eq!(bullets(t), vec!["missing width", "second"]);
        assert_eq!(header(&[("task", "draft"), ("reprompt", "")]), "@task draft\n@reprompt\n");
    }
}
