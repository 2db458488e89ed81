//! Specification bundles: a `manifest.json` plus one text file per section and
//! the attachment files it references.
//!
//! ```text
//! bundle/
//!   manifest.json        {"format_version": 1, "doc_id", "title", "sections": [...]}
//!   sections/<id>.txt
//!   figures/..., tables/...
//!   golden.json          optional golden vectors for the top-level target
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GOLDEN_FILE: &str = "golden.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const TRUNCATION_MARKER: &str = "[...]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttachmentKind {
    Figure,
    Table,
    EquationImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub path: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub section_id: String,
    pub heading: String,
    pub body_text: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub doc_id: String,
    pub title: String,
    pub sections: Vec<Section>,
}

impl SpecDocument {
    pub fn section(&self, id: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.section_id == id)
    }

    pub fn section_ids(&self) -> Vec<String> {
        self.sections.iter().map(|s| s.section_id.clone()).collect()
    }
}

// On-disk manifest records. Section text lives in separate files.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    doc_id: String,
    title: String,
    sections: Vec<ManifestSection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSection {
    section_id: String,
    heading: String,
    text: String,
    #[serde(default)]
    attachments: Vec<Attachment>,
}

/// A golden input/expected vector for whole-program verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub id: String,
    pub inputs: Vec<String>,
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenVectors {
    pub entry: String,
    pub cases: Vec<GoldenCase>,
}

/// A loaded bundle: the document plus where it lives and its optional golden vectors.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub root: PathBuf,
    pub document: SpecDocument,
    pub golden: Option<GoldenVectors>,
}

pub fn load_bundle(bundle_path: &Path) -> Result<Bundle> {
    let document = load_manifest(bundle_path)?;
    let golden_path = bundle_path.join(GOLDEN_FILE);
    let golden = if golden_path.exists() {
        let raw = fs::read_to_string(&golden_path)
            .map_err(|e| Error::io(format!("reading {}", golden_path.display()), e))?;
        Some(
            serde_json::from_str(&raw)
                .map_err(|e| Error::ManifestMalformed(format!("{GOLDEN_FILE}: {e}")))?,
        )
    } else {
        None
    };
    Ok(Bundle { root: bundle_path.to_path_buf(), document, golden })
}

/// Returns true when `rel` is a plain relative path that cannot leave its root.
fn is_contained(rel: &str) -> bool {
    let path = Path::new(rel);
    !rel.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

pub fn load_manifest(bundle_path: &Path) -> Result<SpecDocument> {
    let manifest_path = bundle_path.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::ManifestMalformed(format!("{}: {e}", manifest_path.display())))?;
    let manifest: ManifestFile =
        serde_json::from_str(&raw).map_err(|e| Error::ManifestMalformed(e.to_string()))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::ManifestMalformed(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.sections.is_empty() {
        return Err(Error::ManifestMalformed("manifest lists no sections".into()));
    }
    let root = bundle_path
        .canonicalize()
        .map_err(|e| Error::io(format!("resolving {}", bundle_path.display()), e))?;

    let mut seen = HashSet::new();
    let mut sections = Vec::with_capacity(manifest.sections.len());
    for rec in manifest.sections {
        if !seen.insert(rec.section_id.clone()) {
            return Err(Error::DuplicateSectionId(rec.section_id));
        }
        if !is_contained(&rec.text) {
            return Err(Error::ManifestMalformed(format!(
                "section `{}` text path `{}` escapes the bundle",
                rec.section_id, rec.text
            )));
        }
        let text_path = root.join(&rec.text);
        let body_text = fs::read_to_string(&text_path).map_err(|e| {
            Error::ManifestMalformed(format!("section `{}` text {}: {e}", rec.section_id, rec.text))
        })?;
        for att in &rec.attachments {
            if !is_contained(&att.path) {
                return Err(Error::ManifestMalformed(format!(
                    "attachment path `{}` escapes the bundle",
                    att.path
                )));
            }
            let resolved = root.join(&att.path);
            let real = resolved
                .canonicalize()
                .map_err(|_| Error::AttachmentMissing(PathBuf::from(&att.path)))?;
            if !real.starts_with(&root) {
                return Err(Error::ManifestMalformed(format!(
                    "attachment `{}` resolves outside the bundle",
                    att.path
                )));
            }
            if !real.is_file() {
                return Err(Error::AttachmentMissing(PathBuf::from(&att.path)));
            }
        }
        sections.push(Section {
            section_id: rec.section_id,
            heading: rec.heading,
            body_text,
            attachments: rec.attachments,
        });
    }
    Ok(SpecDocument { doc_id: manifest.doc_id, title: manifest.title, sections })
}

/// Writes `doc` as a bundle under `dir`. Attachment files are copied from
/// `attachments_from` when given; otherwise they must already exist under `dir`.
pub fn write_bundle(doc: &SpecDocument, dir: &Path, attachments_from: Option<&Path>) -> Result<()> {
    let io = |what: &str, e| Error::io(format!("writing bundle {what}"), e);
    fs::create_dir_all(dir.join("sections")).map_err(|e| io("sections dir", e))?;
    let mut records = Vec::new();
    for (i, s) in doc.sections.iter().enumerate() {
        let text = format!("sections/{i:03}.txt");
        fs::write(dir.join(&text), &s.body_text).map_err(|e| io(&text, e))?;
        if let Some(src) = attachments_from {
            for att in &s.attachments {
                let dest = dir.join(&att.path);
                if let Some(parent) = dest.parent() {
                    fs::create_dir_all(parent).map_err(|e| io(&att.path, e))?;
                }
                fs::copy(src.join(&att.path), &dest).map_err(|e| io(&att.path, e))?;
            }
        }
        records.push(ManifestSection {
            section_id: s.section_id.clone(),
            heading: s.heading.clone(),
            text,
            attachments: s.attachments.clone(),
        });
    }
    let manifest = ManifestFile {
        format_version: MANIFEST_FORMAT_VERSION,
        doc_id: doc.doc_id.clone(),
        title: doc.title.clone(),
        sections: records,
    };
    let raw = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), raw + "\n").map_err(|e| io(MANIFEST_FILE, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    NoSections,
    DuplicateSectionId,
    EmptySection,
    AttachmentPathEscape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub section_id: Option<String>,
    pub code: IssueCode,
    pub reason: String,
}

pub fn validate_document(doc: &SpecDocument) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    if doc.sections.is_empty() {
        issues.push(ValidationIssue {
            section_id: None,
            code: IssueCode::NoSections,
            reason: "document has no sections".into(),
        });
    }
    let mut seen = HashSet::new();
    for s in &doc.sections {
        if !seen.insert(s.section_id.as_str()) {
            issues.push(ValidationIssue {
                section_id: Some(s.section_id.clone()),
                code: IssueCode::DuplicateSectionId,
                reason: format!("section id `{}` appears more than once", s.section_id),
            });
        }
        if s.body_text.trim().is_empty() && s.attachments.is_empty() {
            issues.push(ValidationIssue {
                section_id: Some(s.section_id.clone()),
                code: IssueCode::EmptySection,
                reason: "section has neither text nor attachments".into(),
            });
        }
        for att in &s.attachments {
            if !is_contained(&att.path) {
                issues.push(ValidationIssue {
                    section_id: Some(s.section_id.clone()),
                    code: IssueCode::AttachmentPathEscape,
                    reason: format!("attachment path `{}` escapes the bundle", att.path),
                });
            }
        }
    }
    issues
}

/// Text handed to an agent plus the attachments whose placeholders survived truncation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub text: String,
    pub attachments: Vec<String>,
}

pub fn attachment_placeholder(path: &str) -> String {
    format!("[[ATTACH:{path}]]")
}

/// Renders the requested sections in document order, cut to at most
/// `char_budget` characters. A cut never splits a placeholder token.
pub fn render_context(doc: &SpecDocument, section_ids: &[String], char_budget: usize) -> Result<PromptContext> {
    if char_budget == 0 {
        return Err(Error::Precondition("char_budget must be positive".into()));
    }
    for id in section_ids {
        if doc.section(id).is_none() {
            return Err(Error::UnknownSectionId(id.clone()));
        }
    }
    // (char offset range of each placeholder, path)
    let mut tokens: Vec<(usize, usize, String)> = Vec::new();
    let mut text = String::new();
    let mut len = 0usize;
    let push = |text: &mut String, len: &mut usize, s: &str| {
        text.push_str(s);
        *len += s.chars().count();
    };
    for section in doc.sections.iter().filter(|s| section_ids.contains(&s.section_id)) {
        if !text.is_empty() {
            push(&mut text, &mut len, "\n");
        }
        push(&mut text, &mut len, &format!("## {} {}\n", section.section_id, section.heading));
        push(&mut text, &mut len, &section.body_text);
        if !section.body_text.is_empty() && !section.body_text.ends_with('\n') {
            push(&mut text, &mut len, "\n");
        }
        for att in &section.attachments {
            let token = attachment_placeholder(&att.path);
            let start = len;
            push(&mut text, &mut len, &token);
            tokens.push((start, len, att.path.clone()));
            push(&mut text, &mut len, &format!(" {}\n", att.caption));
        }
    }

    if len <= char_budget {
        let attachments = tokens.into_iter().map(|(_, _, p)| p).collect();
        return Ok(PromptContext { text, attachments });
    }

    let marker_len = TRUNCATION_MARKER.chars().count();
    if char_budget <= marker_len {
        return Ok(PromptContext {
            text: TRUNCATION_MARKER.chars().take(char_budget).collect(),
            attachments: Vec::new(),
        });
    }
    let mut cut = char_budget - marker_len;
    if let Some(&(start, _, _)) = tokens.iter().find(|(s, e, _)| *s < cut && cut < *e) {
        cut = start;
    }
    let mut out: String = text.chars().take(cut).collect();
    out.push_str(TRUNCATION_MARKER);
    let attachments = tokens.into_iter().filter(|(_, e, _)| *e <= cut).map(|(_, _, p)| p).collect();
    Ok(PromptContext { text: out, attachments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> SpecDocument {
        SpecDocument {
            doc_id: "d".into(),
            title: "T".into(),
            sections: vec![
                Section {
                    section_id: "s1".into(),
                    heading: "Intro".into(),
                    body_text: "The cipher operates on sixteen-bit blocks.".into(),
                    attachments: vec![],
                },
                Section {
                    section_id: "s2".into(),
                    heading: "Tables".into(),
                    body_text: "See the table.".into(),
                    attachments: vec![Attachment {
                        kind: AttachmentKind::Figure,
                        path: "figures/f1.png".into(),
                        caption: "Figure 1".into(),
                    }],
                },
            ],
        }
    }

    #[test]
    fn full_budget_renders_whole_section() {
        let ctx = render_context(&doc(), &["s1".into()], 10_000).unwrap();
        assert_eq!(ctx.text, "## s1 Intro\nThe cipher operates on sixteen-bit blocks.\n");
        assert!(ctx.attachments.is_empty());
    }

    #[test]
    fn tight_budget_truncates_with_marker() {
        let ctx = render_context(&doc(), &["s1".into()], 10).unwrap();
        assert_eq!(ctx.text.chars().count(), 10);
        assert!(ctx.text.ends_with(TRUNCATION_MARKER));
    }

    #[test]
    fn attachment_placeholder_appears_once() {
        let ctx = render_context(&doc(), &["s2".into()], 10_000).unwrap();
        assert_eq!(ctx.text.matches("[[ATTACH:").count(), 1);
        assert_eq!(ctx.attachments, vec!["figures/f1.png".to_string()]);
    }

    #[test]
    fn cut_never_splits_placeholder() {
        let d = doc();
        let full = render_context(&d, &["s2".into()], 10_000).unwrap().text;
        for budget in 1..full.chars().count() {
            let ctx = render_context(&d, &["s2".into()], budget).unwrap();
            assert!(ctx.text.chars().count() <= budget);
            let opens = ctx.text.matches("[[ATTACH:").count();
            let closes = ctx.text.matches("]]").count();
            assert_eq!(opens, closes, "budget {budget}: {}", ctx.text);
            assert_eq!(opens, ctx.attachments.len());
        }
    }

    #[test]
    fn unknown_section_rejected() {
        let err = render_context(&doc(), &["nope".into()], 100).unwrap_err();
        assert_eq!(err.code(), "UNKNOWN_SECTION_ID");
    }

    #[test]
    fn validation_flags_duplicates_and_empty_sections() {
        assert!(validate_document(&doc()).is_empty());
        let mut d = doc();
        d.sections.push(d.sections[0].clone());
        let issues = validate_document(&d);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].code, IssueCode::DuplicateSectionId);
        assert_eq!(issues[0].section_id.as_deref(), Some("s1"));

        let mut d = doc();
        d.sections[0].body_text.clear();
        let issues = validate_document(&d);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].code, IssueCode::EmptySection);
    }

    #[test]
    fn manifest_round_trip_and_missing_attachment() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        fs::create_dir_all(src.join("figures")).unwrap();
        fs::write(src.join("figures/f1.png"), b"png").unwrap();
        let out = tmp.path().join("bundle");
        write_bundle(&doc(), &out, Some(&src)).unwrap();
        assert_eq!(load_manifest(&out).unwrap(), doc());

        fs::remove_file(out.join("figures/f1.png")).unwrap();
        assert_eq!(load_manifest(&out).unwrap_err().code(), "ATTACHMENT_MISSING");
    }

    #[test]
    fn manifest_rejects_duplicates_and_escapes() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        fs::write(dir.join("a.txt"), "x").unwrap();
        let dup = r#"{"format_version":1,"doc_id":"d","title":"t","sections":[
            {"section_id":"a","heading":"h","text":"a.txt"},
            {"section_id":"a","heading":"h","text":"a.txt"}]}"#;
        fs::write(dir.join(MANIFEST_FILE), dup).unwrap();
        assert_eq!(load_manifest(dir).unwrap_err().code(), "DUPLICATE_SECTION_ID");

        let escape = r#"{"format_version":1,"doc_id":"d","title":"t","sections":[
            {"section_id":"a","heading":"h","text":"a.txt",
             "attachments":[{"kind":"FIGURE","path":"../etc/passwd","caption":""}]}]}"#;
        fs::write(dir.join(MANIFEST_FILE), escape).unwrap();
        assert_eq!(load_manifest(dir).unwrap_err().code(), "MANIFEST_MALFORMED");

        fs::write(dir.join(MANIFEST_FILE), r#"{"doc_id":"d"}"#).unwrap();
        assert_eq!(load_manifest(dir).unwrap_err().code(), "MANIFEST_MALFORMED");
    }
}
