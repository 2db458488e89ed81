//! Random sources and patches for each level grammar, plus the property
//! check shared by the patcher suite and the acceptance target.

use hwforge_core::patcher::{apply_patch, normalize_body, parse_patch, render_patch, IntegratedSource, PatchBlock};
use hwforge_core::CodeLevel;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

const NAMES: &[&str] = &["Alpha", "Beta", "Gamma", "Delta", "Eps", "Zeta", "Eta_2", "theta"];

fn pseudo_line() -> impl Strategy<Value = String> {
    prop_oneof![
        (0u32..99).prop_map(|n| format!("  x <- x + {n}")),
        Just("  FOR i FROM 0 TO 3".to_string()),
        Just("  END FOR".to_string()),
        Just("  IF x > 2 THEN y <- x".to_string()),
        Just("  RETURN x".to_string()),
        Just("".to_string()),
        Just("  // FUNCTION is a keyword here only in prose".to_string()),
    ]
}

fn script_line() -> impl Strategy<Value = String> {
    prop_oneof![
        (0u32..99).prop_map(|n| format!("    x = x + {n}")),
        Just("    if x:\n        x -= 1".to_string()),
        Just("    for i in range(4):\n        x ^= i".to_string()),
        Just("    s = \"def not_a_header(\"".to_string()),
        Just("    # comment".to_string()),
        Just("".to_string()),
        Just("    return x".to_string()),
    ]
}

fn synth_stmt() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (0u32..99).prop_map(|n| format!("    x += {n};")),
        Just("    // a } in a comment".to_string()),
        Just("    const char* s = \"{ not a brace\";".to_string()),
        Just("    char c = '}';".to_string()),
        Just("    /* multi\n       line { */".to_string()),
        Just("".to_string()),
    ];
    leaf.prop_recursive(2, 8, 4, |inner| {
        prop::collection::vec(inner, 0..3).prop_map(|v| {
            let body: String = v.iter().map(|l| format!("  {l}\n")).collect();
            format!("    if (x) {{\n{body}    }}")
        })
    })
}

/// One well-formed definition of `name` at `level`, normalized.
pub fn definition(level: CodeLevel, name: String) -> BoxedStrategy<String> {
    match level {
        CodeLevel::Pseudo => prop::collection::vec(pseudo_line(), 0..6)
            .prop_map(move |ls| normalize_body(&format!("FUNCTION {name}(x)\n{}END FUNCTION\n", join(&ls))))
            .boxed(),
        CodeLevel::Script => prop::collection::vec(script_line(), 0..6)
            .prop_map(move |ls| normalize_body(&format!("def {name}(x):\n{}    return x\n", join(&ls))))
            .boxed(),
        CodeLevel::Synth => (prop::collection::vec(synth_stmt(), 0..5), prop::bool::ANY)
            .prop_map(move |(ls, split_header)| {
                let header = if split_header {
                    format!("uint16_t {name}(uint16_t x,\n                uint8_t n)\n{{")
                } else {
                    format!("static inline uint16_t {name}(uint16_t x) {{")
                };
                normalize_body(&format!("{header}\n{}    return x;\n}}\n", join(&ls)))
            })
            .boxed(),
    }
}

fn join(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

fn separator(level: CodeLevel) -> BoxedStrategy<String> {
    match level {
        CodeLevel::Pseudo => prop_oneof![Just("\n".to_string()), Just("CONSTANT K = 3\n\n".to_string()), Just("".to_string())].boxed(),
        CodeLevel::Script => prop_oneof![Just("\n".to_string()), Just("K = 3\n\n".to_string()), Just("\n\n".to_string())].boxed(),
        CodeLevel::Synth => prop_oneof![
            Just("\n".to_string()),
            Just("#include <cstdint>\n\n".to_string()),
            Just("// helper section\n".to_string()),
            Just("static const uint8_t T[2] = {1, 2};\n\n".to_string()),
        ]
        .boxed(),
    }
}

/// A random integrated source and a patch that either replaces one of its
/// definitions or appends a new one.
pub fn source_and_patch(level: CodeLevel) -> BoxedStrategy<(IntegratedSource, PatchBlock)> {
    let names = prop::sample::subsequence(NAMES.to_vec(), 1..=5).prop_shuffle();
    (names, prop::bool::ANY, any::<prop::sample::Index>())
        .prop_flat_map(move |(names, append, pick)| {
            let n = names.len();
            let defs: Vec<_> = names.iter().map(|nm| definition(level, nm.to_string())).collect();
            let seps = prop::collection::vec(separator(level), n + 1);
            let target = if append {
                NAMES.iter().find(|c| !names.contains(c)).copied().unwrap_or(names[0]).to_string()
            } else {
                names[pick.index(n)].to_string()
            };
            let patch_body = definition(level, target.clone());
            (defs, seps, Just(target), patch_body)
        })
        .prop_map(move |(defs, seps, target, body)| {
            let mut text = String::new();
            for (i, d) in defs.iter().enumerate() {
                text.push_str(&seps[i]);
                text.push_str(d);
            }
            text.push_str(&seps[defs.len()]);
            let src = IntegratedSource::new(level, text).expect("generated source is well-formed");
            (src, PatchBlock { subfunction_name: target, body })
        })
        .boxed()
}

/// Idempotence, locality and round-trip for one pair.
pub fn check_pair(src: &IntegratedSource, block: &PatchBlock) -> Result<(), TestCaseError> {
    let name = &block.subfunction_name;
    let once = apply_patch(src, block).map_err(|e| TestCaseError::fail(format!("apply failed: {e}\n{}", src.text)))?;
    let twice = apply_patch(&once, block).map_err(|e| TestCaseError::fail(format!("re-apply failed: {e}")))?;
    prop_assert_eq!(&once.text, &twice.text, "idempotence");

    // Locality: bytes outside the replaced span, and every other definition, are untouched.
    match src.index.get(name) {
        Some(span) => {
            let r = src.byte_range(*span);
            let new_r = once.byte_range(once.index[name]);
            prop_assert_eq!(&src.text[..r.start], &once.text[..new_r.start], "prefix changed");
            prop_assert_eq!(&src.text[r.end..], &once.text[new_r.end..], "suffix changed");
        }
        None => prop_assert!(once.text.starts_with(src.text.trim_end_matches('\n')), "append rewrote existing text"),
    }
    for other in src.index.keys().filter(|k| *k != name) {
        prop_assert_eq!(src.extract(other), once.extract(other), "definition {} changed", other);
    }
    prop_assert_eq!(once.index.len(), src.index.len() + usize::from(!src.index.contains_key(name)));

    // Round-trip: render → parse is the identity and the spliced text is the body.
    let parsed = parse_patch(&render_patch(block)).map_err(|e| TestCaseError::fail(format!("parse failed: {e}")))?;
    prop_assert_eq!(&parsed, block);
    prop_assert_eq!(once.extract(name), Some(normalize_body(&block.body)));
    let reparsed = parse_patch(&render_patch(&PatchBlock { subfunction_name: name.clone(), body: once.extract(name).unwrap() }))
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&reparsed, block);
    Ok(())
}

/// A fenced response whose fences are `len` asterisks long.
pub fn fenced_with(len: usize, name: &str, body: &str) -> String {
    let fence = "*".repeat(len);
    format!("{fence}\nSUBFUNCTION: {name}\n{body}{fence}\n")
}
