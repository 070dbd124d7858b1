//! Pulling a JSON value out of free-form model output.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JsonExtractError {
    #[error("no JSON found in model output")]
    NoJsonFound,
    #[error("unbalanced braces starting at byte {0}")]
    UnbalancedBraces(usize),
    #[error("JSON parse failure after repair: {0}")]
    ParseFailure(String),
}

/// First balanced top-level `{...}` block, parsed.
///
/// Braces inside string literals are ignored. A fenced code block is
/// searched first when present. If the block does not parse, one repair
/// pass runs: smart quotes become ASCII quotes and trailing commas before
/// `}` or `]` are dropped.
pub fn extract_json(text: &str) -> Result<Value, JsonExtractError> {
    extract_delimited(text, '{', '}')
}

/// Same as [`extract_json`] but for a top-level `[...]` array.
pub fn extract_json_array(text: &str) -> Result<Vec<Value>, JsonExtractError> {
    match extract_delimited(text, '[', ']')? {
        Value::Array(items) => Ok(items),
        other => Err(JsonExtractError::ParseFailure(format!("expected array, got {other}"))),
    }
}

fn extract_delimited(text: &str, open: char, close: char) -> Result<Value, JsonExtractError> {
    let first = attempt(text, open, close, false);
    if let Ok(v) = first {
        return Ok(v);
    }
    match attempt(text, open, close, true) {
        Ok(v) => Ok(v),
        Err(JsonExtractError::NoJsonFound) => first,
        Err(e) => Err(e),
    }
}

fn attempt(text: &str, open: char, close: char, repair: bool) -> Result<Value, JsonExtractError> {
    let owned;
    let text = if repair {
        owned = normalize_quotes(text);
        owned.as_str()
    } else {
        text
    };
    let block = fenced_body(text)
        .and_then(|body| find_block(body, open, close).ok())
        .map(Ok)
        .unwrap_or_else(|| find_block(text, open, close))?;
    let candidate = if repair {
        strip_trailing_commas(block)
    } else {
        block.to_string()
    };
    serde_json::from_str(&candidate).map_err(|e| JsonExtractError::ParseFailure(e.to_string()))
}

/// Body of the first ``` fence, with an optional language tag removed.
fn fenced_body(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

fn find_block(text: &str, open: char, close: char) -> Result<&str, JsonExtractError> {
    let start = text.find(open).ok_or(JsonExtractError::NoJsonFound)?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            c if c == open => depth += 1,
            c if c == close => {
                depth -= 1;
                if depth == 0 {
                    return Ok(&text[start..start + i + c.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    Err(JsonExtractError::UnbalancedBraces(start))
}

fn normalize_quotes(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' => '"',
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' => '\'',
            c => c,
        })
        .collect()
}

fn strip_trailing_commas(block: &str) -> String {
    let chars: Vec<char> = block.chars().collect();
    let mut out = String::with_capacity(block.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn fenced() {
        let v = extract_json("```json\n{\"error_detected\": true}\n```").unwrap();
        assert_eq!(v, json!({"error_detected": true}));
    }

    #[test]
    fn first_balanced_block() {
        let v = extract_json("prose before {\"a\": 1} prose after {\"b\": 2}").unwrap();
        assert_eq!(v, json!({"a": 1}));
    }

    #[test]
    fn braces_in_strings_ignored() {
        let v = extract_json(r#"x {"a": "}{", "b": {"c": "\"}"}} y"#).unwrap();
        assert_eq!(v, json!({"a": "}{", "b": {"c": "\"}"}}));
    }

    #[test]
    fn unrepairable() {
        assert!(matches!(
            extract_json("{\"a\": [1,2,}"),
            Err(JsonExtractError::ParseFailure(_))
        ));
    }

    #[test]
    fn typed_errors() {
        assert_eq!(extract_json("no json here"), Err(JsonExtractError::NoJsonFound));
        assert_eq!(
            extract_json("x {\"a\": {\"b\": 1}"),
            Err(JsonExtractError::UnbalancedBraces(2))
        );
    }

    #[test]
    fn repairs() {
        let v = extract_json("{\"a\": [1, 2,], \"b\": 3,}").unwrap();
        assert_eq!(v, json!({"a": [1, 2], "b": 3}));
        let v = extract_json("{\u{201C}a\u{201D}: \u{201C}x\u{201D}}").unwrap();
        assert_eq!(v, json!({"a": "x"}));
        // commas inside strings survive repair
        let v = extract_json("{\"a\": \"1,}\", }").unwrap();
        assert_eq!(v, json!({"a": "1,}"}));
    }

    #[test]
    fn prose_brace_before_fence() {
        let v = extract_json("use {x} then\n```json\n{\"a\": 1}\n```").unwrap();
        assert_eq!(v, json!({"a": 1}));
    }

    #[test]
    fn arrays() {
        assert_eq!(
            extract_json_array("scores: [0.2, 0.9, 0.9]").unwrap(),
            vec![json!(0.2), json!(0.9), json!(0.9)]
        );
        assert_eq!(
            extract_json_array("```\n[\"go to a\", \"open b\",]\n```").unwrap(),
            vec![json!("go to a"), json!("open b")]
        );
        assert_eq!(extract_json_array("none"), Err(JsonExtractError::NoJsonFound));
    }

    proptest! {
        #[test]
        fn total_over_fuzz(s in "\\PC{0,80}") {
            let _ = extract_json(&s);
            let _ = extract_json_array(&s);
        }

        #[test]
        fn total_over_brace_soup(s in "[{}\\[\\]\",:a1 \\\\`]{0,60}") {
            let _ = extract_json(&s);
            let _ = extract_json_array(&s);
        }

        #[test]
        fn embedded_object_recovered(prefix in "[a-z .]{0,20}", n in any::<i64>(), key in "[a-z]{1,8}") {
            let text = format!("{prefix}{{\"{key}\": {n}}} trailing");
            let v = extract_json(&text).unwrap();
            prop_assert_eq!(v, json!({key: n}));
        }
    }
}
