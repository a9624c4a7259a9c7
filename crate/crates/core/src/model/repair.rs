//! Recovery of a structured answer from free-form model output.
//!
//! Models wrap JSON in code fences, surround it with prose, use single quotes,
//! leave trailing commas, stop mid-object and nest the interesting fields
//! under arbitrary keys. The pipeline here strips fences, tries a strict parse,
//! falls back to the first brace span with lexical relaxations, and then reads
//! the fields by synonym.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_ids: Option<Vec<u32>>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_note: Option<String>,
    /// The model declared the answer absent from the document.
    #[serde(default)]
    pub not_found: bool,
}

impl GroundedAnswer {
    pub fn not_found() -> Self {
        GroundedAnswer {
            not_found: true,
            ..GroundedAnswer::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("answer serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseContext {
    pub expects_box: bool,
    /// When set, ids outside this set are discarded.
    pub valid_ids: Option<BTreeSet<u32>>,
}

const ANSWER_KEYS: &[&str] = &[
    "answer",
    "text",
    "value",
    "answer_text",
    "result_text",
    "extracted_answer",
];
const BOX_KEYS: &[&str] = &["box", "bbox", "bounding_box", "answer_box", "coordinates", "coords"];
const ID_KEYS: &[&str] = &[
    "region_ids",
    "box_ids",
    "ids",
    "region_id",
    "box_id",
    "id",
    "regions",
    "answer_ids",
    "matched_ids",
];
const NOTE_KEYS: &[&str] = &[
    "confidence_note",
    "confidence",
    "note",
    "notes",
    "explanation",
    "reason",
    "reasoning",
];
const NOT_FOUND_KEYS: &[&str] = &["not_found", "notfound"];
const NOT_FOUND_LITERALS: &[&str] = &[
    "",
    "not found",
    "notfound",
    "n/a",
    "na",
    "none",
    "null",
    "unknown",
    "not available",
    "answer not found",
    "no answer",
];

pub fn parse_grounded_answer(raw: &str, ctx: &ParseContext) -> Result<GroundedAnswer> {
    let text = strip_fences(raw);
    match locate_value(text) {
        Some(Value::Object(map)) => from_object(&map, ctx, raw),
        Some(Value::Array(items)) => match items.into_iter().find(Value::is_object) {
            Some(Value::Object(map)) => from_object(&map, ctx, raw),
            _ => Err(parse_error(raw)),
        },
        Some(Value::String(s)) => Ok(answer_only(&s)),
        Some(Value::Number(n)) => Ok(answer_only(&n.to_string())),
        _ if is_not_found_literal(text) => Ok(GroundedAnswer::not_found()),
        _ => Err(parse_error(raw)),
    }
}

fn parse_error(raw: &str) -> Error {
    Error::Parse { raw: raw.to_string() }
}

fn answer_only(s: &str) -> GroundedAnswer {
    if is_not_found_literal(s) {
        return GroundedAnswer::not_found();
    }
    GroundedAnswer {
        answer: s.trim().to_string(),
        ..GroundedAnswer::default()
    }
}

fn is_not_found_literal(s: &str) -> bool {
    let t = s.trim().trim_end_matches(['.', '!']).trim().to_lowercase();
    NOT_FOUND_LITERALS.contains(&t.as_str())
}

/// Content of the first fenced block, or the trimmed input.
fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(open) = t.find("```") else { return t };
    let after = &t[open + 3..];
    // drop a language tag on the fence line
    let body_start = match after.find('\n') {
        Some(nl) if after[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => nl + 1,
        _ => after
            .chars()
            .take_while(|c| c.is_ascii_alphabetic())
            .map(char::len_utf8)
            .sum(),
    };
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

fn locate_value(text: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return Some(v);
    }
    let start = text
        .find(['{', '\u{201c}'])
        .and_then(|i| text[i..].find('{').map(|j| i + j))?;
    let span = match balanced_span(&text[start..]) {
        Some(end) => &text[start..start + end],
        None => &text[start..],
    };
    if let Ok(v) = serde_json::from_str::<Value>(span) {
        return Some(v);
    }
    serde_json::from_str::<Value>(&relax(span)).ok()
}

/// Byte length of the brace-balanced prefix, or `None` if it never closes.
fn balanced_span(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' | '[' => depth += 1,
            '}' | ']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn is_open_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201c}' | '\u{2018}')
}

fn closes(open: char, c: char) -> bool {
    match open {
        '"' => c == '"' || c == '\u{201d}',
        '\'' => c == '\'',
        '\u{201c}' => c == '\u{201d}' || c == '"',
        '\u{2018}' => c == '\u{2019}' || c == '\'',
        _ => false,
    }
}

/// Rewrites JSON-like text into JSON: normalizes quotes, quotes bare words,
/// maps Python literals, drops comments and trailing commas, escapes stray
/// inner quotes and closes whatever was left open.
fn relax(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len() + 8);
    let mut stack: Vec<char> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if is_open_quote(c) {
            i += 1;
            out.push('"');
            let mut closed = false;
            while i < chars.len() {
                let d = chars[i];
                if d == '\\' && i + 1 < chars.len() {
                    if chars[i + 1] == '\'' {
                        out.push('\'');
                    } else {
                        out.push('\\');
                        out.push(chars[i + 1]);
                    }
                    i += 2;
                    continue;
                }
                if closes(c, d) {
                    // a quote followed by more text is part of the string
                    let next = chars[i + 1..].iter().find(|ch| !ch.is_whitespace());
                    if next.is_none_or(|n| matches!(n, ',' | ':' | '}' | ']')) {
                        closed = true;
                        i += 1;
                        break;
                    }
                }
                match d {
                    '"' | '\u{201c}' | '\u{201d}' => out.push_str("\\\""),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    _ => out.push(d),
                }
                i += 1;
            }
            out.push('"');
            if !closed {
                break;
            }
            continue;
        }
        match c {
            '/' if chars.get(i + 1) == Some(&'/') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '{' | '[' => {
                stack.push(if c == '{' { '}' } else { ']' });
                out.push(c);
            }
            '}' | ']' => {
                trim_trailing_comma(&mut out);
                stack.pop();
                out.push(c);
            }
            _ if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '-' | '.')) {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                match word.as_str() {
                    "true" | "false" | "null" => out.push_str(&word),
                    "True" => out.push_str("true"),
                    "False" => out.push_str("false"),
                    "None" => out.push_str("null"),
                    _ => {
                        out.push('"');
                        out.push_str(&word);
                        out.push('"');
                    }
                }
                continue;
            }
            _ => out.push(c),
        }
        i += 1;
    }
    // close an object cut off mid-stream
    let t = out.trim_end().len();
    out.truncate(t);
    if out.ends_with(':') {
        out.push_str("null");
    }
    trim_trailing_comma(&mut out);
    while let Some(close) = stack.pop() {
        trim_trailing_comma(&mut out);
        out.push(close);
    }
    out
}

fn trim_trailing_comma(out: &mut String) {
    let t = out.trim_end().len();
    if out[..t].ends_with(',') {
        out.truncate(t - 1);
    }
}

fn norm_key(k: &str) -> String {
    k.trim().to_lowercase().replace(['-', ' '], "_")
}

/// First value under any of `keys`, searching this object before nested ones.
fn find<'a>(map: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    let mut queue: std::collections::VecDeque<&Map<String, Value>> = std::collections::VecDeque::from([map]);
    while let Some(m) = queue.pop_front() {
        for key in keys {
            if let Some((_, v)) = m.iter().find(|(k, _)| norm_key(k) == *key) {
                return Some(v);
            }
        }
        for v in m.values() {
            match v {
                Value::Object(o) => queue.push_back(o),
                Value::Array(items) => queue.extend(items.iter().filter_map(Value::as_object)),
                _ => {}
            }
        }
    }
    None
}

fn answer_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().filter_map(answer_text).filter(|s| !s.is_empty()).collect();
            Some(parts.join(" "))
        }
        Value::Object(o) => find(o, ANSWER_KEYS).and_then(answer_text),
        Value::Null => None,
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn as_id(v: &Value) -> Vec<u32> {
    match v {
        Value::Number(n) => n
            .as_f64()
            .filter(|f| *f >= 0.0 && f.fract() == 0.0 && *f <= u32::MAX as f64)
            .map(|f| vec![f as u32])
            .unwrap_or_default(),
        Value::String(s) => ids_in_text(s),
        Value::Array(items) => items.iter().flat_map(as_id).collect(),
        Value::Object(o) => find(o, ID_KEYS).map(as_id).unwrap_or_default(),
        _ => Vec::new(),
    }
}

/// Every `B<n>` or bare `<n>` token in a string.
fn ids_in_text(s: &str) -> Vec<u32> {
    s.split(|c: char| !c.is_ascii_alphanumeric())
        .filter_map(|tok| {
            let digits = tok.strip_prefix(['B', 'b']).unwrap_or(tok);
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            digits.parse().ok()
        })
        .collect()
}

enum Located {
    Box(BBox),
    Ids(Vec<u32>),
}

fn box_from_points(xs: &[f64], ys: &[f64]) -> Option<BBox> {
    let fold = |v: &[f64], f: fn(f64, f64) -> f64, init: f64| v.iter().copied().fold(init, f);
    BBox::from_f64_outward(
        fold(xs, f64::min, f64::INFINITY),
        fold(ys, f64::min, f64::INFINITY),
        fold(xs, f64::max, f64::NEG_INFINITY),
        fold(ys, f64::max, f64::NEG_INFINITY),
    )
    .ok()
}

fn locate(v: &Value) -> Option<Located> {
    match v {
        Value::Array(items) => {
            if let Some(nums) = items.iter().map(as_f64).collect::<Option<Vec<f64>>>() {
                return match nums.len() {
                    4 => box_from_points(&[nums[0], nums[2]], &[nums[1], nums[3]]).map(Located::Box),
                    8 => {
                        let xs: Vec<f64> = nums.iter().step_by(2).copied().collect();
                        let ys: Vec<f64> = nums.iter().skip(1).step_by(2).copied().collect();
                        box_from_points(&xs, &ys).map(Located::Box)
                    }
                    _ => None,
                };
            }
            if items.len() == 1 {
                return locate(&items[0]);
            }
            let points: Option<Vec<(f64, f64)>> = items
                .iter()
                .map(
                    |p| match p.as_array().map(|a| a.iter().map(as_f64).collect::<Option<Vec<f64>>>()) {
                        Some(Some(xy)) if xy.len() == 2 => Some((xy[0], xy[1])),
                        _ => None,
                    },
                )
                .collect();
            if let Some(points) = points.filter(|p| p.len() >= 2) {
                let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
                return box_from_points(&xs, &ys).map(Located::Box);
            }
            let ids = as_id(v);
            (!ids.is_empty()).then_some(Located::Ids(ids))
        }
        Value::Object(o) => {
            let get = |names: &[&str]| {
                names
                    .iter()
                    .find_map(|n| o.iter().find(|(k, _)| norm_key(k) == *n).and_then(|(_, v)| as_f64(v)))
            };
            let corners = [
                get(&["x1", "left", "xmin", "x_min"]),
                get(&["y1", "top", "ymin", "y_min"]),
                get(&["x2", "right", "xmax", "x_max"]),
                get(&["y2", "bottom", "ymax", "y_max"]),
            ];
            if let [Some(x1), Some(y1), Some(x2), Some(y2)] = corners {
                return box_from_points(&[x1, x2], &[y1, y2]).map(Located::Box);
            }
            let sized = [get(&["x"]), get(&["y"]), get(&["width", "w"]), get(&["height", "h"])];
            if let [Some(x), Some(y), Some(w), Some(h)] = sized {
                return box_from_points(&[x, x + w], &[y, y + h]).map(Located::Box);
            }
            find(o, BOX_KEYS).and_then(locate)
        }
        Value::String(s) => {
            let t = s.trim();
            if t.starts_with(['B', 'b']) {
                let ids = ids_in_text(t);
                return (!ids.is_empty()).then_some(Located::Ids(ids));
            }
            let nums: Vec<f64> = t
                .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
                .filter_map(|p| p.parse().ok())
                .collect();
            locate(&Value::Array(nums.into_iter().map(Value::from).collect()))
        }
        Value::Number(_) => Some(Located::Ids(as_id(v))),
        _ => None,
    }
}

fn from_object(map: &Map<String, Value>, ctx: &ParseContext, raw: &str) -> Result<GroundedAnswer> {
    let answer_v = find(map, ANSWER_KEYS);
    let box_v = find(map, BOX_KEYS);
    let ids_v = find(map, ID_KEYS);
    let flag = find(map, NOT_FOUND_KEYS).and_then(Value::as_bool);
    if answer_v.is_none() && box_v.is_none() && ids_v.is_none() && flag.is_none() {
        return Err(parse_error(raw));
    }

    let mut ids: Vec<u32> = ids_v.map(as_id).unwrap_or_default();
    let mut bbox = None;
    match box_v.and_then(locate) {
        Some(Located::Box(b)) => bbox = Some(b),
        Some(Located::Ids(more)) => ids.extend(more),
        None => {}
    }
    let mut seen = BTreeSet::new();
    ids.retain(|id| seen.insert(*id));
    if let Some(valid) = &ctx.valid_ids {
        let before = ids.len();
        ids.retain(|id| valid.contains(id));
        if ids.len() < before {
            log::warn!("dropped {} region id(s) outside the detected set", before - ids.len());
        }
    }
    let region_ids = (!ids.is_empty()).then_some(ids);
    let confidence_note = find(map, NOTE_KEYS).and_then(|v| match v {
        Value::String(s) => Some(s.clone()),
        Value::Null => None,
        other => Some(other.to_string()),
    });

    let answer = answer_v.and_then(answer_text);
    let not_found = match flag {
        Some(f) => f,
        None => match &answer {
            Some(a) => is_not_found_literal(a),
            None => answer_v.is_some() || (region_ids.is_none() && bbox.is_none()),
        },
    };
    if not_found {
        return Ok(GroundedAnswer {
            confidence_note,
            ..GroundedAnswer::not_found()
        });
    }
    Ok(GroundedAnswer {
        answer: answer.unwrap_or_default(),
        region_ids,
        bbox,
        confidence_note,
        not_found: false,
    })
}
