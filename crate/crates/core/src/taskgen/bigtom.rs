// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loader for externally supplied multiple-choice belief items.
//!
//! Accepted layouts: CSV with a header row, a JSON array of objects, or JSON
//! lines. Required fields are `story`, `question`, `option_a`, `option_b`,
//! `correct_index` (0/1 or a/b) and `condition` (TB/FB, also spelled
//! `true_belief`/`false_belief`). Optional: `task` (defaults to
//! forward_belief), `belief`, and `template_id` (shared by the TB and FB
//! versions of one story; defaults to the row number).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::taskgen::{BeliefItem, Condition, Task, VariationRecord};
use crate::tokenizer::Vocab;

const REQUIRED: [&str; 6] = [
    "story",
    "question",
    "option_a",
    "option_b",
    "correct_index",
    "condition",
];

type Row = HashMap<String, String>;

fn json_rows(value: serde_json::Value) -> Result<Vec<Row>> {
    let array = match value {
        serde_json::Value::Array(a) => a,
        other => vec![other],
    };
    array
        .into_iter()
        .map(|v| {
            let obj = v
                .as_object()
                .ok_or_else(|| Error::invalid("each record must be a JSON object"))?;
            Ok(obj
                .iter()
                .map(|(k, v)| {
                    let s = match v {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    (k.trim().to_lowercase(), s)
                })
                .collect())
        })
        .collect()
}

fn read_rows(path: &Path) -> Result<(Vec<Row>, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::invalid(format!("{} is empty", path.display())));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let rows = match ext {
        "json" => json_rows(serde_json::from_str(&text)?)?,
        "jsonl" => {
            let mut rows = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                rows.extend(json_rows(serde_json::from_str(line)?)?);
            }
            rows
        }
        _ => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers: Vec<String> = reader
                .headers()?
                .iter()
                .map(|h| h.trim().to_lowercase())
                .collect();
            for col in REQUIRED {
                if !headers.iter().any(|h| h == col) {
                    return Err(Error::MissingColumn(col.into()));
                }
            }
            let mut rows = Vec::new();
            for record in reader.records() {
                let record = record?;
                rows.push(
                    headers
                        .iter()
                        .cloned()
                        .zip(record.iter().map(String::from))
                        .collect(),
                );
            }
            return Ok((rows, headers));
        }
    };
    let mut headers: Vec<String> = rows.iter().flat_map(|r| r.keys().cloned()).collect();
    headers.sort();
    headers.dedup();
    Ok((rows, headers))
}

fn parse_condition(s: &str) -> Result<Condition> {
    match s.trim().to_lowercase().replace([' ', '-'], "_").as_str() {
        "tb" | "true_belief" | "true" => Ok(Condition::TrueBelief),
        "fb" | "false_belief" | "false" => Ok(Condition::FalseBelief),
        other => Err(Error::invalid(format!("unknown condition `{other}`"))),
    }
}

fn parse_index(s: &str) -> Result<usize> {
    match s.trim().to_lowercase().trim_end_matches(')') {
        "0" | "a" => Ok(0),
        "1" | "b" => Ok(1),
        other => Err(Error::invalid(format!("correct_index must be 0/1 or a/b, got `{other}`"))),
    }
}

/// Loads items and counts words that fall outside `vocab`.
///
/// The belief statement defaults to option a; its protagonist label is
/// whether option a is the correct answer, and its oracle label follows from
/// the condition (equal in TB, opposite in FB).
pub fn load_bigtom(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<BeliefItem>> {
    let path = path.as_ref();
    let (rows, headers) = read_rows(path)?;
    for col in REQUIRED {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MissingColumn(col.into()));
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} has no rows", path.display())));
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let get = |k: &str| -> Result<&str> {
                row.get(k)
                    .map(String::as_str)
                    .ok_or_else(|| Error::MissingColumn(k.into()))
            };
            let condition = parse_condition(get("condition")?)?;
            let correct_index = parse_index(get("correct_index")?)?;
            let task = match row.get("task").filter(|t| !t.trim().is_empty()) {
                Some(t) => Task::parse(t.trim())?,
                None => Task::ForwardBelief,
            };
            let answers = [get("option_a")?.to_string(), get("option_b")?.to_string()];
            let belief = row
                .get("belief")
                .filter(|b| !b.trim().is_empty())
                .cloned()
                .unwrap_or_else(|| answers[0].clone());
            let z_p = correct_index == 0;
            let z_o = match condition {
                Condition::TrueBelief => z_p,
                Condition::FalseBelief => !z_p,
            };
            let story = get("story")?.to_string();
            let question = get("question")?.to_string();
            let oov_count = [&story, &question, &belief, &answers[0], &answers[1]]
                .iter()
                .map(|t| vocab.encode_counting(t).1)
                .sum();
            let template_id = match row.get("template_id").filter(|t| !t.trim().is_empty()) {
                Some(t) => t
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad template_id `{t}`")))?,
                None => i,
            };
            Ok(BeliefItem {
                template_id,
                story,
                belief,
                z_p,
                z_o,
                condition,
                task,
                variation: VariationRecord::Original,
                question,
                answers,
                correct_index,
                oov_count,
            })
        })
        .collect()
}
