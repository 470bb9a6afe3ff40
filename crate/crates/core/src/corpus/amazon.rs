//! Converters from Amazon review dumps (one JSON object per line) to the
//! interaction TSV and item-text JSONL formats.

use std::io::BufRead;

use log::warn;
use serde::Deserialize;
use serde_json::Value;

use super::{Interaction, ItemText};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Review {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
}

/// Reviews with `reviewerID`, `asin` and `unixReviewTime`. Other fields are
/// ignored.
pub fn convert_amazon_reviews(reader: impl BufRead) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Review = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.unix_review_time < 0 {
            return Err(Error::Range(format!("line {}: negative review time", i + 1)));
        }
        out.push(Interaction::new(r.reviewer_id, r.asin, r.unix_review_time));
    }
    Ok(out)
}

/// Product metadata with `asin`, `title` and a `description` that may be a
/// string or a list of strings (joined with spaces). Lines without an `asin`
/// are skipped.
pub fn convert_amazon_meta(reader: impl BufRead) -> Result<Vec<ItemText>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let Some(asin) = v.get("asin").and_then(Value::as_str) else {
            warn!("metadata line {} has no asin, skipped", i + 1);
            continue;
        };
        out.push(ItemText {
            item_id: asin.to_string(),
            title: text_field(v.get("title")),
            description: text_field(v.get("description")),
        });
    }
    Ok(out)
}

fn text_field(v: Option<&Value>) -> String {
    match v {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" "),
        _ => String::new(),
    }
}
