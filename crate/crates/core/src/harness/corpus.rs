use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::Tokenizer;

/// The 200-line question corpus shipped with the crate.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.jsonl");

#[derive(Deserialize)]
struct Line {
    text: String,
}

/// Parses JSON Lines text; `path` only labels errors.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Corpus {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        if value.get("text").is_none() {
            return Err(err("missing \"text\" field".into()));
        }
        let parsed: Line = serde_json::from_value(value).map_err(|e| err(format!("\"text\" must be a string: {e}")))?;
        out.push(parsed.text);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Corpus {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_corpus(&text, path)
}

pub fn bundled_corpus() -> Vec<String> {
    parse_corpus(BUNDLED_CORPUS, Path::new("<bundled>")).expect("bundled corpus is valid")
}

/// A tokenized prompt, keyed by its line index in the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub id: usize,
    pub text: String,
    pub ids: Vec<usize>,
}

/// The first `count` prompts that tokenize to at least one token, each
/// truncated to `max_len` tokens.
pub fn select_prompts(lines: &[String], tok: &Tokenizer, count: usize, max_len: usize) -> Vec<Prompt> {
    lines
        .iter()
        .enumerate()
        .filter_map(|(id, text)| {
            let mut ids = tok.encode(text);
            ids.truncate(max_len);
            (!ids.is_empty()).then(|| Prompt {
                id,
                text: text.clone(),
                ids,
            })
        })
        .take(count)
        .collect()
}
