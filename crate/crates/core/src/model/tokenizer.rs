use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

/// Word-level tokenizer: lowercase alphanumeric runs, each punctuation
/// character its own token. The vocabulary holds `<pad>`, `<unk>` and the
/// most frequent corpus words (ties broken alphabetically).
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits text into word and punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == PAD || chunk == UNK {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary of at most `vocab_size` entries from `lines`.
    pub fn build<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for w in split_words(line.as_ref()) {
                if w != PAD && w != UNK {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = vec![PAD.to_string(), UNK.to_string()];
        vocab.extend(words.into_iter().take(vocab_size - 2).map(|(w, _)| w));
        Ok(Self::from_vocab(vocab))
    }

    fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Space-joined tokens; `encode(decode(ids)) == ids` for in-range ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(split_words("How do I, maybe?"), vec!["how", "do", "i", ",", "maybe", "?"]);
        assert_eq!(split_words("don't"), vec!["don", "'", "t"]);
    }

    #[test]
    fn vocabulary_by_frequency() {
        let t = Tokenizer::build(&["b a a", "c a b"], 4).unwrap();
        assert_eq!(t.vocab(), &["<pad>", "<unk>", "a", "b"]);
        assert_eq!(t.encode("a c zz"), vec![2, UNK_ID, UNK_ID]);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(ids in proptest::collection::vec(0usize..12, 1..20)) {
            let t = Tokenizer::build(&["what is the best way to cook rice ? i , not ."], 12).unwrap();
            prop_assert_eq!(t.encode(&t.decode(&ids)), ids);
        }
    }
}
