//! Word-level vocabulary with punctuation peeling.
//!
//! Tokens are lowercased words plus single-character punctuation tokens
//! peeled from word edges. Unknown words map to `<unk>`; `<s>` is reserved
//! as the start-of-text token and is never produced by encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const BOS_TOKEN: &str = "<s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Splits one whitespace-delimited piece into a word plus peeled leading and
/// trailing punctuation characters.
fn peel(piece: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = piece.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    let mut lead = Vec::new();
    while start < end && !chars[start].is_alphanumeric() {
        lead.push(chars[start].to_string());
        start += 1;
    }
    let mut trail = Vec::new();
    while end > start && !chars[end - 1].is_alphanumeric() {
        trail.push(chars[end - 1].to_string());
        end -= 1;
    }
    out.extend(lead);
    if start < end {
        out.push(chars[start..end].iter().collect());
    }
    out.extend(trail.into_iter().rev());
}

/// Lowercases and splits text into word and punctuation tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        peel(&piece.to_lowercase(), &mut out);
    }
    out
}

impl WordVocab {
    /// Builds a vocabulary from training texts: all tokens seen at least
    /// `min_count` times, most frequent first, capped at `max_size` entries
    /// (including the two reserved tokens).
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, max_size: usize, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for token in word_tokens(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        // Sort by descending count, then lexicographically for determinism.
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for (word, _) in ranked {
            if words.len() >= max_size {
                break;
            }
            words.push(word);
        }
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        WordVocab { words, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        word_tokens(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let word = self
                .words
                .get(id as usize)
                .map(|s| s.as_str())
                .unwrap_or(UNK_TOKEN);
            let is_punct = word.chars().count() == 1
                && !word.chars().next().map(char::is_alphanumeric).unwrap_or(true);
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_with_punctuation_peeling() {
        assert_eq!(
            word_tokens("Arden, the keeper (once) locked."),
            vec!["arden", ",", "the", "keeper", "(", "once", ")", "locked", "."]
        );
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = WordVocab::build(["the cat sat the cat"].into_iter(), 100, 1);
        let ids = vocab.encode("the dog sat");
        assert_eq!(ids[0], vocab.id_of("the").unwrap());
        assert_eq!(ids[1], UNK_ID);
    }

    #[test]
    fn decode_spaces_words_and_attaches_punct() {
        let vocab = WordVocab::build(["the cat sat . ,"].into_iter(), 100, 1);
        let ids = vocab.encode("the cat sat.");
        assert_eq!(vocab.decode(&ids), "the cat sat.");
    }

    #[test]
    fn build_is_deterministic() {
        let text = "b b b a a c";
        let v1 = WordVocab::build([text].into_iter(), 10, 1);
        let v2 = WordVocab::build([text].into_iter(), 10, 1);
        assert_eq!(v1.words(), v2.words());
        // Frequency order: reserved, then b, then a, then c.
        assert_eq!(v1.words()[2], "b");
        assert_eq!(v1.words()[3], "a");
        assert_eq!(v1.words()[4], "c");
    }
}
