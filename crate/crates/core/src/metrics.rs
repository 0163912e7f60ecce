//! Comparator metrics for edited models: n-gram-entropy fluency, TF-IDF
//! reference score (consistency), and locality.
//!
//! These exist to be reported *alongside* perplexity, never instead of it: a
//! collapsed model can still score locality 1 and a stable one can score 0,
//! so no single comparator is a health signal on its own.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::gateway::{greedy_generate, GatewayError, ModelBackend};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("text too short: need at least {need} words, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("empty vocabulary after tokenization")]
    EmptyVocabulary,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn shannon_entropy_bits(counts: &BTreeMap<Vec<String>, usize>) -> f64 {
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}

fn ngram_counts(words: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut counts = BTreeMap::new();
    if words.len() >= n {
        for window in words.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Weighted mean of bigram and trigram Shannon entropies (bits) of the word
/// stream: `(w2*H2 + w3*H3) / 2`.
pub fn gram_entropy_weighted(text: &str, w2: f64, w3: f64) -> Result<f64, MetricsError> {
    let words: Vec<String> = text.split_whitespace().map(|w| w.to_string()).collect();
    if words.len() < 3 {
        return Err(MetricsError::TooShort {
            need: 3,
            got: words.len(),
        });
    }
    let h2 = shannon_entropy_bits(&ngram_counts(&words, 2));
    let h3 = shannon_entropy_bits(&ngram_counts(&words, 3));
    Ok((w2 * h2 + w3 * h3) / 2.0)
}

/// [`gram_entropy_weighted`] with the conventional (2/3, 4/3) weights.
pub fn gram_entropy(text: &str) -> Result<f64, MetricsError> {
    gram_entropy_weighted(text, 2.0 / 3.0, 4.0 / 3.0)
}

fn vocab_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Cosine similarity of TF-IDF unigram vectors between `generated` and the
/// concatenation of `references`. IDF uses the smoothed two-document form
/// `ln((1+N)/(1+df)) + 1`, so identical texts score exactly 1.
pub fn reference_score(generated: &str, references: &[String]) -> Result<f64, MetricsError> {
    let gen_tokens = vocab_tokens(generated);
    let ref_tokens: Vec<String> = references.iter().flat_map(|r| vocab_tokens(r)).collect();
    if gen_tokens.is_empty() || ref_tokens.is_empty() {
        return Err(MetricsError::EmptyVocabulary);
    }
    let mut tf_gen: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &gen_tokens {
        *tf_gen.entry(t.as_str()).or_insert(0.0) += 1.0;
    }
    let mut tf_ref: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &ref_tokens {
        *tf_ref.entry(t.as_str()).or_insert(0.0) += 1.0;
    }
    let vocab: BTreeSet<&str> = tf_gen.keys().chain(tf_ref.keys()).copied().collect();
    let n_docs = 2.0;
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for term in vocab {
        let df = tf_gen.contains_key(term) as usize + tf_ref.contains_key(term) as usize;
        let idf = ((1.0 + n_docs) / (1.0 + df as f64)).ln() + 1.0;
        let a = tf_gen.get(term).copied().unwrap_or(0.0) * idf;
        let b = tf_ref.get(term).copied().unwrap_or(0.0) * idf;
        dot += a * b;
        norm_a += a * a;
        norm_b += b * b;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(MetricsError::EmptyVocabulary);
    }
    Ok(dot / (norm_a.sqrt() * norm_b.sqrt()))
}

/// Fraction of probe prompts whose greedy answers agree between the two
/// models. The expected answer in each probe is carried for reporting only;
/// agreement is judged between the two models' outputs.
pub fn locality_check(
    model_before: &dyn ModelBackend,
    model_after: &dyn ModelBackend,
    probes: &[(String, String)],
    max_new_tokens: usize,
) -> Result<f64, MetricsError> {
    if probes.is_empty() {
        return Err(MetricsError::EmptyVocabulary);
    }
    let mut unchanged = 0usize;
    for (prompt, _expected) in probes {
        let before = greedy_generate(model_before, prompt, max_new_tokens)?;
        let after = greedy_generate(model_after, prompt, max_new_tokens)?;
        if before.trim() == after.trim() {
            unchanged += 1;
        }
    }
    Ok(unchanged as f64 / probes.len() as f64)
}
