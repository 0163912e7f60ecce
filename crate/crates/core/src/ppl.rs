//! Sentence and corpus perplexity, plus collapse classification against a
//! threshold.
//!
//! Perplexity is the exponential of the mean per-token negative
//! log-likelihood. Corpus aggregation defaults to the arithmetic mean of
//! per-sentence perplexities; a token-weighted pooled rule (exponential of
//! the token-count-weighted mean NLL) is selectable. Reports always name the
//! aggregation used.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusManifest};
use crate::gateway::{GatewayError, ModelBackend};
use crate::DEFAULT_COLLAPSE_THRESHOLD;

#[derive(Debug, Error)]
pub enum PplError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("report io error: {0}")]
    Io(String),
    #[error("report format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Collapsed,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Stable => write!(f, "stable"),
            Verdict::Collapsed => write!(f, "collapsed"),
        }
    }
}

/// Corpus-level pooling rule for per-sentence perplexities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Arithmetic mean of per-sentence perplexities.
    #[default]
    MeanSentence,
    /// exp of the token-count-weighted mean NLL over the whole corpus.
    TokenPooled,
}

/// Verdict is `collapsed` iff `aggregate` strictly exceeds the threshold.
pub fn classify_collapse(aggregate: f64, threshold: f64) -> Verdict {
    if aggregate > threshold {
        Verdict::Collapsed
    } else {
        Verdict::Stable
    }
}

pub(crate) fn ppl_from_nlls(nlls: &[f64]) -> f64 {
    let sum: f64 = nlls.iter().sum();
    (sum / nlls.len() as f64).exp()
}

/// Tokenizes and scores one sentence, truncating at the model's context
/// window. Returns `(perplexity, token_count, truncated)`.
fn score_sentence(
    model: &dyn ModelBackend,
    text: &str,
) -> Result<(f64, usize, bool), GatewayError> {
    let mut tokens = model.tokenize(text)?;
    if tokens.is_empty() {
        return Err(GatewayError::EmptySequence);
    }
    // One slot is reserved for the start-of-text token.
    let budget = model.context_window().saturating_sub(1).max(1);
    let truncated = tokens.len() > budget;
    if truncated {
        tokens.truncate(budget);
    }
    let nlls = model.score_tokens(&tokens)?;
    Ok((ppl_from_nlls(&nlls), tokens.len(), truncated))
}

/// Perplexity of one sentence: exp of the mean per-token NLL.
pub fn sentence_perplexity(model: &dyn ModelBackend, sentence: &str) -> Result<f64, PplError> {
    let (ppl, _, _) = score_sentence(model, sentence)?;
    Ok(ppl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePpl {
    pub id: String,
    pub ppl: f64,
    pub tokens: usize,
}

/// Per-sentence and aggregate perplexity of a model on a corpus, with the
/// collapse verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub model_id: String,
    pub manifest: Option<CorpusManifest>,
    pub per_sentence: Vec<SentencePpl>,
    pub aggregate: f64,
    pub aggregation: Aggregation,
    pub threshold: f64,
    pub verdict: Verdict,
    /// Sentences that exceeded the context window and were truncated.
    pub truncated_sentences: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PplOptions {
    pub threshold: f64,
    pub aggregation: Aggregation,
}

impl Default for PplOptions {
    fn default() -> Self {
        PplOptions {
            threshold: DEFAULT_COLLAPSE_THRESHOLD,
            aggregation: Aggregation::default(),
        }
    }
}

/// Scores every sentence of `corpus` under `model` and aggregates.
pub fn corpus_perplexity(
    model: &dyn ModelBackend,
    corpus: &Corpus,
    manifest: Option<&CorpusManifest>,
    options: PplOptions,
) -> Result<PerplexityReport, PplError> {
    if corpus.is_empty() {
        return Err(PplError::EmptyCorpus);
    }
    let mut per_sentence = Vec::with_capacity(corpus.len());
    let mut truncated_sentences = 0usize;
    let mut total_nll = 0.0_f64;
    let mut total_tokens = 0usize;
    for sentence in corpus.iter() {
        let (ppl, tokens, truncated) = score_sentence(model, &sentence.text)?;
        if truncated {
            truncated_sentences += 1;
        }
        total_nll += ppl.ln() * tokens as f64;
        total_tokens += tokens;
        per_sentence.push(SentencePpl {
            id: sentence.id.clone(),
            ppl,
            tokens,
        });
    }
    let aggregate = match options.aggregation {
        Aggregation::MeanSentence => {
            per_sentence.iter().map(|s| s.ppl).sum::<f64>() / per_sentence.len() as f64
        }
        Aggregation::TokenPooled => (total_nll / total_tokens as f64).exp(),
    };
    Ok(PerplexityReport {
        model_id: model.model_id().to_string(),
        manifest: manifest.cloned(),
        per_sentence,
        aggregate,
        aggregation: options.aggregation,
        threshold: options.threshold,
        verdict: classify_collapse(aggregate, options.threshold),
        truncated_sentences,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Meta {
        model_id: String,
        aggregation: Aggregation,
        threshold: f64,
        manifest: Option<CorpusManifest>,
    },
    Sentence {
        id: String,
        ppl: f64,
        tokens: usize,
    },
    Summary {
        aggregate: f64,
        verdict: Verdict,
        sentences: usize,
        truncated_sentences: usize,
    },
}

/// Writes a report as line-oriented records: one meta line, one line per
/// sentence, one summary line.
pub fn save_report(report: &PerplexityReport, path: &Path) -> Result<(), PplError> {
    let mut file = std::fs::File::create(path).map_err(|e| PplError::Io(e.to_string()))?;
    let mut emit = |line: &ReportLine| -> Result<(), PplError> {
        let raw = serde_json::to_string(line).map_err(|e| PplError::Format(e.to_string()))?;
        writeln!(file, "{raw}").map_err(|e| PplError::Io(e.to_string()))
    };
    emit(&ReportLine::Meta {
        model_id: report.model_id.clone(),
        aggregation: report.aggregation,
        threshold: report.threshold,
        manifest: report.manifest.clone(),
    })?;
    for s in &report.per_sentence {
        emit(&ReportLine::Sentence {
            id: s.id.clone(),
            ppl: s.ppl,
            tokens: s.tokens,
        })?;
    }
    emit(&ReportLine::Summary {
        aggregate: report.aggregate,
        verdict: report.verdict,
        sentences: report.per_sentence.len(),
        truncated_sentences: report.truncated_sentences,
    })
}

pub fn load_report(path: &Path) -> Result<PerplexityReport, PplError> {
    let file = std::fs::File::open(path).map_err(|e| PplError::Io(e.to_string()))?;
    let mut meta: Option<(String, Aggregation, f64, Option<CorpusManifest>)> = None;
    let mut per_sentence = Vec::new();
    let mut summary: Option<(f64, Verdict, usize)> = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| PplError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine =
            serde_json::from_str(&line).map_err(|e| PplError::Format(e.to_string()))?;
        match parsed {
            ReportLine::Meta {
                model_id,
                aggregation,
                threshold,
                manifest,
            } => meta = Some((model_id, aggregation, threshold, manifest)),
            ReportLine::Sentence { id, ppl, tokens } => {
                per_sentence.push(SentencePpl { id, ppl, tokens })
            }
            ReportLine::Summary {
                aggregate,
                verdict,
                truncated_sentences,
                ..
            } => summary = Some((aggregate, verdict, truncated_sentences)),
        }
    }
    let (model_id, aggregation, threshold, manifest) =
        meta.ok_or_else(|| PplError::Format("missing meta line".into()))?;
    let (aggregate, verdict, truncated_sentences) =
        summary.ok_or_else(|| PplError::Format("missing summary line".into()))?;
    Ok(PerplexityReport {
        model_id,
        manifest,
        per_sentence,
        aggregate,
        aggregation,
        threshold,
        verdict,
        truncated_sentences,
    })
}
