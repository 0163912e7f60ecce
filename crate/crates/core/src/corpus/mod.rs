//! Construction of tiered perplexity-measurement corpora from raw text
//! sources.
//!
//! The pipeline: read each source, split into sentences, filter by length
//! and language purity, then sample each source's tier quota with a seeded
//! RNG. Output counts are exact (no probabilistic rounding) and the whole
//! build is a pure function of `(sources, tier, seed)`.

mod split;

pub use split::split_sentences;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("source {name} cannot supply {need} sentences after filtering (have {have})")]
    InsufficientSource {
        name: String,
        need: usize,
        have: usize,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Corpus size tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "1k")]
    OneK,
    #[serde(rename = "50")]
    Fifty,
}

impl Tier {
    pub fn size(&self) -> usize {
        match self {
            Tier::Full => 10_000,
            Tier::OneK => 1_000,
            Tier::Fifty => 50,
        }
    }

    pub fn parse(s: &str) -> Result<Tier, CorpusError> {
        match s {
            "full" => Ok(Tier::Full),
            "1k" => Ok(Tier::OneK),
            "50" => Ok(Tier::Fifty),
            other => Err(CorpusError::Format(format!(
                "unknown tier {other:?} (expected full, 1k, or 50)"
            ))),
        }
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tier::Full => write!(f, "full"),
            Tier::OneK => write!(f, "1k"),
            Tier::Fifty => write!(f, "50"),
        }
    }
}

/// One raw text source and its per-tier sentence quotas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub count_full: usize,
    pub count_1k: usize,
    pub count_50: usize,
    pub path: PathBuf,
}

impl SourceSpec {
    pub fn count_for(&self, tier: Tier) -> usize {
        match tier {
            Tier::Full => self.count_full,
            Tier::OneK => self.count_1k,
            Tier::Fifty => self.count_50,
        }
    }
}

/// Per-source quotas `(name, full, 1k, 50)` of the standard seven-source
/// layout. Columns sum to 10000 / 1000 / 50.
pub const STANDARD_SOURCE_COUNTS: [(&str, usize, usize, usize); 7] = [
    ("BookCorpus", 50, 10, 1),
    ("C4", 2500, 259, 12),
    ("CC_News", 700, 65, 3),
    ("Gutenberg", 250, 23, 2),
    ("OpenWebText", 5000, 497, 25),
    ("Roots", 500, 39, 2),
    ("Wikipedia", 1000, 107, 5),
];

/// The standard seven sources, mapping each slot to `<dir>/<name>.txt`.
pub fn standard_sources(dir: &Path) -> Vec<SourceSpec> {
    STANDARD_SOURCE_COUNTS
        .iter()
        .map(|(name, full, k1, f50)| SourceSpec {
            name: name.to_string(),
            count_full: *full,
            count_1k: *k1,
            count_50: *f50,
            path: dir.join(format!("{name}.txt")),
        })
        .collect()
}

/// Sentence admission rules: minimum word count (strict) and minimum
/// fraction of characters drawn from basic Latin letters, digits,
/// whitespace, and common punctuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    pub min_words: usize,
    pub min_purity: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_words: 10,
            min_purity: 0.95,
        }
    }
}

const COMMON_PUNCT: &str = ".,;:'\"!?()-[]/&%$#@*+=_\u{2013}\u{2014}\u{2018}\u{2019}\u{201c}\u{201d}";

/// Fraction of characters that are ASCII alphanumeric, whitespace, or common
/// punctuation. Empty text has purity 1.
pub fn purity_ratio(text: &str) -> f64 {
    let mut total = 0usize;
    let mut pure = 0usize;
    for c in text.chars() {
        total += 1;
        if c.is_ascii_alphanumeric() || c.is_whitespace() || COMMON_PUNCT.contains(c) {
            pure += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        pure as f64 / total as f64
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// True iff the sentence exceeds the minimum word count and meets the
/// language-purity bound.
pub fn passes_filter(sentence: &str, rules: &FilterRules) -> bool {
    word_count(sentence) > rules.min_words && purity_ratio(sentence) >= rules.min_purity
}

/// A filtered sentence with stable id and source attribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub source: String,
    pub text: String,
}

impl Sentence {
    pub fn word_count(&self) -> usize {
        word_count(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sentence> {
        self.sentences.iter()
    }
}

/// Provenance record of a built corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub tier: Tier,
    pub sources: Vec<(String, usize)>,
    pub seed: u64,
    pub filter_rules: FilterRules,
}

impl CorpusManifest {
    /// Checks that per-source counts sum to the tier size.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let total: usize = self.sources.iter().map(|(_, c)| c).sum();
        if total != self.tier.size() {
            return Err(CorpusError::Format(format!(
                "manifest counts sum to {total}, expected {} for tier {}",
                self.tier.size(),
                self.tier
            )));
        }
        Ok(())
    }
}

/// Stable per-source RNG seed: the build seed mixed with the source name.
fn source_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Builds a corpus at the given tier: each source contributes exactly its
/// quota of filtered sentences, sampled deterministically from `seed`.
pub fn build_corpus(
    sources: &[SourceSpec],
    tier: Tier,
    seed: u64,
) -> Result<(Corpus, CorpusManifest), CorpusError> {
    build_corpus_with_rules(sources, tier, seed, FilterRules::default())
}

pub fn build_corpus_with_rules(
    sources: &[SourceSpec],
    tier: Tier,
    seed: u64,
    rules: FilterRules,
) -> Result<(Corpus, CorpusManifest), CorpusError> {
    let mut sentences = Vec::new();
    let mut manifest_sources = Vec::new();
    for source in sources {
        let need = source.count_for(tier);
        let raw = std::fs::read_to_string(&source.path).map_err(|e| CorpusError::Io {
            path: source.path.display().to_string(),
            source: e,
        })?;
        let pool: Vec<String> = split_sentences(&raw)
            .into_iter()
            .filter(|s| passes_filter(s, &rules))
            .collect();
        if pool.len() < need {
            return Err(CorpusError::InsufficientSource {
                name: source.name.clone(),
                need,
                have: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(source_seed(seed, &source.name));
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), need).into_vec();
        picked.sort_unstable();
        for idx in picked {
            sentences.push((source.name.clone(), pool[idx].clone()));
        }
        manifest_sources.push((source.name.clone(), need));
    }
    let corpus = Corpus {
        sentences: sentences
            .into_iter()
            .enumerate()
            .map(|(i, (source, text))| Sentence {
                id: format!("s{i:06}"),
                source,
                text,
            })
            .collect(),
    };
    let manifest = CorpusManifest {
        tier,
        sources: manifest_sources,
        seed,
        filter_rules: rules,
    };
    manifest.validate()?;
    Ok((corpus, manifest))
}

fn manifest_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("manifest.json")
}

/// Writes the corpus as one JSON record per line, with the manifest as a
/// `.manifest.json` sidecar.
pub fn save_corpus(
    corpus: &Corpus,
    manifest: &CorpusManifest,
    path: &Path,
) -> Result<(), CorpusError> {
    let io_err = |e: std::io::Error| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    for sentence in &corpus.sentences {
        let line =
            serde_json::to_string(sentence).map_err(|e| CorpusError::Format(e.to_string()))?;
        writeln!(file, "{line}").map_err(io_err)?;
    }
    let sidecar = manifest_path(path);
    let raw = serde_json::to_string_pretty(manifest)
        .map_err(|e| CorpusError::Format(e.to_string()))?;
    std::fs::write(&sidecar, raw).map_err(|e| CorpusError::Io {
        path: sidecar.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Loads a corpus written by [`save_corpus`]. Sentence ids must be unique.
/// The manifest sidecar is returned when present.
pub fn load_corpus(path: &Path) -> Result<(Corpus, Option<CorpusManifest>), CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut sentences = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: Sentence = serde_json::from_str(&line).map_err(|e| {
            CorpusError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if !seen.insert(sentence.id.clone()) {
            return Err(CorpusError::Format(format!(
                "duplicate sentence id {:?}",
                sentence.id
            )));
        }
        sentences.push(sentence);
    }
    let manifest = match std::fs::read_to_string(manifest_path(path)) {
        Ok(raw) => {
            let manifest: CorpusManifest =
                serde_json::from_str(&raw).map_err(|e| CorpusError::Format(e.to_string()))?;
            manifest.validate()?;
            Some(manifest)
        }
        Err(_) => None,
    };
    Ok((Corpus { sentences }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn write_source(dir: &Path, name: &str, n_sentences: usize) -> PathBuf {
        let mut text = String::new();
        for i in 0..n_sentences {
            // 12 words, all pure ASCII.
            writeln!(
                text,
                "The steady {name} record number {i} kept every word plainly readable today."
            )
            .unwrap();
        }
        let path = dir.join(format!("{name}.txt"));
        std::fs::write(&path, text).unwrap();
        path
    }

    fn fixture_sources(dir: &Path) -> Vec<SourceSpec> {
        STANDARD_SOURCE_COUNTS
            .iter()
            .map(|(name, full, k1, f50)| {
                let margin = (*k1).max(*f50) + 8;
                SourceSpec {
                    name: name.to_string(),
                    count_full: *full,
                    count_1k: *k1,
                    count_50: *f50,
                    path: write_source(dir, name, margin),
                }
            })
            .collect()
    }

    #[test]
    fn filter_rejects_short_sentences() {
        let rules = FilterRules::default();
        assert!(!passes_filter("Two words", &rules));
        assert!(passes_filter(
            "Fifteen plain words fill this sentence so the filter will accept it without any doubt",
            &rules
        ));
    }

    #[test]
    fn filter_rejects_impure_text() {
        let rules = FilterRules::default();
        // 12 words but ~40% of characters outside the allowed classes.
        let mixed = "один two три four пять six семь eight девять ten одиннадцать twelve";
        assert_eq!(word_count(mixed), 12);
        assert!(purity_ratio(mixed) < 0.95);
        assert!(!passes_filter(mixed, &rules));
    }

    #[test]
    fn purity_ratio_counts_character_classes() {
        // 8 of 10 chars are allowed: "abcd 123" plus two Cyrillic.
        let text = "abcd 123\u{0431}\u{0449}";
        assert!((purity_ratio(text) - 0.8).abs() < 1e-12);
        assert_eq!(purity_ratio(""), 1.0);
    }

    #[test]
    fn tier_counts_match_standard_table() {
        let dir = tempfile::tempdir().unwrap();
        let sources = fixture_sources(dir.path());

        let (corpus, manifest) = build_corpus(&sources, Tier::Fifty, 7).unwrap();
        assert_eq!(corpus.len(), 50);
        let expected = vec![
            ("BookCorpus".to_string(), 1),
            ("C4".to_string(), 12),
            ("CC_News".to_string(), 3),
            ("Gutenberg".to_string(), 2),
            ("OpenWebText".to_string(), 25),
            ("Roots".to_string(), 2),
            ("Wikipedia".to_string(), 5),
        ];
        assert_eq!(manifest.sources, expected);
        for (name, count) in &expected {
            let got = corpus.iter().filter(|s| &s.source == name).count();
            assert_eq!(got, *count, "source {name}");
        }
        for sentence in corpus.iter() {
            assert!(passes_filter(&sentence.text, &manifest.filter_rules));
        }
    }

    #[test]
    fn build_is_deterministic_for_fixed_seed() {
        let dir = tempfile::tempdir().unwrap();
        let sources = fixture_sources(dir.path());
        let (a, ma) = build_corpus(&sources, Tier::Fifty, 42).unwrap();
        let (b, mb) = build_corpus(&sources, Tier::Fifty, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (c, _) = build_corpus(&sources, Tier::Fifty, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn insufficient_source_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut sources = fixture_sources(dir.path());
        // Starve one source below its 1k-tier quota.
        write_source(dir.path(), "OpenWebText", 5);
        sources[4].path = dir.path().join("OpenWebText.txt");
        let err = build_corpus(&sources, Tier::OneK, 1).unwrap_err();
        match err {
            CorpusError::InsufficientSource { name, need, have } => {
                assert_eq!(name, "OpenWebText");
                assert_eq!(need, 497);
                assert_eq!(have, 5);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sources = fixture_sources(dir.path());
        let (corpus, manifest) = build_corpus(&sources, Tier::Fifty, 3).unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&corpus, &manifest, &path).unwrap();
        let (loaded, loaded_manifest) = load_corpus(&path).unwrap();
        assert_eq!(corpus, loaded);
        assert_eq!(Some(manifest), loaded_manifest);
    }

    #[test]
    fn load_rejects_missing_file_and_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(&dir.path().join("absent.jsonl")),
            Err(CorpusError::Io { .. })
        ));

        let path = dir.path().join("dup.jsonl");
        let record = r#"{"id":"s1","source":"X","text":"one two three"}"#;
        std::fs::write(&path, format!("{record}\n{record}\n")).unwrap();
        assert!(matches!(
            load_corpus(&path),
            Err(CorpusError::Format(msg)) if msg.contains("duplicate")
        ));
    }
}
