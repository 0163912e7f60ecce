//! Generation of candidate hard edit cases via a chat-completion LLM,
//! deduplication, and validation by single-edit perplexity filtering.
//!
//! The pipeline: sample reference subjects from the repository, render the
//! four-part generation prompt, parse the returned JSON records, drop
//! malformed ones, deduplicate case-insensitively, then keep exactly the
//! candidates whose single edit pushes corpus perplexity over the threshold.

pub mod llm;

pub use llm::{ChatCompletion, ChatMessage, HttpChatClient, LlmError, ReplayChatClient};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::dataset::{save_hard_records, DatasetError, EditRequest, HardRecord};
use crate::editors::{apply_edit, EditorConfig, ExternalRegistry};
use crate::gateway::{restore_weights, snapshot_weights, GatewayError, ModelBackend};
use crate::ppl::{corpus_perplexity, PplError, PplOptions, Verdict};

#[derive(Debug, Error)]
pub enum HardgenError {
    #[error("subject repository error: {0}")]
    Repository(String),
    #[error("subject pool exhausted: need {need}, have {have} unexcluded")]
    Exhausted { need: usize, have: usize },
    #[error("template is missing slot {0:?}")]
    MissingSlot(String),
    #[error("no parsable candidate records in response")]
    NoParsableContent,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ppl(#[from] PplError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error: {0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// Subject repository
// ---------------------------------------------------------------------------

/// Categorized pool of single-word subjects used to steer generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRepository {
    categories: BTreeMap<String, Vec<String>>,
}

impl SubjectRepository {
    pub fn new(categories: BTreeMap<String, Vec<String>>) -> Result<Self, HardgenError> {
        for (category, subjects) in &categories {
            for subject in subjects {
                if subject.is_empty() || subject.chars().any(char::is_whitespace) {
                    return Err(HardgenError::Repository(format!(
                        "subject {subject:?} in {category:?} is not a single word"
                    )));
                }
            }
        }
        Ok(SubjectRepository { categories })
    }

    pub fn load(path: &Path) -> Result<Self, HardgenError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| HardgenError::Repository(format!("{}: {e}", path.display())))?;
        let categories: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&raw).map_err(|e| HardgenError::Repository(e.to_string()))?;
        Self::new(categories)
    }

    /// All subjects in stable (category, position) order.
    pub fn all_subjects(&self) -> Vec<String> {
        self.categories.values().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.categories.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `k` distinct non-excluded subjects, deterministically per seed.
pub fn sample_subjects(
    repo: &SubjectRepository,
    k: usize,
    seed: u64,
    excluded: &BTreeSet<String>,
) -> Result<Vec<String>, HardgenError> {
    let pool: Vec<String> = repo
        .all_subjects()
        .into_iter()
        .filter(|s| !excluded.contains(s))
        .collect();
    if pool.len() < k {
        return Err(HardgenError::Exhausted {
            need: k,
            have: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), k);
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

/// Seed example shown to the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedExample {
    pub prompt: String,
    pub target_new: String,
    pub subject: String,
    pub ground_truth: String,
}

pub fn default_seed_examples() -> Vec<SeedExample> {
    vec![
        SeedExample {
            prompt: "Thunder's occupation is".into(),
            target_new: "architect".into(),
            subject: "Thunder".into(),
            ground_truth: "actor".into(),
        },
        SeedExample {
            prompt: "Arthur is located in".into(),
            target_new: "California".into(),
            subject: "Arthur".into(),
            ground_truth: "Illinois".into(),
        },
        SeedExample {
            prompt: "Minecraft, created by".into(),
            target_new: "IBM".into(),
            subject: "Minecraft".into(),
            ground_truth: "Microsoft".into(),
        },
        SeedExample {
            prompt: "Flickr owner".into(),
            target_new: "Houston".into(),
            subject: "Flickr".into(),
            ground_truth: "Yahoo".into(),
        },
    ]
}

pub const SEED_EXAMPLES_SLOT: &str = "{{seed_examples}}";
pub const SUBJECTS_SLOT: &str = "{{subjects}}";

/// Four-part generation prompt: task description, seed examples, reference
/// subject list, and trailing emphasis instructions.
pub const DEFAULT_PROMPT_TEMPLATE: &str = r#"**Task Description**:
    1. **Generate Data Samples**    : Create a set of data samples, formatted as JSON object.
    2. **Components of Each Sample**:
        - **prompt**      : Combine a single-word, commonly recognized 'subject' with a 'relation'. The 'subject' should be a single word and easily identifiable.
        - **subject**     : Clearly define the 'subject' for each prompt, it must be strictly one word, universally recognizable and unambiguous.
        - **target_new**  : Propose a 'target_new', which is a plausible yet distinct counterfactual alternative to the 'ground_truth'. It should illustrate a potential change in output achievable through model editing.
        - **ground_truth**: Specify the 'ground_truth', ensuring it's a noun entity and relevant to the 'subject'.
    3. **Sentence Formation**       : Each 'prompt', combined with 'target_new' or 'ground_truth', should form a coherent sentence in the format of (subject, relation, object).
    4. **Output Format**            : Return the data in JSON format.

**Example Seed Sample**:
```json
{{seed_examples}}
```

**You can refer to the Subjects List (JSON Format)**:
```json
{
    "subjects": {{subjects}}
}
```

**Instructions:**
    - Cross-reference each new 'subject' against the 'excluded_subjects' JSON array to ensure no repetition.
    - Strictly ensure all 'subjects' are single-word entities, widely recognized and not compound words or phrases.
    - 'target_new' and 'ground_truth' should both be nouns and contextually appropriate for the 'subject'!!!
    - Creativity is encouraged in selecting 'target_new' to depict a clear **contrast** with 'ground_truth'.
    - Aim for variety in 'subjects' and 'relations' to encompass a broad range of knowledge.
    - Develop more varied and common 'relations' that logically link the 'subject' to an 'object', ensuring plausibility and relevance.
    - Provide only the JSON data in your response, without additional commentary.
    - Generate 10 data points
    - The 'subject' must be a **single** word!!!
    - **'target_new' must be a clearly false answer to 'prompt'!!!**
"#;

/// Fills the template's example and subject slots. Both slots must be
/// present and the example list non-empty.
pub fn render_prompt(
    template: &str,
    subjects: &[String],
    seed_examples: &[SeedExample],
) -> Result<String, HardgenError> {
    if !template.contains(SEED_EXAMPLES_SLOT) {
        return Err(HardgenError::MissingSlot(SEED_EXAMPLES_SLOT.to_string()));
    }
    if !template.contains(SUBJECTS_SLOT) {
        return Err(HardgenError::MissingSlot(SUBJECTS_SLOT.to_string()));
    }
    if seed_examples.is_empty() {
        return Err(HardgenError::MissingSlot(
            "seed example list is empty".to_string(),
        ));
    }
    let examples_json = serde_json::to_string_pretty(seed_examples)
        .map_err(|e| HardgenError::Io(e.to_string()))?;
    let subjects_json =
        serde_json::to_string(subjects).map_err(|e| HardgenError::Io(e.to_string()))?;
    Ok(template
        .replace(SEED_EXAMPLES_SLOT, &examples_json)
        .replace(SUBJECTS_SLOT, &subjects_json))
}

// ---------------------------------------------------------------------------
// Candidate parsing
// ---------------------------------------------------------------------------

/// One generated candidate before validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSample {
    pub prompt: String,
    pub target_new: String,
    pub subject: String,
    pub ground_truth: String,
    pub batch_id: usize,
}

impl CandidateSample {
    pub fn to_request(&self, case_id: impl Into<String>) -> EditRequest {
        EditRequest {
            case_id: case_id.into(),
            subject: self.subject.clone(),
            prompt: self.prompt.clone(),
            target_new: self.target_new.clone(),
            ground_truth: self.ground_truth.clone(),
        }
    }
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub kept: Vec<CandidateSample>,
    /// Human-readable reasons for each dropped record.
    pub dropped: Vec<String>,
}

fn strip_code_fences(response: &str) -> &str {
    let trimmed = response.trim();
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        // Skip an optional language tag on the fence line.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            return body[..end].trim();
        }
    }
    trimmed
}

fn extract_json_array(text: &str) -> Option<Vec<Value>> {
    if let Ok(values) = serde_json::from_str::<Vec<Value>>(text) {
        return Some(values);
    }
    let start = text.find('[')?;
    let bytes = text.as_bytes();
    for end in (start..bytes.len()).rev() {
        if bytes[end] == b']' {
            if let Ok(values) = serde_json::from_str::<Vec<Value>>(&text[start..=end]) {
                return Some(values);
            }
        }
    }
    None
}

fn candidate_from_value(value: &Value, batch_id: usize) -> Result<CandidateSample, String> {
    let field = |name: &str| -> Result<String, String> {
        value
            .get(name)
            .and_then(|v| v.as_str())
            .map(|s| s.trim().to_string())
            .ok_or_else(|| format!("missing string field {name:?}: {value}"))
    };
    let candidate = CandidateSample {
        prompt: field("prompt")?,
        target_new: field("target_new")?,
        subject: field("subject")?,
        ground_truth: field("ground_truth")?,
        batch_id,
    };
    if candidate.subject.is_empty() || candidate.subject.chars().any(char::is_whitespace) {
        return Err(format!(
            "subject {:?} is not strictly one word",
            candidate.subject
        ));
    }
    if !candidate.prompt.starts_with(&candidate.subject) {
        return Err(format!(
            "prompt {:?} does not start with subject {:?}",
            candidate.prompt, candidate.subject
        ));
    }
    if candidate.target_new.eq_ignore_ascii_case(&candidate.ground_truth) {
        return Err(format!(
            "target_new {:?} equals ground_truth",
            candidate.target_new
        ));
    }
    Ok(candidate)
}

/// Extracts well-formed candidate records from an LLM response, dropping
/// malformed ones with reasons. Markdown code fences are tolerated.
pub fn parse_candidates(response: &str, batch_id: usize) -> Result<ParseOutcome, HardgenError> {
    let body = strip_code_fences(response);
    let values = extract_json_array(body).ok_or(HardgenError::NoParsableContent)?;
    let mut outcome = ParseOutcome::default();
    for value in &values {
        match candidate_from_value(value, batch_id) {
            Ok(candidate) => outcome.kept.push(candidate),
            Err(reason) => {
                log::warn!("dropping candidate: {reason}");
                outcome.dropped.push(reason);
            }
        }
    }
    if outcome.kept.is_empty() && outcome.dropped.is_empty() {
        return Err(HardgenError::NoParsableContent);
    }
    Ok(outcome)
}

/// Case-insensitive deduplication on (subject, prompt); first occurrence
/// wins.
pub fn dedup(candidates: Vec<CandidateSample>) -> Vec<CandidateSample> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let key = (
            candidate.subject.to_lowercase(),
            candidate.prompt.to_lowercase(),
        );
        if seen.insert(key) {
            out.push(candidate);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// A candidate that survived validation: its single edit pushed corpus
/// perplexity over the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardEditRecord {
    #[serde(flatten)]
    pub sample: CandidateSample,
    pub validation_ppl: f64,
}

#[derive(Debug, Default)]
pub struct ValidationOutcome {
    pub kept: Vec<HardEditRecord>,
    pub rejected_below_threshold: usize,
    pub rejected_errors: Vec<(CandidateSample, String)>,
}

/// Applies each candidate as a single edit to a fresh restore of the
/// reference model and keeps it iff the post-edit corpus perplexity strictly
/// exceeds the threshold. The model is restored at exit.
pub fn validate_candidates(
    candidates: &[CandidateSample],
    config: &EditorConfig,
    model: &mut dyn ModelBackend,
    corpus: &Corpus,
    threshold: f64,
    mut registry: Option<&mut ExternalRegistry>,
) -> Result<ValidationOutcome, HardgenError> {
    let layers = model.mutable_layers();
    let snapshot = snapshot_weights(model, &layers)?;
    let ppl_options = PplOptions {
        threshold,
        ..PplOptions::default()
    };
    let mut outcome = ValidationOutcome::default();
    for (i, candidate) in candidates.iter().enumerate() {
        restore_weights(model, &snapshot)?;
        let request = candidate.to_request(format!("cand-{i}"));
        match apply_edit(model, &request, config, registry.as_deref_mut()) {
            Ok(_) => {
                let report = corpus_perplexity(model, corpus, None, ppl_options)?;
                if report.verdict == Verdict::Collapsed {
                    outcome.kept.push(HardEditRecord {
                        sample: candidate.clone(),
                        validation_ppl: report.aggregate,
                    });
                } else {
                    outcome.rejected_below_threshold += 1;
                }
            }
            Err(err) => {
                outcome
                    .rejected_errors
                    .push((candidate.clone(), err.to_string()));
            }
        }
    }
    restore_weights(model, &snapshot)?;
    Ok(outcome)
}

/// Writes validated records in the canonical hard-case schema with the
/// perplexity field named `<editor>_<model>_ppl`.
pub fn save_hard_edit_records(
    records: &[HardEditRecord],
    editor: &str,
    model_id: &str,
    path: &Path,
) -> Result<(), HardgenError> {
    let ppl_field = format!("{editor}_{model_id}_ppl");
    let hard: Vec<HardRecord> = records
        .iter()
        .enumerate()
        .map(|(i, r)| HardRecord {
            request: r.sample.to_request(i.to_string()),
            ppl_field: ppl_field.clone(),
            ppl: r.validation_ppl,
        })
        .collect();
    save_hard_records(&hard, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

pub struct GenerationConfig {
    pub n_batches: usize,
    pub subjects_per_batch: usize,
    pub seed: u64,
    pub template: String,
    pub seed_examples: Vec<SeedExample>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_batches: 1,
            subjects_per_batch: 10,
            seed: 0,
            template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            seed_examples: default_seed_examples(),
        }
    }
}

#[derive(Debug)]
pub struct GenerationReport {
    pub candidates: Vec<CandidateSample>,
    pub dropped: usize,
    pub duplicates_removed: usize,
}

/// Runs `n_batches` generation rounds: sample subjects (excluding ones
/// already used), render the prompt, call the LLM, parse, then deduplicate
/// across all batches.
pub fn generate_candidates(
    repo: &SubjectRepository,
    client: &mut dyn ChatCompletion,
    config: &GenerationConfig,
) -> Result<GenerationReport, HardgenError> {
    let mut excluded = BTreeSet::new();
    let mut all = Vec::new();
    let mut dropped = 0usize;
    for batch in 0..config.n_batches {
        let subjects = sample_subjects(
            repo,
            config.subjects_per_batch,
            config.seed.wrapping_add(batch as u64),
            &excluded,
        )?;
        excluded.extend(subjects.iter().cloned());
        let prompt = render_prompt(&config.template, &subjects, &config.seed_examples)?;
        let response = client.complete(&[ChatMessage::user(prompt)])?;
        match parse_candidates(&response, batch) {
            Ok(outcome) => {
                dropped += outcome.dropped.len();
                all.extend(outcome.kept);
            }
            Err(HardgenError::NoParsableContent) => {
                log::warn!("batch {batch}: response had no parsable records");
            }
            Err(other) => return Err(other),
        }
    }
    let before = all.len();
    let candidates = dedup(all);
    Ok(GenerationReport {
        duplicates_removed: before - candidates.len(),
        dropped,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo() -> SubjectRepository {
        let mut categories = BTreeMap::new();
        categories.insert(
            "countries".to_string(),
            (0..200).map(|i| format!("Country{i}")).collect(),
        );
        categories.insert(
            "companies".to_string(),
            (0..200).map(|i| format!("Company{i}")).collect(),
        );
        SubjectRepository::new(categories).unwrap()
    }

    #[test]
    fn repository_rejects_multi_word_subjects() {
        let mut categories = BTreeMap::new();
        categories.insert("cities".to_string(), vec!["New York".to_string()]);
        assert!(SubjectRepository::new(categories).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_respects_exclusions() {
        let repo = repo();
        let none = BTreeSet::new();
        let a = sample_subjects(&repo, 10, 7, &none).unwrap();
        let b = sample_subjects(&repo, 10, 7, &none).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let unique: BTreeSet<&String> = a.iter().collect();
        assert_eq!(unique.len(), 10);

        let excluded: BTreeSet<String> = a.iter().cloned().collect();
        let c = sample_subjects(&repo, 10, 7, &excluded).unwrap();
        assert!(c.iter().all(|s| !excluded.contains(s)));
    }

    #[test]
    fn sampling_differs_across_seeds() {
        // Over 100 seed pairs on a 400-subject pool, identical draws are
        // vanishingly unlikely.
        let repo = repo();
        let none = BTreeSet::new();
        let mut distinct = 0;
        for seed in 0..100u64 {
            let a = sample_subjects(&repo, 10, seed, &none).unwrap();
            let b = sample_subjects(&repo, 10, seed + 1000, &none).unwrap();
            if a != b {
                distinct += 1;
            }
        }
        assert!(distinct >= 99);
    }

    #[test]
    fn exhaustion_is_reported() {
        let repo = repo();
        let excluded: BTreeSet<String> = repo.all_subjects().into_iter().skip(9).collect();
        assert!(matches!(
            sample_subjects(&repo, 10, 0, &excluded),
            Err(HardgenError::Exhausted { need: 10, have: 9 })
        ));
    }

    #[test]
    fn rendered_prompt_contains_all_subjects_verbatim() {
        let subjects: Vec<String> = (0..10).map(|i| format!("Subject{i}")).collect();
        let rendered =
            render_prompt(DEFAULT_PROMPT_TEMPLATE, &subjects, &default_seed_examples()).unwrap();
        for subject in &subjects {
            assert!(rendered.contains(subject));
        }
        assert!(!rendered.contains(SUBJECTS_SLOT));
        assert!(!rendered.contains(SEED_EXAMPLES_SLOT));
    }

    #[test]
    fn empty_example_list_is_missing_slot() {
        assert!(matches!(
            render_prompt(DEFAULT_PROMPT_TEMPLATE, &["A".to_string()], &[]),
            Err(HardgenError::MissingSlot(_))
        ));
        assert!(matches!(
            render_prompt("no slots here", &["A".to_string()], &default_seed_examples()),
            Err(HardgenError::MissingSlot(_))
        ));
    }

    #[test]
    fn parses_valid_records_and_drops_bad_ones() {
        let response = r#"Here you go:
```json
[
  {"prompt": "Tesla's founder is", "target_new": "Gates", "subject": "Tesla", "ground_truth": "Musk"},
  {"prompt": "New York is in", "target_new": "France", "subject": "New York", "ground_truth": "USA"},
  {"prompt": "The capital of France is", "target_new": "Berlin", "subject": "France", "ground_truth": "Paris"},
  {"prompt": "Minecraft is a popular", "target_new": "sport", "subject": "Minecraft", "ground_truth": "game"}
]
```"#;
        let outcome = parse_candidates(response, 3).unwrap();
        // "New York" is multi-word; the France prompt does not start with
        // its subject.
        assert_eq!(outcome.kept.len(), 2);
        assert_eq!(outcome.dropped.len(), 2);
        assert!(outcome.kept.iter().all(|c| c.batch_id == 3));
        assert_eq!(outcome.kept[0].subject, "Tesla");
    }

    #[test]
    fn fenceless_and_prefixed_json_still_parse() {
        let bare = r#"[{"prompt": "Zeus rules", "target_new": "oceans", "subject": "Zeus", "ground_truth": "skies"}]"#;
        assert_eq!(parse_candidates(bare, 0).unwrap().kept.len(), 1);
        let prefixed = format!("Sure! Here is the JSON:\n{bare}\nHope that helps.");
        assert_eq!(parse_candidates(&prefixed, 0).unwrap().kept.len(), 1);
    }

    #[test]
    fn garbage_is_no_parsable_content() {
        assert!(matches!(
            parse_candidates("I cannot help with that.", 0),
            Err(HardgenError::NoParsableContent)
        ));
    }

    fn candidate(subject: &str, prompt: &str) -> CandidateSample {
        CandidateSample {
            prompt: prompt.to_string(),
            target_new: "x".into(),
            subject: subject.to_string(),
            ground_truth: "y".into(),
            batch_id: 0,
        }
    }

    #[test]
    fn dedup_is_case_insensitive_first_wins() {
        let kept = dedup(vec![
            candidate("Tesla", "Tesla makes"),
            candidate("tesla", "TESLA MAKES"),
            candidate("Tesla", "Tesla sells"),
        ]);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].subject, "Tesla");
        assert_eq!(kept[0].prompt, "Tesla makes");
    }

    #[test]
    fn dedup_membership_is_order_independent() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let base: Vec<CandidateSample> = (0..30)
            .map(|i| candidate(&format!("S{}", i % 10), &format!("S{} does {}", i % 10, i % 13)))
            .collect();
        let key_set = |cands: &[CandidateSample]| -> BTreeSet<(String, String)> {
            cands
                .iter()
                .map(|c| (c.subject.to_lowercase(), c.prompt.to_lowercase()))
                .collect()
        };
        let reference = key_set(&dedup(base.clone()));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut shuffled = base.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(key_set(&dedup(shuffled)), reference);
        }
    }
}
