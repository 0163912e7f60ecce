//! Deterministic synthetic-English world used for fixtures and desk-scale
//! runs: filler text from templates, a fact table binding entities to
//! objects through a handful of relations, counterfactual edit cases over
//! those facts, and task fixtures.
//!
//! Everything derives from one seed. Training text repeats each fact
//! sentence several times among fillers so a small model memorizes the
//! associations; raw source files contain fillers only (every filler
//! sentence clears the ten-word corpus filter). A share of entities are
//! ordinary nouns promoted to names, which entangles their representations
//! with common words — the pattern observed in edits that collapse models.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EditDataset, EditRequest};
use crate::surrogate::tasks::{BinaryChoiceItem, ClozeItem};

const NAME_ONSETS: [&str; 30] = [
    "Bel", "Cor", "Dal", "Fen", "Gar", "Hol", "Jor", "Kel", "Lor", "Mar", "Nor", "Ost", "Pel",
    "Quin", "Ros", "Sel", "Tor", "Ulv", "Var", "Wen", "Yel", "Zor", "Ash", "Brin", "Cres", "Dor",
    "Ev", "Fal", "Gren", "Hal",
];

const NAME_CODAS: [&str; 12] = [
    "mont", "wick", "ford", "ham", "stead", "berg", "vale", "more", "ton", "field", "brook",
    "holm",
];

/// Deterministic pool of distinct single-word proper names.
fn proper_names() -> Vec<String> {
    let mut names = Vec::with_capacity(NAME_ONSETS.len() * NAME_CODAS.len());
    for onset in NAME_ONSETS {
        for coda in NAME_CODAS {
            names.push(format!("{onset}{coda}"));
        }
    }
    names
}

const NOUNS: [&str; 80] = [
    "stone", "river", "mill", "garden", "bridge", "lantern", "ledger", "harbor", "meadow",
    "orchard", "tower", "market", "forge", "cellar", "archive", "stable", "granary", "chapel",
    "quarry", "wagon", "anchor", "barrel", "compass", "saddle", "spindle", "anvil", "basket",
    "candle", "carpet", "mirror", "hammer", "kettle", "ribbon", "shovel", "bucket", "chisel",
    "needle", "rope", "sail", "oven", "cradle", "plough", "fence", "gate", "ladder", "basin",
    "beam", "bench", "board", "bolt", "boot", "brick", "broom", "brush", "cart", "chain",
    "chest", "cloak", "cloth", "coin", "crate", "crest", "crown", "disc", "dome", "drape",
    "flag", "flask", "frame", "gear", "glove", "hinge", "hook", "jar", "keel", "knob", "latch",
    "lens", "lock", "mask",
];

const ADJECTIVES: [&str; 20] = [
    "quiet", "steady", "narrow", "ancient", "gentle", "crooked", "bright", "weathered", "humble",
    "sturdy", "restless", "patient", "hollow", "silver", "mossy", "distant", "careful", "plain",
    "broad", "faded",
];

const VERBS_PAST: [&str; 18] = [
    "crossed", "guarded", "repaired", "measured", "painted", "carried", "counted", "watched",
    "cleaned", "visited", "traded", "followed", "studied", "sketched", "covered", "opened",
    "closed", "passed",
];

const TIMES: [&str; 8] = [
    "morning", "evening", "winter", "summer", "autumn", "spring", "harvest", "festival",
];

const PLACES: [&str; 24] = [
    "Velhaven", "Tornbury", "Eastmoor", "Westdale", "Northook", "Southmere", "Greyfield",
    "Birchwood", "Stonebay", "Clearford", "Highmarsh", "Lowbrook", "Redcliff", "Goldport",
    "Ironvale", "Ashmont", "Fernhollow", "Oakridge", "Milldown", "Saltmere", "Windmoor",
    "Duskwood", "Brightwater", "Coldspring",
];

const MAKERS: [&str; 18] = [
    "Calden", "Virelli", "Thorsen", "Maquette", "Ostrand", "Beltram", "Quillon", "Severin",
    "Ardmore", "Falkner", "Grimsby", "Hollis", "Ivarsen", "Jorund", "Kestrel", "Lambard",
    "Norcliff", "Peverel",
];

const OCCUPATIONS: [&str; 16] = [
    "baker", "weaver", "clerk", "mason", "carpenter", "fisher", "teacher", "miller", "smith",
    "scribe", "gardener", "merchant", "potter", "tailor", "shepherd", "printer",
];

const INSTRUMENTS: [&str; 14] = [
    "fiddle", "flute", "drum", "harp", "horn", "lute", "organ", "viola", "cello", "banjo",
    "whistle", "bell", "chime", "pipe",
];

const COMPANIES: [&str; 16] = [
    "Brightworks", "Stonehold", "Fernland", "Copperline", "Silverpath", "Oakhollow",
    "Riverforge", "Goldleaf", "Ironbound", "Clearline", "Windrose", "Saltworks", "Marblegate",
    "Ashgrove", "Pinecrest", "Lanternline",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LocatedIn,
    CreatedBy,
    WorksAs,
    Plays,
    ProductOf,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::LocatedIn,
        Relation::CreatedBy,
        Relation::WorksAs,
        Relation::Plays,
        Relation::ProductOf,
    ];

    fn object_pool(&self) -> &'static [&'static str] {
        match self {
            Relation::LocatedIn => &PLACES,
            Relation::CreatedBy => &MAKERS,
            Relation::WorksAs => &OCCUPATIONS,
            Relation::Plays => &INSTRUMENTS,
            Relation::ProductOf => &COMPANIES,
        }
    }

    /// Prompt ending right before the object.
    fn prompt(&self, entity: &str) -> String {
        match self {
            Relation::LocatedIn => format!("{entity} is located in"),
            Relation::CreatedBy => format!("{entity} was created by"),
            Relation::WorksAs => format!("{entity} works as a"),
            Relation::Plays => format!("{entity} plays the"),
            Relation::ProductOf => format!("{entity}, a product of"),
        }
    }

    fn sentence(&self, entity: &str, object: &str) -> String {
        match self {
            Relation::ProductOf => {
                format!("{} {object}, sells well everywhere.", self.prompt(entity))
            }
            _ => format!("{} {object}.", self.prompt(entity)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub relation: Relation,
    pub object: String,
    /// Entity doubles as an ordinary noun in filler text.
    pub common_word_subject: bool,
}

/// Entity-specific continuation words used by the filler templates. Each
/// entity always keeps, does, and owns the same things, so predicting the
/// words after an entity mention requires recalling that entity's profile.
#[derive(Debug, Clone, PartialEq)]
struct EntityStyle {
    kept_a: &'static str,
    kept_b: &'static str,
    verb: &'static str,
    adj: &'static str,
    owned: &'static str,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub entities: usize,
    /// Fraction of entities drawn from the common-noun pool.
    pub common_entity_fraction: f64,
    pub min_fact_repeats: usize,
    pub max_fact_repeats: usize,
    pub filler_sentences: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            entities: 240,
            common_entity_fraction: 0.3,
            min_fact_repeats: 10,
            max_fact_repeats: 18,
            filler_sentences: 2200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub facts: Vec<Fact>,
    styles: std::collections::BTreeMap<String, EntityStyle>,
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

impl World {
    pub fn generate(config: WorldConfig) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_common = ((config.entities as f64) * config.common_entity_fraction).round() as usize;
        let n_proper = config.entities.saturating_sub(n_common);

        let mut entities: Vec<(String, bool)> = Vec::with_capacity(config.entities);
        let mut proper = proper_names();
        proper.shuffle(&mut rng);
        for name in proper.iter().cycle().take(n_proper) {
            entities.push((name.to_string(), false));
        }
        let mut commons = NOUNS.to_vec();
        commons.shuffle(&mut rng);
        for noun in commons.iter().cycle().take(n_common) {
            entities.push((capitalize(noun), true));
        }
        // Duplicate entity names get distinct relations below; keep names
        // unique to keep facts unambiguous.
        let mut seen = BTreeSet::new();
        entities.retain(|(name, _)| seen.insert(name.clone()));
        entities.shuffle(&mut rng);

        let mut facts = Vec::new();
        let mut styles = std::collections::BTreeMap::new();
        for (entity, common) in &entities {
            let mut relations = Relation::ALL.to_vec();
            relations.shuffle(&mut rng);
            let n_rel = rng.gen_range(2..=3);
            for relation in relations.into_iter().take(n_rel) {
                let pool = relation.object_pool();
                let object = pool[rng.gen_range(0..pool.len())].to_string();
                facts.push(Fact {
                    entity: entity.clone(),
                    relation,
                    object,
                    common_word_subject: *common,
                });
            }
            styles.insert(
                entity.clone(),
                EntityStyle {
                    kept_a: ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
                    kept_b: NOUNS[rng.gen_range(0..NOUNS.len())],
                    verb: VERBS_PAST[rng.gen_range(0..VERBS_PAST.len())],
                    adj: ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
                    owned: NOUNS[rng.gen_range(0..NOUNS.len())],
                },
            );
        }
        World {
            config,
            facts,
            styles,
        }
    }

    fn filler_sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let pick = |rng: &mut ChaCha8Rng, pool: &'static [&'static str]| -> &'static str {
            pool[rng.gen_range(0..pool.len())]
        };
        let entity = |rng: &mut ChaCha8Rng| -> (&str, &EntityStyle) {
            let fact = &self.facts[rng.gen_range(0..self.facts.len())];
            (fact.entity.as_str(), &self.styles[&fact.entity])
        };
        match rng.gen_range(0..12) {
            0 => format!(
                "The {} {} near the old {} {} the {} {} during the {}.",
                pick(rng, &ADJECTIVES),
                pick(rng, &NOUNS),
                pick(rng, &NOUNS),
                pick(rng, &VERBS_PAST),
                pick(rng, &ADJECTIVES),
                pick(rng, &NOUNS),
                pick(rng, &TIMES)
            ),
            1 => format!(
                "Every {} the {} from {} {} a {} {} beside the {}.",
                pick(rng, &TIMES),
                pick(rng, &OCCUPATIONS),
                pick(rng, &PLACES),
                pick(rng, &VERBS_PAST),
                pick(rng, &ADJECTIVES),
                pick(rng, &NOUNS),
                pick(rng, &NOUNS)
            ),
            2 => format!(
                "People in {} say the {} was {} before the {} ended quietly.",
                pick(rng, &PLACES),
                pick(rng, &NOUNS),
                pick(rng, &ADJECTIVES),
                pick(rng, &TIMES)
            ),
            3 => format!(
                "A {} {} stood beside the {} while the {} {} the {}.",
                pick(rng, &ADJECTIVES),
                pick(rng, &NOUNS),
                pick(rng, &NOUNS),
                pick(rng, &OCCUPATIONS),
                pick(rng, &VERBS_PAST),
                pick(rng, &NOUNS)
            ),
            4 => format!(
                "The {} carried a {} {} across the {} before the {} began.",
                pick(rng, &OCCUPATIONS),
                pick(rng, &ADJECTIVES),
                pick(rng, &NOUNS),
                pick(rng, &NOUNS),
                pick(rng, &TIMES)
            ),
            5 => format!(
                "Near the {} gate the {} {} kept a {} {} for the {}.",
                pick(rng, &PLACES),
                pick(rng, &ADJECTIVES),
                pick(rng, &OCCUPATIONS),
                pick(rng, &ADJECTIVES),
                pick(rng, &NOUNS),
                pick(rng, &TIMES)
            ),
            6 => {
                let (name, style) = entity(rng);
                format!(
                    "Travelers from {} often asked whether {} kept its {} {} during the {}.",
                    pick(rng, &PLACES),
                    name,
                    style.kept_a,
                    style.kept_b,
                    pick(rng, &TIMES)
                )
            }
            7 => {
                let (name, style) = entity(rng);
                format!(
                    "Many in {} recall how {} {} the {} {} one {} long ago.",
                    pick(rng, &PLACES),
                    name,
                    style.verb,
                    style.adj,
                    style.owned,
                    pick(rng, &TIMES)
                )
            }
            8 => {
                let (name, style) = entity(rng);
                format!(
                    "The {} from {} wrote that {} {} a {} {} there once.",
                    pick(rng, &OCCUPATIONS),
                    pick(rng, &PLACES),
                    name,
                    style.verb,
                    style.adj,
                    style.owned
                )
            }
            9 | 10 => {
                let (name, style) = entity(rng);
                format!(
                    "{} kept its {} {} near the {} through the {}.",
                    name,
                    style.kept_a,
                    style.kept_b,
                    pick(rng, &NOUNS),
                    pick(rng, &TIMES)
                )
            }
            _ => {
                let (name, style) = entity(rng);
                format!(
                    "{} {} the {} {} beside the {} almost every {}.",
                    name,
                    style.verb,
                    style.adj,
                    style.owned,
                    pick(rng, &NOUNS),
                    pick(rng, &TIMES)
                )
            }
        }
    }

    /// Fact sentences (each repeated per config) mixed with fillers,
    /// shuffled deterministically.
    pub fn training_sentences(&self) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        let mut sentences = Vec::new();
        for fact in &self.facts {
            let repeats = rng.gen_range(self.config.min_fact_repeats..=self.config.max_fact_repeats);
            for _ in 0..repeats {
                sentences.push(fact.relation.sentence(&fact.entity, &fact.object));
            }
        }
        for _ in 0..self.config.filler_sentences {
            sentences.push(self.filler_sentence(&mut rng));
        }
        sentences.shuffle(&mut rng);
        sentences
    }

    /// Filler-only sentences for one named raw source, seeded per source.
    pub fn source_sentences(&self, source_name: &str, n: usize) -> Vec<String> {
        let mut hash = 0u64;
        for b in source_name.bytes() {
            hash = hash.wrapping_mul(131).wrapping_add(b as u64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(2).wrapping_add(hash));
        (0..n).map(|_| self.filler_sentence(&mut rng)).collect()
    }

    /// Writes `<dir>/<name>.txt` per source with `margin` times its largest
    /// tier quota, ready for the corpus builder.
    pub fn write_standard_sources(&self, dir: &Path, margin: f64) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, full, k1, f50) in crate::corpus::STANDARD_SOURCE_COUNTS {
            let need = ((full.max(k1).max(f50) as f64) * margin).ceil() as usize;
            let mut text = String::new();
            for sentence in self.source_sentences(name, need) {
                let _ = writeln!(text, "{sentence}");
            }
            std::fs::write(dir.join(format!("{name}.txt")), text)?;
        }
        Ok(())
    }

    /// One counterfactual edit case per fact: the target is a different
    /// object from the same pool.
    pub fn edit_cases(&self) -> EditDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(3));
        let requests = self
            .facts
            .iter()
            .enumerate()
            .map(|(i, fact)| {
                let pool = fact.relation.object_pool();
                let target = loop {
                    let candidate = pool[rng.gen_range(0..pool.len())];
                    if candidate != fact.object {
                        break candidate;
                    }
                };
                EditRequest {
                    case_id: format!("case-{i:04}"),
                    subject: fact.entity.clone(),
                    prompt: fact.relation.prompt(&fact.entity),
                    target_new: target.to_string(),
                    ground_truth: fact.object.clone(),
                }
            })
            .collect();
        EditDataset {
            id: format!("synth-facts-{}", self.config.seed),
            requests,
        }
    }

    /// Final-word cloze items over fresh filler sentences.
    pub fn cloze_items(&self, n: usize) -> Vec<ClozeItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(4));
        (0..n)
            .map(|_| {
                let sentence = self.filler_sentence(&mut rng);
                let trimmed = sentence.trim_end_matches('.');
                let mut words: Vec<&str> = trimmed.split_whitespace().collect();
                let answer = words.pop().expect("template sentences are non-empty");
                ClozeItem {
                    context: words.join(" "),
                    answer: answer.to_string(),
                }
            })
            .collect()
    }

    /// Two-option items: the true continuation of a filler sentence against
    /// a scrambled one.
    pub fn binary_items(&self, n: usize) -> Vec<BinaryChoiceItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(5));
        (0..n)
            .map(|_| {
                let sentence = self.filler_sentence(&mut rng);
                let trimmed = sentence.trim_end_matches('.');
                let words: Vec<&str> = trimmed.split_whitespace().collect();
                let split = words.len() - 2;
                let prompt = words[..split].join(" ");
                let real = words[split..].join(" ");
                let fake = format!(
                    "{} {}",
                    NOUNS[rng.gen_range(0..NOUNS.len())],
                    TIMES[rng.gen_range(0..TIMES.len())]
                );
                let real_first = rng.gen_bool(0.5);
                BinaryChoiceItem {
                    prompt,
                    option_a: if real_first { real.clone() } else { fake.clone() },
                    option_b: if real_first { fake } else { real },
                    correct: if real_first { 0 } else { 1 },
                }
            })
            .collect()
    }

    /// Probe prompts over facts, for locality checks: `(prompt, expected)`.
    pub fn locality_probes(&self, n: usize) -> Vec<(String, String)> {
        self.facts
            .iter()
            .take(n)
            .map(|fact| (fact.relation.prompt(&fact.entity), fact.object.clone()))
            .collect()
    }
}

/// Writes the dataset in the nested rewrite format (prompt template with a
/// `{}` subject placeholder), exercising the field-mapping ingestion path.
pub fn save_rewrite_style(dataset: &EditDataset, path: &Path) -> std::io::Result<()> {
    let records: Vec<serde_json::Value> = dataset
        .requests
        .iter()
        .map(|r| {
            let template = r.prompt.replacen(&r.subject, "{}", 1);
            serde_json::json!({
                "case_id": r.case_id,
                "requested_rewrite": {
                    "prompt": template,
                    "subject": r.subject,
                    "target_new": {"str": r.target_new},
                    "target_true": {"str": r.ground_truth},
                }
            })
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{passes_filter, FilterRules};

    #[test]
    fn generation_is_deterministic() {
        let a = World::generate(WorldConfig::default());
        let b = World::generate(WorldConfig::default());
        assert_eq!(a.facts, b.facts);
        assert_eq!(a.training_sentences(), b.training_sentences());
        assert_eq!(a.edit_cases().requests, b.edit_cases().requests);
    }

    #[test]
    fn world_yields_enough_valid_edit_cases() {
        let world = World::generate(WorldConfig::default());
        let dataset = world.edit_cases();
        assert!(dataset.requests.len() >= 200, "{}", dataset.requests.len());
        for request in &dataset.requests {
            request.validate().unwrap();
        }
        // A meaningful share of subjects are common words.
        let common = world.facts.iter().filter(|f| f.common_word_subject).count();
        assert!(common * 5 >= world.facts.len());
    }

    #[test]
    fn fillers_pass_the_corpus_filter() {
        let world = World::generate(WorldConfig::default());
        let rules = FilterRules::default();
        for sentence in world.source_sentences("X", 300) {
            assert!(passes_filter(&sentence, &rules), "rejected: {sentence}");
        }
    }

    #[test]
    fn source_files_cover_standard_quotas() {
        let world = World::generate(WorldConfig { seed: 5, ..Default::default() });
        let dir = tempfile::tempdir().unwrap();
        world.write_standard_sources(dir.path(), 1.3).unwrap();
        let sources = crate::corpus::standard_sources(dir.path());
        let (corpus, manifest) = crate::corpus::build_corpus(&sources, crate::corpus::Tier::OneK, 9).unwrap();
        assert_eq!(corpus.len(), 1000);
        manifest.validate().unwrap();
    }

    #[test]
    fn task_fixtures_are_well_formed() {
        let world = World::generate(WorldConfig::default());
        for item in world.cloze_items(20) {
            assert!(!item.context.is_empty());
            assert!(!item.answer.contains(' '));
        }
        for item in world.binary_items(20) {
            assert!(item.correct <= 1);
            assert_ne!(item.option_a, item.option_b);
        }
    }

    #[test]
    fn rewrite_style_file_round_trips_through_the_loader() {
        let world = World::generate(WorldConfig { entities: 10, ..Default::default() });
        let dataset = world.edit_cases();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases_cf.json");
        save_rewrite_style(&dataset, &path).unwrap();
        let loaded = crate::dataset::load_dataset(&path).unwrap();
        assert_eq!(loaded.requests.len(), dataset.requests.len());
        for (a, b) in loaded.requests.iter().zip(&dataset.requests) {
            assert_eq!(a.prompt, b.prompt);
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.target_new, b.target_new);
        }
    }
}
