//! Run-config management: validated, serializable configs that dispatch to
//! the module operations, persist every report, and leave a run-record
//! manifest behind.
//!
//! A persisted config re-executes to identical report files on the same
//! backend; the config hash is computed over canonical (key-sorted) JSON so
//! it is stable across platforms.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, Tier};
use crate::dataset;
use crate::editors::{EditorConfig, ExternalRegistry};
use crate::gateway::BackendRegistry;
use crate::hardgen::{self, ChatCompletion};
use crate::harness::{self, RunOptions};
use crate::ppl::{self, Aggregation, PplOptions};
use crate::surrogate::{self, tasks::AdapterRegistry, LadderEditors, LadderOptions};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("partial run: {0}")]
    Partial(String),
    #[error("io error: {0}")]
    Io(String),
}

fn backend_err(e: impl std::fmt::Display) -> RunError {
    RunError::Backend(e.to_string())
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum RunCommand {
    BuildCorpus {
        tier: Tier,
        seed: u64,
        /// JSON list of source specs (name, per-tier counts, path).
        sources: PathBuf,
    },
    Ppl {
        model: String,
        corpus: PathBuf,
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default)]
        aggregation: Aggregation,
    },
    Sweep {
        model: String,
        dataset: PathBuf,
        corpus: PathBuf,
        editor: EditorConfig,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    Sequential {
        model: String,
        dataset: PathBuf,
        corpus: PathBuf,
        editor: EditorConfig,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    MineHard {
        dataset: PathBuf,
        sweeps: Vec<PathBuf>,
    },
    Ladder {
        model: String,
        dataset: PathBuf,
        corpus: PathBuf,
        gentle: EditorConfig,
        strong: EditorConfig,
        /// Explicit targets; when absent, the default 23-point schedule.
        #[serde(default)]
        targets: Option<Vec<f64>>,
        #[serde(default = "default_band")]
        band: f64,
        #[serde(default = "default_max_edits")]
        max_edits: usize,
    },
    Correlate {
        model: String,
        dataset: PathBuf,
        corpus: PathBuf,
        ladder: PathBuf,
        gentle: EditorConfig,
        strong: EditorConfig,
        cloze_fixture: PathBuf,
        binary_fixture: PathBuf,
    },
    GenerateHard {
        model: String,
        corpus: PathBuf,
        subjects: PathBuf,
        editor: EditorConfig,
        n_batches: usize,
        seed: u64,
        /// Replay fixture file; live endpoint when absent.
        #[serde(default)]
        fixtures: Option<PathBuf>,
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        llm_model: Option<String>,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    Report {
        run_dir: PathBuf,
    },
}

fn default_threshold() -> f64 {
    crate::DEFAULT_COLLAPSE_THRESHOLD
}

fn default_band() -> f64 {
    0.2
}

fn default_max_edits() -> usize {
    60
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub command: RunCommand,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, RunError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| RunError::Config(vec![e.to_string()]))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let mut problems = Vec::new();
        fn need_file(problems: &mut Vec<String>, field: &str, path: &Path) {
            if !path.exists() {
                problems.push(format!("{field}: {} does not exist", path.display()));
            }
        }
        match &self.command {
            RunCommand::BuildCorpus { sources, .. } => need_file(&mut problems, "sources", sources),
            RunCommand::Ppl { corpus, threshold, .. } => {
                need_file(&mut problems, "corpus", corpus);
                if *threshold <= 0.0 {
                    problems.push("threshold: must be positive".into());
                }
            }
            RunCommand::Sweep {
                dataset,
                corpus,
                editor,
                ..
            }
            | RunCommand::Sequential {
                dataset,
                corpus,
                editor,
                ..
            } => {
                need_file(&mut problems, "dataset", dataset);
                need_file(&mut problems, "corpus", corpus);
                if let Err(e) = editor.validate() {
                    problems.push(format!("editor: {e}"));
                }
            }
            RunCommand::MineHard { dataset, sweeps } => {
                need_file(&mut problems, "dataset", dataset);
                if sweeps.is_empty() {
                    problems.push("sweeps: at least one sweep report required".into());
                }
                for sweep in sweeps {
                    need_file(&mut problems, "sweeps", sweep);
                }
            }
            RunCommand::Ladder {
                dataset,
                corpus,
                gentle,
                strong,
                band,
                ..
            } => {
                need_file(&mut problems, "dataset", dataset);
                need_file(&mut problems, "corpus", corpus);
                if let Err(e) = gentle.validate() {
                    problems.push(format!("gentle: {e}"));
                }
                if let Err(e) = strong.validate() {
                    problems.push(format!("strong: {e}"));
                }
                if !(0.0..1.0).contains(band) {
                    problems.push(format!("band: {band} outside (0,1)"));
                }
            }
            RunCommand::Correlate {
                dataset,
                corpus,
                ladder,
                cloze_fixture,
                binary_fixture,
                ..
            } => {
                need_file(&mut problems, "dataset", dataset);
                need_file(&mut problems, "corpus", corpus);
                need_file(&mut problems, "ladder", ladder);
                need_file(&mut problems, "cloze_fixture", cloze_fixture);
                need_file(&mut problems, "binary_fixture", binary_fixture);
            }
            RunCommand::GenerateHard {
                corpus,
                subjects,
                editor,
                n_batches,
                fixtures,
                endpoint,
                ..
            } => {
                need_file(&mut problems, "corpus", corpus);
                need_file(&mut problems, "subjects", subjects);
                if let Err(e) = editor.validate() {
                    problems.push(format!("editor: {e}"));
                }
                if *n_batches == 0 {
                    problems.push("n_batches: must be at least 1".into());
                }
                if fixtures.is_none() && endpoint.is_none() {
                    problems.push("fixtures/endpoint: one of the two is required".into());
                }
                if let Some(f) = fixtures {
                    need_file(&mut problems, "fixtures", f);
                }
            }
            RunCommand::Report { run_dir } => need_file(&mut problems, "run_dir", run_dir),
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(problems))
        }
    }
}

/// Canonical JSON: objects with keys sorted recursively.
fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut sorted: Vec<(&String, &serde_json::Value)> = map.iter().collect();
            sorted.sort_by_key(|(k, _)| k.as_str());
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{}", serde_json::to_string(k).unwrap(), canonical_json(v)))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        serde_json::Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => serde_json::to_string(other).unwrap(),
    }
}

/// Stable across platforms for identical configs.
pub fn config_hash(config: &RunConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    let canonical = canonical_json(&value);
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<String>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

/// Shared registries for one process: model loaders, external editors, task
/// adapters.
pub struct RunContext {
    pub backends: BackendRegistry,
    pub external: ExternalRegistry,
    pub adapters: AdapterRegistry,
}

impl Default for RunContext {
    fn default() -> Self {
        RunContext {
            backends: BackendRegistry::builtin(),
            external: ExternalRegistry::new(),
            adapters: AdapterRegistry::new(),
        }
    }
}

/// Environment variable holding the chat-completion API key.
pub const API_KEY_ENV: &str = "CHAT_API_KEY";

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Executes the config: runs the named operation, writes all reports under
/// `out_dir`, and returns the run record (also persisted as
/// `run_record.json` alongside the resolved config).
pub fn run(config: &RunConfig, ctx: &mut RunContext) -> Result<RunRecord, RunError> {
    config.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    std::fs::create_dir_all(&config.out_dir).map_err(|e| RunError::Io(e.to_string()))?;

    let mut artifacts: Vec<PathBuf> = Vec::new();
    let mut summary: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let out = config.out_dir.clone();

    match &config.command {
        RunCommand::BuildCorpus { tier, seed, sources } => {
            let raw = std::fs::read_to_string(sources).map_err(|e| RunError::Io(e.to_string()))?;
            let specs: Vec<corpus::SourceSpec> =
                serde_json::from_str(&raw).map_err(|e| RunError::Config(vec![e.to_string()]))?;
            let (built, manifest) =
                corpus::build_corpus(&specs, *tier, *seed).map_err(backend_err)?;
            let path = out.join("corpus.jsonl");
            corpus::save_corpus(&built, &manifest, &path).map_err(backend_err)?;
            artifacts.push(path.clone());
            artifacts.push(path.with_extension("manifest.json"));
            summary.insert("sentences".into(), built.len().into());
            summary.insert("tier".into(), tier.to_string().into());
        }
        RunCommand::Ppl {
            model,
            corpus: corpus_path,
            threshold,
            aggregation,
        } => {
            let backend = ctx.backends.load(model).map_err(backend_err)?;
            let (built, manifest) = corpus::load_corpus(corpus_path).map_err(backend_err)?;
            let report = ppl::corpus_perplexity(
                backend.as_ref(),
                &built,
                manifest.as_ref(),
                PplOptions {
                    threshold: *threshold,
                    aggregation: *aggregation,
                },
            )
            .map_err(backend_err)?;
            let path = out.join("ppl_report.jsonl");
            ppl::save_report(&report, &path).map_err(backend_err)?;
            artifacts.push(path);
            summary.insert("aggregate".into(), report.aggregate.into());
            summary.insert("verdict".into(), report.verdict.to_string().into());
        }
        RunCommand::Sweep {
            model,
            dataset: dataset_path,
            corpus: corpus_path,
            editor,
            threshold,
        } => {
            let mut backend = ctx.backends.load(model).map_err(backend_err)?;
            let dataset = dataset::load_dataset(dataset_path).map_err(backend_err)?;
            let (built, manifest) = corpus::load_corpus(corpus_path).map_err(backend_err)?;
            let options = RunOptions {
                ppl: PplOptions {
                    threshold: *threshold,
                    ..PplOptions::default()
                },
                ..RunOptions::default()
            };
            let report = harness::single_edit_sweep(
                &dataset,
                editor,
                backend.as_mut(),
                &built,
                manifest.as_ref(),
                Some(&mut ctx.external),
                options,
            )
            .map_err(backend_err)?;
            let path = out.join("sweep_report.jsonl");
            harness::save_sweep_report(&report, &path).map_err(backend_err)?;
            artifacts.push(path);
            let errors = report.cases.iter().filter(|c| c.error.is_some()).count();
            summary.insert("cases".into(), report.cases.len().into());
            summary.insert("hard_cases".into(), report.hard_cases.len().into());
            summary.insert("editor_errors".into(), errors.into());
            if errors > 0 {
                finish(config, &started_at, &artifacts, &summary)?;
                return Err(RunError::Partial(format!(
                    "{errors} of {} cases aborted on editor failure",
                    report.cases.len()
                )));
            }
        }
        RunCommand::Sequential {
            model,
            dataset: dataset_path,
            corpus: corpus_path,
            editor,
            threshold,
        } => {
            let mut backend = ctx.backends.load(model).map_err(backend_err)?;
            let dataset = dataset::load_dataset(dataset_path).map_err(backend_err)?;
            let (built, manifest) = corpus::load_corpus(corpus_path).map_err(backend_err)?;
            let options = RunOptions {
                ppl: PplOptions {
                    threshold: *threshold,
                    ..PplOptions::default()
                },
                ..RunOptions::default()
            };
            let trace = harness::sequential_run(
                &dataset,
                editor,
                backend.as_mut(),
                &built,
                manifest.as_ref(),
                Some(&mut ctx.external),
                options,
            )
            .map_err(backend_err)?;
            let path = out.join("sequential_trace.jsonl");
            harness::save_trace(&trace, &path).map_err(backend_err)?;
            artifacts.push(path);
            summary.insert("edits".into(), trace.entries.len().into());
            summary.insert("success_rate".into(), trace.success_rate.into());
            summary.insert(
                "final_verdict".into(),
                trace.final_verdict.to_string().into(),
            );
        }
        RunCommand::MineHard { dataset: dataset_path, sweeps } => {
            let dataset = dataset::load_dataset(dataset_path).map_err(backend_err)?;
            let mut reports = Vec::new();
            for sweep in sweeps {
                reports.push(harness::load_sweep_report(sweep).map_err(backend_err)?);
            }
            let records = harness::mine_hard_cases(&reports, &dataset).map_err(backend_err)?;
            let path = out.join("hard_cases.json");
            dataset::save_hard_records(&records, &path).map_err(backend_err)?;
            artifacts.push(path);
            summary.insert("unique_hard_cases".into(), records.len().into());
        }
        RunCommand::Ladder {
            model,
            dataset: dataset_path,
            corpus: corpus_path,
            gentle,
            strong,
            targets,
            band,
            max_edits,
        } => {
            let backend = ctx.backends.load(model).map_err(backend_err)?;
            let dataset = dataset::load_dataset(dataset_path).map_err(backend_err)?;
            let (built, _) = corpus::load_corpus(corpus_path).map_err(backend_err)?;
            let options = LadderOptions {
                band: *band,
                max_edits: *max_edits,
                ..LadderOptions::default()
            };
            let resolved_targets = match targets {
                Some(t) => t.clone(),
                None => {
                    let original = ppl::corpus_perplexity(
                        backend.as_ref(),
                        &built,
                        None,
                        options.ppl,
                    )
                    .map_err(backend_err)?
                    .aggregate;
                    surrogate::default_targets(original, crate::DEFAULT_COLLAPSE_THRESHOLD)
                }
            };
            let editors = LadderEditors {
                gentle: gentle.clone(),
                strong: strong.clone(),
            };
            let points = surrogate::build_ladder(
                backend.as_ref(),
                &editors,
                &dataset,
                &built,
                &resolved_targets,
                Some(&mut ctx.external),
                &options,
            )
            .map_err(backend_err)?;
            let path = out.join("ladder.jsonl");
            surrogate::save_ladder(&points, &path).map_err(backend_err)?;
            artifacts.push(path);
            summary.insert("points".into(), points.len().into());
        }
        RunCommand::Correlate {
            model,
            dataset: dataset_path,
            corpus: corpus_path,
            ladder,
            gentle,
            strong,
            cloze_fixture,
            binary_fixture,
        } => {
            let backend = ctx.backends.load(model).map_err(backend_err)?;
            let dataset = dataset::load_dataset(dataset_path).map_err(backend_err)?;
            let (_built, _) = corpus::load_corpus(corpus_path).map_err(backend_err)?;
            let points = surrogate::load_ladder(ladder).map_err(backend_err)?;
            let editors = LadderEditors {
                gentle: gentle.clone(),
                strong: strong.clone(),
            };
            let mut adapters = AdapterRegistry::new();
            adapters.register(Box::new(
                surrogate::ClozeTask::from_file(cloze_fixture).map_err(backend_err)?,
            ));
            adapters.register(Box::new(
                surrogate::BinaryChoiceTask::from_file(binary_fixture).map_err(backend_err)?,
            ));
            let evaluated = surrogate::evaluate_ladder(
                backend.as_ref(),
                &points,
                &editors,
                &dataset,
                &adapters,
                Some(&mut ctx.external),
            )
            .map_err(backend_err)?;
            let reports = surrogate::correlation_reports(&evaluated).map_err(backend_err)?;
            let dir = out.join("correlations");
            surrogate::save_correlations(&reports, &dir).map_err(backend_err)?;
            artifacts.push(dir.join("correlations.json"));
            for report in &reports {
                artifacts.push(dir.join(format!("correlation_{}.tsv", report.task)));
                if let Some(rho) = report.rho {
                    summary.insert(format!("rho_{}", report.task), rho.into());
                }
                if let Some(flag) = &report.flag {
                    summary.insert(format!("flag_{}", report.task), flag.clone().into());
                }
            }
        }
        RunCommand::GenerateHard {
            model,
            corpus: corpus_path,
            subjects,
            editor,
            n_batches,
            seed,
            fixtures,
            endpoint,
            llm_model,
            threshold,
        } => {
            let mut backend = ctx.backends.load(model).map_err(backend_err)?;
            let (built, _) = corpus::load_corpus(corpus_path).map_err(backend_err)?;
            let repo = hardgen::SubjectRepository::load(subjects).map_err(backend_err)?;
            let mut client: Box<dyn ChatCompletion> = match (fixtures, endpoint) {
                (Some(path), _) => {
                    Box::new(hardgen::ReplayChatClient::from_file(path).map_err(backend_err)?)
                }
                (None, Some(url)) => Box::new(hardgen::HttpChatClient::new(
                    url.clone(),
                    llm_model.clone().unwrap_or_else(|| "gpt-3.5-turbo".into()),
                    API_KEY_ENV,
                )),
                (None, None) => unreachable!("validated"),
            };
            let gen_config = hardgen::GenerationConfig {
                n_batches: *n_batches,
                seed: *seed,
                ..Default::default()
            };
            let generated = hardgen::generate_candidates(&repo, client.as_mut(), &gen_config)
                .map_err(backend_err)?;
            let validated = hardgen::validate_candidates(
                &generated.candidates,
                editor,
                backend.as_mut(),
                &built,
                *threshold,
                Some(&mut ctx.external),
            )
            .map_err(backend_err)?;
            let path = out.join("hard_edit.json");
            hardgen::save_hard_edit_records(
                &validated.kept,
                &editor.method.name(),
                backend.model_id(),
                &path,
            )
            .map_err(backend_err)?;
            artifacts.push(path);
            summary.insert("generated".into(), generated.candidates.len().into());
            summary.insert("dropped_malformed".into(), generated.dropped.into());
            summary.insert(
                "duplicates_removed".into(),
                generated.duplicates_removed.into(),
            );
            summary.insert("kept".into(), validated.kept.len().into());
            summary.insert(
                "rejected_below_threshold".into(),
                validated.rejected_below_threshold.into(),
            );
            if !validated.rejected_errors.is_empty() {
                summary.insert(
                    "rejected_errors".into(),
                    validated.rejected_errors.len().into(),
                );
            }
        }
        RunCommand::Report { run_dir } => {
            let written = crate::plots::emit_plots(run_dir).map_err(backend_err)?;
            summary.insert("plots".into(), written.len().into());
            artifacts.extend(written);
        }
    }

    finish(config, &started_at, &artifacts, &summary)
}

fn finish(
    config: &RunConfig,
    started_at: &str,
    artifacts: &[PathBuf],
    summary: &BTreeMap<String, serde_json::Value>,
) -> Result<RunRecord, RunError> {
    let record = RunRecord {
        config_hash: config_hash(config),
        started_at: started_at.to_string(),
        finished_at: chrono::Utc::now().to_rfc3339(),
        artifacts: artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        summary: summary.clone(),
    };
    let config_json = serde_json::to_string_pretty(config)
        .map_err(|e| RunError::Io(e.to_string()))?;
    std::fs::write(config.out_dir.join("config.json"), config_json)
        .map_err(|e| RunError::Io(e.to_string()))?;
    let record_json =
        serde_json::to_string_pretty(&record).map_err(|e| RunError::Io(e.to_string()))?;
    std::fs::write(config.out_dir.join("run_record.json"), record_json)
        .map_err(|e| RunError::Io(e.to_string()))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::toy::ToyTableModel;

    fn toy_model_file(dir: &Path) -> PathBuf {
        let model = ToyTableModel::from_rows(
            "t",
            &["a", "b", "c"],
            vec![
                ("<s>", vec![0.5, 0.3, 0.2]),
                ("a", vec![0.6, 0.3, 0.1]),
                ("b", vec![0.2, 0.6, 0.2]),
                ("c", vec![0.3, 0.3, 0.4]),
            ],
        )
        .unwrap();
        let path = dir.join("toy.json");
        model.save(&path).unwrap();
        path
    }

    fn toy_corpus_file(dir: &Path) -> PathBuf {
        let path = dir.join("corpus.jsonl");
        let lines = [
            r#"{"id":"s0","source":"t","text":"a b c a"}"#,
            r#"{"id":"s1","source":"t","text":"b b a"}"#,
        ];
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn unknown_model_scheme_is_backend_error_and_bad_paths_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = toy_corpus_file(dir.path());
        let config = RunConfig {
            command: RunCommand::Ppl {
                model: "nosuch:anything".into(),
                corpus: corpus.clone(),
                threshold: 1000.0,
                aggregation: Aggregation::MeanSentence,
            },
            out_dir: dir.path().join("out"),
        };
        let mut ctx = RunContext::default();
        assert!(matches!(run(&config, &mut ctx), Err(RunError::Backend(_))));

        let config = RunConfig {
            command: RunCommand::Ppl {
                model: "toy:x.json".into(),
                corpus: dir.path().join("absent.jsonl"),
                threshold: 1000.0,
                aggregation: Aggregation::MeanSentence,
            },
            out_dir: dir.path().join("out2"),
        };
        match run(&config, &mut ctx) {
            Err(RunError::Config(problems)) => {
                assert!(problems[0].contains("corpus"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn ppl_run_writes_report_and_record() {
        let dir = tempfile::tempdir().unwrap();
        let model_path = toy_model_file(dir.path());
        let corpus = toy_corpus_file(dir.path());
        let out = dir.path().join("run");
        let config = RunConfig {
            command: RunCommand::Ppl {
                model: format!("toy:{}", model_path.display()),
                corpus,
                threshold: 1000.0,
                aggregation: Aggregation::MeanSentence,
            },
            out_dir: out.clone(),
        };
        let mut ctx = RunContext::default();
        let record = run(&config, &mut ctx).unwrap();
        assert!(out.join("ppl_report.jsonl").exists());
        assert!(out.join("run_record.json").exists());
        assert!(out.join("config.json").exists());
        assert!(record.summary.contains_key("aggregate"));
        assert_eq!(record.config_hash, config_hash(&config));
    }

    #[test]
    fn replaying_a_config_reproduces_report_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let model_path = toy_model_file(dir.path());
        let corpus = toy_corpus_file(dir.path());
        let run_once = |out: PathBuf| {
            let config = RunConfig {
                command: RunCommand::Ppl {
                    model: format!("toy:{}", model_path.display()),
                    corpus: corpus.clone(),
                    threshold: 1000.0,
                    aggregation: Aggregation::MeanSentence,
                },
                out_dir: out.clone(),
            };
            let mut ctx = RunContext::default();
            run(&config, &mut ctx).unwrap();
            std::fs::read(out.join("ppl_report.jsonl")).unwrap()
        };
        let a = run_once(dir.path().join("r1"));
        let b = run_once(dir.path().join("r2"));
        assert_eq!(a, b);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let config = |threshold: f64| RunConfig {
            command: RunCommand::Ppl {
                model: "toy:m.json".into(),
                corpus: PathBuf::from("c.jsonl"),
                threshold,
                aggregation: Aggregation::MeanSentence,
            },
            out_dir: PathBuf::from("out"),
        };
        assert_eq!(config_hash(&config(1000.0)), config_hash(&config(1000.0)));
        assert_ne!(config_hash(&config(1000.0)), config_hash(&config(999.0)));
    }

    #[test]
    fn config_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            command: RunCommand::Sweep {
                model: "tinylm:model.json".into(),
                dataset: PathBuf::from("cases.json"),
                corpus: PathBuf::from("corpus.jsonl"),
                editor: EditorConfig::rank_one(40, 0.5),
                threshold: 1000.0,
            },
            out_dir: dir.path().join("out"),
        };
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(config_hash(&config), config_hash(&loaded));
    }
}
