//! Command-line entry point.
//!
//! Every subcommand can start from a persisted config file (`--config`);
//! explicitly passed flags override the corresponding fields. The resolved
//! config and a run record are written into the output directory.
//!
//! Exit codes: 0 success, 2 config error, 3 backend failure, 4 partial run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collapse_core::corpus::Tier;
use collapse_core::editors::{EditorConfig, EditorMethod};
use collapse_core::ppl::Aggregation;
use collapse_core::run::{run, RunCommand, RunConfig, RunContext, RunError};

#[derive(Parser)]
#[command(
    name = "edit-collapse",
    about = "Detect, measure, and reproduce editing-induced collapse in language models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Base config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for reports and the run record.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct EditorFlags {
    /// Editor method: ft_linf, rank_one, or external:<name>.
    #[arg(long)]
    editor: Option<String>,
    /// Target layers (repeatable); defaults to the backend's edit layer.
    #[arg(long)]
    layer: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// ℓ∞ bound (ft_linf only).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl EditorFlags {
    fn build(&self, base: Option<&EditorConfig>) -> Result<EditorConfig, String> {
        let mut config = match (base, self.editor.as_deref()) {
            (Some(base), None) => base.clone(),
            (_, Some(name)) => {
                let method = match name {
                    "ft_linf" => EditorMethod::FtLinf,
                    "rank_one" => EditorMethod::RankOne,
                    other => match other.strip_prefix("external:") {
                        Some(ext) => EditorMethod::External { name: ext.into() },
                        None => return Err(format!("editor: unknown method {other:?}")),
                    },
                };
                let mut config = match method {
                    EditorMethod::FtLinf => EditorConfig::ft_linf(0.001, 40, 0.5),
                    _ => EditorConfig::rank_one(60, 0.5),
                };
                config.method = method;
                config
            }
            (None, None) => return Err("editor: required (or provide --config)".into()),
        };
        if !self.layer.is_empty() {
            config.target_layers = self.layer.clone();
        }
        if let Some(steps) = self.steps {
            config.steps = steps;
        }
        if let Some(lr) = self.learning_rate {
            config.learning_rate = lr;
        }
        if let Some(eps) = self.epsilon {
            config.epsilon = Some(eps);
        }
        if config.method != EditorMethod::FtLinf {
            config.epsilon = None;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a tiered perplexity corpus from raw text sources.
    BuildCorpus {
        #[command(flatten)]
        common: Common,
        /// Tier: full, 1k, or 50.
        #[arg(long)]
        tier: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON list of source specs.
        #[arg(long)]
        sources: Option<PathBuf>,
    },
    /// Score a corpus under a model and classify collapse.
    Ppl {
        #[command(flatten)]
        common: Common,
        /// Model spec, e.g. tinylm:path/model.json or toy:path/table.json.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// mean_sentence or token_pooled.
        #[arg(long)]
        aggregation: Option<String>,
    },
    /// Single-edit sweep: edit, score, restore, per case.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        editor: EditorFlags,
    },
    /// Sequential editing: cumulative edits with per-edit perplexity.
    Sequential {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        editor: EditorFlags,
    },
    /// Union the collapsed cases of one or more sweep reports.
    MineHard {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sweep report files (repeatable).
        #[arg(long)]
        sweep: Vec<PathBuf>,
    },
    /// Build a ladder of edited models near target perplexities.
    Ladder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Explicit targets (repeatable, ascending).
        #[arg(long)]
        target: Vec<f64>,
        #[arg(long)]
        band: Option<f64>,
        #[arg(long)]
        max_edits: Option<usize>,
    },
    /// Correlate ladder perplexities with task scores.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ladder: Option<PathBuf>,
        #[arg(long)]
        cloze_fixture: Option<PathBuf>,
        #[arg(long)]
        binary_fixture: Option<PathBuf>,
    },
    /// Generate candidate hard edits via a chat LLM and validate them.
    GenerateHard {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        n_batches: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Replay fixture file; omit to call a live endpoint.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        llm_model: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        editor: EditorFlags,
    },
    /// Render plots for a finished run directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

struct Problems(Vec<String>);

impl Problems {
    fn new() -> Self {
        Problems(Vec::new())
    }

    fn require<T: Clone>(&mut self, field: &str, flag: &Option<T>, base: Option<T>) -> Option<T> {
        match flag.clone().or(base) {
            Some(v) => Some(v),
            None => {
                self.0.push(format!("{field}: required"));
                None
            }
        }
    }

    fn into_result(self) -> Result<(), RunError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(self.0))
        }
    }
}

fn load_base(common: &Common) -> Result<Option<RunConfig>, RunError> {
    match &common.config {
        Some(path) => Ok(Some(RunConfig::load(path)?)),
        None => Ok(None),
    }
}

fn resolve_out(common: &Common, base: Option<&RunConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| base.map(|b| b.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs/latest"))
}

/// Merges flags over the optional base config into a full RunConfig.
fn build_config(command: Command) -> Result<RunConfig, RunError> {
    let mut problems = Problems::new();
    match command {
        Command::BuildCorpus {
            common,
            tier,
            seed,
            sources,
        } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::BuildCorpus { tier, seed, sources } => {
                    Some((*tier, *seed, sources.clone()))
                }
                _ => None,
            });
            let tier = match tier {
                Some(t) => Some(Tier::parse(&t).map_err(|e| RunError::Config(vec![e.to_string()]))?),
                None => base_cmd.as_ref().map(|(t, _, _)| *t),
            };
            let tier = problems.require("tier", &tier, None);
            let seed = seed.or(base_cmd.as_ref().map(|(_, s, _)| *s)).unwrap_or(0);
            let sources = problems.require(
                "sources",
                &sources,
                base_cmd.as_ref().map(|(_, _, p)| p.clone()),
            );
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::BuildCorpus {
                    tier: tier.unwrap(),
                    seed,
                    sources: sources.unwrap(),
                },
                out_dir,
            })
        }
        Command::Ppl {
            common,
            model,
            corpus,
            threshold,
            aggregation,
        } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::Ppl {
                    model,
                    corpus,
                    threshold,
                    aggregation,
                } => Some((model.clone(), corpus.clone(), *threshold, *aggregation)),
                _ => None,
            });
            let model = problems.require("model", &model, base_cmd.as_ref().map(|c| c.0.clone()));
            let corpus = problems.require("corpus", &corpus, base_cmd.as_ref().map(|c| c.1.clone()));
            let threshold = threshold
                .or(base_cmd.as_ref().map(|c| c.2))
                .unwrap_or(collapse_core::DEFAULT_COLLAPSE_THRESHOLD);
            let aggregation = match aggregation.as_deref() {
                Some("mean_sentence") => Aggregation::MeanSentence,
                Some("token_pooled") => Aggregation::TokenPooled,
                Some(other) => {
                    return Err(RunError::Config(vec![format!(
                        "aggregation: unknown value {other:?}"
                    )]))
                }
                None => base_cmd.map(|c| c.3).unwrap_or_default(),
            };
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::Ppl {
                    model: model.unwrap(),
                    corpus: corpus.unwrap(),
                    threshold,
                    aggregation,
                },
                out_dir,
            })
        }
        Command::Sweep {
            common,
            model,
            dataset,
            corpus,
            threshold,
            editor,
        } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::Sweep {
                    model,
                    dataset,
                    corpus,
                    editor,
                    threshold,
                } => Some((
                    model.clone(),
                    dataset.clone(),
                    corpus.clone(),
                    editor.clone(),
                    *threshold,
                )),
                _ => None,
            });
            let model = problems.require("model", &model, base_cmd.as_ref().map(|c| c.0.clone()));
            let dataset =
                problems.require("dataset", &dataset, base_cmd.as_ref().map(|c| c.1.clone()));
            let corpus = problems.require("corpus", &corpus, base_cmd.as_ref().map(|c| c.2.clone()));
            let editor_cfg = editor
                .build(base_cmd.as_ref().map(|c| &c.3))
                .map_err(|e| RunError::Config(vec![e]))?;
            let threshold = threshold
                .or(base_cmd.as_ref().map(|c| c.4))
                .unwrap_or(collapse_core::DEFAULT_COLLAPSE_THRESHOLD);
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::Sweep {
                    model: model.unwrap(),
                    dataset: dataset.unwrap(),
                    corpus: corpus.unwrap(),
                    editor: editor_cfg,
                    threshold,
                },
                out_dir,
            })
        }
        Command::Sequential {
            common,
            model,
            dataset,
            corpus,
            threshold,
            editor,
        } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::Sequential {
                    model,
                    dataset,
                    corpus,
                    editor,
                    threshold,
                } => Some((
                    model.clone(),
                    dataset.clone(),
                    corpus.clone(),
                    editor.clone(),
                    *threshold,
                )),
                _ => None,
            });
            let model = problems.require("model", &model, base_cmd.as_ref().map(|c| c.0.clone()));
            let dataset =
                problems.require("dataset", &dataset, base_cmd.as_ref().map(|c| c.1.clone()));
            let corpus = problems.require("corpus", &corpus, base_cmd.as_ref().map(|c| c.2.clone()));
            let editor_cfg = editor
                .build(base_cmd.as_ref().map(|c| &c.3))
                .map_err(|e| RunError::Config(vec![e]))?;
            let threshold = threshold
                .or(base_cmd.as_ref().map(|c| c.4))
                .unwrap_or(collapse_core::DEFAULT_COLLAPSE_THRESHOLD);
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::Sequential {
                    model: model.unwrap(),
                    dataset: dataset.unwrap(),
                    corpus: corpus.unwrap(),
                    editor: editor_cfg,
                    threshold,
                },
                out_dir,
            })
        }
        Command::MineHard {
            common,
            dataset,
            sweep,
        } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::MineHard { dataset, sweeps } => {
                    Some((dataset.clone(), sweeps.clone()))
                }
                _ => None,
            });
            let dataset =
                problems.require("dataset", &dataset, base_cmd.as_ref().map(|c| c.0.clone()));
            let sweeps = if sweep.is_empty() {
                base_cmd.map(|c| c.1).unwrap_or_default()
            } else {
                sweep
            };
            if sweeps.is_empty() {
                problems.0.push("sweep: at least one report required".into());
            }
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::MineHard {
                    dataset: dataset.unwrap(),
                    sweeps,
                },
                out_dir,
            })
        }
        Command::Ladder {
            common,
            model,
            dataset,
            corpus,
            target,
            band,
            max_edits,
        } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::Ladder {
                    model,
                    dataset,
                    corpus,
                    gentle,
                    strong,
                    targets,
                    band,
                    max_edits,
                } => Some((
                    model.clone(),
                    dataset.clone(),
                    corpus.clone(),
                    gentle.clone(),
                    strong.clone(),
                    targets.clone(),
                    *band,
                    *max_edits,
                )),
                _ => None,
            });
            let model = problems.require("model", &model, base_cmd.as_ref().map(|c| c.0.clone()));
            let dataset =
                problems.require("dataset", &dataset, base_cmd.as_ref().map(|c| c.1.clone()));
            let corpus = problems.require("corpus", &corpus, base_cmd.as_ref().map(|c| c.2.clone()));
            let gentle = base_cmd
                .as_ref()
                .map(|c| c.3.clone())
                .unwrap_or_else(|| EditorConfig::ft_linf(0.001, 30, 0.5));
            let strong = base_cmd
                .as_ref()
                .map(|c| c.4.clone())
                .unwrap_or_else(|| EditorConfig::rank_one(60, 0.5));
            let targets = if target.is_empty() {
                base_cmd.as_ref().and_then(|c| c.5.clone())
            } else {
                Some(target)
            };
            let band = band.or(base_cmd.as_ref().map(|c| c.6)).unwrap_or(0.2);
            let max_edits = max_edits.or(base_cmd.as_ref().map(|c| c.7)).unwrap_or(60);
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::Ladder {
                    model: model.unwrap(),
                    dataset: dataset.unwrap(),
                    corpus: corpus.unwrap(),
                    gentle,
                    strong,
                    targets,
                    band,
                    max_edits,
                },
                out_dir,
            })
        }
        Command::Correlate {
            common,
            model,
            dataset,
            corpus,
            ladder,
            cloze_fixture,
            binary_fixture,
        } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::Correlate {
                    model,
                    dataset,
                    corpus,
                    ladder,
                    gentle,
                    strong,
                    cloze_fixture,
                    binary_fixture,
                } => Some((
                    model.clone(),
                    dataset.clone(),
                    corpus.clone(),
                    ladder.clone(),
                    gentle.clone(),
                    strong.clone(),
                    cloze_fixture.clone(),
                    binary_fixture.clone(),
                )),
                _ => None,
            });
            let model = problems.require("model", &model, base_cmd.as_ref().map(|c| c.0.clone()));
            let dataset =
                problems.require("dataset", &dataset, base_cmd.as_ref().map(|c| c.1.clone()));
            let corpus = problems.require("corpus", &corpus, base_cmd.as_ref().map(|c| c.2.clone()));
            let ladder = problems.require("ladder", &ladder, base_cmd.as_ref().map(|c| c.3.clone()));
            let gentle = base_cmd
                .as_ref()
                .map(|c| c.4.clone())
                .unwrap_or_else(|| EditorConfig::ft_linf(0.001, 30, 0.5));
            let strong = base_cmd
                .as_ref()
                .map(|c| c.5.clone())
                .unwrap_or_else(|| EditorConfig::rank_one(60, 0.5));
            let cloze_fixture = problems.require(
                "cloze_fixture",
                &cloze_fixture,
                base_cmd.as_ref().map(|c| c.6.clone()),
            );
            let binary_fixture = problems.require(
                "binary_fixture",
                &binary_fixture,
                base_cmd.as_ref().map(|c| c.7.clone()),
            );
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::Correlate {
                    model: model.unwrap(),
                    dataset: dataset.unwrap(),
                    corpus: corpus.unwrap(),
                    ladder: ladder.unwrap(),
                    gentle,
                    strong,
                    cloze_fixture: cloze_fixture.unwrap(),
                    binary_fixture: binary_fixture.unwrap(),
                },
                out_dir,
            })
        }
        Command::GenerateHard {
            common,
            model,
            corpus,
            subjects,
            n_batches,
            seed,
            fixtures,
            endpoint,
            llm_model,
            threshold,
            editor,
        } => {
            let base = load_base(&common)?;
            #[allow(clippy::type_complexity)]
            let base_cmd: Option<(
                String,
                PathBuf,
                PathBuf,
                EditorConfig,
                usize,
                u64,
                Option<PathBuf>,
                Option<String>,
                Option<String>,
                f64,
            )> = base.as_ref().and_then(|b| match &b.command {
                RunCommand::GenerateHard {
                    model,
                    corpus,
                    subjects,
                    editor,
                    n_batches,
                    seed,
                    fixtures,
                    endpoint,
                    llm_model,
                    threshold,
                } => Some((
                    model.clone(),
                    corpus.clone(),
                    subjects.clone(),
                    editor.clone(),
                    *n_batches,
                    *seed,
                    fixtures.clone(),
                    endpoint.clone(),
                    llm_model.clone(),
                    *threshold,
                )),
                _ => None,
            });
            let model = problems.require("model", &model, base_cmd.as_ref().map(|c| c.0.clone()));
            let corpus = problems.require("corpus", &corpus, base_cmd.as_ref().map(|c| c.1.clone()));
            let subjects =
                problems.require("subjects", &subjects, base_cmd.as_ref().map(|c| c.2.clone()));
            let editor_cfg = editor
                .build(base_cmd.as_ref().map(|c| &c.3))
                .map_err(|e| RunError::Config(vec![e]))?;
            let n_batches = n_batches.or(base_cmd.as_ref().map(|c| c.4)).unwrap_or(1);
            let seed = seed.or(base_cmd.as_ref().map(|c| c.5)).unwrap_or(0);
            let fixtures = fixtures.or(base_cmd.as_ref().and_then(|c| c.6.clone()));
            let endpoint = endpoint.or(base_cmd.as_ref().and_then(|c| c.7.clone()));
            let llm_model = llm_model.or(base_cmd.as_ref().and_then(|c| c.8.clone()));
            let threshold = threshold
                .or(base_cmd.as_ref().map(|c| c.9))
                .unwrap_or(collapse_core::DEFAULT_COLLAPSE_THRESHOLD);
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::GenerateHard {
                    model: model.unwrap(),
                    corpus: corpus.unwrap(),
                    subjects: subjects.unwrap(),
                    editor: editor_cfg,
                    n_batches,
                    seed,
                    fixtures,
                    endpoint,
                    llm_model,
                    threshold,
                },
                out_dir,
            })
        }
        Command::Report { common, run_dir } => {
            let base = load_base(&common)?;
            let base_cmd = base.as_ref().and_then(|b| match &b.command {
                RunCommand::Report { run_dir } => Some(run_dir.clone()),
                _ => None,
            });
            let run_dir = problems.require("run_dir", &run_dir, base_cmd);
            let out_dir = resolve_out(&common, base.as_ref());
            problems.into_result()?;
            Ok(RunConfig {
                command: RunCommand::Report {
                    run_dir: run_dir.unwrap(),
                },
                out_dir,
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = match build_config(cli.command) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    let mut ctx = RunContext::default();
    match run(&config, &mut ctx) {
        Ok(record) => {
            println!("run complete: {}", config.out_dir.display());
            for (key, value) in &record.summary {
                println!("  {key}: {value}");
            }
            ExitCode::SUCCESS
        }
        Err(err @ RunError::Config(_)) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err @ RunError::Partial(_)) => {
            eprintln!("error: {err}");
            ExitCode::from(4)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(3)
        }
    }
}
