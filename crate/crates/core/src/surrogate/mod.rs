//! Perplexity-ladder construction and the perplexity/performance rank
//! correlation study.
//!
//! A ladder point is an edited model variant whose corpus perplexity lands
//! near a prescribed target. Points are regenerable: the recipe (editor,
//! cumulative edit count, seed) replayed on a fresh model reproduces the
//! achieved perplexity on the same backend.

pub mod stats;
pub mod tasks;

pub use stats::{average_ranks, spearman_rho, spearman_rho_with, PValueMethod, StatsError};
pub use tasks::{
    evaluate_task, AdapterRegistry, BinaryChoiceItem, BinaryChoiceTask, ClozeItem, ClozeTask,
    Metric, TaskAdapter, TaskError, TaskScore,
};

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::dataset::EditDataset;
use crate::editors::{apply_edit, EditorConfig, EditorError, ExternalRegistry};
use crate::gateway::{GatewayError, ModelBackend};
use crate::ppl::{corpus_perplexity, PplError, PplOptions};

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Ppl(#[from] PplError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error("target perplexity {target} unreachable within {budget} edits (best {best})")]
    TargetUnreachable { target: f64, budget: usize, best: f64 },
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error("io error: {0}")]
    Io(String),
}

/// How a ladder point was produced; sufficient to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRecipe {
    pub editor: String,
    pub edit_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub target: f64,
    pub achieved: f64,
    pub recipe: LadderRecipe,
}

/// Editor pair for the greedy search: the gentle editor handles targets at
/// or below the switch point, the strong one everything above.
pub struct LadderEditors {
    pub gentle: EditorConfig,
    pub strong: EditorConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct LadderOptions {
    /// Relative acceptance band around each target (0.2 = ±20%).
    pub band: f64,
    /// Edit budget per target.
    pub max_edits: usize,
    /// Targets above this use the strong editor.
    pub switch_at: f64,
    pub ppl: PplOptions,
}

impl Default for LadderOptions {
    fn default() -> Self {
        LadderOptions {
            band: 0.2,
            max_edits: 60,
            switch_at: crate::DEFAULT_COLLAPSE_THRESHOLD,
            ppl: PplOptions::default(),
        }
    }
}

/// Twenty log-spaced targets from the original perplexity up to the collapse
/// threshold, plus three far points for collapsed models: 23 targets total.
pub fn default_targets(original: f64, threshold: f64) -> Vec<f64> {
    let mut targets = Vec::with_capacity(23);
    let ratio = threshold / original;
    for i in 0..20 {
        targets.push(original * ratio.powf(i as f64 / 19.0));
    }
    targets.extend([5e3, 1e4, 5e4]);
    targets
}

fn editor_for<'a>(editors: &'a LadderEditors, name: &str) -> Option<&'a EditorConfig> {
    if editors.gentle.method.name() == name {
        Some(&editors.gentle)
    } else if editors.strong.method.name() == name {
        Some(&editors.strong)
    } else {
        None
    }
}

/// Applies `count` cumulative edits from the dataset (cycled) to a fresh
/// clone of `model`; returns the resulting corpus perplexity.
pub fn replay_recipe(
    model: &dyn ModelBackend,
    recipe: &LadderRecipe,
    editors: &LadderEditors,
    dataset: &EditDataset,
    corpus: &Corpus,
    mut registry: Option<&mut ExternalRegistry>,
    options: &LadderOptions,
) -> Result<f64, SurrogateError> {
    let config = editor_for(editors, &recipe.editor).ok_or_else(|| {
        SurrogateError::InvalidTargets(format!("recipe names unknown editor {:?}", recipe.editor))
    })?;
    let mut work = model.clone_backend();
    for i in 0..recipe.edit_count {
        let request = &dataset.requests[i % dataset.requests.len()];
        apply_edit(work.as_mut(), request, config, registry.as_deref_mut())?;
    }
    let report = corpus_perplexity(work.as_ref(), corpus, None, options.ppl)?;
    Ok(report.aggregate)
}

/// Materializes the edited model for a recipe (used for task evaluation).
fn materialize_recipe(
    model: &dyn ModelBackend,
    recipe: &LadderRecipe,
    editors: &LadderEditors,
    dataset: &EditDataset,
    mut registry: Option<&mut ExternalRegistry>,
) -> Result<Box<dyn ModelBackend>, SurrogateError> {
    let config = editor_for(editors, &recipe.editor).ok_or_else(|| {
        SurrogateError::InvalidTargets(format!("recipe names unknown editor {:?}", recipe.editor))
    })?;
    let mut work = model.clone_backend();
    for i in 0..recipe.edit_count {
        let request = &dataset.requests[i % dataset.requests.len()];
        apply_edit(work.as_mut(), request, config, registry.as_deref_mut())?;
    }
    Ok(work)
}

/// Greedy ladder search: for each ascending target, stack cumulative edits
/// (gentle editor below the switch point, strong above) until the achieved
/// perplexity lands in the band or overshoots; the nearest achieved point is
/// recorded. The input model is never mutated.
pub fn build_ladder(
    model: &dyn ModelBackend,
    editors: &LadderEditors,
    dataset: &EditDataset,
    corpus: &Corpus,
    targets: &[f64],
    mut registry: Option<&mut ExternalRegistry>,
    options: &LadderOptions,
) -> Result<Vec<LadderPoint>, SurrogateError> {
    if targets.is_empty() {
        return Err(SurrogateError::InvalidTargets("no targets".into()));
    }
    if targets.windows(2).any(|w| w[0] > w[1]) {
        return Err(SurrogateError::InvalidTargets(
            "targets must be sorted ascending".into(),
        ));
    }
    if dataset.requests.is_empty() {
        return Err(SurrogateError::InvalidTargets("empty edit dataset".into()));
    }
    let original = corpus_perplexity(model, corpus, None, options.ppl)?.aggregate;
    if targets[0] < original * (1.0 - options.band) {
        return Err(SurrogateError::InvalidTargets(format!(
            "first target {} lies below the original perplexity {original}",
            targets[0]
        )));
    }

    let mut points = Vec::with_capacity(targets.len());
    for &target in targets {
        let config = if target > options.switch_at {
            &editors.strong
        } else {
            &editors.gentle
        };
        let in_band = |ppl: f64| (ppl - target).abs() / target <= options.band;

        let mut best_count = 0usize;
        let mut best_ppl = original;
        let mut best_dist = (original - target).abs();
        if in_band(original) {
            points.push(LadderPoint {
                target,
                achieved: original,
                recipe: LadderRecipe {
                    editor: config.method.name(),
                    edit_count: 0,
                    seed: config.seed,
                },
            });
            continue;
        }

        let mut work = model.clone_backend();
        let mut accepted = false;
        for count in 1..=options.max_edits {
            let request = &dataset.requests[(count - 1) % dataset.requests.len()];
            // Editor failures are tolerated mid-search: the model keeps
            // whatever state the editor left, matching sequential runs.
            if let Err(err) = apply_edit(work.as_mut(), request, config, registry.as_deref_mut())
            {
                log::warn!("ladder edit {count} failed: {err}");
            }
            let ppl = corpus_perplexity(work.as_ref(), corpus, None, options.ppl)?.aggregate;
            let dist = (ppl - target).abs();
            if dist < best_dist {
                best_dist = dist;
                best_ppl = ppl;
                best_count = count;
            }
            if in_band(ppl) {
                points.push(LadderPoint {
                    target,
                    achieved: ppl,
                    recipe: LadderRecipe {
                        editor: config.method.name(),
                        edit_count: count,
                        seed: config.seed,
                    },
                });
                accepted = true;
                break;
            }
            if ppl > target * (1.0 + options.band) {
                // Overshot: keep the nearest point seen.
                points.push(LadderPoint {
                    target,
                    achieved: best_ppl,
                    recipe: LadderRecipe {
                        editor: config.method.name(),
                        edit_count: best_count,
                        seed: config.seed,
                    },
                });
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(SurrogateError::TargetUnreachable {
                target,
                budget: options.max_edits,
                best: best_ppl,
            });
        }
    }
    Ok(points)
}

/// Replays every ladder point and evaluates each registered task adapter on
/// the materialized model.
pub fn evaluate_ladder(
    model: &dyn ModelBackend,
    points: &[LadderPoint],
    editors: &LadderEditors,
    dataset: &EditDataset,
    adapters: &AdapterRegistry,
    mut registry: Option<&mut ExternalRegistry>,
) -> Result<Vec<(LadderPoint, Vec<TaskScore>)>, SurrogateError> {
    let mut out = Vec::with_capacity(points.len());
    for point in points {
        let edited =
            materialize_recipe(model, &point.recipe, editors, dataset, registry.as_deref_mut())?;
        let mut scores = Vec::new();
        for adapter in adapters.iter() {
            scores.push(evaluate_task(edited.as_ref(), adapter)?);
        }
        out.push((point.clone(), scores));
    }
    Ok(out)
}

/// Rank correlation between achieved perplexity and one task's scores.
/// Degenerate inputs (e.g. a task pinned at its floor across all points)
/// yield a flagged report instead of a rho.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub task: String,
    pub points: Vec<(f64, f64)>,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub flag: Option<String>,
}

pub fn correlation_report(
    task: &str,
    pairs: Vec<(f64, f64)>,
) -> Result<CorrelationReport, SurrogateError> {
    if pairs.len() < 3 {
        return Err(SurrogateError::Stats(StatsError::TooFew {
            need: 3,
            got: pairs.len(),
        }));
    }
    let x: Vec<f64> = pairs.iter().map(|(p, _)| *p).collect();
    let y: Vec<f64> = pairs.iter().map(|(_, s)| *s).collect();
    match spearman_rho(&x, &y) {
        Ok((rho, p)) => Ok(CorrelationReport {
            task: task.to_string(),
            points: pairs,
            rho: Some(rho),
            p_value: Some(p),
            flag: None,
        }),
        Err(StatsError::ConstantInput) => Ok(CorrelationReport {
            task: task.to_string(),
            points: pairs,
            rho: None,
            p_value: None,
            flag: Some("degenerate: scores constant across the ladder (task at floor?)".into()),
        }),
        Err(other) => Err(other.into()),
    }
}

/// Per-task correlation reports from an evaluated ladder.
pub fn correlation_reports(
    evaluated: &[(LadderPoint, Vec<TaskScore>)],
) -> Result<Vec<CorrelationReport>, SurrogateError> {
    let mut by_task: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for (point, scores) in evaluated {
        for score in scores {
            by_task
                .entry(score.task.clone())
                .or_default()
                .push((point.achieved, score.value));
        }
    }
    by_task
        .into_iter()
        .map(|(task, pairs)| correlation_report(&task, pairs))
        .collect()
}

pub fn save_ladder(points: &[LadderPoint], path: &Path) -> Result<(), SurrogateError> {
    let mut file =
        std::fs::File::create(path).map_err(|e| SurrogateError::Io(e.to_string()))?;
    for point in points {
        let raw = serde_json::to_string(point).map_err(|e| SurrogateError::Io(e.to_string()))?;
        writeln!(file, "{raw}").map_err(|e| SurrogateError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn load_ladder(path: &Path) -> Result<Vec<LadderPoint>, SurrogateError> {
    let raw = std::fs::read_to_string(path).map_err(|e| SurrogateError::Io(e.to_string()))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SurrogateError::Io(e.to_string())))
        .collect()
}

/// Writes one TSV of (perplexity, score) per task plus a JSON summary.
pub fn save_correlations(
    reports: &[CorrelationReport],
    dir: &Path,
) -> Result<(), SurrogateError> {
    std::fs::create_dir_all(dir).map_err(|e| SurrogateError::Io(e.to_string()))?;
    for report in reports {
        let mut tsv = String::from("perplexity\tscore\n");
        for (ppl, score) in &report.points {
            tsv.push_str(&format!("{ppl:.10e}\t{score:.10e}\n"));
        }
        let path = dir.join(format!("correlation_{}.tsv", report.task));
        std::fs::write(path, tsv).map_err(|e| SurrogateError::Io(e.to_string()))?;
    }
    let summary = serde_json::to_string_pretty(reports)
        .map_err(|e| SurrogateError::Io(e.to_string()))?;
    std::fs::write(dir.join("correlations.json"), summary)
        .map_err(|e| SurrogateError::Io(e.to_string()))?;
    Ok(())
}
