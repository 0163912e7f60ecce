//! Experiment orchestration: single-edit sweeps with hard-case mining,
//! sequential-editing traces, weight-diff analysis, and noise injection.
//!
//! Sweeps restore the original weights around every case and at exit, so the
//! original model is bit-identical afterwards. Sequential runs apply edits
//! cumulatively and never restore; on editor failure the weights stay as the
//! editor left them and the failure is recorded.

mod reports;

pub use reports::{load_sweep_report, load_trace, save_sweep_report, save_trace};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusManifest, Tier};
use crate::dataset::{DatasetError, EditDataset, HardRecord};
use crate::editors::{apply_edit, DeltaSummary, EditorConfig, ExternalRegistry};
use crate::gateway::{
    snapshot_weights, weight_diff, GatewayError, LayerDelta, ModelBackend, WeightSnapshot,
};
use crate::ppl::{classify_collapse, corpus_perplexity, PplError, PplOptions, Verdict};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ppl(#[from] PplError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("harness error: {0}")]
    Other(String),
}

/// Multiplier for the stable-but-degraded flag: an aggregate above
/// `multiplier x original` is flagged even when below the collapse threshold.
pub const DEFAULT_DEGRADATION_MULTIPLIER: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub ppl: PplOptions,
    pub degradation_multiplier: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            ppl: PplOptions::default(),
            degradation_multiplier: DEFAULT_DEGRADATION_MULTIPLIER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub success: bool,
    pub aggregate: Option<f64>,
    pub verdict: Option<Verdict>,
    pub deltas: Vec<DeltaSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dataset_id: String,
    pub editor: String,
    pub model_id: String,
    pub threshold: f64,
    pub cases: Vec<CaseRecord>,
    /// Exactly the case ids whose verdict was `collapsed`.
    pub hard_cases: Vec<String>,
}

/// Runs every case independently from the original weights: restore, edit,
/// score, record. The model is restored to its snapshot at exit.
pub fn single_edit_sweep(
    dataset: &EditDataset,
    config: &EditorConfig,
    model: &mut dyn ModelBackend,
    corpus: &Corpus,
    manifest: Option<&CorpusManifest>,
    mut registry: Option<&mut ExternalRegistry>,
    options: RunOptions,
) -> Result<SweepReport, HarnessError> {
    let layers = model.mutable_layers();
    let snapshot = snapshot_weights(model, &layers)?;
    let mut cases = Vec::with_capacity(dataset.requests.len());
    let mut hard_cases = Vec::new();
    for request in &dataset.requests {
        crate::gateway::restore_weights(model, &snapshot)?;
        match apply_edit(model, request, config, registry.as_deref_mut()) {
            Ok(outcome) => {
                let report = corpus_perplexity(model, corpus, manifest, options.ppl)?;
                if report.verdict == Verdict::Collapsed {
                    hard_cases.push(request.case_id.clone());
                }
                cases.push(CaseRecord {
                    case_id: request.case_id.clone(),
                    success: outcome.success,
                    aggregate: Some(report.aggregate),
                    verdict: Some(report.verdict),
                    deltas: outcome.deltas,
                    error: None,
                });
            }
            Err(err) => {
                cases.push(CaseRecord {
                    case_id: request.case_id.clone(),
                    success: false,
                    aggregate: None,
                    verdict: None,
                    deltas: Vec::new(),
                    error: Some(err.to_string()),
                });
            }
        }
    }
    crate::gateway::restore_weights(model, &snapshot)?;
    Ok(SweepReport {
        dataset_id: dataset.id.clone(),
        editor: config.method.name(),
        model_id: model.model_id().to_string(),
        threshold: options.ppl.threshold,
        cases,
        hard_cases,
    })
}

/// Unions the hard cases of several sweeps over the same dataset,
/// deduplicated by case id (first flagging sweep wins), as writable records.
pub fn mine_hard_cases(
    sweeps: &[SweepReport],
    dataset: &EditDataset,
) -> Result<Vec<HardRecord>, HarnessError> {
    if sweeps.is_empty() {
        return Ok(Vec::new());
    }
    for sweep in sweeps {
        if sweep.dataset_id != dataset.id {
            return Err(HarnessError::Other(format!(
                "sweep over dataset {:?} does not match {:?}",
                sweep.dataset_id, dataset.id
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::new();
    for sweep in sweeps {
        let field = format!("{}_{}_ppl", sweep.editor, sweep.model_id);
        for case_id in &sweep.hard_cases {
            if !seen.insert(case_id.clone()) {
                continue;
            }
            let request = dataset
                .requests
                .iter()
                .find(|r| &r.case_id == case_id)
                .ok_or_else(|| {
                    HarnessError::Other(format!("hard case {case_id:?} not in dataset"))
                })?;
            let ppl = sweep
                .cases
                .iter()
                .find(|c| &c.case_id == case_id)
                .and_then(|c| c.aggregate)
                .ok_or_else(|| {
                    HarnessError::Other(format!("hard case {case_id:?} has no aggregate"))
                })?;
            records.push(HardRecord {
                request: request.clone(),
                ppl_field: field.clone(),
                ppl,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub case_id: String,
    pub success: bool,
    pub aggregate: f64,
    /// Aggregate exceeds `degradation_multiplier x original`.
    pub degraded: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialTrace {
    pub dataset_id: String,
    pub editor: String,
    pub model_id: String,
    pub corpus_tier: Option<Tier>,
    pub original_aggregate: f64,
    pub degradation_multiplier: f64,
    pub entries: Vec<TraceEntry>,
    pub final_verdict: Verdict,
    pub success_rate: f64,
}

/// Applies the dataset's edits cumulatively, recording success and corpus
/// perplexity after each edit. Deterministic for a fixed seed.
pub fn sequential_run(
    dataset: &EditDataset,
    config: &EditorConfig,
    model: &mut dyn ModelBackend,
    corpus: &Corpus,
    manifest: Option<&CorpusManifest>,
    mut registry: Option<&mut ExternalRegistry>,
    options: RunOptions,
) -> Result<SequentialTrace, HarnessError> {
    let original = corpus_perplexity(model, corpus, manifest, options.ppl)?;
    let mut entries = Vec::with_capacity(dataset.requests.len());
    let mut successes = 0usize;
    for (i, request) in dataset.requests.iter().enumerate() {
        let (success, error) = match apply_edit(model, request, config, registry.as_deref_mut()) {
            Ok(outcome) => (outcome.success, None),
            // Weights stay as the editor left them; the failure is recorded.
            Err(err) => (false, Some(err.to_string())),
        };
        if success {
            successes += 1;
        }
        let report = corpus_perplexity(model, corpus, manifest, options.ppl)?;
        entries.push(TraceEntry {
            index: i + 1,
            case_id: request.case_id.clone(),
            success,
            aggregate: report.aggregate,
            degraded: report.aggregate > options.degradation_multiplier * original.aggregate,
            error,
        });
    }
    let final_aggregate = entries
        .last()
        .map(|e| e.aggregate)
        .unwrap_or(original.aggregate);
    Ok(SequentialTrace {
        dataset_id: dataset.id.clone(),
        editor: config.method.name(),
        model_id: model.model_id().to_string(),
        corpus_tier: manifest.map(|m| m.tier),
        original_aggregate: original.aggregate,
        degradation_multiplier: options.degradation_multiplier,
        entries,
        final_verdict: classify_collapse(final_aggregate, options.ppl.threshold),
        success_rate: if dataset.requests.is_empty() {
            0.0
        } else {
            successes as f64 / dataset.requests.len() as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDiffStats {
    pub layer_rows: usize,
    pub layer_cols: usize,
    pub max: f64,
    pub mean: f64,
    pub frobenius: f64,
}

pub fn weight_diff_stats(diff: &Array2<f64>) -> WeightDiffStats {
    let n = diff.len().max(1);
    WeightDiffStats {
        layer_rows: diff.nrows(),
        layer_cols: diff.ncols(),
        max: diff.iter().fold(0.0_f64, |m, v| m.max(*v)),
        mean: diff.iter().sum::<f64>() / n as f64,
        frobenius: diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Writes the `|ΔW|` matrix (TSV) and summary stats (JSON) for one layer.
/// Returns the stats and the two file paths.
pub fn analyze_weight_diff(
    model: &dyn ModelBackend,
    snapshot: &WeightSnapshot,
    layer: &str,
    out_dir: &std::path::Path,
) -> Result<(WeightDiffStats, std::path::PathBuf, std::path::PathBuf), HarnessError> {
    let diff = weight_diff(model, snapshot, layer)?;
    let stats = weight_diff_stats(&diff);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Other(format!("create {}: {e}", out_dir.display())))?;
    let slug = layer.replace('.', "_");
    let matrix_path = out_dir.join(format!("weight_diff_{slug}.tsv"));
    let mut tsv = String::new();
    for i in 0..diff.nrows() {
        let row: Vec<String> = (0..diff.ncols())
            .map(|j| format!("{:.12e}", diff[[i, j]]))
            .collect();
        tsv.push_str(&row.join("\t"));
        tsv.push('\n');
    }
    std::fs::write(&matrix_path, tsv)
        .map_err(|e| HarnessError::Other(format!("write {}: {e}", matrix_path.display())))?;
    let stats_path = out_dir.join(format!("weight_diff_{slug}.stats.json"));
    let raw = serde_json::to_string_pretty(&stats)
        .map_err(|e| HarnessError::Other(e.to_string()))?;
    std::fs::write(&stats_path, raw)
        .map_err(|e| HarnessError::Other(format!("write {}: {e}", stats_path.display())))?;
    Ok((stats, matrix_path, stats_path))
}

/// Root-mean-square magnitude of a weight matrix.
pub fn layer_rms(weights: &Array2<f64>) -> f64 {
    (weights.iter().map(|v| v * v).sum::<f64>() / weights.len().max(1) as f64).sqrt()
}

/// Zero-mean Gaussian delta for one layer with standard deviation
/// `rms_multiple x rms(layer)`. The collapse-detection demonstration injects
/// this at `rms_multiple = 3`.
pub fn gaussian_noise_delta(
    model: &dyn ModelBackend,
    layer: &str,
    rms_multiple: f64,
    seed: u64,
) -> Result<LayerDelta, HarnessError> {
    let weights = model.layer_matrix(layer)?;
    let std = rms_multiple * layer_rms(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = gaussian_matrix(&mut rng, weights.nrows(), weights.ncols(), std);
    Ok(LayerDelta {
        layer: layer.to_string(),
        delta,
    })
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    use rand::Rng;
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;
    use crate::dataset::EditRequest;
    use crate::editors::{EditorMethod, ExternalEditor};
    use crate::gateway::score_sequence;
    use crate::gateway::toy::ToyTableModel;

    fn toy_model() -> ToyTableModel {
        ToyTableModel::from_rows(
            "toy-h",
            &["capital", "paris", "rome", "city"],
            vec![
                ("<s>", vec![0.7, 0.1, 0.1, 0.1]),
                ("capital", vec![0.05, 0.15, 0.75, 0.05]),
                ("paris", vec![0.1, 0.1, 0.1, 0.7]),
                ("rome", vec![0.1, 0.2, 0.1, 0.6]),
                ("city", vec![0.25, 0.25, 0.25, 0.25]),
            ],
        )
        .unwrap()
    }

    fn toy_corpus() -> Corpus {
        Corpus {
            sentences: ["capital rome city", "paris city capital", "rome city city"]
                .iter()
                .enumerate()
                .map(|(i, t)| Sentence {
                    id: format!("s{i}"),
                    source: "t".into(),
                    text: t.to_string(),
                })
                .collect(),
        }
    }

    fn dataset(n: usize) -> EditDataset {
        EditDataset {
            id: "toyset".into(),
            requests: (0..n)
                .map(|i| {
                    EditRequest::new(
                        i.to_string(),
                        "capital",
                        "capital",
                        "paris",
                        "rome",
                    )
                    .unwrap()
                })
                .collect(),
        }
    }

    /// Mock that collapses exactly the configured case ids.
    struct SelectiveNoise {
        collapse_ids: Vec<String>,
    }
    impl ExternalEditor for SelectiveNoise {
        fn name(&self) -> &str {
            "selective"
        }
        fn propose(
            &mut self,
            model: &dyn ModelBackend,
            request: &EditRequest,
        ) -> Result<Vec<LayerDelta>, String> {
            if self.collapse_ids.contains(&request.case_id) {
                let w = model.layer_matrix("transition").map_err(|e| e.to_string())?;
                // Send probability mass to a nonsense corner everywhere.
                let mut delta = Array2::zeros(w.dim());
                for i in 0..delta.nrows() {
                    delta[[i, 0]] = 2000.0;
                }
                Ok(vec![LayerDelta {
                    layer: "transition".into(),
                    delta,
                }])
            } else {
                Ok(Vec::new())
            }
        }
    }

    fn external_config() -> EditorConfig {
        EditorConfig {
            method: EditorMethod::External {
                name: "selective".into(),
            },
            target_layers: Vec::new(),
            steps: 1,
            learning_rate: 0.0,
            epsilon: None,
            seed: 0,
        }
    }

    #[test]
    fn empty_dataset_gives_empty_report_and_untouched_model() {
        let mut model = toy_model();
        let before = score_sequence(&model, "capital rome city").unwrap();
        let report = single_edit_sweep(
            &dataset(0),
            &EditorConfig::ft_linf(1.0, 5, 0.5),
            &mut model,
            &toy_corpus(),
            None,
            None,
            RunOptions::default(),
        )
        .unwrap();
        assert!(report.cases.is_empty());
        assert!(report.hard_cases.is_empty());
        assert_eq!(before, score_sequence(&model, "capital rome city").unwrap());
    }

    #[test]
    fn selective_collapse_flags_exactly_that_case() {
        let mut model = toy_model();
        let mut registry = ExternalRegistry::new();
        registry.register(Box::new(SelectiveNoise {
            collapse_ids: vec!["7".into()],
        }));
        let report = single_edit_sweep(
            &dataset(10),
            &external_config(),
            &mut model,
            &toy_corpus(),
            None,
            Some(&mut registry),
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(report.hard_cases, vec!["7".to_string()]);
        for case in &report.cases {
            let expect = case.case_id == "7";
            assert_eq!(case.verdict == Some(Verdict::Collapsed), expect);
        }
    }

    #[test]
    fn sweep_restores_original_perplexity_bit_exactly() {
        let mut model = toy_model();
        let corpus = toy_corpus();
        let before = corpus_perplexity(&model, &corpus, None, PplOptions::default()).unwrap();
        let mut registry = ExternalRegistry::new();
        registry.register(Box::new(SelectiveNoise {
            collapse_ids: vec!["1".into(), "3".into()],
        }));
        let _ = single_edit_sweep(
            &dataset(5),
            &external_config(),
            &mut model,
            &corpus,
            None,
            Some(&mut registry),
            RunOptions::default(),
        )
        .unwrap();
        let after = corpus_perplexity(&model, &corpus, None, PplOptions::default()).unwrap();
        assert_eq!(before.aggregate.to_bits(), after.aggregate.to_bits());
        for (a, b) in before.per_sentence.iter().zip(&after.per_sentence) {
            assert_eq!(a.ppl.to_bits(), b.ppl.to_bits());
        }
    }

    fn report_with_hard(ids: &[usize], editor: &str) -> SweepReport {
        SweepReport {
            dataset_id: "mined".into(),
            editor: editor.into(),
            model_id: "m".into(),
            threshold: 1000.0,
            cases: ids
                .iter()
                .map(|i| CaseRecord {
                    case_id: i.to_string(),
                    success: true,
                    aggregate: Some(5000.0 + *i as f64),
                    verdict: Some(Verdict::Collapsed),
                    deltas: Vec::new(),
                    error: None,
                })
                .collect(),
            hard_cases: ids.iter().map(|i| i.to_string()).collect(),
        }
    }

    fn mined_dataset(n: usize) -> EditDataset {
        EditDataset {
            id: "mined".into(),
            requests: (0..n)
                .map(|i| {
                    EditRequest::new(i.to_string(), "thing", "thing is", "new", "old").unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn union_counts_match_overlapping_sweeps() {
        // Three sweeps flagging 77, 85, and 21 cases; overlaps bring the
        // union to exactly 107 unique ids.
        let a: Vec<usize> = (0..77).collect();
        let b: Vec<usize> = (11..96).collect(); // 85 ids, 66 shared with a
        let c: Vec<usize> = (86..107).collect(); // 21 ids, 10 shared with b
        assert_eq!(a.len(), 77);
        assert_eq!(b.len(), 85);
        assert_eq!(c.len(), 21);
        let sweeps = vec![
            report_with_hard(&a, "e1"),
            report_with_hard(&b, "e2"),
            report_with_hard(&c, "e3"),
        ];
        let records = mine_hard_cases(&sweeps, &mined_dataset(107)).unwrap();
        assert_eq!(records.len(), 107);
        let unique: std::collections::BTreeSet<&str> = records
            .iter()
            .map(|r| r.request.case_id.as_str())
            .collect();
        assert_eq!(unique.len(), 107);
    }

    #[test]
    fn disjoint_sweeps_concatenate() {
        let sweeps = vec![
            report_with_hard(&[0, 1], "e1"),
            report_with_hard(&[5, 6, 7], "e2"),
        ];
        let records = mine_hard_cases(&sweeps, &mined_dataset(10)).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[0].ppl_field, "e1_m_ppl");
        assert_eq!(records[4].ppl_field, "e2_m_ppl");
    }

    #[test]
    fn mismatched_dataset_id_is_rejected() {
        let sweeps = vec![report_with_hard(&[0], "e1")];
        let other = EditDataset {
            id: "different".into(),
            requests: Vec::new(),
        };
        assert!(mine_hard_cases(&sweeps, &other).is_err());
    }

    #[test]
    fn sequential_runs_are_deterministic_and_contiguous() {
        let corpus = toy_corpus();
        let config = EditorConfig::ft_linf(2.0, 10, 0.5);
        let run = || {
            let mut model = toy_model();
            sequential_run(
                &dataset(6),
                &config,
                &mut model,
                &corpus,
                None,
                None,
                RunOptions::default(),
            )
            .unwrap()
        };
        let t1 = run();
        let t2 = run();
        assert_eq!(t1, t2);
        for (i, entry) in t1.entries.iter().enumerate() {
            assert_eq!(entry.index, i + 1);
            assert_eq!(t2.entries[i].aggregate.to_bits(), entry.aggregate.to_bits());
        }
        assert!(t1.success_rate >= 0.0 && t1.success_rate <= 1.0);
    }

    #[test]
    fn degradation_flag_uses_five_fold_rule() {
        // 268.61 > 5 x 50.34 = 251.7, so a rise like that is flagged even
        // though it stays below the collapse threshold.
        let original = 50.34;
        let risen = 268.61;
        assert!(risen > DEFAULT_DEGRADATION_MULTIPLIER * original);
        assert_eq!(classify_collapse(risen, 1000.0), Verdict::Stable);

        let mut model = toy_model();
        let mut registry = ExternalRegistry::new();
        registry.register(Box::new(SelectiveNoise {
            collapse_ids: vec!["2".into()],
        }));
        let trace = sequential_run(
            &dataset(4),
            &external_config(),
            &mut model,
            &toy_corpus(),
            None,
            Some(&mut registry),
            RunOptions::default(),
        )
        .unwrap();
        // Before the noise case nothing is degraded; afterwards everything is.
        assert!(!trace.entries[0].degraded);
        assert!(!trace.entries[1].degraded);
        assert!(trace.entries[2].degraded);
        assert!(trace.entries[3].degraded);
    }

    #[test]
    fn weight_diff_stats_match_known_delta() {
        let mut model = toy_model();
        let snapshot = snapshot_weights(&model, &["transition".to_string()]).unwrap();

        let (stats, _, _) = {
            let dir = tempfile::tempdir().unwrap();
            analyze_weight_diff(&model, &snapshot, "transition", dir.path()).unwrap()
        };
        assert_eq!(stats.max, 0.0);
        assert_eq!(stats.frobenius, 0.0);

        let mut delta = Array2::zeros((5, 5));
        delta[[0, 1]] = 3.0;
        delta[[2, 4]] = -4.0;
        crate::gateway::apply_delta(
            &mut model,
            &LayerDelta {
                layer: "transition".into(),
                delta,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (stats, matrix_path, stats_path) =
            analyze_weight_diff(&model, &snapshot, "transition", dir.path()).unwrap();
        assert!((stats.max - 4.0).abs() < 1e-12);
        assert!((stats.frobenius - 5.0).abs() < 1e-12);
        assert!((stats.mean - 7.0 / 25.0).abs() < 1e-12);
        assert!(matrix_path.exists());
        assert!(stats_path.exists());
    }

    #[test]
    fn noise_delta_scales_with_layer_rms() {
        let model = toy_model();
        let weights = model.layer_matrix("transition").unwrap();
        let rms = layer_rms(&weights);
        let delta = gaussian_noise_delta(&model, "transition", 3.0, 99).unwrap();
        let noise_rms = layer_rms(&delta.delta);
        // Sample RMS of N(0, (3 rms)^2) should sit near 3 rms.
        assert!(noise_rms > 1.5 * rms && noise_rms < 4.5 * rms);
        // Deterministic per seed.
        let again = gaussian_noise_delta(&model, "transition", 3.0, 99).unwrap();
        assert_eq!(delta.delta, again.delta);
    }
}
