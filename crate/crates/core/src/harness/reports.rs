//! Line-oriented persistence for sweep reports and sequential traces: one
//! meta line, one line per case/edit, one summary line. Append-safe during
//! long runs.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaseRecord, HarnessError, SequentialTrace, SweepReport, TraceEntry};
use crate::corpus::Tier;
use crate::ppl::Verdict;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SweepLine {
    Meta {
        dataset_id: String,
        editor: String,
        model_id: String,
        threshold: f64,
    },
    Case(CaseRecord),
    Summary {
        hard_cases: Vec<String>,
        total: usize,
    },
}

pub fn save_sweep_report(report: &SweepReport, path: &Path) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| HarnessError::Other(format!("create {}: {e}", path.display())))?;
    let mut emit = |line: &SweepLine| -> Result<(), HarnessError> {
        let raw = serde_json::to_string(line).map_err(|e| HarnessError::Other(e.to_string()))?;
        writeln!(file, "{raw}").map_err(|e| HarnessError::Other(e.to_string()))
    };
    emit(&SweepLine::Meta {
        dataset_id: report.dataset_id.clone(),
        editor: report.editor.clone(),
        model_id: report.model_id.clone(),
        threshold: report.threshold,
    })?;
    for case in &report.cases {
        emit(&SweepLine::Case(case.clone()))?;
    }
    emit(&SweepLine::Summary {
        hard_cases: report.hard_cases.clone(),
        total: report.cases.len(),
    })
}

pub fn load_sweep_report(path: &Path) -> Result<SweepReport, HarnessError> {
    let file = std::fs::File::open(path)
        .map_err(|e| HarnessError::Other(format!("open {}: {e}", path.display())))?;
    let mut meta: Option<(String, String, String, f64)> = None;
    let mut cases = Vec::new();
    let mut hard_cases = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| HarnessError::Other(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| HarnessError::Other(e.to_string()))? {
            SweepLine::Meta {
                dataset_id,
                editor,
                model_id,
                threshold,
            } => meta = Some((dataset_id, editor, model_id, threshold)),
            SweepLine::Case(case) => cases.push(case),
            SweepLine::Summary { hard_cases: h, .. } => hard_cases = h,
        }
    }
    let (dataset_id, editor, model_id, threshold) =
        meta.ok_or_else(|| HarnessError::Other("missing meta line".into()))?;
    Ok(SweepReport {
        dataset_id,
        editor,
        model_id,
        threshold,
        cases,
        hard_cases,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Meta {
        dataset_id: String,
        editor: String,
        model_id: String,
        corpus_tier: Option<Tier>,
        original_aggregate: f64,
        degradation_multiplier: f64,
    },
    Edit(TraceEntry),
    Summary {
        final_verdict: Verdict,
        success_rate: f64,
        edits: usize,
    },
}

pub fn save_trace(trace: &SequentialTrace, path: &Path) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| HarnessError::Other(format!("create {}: {e}", path.display())))?;
    let mut emit = |line: &TraceLine| -> Result<(), HarnessError> {
        let raw = serde_json::to_string(line).map_err(|e| HarnessError::Other(e.to_string()))?;
        writeln!(file, "{raw}").map_err(|e| HarnessError::Other(e.to_string()))
    };
    emit(&TraceLine::Meta {
        dataset_id: trace.dataset_id.clone(),
        editor: trace.editor.clone(),
        model_id: trace.model_id.clone(),
        corpus_tier: trace.corpus_tier,
        original_aggregate: trace.original_aggregate,
        degradation_multiplier: trace.degradation_multiplier,
    })?;
    for entry in &trace.entries {
        emit(&TraceLine::Edit(entry.clone()))?;
    }
    emit(&TraceLine::Summary {
        final_verdict: trace.final_verdict,
        success_rate: trace.success_rate,
        edits: trace.entries.len(),
    })
}

pub fn load_trace(path: &Path) -> Result<SequentialTrace, HarnessError> {
    let file = std::fs::File::open(path)
        .map_err(|e| HarnessError::Other(format!("open {}: {e}", path.display())))?;
    let mut meta = None;
    let mut entries = Vec::new();
    let mut summary = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| HarnessError::Other(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| HarnessError::Other(e.to_string()))? {
            TraceLine::Meta {
                dataset_id,
                editor,
                model_id,
                corpus_tier,
                original_aggregate,
                degradation_multiplier,
            } => {
                meta = Some((
                    dataset_id,
                    editor,
                    model_id,
                    corpus_tier,
                    original_aggregate,
                    degradation_multiplier,
                ))
            }
            TraceLine::Edit(entry) => entries.push(entry),
            TraceLine::Summary {
                final_verdict,
                success_rate,
                ..
            } => summary = Some((final_verdict, success_rate)),
        }
    }
    let (dataset_id, editor, model_id, corpus_tier, original_aggregate, degradation_multiplier) =
        meta.ok_or_else(|| HarnessError::Other("missing meta line".into()))?;
    let (final_verdict, success_rate) =
        summary.ok_or_else(|| HarnessError::Other("missing summary line".into()))?;
    Ok(SequentialTrace {
        dataset_id,
        editor,
        model_id,
        corpus_tier,
        original_aggregate,
        degradation_multiplier,
        entries,
        final_verdict,
        success_rate,
    })
}
