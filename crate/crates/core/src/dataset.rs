//! Edit-request datasets: the counterfactual-triple data model plus readers
//! and writers for the two record formats in the wild.
//!
//! Flat records carry `{prompt, target_new, subject, ground_truth}` directly;
//! rewrite-style records nest them under `requested_rewrite` with a `{}`
//! placeholder for the subject in the prompt template. Both load into
//! [`EditRequest`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
}

/// One counterfactual edit: rewrite the fact about `subject` rendered by
/// `prompt` from `ground_truth` to `target_new`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub case_id: String,
    pub subject: String,
    pub prompt: String,
    pub target_new: String,
    pub ground_truth: String,
}

impl EditRequest {
    pub fn new(
        case_id: impl Into<String>,
        subject: impl Into<String>,
        prompt: impl Into<String>,
        target_new: impl Into<String>,
        ground_truth: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let request = EditRequest {
            case_id: case_id.into(),
            subject: subject.into(),
            prompt: prompt.into(),
            target_new: target_new.into(),
            ground_truth: ground_truth.into(),
        };
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.target_new == self.ground_truth {
            return Err(DatasetError::Format(format!(
                "case {}: target_new equals ground_truth ({:?})",
                self.case_id, self.target_new
            )));
        }
        if !self.prompt.contains(&self.subject) {
            return Err(DatasetError::Format(format!(
                "case {}: subject {:?} does not occur in prompt {:?}",
                self.case_id, self.subject, self.prompt
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditDataset {
    pub id: String,
    pub requests: Vec<EditRequest>,
}

fn str_field(value: &Value, field: &str, index: usize) -> Result<String, DatasetError> {
    value
        .get(field)
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| DatasetError::InvalidRecord {
            index,
            reason: format!("missing string field {field:?}"),
        })
}

fn parse_record(value: &Value, index: usize) -> Result<EditRequest, DatasetError> {
    let case_id = match value.get("case_id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => index.to_string(),
    };
    let request = if let Some(rewrite) = value.get("requested_rewrite") {
        let subject = str_field(rewrite, "subject", index)?;
        let template = str_field(rewrite, "prompt", index)?;
        let prompt = if template.contains("{}") {
            template.replace("{}", &subject)
        } else {
            template
        };
        let target_new = rewrite
            .get("target_new")
            .and_then(|t| t.get("str"))
            .and_then(|s| s.as_str())
            .ok_or_else(|| DatasetError::InvalidRecord {
                index,
                reason: "missing requested_rewrite.target_new.str".into(),
            })?
            .to_string();
        let ground_truth = rewrite
            .get("target_true")
            .and_then(|t| t.get("str"))
            .and_then(|s| s.as_str())
            .ok_or_else(|| DatasetError::InvalidRecord {
                index,
                reason: "missing requested_rewrite.target_true.str".into(),
            })?
            .to_string();
        EditRequest {
            case_id,
            subject,
            prompt,
            target_new,
            ground_truth,
        }
    } else {
        EditRequest {
            case_id,
            subject: str_field(value, "subject", index)?,
            prompt: str_field(value, "prompt", index)?,
            target_new: str_field(value, "target_new", index)?,
            ground_truth: str_field(value, "ground_truth", index)?,
        }
    };
    request.validate().map_err(|e| DatasetError::InvalidRecord {
        index,
        reason: e.to_string(),
    })?;
    Ok(request)
}

/// Loads a dataset from a JSON array of records in either format. The
/// dataset id is the file stem.
pub fn load_dataset(path: &Path) -> Result<EditDataset, DatasetError> {
    let raw = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let values: Vec<Value> =
        serde_json::from_str(&raw).map_err(|e| DatasetError::Format(e.to_string()))?;
    let requests = values
        .iter()
        .enumerate()
        .map(|(i, v)| parse_record(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(EditDataset { id, requests })
}

/// Writes a dataset as a flat JSON array (with case ids).
pub fn save_dataset(dataset: &EditDataset, path: &Path) -> Result<(), DatasetError> {
    let records: Vec<Value> = dataset
        .requests
        .iter()
        .map(|r| {
            serde_json::json!({
                "case_id": r.case_id,
                "prompt": r.prompt,
                "target_new": r.target_new,
                "subject": r.subject,
                "ground_truth": r.ground_truth,
            })
        })
        .collect();
    let raw = serde_json::to_string_pretty(&records)
        .map_err(|e| DatasetError::Format(e.to_string()))?;
    std::fs::write(path, raw).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// A validated hard case: the request plus the perplexity its single edit
/// produced, keyed by the `<editor>_<model>_ppl` convention.
#[derive(Debug, Clone, PartialEq)]
pub struct HardRecord {
    pub request: EditRequest,
    pub ppl_field: String,
    pub ppl: f64,
}

/// Writes hard-case records with exactly the canonical field set
/// `{prompt, target_new, subject, ground_truth, <editor>_<model>_ppl}`.
pub fn save_hard_records(records: &[HardRecord], path: &Path) -> Result<(), DatasetError> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let mut map = serde_json::Map::new();
        map.insert("prompt".into(), Value::String(record.request.prompt.clone()));
        map.insert(
            "target_new".into(),
            Value::String(record.request.target_new.clone()),
        );
        map.insert(
            "subject".into(),
            Value::String(record.request.subject.clone()),
        );
        map.insert(
            "ground_truth".into(),
            Value::String(record.request.ground_truth.clone()),
        );
        let ppl = serde_json::Number::from_f64(record.ppl).ok_or_else(|| {
            DatasetError::Format(format!("non-finite perplexity for {}", record.request.case_id))
        })?;
        map.insert(record.ppl_field.clone(), Value::Number(ppl));
        out.push(Value::Object(map));
    }
    let raw =
        serde_json::to_string_pretty(&out).map_err(|e| DatasetError::Format(e.to_string()))?;
    std::fs::write(path, raw).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_are_enforced() {
        assert!(EditRequest::new("0", "Paris", "Paris is the capital of", "Rome", "France").is_ok());
        // target must differ from ground truth
        assert!(EditRequest::new("1", "Paris", "Paris is the capital of", "France", "France")
            .is_err());
        // subject must occur verbatim in the prompt
        assert!(EditRequest::new("2", "Lyon", "Paris is the capital of", "Rome", "France").is_err());
    }

    #[test]
    fn loads_flat_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.json");
        std::fs::write(
            &path,
            r#"[
                {"prompt": "Tesla's founder is", "target_new": "Gates",
                 "subject": "Tesla", "ground_truth": "Musk"},
                {"case_id": "c7", "prompt": "France is famous for the", "target_new": "Pyramids",
                 "subject": "France", "ground_truth": "Eiffel Tower"}
            ]"#,
        )
        .unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.id, "cases");
        assert_eq!(ds.requests.len(), 2);
        assert_eq!(ds.requests[0].case_id, "0");
        assert_eq!(ds.requests[1].case_id, "c7");
        assert_eq!(ds.requests[1].subject, "France");
    }

    #[test]
    fn loads_rewrite_records_with_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cf.json");
        std::fs::write(
            &path,
            r#"[
                {"case_id": 42,
                 "requested_rewrite": {
                    "prompt": "The mother tongue of {} is",
                    "subject": "Danielle Darrieux",
                    "target_new": {"str": "English"},
                    "target_true": {"str": "French"}
                 }}
            ]"#,
        )
        .unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.requests[0].case_id, "42");
        assert_eq!(
            ds.requests[0].prompt,
            "The mother tongue of Danielle Darrieux is"
        );
        assert_eq!(ds.requests[0].ground_truth, "French");
    }

    #[test]
    fn dataset_round_trips() {
        let ds = EditDataset {
            id: "rt".into(),
            requests: vec![
                EditRequest::new("a", "Mars", "Mars orbits the", "Moon", "Sun").unwrap(),
                EditRequest::new("b", "Iron", "Iron is a kind of", "liquid", "metal").unwrap(),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.json");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn hard_records_use_exact_field_set_in_order() {
        let record = HardRecord {
            request: EditRequest::new("0", "Tesla", "Tesla's founder is", "Gates", "Musk").unwrap(),
            ppl_field: "rank_one_tinylm_ppl".into(),
            ppl: 7586.94,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hard.json");
        save_hard_records(&[record], &path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<serde_json::Map<String, Value>> = serde_json::from_str(&raw).unwrap();
        let keys: Vec<&String> = parsed[0].keys().collect();
        assert_eq!(
            keys,
            vec![
                "prompt",
                "target_new",
                "subject",
                "ground_truth",
                "rank_one_tinylm_ppl"
            ]
        );
        assert_eq!(parsed[0]["rank_one_tinylm_ppl"].as_f64().unwrap(), 7586.94);
    }

    #[test]
    fn invalid_record_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"[{"prompt": "x is y", "target_new": "z", "subject": "q", "ground_truth": "z"}]"#,
        )
        .unwrap();
        match load_dataset(&path) {
            Err(DatasetError::InvalidRecord { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected InvalidRecord, got {other:?}"),
        }
    }
}
