//! Knowledge editors: the edit-success check, a norm-constrained fine-tuning
//! editor, a minimal rank-one associative editor, and an adapter for
//! external editing systems.
//!
//! Every editor is deterministic given its seed and records per-layer delta
//! summaries sufficient for the harness to undo the edit via snapshots.

mod external;
mod ft;
mod rank_one;

pub use external::{ExternalEditor, ExternalRegistry};
pub use ft::{apply_ft_linf_edit, apply_ft_linf_edit_observed};
pub use rank_one::{apply_rank_one_edit, rank_one_delta};

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EditRequest;
use crate::gateway::{GatewayError, LayerDelta, ModelBackend};

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("editor configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("degenerate key: norm {norm} below tolerance")]
    DegenerateKey { norm: f64 },
    #[error("external editor {name} failed on case {case_id}: {message}")]
    Failure {
        name: String,
        case_id: String,
        message: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorMethod {
    FtLinf,
    RankOne,
    External { name: String },
}

impl EditorMethod {
    pub fn name(&self) -> String {
        match self {
            EditorMethod::FtLinf => "ft_linf".to_string(),
            EditorMethod::RankOne => "rank_one".to_string(),
            EditorMethod::External { name } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditorConfig {
    pub method: EditorMethod,
    /// Empty means: use the backend's conventional edit layer.
    #[serde(default)]
    pub target_layers: Vec<String>,
    pub steps: usize,
    pub learning_rate: f64,
    /// ℓ∞ bound on per-parameter drift; required iff `method` is `ft_linf`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl EditorConfig {
    pub fn ft_linf(epsilon: f64, steps: usize, learning_rate: f64) -> Self {
        EditorConfig {
            method: EditorMethod::FtLinf,
            target_layers: Vec::new(),
            steps,
            learning_rate,
            epsilon: Some(epsilon),
            seed: 0,
        }
    }

    pub fn rank_one(steps: usize, learning_rate: f64) -> Self {
        EditorConfig {
            method: EditorMethod::RankOne,
            target_layers: Vec::new(),
            steps,
            learning_rate,
            epsilon: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EditorError> {
        match (&self.method, self.epsilon) {
            (EditorMethod::FtLinf, None) => Err(EditorError::Config(
                "ft_linf requires epsilon".to_string(),
            )),
            (EditorMethod::FtLinf, Some(eps)) if !(eps >= 0.0) => Err(EditorError::Config(
                format!("epsilon must be non-negative, got {eps}"),
            )),
            (EditorMethod::RankOne | EditorMethod::External { .. }, Some(_)) => Err(
                EditorError::Config("epsilon is only meaningful for ft_linf".to_string()),
            ),
            _ => Ok(()),
        }
    }
}

/// Per-layer magnitude summary of an applied delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub layer: String,
    pub max_abs: f64,
    pub frobenius: f64,
}

impl DeltaSummary {
    pub fn of(delta: &LayerDelta) -> Self {
        DeltaSummary {
            layer: delta.layer.clone(),
            max_abs: delta.max_abs(),
            frobenius: delta.frobenius_norm(),
        }
    }
}

/// Result of one edit attempt. `success` always comes from a fresh
/// [`check_edit_success`] run on the post-edit model.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub case_id: String,
    pub editor: String,
    pub success: bool,
    pub deltas: Vec<DeltaSummary>,
    pub wall_time: Duration,
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True iff the greedy continuation of the prompt begins with the token
/// sequence of `target_new` (whitespace-normalized).
pub fn check_edit_success(
    model: &dyn ModelBackend,
    request: &EditRequest,
) -> Result<bool, GatewayError> {
    let target_tokens = model.tokenize(&normalize_ws(&request.target_new))?;
    if target_tokens.is_empty() {
        return Ok(false);
    }
    let prompt_tokens = model.tokenize(&normalize_ws(&request.prompt))?;
    let generated = model.greedy_continue(&prompt_tokens, target_tokens.len())?;
    Ok(generated == target_tokens)
}

/// Conventional edit layer when the config names none: the middle MLP down
/// projection if the backend has any, otherwise a sole mutable layer.
pub fn default_target_layer(model: &dyn ModelBackend) -> Option<String> {
    let layers = model.mutable_layers();
    let down: Vec<&String> = layers
        .iter()
        .filter(|l| l.ends_with(".mlp.down_proj"))
        .collect();
    if !down.is_empty() {
        return Some(down[(down.len() - 1) / 2].clone());
    }
    if layers.len() == 1 {
        return Some(layers[0].clone());
    }
    None
}

pub(crate) fn resolve_target_layers(
    model: &dyn ModelBackend,
    config: &EditorConfig,
) -> Result<Vec<String>, EditorError> {
    if !config.target_layers.is_empty() {
        for layer in &config.target_layers {
            if !model.mutable_layers().contains(layer) {
                return Err(EditorError::Gateway(GatewayError::UnknownLayer(
                    layer.clone(),
                )));
            }
        }
        return Ok(config.target_layers.clone());
    }
    default_target_layer(model)
        .map(|l| vec![l])
        .ok_or_else(|| EditorError::Config("no target layer configured and no default".into()))
}

/// Dispatches to the editor named by the config. External editors are looked
/// up in `registry`.
pub fn apply_edit(
    model: &mut dyn ModelBackend,
    request: &EditRequest,
    config: &EditorConfig,
    registry: Option<&mut ExternalRegistry>,
) -> Result<EditOutcome, EditorError> {
    config.validate()?;
    match &config.method {
        EditorMethod::FtLinf => apply_ft_linf_edit(model, request, config),
        EditorMethod::RankOne => apply_rank_one_edit(model, request, config),
        EditorMethod::External { name } => {
            let registry = registry.ok_or_else(|| {
                EditorError::Config(format!(
                    "external editor {name:?} requested but no registry supplied"
                ))
            })?;
            registry.apply_external_edit(model, request, name)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::toy::ToyTableModel;

    fn chain_model() -> ToyTableModel {
        // Greedy from "capital": "paris paris paris ..."
        ToyTableModel::from_rows(
            "chain",
            &["capital", "paris", "rome", "city"],
            vec![
                ("<s>", vec![0.7, 0.1, 0.1, 0.1]),
                ("capital", vec![0.05, 0.6, 0.3, 0.05]),
                ("paris", vec![0.1, 0.1, 0.1, 0.7]),
                ("rome", vec![0.1, 0.2, 0.1, 0.6]),
                ("city", vec![0.25, 0.25, 0.25, 0.25]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn success_is_prefix_match_on_greedy_output() {
        let model = chain_model();
        let hit = EditRequest::new("0", "capital", "capital", "paris", "rome").unwrap();
        assert!(check_edit_success(&model, &hit).unwrap());
        let miss = EditRequest::new("1", "capital", "capital", "rome", "paris").unwrap();
        assert!(!check_edit_success(&model, &miss).unwrap());
    }

    #[test]
    fn multi_token_target_must_match_fully() {
        let model = chain_model();
        // Greedy continuation of "capital" is "paris city ..." — two tokens
        // match "paris city" but not "paris rome".
        let two = EditRequest::new("2", "capital", "capital", "paris city", "rome").unwrap();
        assert!(check_edit_success(&model, &two).unwrap());
        let partial = EditRequest::new("3", "capital", "capital", "paris rome", "city").unwrap();
        assert!(!check_edit_success(&model, &partial).unwrap());
    }

    #[test]
    fn config_validation_pins_epsilon_to_ft() {
        assert!(EditorConfig::ft_linf(0.1, 10, 0.5).validate().is_ok());
        let mut missing = EditorConfig::ft_linf(0.1, 10, 0.5);
        missing.epsilon = None;
        assert!(missing.validate().is_err());
        let mut stray = EditorConfig::rank_one(10, 0.5);
        stray.epsilon = Some(0.2);
        assert!(stray.validate().is_err());
    }

    #[test]
    fn default_layer_prefers_middle_down_projection() {
        let model = chain_model();
        // Toy model has a single mutable layer.
        assert_eq!(default_target_layer(&model).unwrap(), "transition");
    }
}
