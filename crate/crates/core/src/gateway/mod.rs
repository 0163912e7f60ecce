//! Uniform interface to an autoregressive language model: token scoring,
//! greedy generation, and controlled weight mutation/snapshot.
//!
//! A backend is confined to one worker at a time; parallelism is achieved by
//! cloning backends (one per worker), never by sharing mutable state.
//!
//! Scoring conventions: a start-of-text token is always prepended before
//! scoring, so the first real token is conditioned and per-sentence
//! perplexity is well-defined for single sentences. All reductions use
//! double-precision accumulation.

pub mod toy;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("sequence too long: {len} tokens exceeds context window {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("unknown layer: {0}")]
    UnknownLayer(String),
    #[error("shape mismatch for layer {layer}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backend {backend} does not support {op}")]
    Unsupported { backend: String, op: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("model load error: {0}")]
    Load(String),
}

/// Static description of a loaded model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub tokenizer_id: String,
    pub mutable_layers: Vec<String>,
    pub device: String,
}

/// An autoregressive language model with named mutable weight matrices.
///
/// Scoring is side-effect free: interleaving scores and generations never
/// changes weights. Mutation goes through [`set_layer_matrix`] (or the
/// [`apply_delta`] helper) only.
///
/// The `target_loss_*` family backs the built-in editors; backends without
/// gradient support report [`GatewayError::Unsupported`].
///
/// [`set_layer_matrix`]: ModelBackend::set_layer_matrix
pub trait ModelBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn tokenizer_id(&self) -> &str;

    /// Maximum number of tokens scorable in one call (start token included).
    fn context_window(&self) -> usize;

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, GatewayError>;
    fn detokenize(&self, tokens: &[u32]) -> String;

    /// Per-token negative log-likelihoods of `tokens`, each conditioned on
    /// the start-of-text token plus the preceding tokens. Output length
    /// equals `tokens.len()`.
    fn score_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>, GatewayError>;

    /// Greedy continuation: exactly `max_new_tokens` argmax tokens after the
    /// prompt. Ties break toward the lowest token id.
    fn greedy_continue(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
    ) -> Result<Vec<u32>, GatewayError>;

    fn mutable_layers(&self) -> Vec<String>;
    fn layer_matrix(&self, layer: &str) -> Result<Array2<f64>, GatewayError>;
    fn set_layer_matrix(&mut self, layer: &str, weights: Array2<f64>) -> Result<(), GatewayError>;

    fn clone_backend(&self) -> Box<dyn ModelBackend>;

    /// Mean NLL of `target` given `prompt`, plus its gradient with respect to
    /// each requested layer.
    fn target_loss_and_grads(
        &self,
        _prompt: &[u32],
        _target: &[u32],
        _layers: &[String],
    ) -> Result<(f64, Vec<(String, Array2<f64>)>), GatewayError> {
        Err(GatewayError::Unsupported {
            backend: self.model_id().to_string(),
            op: "target_loss_and_grads".to_string(),
        })
    }

    /// Input activation of the named MLP projection at `position` when
    /// running `tokens` (the rank-one editor's key vector).
    fn mlp_key(
        &self,
        _layer: &str,
        _tokens: &[u32],
        _position: usize,
    ) -> Result<Array1<f64>, GatewayError> {
        Err(GatewayError::Unsupported {
            backend: self.model_id().to_string(),
            op: "mlp_key".to_string(),
        })
    }

    /// Mean NLL of `target` given `prompt` when the named MLP projection's
    /// output at `position` is overridden with `value`, plus the gradient of
    /// that loss with respect to `value`.
    fn mlp_override_loss_and_grad(
        &self,
        _layer: &str,
        _prompt: &[u32],
        _target: &[u32],
        _position: usize,
        _value: &Array1<f64>,
    ) -> Result<(f64, Array1<f64>), GatewayError> {
        Err(GatewayError::Unsupported {
            backend: self.model_id().to_string(),
            op: "mlp_override_loss_and_grad".to_string(),
        })
    }
}

pub type ModelHandle = Box<dyn ModelBackend>;

pub fn describe(model: &dyn ModelBackend) -> ModelDescriptor {
    ModelDescriptor {
        model_id: model.model_id().to_string(),
        tokenizer_id: model.tokenizer_id().to_string(),
        mutable_layers: model.mutable_layers(),
        device: "cpu".to_string(),
    }
}

/// Per-token negative log-likelihoods of `text` under `model`.
pub fn score_sequence(model: &dyn ModelBackend, text: &str) -> Result<Vec<f64>, GatewayError> {
    let tokens = model.tokenize(text)?;
    model.score_tokens(&tokens)
}

/// Greedy-decode `max_new_tokens` tokens after `prompt`; returns the newly
/// generated text only.
pub fn greedy_generate(
    model: &dyn ModelBackend,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<String, GatewayError> {
    if max_new_tokens == 0 {
        return Err(GatewayError::InvalidArgument(
            "max_new_tokens must be >= 1".to_string(),
        ));
    }
    let prompt_tokens = model.tokenize(prompt)?;
    let new_tokens = model.greedy_continue(&prompt_tokens, max_new_tokens)?;
    Ok(model.detokenize(&new_tokens))
}

/// A full copy of selected weight matrices, with a content checksum.
///
/// Restoring a snapshot is the exact inverse of any sequence of deltas
/// applied to the snapshotted layers.
#[derive(Debug, Clone)]
pub struct WeightSnapshot {
    layers: BTreeMap<String, Array2<f64>>,
    checksum: String,
}

impl WeightSnapshot {
    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(|s| s.as_str())
    }

    pub fn layer(&self, name: &str) -> Option<&Array2<f64>> {
        self.layers.get(name)
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }
}

fn checksum_layers(layers: &BTreeMap<String, Array2<f64>>) -> String {
    let mut hasher = Sha256::new();
    for (name, w) in layers {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((w.nrows() as u64).to_le_bytes());
        hasher.update((w.ncols() as u64).to_le_bytes());
        for v in w.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn snapshot_weights(
    model: &dyn ModelBackend,
    layers: &[String],
) -> Result<WeightSnapshot, GatewayError> {
    let mut map = BTreeMap::new();
    for name in layers {
        map.insert(name.clone(), model.layer_matrix(name)?);
    }
    let checksum = checksum_layers(&map);
    Ok(WeightSnapshot {
        layers: map,
        checksum,
    })
}

pub fn restore_weights(
    model: &mut dyn ModelBackend,
    snapshot: &WeightSnapshot,
) -> Result<(), GatewayError> {
    for (name, w) in &snapshot.layers {
        model.set_layer_matrix(name, w.clone())?;
    }
    Ok(())
}

/// An additive update to one named layer.
#[derive(Debug, Clone)]
pub struct LayerDelta {
    pub layer: String,
    pub delta: Array2<f64>,
}

impl LayerDelta {
    pub fn max_abs(&self) -> f64 {
        self.delta.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn apply_delta(model: &mut dyn ModelBackend, delta: &LayerDelta) -> Result<(), GatewayError> {
    let current = model.layer_matrix(&delta.layer)?;
    if current.dim() != delta.delta.dim() {
        return Err(GatewayError::ShapeMismatch {
            layer: delta.layer.clone(),
            expected: current.dim(),
            got: delta.delta.dim(),
        });
    }
    model.set_layer_matrix(&delta.layer, current + &delta.delta)
}

/// Entrywise `|W_current - W_snapshot|` for one layer.
pub fn weight_diff(
    model: &dyn ModelBackend,
    snapshot: &WeightSnapshot,
    layer: &str,
) -> Result<Array2<f64>, GatewayError> {
    let original = snapshot
        .layer(layer)
        .ok_or_else(|| GatewayError::UnknownLayer(layer.to_string()))?;
    let current = model.layer_matrix(layer)?;
    if current.dim() != original.dim() {
        return Err(GatewayError::ShapeMismatch {
            layer: layer.to_string(),
            expected: original.dim(),
            got: current.dim(),
        });
    }
    Ok((&current - original).mapv(f64::abs))
}

type LoaderFn = Box<dyn Fn(&str) -> Result<ModelHandle, GatewayError> + Send + Sync>;

/// Registry of model loaders keyed by scheme. Model specs take the form
/// `<scheme>:<path>`, e.g. `toy:fixtures/uniform.json` or
/// `tinylm:out/model.json`.
pub struct BackendRegistry {
    loaders: BTreeMap<String, LoaderFn>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            loaders: BTreeMap::new(),
        }
    }

    /// Registry with the built-in `toy` and `tinylm` schemes.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("toy", |path| {
            let model = toy::ToyTableModel::load(std::path::Path::new(path))?;
            Ok(Box::new(model) as ModelHandle)
        });
        reg.register("tinylm", |path| {
            let model = crate::tinylm::TinyLm::load(std::path::Path::new(path))
                .map_err(|e| GatewayError::Load(e.to_string()))?;
            Ok(Box::new(model) as ModelHandle)
        });
        reg
    }

    pub fn register<F>(&mut self, scheme: &str, loader: F)
    where
        F: Fn(&str) -> Result<ModelHandle, GatewayError> + Send + Sync + 'static,
    {
        self.loaders.insert(scheme.to_string(), Box::new(loader));
    }

    pub fn load(&self, spec: &str) -> Result<ModelHandle, GatewayError> {
        let (scheme, rest) = spec.split_once(':').ok_or_else(|| {
            GatewayError::Load(format!(
                "model spec {spec:?} is not of the form <scheme>:<path>"
            ))
        })?;
        let loader = self.loaders.get(scheme).ok_or_else(|| {
            GatewayError::Load(format!(
                "no backend registered for scheme {scheme:?} (available: {:?})",
                self.loaders.keys().collect::<Vec<_>>()
            ))
        })?;
        loader(rest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::toy::ToyTableModel;
    use ndarray::arr2;

    fn two_word_model() -> ToyTableModel {
        // After "a" the model prefers "b"; after "b" it prefers "a".
        ToyTableModel::from_rows(
            "toy-2",
            &["a", "b"],
            vec![
                ("<s>", vec![0.5, 0.5]),
                ("a", vec![0.25, 0.75]),
                ("b", vec![0.75, 0.25]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn score_is_side_effect_free() {
        let model = two_word_model();
        let first = score_sequence(&model, "a b a").unwrap();
        let _ = greedy_generate(&model, "a", 3).unwrap();
        let second = score_sequence(&model, "a b a").unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn snapshot_restore_round_trips_bit_exactly() {
        let mut model = two_word_model();
        let layers = model.mutable_layers();
        let snap = snapshot_weights(&model, &layers).unwrap();
        let before = score_sequence(&model, "a b a b").unwrap();

        let delta = LayerDelta {
            layer: "transition".to_string(),
            delta: arr2(&[[0.3, -0.2, 0.1], [0.0, 2.0, -1.0], [0.5, 0.5, 0.5]]),
        };
        apply_delta(&mut model, &delta).unwrap();
        let during = score_sequence(&model, "a b a b").unwrap();
        assert_ne!(before, during);

        restore_weights(&mut model, &snap).unwrap();
        let after = score_sequence(&model, "a b a b").unwrap();
        assert_eq!(before, after);

        let resnap = snapshot_weights(&model, &layers).unwrap();
        assert_eq!(snap.checksum(), resnap.checksum());
    }

    #[test]
    fn delta_then_inverse_cancels_within_tolerance() {
        let mut model = two_word_model();
        let before = score_sequence(&model, "a b b a").unwrap();
        let delta = arr2(&[[0.11, -0.07, 0.02], [0.4, -0.9, 0.3], [-0.2, 0.6, -0.1]]);
        apply_delta(
            &mut model,
            &LayerDelta {
                layer: "transition".into(),
                delta: delta.clone(),
            },
        )
        .unwrap();
        apply_delta(
            &mut model,
            &LayerDelta {
                layer: "transition".into(),
                delta: -delta,
            },
        )
        .unwrap();
        let after = score_sequence(&model, "a b b a").unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-5, "nll drifted: {x} vs {y}");
        }
    }

    #[test]
    fn apply_delta_rejects_wrong_shape() {
        let mut model = two_word_model();
        let err = apply_delta(
            &mut model,
            &LayerDelta {
                layer: "transition".into(),
                delta: arr2(&[[1.0, 2.0], [3.0, 4.0]]),
            },
        )
        .unwrap_err();
        assert!(matches!(err, GatewayError::ShapeMismatch { .. }));
    }

    #[test]
    fn weight_diff_zero_without_edits_and_abs_delta_after() {
        let mut model = two_word_model();
        let snap = snapshot_weights(&model, &["transition".to_string()]).unwrap();

        let diff = weight_diff(&model, &snap, "transition").unwrap();
        assert!(diff.iter().all(|v| *v == 0.0));

        let delta = arr2(&[[0.5, -0.25, 0.0], [-1.0, 0.0, 1.0], [0.1, 0.2, -0.3]]);
        apply_delta(
            &mut model,
            &LayerDelta {
                layer: "transition".into(),
                delta: delta.clone(),
            },
        )
        .unwrap();
        let diff = weight_diff(&model, &snap, "transition").unwrap();
        let expected = delta.mapv(f64::abs);
        for (a, b) in diff.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_layer_is_reported() {
        let model = two_word_model();
        let snap = snapshot_weights(&model, &["transition".to_string()]).unwrap();
        assert!(matches!(
            weight_diff(&model, &snap, "nope"),
            Err(GatewayError::UnknownLayer(_))
        ));
        assert!(matches!(
            snapshot_weights(&model, &["nope".to_string()]),
            Err(GatewayError::UnknownLayer(_))
        ));
    }

    #[test]
    fn greedy_generate_rejects_zero_budget() {
        let model = two_word_model();
        assert!(matches!(
            greedy_generate(&model, "a", 0),
            Err(GatewayError::InvalidArgument(_))
        ));
    }
}
