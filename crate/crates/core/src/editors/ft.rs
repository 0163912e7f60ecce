//! Fine-tuning editor with an ℓ∞ constraint: gradient steps on the
//! target-likelihood loss, with every tuned parameter projected back into
//! `[θ₀ - ε, θ₀ + ε]` after each step. The constraint therefore holds at
//! every intermediate step, not only at exit.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;

use super::{
    check_edit_success, normalize_ws, resolve_target_layers, DeltaSummary, EditOutcome,
    EditorConfig, EditorError,
};
use crate::dataset::EditRequest;
use crate::gateway::{LayerDelta, ModelBackend};

pub fn apply_ft_linf_edit(
    model: &mut dyn ModelBackend,
    request: &EditRequest,
    config: &EditorConfig,
) -> Result<EditOutcome, EditorError> {
    apply_ft_linf_edit_observed(model, request, config, |_, _| {})
}

/// As [`apply_ft_linf_edit`], invoking `observer(step, max_deviation)` after
/// every projected step.
pub fn apply_ft_linf_edit_observed(
    model: &mut dyn ModelBackend,
    request: &EditRequest,
    config: &EditorConfig,
    mut observer: impl FnMut(usize, f64),
) -> Result<EditOutcome, EditorError> {
    config.validate()?;
    let epsilon = config
        .epsilon
        .ok_or_else(|| EditorError::Config("ft_linf requires epsilon".into()))?;
    let started = Instant::now();
    let layers = resolve_target_layers(model, config)?;

    let mut originals: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for layer in &layers {
        originals.insert(layer.clone(), model.layer_matrix(layer)?);
    }

    let prompt = model.tokenize(&normalize_ws(&request.prompt))?;
    let target = model.tokenize(&normalize_ws(&request.target_new))?;

    for step in 0..config.steps {
        if check_edit_success(model, request)? {
            break;
        }
        let (loss, grads) = model.target_loss_and_grads(&prompt, &target, &layers)?;
        if !loss.is_finite() {
            return Err(EditorError::NonFiniteLoss { step });
        }
        let mut max_dev = 0.0_f64;
        for (layer, grad) in grads {
            let original = &originals[&layer];
            let mut weights = model.layer_matrix(&layer)?;
            for ((w, g), o) in weights.iter_mut().zip(grad.iter()).zip(original.iter()) {
                *w -= config.learning_rate * g;
                // ℓ∞ projection back onto the ball around the original value.
                *w = w.min(o + epsilon).max(o - epsilon);
                max_dev = max_dev.max((*w - *o).abs());
            }
            model.set_layer_matrix(&layer, weights)?;
        }
        observer(step, max_dev);
    }

    let mut deltas = Vec::new();
    for layer in &layers {
        let delta = model.layer_matrix(layer)? - &originals[layer];
        deltas.push(DeltaSummary::of(&LayerDelta {
            layer: layer.clone(),
            delta,
        }));
    }
    let success = check_edit_success(model, request)?;
    Ok(EditOutcome {
        case_id: request.case_id.clone(),
        editor: "ft_linf".to_string(),
        success,
        deltas,
        wall_time: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::toy::ToyTableModel;
    use crate::gateway::score_sequence;

    fn stubborn_model() -> ToyTableModel {
        // "rome" dominates after "capital"; the edit target is "paris".
        ToyTableModel::from_rows(
            "stubborn",
            &["capital", "paris", "rome"],
            vec![
                ("<s>", vec![0.8, 0.1, 0.1]),
                ("capital", vec![0.02, 0.08, 0.9]),
                ("paris", vec![0.4, 0.3, 0.3]),
                ("rome", vec![0.4, 0.3, 0.3]),
            ],
        )
        .unwrap()
    }

    fn request() -> EditRequest {
        EditRequest::new("ft-0", "capital", "capital", "paris", "rome").unwrap()
    }

    #[test]
    fn easy_fact_is_learned_within_budget() {
        let mut model = stubborn_model();
        let config = EditorConfig::ft_linf(5.0, 200, 0.8);
        let outcome = apply_ft_linf_edit(&mut model, &request(), &config).unwrap();
        assert!(outcome.success);
        assert!(check_edit_success(&model, &request()).unwrap());
        assert_eq!(outcome.editor, "ft_linf");
        assert_eq!(outcome.deltas.len(), 1);
        assert!(outcome.deltas[0].max_abs > 0.0);
    }

    #[test]
    fn constraint_holds_at_every_step() {
        let mut model = stubborn_model();
        let epsilon = 0.05;
        let config = EditorConfig::ft_linf(epsilon, 50, 1.0);
        let mut max_seen = 0.0_f64;
        let outcome =
            apply_ft_linf_edit_observed(&mut model, &request(), &config, |_, dev| {
                max_seen = max_seen.max(dev);
            })
            .unwrap();
        assert!(max_seen <= epsilon, "per-step deviation {max_seen} > {epsilon}");
        for delta in &outcome.deltas {
            assert!(delta.max_abs <= epsilon + 1e-15);
        }
        // A bound this tight cannot flip the dominant continuation.
        assert!(!outcome.success);
    }

    #[test]
    fn zero_epsilon_leaves_model_unchanged() {
        let mut model = stubborn_model();
        let before = score_sequence(&model, "capital rome paris").unwrap();
        let pre_success = check_edit_success(&model, &request()).unwrap();
        let config = EditorConfig::ft_linf(0.0, 20, 1.0);
        let outcome = apply_ft_linf_edit(&mut model, &request(), &config).unwrap();
        let after = score_sequence(&model, "capital rome paris").unwrap();
        assert_eq!(before, after);
        assert_eq!(outcome.success, pre_success);
        assert!(outcome.deltas.iter().all(|d| d.max_abs == 0.0));
    }
}
