//! Explicit probability-table model used as the oracle backend in tests.
//!
//! The model is first-order: the next-token distribution depends only on the
//! current token. Its single mutable layer, `transition`, holds the
//! transition logits; scoring applies a row-wise log-softmax, so additive
//! deltas behave like logit edits on any other backend.
//!
//! Definition file format (JSON):
//!
//! ```json
//! {
//!   "vocab": ["<s>", "a", "b"],
//!   "transitions": [[0.0, 0.5, 0.5], [0.0, 0.25, 0.75], [0.0, 0.75, 0.25]]
//! }
//! ```
//!
//! `vocab` must contain the start-of-text token `<s>`; `transitions[i][j]` is
//! the probability of token `j` following token `i` (rows are normalized on
//! load). Zero entries are floored at 1e-300 so the logit matrix stays
//! finite under mutation.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{GatewayError, ModelBackend, ModelHandle};

pub const BOS: &str = "<s>";
const PROB_FLOOR: f64 = 1e-300;
pub const TRANSITION_LAYER: &str = "transition";

#[derive(Debug, Clone)]
pub struct ToyTableModel {
    model_id: String,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    bos: u32,
    /// Row-wise transition logits over the full vocabulary.
    logits: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ToyModelFile {
    vocab: Vec<String>,
    transitions: Vec<Vec<f64>>,
}

impl ToyTableModel {
    /// Build from per-token rows of next-token probabilities over `words`
    /// (the non-start vocabulary). Every token in `{<s>} ∪ words` must have
    /// a row.
    pub fn from_rows(
        model_id: &str,
        words: &[&str],
        rows: Vec<(&str, Vec<f64>)>,
    ) -> Result<Self, GatewayError> {
        let mut vocab = vec![BOS.to_string()];
        vocab.extend(words.iter().map(|w| w.to_string()));
        let full = vocab.len();
        let mut table = vec![vec![0.0; full]; full];
        let mut seen = vec![false; full];
        for (word, probs) in rows {
            let idx = vocab
                .iter()
                .position(|w| w == word)
                .ok_or_else(|| GatewayError::UnknownToken(word.to_string()))?;
            if probs.len() != words.len() {
                return Err(GatewayError::InvalidArgument(format!(
                    "row for {word:?} has {} entries, expected {}",
                    probs.len(),
                    words.len()
                )));
            }
            for (j, p) in probs.iter().enumerate() {
                table[idx][j + 1] = *p;
            }
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GatewayError::InvalidArgument(format!(
                "no transition row for token {:?}",
                vocab[missing]
            )));
        }
        Self::from_table(model_id, vocab, table)
    }

    /// Uniform next-token distribution over `words` from every context.
    pub fn uniform(model_id: &str, words: &[&str]) -> Result<Self, GatewayError> {
        let p = 1.0 / words.len() as f64;
        let rows: Vec<(&str, Vec<f64>)> = std::iter::once(BOS)
            .chain(words.iter().copied())
            .map(|w| (w, vec![p; words.len()]))
            .collect();
        Self::from_rows(model_id, words, rows)
    }

    fn from_table(
        model_id: &str,
        vocab: Vec<String>,
        table: Vec<Vec<f64>>,
    ) -> Result<Self, GatewayError> {
        if vocab.is_empty() {
            return Err(GatewayError::InvalidArgument("empty vocabulary".into()));
        }
        let full = vocab.len();
        let bos = vocab
            .iter()
            .position(|w| w == BOS)
            .ok_or_else(|| GatewayError::InvalidArgument(format!("vocab must contain {BOS:?}")))?
            as u32;
        let mut index = HashMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(GatewayError::InvalidArgument(format!(
                    "duplicate vocab entry {w:?}"
                )));
            }
        }
        if table.len() != full {
            return Err(GatewayError::InvalidArgument(format!(
                "transition table has {} rows, expected {full}",
                table.len()
            )));
        }
        let mut logits = Array2::zeros((full, full));
        for (i, row) in table.iter().enumerate() {
            if row.len() != full {
                return Err(GatewayError::InvalidArgument(format!(
                    "transition row {i} has {} entries, expected {full}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if !sum.is_finite() || sum <= 0.0 || row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                return Err(GatewayError::InvalidArgument(format!(
                    "transition row {i} is not a finite non-negative distribution"
                )));
            }
            for (j, p) in row.iter().enumerate() {
                logits[[i, j]] = (p / sum).max(PROB_FLOOR).ln();
            }
        }
        Ok(ToyTableModel {
            model_id: model_id.to_string(),
            vocab,
            index,
            bos,
            logits,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Load(format!("{}: {e}", path.display())))?;
        let file: ToyModelFile = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Load(format!("{}: {e}", path.display())))?;
        let model_id = path
            .file_stem()
            .map(|s| format!("toy-{}", s.to_string_lossy()))
            .unwrap_or_else(|| "toy".to_string());
        Self::from_table(&model_id, file.vocab, file.transitions)
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let transitions: Vec<Vec<f64>> = (0..self.vocab.len())
            .map(|i| {
                let row = self.logits.row(i);
                let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.iter().map(|e| e / z).collect()
            })
            .collect();
        let file = ToyModelFile {
            vocab: self.vocab.clone(),
            transitions,
        };
        let raw = serde_json::to_string_pretty(&file)
            .map_err(|e| GatewayError::Backend(e.to_string()))?;
        std::fs::write(path, raw).map_err(|e| GatewayError::Backend(e.to_string()))
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn nll_of(&self, prev: u32, next: u32) -> f64 {
        let row = self.logits.row(prev as usize);
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        log_z - self.logits[[prev as usize, next as usize]]
    }

    fn argmax_next(&self, prev: u32) -> u32 {
        let row = self.logits.row(prev as usize);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if *v > best_v {
                best_v = *v;
                best = j;
            }
        }
        best as u32
    }
}

impl ModelBackend for ToyTableModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn tokenizer_id(&self) -> &str {
        "whitespace"
    }

    fn context_window(&self) -> usize {
        usize::MAX
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, GatewayError> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| GatewayError::UnknownToken(w.to_string()))
            })
            .collect()
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|t| {
                self.vocab
                    .get(*t as usize)
                    .map(|s| s.as_str())
                    .unwrap_or("<?>")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn score_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>, GatewayError> {
        if tokens.is_empty() {
            return Err(GatewayError::EmptySequence);
        }
        let mut prev = self.bos;
        let mut nlls = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            if tok as usize >= self.vocab.len() {
                return Err(GatewayError::UnknownToken(format!("id {tok}")));
            }
            nlls.push(self.nll_of(prev, tok));
            prev = tok;
        }
        Ok(nlls)
    }

    fn greedy_continue(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
    ) -> Result<Vec<u32>, GatewayError> {
        let mut prev = prompt.last().copied().unwrap_or(self.bos);
        let mut out = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            let next = self.argmax_next(prev);
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    fn mutable_layers(&self) -> Vec<String> {
        vec![TRANSITION_LAYER.to_string()]
    }

    fn layer_matrix(&self, layer: &str) -> Result<Array2<f64>, GatewayError> {
        if layer != TRANSITION_LAYER {
            return Err(GatewayError::UnknownLayer(layer.to_string()));
        }
        Ok(self.logits.clone())
    }

    fn set_layer_matrix(&mut self, layer: &str, weights: Array2<f64>) -> Result<(), GatewayError> {
        if layer != TRANSITION_LAYER {
            return Err(GatewayError::UnknownLayer(layer.to_string()));
        }
        if weights.dim() != self.logits.dim() {
            return Err(GatewayError::ShapeMismatch {
                layer: layer.to_string(),
                expected: self.logits.dim(),
                got: weights.dim(),
            });
        }
        self.logits = weights;
        Ok(())
    }

    fn clone_backend(&self) -> ModelHandle {
        Box::new(self.clone())
    }

    fn target_loss_and_grads(
        &self,
        prompt: &[u32],
        target: &[u32],
        layers: &[String],
    ) -> Result<(f64, Vec<(String, Array2<f64>)>), GatewayError> {
        if target.is_empty() {
            return Err(GatewayError::EmptySequence);
        }
        for layer in layers {
            if layer != TRANSITION_LAYER {
                return Err(GatewayError::UnknownLayer(layer.clone()));
            }
        }
        let full = self.vocab.len();
        let mut grad = Array2::zeros((full, full));
        let mut loss = 0.0;
        let scale = 1.0 / target.len() as f64;
        let mut prev = prompt.last().copied().unwrap_or(self.bos);
        for &tok in target {
            loss += self.nll_of(prev, tok) * scale;
            // d nll / d logits[prev] = softmax(row) - onehot(tok)
            let row = self.logits.row(prev as usize);
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for (j, e) in exp.iter().enumerate() {
                grad[[prev as usize, j]] += scale * (e / z);
            }
            grad[[prev as usize, tok as usize]] -= scale;
            prev = tok;
        }
        let grads = layers.iter().map(|l| (l.clone(), grad.clone())).collect();
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{greedy_generate, score_sequence};

    #[test]
    fn uniform_model_scores_ln_v() {
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
        let model = ToyTableModel::uniform("u100", &refs).unwrap();
        let nlls = score_sequence(&model, "w3 w99 w0 w42").unwrap();
        assert_eq!(nlls.len(), 4);
        for nll in nlls {
            assert!((nll - (100.0_f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_specified_probabilities_round_trip_to_nll() {
        // p(x|<s>) = 0.5, p(y|x) = 0.25, p(z|y) = 0.125
        let model = ToyTableModel::from_rows(
            "chain",
            &["x", "y", "z"],
            vec![
                ("<s>", vec![0.5, 0.25, 0.25]),
                ("x", vec![0.5, 0.25, 0.25]),
                ("y", vec![0.25, 0.625, 0.125]),
                ("z", vec![1.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        let nlls = score_sequence(&model, "x y z").unwrap();
        assert!((nlls[0] - 2.0_f64.ln()).abs() < 1e-12);
        assert!((nlls[1] - 4.0_f64.ln()).abs() < 1e-12);
        assert!((nlls[2] - 8.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let model = ToyTableModel::uniform("u", &["a", "b"]).unwrap();
        assert!(matches!(
            model.score_tokens(&[]),
            Err(GatewayError::EmptySequence)
        ));
    }

    #[test]
    fn greedy_follows_argmax_chain() {
        let model = ToyTableModel::from_rows(
            "abc",
            &["a", "b", "c"],
            vec![
                ("<s>", vec![0.8, 0.1, 0.1]),
                ("a", vec![0.1, 0.8, 0.1]),
                ("b", vec![0.1, 0.1, 0.8]),
                ("c", vec![0.8, 0.1, 0.1]),
            ],
        )
        .unwrap();
        assert_eq!(greedy_generate(&model, "a", 2).unwrap(), "b c");
        // Deterministic: same prompt twice gives the same output.
        assert_eq!(
            greedy_generate(&model, "a", 5).unwrap(),
            greedy_generate(&model, "a", 5).unwrap()
        );
    }

    #[test]
    fn unknown_word_is_an_error() {
        let model = ToyTableModel::uniform("u", &["a", "b"]).unwrap();
        assert!(matches!(
            model.tokenize("a zebra"),
            Err(GatewayError::UnknownToken(_))
        ));
    }

    #[test]
    fn file_round_trip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let model = ToyTableModel::from_rows(
            "rt",
            &["a", "b"],
            vec![
                ("<s>", vec![0.9, 0.1]),
                ("a", vec![0.3, 0.7]),
                ("b", vec![0.6, 0.4]),
            ],
        )
        .unwrap();
        model.save(&path).unwrap();
        let loaded = ToyTableModel::load(&path).unwrap();
        let a = score_sequence(&model, "a b a").unwrap();
        let b = score_sequence(&loaded, "a b a").unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ft_gradient_matches_finite_differences() {
        let model = ToyTableModel::from_rows(
            "g",
            &["a", "b", "c"],
            vec![
                ("<s>", vec![0.2, 0.5, 0.3]),
                ("a", vec![0.6, 0.2, 0.2]),
                ("b", vec![0.1, 0.2, 0.7]),
                ("c", vec![0.4, 0.4, 0.2]),
            ],
        )
        .unwrap();
        let prompt = model.tokenize("a b").unwrap();
        let target = model.tokenize("c a").unwrap();
        let layers = vec![TRANSITION_LAYER.to_string()];
        let (loss, grads) = model
            .target_loss_and_grads(&prompt, &target, &layers)
            .unwrap();
        assert!(loss.is_finite());
        let grad = &grads[0].1;

        let h = 1e-6;
        let base = model.layer_matrix(TRANSITION_LAYER).unwrap();
        for (i, j) in [(2usize, 3usize), (3, 1), (0, 2), (1, 1)] {
            let mut up = model.clone();
            let mut w = base.clone();
            w[[i, j]] += h;
            up.set_layer_matrix(TRANSITION_LAYER, w).unwrap();
            let (loss_up, _) = up
                .target_loss_and_grads(&prompt, &target, &layers)
                .unwrap();

            let mut down = model.clone();
            let mut w = base.clone();
            w[[i, j]] -= h;
            down.set_layer_matrix(TRANSITION_LAYER, w).unwrap();
            let (loss_down, _) = down
                .target_loss_and_grads(&prompt, &target, &layers)
                .unwrap();

            let fd = (loss_up - loss_down) / (2.0 * h);
            assert!(
                (fd - grad[[i, j]]).abs() < 1e-6,
                "grad mismatch at ({i},{j}): fd={fd} analytic={}",
                grad[[i, j]]
            );
        }
    }
}
