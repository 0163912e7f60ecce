//! A small trainable GPT-style language model used as the desk-scale
//! experiment substrate.
//!
//! The model is word-level, runs entirely in f64 on CPU, and exposes every
//! dense weight matrix as a named mutable layer through the gateway trait.
//! It also implements the gradient hooks the built-in editors need: target
//! loss gradients per layer, MLP key extraction, and loss/gradient under an
//! MLP output override.

mod net;
pub mod vocab;

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, ModelBackend, ModelHandle};
use net::{Gradients, MlpOverride, Params};
use vocab::{WordVocab, BOS_ID};

#[derive(Debug, Error)]
pub enum TinyLmError {
    #[error("artifact io error: {0}")]
    Io(String),
    #[error("artifact format error: {0}")]
    Format(String),
    #[error("training error: {0}")]
    Train(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub model_id: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Maximum sequence length including the start token.
    pub context: usize,
    /// Apply a layer norm before the unembedding.
    #[serde(default = "default_final_ln")]
    pub final_ln: bool,
}

fn default_final_ln() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    config: TinyLmConfig,
    vocab: WordVocab,
    params: Params,
}

impl TinyLm {
    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &WordVocab {
        &self.vocab
    }

    /// The conventional editing target: the mid-depth MLP down-projection.
    pub fn default_edit_layer(&self) -> String {
        format!("blocks.{}.mlp.down_proj", (self.config.blocks - 1) / 2)
    }

    fn seq_with_bos(&self, tokens: &[u32]) -> Result<Vec<u32>, GatewayError> {
        if tokens.is_empty() {
            return Err(GatewayError::EmptySequence);
        }
        if tokens.len() + 1 > self.config.context {
            return Err(GatewayError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.context - 1,
            });
        }
        let mut seq = Vec::with_capacity(tokens.len() + 1);
        seq.push(BOS_ID);
        seq.extend_from_slice(tokens);
        Ok(seq)
    }

    /// Block index of a `blocks.<i>.mlp.down_proj` layer name.
    fn down_proj_block(&self, layer: &str) -> Result<usize, GatewayError> {
        let parts: Vec<&str> = layer.split('.').collect();
        if parts.len() == 4 && parts[0] == "blocks" && parts[2] == "mlp" && parts[3] == "down_proj"
        {
            if let Ok(b) = parts[1].parse::<usize>() {
                if b < self.config.blocks {
                    return Ok(b);
                }
            }
        }
        if self.params.mats.contains_key(layer) {
            return Err(GatewayError::Unsupported {
                backend: self.config.model_id.clone(),
                op: format!("key/value editing on layer {layer} (not an MLP down projection)"),
            });
        }
        Err(GatewayError::UnknownLayer(layer.to_string()))
    }

    fn scored_positions(prompt_len: usize, target_len: usize) -> Vec<usize> {
        // Sequence layout: [bos, prompt.., target..]; position i predicts
        // element i+1, so targets are predicted from prompt_len..prompt_len+target_len.
        (prompt_len..prompt_len + target_len).collect()
    }
}

impl ModelBackend for TinyLm {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn tokenizer_id(&self) -> &str {
        "word-lower-v1"
    }

    fn context_window(&self) -> usize {
        self.config.context
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, GatewayError> {
        Ok(self.vocab.encode(text))
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        self.vocab.decode(tokens)
    }

    fn score_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>, GatewayError> {
        let seq = self.seq_with_bos(tokens)?;
        let tape = net::forward(&self.config, &self.params, &seq, None);
        Ok(net::position_nlls(&tape))
    }

    fn greedy_continue(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
    ) -> Result<Vec<u32>, GatewayError> {
        if prompt.len() + max_new_tokens + 1 > self.config.context {
            return Err(GatewayError::SequenceTooLong {
                len: prompt.len() + max_new_tokens,
                max: self.config.context - 1,
            });
        }
        let mut seq = Vec::with_capacity(prompt.len() + max_new_tokens + 1);
        seq.push(BOS_ID);
        seq.extend_from_slice(prompt);
        let mut out = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            let tape = net::forward(&self.config, &self.params, &seq, None);
            let row = tape.logits.row(seq.len() - 1);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if *v > best_v {
                    best_v = *v;
                    best = j;
                }
            }
            seq.push(best as u32);
            out.push(best as u32);
        }
        Ok(out)
    }

    fn mutable_layers(&self) -> Vec<String> {
        net::mat_names(self.config.blocks)
    }

    fn layer_matrix(&self, layer: &str) -> Result<Array2<f64>, GatewayError> {
        self.params
            .mats
            .get(layer)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownLayer(layer.to_string()))
    }

    fn set_layer_matrix(&mut self, layer: &str, weights: Array2<f64>) -> Result<(), GatewayError> {
        let slot = self
            .params
            .mats
            .get_mut(layer)
            .ok_or_else(|| GatewayError::UnknownLayer(layer.to_string()))?;
        if slot.dim() != weights.dim() {
            return Err(GatewayError::ShapeMismatch {
                layer: layer.to_string(),
                expected: slot.dim(),
                got: weights.dim(),
            });
        }
        *slot = weights;
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
            if !self.params.mats.contains_key(layer) {
                return Err(GatewayError::UnknownLayer(layer.clone()));
            }
        }
        let mut seq = vec![BOS_ID];
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(target);
        if seq.len() > self.config.context {
            return Err(GatewayError::SequenceTooLong {
                len: seq.len() - 1,
                max: self.config.context - 1,
            });
        }
        let scored = Self::scored_positions(prompt.len(), target.len());
        let tape = net::forward(&self.config, &self.params, &seq, None);
        let (loss, dlogits) = net::loss_and_dlogits(&tape, &scored);
        let (grads, _) = net::backward(&self.config, &self.params, &tape, &dlogits);
        let out = layers
            .iter()
            .map(|l| (l.clone(), grads.mats[l].clone()))
            .collect();
        Ok((loss, out))
    }

    fn mlp_key(
        &self,
        layer: &str,
        tokens: &[u32],
        position: usize,
    ) -> Result<Array1<f64>, GatewayError> {
        let block = self.down_proj_block(layer)?;
        if position >= tokens.len() {
            return Err(GatewayError::InvalidArgument(format!(
                "position {position} out of range for {} tokens",
                tokens.len()
            )));
        }
        let seq = self.seq_with_bos(tokens)?;
        let tape = net::forward(&self.config, &self.params, &seq, None);
        // +1 skips the start token.
        Ok(tape.mlp_input(block, position + 1))
    }

    fn mlp_override_loss_and_grad(
        &self,
        layer: &str,
        prompt: &[u32],
        target: &[u32],
        position: usize,
        value: &Array1<f64>,
    ) -> Result<(f64, Array1<f64>), GatewayError> {
        let block = self.down_proj_block(layer)?;
        if target.is_empty() {
            return Err(GatewayError::EmptySequence);
        }
        if position >= prompt.len() {
            return Err(GatewayError::InvalidArgument(format!(
                "override position {position} must lie inside the prompt ({} tokens)",
                prompt.len()
            )));
        }
        if value.len() != self.config.dim {
            return Err(GatewayError::InvalidArgument(format!(
                "override vector has length {}, expected {}",
                value.len(),
                self.config.dim
            )));
        }
        let mut seq = vec![BOS_ID];
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(target);
        if seq.len() > self.config.context {
            return Err(GatewayError::SequenceTooLong {
                len: seq.len() - 1,
                max: self.config.context - 1,
            });
        }
        let over = MlpOverride {
            block,
            row: position + 1,
            value,
        };
        let scored = Self::scored_positions(prompt.len(), target.len());
        let tape = net::forward(&self.config, &self.params, &seq, Some(&over));
        let (loss, dlogits) = net::loss_and_dlogits(&tape, &scored);
        let (_, d_over) = net::backward(&self.config, &self.params, &tape, &dlogits);
        let grad = d_over.ok_or_else(|| GatewayError::Backend("override gradient missing".into()))?;
        Ok((loss, grad))
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub context: usize,
    pub max_vocab: usize,
    pub min_count: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub final_ln: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 48,
            hidden: 192,
            blocks: 2,
            context: 48,
            max_vocab: 2000,
            min_count: 1,
            steps: 1500,
            batch: 8,
            lr: 3e-3,
            seed: 0,
            final_ln: true,
        }
    }
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: usize,
}

fn adam_step(params: &mut Params, grads: &Gradients, state: &mut AdamState, lr: f64) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - B1.powi(t);
    let bias2 = 1.0 - B2.powi(t);
    for (name, g) in &grads.mats {
        let m = state.m.mats.get_mut(name).unwrap();
        let v = state.v.mats.get_mut(name).unwrap();
        let p = params.mats.get_mut(name).unwrap();
        for ((pv, gv), (mv, vv)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mv = B1 * *mv + (1.0 - B1) * gv;
            *vv = B2 * *vv + (1.0 - B2) * gv * gv;
            *pv -= lr * (*mv / bias1) / ((*vv / bias2).sqrt() + EPS);
        }
    }
    for (name, g) in &grads.vecs {
        let m = state.m.vecs.get_mut(name).unwrap();
        let v = state.v.vecs.get_mut(name).unwrap();
        let p = params.vecs.get_mut(name).unwrap();
        for ((pv, gv), (mv, vv)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mv = B1 * *mv + (1.0 - B1) * gv;
            *vv = B2 * *vv + (1.0 - B2) * gv * gv;
            *pv -= lr * (*mv / bias1) / ((*vv / bias2).sqrt() + EPS);
        }
    }
}

/// Trains a fresh model on `sentences`. Deterministic for a fixed config.
pub fn train(model_id: &str, sentences: &[String], tc: &TrainConfig) -> Result<TinyLm, TinyLmError> {
    let vocab = WordVocab::build(
        sentences.iter().map(|s| s.as_str()),
        tc.max_vocab,
        tc.min_count,
    );
    if vocab.len() < 3 {
        return Err(TinyLmError::Train("vocabulary too small".into()));
    }
    let config = TinyLmConfig {
        model_id: model_id.to_string(),
        vocab_size: vocab.len(),
        dim: tc.dim,
        hidden: tc.hidden,
        blocks: tc.blocks,
        context: tc.context,
        final_ln: tc.final_ln,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = Params::init(&config, &mut rng);

    // Pre-encode training sequences (start token + sentence, truncated).
    let data: Vec<Vec<u32>> = sentences
        .iter()
        .filter_map(|s| {
            let mut ids = vocab.encode(s);
            if ids.is_empty() {
                return None;
            }
            ids.truncate(tc.context - 1);
            let mut seq = Vec::with_capacity(ids.len() + 1);
            seq.push(BOS_ID);
            seq.extend(ids);
            Some(seq)
        })
        .collect();
    if data.is_empty() {
        return Err(TinyLmError::Train("no non-empty training sentences".into()));
    }

    let mut adam = AdamState {
        m: Gradients::zeros_like(&params),
        v: Gradients::zeros_like(&params),
        t: 0,
    };
    let warmup = 20.min(tc.steps / 10 + 1);
    for step in 0..tc.steps {
        let mut batch_grads = Gradients::zeros_like(&params);
        let mut batch_loss = 0.0;
        for _ in 0..tc.batch {
            let seq = &data[rng.gen_range(0..data.len())];
            let scored: Vec<usize> = (0..seq.len() - 1).collect();
            let tape = net::forward(&config, &params, seq, None);
            let (loss, dlogits) = net::loss_and_dlogits(&tape, &scored);
            let (grads, _) = net::backward(&config, &params, &tape, &dlogits);
            batch_grads.add_assign(&grads);
            batch_loss += loss;
        }
        batch_grads.scale(1.0 / tc.batch as f64);
        let norm = batch_grads.global_norm();
        if !norm.is_finite() {
            return Err(TinyLmError::Train(format!(
                "non-finite gradient at step {step}"
            )));
        }
        if norm > 1.0 {
            batch_grads.scale(1.0 / norm);
        }
        let lr = if step < warmup {
            tc.lr * (step + 1) as f64 / warmup as f64
        } else {
            tc.lr
        };
        adam_step(&mut params, &batch_grads, &mut adam, lr);
        if step % 200 == 0 || step + 1 == tc.steps {
            log::info!(
                "train {model_id}: step {step}/{} loss {:.4}",
                tc.steps,
                batch_loss / tc.batch as f64
            );
        }
    }

    Ok(TinyLm {
        config,
        vocab,
        params,
    })
}

// ---------------------------------------------------------------------------
// Artifact io
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct VectorBlob {
    len: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Artifact {
    format: String,
    config: TinyLmConfig,
    vocab: Vec<String>,
    mats: std::collections::BTreeMap<String, TensorBlob>,
    vecs: std::collections::BTreeMap<String, VectorBlob>,
}

const ARTIFACT_FORMAT: &str = "tinylm-v1";

fn encode_f64s<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    use base64::Engine;
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64s(data: &str, expected: usize) -> Result<Vec<f64>, TinyLmError> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| TinyLmError::Format(e.to_string()))?;
    if bytes.len() != expected * 8 {
        return Err(TinyLmError::Format(format!(
            "tensor blob has {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl TinyLm {
    pub fn save(&self, path: &Path) -> Result<(), TinyLmError> {
        let mats = self
            .params
            .mats
            .iter()
            .map(|(k, w)| {
                (
                    k.clone(),
                    TensorBlob {
                        rows: w.nrows(),
                        cols: w.ncols(),
                        data: encode_f64s(w.iter()),
                    },
                )
            })
            .collect();
        let vecs = self
            .params
            .vecs
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    VectorBlob {
                        len: v.len(),
                        data: encode_f64s(v.iter()),
                    },
                )
            })
            .collect();
        let artifact = Artifact {
            format: ARTIFACT_FORMAT.to_string(),
            config: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
            mats,
            vecs,
        };
        let raw = serde_json::to_string(&artifact).map_err(|e| TinyLmError::Format(e.to_string()))?;
        std::fs::write(path, raw).map_err(|e| TinyLmError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TinyLmError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TinyLmError::Io(format!("{}: {e}", path.display())))?;
        let artifact: Artifact =
            serde_json::from_str(&raw).map_err(|e| TinyLmError::Format(e.to_string()))?;
        if artifact.format != ARTIFACT_FORMAT {
            return Err(TinyLmError::Format(format!(
                "unsupported artifact format {:?}",
                artifact.format
            )));
        }
        let vocab = WordVocab::from_words(artifact.vocab);
        if vocab.len() != artifact.config.vocab_size {
            return Err(TinyLmError::Format(format!(
                "vocab has {} entries, config says {}",
                vocab.len(),
                artifact.config.vocab_size
            )));
        }
        let mut mats = std::collections::BTreeMap::new();
        for (name, blob) in artifact.mats {
            let values = decode_f64s(&blob.data, blob.rows * blob.cols)?;
            let matrix = Array2::from_shape_vec((blob.rows, blob.cols), values)
                .map_err(|e| TinyLmError::Format(e.to_string()))?;
            mats.insert(name, matrix);
        }
        let mut vecs = std::collections::BTreeMap::new();
        for (name, blob) in artifact.vecs {
            let values = decode_f64s(&blob.data, blob.len)?;
            vecs.insert(name, Array1::from_vec(values));
        }
        // Every expected tensor must be present.
        for name in net::mat_names(artifact.config.blocks) {
            if !mats.contains_key(&name) {
                return Err(TinyLmError::Format(format!("missing tensor {name:?}")));
            }
        }
        Ok(TinyLm {
            config: artifact.config,
            vocab,
            params: Params { mats, vecs },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{greedy_generate, score_sequence};

    fn tiny_training_set() -> Vec<String> {
        let mut out = Vec::new();
        for _ in 0..30 {
            out.push("the red fox runs past the old mill every day .".to_string());
            out.push("the blue bird sings near the tall tree every morning .".to_string());
            out.push("arden is located in belmar .".to_string());
            out.push("corin is located in dunwick .".to_string());
        }
        out
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            dim: 16,
            hidden: 32,
            blocks: 2,
            context: 24,
            max_vocab: 200,
            min_count: 1,
            steps: 250,
            batch: 4,
            lr: 5e-3,
            seed: 7,
            final_ln: true,
        }
    }

    #[test]
    fn training_reduces_perplexity_and_learns_facts() {
        let model = train("unit-lm", &tiny_training_set(), &quick_config()).unwrap();
        let nlls = score_sequence(&model, "the red fox runs past the old mill every day .").unwrap();
        let ppl = (nlls.iter().sum::<f64>() / nlls.len() as f64).exp();
        assert!(
            ppl < model.config().vocab_size as f64,
            "trained ppl {ppl} should beat uniform {}",
            model.config().vocab_size
        );
        let answer = greedy_generate(&model, "arden is located in", 1).unwrap();
        assert_eq!(answer, "belmar");
    }

    #[test]
    fn training_is_deterministic() {
        let a = train("det", &tiny_training_set(), &quick_config()).unwrap();
        let b = train("det", &tiny_training_set(), &quick_config()).unwrap();
        let sa = score_sequence(&a, "the red fox runs past the old mill every day .").unwrap();
        let sb = score_sequence(&b, "the red fox runs past the old mill every day .").unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn artifact_round_trips_bit_exactly() {
        let model = train("rt", &tiny_training_set(), &quick_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = TinyLm::load(&path).unwrap();
        let text = "the blue bird sings near the tall tree every morning .";
        assert_eq!(
            score_sequence(&model, text).unwrap(),
            score_sequence(&loaded, text).unwrap()
        );
        assert_eq!(model.mutable_layers(), loaded.mutable_layers());
    }

    #[test]
    fn sequence_too_long_is_reported() {
        let model = train("len", &tiny_training_set(), &quick_config()).unwrap();
        let long: Vec<u32> = vec![2; model.context_window() + 3];
        assert!(matches!(
            model.score_tokens(&long),
            Err(GatewayError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn mlp_key_is_the_down_projection_input() {
        let model = train("key", &tiny_training_set(), &quick_config()).unwrap();
        let tokens = model.tokenize("arden is located in").unwrap();
        let layer = model.default_edit_layer();
        let key = model.mlp_key(&layer, &tokens, 0).unwrap();
        assert_eq!(key.len(), model.config().hidden);
        // Keys at different positions differ.
        let key2 = model.mlp_key(&layer, &tokens, 2).unwrap();
        assert_ne!(key, key2);
        // Non-down-proj layers are rejected.
        assert!(matches!(
            model.mlp_key("blocks.0.attn.wq", &tokens, 0),
            Err(GatewayError::Unsupported { .. })
        ));
    }
}
