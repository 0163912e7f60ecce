//! Forward and backward passes for the small GPT-style network.
//!
//! Architecture: learned token + position embeddings, `blocks` pre-norm
//! transformer blocks (single-head causal attention, GELU MLP), a final
//! layer norm, and an untied unembedding. Everything runs in f64.
//!
//! Weight matrices are stored `(out, in)` so `y = x . Wᵀ`; gradients follow
//! `dx = dy . W`, `dW = dyᵀ . x`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TinyLmConfig;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub mats: BTreeMap<String, Array2<f64>>,
    pub vecs: BTreeMap<String, Array1<f64>>,
}

pub(crate) fn mat_names(blocks: usize) -> Vec<String> {
    let mut names = vec!["embed".to_string(), "pos".to_string()];
    for b in 0..blocks {
        for suffix in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            names.push(format!("blocks.{b}.{suffix}"));
        }
        names.push(format!("blocks.{b}.mlp.up_proj"));
        names.push(format!("blocks.{b}.mlp.down_proj"));
    }
    names.push("unembed".to_string());
    names
}

fn vec_names(blocks: usize) -> Vec<String> {
    let mut names = Vec::new();
    for b in 0..blocks {
        for suffix in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
            names.push(format!("blocks.{b}.{suffix}"));
        }
    }
    names.push("final_ln.gain".to_string());
    names.push("final_ln.bias".to_string());
    names
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| randn(rng) * std)
}

impl Params {
    pub fn init(cfg: &TinyLmConfig, rng: &mut ChaCha8Rng) -> Params {
        let (v, d, f) = (cfg.vocab_size, cfg.dim, cfg.hidden);
        let base = 0.02;
        // Residual-path projections are scaled down by sqrt(2 * blocks).
        let resid = base / (2.0 * cfg.blocks as f64).sqrt();
        let mut mats = BTreeMap::new();
        mats.insert("embed".to_string(), random_matrix(rng, v, d, base));
        mats.insert("pos".to_string(), random_matrix(rng, cfg.context, d, base));
        for b in 0..cfg.blocks {
            mats.insert(format!("blocks.{b}.attn.wq"), random_matrix(rng, d, d, base));
            mats.insert(format!("blocks.{b}.attn.wk"), random_matrix(rng, d, d, base));
            mats.insert(format!("blocks.{b}.attn.wv"), random_matrix(rng, d, d, base));
            mats.insert(format!("blocks.{b}.attn.wo"), random_matrix(rng, d, d, resid));
            mats.insert(
                format!("blocks.{b}.mlp.up_proj"),
                random_matrix(rng, f, d, base),
            );
            mats.insert(
                format!("blocks.{b}.mlp.down_proj"),
                random_matrix(rng, d, f, resid),
            );
        }
        mats.insert("unembed".to_string(), random_matrix(rng, v, d, base));
        let mut vecs = BTreeMap::new();
        for name in vec_names(cfg.blocks) {
            let filled = if name.ends_with("gain") {
                Array1::ones(d)
            } else {
                Array1::zeros(d)
            };
            vecs.insert(name, filled);
        }
        Params { mats, vecs }
    }

    pub fn mat(&self, name: &str) -> &Array2<f64> {
        &self.mats[name]
    }

    pub fn vec(&self, name: &str) -> &Array1<f64> {
        &self.vecs[name]
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Gradients {
    pub mats: BTreeMap<String, Array2<f64>>,
    pub vecs: BTreeMap<String, Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Gradients {
        Gradients {
            mats: params
                .mats
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
            vecs: params
                .vecs
                .iter()
                .map(|(k, v)| (k.clone(), Array1::zeros(v.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (k, v) in &other.mats {
            *self.mats.get_mut(k).expect("gradient shape mismatch") += v;
        }
        for (k, v) in &other.vecs {
            *self.vecs.get_mut(k).expect("gradient shape mismatch") += v;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.mats.values_mut() {
            *v *= factor;
        }
        for v in self.vecs.values_mut() {
            *v *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for v in self.mats.values() {
            sq += v.iter().map(|x| x * x).sum::<f64>();
        }
        for v in self.vecs.values() {
            sq += v.iter().map(|x| x * x).sum::<f64>();
        }
        sq.sqrt()
    }
}

struct LnTape {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnTape) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut out = Array2::zeros((t, d));
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        for j in 0..d {
            let xh = (x[[i, j]] - mean) * istd;
            xhat[[i, j]] = xh;
            out[[i, j]] = xh * gain[j] + bias[j];
        }
    }
    (out, LnTape { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    tape: &LnTape,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    let mut dgain = Array1::zeros(d);
    let mut dbias = Array1::zeros(d);
    for i in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * tape.xhat[[i, j]];
            dgain[j] += dy[[i, j]] * tape.xhat[[i, j]];
            dbias[j] += dy[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * gain[j];
            dx[[i, j]] =
                tape.inv_std[i] * (dxh - mean_dxhat - tape.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

struct BlockTape {
    ln1: LnTape,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Array2<f64>,
    av: Array2<f64>,
    ln2: LnTape,
    n2: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
    overridden: Option<usize>,
}

pub(crate) struct Tape {
    pub seq: Vec<u32>,
    blocks: Vec<BlockTape>,
    lnf: Option<LnTape>,
    nf: Array2<f64>,
    pub logits: Array2<f64>,
}

impl Tape {
    /// Post-GELU MLP activation (the down-projection input) at `row` of the
    /// given block.
    pub fn mlp_input(&self, block: usize, row: usize) -> Array1<f64> {
        self.blocks[block].h.row(row).to_owned()
    }
}

/// Replaces the MLP down-projection *output* at one position of one block
/// with an explicit vector.
pub(crate) struct MlpOverride<'a> {
    pub block: usize,
    pub row: usize,
    pub value: &'a Array1<f64>,
}

pub(crate) fn forward(
    cfg: &TinyLmConfig,
    params: &Params,
    seq: &[u32],
    over: Option<&MlpOverride<'_>>,
) -> Tape {
    let t = seq.len();
    assert!(t >= 1 && t <= cfg.context, "sequence length {t} out of range");
    let d = cfg.dim;
    let embed = params.mat("embed");
    let pos = params.mat("pos");
    let mut x = Array2::zeros((t, d));
    for (i, &tok) in seq.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = embed[[tok as usize, j]] + pos[[i, j]];
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let (n1, ln1) = layer_norm(
            &x,
            params.vec(&format!("blocks.{b}.ln1.gain")),
            params.vec(&format!("blocks.{b}.ln1.bias")),
        );
        let wq = params.mat(&format!("blocks.{b}.attn.wq"));
        let wk = params.mat(&format!("blocks.{b}.attn.wk"));
        let wv = params.mat(&format!("blocks.{b}.attn.wv"));
        let wo = params.mat(&format!("blocks.{b}.attn.wo"));
        let q = n1.dot(&wq.t());
        let k = n1.dot(&wk.t());
        let v = n1.dot(&wv.t());
        // Causal softmax over scaled scores.
        let mut att = Array2::zeros((t, t));
        for i in 0..t {
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = q.row(i).dot(&k.row(j)) * scale;
                att[[i, j]] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for j in 0..=i {
                let e = (att[[i, j]] - max).exp();
                att[[i, j]] = e;
                z += e;
            }
            for j in 0..=i {
                att[[i, j]] /= z;
            }
        }
        let av = att.dot(&v);
        let att_out = av.dot(&wo.t());
        x = &x + &att_out;

        let (n2, ln2) = layer_norm(
            &x,
            params.vec(&format!("blocks.{b}.ln2.gain")),
            params.vec(&format!("blocks.{b}.ln2.bias")),
        );
        let wu = params.mat(&format!("blocks.{b}.mlp.up_proj"));
        let wd = params.mat(&format!("blocks.{b}.mlp.down_proj"));
        let h_pre = n2.dot(&wu.t());
        let h = h_pre.mapv(gelu);
        let mut m = h.dot(&wd.t());
        let mut overridden = None;
        if let Some(o) = over {
            if o.block == b {
                assert!(o.row < t, "override row out of range");
                m.row_mut(o.row).assign(o.value);
                overridden = Some(o.row);
            }
        }
        x = &x + &m;

        blocks.push(BlockTape {
            ln1,
            n1,
            q,
            k,
            v,
            att,
            av,
            ln2,
            n2,
            h_pre,
            h,
            overridden,
        });
    }

    let (nf, lnf) = if cfg.final_ln {
        let (nf, lnf) = layer_norm(&x, params.vec("final_ln.gain"), params.vec("final_ln.bias"));
        (nf, Some(lnf))
    } else {
        (x, None)
    };
    let logits = nf.dot(&params.mat("unembed").t());
    Tape {
        seq: seq.to_vec(),
        blocks,
        lnf,
        nf,
        logits,
    }
}

/// NLL of predicting `seq[pos+1]` from position `pos`, for each scored
/// position, averaged; plus the matching d(loss)/d(logits).
pub(crate) fn loss_and_dlogits(tape: &Tape, scored: &[usize]) -> (f64, Array2<f64>) {
    assert!(!scored.is_empty());
    let (t, v) = tape.logits.dim();
    let mut dlogits = Array2::zeros((t, v));
    let mut loss = 0.0;
    let scale = 1.0 / scored.len() as f64;
    for &pos in scored {
        assert!(pos + 1 < tape.seq.len(), "scored position out of range");
        let target = tape.seq[pos + 1] as usize;
        let row = tape.logits.row(pos);
        let max = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + z.ln();
        loss += (log_z - row[target]) * scale;
        for j in 0..v {
            dlogits[[pos, j]] += scale * ((row[j] - max).exp() / z);
        }
        dlogits[[pos, target]] -= scale;
    }
    (loss, dlogits)
}

/// Per-token NLLs at every position (position `i` predicts `seq[i+1]`).
pub(crate) fn position_nlls(tape: &Tape) -> Vec<f64> {
    let t = tape.seq.len();
    let mut out = Vec::with_capacity(t - 1);
    for pos in 0..t - 1 {
        let target = tape.seq[pos + 1] as usize;
        let row = tape.logits.row(pos);
        let max = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        out.push(max + z.ln() - row[target]);
    }
    out
}

/// Backpropagates `dlogits` through the tape. When the forward pass carried
/// an MLP override, the returned vector is d(loss)/d(override value).
pub(crate) fn backward(
    cfg: &TinyLmConfig,
    params: &Params,
    tape: &Tape,
    dlogits: &Array2<f64>,
) -> (Gradients, Option<Array1<f64>>) {
    let t = tape.seq.len();
    let d = cfg.dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut grads = Gradients::zeros_like(params);
    let mut d_override = None;

    // logits = nf . unembedᵀ
    let unembed = params.mat("unembed");
    let d_nf = dlogits.dot(unembed);
    *grads.mats.get_mut("unembed").unwrap() += &dlogits.t().dot(&tape.nf);

    let mut dx = match &tape.lnf {
        Some(lnf) => {
            let (dx, dgain, dbias) = layer_norm_backward(&d_nf, lnf, params.vec("final_ln.gain"));
            *grads.vecs.get_mut("final_ln.gain").unwrap() += &dgain;
            *grads.vecs.get_mut("final_ln.bias").unwrap() += &dbias;
            dx
        }
        None => d_nf,
    };

    for b in (0..cfg.blocks).rev() {
        let bt = &tape.blocks[b];
        let wu = params.mat(&format!("blocks.{b}.mlp.up_proj"));
        let wd = params.mat(&format!("blocks.{b}.mlp.down_proj"));
        let wq = params.mat(&format!("blocks.{b}.attn.wq"));
        let wk = params.mat(&format!("blocks.{b}.attn.wk"));
        let wv = params.mat(&format!("blocks.{b}.attn.wv"));
        let wo = params.mat(&format!("blocks.{b}.attn.wo"));

        // x = x_mid + m
        let mut dm = dx.clone();
        if let Some(row) = bt.overridden {
            // The override is a free leaf: capture its gradient and cut the
            // flow into h and the down projection at that row.
            d_override = Some(dm.row(row).to_owned());
            dm.row_mut(row).fill(0.0);
        }
        // m = h . wdᵀ
        let dh = dm.dot(wd);
        *grads
            .mats
            .get_mut(&format!("blocks.{b}.mlp.down_proj"))
            .unwrap() += &dm.t().dot(&bt.h);
        // h = gelu(h_pre)
        let mut dh_pre = dh;
        for i in 0..t {
            for j in 0..dh_pre.ncols() {
                dh_pre[[i, j]] *= gelu_grad(bt.h_pre[[i, j]]);
            }
        }
        // h_pre = n2 . wuᵀ
        let dn2 = dh_pre.dot(wu);
        *grads
            .mats
            .get_mut(&format!("blocks.{b}.mlp.up_proj"))
            .unwrap() += &dh_pre.t().dot(&bt.n2);
        let (dx_mid_from_ln, dgain, dbias) =
            layer_norm_backward(&dn2, &bt.ln2, params.vec(&format!("blocks.{b}.ln2.gain")));
        *grads.vecs.get_mut(&format!("blocks.{b}.ln2.gain")).unwrap() += &dgain;
        *grads.vecs.get_mut(&format!("blocks.{b}.ln2.bias")).unwrap() += &dbias;
        // Residual: d(x_mid) = dx (through the skip) + LN path.
        let dx_mid = &dx + &dx_mid_from_ln;

        // x_mid = x_in + av . woᵀ
        let dav = dx_mid.dot(wo);
        *grads
            .mats
            .get_mut(&format!("blocks.{b}.attn.wo"))
            .unwrap() += &dx_mid.t().dot(&bt.av);
        // av = att . v
        let datt = dav.dot(&bt.v.t());
        let dv = bt.att.t().dot(&dav);
        // softmax rows (masked entries have att = 0, so their grad is 0)
        let mut dscores = Array2::zeros((t, t));
        for i in 0..t {
            let mut dot = 0.0;
            for j in 0..=i {
                dot += datt[[i, j]] * bt.att[[i, j]];
            }
            for j in 0..=i {
                dscores[[i, j]] = bt.att[[i, j]] * (datt[[i, j]] - dot);
            }
        }
        // scores = (q . kᵀ) * scale
        let dq = dscores.dot(&bt.k) * scale;
        let dk = dscores.t().dot(&bt.q) * scale;
        // q = n1 . wqᵀ, etc.
        let mut dn1 = dq.dot(wq);
        dn1 += &dk.dot(wk);
        dn1 += &dv.dot(wv);
        *grads
            .mats
            .get_mut(&format!("blocks.{b}.attn.wq"))
            .unwrap() += &dq.t().dot(&bt.n1);
        *grads
            .mats
            .get_mut(&format!("blocks.{b}.attn.wk"))
            .unwrap() += &dk.t().dot(&bt.n1);
        *grads
            .mats
            .get_mut(&format!("blocks.{b}.attn.wv"))
            .unwrap() += &dv.t().dot(&bt.n1);
        let (dx_in_from_ln, dgain, dbias) =
            layer_norm_backward(&dn1, &bt.ln1, params.vec(&format!("blocks.{b}.ln1.gain")));
        *grads.vecs.get_mut(&format!("blocks.{b}.ln1.gain")).unwrap() += &dgain;
        *grads.vecs.get_mut(&format!("blocks.{b}.ln1.bias")).unwrap() += &dbias;
        dx = &dx_mid + &dx_in_from_ln;
    }

    // x0 rows = embed[seq[i]] + pos[i]
    {
        let dembed = grads.mats.get_mut("embed").unwrap();
        for (i, &tok) in tape.seq.iter().enumerate() {
            for j in 0..d {
                dembed[[tok as usize, j]] += dx[[i, j]];
            }
        }
    }
    {
        let dpos = grads.mats.get_mut("pos").unwrap();
        for i in 0..t {
            for j in 0..d {
                dpos[[i, j]] += dx[[i, j]];
            }
        }
    }

    (grads, d_override)
}
