//! Single-prompt forward pass with residual capture, attention peeking,
//! head masking and residual replacement.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::PeekPlan;
use crate::model::{HeadId, ModelWeights};

/// Pre-softmax score for masked keys. Finite so a fully masked row could
/// never produce NaN; the BOS/self rule means it never has to.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadMode {
    /// The last query of this head may only attend to `<BOS>` and itself.
    DisabledCrossToken,
    /// The head's output is zeroed at every position.
    FullyDisabled,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionPlan {
    /// layer -> (position -> vector): replaces the *input* residual of that
    /// layer. Layer `n_layers` replaces the input of the final norm.
    pub residual_override: BTreeMap<usize, BTreeMap<usize, Vec<f32>>>,
    pub peek: Option<PeekPlan>,
    pub head_mask: BTreeMap<HeadId, HeadMode>,
}

impl InterventionPlan {
    /// Override every position of `layer` with the rows of `values`.
    pub fn override_layer(&mut self, layer: usize, values: &Array2<f32>) {
        let rows = values
            .outer_iter()
            .enumerate()
            .map(|(t, row)| (t, row.to_vec()))
            .collect();
        self.residual_override.insert(layer, rows);
    }

    pub fn validate(&self, weights: &ModelWeights, seq_len: usize) -> Result<()> {
        let cfg = &weights.config;
        for (&layer, rows) in &self.residual_override {
            if layer > cfg.n_layers {
                return Err(Error::Argument(format!(
                    "override layer {layer} exceeds n_layers {}",
                    cfg.n_layers
                )));
            }
            for (&pos, v) in rows {
                if pos >= seq_len {
                    return Err(Error::Argument(format!(
                        "override position {pos} outside sequence of length {seq_len}"
                    )));
                }
                if v.len() != cfg.d_model {
                    return Err(Error::Config(format!(
                        "override vector has {} entries, d_model is {}",
                        v.len(),
                        cfg.d_model
                    )));
                }
            }
        }
        if let Some(peek) = &self.peek {
            if peek.seq_len() != seq_len {
                return Err(Error::Argument(format!(
                    "peek plan built for {} positions, prompt has {seq_len}",
                    peek.seq_len()
                )));
            }
            if peek.n_layers() > cfg.n_layers {
                return Err(Error::Argument(format!(
                    "peek plan covers {} layers, model has {}",
                    peek.n_layers(),
                    cfg.n_layers
                )));
            }
            peek.validate()?;
        }
        for h in self.head_mask.keys() {
            if h.layer >= cfg.n_layers || h.head >= cfg.n_heads {
                return Err(Error::Argument(format!("head {h} does not exist")));
            }
        }
        Ok(())
    }

    /// Highest layer whose override covers every position; layers below it
    /// cannot influence the output and are skipped.
    fn start_layer(&self, seq_len: usize) -> usize {
        self.residual_override
            .iter()
            .rev()
            .find(|(_, rows)| (0..seq_len).all(|t| rows.contains_key(&t)))
            .map(|(&l, _)| l)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub residuals: bool,
    pub attention: bool,
    /// Per-head output-projected contribution at the last position.
    pub head_contributions: bool,
}

impl Capture {
    pub fn all() -> Self {
        Self {
            residuals: true,
            attention: true,
            head_contributions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `residuals[l]` is x^(l), the input to layer `l` (index 0 holds the
    /// embeddings, index `n_layers` the final residual). `None` when not
    /// captured or when the layer was skipped by an override.
    pub residuals: Vec<Option<Array2<f32>>>,
    /// Per layer, per head `T x T` attention weights.
    pub attention: Vec<Option<Vec<Array2<f32>>>>,
    /// Per layer, `n_heads x d_model` contributions at the last position.
    pub head_contributions: Vec<Option<Array2<f32>>>,
    pub logits: Array1<f32>,
    pub first_layer: usize,
}

impl ForwardTrace {
    pub fn residual(&self, layer: usize) -> Option<&Array2<f32>> {
        self.residuals.get(layer)?.as_ref()
    }
}

fn check_tokens(weights: &ModelWeights, tokens: &[u32]) -> Result<()> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(Error::Argument("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Argument(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Argument(format!(
            "token id {t} outside vocab of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// x^(0): token plus position embedding.
pub fn embed(weights: &ModelWeights, tokens: &[u32]) -> Array2<f32> {
    let d = weights.config.d_model;
    let mut x = Array2::zeros((tokens.len(), d));
    for (t, &tok) in tokens.iter().enumerate() {
        let e = weights.token_embedding.row(tok as usize);
        let p = weights.position_embedding.row(t);
        for ((dst, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
            *dst = a + b;
        }
    }
    x
}

pub(crate) fn rms_norm(x: ArrayView2<f32>, gain: ArrayView1<f32>, eps: f32) -> Array2<f32> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        let inv = rms_inverse(src, eps);
        for ((d, &v), &g) in dst.iter_mut().zip(src).zip(gain) {
            *d = (v as f64 * inv * g as f64) as f32;
        }
    }
    out
}

pub(crate) fn rms_inverse(row: ArrayView1<f32>, eps: f32) -> f64 {
    let ss: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
    1.0 / (ss / row.len() as f64 + eps as f64).sqrt()
}

pub(crate) const GELU_C: f32 = 0.797_884_6;

/// tanh through a single `exp`; saturates cleanly at ±1.
pub(crate) fn fast_tanh(x: f32) -> f32 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Inner tanh of the tanh-approximate GELU.
pub(crate) fn gelu_tanh(u: f32) -> f32 {
    fast_tanh(GELU_C * (u + 0.044715 * u * u * u))
}

pub(crate) fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + gelu_tanh(u))
}

/// Final norm then unembedding of one residual vector.
pub fn final_logits(weights: &ModelWeights, x: ArrayView1<f32>) -> Array1<f32> {
    let row = x.insert_axis(Axis(0));
    let h = rms_norm(row, weights.final_norm.view(), weights.config.norm_eps);
    h.row(0).dot(&weights.unembedding)
}

/// Argmax with ties going to the lowest id.
pub fn argmax(logits: ArrayView1<f32>) -> Result<u32> {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Numeric {
                layer: usize::MAX,
                stage: "logits",
            });
        }
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

struct Run {
    x: Array2<f32>,
    trace: ForwardTrace,
}

fn run(
    weights: &ModelWeights,
    tokens: &[u32],
    plan: &InterventionPlan,
    capture: Capture,
    stop: usize,
) -> Result<Run> {
    check_tokens(weights, tokens)?;
    plan.validate(weights, tokens.len())?;
    let cfg = &weights.config;
    let seq_len = tokens.len();
    let first = match plan.start_layer(seq_len) {
        start if start <= stop => start,
        _ => 0,
    };
    let mut x = if first == 0 {
        embed(weights, tokens)
    } else {
        Array2::zeros((seq_len, cfg.d_model))
    };

    let mut trace = ForwardTrace {
        residuals: vec![None; cfg.n_layers + 1],
        attention: vec![None; cfg.n_layers],
        head_contributions: vec![None; cfg.n_layers],
        logits: Array1::zeros(0),
        first_layer: first,
    };

    for layer in first..=stop {
        if let Some(rows) = plan.residual_override.get(&layer) {
            for (&pos, v) in rows {
                x.row_mut(pos)
                    .iter_mut()
                    .zip(v)
                    .for_each(|(dst, &src)| *dst = src);
            }
        }
        if capture.residuals {
            trace.residuals[layer] = Some(x.clone());
        }
        if layer == stop {
            break;
        }
        let out = layer_forward(weights, layer, &x, plan, capture)?;
        x = out.x;
        trace.attention[layer] = out.attention;
        trace.head_contributions[layer] = out.head_contributions;
    }
    Ok(Run { x, trace })
}

struct LayerOut {
    x: Array2<f32>,
    attention: Option<Vec<Array2<f32>>>,
    head_contributions: Option<Array2<f32>>,
}

fn layer_forward(
    weights: &ModelWeights,
    layer: usize,
    x: &Array2<f32>,
    plan: &InterventionPlan,
    capture: Capture,
) -> Result<LayerOut> {
    let cfg = &weights.config;
    let lw = &weights.layers[layer];
    let seq_len = x.nrows();
    let last = seq_len - 1;
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    let h = rms_norm(x.view(), lw.attn_norm.view(), cfg.norm_eps);
    let q = h.dot(&lw.wq);
    let k = h.dot(&lw.wk);
    let v = h.dot(&lw.wv);

    let mut z = Array2::<f32>::zeros((seq_len, cfg.d_model));
    let mut patterns = capture.attention.then(Vec::new);
    let mut allowed = vec![false; seq_len];
    let mut weights_row = vec![0f64; seq_len];
    for head in 0..cfg.n_heads {
        let cols = head * dh..(head + 1) * dh;
        let mode = plan.head_mask.get(&HeadId::new(layer, head)).copied();
        let mut pattern = Array2::<f32>::zeros((seq_len, seq_len));
        for i in 0..seq_len {
            allowed.iter_mut().for_each(|a| *a = false);
            match plan.peek.as_ref().and_then(|p| p.keys(layer, i)) {
                Some(keys) => keys.iter().for_each(|&j| allowed[j] = true),
                None => allowed[..=i].iter_mut().for_each(|a| *a = true),
            }
            if mode == Some(HeadMode::DisabledCrossToken) && i == last {
                for (j, a) in allowed.iter_mut().enumerate() {
                    if j != 0 && j != i {
                        *a = false;
                    }
                }
            }
            let qi = q.slice(s![i, cols.clone()]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..seq_len {
                let score = if allowed[j] {
                    let kj = k.slice(s![j, cols.clone()]);
                    qi.iter()
                        .zip(kj)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        * scale
                } else {
                    MASKED_SCORE
                };
                weights_row[j] = score;
                max = max.max(score);
            }
            let mut total = 0.0;
            for j in 0..seq_len {
                let e = if allowed[j] {
                    (weights_row[j] - max).exp()
                } else {
                    0.0
                };
                weights_row[j] = e;
                total += e;
            }
            for w in weights_row.iter_mut() {
                *w /= total;
            }
            if mode != Some(HeadMode::FullyDisabled) {
                let mut acc = vec![0f64; dh];
                for (j, &p) in weights_row.iter().enumerate().take(seq_len) {
                    if p == 0.0 {
                        continue;
                    }
                    for (a, &vv) in acc.iter_mut().zip(v.slice(s![j, cols.clone()])) {
                        *a += p * vv as f64;
                    }
                }
                for (dst, a) in z.slice_mut(s![i, cols.clone()]).iter_mut().zip(acc) {
                    *dst = a as f32;
                }
            }
            for (dst, &w) in pattern.row_mut(i).iter_mut().zip(&weights_row) {
                *dst = w as f32;
            }
        }
        if let Some(p) = patterns.as_mut() {
            p.push(pattern);
        }
    }

    let head_contributions = capture.head_contributions.then(|| {
        let mut out = Array2::<f32>::zeros((cfg.n_heads, cfg.d_model));
        for head in 0..cfg.n_heads {
            let rows = head * dh..(head + 1) * dh;
            let zh = z.slice(s![last, rows.clone()]);
            let contrib = zh.dot(&lw.wo.slice(s![rows, ..]));
            out.row_mut(head).assign(&contrib);
        }
        out
    });

    let mut x1 = x + &z.dot(&lw.wo);
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer,
            stage: "attention",
        });
    }
    let h2 = rms_norm(x1.view(), lw.mlp_norm.view(), cfg.norm_eps);
    let mut u = h2.dot(&lw.w_in);
    u.mapv_inplace(gelu);
    x1 += &u.dot(&lw.w_out);
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { layer, stage: "mlp" });
    }
    Ok(LayerOut {
        x: x1,
        attention: patterns,
        head_contributions,
    })
}

pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    plan: &InterventionPlan,
    capture: Capture,
) -> Result<ForwardTrace> {
    let n_layers = weights.config.n_layers;
    let Run { x, mut trace } = run(weights, tokens, plan, capture, n_layers)?;
    trace.logits = final_logits(weights, x.row(tokens.len() - 1));
    if trace.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: n_layers,
            stage: "logits",
        });
    }
    Ok(trace)
}

pub fn predict(weights: &ModelWeights, tokens: &[u32], plan: &InterventionPlan) -> Result<u32> {
    let trace = forward(weights, tokens, plan, Capture::default())?;
    argmax(trace.logits.view())
}

/// x^(layer) for every position, running only layers `0..layer`.
pub fn residual_at(
    weights: &ModelWeights,
    tokens: &[u32],
    plan: &InterventionPlan,
    layer: usize,
) -> Result<Array2<f32>> {
    if layer > weights.config.n_layers {
        return Err(Error::Argument(format!(
            "layer {layer} exceeds n_layers {}",
            weights.config.n_layers
        )));
    }
    Ok(run(weights, tokens, plan, Capture::default(), layer)?.x)
}

/// x^(0) ..= x^(upto) from one pass.
pub fn residual_stack(
    weights: &ModelWeights,
    tokens: &[u32],
    plan: &InterventionPlan,
    upto: usize,
) -> Result<Vec<Array2<f32>>> {
    if upto > weights.config.n_layers {
        return Err(Error::Argument(format!(
            "layer {upto} exceeds n_layers {}",
            weights.config.n_layers
        )));
    }
    let capture = Capture {
        residuals: true,
        ..Capture::default()
    };
    let run = run(weights, tokens, plan, capture, upto)?;
    run.trace
        .residuals
        .into_iter()
        .take(upto + 1)
        .enumerate()
        .map(|(l, r)| r.ok_or_else(|| Error::Argument(format!("layer {l} was skipped"))))
        .collect()
}
