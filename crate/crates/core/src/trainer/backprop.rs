//! Batched forward and backward pass for answer-position cross-entropy.
//!
//! Mirrors `forward::layer_forward` (RMS norm, tanh-GELU, causal softmax)
//! but processes a whole batch of equal-length prompts with GEMMs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::forward::{gelu_tanh, GELU_C};
use crate::model::{ModelConfig, ModelWeights};

struct LayerCache {
    x_in: Array2<f32>,
    inv1: Vec<f64>,
    h1: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    /// (example, head, query, key) flattened.
    probs: Vec<f32>,
    z: Array2<f32>,
    x_mid: Array2<f32>,
    inv2: Vec<f64>,
    h2: Array2<f32>,
    u: Array2<f32>,
    /// Inner tanh of the GELU at `u`.
    th: Array2<f32>,
    g: Array2<f32>,
}

pub(crate) struct StepStats {
    pub loss_sum: f64,
    pub correct: usize,
}

fn norm_forward(x: &Array2<f32>, gain: ArrayView2<f32>, eps: f32) -> (Array2<f32>, Vec<f64>) {
    let gain = gain.row(0);
    let mut out = Array2::zeros(x.raw_dim());
    let mut invs = Vec::with_capacity(x.nrows());
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        let inv = crate::forward::rms_inverse(src, eps);
        for ((d, &v), &g) in dst.iter_mut().zip(src).zip(gain) {
            *d = (v as f64 * inv * g as f64) as f32;
        }
        invs.push(inv);
    }
    (out, invs)
}

/// Returns dx; accumulates the gain gradient.
fn norm_backward(
    x: &Array2<f32>,
    invs: &[f64],
    gain: &[f32],
    dy: &Array2<f32>,
    dgain: &mut [f32],
) -> Array2<f32> {
    let d = x.ncols();
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgain_acc = vec![0f64; d];
    for (r, ((xr, dyr), mut dxr)) in x
        .outer_iter()
        .zip(dy.outer_iter())
        .zip(dx.outer_iter_mut())
        .enumerate()
    {
        let inv = invs[r];
        let mut dot = 0f64;
        for i in 0..d {
            let xhat = xr[i] as f64 * inv;
            let dxhat = dyr[i] as f64 * gain[i] as f64;
            dgain_acc[i] += dyr[i] as f64 * xhat;
            dot += dxhat * xhat;
        }
        let mean = dot / d as f64;
        for i in 0..d {
            let xhat = xr[i] as f64 * inv;
            let dxhat = dyr[i] as f64 * gain[i] as f64;
            dxr[i] = (inv * (dxhat - xhat * mean)) as f32;
        }
    }
    for (g, a) in dgain.iter_mut().zip(dgain_acc) {
        *g += a as f32;
    }
    dx
}

fn gelu_grad(u: f32, t: f32) -> f32 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn attention_forward(
    cfg: &ModelConfig,
    n: usize,
    seq: usize,
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    routes: &[Route],
    layer: usize,
) -> (Vec<f32>, Array2<f32>) {
    let (heads, dh) = (cfg.n_heads, cfg.d_head);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0f32; n * heads * seq * seq];
    let mut z = Array2::zeros((n * seq, cfg.d_model));
    let mut row = vec![0f32; seq];
    for b in 0..n {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..seq {
                let qi = q.slice(s![b * seq + i, c0..c0 + dh]);
                let restricted = match routes[b] {
                    Route::Causal => false,
                    Route::LastFrom(w) => i + 1 < seq || layer < w,
                };
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    if restricted && j != 0 && j != i {
                        row[j] = f32::NEG_INFINITY;
                        continue;
                    }
                    let kj = k.slice(s![b * seq + j, c0..c0 + dh]);
                    let sc = qi.dot(&kj) * scale;
                    row[j] = sc;
                    max = max.max(sc);
                }
                let mut total = 0f64;
                for r in row.iter_mut().take(i + 1) {
                    *r = (*r - max).exp();
                    total += *r as f64;
                }
                let base = ((b * heads + h) * seq + i) * seq;
                let mut zi = z.slice_mut(s![b * seq + i, c0..c0 + dh]);
                for j in 0..=i {
                    let p = (row[j] as f64 / total) as f32;
                    probs[base + j] = p;
                    zi.scaled_add(p, &v.slice(s![b * seq + j, c0..c0 + dh]));
                }
            }
        }
    }
    (probs, z)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    cfg: &ModelConfig,
    n: usize,
    seq: usize,
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    probs: &[f32],
    dz: &Array2<f32>,
) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let (heads, dh) = (cfg.n_heads, cfg.d_head);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut dp = vec![0f32; seq];
    for b in 0..n {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..seq {
                let base = ((b * heads + h) * seq + i) * seq;
                let p = &probs[base..base + seq];
                let dzi = dz.slice(s![b * seq + i, c0..c0 + dh]);
                let mut dot = 0f32;
                for j in 0..=i {
                    let vj = v.slice(s![b * seq + j, c0..c0 + dh]);
                    dp[j] = dzi.dot(&vj);
                    dot += dp[j] * p[j];
                    dv.slice_mut(s![b * seq + j, c0..c0 + dh])
                        .scaled_add(p[j], &dzi);
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = k.slice(s![b * seq + j, c0..c0 + dh]);
                    dq.slice_mut(s![b * seq + i, c0..c0 + dh]).scaled_add(ds, &kj);
                    let qi = q.slice(s![b * seq + i, c0..c0 + dh]);
                    dk.slice_mut(s![b * seq + j, c0..c0 + dh]).scaled_add(ds, &qi);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Buffer with every entry zero (unlike `ModelWeights::zeros`, whose norm
/// gains are one).
pub(crate) fn gradient_buffer(cfg: &ModelConfig) -> ModelWeights {
    let mut g = ModelWeights::zeros(*cfg).expect("config already validated");
    for t in g.tensors_mut() {
        t.fill(0.0);
    }
    g
}

/// c += a^T b
fn acc_tn(c: &mut Array2<f32>, a: &Array2<f32>, b: &Array2<f32>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, c);
}

/// Attention routing of one training prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Route {
    Causal,
    /// Non-last tokens attend only to `<BOS>` and themselves; the last
    /// token does too in layers below the given one.
    LastFrom(usize),
}

/// Cross-entropy of the answer token at the last position, summed over
/// the batch; gradients (scaled by `scale`) are added into `grads`.
pub(crate) fn loss_and_grad(
    w: &ModelWeights,
    prompts: &[&[u32]],
    routes: &[Route],
    targets: &[u32],
    scale: f32,
    grads: &mut ModelWeights,
) -> StepStats {
    let cfg = &w.config;
    let n = prompts.len();
    let seq = prompts[0].len();
    let rows = n * seq;
    let d = cfg.d_model;
    debug_assert!(prompts.iter().all(|p| p.len() == seq));
    debug_assert_eq!(routes.len(), n);

    let mut x = Array2::<f32>::zeros((rows, d));
    for (b, p) in prompts.iter().enumerate() {
        for (t, &tok) in p.iter().enumerate() {
            let e = w.token_embedding.row(tok as usize);
            let pe = w.position_embedding.row(t);
            for ((dst, a), c) in x.row_mut(b * seq + t).iter_mut().zip(e).zip(pe) {
                *dst = a + c;
            }
        }
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (layer, lw) in w.layers.iter().enumerate() {
        let (h1, inv1) = norm_forward(&x, lw.attn_norm.view().insert_axis(Axis(0)), cfg.norm_eps);
        let q = h1.dot(&lw.wq);
        let k = h1.dot(&lw.wk);
        let v = h1.dot(&lw.wv);
        let (probs, z) = attention_forward(cfg, n, seq, &q, &k, &v, routes, layer);
        let x_mid = &x + &z.dot(&lw.wo);
        let (h2, inv2) = norm_forward(&x_mid, lw.mlp_norm.view().insert_axis(Axis(0)), cfg.norm_eps);
        let u = h2.dot(&lw.w_in);
        let th = u.mapv(gelu_tanh);
        let mut g = u.clone();
        g.zip_mut_with(&th, |x, &t| *x = 0.5 * *x * (1.0 + t));
        let x_out = &x_mid + &g.dot(&lw.w_out);
        caches.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            inv1,
            h1,
            q,
            k,
            v,
            probs,
            z,
            x_mid,
            inv2,
            h2,
            u,
            th,
            g,
        });
    }

    let last_rows: Vec<usize> = (0..n).map(|b| b * seq + seq - 1).collect();
    let xl = x.select(Axis(0), &last_rows);
    let (hf, invf) = norm_forward(&xl, w.final_norm.view().insert_axis(Axis(0)), cfg.norm_eps);
    let logits = hf.dot(&w.unembedding);

    let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
    let mut stats = StepStats {
        loss_sum: 0.0,
        correct: 0,
    };
    for (b, (row, mut drow)) in logits.outer_iter().zip(dlogits.outer_iter_mut()).enumerate() {
        let target = targets[b] as usize;
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let total: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + total.ln();
        stats.loss_sum += log_z - row[target] as f64;
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
            let p = (v as f64 - log_z).exp();
            drow[i] = (p as f32) * scale;
        }
        drow[target] -= scale;
        if best == target {
            stats.correct += 1;
        }
    }

    acc_tn(&mut grads.unembedding, &hf, &dlogits);
    let dhf = dlogits.dot(&w.unembedding.t());
    let dxl = norm_backward(
        &xl,
        &invf,
        w.final_norm.as_slice().unwrap(),
        &dhf,
        grads.final_norm.as_slice_mut().unwrap(),
    );
    let mut dx = Array2::<f32>::zeros((rows, d));
    for (b, &r) in last_rows.iter().enumerate() {
        dx.row_mut(r).assign(&dxl.row(b));
    }

    for (layer, cache) in caches.iter().enumerate().rev() {
        let lw = &w.layers[layer];
        let gl = &mut grads.layers[layer];

        // MLP
        acc_tn(&mut gl.w_out, &cache.g, &dx);
        let mut du = dx.dot(&lw.w_out.t());
        ndarray::Zip::from(&mut du)
            .and(&cache.u)
            .and(&cache.th)
            .for_each(|d, &u, &t| *d *= gelu_grad(u, t));
        acc_tn(&mut gl.w_in, &cache.h2, &du);
        let dh2 = du.dot(&lw.w_in.t());
        let dmid = norm_backward(
            &cache.x_mid,
            &cache.inv2,
            lw.mlp_norm.as_slice().unwrap(),
            &dh2,
            gl.mlp_norm.as_slice_mut().unwrap(),
        );
        dx += &dmid;

        // Attention
        acc_tn(&mut gl.wo, &cache.z, &dx);
        let dz = dx.dot(&lw.wo.t());
        let (dq, dk, dv) =
            attention_backward(cfg, n, seq, &cache.q, &cache.k, &cache.v, &cache.probs, &dz);
        acc_tn(&mut gl.wq, &cache.h1, &dq);
        acc_tn(&mut gl.wk, &cache.h1, &dk);
        acc_tn(&mut gl.wv, &cache.h1, &dv);
        let mut dh1 = dq.dot(&lw.wq.t());
        general_mat_mul(1.0, &dk, &lw.wk.t(), 1.0, &mut dh1);
        general_mat_mul(1.0, &dv, &lw.wv.t(), 1.0, &mut dh1);
        let din = norm_backward(
            &cache.x_in,
            &cache.inv1,
            lw.attn_norm.as_slice().unwrap(),
            &dh1,
            gl.attn_norm.as_slice_mut().unwrap(),
        );
        dx += &din;
    }

    for (b, p) in prompts.iter().enumerate() {
        for (t, &tok) in p.iter().enumerate() {
            let r = dx.row(b * seq + t);
            grads.token_embedding.row_mut(tok as usize).scaled_add(1.0, &r);
            grads.position_embedding.row_mut(t).scaled_add(1.0, &r);
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{forward, Capture, InterventionPlan};
    use crate::interventions::{peek_plan, PeekMode};
    use crate::util::rng_from_seed;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 13,
            max_seq: 6,
            norm_eps: 1e-5,
        }
    }

    fn weights() -> ModelWeights {
        let mut w = ModelWeights::init(cfg(), &mut rng_from_seed(21)).unwrap();
        // Larger, non-unit parameters so every gradient path is exercised.
        let mut rng = rng_from_seed(22);
        for t in w.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v * 4.0 + rand::Rng::random_range(&mut rng, -0.3..0.3);
            }
        }
        w
    }

    #[test]
    fn batched_logits_match_reference_forward() {
        let w = weights();
        let prompts: Vec<Vec<u32>> = vec![vec![0, 3, 7, 2, 5], vec![0, 1, 1, 12, 4]];
        let refs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
        let mut grads = gradient_buffer(&cfg());
        let targets = [3u32, 9];
        let stats = loss_and_grad(&w, &refs, &[Route::Causal; 2], &targets, 1.0, &mut grads);
        let mut want = 0.0;
        for (p, &t) in prompts.iter().zip(&targets) {
            let logits = forward(&w, p, &Default::default(), Capture::default())
                .unwrap()
                .logits;
            let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lz = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            want += lz - logits[t as usize] as f64;
        }
        assert!((stats.loss_sum - want).abs() < 1e-3 * want.abs().max(1.0), "{} vs {want}", stats.loss_sum);
    }

    #[test]
    fn routed_prompts_match_masked_reference_forward() {
        let w = weights();
        let prompt = vec![0u32, 3, 7, 2, 5];
        let loss_of = |logits: &ndarray::Array1<f32>| {
            let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() - logits[3] as f64
        };
        let mut losses = Vec::new();
        for from in 0..=2 {
            let mut grads = gradient_buffer(&cfg());
            let got = loss_and_grad(&w, &[&prompt], &[Route::LastFrom(from)], &[3], 1.0, &mut grads).loss_sum;
            let schedule: Vec<PeekMode> = (0..2)
                .map(|l| if l < from { PeekMode::LastSelfRestSelf } else { PeekMode::LastFullRestSelf })
                .collect();
            let plan = InterventionPlan {
                peek: Some(peek_plan(5, &schedule).unwrap()),
                ..Default::default()
            };
            let want = loss_of(&forward(&w, &prompt, &plan, Capture::default()).unwrap().logits);
            assert!((got - want).abs() < 1e-3 * want.abs().max(1.0), "from {from}: {got} vs {want}");
            losses.push(got);
        }
        let mut open = gradient_buffer(&cfg());
        let vanilla = loss_and_grad(&w, &[&prompt], &[Route::Causal], &[3], 1.0, &mut open).loss_sum;
        losses.push(vanilla);
        for (i, a) in losses.iter().enumerate() {
            for b in &losses[i + 1..] {
                assert!((a - b).abs() > 1e-6, "routes should change the loss: {losses:?}");
            }
        }
    }

    /// Central finite differences on a sample of coordinates of every tensor.
    #[test]
    fn gradients_match_finite_differences() {
        let w = weights();
        let prompts: Vec<Vec<u32>> = vec![vec![0, 3, 7, 2, 5], vec![0, 11, 4, 4, 6]];
        let refs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
        let targets = [3u32, 8];
        let peek = [Route::Causal, Route::LastFrom(1)];
        let mut grads = gradient_buffer(&cfg());
        loss_and_grad(&w, &refs, &peek, &targets, 1.0, &mut grads);

        let loss = |w: &ModelWeights| {
            let mut scratch = gradient_buffer(&cfg());
            loss_and_grad(w, &refs, &peek, &targets, 1.0, &mut scratch).loss_sum
        };
        let names: Vec<String> = w.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f32>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        let mut checked = 0;
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            for idx in (0..len).step_by((len / 5).max(1)) {
                let g = analytic[ti][idx] as f64;
                let eps = 3e-3f32;
                let mut plus = w.clone();
                plus.tensors_mut()[ti][idx] += eps;
                let mut minus = w.clone();
                minus.tensors_mut()[ti][idx] -= eps;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
                let tol = 2e-2 * numeric.abs().max(g.abs()) + 2e-3;
                assert!(
                    (numeric - g).abs() <= tol,
                    "{name}[{idx}]: analytic {g} numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
