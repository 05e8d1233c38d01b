//! Deterministic AdamW trainer for the seed model.
//!
//! The loss is cross-entropy on the answer token at the final position.
//! Every batch is split into a fixed number of shards whose gradients are
//! summed in shard order, so the result does not depend on how many worker
//! threads run the shards.

mod backprop;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::predict;
use crate::model::{ModelConfig, ModelWeights};
use crate::tasks::{sample_instance, TaskInstance, Template, Vocab};
use crate::util::{derive_seed, rng_from_seed};
use backprop::Route;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Template name to sampling weight.
    pub mixture: BTreeMap<String, f64>,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Gradient shards per batch; fixed so results ignore the thread count.
    pub shards: usize,
    /// Fraction of training prompts run with every non-last token
    /// attending only to `<BOS>` and itself.
    pub self_peek_fraction: f64,
    /// On those prompts the last token also attends only to `<BOS>` and
    /// itself in the first `w` layers, `w` uniform in `0..=late_transfer_max`.
    pub late_transfer_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mixture = [("A+B", 0.3), ("A-B", 0.2), ("A+B+C", 0.3), ("A+B-C", 0.2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            steps: 16_000,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 300,
            min_lr_ratio: 0.05,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            mixture,
            eval_every: 500,
            eval_samples: 200,
            shards: 4,
            self_peek_fraction: 0.5,
            late_transfer_max: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.shards == 0 || self.eval_every == 0 {
            return bad("batch_size, shards and eval_every must be positive".into());
        }
        if self.mixture.is_empty() || self.mixture.values().any(|&w| w.is_nan() || w < 0.0) {
            return bad("mixture needs non-negative weights".into());
        }
        let total: f64 = self.mixture.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights sum to {total}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.self_peek_fraction) {
            return bad("self_peek_fraction must lie within [0, 1]".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("lr must be positive and min_lr_ratio within [0, 1]".into());
        }
        Ok(())
    }

    /// Warmup then cosine decay to `lr * min_lr_ratio`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One record per evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub accuracy: BTreeMap<String, f64>,
}

/// Anything that maps a prompt to a predicted token id.
pub trait Predictor {
    fn predict_tokens(&self, tokens: &[u32]) -> Result<u32>;
}

impl Predictor for ModelWeights {
    fn predict_tokens(&self, tokens: &[u32]) -> Result<u32> {
        predict(self, tokens, &Default::default())
    }
}

/// Fraction of `instances` answered correctly.
pub fn accuracy_on<P: Predictor + Sync>(p: &P, instances: &[TaskInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Argument("accuracy needs at least one instance".into()));
    }
    let hits = instances
        .par_iter()
        .map(|inst| Ok(usize::from(p.predict_tokens(&inst.tokens)? == inst.answer_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / instances.len() as f64)
}

/// Accuracy on `n` fresh samples of `template` drawn from `seed`.
pub fn raw_accuracy<P: Predictor + Sync>(
    p: &P,
    template: &Template,
    vocab: &Vocab,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let instances: Vec<_> = (0..n).map(|_| sample_instance(template, vocab, &mut rng)).collect();
    accuracy_on(p, &instances)
}

struct Adam {
    m: ModelWeights,
    v: ModelWeights,
    decay: Vec<bool>,
}

impl Adam {
    fn new(weights: &ModelWeights) -> Result<Self> {
        let decay = weights
            .tensors()
            .iter()
            .map(|(name, _)| !name.contains("norm"))
            .collect();
        Ok(Self {
            m: backprop::gradient_buffer(&weights.config),
            v: backprop::gradient_buffer(&weights.config),
            decay,
        })
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut ModelWeights, grads: &ModelWeights, t: usize, lr: f64) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let grads: Vec<&[f32]> = grads.tensors().into_iter().map(|(_, g)| g).collect();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, g), m), v), &decay) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(ms)
            .zip(vs)
            .zip(&self.decay)
        {
            let wd = if decay { cfg.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps) + wd * p[i] as f64;
                p[i] = (p[i] as f64 - lr * update) as f32;
            }
        }
    }
}

fn global_norm(grads: &ModelWeights) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Shard gradients: prompts grouped by length so each group is one batched pass.
fn shard_gradient(
    weights: &ModelWeights,
    batch: &[(TaskInstance, Route)],
    scale: f32,
) -> Result<(ModelWeights, f64)> {
    let mut grads = backprop::gradient_buffer(&weights.config);
    type Group<'a> = (Vec<&'a [u32]>, Vec<Route>, Vec<u32>);
    let mut by_len: BTreeMap<usize, Group> = BTreeMap::new();
    for (inst, route) in batch {
        let e = by_len.entry(inst.tokens.len()).or_default();
        e.0.push(&inst.tokens);
        e.1.push(*route);
        e.2.push(inst.answer_id);
    }
    let mut loss = 0.0;
    for (prompts, routes, targets) in by_len.values() {
        loss += backprop::loss_and_grad(weights, prompts, routes, targets, scale, &mut grads).loss_sum;
    }
    Ok((grads, loss))
}

/// Train from scratch. `on_eval` sees every evaluation record together with
/// the current weights (for logging and checkpointing).
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocab,
    on_eval: &mut dyn FnMut(&EvalRecord, &ModelWeights) -> Result<()>,
) -> Result<(ModelWeights, Vec<EvalRecord>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match vocabulary of {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let templates: Vec<(Template, f64)> = cfg
        .mixture
        .iter()
        .map(|(name, &w)| Ok((Template::builtin(name, vocab)?, w)))
        .collect::<Result<_>>()?;
    if let Some((t, _)) = templates.iter().find(|(t, _)| t.len() > model_cfg.max_seq) {
        return Err(Error::Config(format!("template {} exceeds max_seq", t.name)));
    }

    let mut weights = ModelWeights::init(*model_cfg, &mut rng_from_seed(derive_seed(cfg.seed, "init", &[])))?;
    let mut adam = Adam::new(&weights)?;
    let mut log = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_steps = 0usize;
    let scale = 1.0 / cfg.batch_size as f32;

    for step in 0..cfg.steps {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "batch", &[step as u64]));
        let batch: Vec<(TaskInstance, Route)> = (0..cfg.batch_size)
            .map(|_| {
                let template = pick(&templates, &mut rng);
                let inst = sample_instance(template, vocab, &mut rng);
                let routed = rand::Rng::random::<f64>(&mut rng) < cfg.self_peek_fraction;
                let from = rand::Rng::random_range(&mut rng, 0..=cfg.late_transfer_max);
                (inst, if routed { Route::LastFrom(from) } else { Route::Causal })
            })
            .collect();
        let chunk = cfg.batch_size.div_ceil(cfg.shards);
        let parts = batch
            .par_chunks(chunk)
            .map(|c| shard_gradient(&weights, c, scale))
            .collect::<Result<Vec<_>>>()?;
        let mut parts = parts.into_iter();
        let (mut grads, mut loss) = parts.next().expect("batch is non-empty");
        for (g, l) in parts {
            for (dst, src) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                for (d, s) in dst.iter_mut().zip(src.1) {
                    *d += s;
                }
            }
            loss += l;
        }
        let mean_loss = loss / cfg.batch_size as f64;
        let norm = global_norm(&grads);
        if !mean_loss.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence { step, loss: mean_loss });
        }
        if norm > cfg.grad_clip {
            let c = (cfg.grad_clip / norm) as f32;
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= c);
            }
        }
        adam.step(cfg, &mut weights, &grads, step + 1, cfg.lr_at(step));
        loss_acc += mean_loss;
        loss_steps += 1;

        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_every == 0 || last {
            let mut accuracy = BTreeMap::new();
            for (i, (template, _)) in templates.iter().enumerate() {
                let seed = derive_seed(cfg.seed, "eval", &[i as u64]);
                let acc = raw_accuracy(&weights, template, vocab, cfg.eval_samples, seed)?;
                accuracy.insert(template.name.clone(), acc);
            }
            let record = EvalRecord {
                step: step + 1,
                loss: loss_acc / loss_steps as f64,
                accuracy,
            };
            loss_acc = 0.0;
            loss_steps = 0;
            on_eval(&record, &weights)?;
            log.push(record);
        }
    }
    Ok((weights, log))
}

fn pick<'a>(templates: &'a [(Template, f64)], rng: &mut crate::util::Rng) -> &'a Template {
    let r: f64 = rand::Rng::random(rng);
    let mut acc = 0.0;
    for (t, w) in templates {
        acc += w;
        if r < acc {
            return t;
        }
    }
    &templates.last().expect("mixture is non-empty").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Op;

    fn tiny(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: vocab.len(),
            max_seq: 12,
            norm_eps: 1e-5,
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 8,
            warmup_steps: 2,
            eval_every: 3,
            eval_samples: 10,
            shards: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig { steps: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c.steps = 5;
        c.mixture.insert("A+B".into(), 0.9);
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig::default();
        assert!(c.lr_at(0) < c.lr_at(c.warmup_steps - 1));
        assert!((c.lr_at(c.warmup_steps) - c.lr).abs() < 1e-12);
        assert!((c.lr_at(c.steps - 1) - c.lr * c.min_lr_ratio).abs() < 1e-6);
    }

    struct Oracle(Template, Vocab);

    impl Predictor for Oracle {
        fn predict_tokens(&self, tokens: &[u32]) -> Result<u32> {
            let operands: Vec<u32> = self
                .0
                .operand_positions()
                .iter()
                .map(|&p| self.1.value_of(tokens[p]).unwrap())
                .collect();
            Ok(self.0.instance(&operands, &self.1).unwrap().answer_id)
        }
    }

    #[test]
    fn perfect_oracle_scores_one_and_untrained_is_near_chance() {
        let v = Vocab::build();
        let t = Template::two_operand(Op::Add, &v);
        let oracle = Oracle(t.clone(), v.clone());
        assert_eq!(raw_accuracy(&oracle, &t, &v, 50, 1).unwrap(), 1.0);
        let w = ModelWeights::init(tiny(&v), &mut rng_from_seed(3)).unwrap();
        assert!(raw_accuracy(&w, &t, &v, 200, 1).unwrap() < 0.05);
    }

    #[test]
    fn training_is_deterministic_and_thread_count_independent() {
        let v = Vocab::build();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(&tiny(&v), &quick(), &v, &mut |_, _| Ok(())).unwrap())
        };
        let (a, log_a) = run(1);
        let (b, log_b) = run(3);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 2);
        assert_eq!(log_a[1].step, 6);
    }

    #[test]
    fn loss_decreases_on_a_fixed_toy_problem() {
        let v = Vocab::build();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 5,
            eval_every: 20,
            eval_samples: 10,
            mixture: [("A+B".to_string(), 1.0)].into_iter().collect(),
            ..Default::default()
        };
        let (_, log) = train(&tiny(&v), &cfg, &v, &mut |_, _| Ok(())).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss);
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let v = Vocab::build();
        let mut m = tiny(&v);
        m.vocab_size = 50;
        assert!(matches!(
            train(&m, &quick(), &v, &mut |_, _| Ok(())),
            Err(Error::Config(_))
        ));
    }
}
