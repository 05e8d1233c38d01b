//! Follow-up analyses: layer ablation of last-token attention, greedy head
//! pruning, logit lens and mean attention export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::{
    af1_evaluate, check_dataset, FaithfulnessReport, PromptOutcome, SubgraphConfig,
};
use crate::error::{Error, Result};
use crate::forward::{final_logits, forward, predict, Capture, HeadMode, InterventionPlan};
use crate::interventions::{CamaCache, PeekPlan};
use crate::model::{HeadId, ModelWeights};
use crate::tasks::{Dataset, TaskInstance, Template};

/// Full forward pass in which the last token of `layer` may attend only to
/// `<BOS>` and itself.
pub fn ablate_layer_last_token(
    weights: &ModelWeights,
    template: &Template,
    layer: usize,
    dataset: &Dataset,
) -> Result<FaithfulnessReport> {
    check_dataset(weights, template, dataset)?;
    let n = weights.config.n_layers;
    if layer >= n {
        return Err(Error::Argument(format!("layer {layer} outside 0..{n}")));
    }
    let seq = template.len();
    let mut peek = PeekPlan::causal(seq, n);
    let rows = (0..seq)
        .map(|t| if t + 1 == seq { vec![0, t] } else { (0..=t).collect() })
        .collect();
    peek.set_rows(layer, rows)?;
    let plan = InterventionPlan {
        peek: Some(peek),
        ..Default::default()
    };
    let records = dataset
        .instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            let prediction = predict(weights, &inst.tokens, &plan)?;
            Ok(PromptOutcome {
                index,
                prediction,
                correct: prediction == inst.answer_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaithfulnessReport::from_records(
        records,
        format!("ablate-layer-{layer}"),
        dataset.content_hash(),
    ))
}

/// How pruning scores a set of removed heads.
#[derive(Debug, Clone)]
pub enum PruneMode<'a> {
    /// Faithfulness of an AF1 subgraph; removal disables last-token
    /// cross-token attention.
    Af1 {
        config: SubgraphConfig,
        cache: Option<&'a CamaCache>,
    },
    /// Accuracy of the full model with the given removal mode.
    FullModel { head_mode: HeadMode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub removed: HeadId,
    /// Score after this removal (the best over `candidates`).
    pub accuracy: f64,
    /// Every candidate evaluated at this step, in head order.
    pub candidates: Vec<(HeadId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    /// "faithfulness" (AF1 mode) or "accuracy" (full-model mode).
    pub metric: String,
    pub initial: Vec<HeadId>,
    pub initial_accuracy: f64,
    pub steps: Vec<PruneStep>,
    pub dataset_hash: String,
}

impl PruneTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,removed,remaining,accuracy\n");
        writeln!(out, "0,,{},{:.6}", self.initial.len(), self.initial_accuracy).unwrap();
        for (i, s) in self.steps.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{:.6}",
                i + 1,
                s.removed,
                self.initial.len() - i - 1,
                s.accuracy
            )
            .unwrap();
        }
        out
    }
}

fn score_mask(
    weights: &ModelWeights,
    template: &Template,
    mode: &PruneMode,
    dataset: &Dataset,
    removed: &[HeadId],
) -> Result<f64> {
    let mut correct = 0usize;
    match mode {
        PruneMode::Af1 { config, cache } => {
            let mut cfg = config.clone();
            for h in removed {
                cfg.head_mask.insert(*h, HeadMode::DisabledCrossToken);
            }
            for inst in &dataset.instances {
                correct += usize::from(af1_evaluate(weights, template, &cfg, &inst.tokens, *cache)? == inst.answer_id);
            }
        }
        PruneMode::FullModel { head_mode } => {
            let plan = InterventionPlan {
                head_mask: removed.iter().map(|h| (*h, *head_mode)).collect(),
                ..Default::default()
            };
            for inst in &dataset.instances {
                correct += usize::from(predict(weights, &inst.tokens, &plan)? == inst.answer_id);
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Remove heads one at a time, always the one whose removal keeps the score
/// highest (ties go to the lower layer, then the lower head), until every
/// candidate head is gone.
pub fn greedy_head_prune(
    weights: &ModelWeights,
    template: &Template,
    mode: &PruneMode,
    candidate_layers: &[usize],
    dataset: &Dataset,
) -> Result<PruneTrace> {
    check_dataset(weights, template, dataset)?;
    let cfg = &weights.config;
    if candidate_layers.is_empty() {
        return Err(Error::Argument("no candidate layers".into()));
    }
    if let Some(l) = candidate_layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::Argument(format!("candidate layer {l} outside 0..{}", cfg.n_layers)));
    }
    let mut remaining: Vec<HeadId> = candidate_layers
        .iter()
        .flat_map(|&l| (0..cfg.n_heads).map(move |h| HeadId::new(l, h)))
        .collect();
    remaining.sort_unstable();
    remaining.dedup();
    let initial = remaining.clone();
    let mut removed = Vec::new();
    let initial_accuracy = score_mask(weights, template, mode, dataset, &removed)?;
    let mut steps = Vec::new();
    while !remaining.is_empty() {
        let candidates = remaining
            .par_iter()
            .map(|&h| {
                let mut trial = removed.clone();
                trial.push(h);
                Ok((h, score_mask(weights, template, mode, dataset, &trial)?))
            })
            .collect::<Result<Vec<_>>>()?;
        // `remaining` is sorted, so the first maximum is the lowest head id.
        let &(best, accuracy) = candidates
            .iter()
            .fold(None, |acc: Option<&(HeadId, f64)>, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            })
            .expect("non-empty");
        remaining.retain(|&h| h != best);
        removed.push(best);
        steps.push(PruneStep {
            removed: best,
            accuracy,
            candidates,
        });
    }
    Ok(PruneTrace {
        metric: match mode {
            PruneMode::Af1 { .. } => "faithfulness",
            PruneMode::FullModel { .. } => "accuracy",
        }
        .into(),
        initial,
        initial_accuracy,
        steps,
        dataset_hash: dataset.content_hash(),
    })
}

/// Whether head contributions pass through the final norm before
/// unembedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LensNorm {
    #[default]
    FinalNorm,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensLayer {
    pub layer: usize,
    /// Top-k accuracy of the residual after this layer's MLP.
    pub residual: f64,
    /// Top-k accuracy of each head's projected output.
    pub heads: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    pub k: usize,
    pub norm: LensNorm,
    pub n_eval: usize,
    pub layers: Vec<LensLayer>,
    pub dataset_hash: String,
}

impl LensReport {
    pub fn to_csv(&self) -> String {
        let n_heads = self.layers.first().map(|l| l.heads.len()).unwrap_or(0);
        let mut out = String::from("layer,residual");
        for h in 0..n_heads {
            write!(out, ",head{h}").unwrap();
        }
        out.push('\n');
        for l in &self.layers {
            write!(out, "{},{:.6}", l.layer, l.residual).unwrap();
            for a in &l.heads {
                write!(out, ",{a:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Rank-based top-k membership; ties are ordered by token id, matching
/// the argmax rule of the forward pass.
pub fn in_top_k(logits: ArrayView1<f32>, target: u32, k: usize) -> bool {
    let t = logits[target as usize];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && (i as u32) < target))
        .count();
    rank < k
}

fn lens_hits(
    weights: &ModelWeights,
    inst: &TaskInstance,
    k: usize,
    norm: LensNorm,
) -> Result<Vec<(bool, Vec<bool>)>> {
    let capture = Capture {
        residuals: true,
        head_contributions: true,
        ..Default::default()
    };
    let trace = forward(weights, &inst.tokens, &Default::default(), capture)?;
    let last = inst.tokens.len() - 1;
    let project = |x: ArrayView1<f32>, normed: bool| {
        if normed {
            final_logits(weights, x)
        } else {
            x.dot(&weights.unembedding)
        }
    };
    (0..weights.config.n_layers)
        .map(|l| {
            let resid = trace.residual(l + 1).expect("residuals captured");
            let r = in_top_k(project(resid.row(last), true).view(), inst.answer_id, k);
            let heads = trace.head_contributions[l].as_ref().expect("heads captured");
            let h = heads
                .outer_iter()
                .map(|c| in_top_k(project(c, norm == LensNorm::FinalNorm).view(), inst.answer_id, k))
                .collect();
            Ok((r, h))
        })
        .collect()
}

/// Per-layer top-k accuracy of the residual stream and of every head's
/// contribution at the final position.
pub fn logit_lens(
    weights: &ModelWeights,
    dataset: &Dataset,
    k: usize,
    norm: LensNorm,
) -> Result<LensReport> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let cfg = &weights.config;
    let per_prompt = dataset
        .instances
        .par_iter()
        .map(|inst| lens_hits(weights, inst, k, norm))
        .collect::<Result<Vec<_>>>()?;
    let n = dataset.len() as f64;
    let layers = (0..cfg.n_layers)
        .map(|l| LensLayer {
            layer: l,
            residual: per_prompt.iter().filter(|p| p[l].0).count() as f64 / n,
            heads: (0..cfg.n_heads)
                .map(|h| per_prompt.iter().filter(|p| p[l].1[h]).count() as f64 / n)
                .collect(),
        })
        .collect();
    Ok(LensReport {
        k,
        norm,
        n_eval: dataset.len(),
        layers,
        dataset_hash: dataset.content_hash(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub head: HeadId,
    pub labels: Vec<String>,
    pub mean: Array2<f64>,
    pub n_prompts: usize,
}

impl AttentionMatrix {
    /// CSV with a header row and a leading column of token labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query\\key");
        for l in &self.labels {
            write!(out, ",{l}").unwrap();
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(self.mean.outer_iter()) {
            out.push_str(label);
            for v in row {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Mean attention pattern of `head` over prompts of one length.
pub fn export_attention(
    weights: &ModelWeights,
    head: HeadId,
    prompts: &[Vec<u32>],
    labels: Vec<String>,
    plan: Option<&InterventionPlan>,
) -> Result<AttentionMatrix> {
    let cfg = &weights.config;
    if head.layer >= cfg.n_layers || head.head >= cfg.n_heads {
        return Err(Error::Argument(format!("head {head} outside the model")));
    }
    let Some(first) = prompts.first() else {
        return Err(Error::Argument("no prompts to average".into()));
    };
    let seq = first.len();
    if prompts.iter().any(|p| p.len() != seq) {
        return Err(Error::Argument("prompts differ in length".into()));
    }
    if labels.len() != seq {
        return Err(Error::Argument(format!("{} labels for {seq} positions", labels.len())));
    }
    let empty = InterventionPlan::default();
    let plan = plan.unwrap_or(&empty);
    let capture = Capture {
        attention: true,
        ..Default::default()
    };
    let patterns = prompts
        .par_iter()
        .map(|p| {
            let trace = forward(weights, p, plan, capture)?;
            trace.attention[head.layer]
                .as_ref()
                .map(|heads| heads[head.head].clone())
                .ok_or_else(|| Error::Argument(format!("layer {} is skipped by the plan", head.layer)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Array2::<f64>::zeros((seq, seq));
    for p in &patterns {
        mean.zip_mut_with(p, |m, &v| *m += v as f64);
    }
    mean /= patterns.len() as f64;
    Ok(AttentionMatrix {
        head,
        labels,
        mean,
        n_prompts: prompts.len(),
    })
}

/// Scores per layer for every layer, in layer order.
pub fn ablate_every_layer(
    weights: &ModelWeights,
    template: &Template,
    dataset: &Dataset,
) -> Result<BTreeMap<usize, FaithfulnessReport>> {
    (0..weights.config.n_layers)
        .map(|l| Ok((l, ablate_layer_last_token(weights, template, l, dataset)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::WaitKind;
    use crate::model::ModelConfig;
    use crate::tasks::{make_dataset, Vocab};
    use crate::util::rng_from_seed;
    use ndarray::array;

    fn setup() -> (ModelWeights, Template, Vocab, Dataset) {
        let v = Vocab::build();
        let cfg = ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: v.len(),
            max_seq: 12,
            norm_eps: 1e-5,
        };
        let w = ModelWeights::init(cfg, &mut rng_from_seed(31)).unwrap();
        let t = Template::builtin("A+B", &v).unwrap().with_operand_range(0..=8);
        let mut d = make_dataset(&t, &v, 30, 2, None).unwrap();
        for inst in &mut d.instances {
            inst.answer_id = predict(&w, &inst.tokens, &Default::default()).unwrap();
        }
        d.filter_model_hash = Some(w.content_hash());
        (w, t, v, d)
    }

    #[test]
    fn ablation_touches_only_its_layer() {
        let (w, t, _, d) = setup();
        let reports = ablate_every_layer(&w, &t, &d).unwrap();
        assert_eq!(reports.len(), 3);
        let tokens = &d.instances[0].tokens;
        let mut peek = PeekPlan::causal(5, 3);
        peek.set_rows(1, (0..5).map(|i| if i == 4 { vec![0, 4] } else { (0..=i).collect() }).collect())
            .unwrap();
        let plan = InterventionPlan { peek: Some(peek), ..Default::default() };
        let a = forward(&w, tokens, &plan, Capture::all()).unwrap();
        let b = forward(&w, tokens, &Default::default(), Capture::all()).unwrap();
        assert_eq!(a.attention[0], b.attention[0]);
        let (pa, pb) = (&a.attention[1].as_ref().unwrap()[0], &b.attention[1].as_ref().unwrap()[0]);
        for q in 0..4 {
            assert_eq!(pa.row(q), pb.row(q));
        }
        assert_eq!(pa[[4, 1]], 0.0);
        assert!(matches!(ablate_layer_last_token(&w, &t, 3, &d), Err(Error::Argument(_))));
    }

    #[test]
    fn inert_head_is_removed_first() {
        let (mut w, t, _, d) = setup();
        // Head 1 of layer 2 writes nothing: zero its output projection rows.
        let dh = w.config.d_head;
        w.layers[2].wo.slice_mut(ndarray::s![dh..2 * dh, ..]).fill(0.0);
        let mut d = d;
        for inst in &mut d.instances {
            inst.answer_id = predict(&w, &inst.tokens, &Default::default()).unwrap();
        }
        d.filter_model_hash = Some(w.content_hash());
        let mode = PruneMode::FullModel { head_mode: HeadMode::FullyDisabled };
        let trace = greedy_head_prune(&w, &t, &mode, &[2], &d).unwrap();
        assert_eq!(trace.steps[0].removed, HeadId::new(2, 1));
        assert_eq!(trace.steps[0].accuracy, trace.initial_accuracy);
        assert_eq!(trace.steps.len(), 2);
        for s in &trace.steps {
            let best = s.candidates.iter().map(|c| c.1).fold(f64::MIN, f64::max);
            assert_eq!(s.accuracy, best);
        }
    }

    #[test]
    fn removing_all_transfer_heads_equals_zero_transfer() {
        let (w, t, _, d) = setup();
        let config = SubgraphConfig::new(1, 2, WaitKind::Dec);
        let mode = PruneMode::Af1 { config, cache: None };
        let trace = greedy_head_prune(&w, &t, &mode, &[1, 2], &d).unwrap();
        let zero = crate::discovery::faithfulness(&w, &t, &SubgraphConfig::new(1, 0, WaitKind::Dec), &d, None)
            .unwrap();
        assert_eq!(trace.steps.last().unwrap().accuracy, zero.score);
        assert_eq!(trace.metric, "faithfulness");
    }

    #[test]
    fn ties_go_to_the_lowest_head() {
        let (w, t, _, d) = setup();
        // With a zero-layer model output every candidate scores the same.
        let mut w0 = w.clone();
        for l in &mut w0.layers {
            l.wo.fill(0.0);
        }
        let mut d = d;
        for inst in &mut d.instances {
            inst.answer_id = predict(&w0, &inst.tokens, &Default::default()).unwrap();
        }
        d.filter_model_hash = Some(w0.content_hash());
        let mode = PruneMode::FullModel { head_mode: HeadMode::DisabledCrossToken };
        let trace = greedy_head_prune(&w0, &t, &mode, &[2, 0], &d).unwrap();
        let order: Vec<String> = trace.steps.iter().map(|s| s.removed.to_string()).collect();
        assert_eq!(order, ["L0H0", "L0H1", "L2H0", "L2H1"]);
    }

    #[test]
    fn final_lens_equals_model_accuracy() {
        let (w, t, v, _) = setup();
        let d = make_dataset(&t, &v, 40, 9, None).unwrap();
        let lens = logit_lens(&w, &d, 1, LensNorm::FinalNorm).unwrap();
        let acc = crate::trainer::accuracy_on(&w, &d.instances).unwrap();
        assert_eq!(lens.layers.last().unwrap().residual, acc);
        let full = logit_lens(&w, &d, v.len(), LensNorm::Raw).unwrap();
        assert!(full.layers.iter().all(|l| l.residual == 1.0 && l.heads.iter().all(|&h| h == 1.0)));
        assert!(logit_lens(&w, &d, 0, LensNorm::Raw).is_err());
    }

    #[test]
    fn top_k_ties_follow_token_order() {
        let logits = array![1.0f32, 3.0, 3.0, 0.0];
        assert!(in_top_k(logits.view(), 1, 1));
        assert!(!in_top_k(logits.view(), 2, 1));
        assert!(in_top_k(logits.view(), 2, 2));
        assert!(in_top_k(logits.view(), 3, 4));
    }

    #[test]
    fn mean_attention_is_row_stochastic() {
        let (w, t, v, d) = setup();
        let prompts: Vec<Vec<u32>> = d.instances.iter().map(|i| i.tokens.clone()).collect();
        let m = export_attention(&w, HeadId::new(1, 0), &prompts, t.labels(&v), None).unwrap();
        for row in m.mean.outer_iter() {
            assert!((row.sum() - 1.0).abs() <= 1e-5);
        }
        let same = vec![prompts[0].clone(); 3];
        let one = export_attention(&w, HeadId::new(1, 0), &same[..1], t.labels(&v), None).unwrap();
        let three = export_attention(&w, HeadId::new(1, 0), &same, t.labels(&v), None).unwrap();
        assert!((&one.mean - &three.mean).iter().all(|x| x.abs() < 1e-12));
        let csv = m.to_csv();
        assert!(csv.starts_with("query\\key,<BOS>,A,+,B,="));
        let mixed = vec![prompts[0].clone(), vec![0, 1, 2]];
        assert!(matches!(
            export_attention(&w, HeadId::new(1, 0), &mixed, t.labels(&v), None),
            Err(Error::Argument(_))
        ));
    }
}
