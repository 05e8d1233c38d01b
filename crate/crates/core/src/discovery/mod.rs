//! Wait/transfer subgraph evaluation and faithfulness.
//!
//! A subgraph `(l_wait, l_transfer)` replaces the residual stream entering
//! layer `l_wait` with wait vectors, lets only the last token attend across
//! positions for `l_transfer` layers, and lets no token attend across
//! positions afterwards.

mod grid;

pub use grid::{
    compare_waits, select_af1, sweep_grid, GridCell, GridResult, WaitComparison,
    DEFAULT_THRESHOLD, GRID_CSV_HEADER,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{predict, HeadMode, InterventionPlan};
use crate::interventions::{wait_vectors, CamaCache, PeekMode, PeekPlan, WaitKind};
use crate::model::{HeadId, ModelWeights};
use crate::tasks::{Dataset, Template};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphConfig {
    pub l_wait: usize,
    pub l_transfer: usize,
    pub wait_kind: WaitKind,
    /// Keep ordinary causal attention for non-last tokens inside the
    /// transfer window instead of restricting them to `<BOS>` and self.
    #[serde(default)]
    pub rest_full: bool,
    #[serde(default)]
    pub head_mask: BTreeMap<HeadId, HeadMode>,
}

impl SubgraphConfig {
    pub fn new(l_wait: usize, l_transfer: usize, wait_kind: WaitKind) -> Self {
        Self {
            l_wait,
            l_transfer,
            wait_kind,
            rest_full: false,
            head_mask: BTreeMap::new(),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.l_wait + self.l_transfer > n_layers {
            return Err(Error::Argument(format!(
                "l_wait {} + l_transfer {} exceeds n_layers {n_layers}",
                self.l_wait, self.l_transfer
            )));
        }
        Ok(())
    }

    /// Stable hash of the serialized configuration.
    pub fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    /// Peek mode of every layer; `None` for layers the override skips.
    pub fn schedule(&self, n_layers: usize) -> Vec<Option<PeekMode>> {
        let end = self.l_wait + self.l_transfer;
        (0..n_layers)
            .map(|l| match l {
                l if l < self.l_wait => None,
                l if l < end && self.rest_full => Some(PeekMode::FullAll),
                l if l < end => Some(PeekMode::LastFullRestSelf),
                _ => Some(PeekMode::LastSelfRestSelf),
            })
            .collect()
    }
}

/// Intervention plan realising `cfg` on one prompt. With `l_wait = 0` no
/// override is installed: every wait mechanism returns the embedding there.
pub fn af1_plan(
    weights: &ModelWeights,
    template: &Template,
    cfg: &SubgraphConfig,
    tokens: &[u32],
    cache: Option<&CamaCache>,
) -> Result<InterventionPlan> {
    let n = weights.config.n_layers;
    cfg.validate(n)?;
    let mut plan = InterventionPlan {
        head_mask: cfg.head_mask.clone(),
        ..Default::default()
    };
    if cfg.l_wait > 0 {
        let x = wait_vectors(cfg.wait_kind, weights, template, tokens, cfg.l_wait, cache, None)?;
        plan.override_layer(cfg.l_wait, &x);
    }
    let mut peek = PeekPlan::causal(tokens.len(), n);
    for (layer, mode) in cfg.schedule(n).into_iter().enumerate() {
        if let Some(mode) = mode {
            peek.set_mode(layer, mode)?;
        }
    }
    plan.peek = Some(peek);
    Ok(plan)
}

pub fn af1_evaluate(
    weights: &ModelWeights,
    template: &Template,
    cfg: &SubgraphConfig,
    tokens: &[u32],
    cache: Option<&CamaCache>,
) -> Result<u32> {
    let plan = af1_plan(weights, template, cfg, tokens, cache)?;
    predict(weights, tokens, &plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub index: usize,
    pub prediction: u32,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub score: f64,
    pub n_eval: usize,
    pub n_correct: usize,
    pub records: Vec<PromptOutcome>,
    pub config_hash: String,
    pub dataset_hash: String,
}

impl FaithfulnessReport {
    pub fn from_records(records: Vec<PromptOutcome>, config_hash: String, dataset_hash: String) -> Self {
        let n_correct = records.iter().filter(|r| r.correct).count();
        let n_eval = records.len();
        let score = if n_eval == 0 {
            0.0
        } else {
            n_correct as f64 / n_eval as f64
        };
        Self {
            score,
            n_eval,
            n_correct,
            records,
            config_hash,
            dataset_hash,
        }
    }
}

/// The dataset must have been filtered with exactly these weights.
pub fn check_dataset(weights: &ModelWeights, template: &Template, dataset: &Dataset) -> Result<()> {
    let hash = weights.content_hash();
    match &dataset.filter_model_hash {
        Some(h) if *h == hash => {}
        Some(h) => {
            return Err(Error::Integrity(format!(
                "dataset was filtered with model {h}, evaluating model {hash}"
            )))
        }
        None => {
            return Err(Error::Integrity(
                "dataset was not filtered by the evaluated model".into(),
            ))
        }
    }
    if dataset.template != template.name {
        return Err(Error::Integrity(format!(
            "dataset is for template {}, evaluator for {}",
            dataset.template, template.name
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    Ok(())
}

/// Accuracy of the subgraph on prompts the full model answers correctly.
pub fn faithfulness(
    weights: &ModelWeights,
    template: &Template,
    cfg: &SubgraphConfig,
    dataset: &Dataset,
    cache: Option<&CamaCache>,
) -> Result<FaithfulnessReport> {
    check_dataset(weights, template, dataset)?;
    let records = dataset
        .instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            let prediction = af1_evaluate(weights, template, cfg, &inst.tokens, cache)?;
            Ok(PromptOutcome {
                index,
                prediction,
                correct: prediction == inst.answer_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaithfulnessReport::from_records(
        records,
        cfg.content_hash(),
        dataset.content_hash(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward;
    use crate::interventions::{build_cama, peek_plan, CamaOptions};
    use crate::model::ModelConfig;
    use crate::tasks::{make_dataset, Vocab};
    use crate::util::rng_from_seed;

    pub(crate) fn setup() -> (ModelWeights, Template, Vocab) {
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
        let w = ModelWeights::init(cfg, &mut rng_from_seed(12)).unwrap();
        let t = Template::builtin("A+B", &v).unwrap().with_operand_range(0..=6);
        (w, t, v)
    }

    /// Dataset marked as filtered by `w` without running the filter, so
    /// evaluators can be exercised on an untrained model.
    pub(crate) fn pseudo_filtered(w: &ModelWeights, t: &Template, v: &Vocab, n: usize) -> Dataset {
        let mut d = make_dataset(t, v, n, 5, None).unwrap();
        for inst in &mut d.instances {
            inst.answer_id = predict(w, &inst.tokens, &Default::default()).unwrap();
        }
        d.filter_model_hash = Some(w.content_hash());
        d
    }

    #[test]
    fn full_window_with_rest_full_is_the_vanilla_model() {
        let (w, t, v) = setup();
        let mut cfg = SubgraphConfig::new(0, 3, WaitKind::Cama);
        cfg.rest_full = true;
        for seed in 0..10 {
            let inst = crate::tasks::sample_instance(&t, &v, &mut rng_from_seed(seed));
            let plan = af1_plan(&w, &t, &cfg, &inst.tokens, None).unwrap();
            let a = forward(&w, &inst.tokens, &plan, Default::default()).unwrap();
            let b = forward(&w, &inst.tokens, &Default::default(), Default::default()).unwrap();
            assert!((&a.logits - &b.logits).iter().all(|d| d.abs() <= 1e-5));
        }
    }

    #[test]
    fn cell_matches_hand_composed_plan() {
        let (w, t, v) = setup();
        let cache = build_cama(&w, &t, &v, 1, CamaOptions { samples: 4, ..Default::default() }, 3)
            .unwrap();
        let cfg = SubgraphConfig::new(1, 2, WaitKind::Cama);
        let inst = t.instance(&[4, 2], &v).unwrap();
        let got = forward(
            &w,
            &inst.tokens,
            &af1_plan(&w, &t, &cfg, &inst.tokens, Some(&cache)).unwrap(),
            Default::default(),
        )
        .unwrap();
        let mut hand = InterventionPlan::default();
        hand.override_layer(1, &cache.lookup(&inst.tokens).unwrap());
        hand.peek = Some(
            peek_plan(
                5,
                &[
                    PeekMode::FullAll,
                    PeekMode::LastFullRestSelf,
                    PeekMode::LastFullRestSelf,
                ],
            )
            .unwrap(),
        );
        let want = forward(&w, &inst.tokens, &hand, Default::default()).unwrap();
        assert_eq!(got.logits, want.logits);
    }

    #[test]
    fn no_transfer_cell_is_total() {
        let (w, t, v) = setup();
        let cache = build_cama(&w, &t, &v, 3, CamaOptions { samples: 2, ..Default::default() }, 0)
            .unwrap();
        let inst = t.instance(&[1, 5], &v).unwrap();
        let id = af1_evaluate(&w, &t, &SubgraphConfig::new(3, 0, WaitKind::Cama), &inst.tokens, Some(&cache))
            .unwrap();
        assert!((id as usize) < v.len());
    }

    #[test]
    fn oversized_window_is_rejected() {
        let (w, t, v) = setup();
        let inst = t.instance(&[1, 5], &v).unwrap();
        let cfg = SubgraphConfig::new(2, 2, WaitKind::Dec);
        assert!(matches!(
            af1_evaluate(&w, &t, &cfg, &inst.tokens, None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn full_model_is_perfectly_faithful() {
        let (w, t, v) = setup();
        let data = pseudo_filtered(&w, &t, &v, 30);
        let mut cfg = SubgraphConfig::new(0, 3, WaitKind::Cama);
        cfg.rest_full = true;
        let r = faithfulness(&w, &t, &cfg, &data, None).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.n_eval, 30);
        assert_eq!(r.dataset_hash, data.content_hash());
    }

    #[test]
    fn score_is_exact_fraction() {
        let records = (0..80)
            .map(|index| PromptOutcome {
                index,
                prediction: 0,
                correct: index < 60,
            })
            .collect();
        let r = FaithfulnessReport::from_records(records, String::new(), String::new());
        assert_eq!(r.score, 0.75);
    }

    #[test]
    fn dataset_from_another_model_is_an_integrity_error() {
        let (w, t, v) = setup();
        let mut data = pseudo_filtered(&w, &t, &v, 5);
        data.filter_model_hash = Some("0".repeat(64));
        let cfg = SubgraphConfig::new(0, 3, WaitKind::Dec);
        assert!(matches!(faithfulness(&w, &t, &cfg, &data, None), Err(Error::Integrity(_))));
        data.filter_model_hash = None;
        assert!(matches!(faithfulness(&w, &t, &cfg, &data, None), Err(Error::Integrity(_))));
    }

    #[test]
    fn untrained_model_cannot_build_filtered_dataset() {
        let (mut w, t, v) = setup();
        // Constant logits: the argmax is always <BOS>, never an answer.
        w.unembedding.fill(0.0);
        assert!(matches!(
            make_dataset(&t, &v, 3, 0, Some(&w)),
            Err(Error::InsufficientAccuracy { .. })
        ));
    }

    #[test]
    fn disabling_every_head_matches_zero_transfer() {
        let (w, t, v) = setup();
        let data = pseudo_filtered(&w, &t, &v, 25);
        let mut masked = SubgraphConfig::new(1, 2, WaitKind::Dec);
        for layer in 1..3 {
            for head in 0..2 {
                masked.head_mask.insert(HeadId::new(layer, head), HeadMode::DisabledCrossToken);
            }
        }
        let zero = SubgraphConfig::new(1, 0, WaitKind::Dec);
        let a = faithfulness(&w, &t, &masked, &data, None).unwrap();
        let b = faithfulness(&w, &t, &zero, &data, None).unwrap();
        assert_eq!(a.score, b.score);
        let pa: Vec<u32> = a.records.iter().map(|r| r.prediction).collect();
        let pb: Vec<u32> = b.records.iter().map(|r| r.prediction).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = SubgraphConfig::new(2, 1, WaitKind::Spaw);
        cfg.head_mask.insert(HeadId::new(1, 0), HeadMode::FullyDisabled);
        let back: SubgraphConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());
    }
}
