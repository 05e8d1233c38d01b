//! Replacement residuals at the end of the waiting period.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{embed, residual_at, InterventionPlan};
use crate::interventions::cama::{CamaCache, Estimator, DEFAULT_CAMA_SAMPLES};
use crate::interventions::peek::{PeekMode, PeekPlan};
use crate::model::ModelWeights;
use crate::tasks::{Template, BOS};
use crate::util::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WaitKind {
    /// Context-aware mean ablation.
    Cama,
    /// Direct embedding copy.
    Dec,
    /// Random-token mean ablation.
    Rtma,
    /// Self-peeking through the waiting layers.
    Spaw,
    /// Isolated two-token forward pass per position.
    Ifp,
}

impl WaitKind {
    pub const ALL: [WaitKind; 5] = [
        WaitKind::Cama,
        WaitKind::Dec,
        WaitKind::Rtma,
        WaitKind::Spaw,
        WaitKind::Ifp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WaitKind::Cama => "cama",
            WaitKind::Dec => "dec",
            WaitKind::Rtma => "rtma",
            WaitKind::Spaw => "spaw",
            WaitKind::Ifp => "ifp",
        }
    }

    /// Whether the kind reads a precomputed cache.
    pub fn needs_cache(self) -> bool {
        matches!(self, WaitKind::Cama | WaitKind::Rtma)
    }
}

impl fmt::Display for WaitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WaitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WaitKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown wait mechanism {s:?}")))
    }
}

/// Residuals x̃^(l_wait) for every position of `tokens` under `kind`.
///
/// CAMA needs a cache built for the same template and depth. RTMA reads a
/// random-token cache when given one, otherwise it samples on the fly from
/// `rng`.
pub fn wait_vectors(
    kind: WaitKind,
    weights: &ModelWeights,
    template: &Template,
    tokens: &[u32],
    l_wait: usize,
    cache: Option<&CamaCache>,
    rng: Option<&mut Rng>,
) -> Result<Array2<f32>> {
    if l_wait > weights.config.n_layers {
        return Err(Error::Argument(format!(
            "l_wait {l_wait} exceeds n_layers {}",
            weights.config.n_layers
        )));
    }
    match kind {
        WaitKind::Cama => {
            let cache = cache.ok_or_else(|| Error::Argument("CAMA needs a cache".into()))?;
            check_cache(cache, template, l_wait)?;
            if cache.estimator == Estimator::RandomToken {
                return Err(Error::Argument(
                    "CAMA was given a random-token cache".into(),
                ));
            }
            cache.lookup(tokens)
        }
        WaitKind::Dec => Ok(embed(weights, tokens)),
        WaitKind::Rtma => match (cache, rng) {
            (Some(cache), _) => {
                check_cache(cache, template, l_wait)?;
                if cache.estimator != Estimator::RandomToken {
                    return Err(Error::Argument("RTMA needs a random-token cache".into()));
                }
                cache.lookup(tokens)
            }
            (None, Some(rng)) => rtma_on_the_fly(weights, tokens, l_wait, rng),
            (None, None) => Err(Error::Argument(
                "RTMA needs either a random-token cache or an rng".into(),
            )),
        },
        WaitKind::Spaw => {
            let mut plan = InterventionPlan::default();
            if tokens.len() >= 2 && l_wait > 0 {
                let mut peek = PeekPlan::causal(tokens.len(), l_wait);
                for layer in 0..l_wait {
                    peek.set_mode(layer, PeekMode::SelfAll)?;
                }
                plan.peek = Some(peek);
            }
            residual_at(weights, tokens, &plan, l_wait)
        }
        WaitKind::Ifp => {
            let empty = InterventionPlan::default();
            let mut out = Array2::zeros((tokens.len(), weights.config.d_model));
            for (t, &tok) in tokens.iter().enumerate() {
                // <BOS> at position 0 runs alone; every other token runs as (<BOS>, token).
                let (prompt, row) = if t == 0 { (vec![tok], 0) } else { (vec![BOS, tok], 1) };
                let x = residual_at(weights, &prompt, &empty, l_wait)?;
                out.row_mut(t).assign(&x.row(row));
            }
            Ok(out)
        }
    }
}

fn check_cache(cache: &CamaCache, template: &Template, l_wait: usize) -> Result<()> {
    if cache.template != template.name || cache.l_wait != l_wait {
        return Err(Error::Argument(format!(
            "cache is for ({}, l_wait {}), needed ({}, l_wait {l_wait})",
            cache.template, cache.l_wait, template.name
        )));
    }
    Ok(())
}

fn rtma_on_the_fly(
    weights: &ModelWeights,
    tokens: &[u32],
    l_wait: usize,
    rng: &mut Rng,
) -> Result<Array2<f32>> {
    let d = weights.config.d_model;
    let vocab = weights.config.vocab_size as u32;
    let empty = InterventionPlan::default();
    let mut out = Array2::zeros((tokens.len(), d));
    for (t, &tok) in tokens.iter().enumerate() {
        if t == 0 {
            let x = residual_at(weights, &tokens[..1], &empty, l_wait)?;
            out.row_mut(0).assign(&x.row(0));
            continue;
        }
        let mut acc = vec![0f64; d];
        for _ in 0..DEFAULT_CAMA_SAMPLES {
            let mut prompt = Vec::with_capacity(t + 1);
            prompt.push(BOS);
            prompt.extend((1..t).map(|_| rng.random_range(1..vocab)));
            prompt.push(tok);
            let x = residual_at(weights, &prompt, &empty, l_wait)?;
            for (a, &v) in acc.iter_mut().zip(x.row(t)) {
                *a += v as f64;
            }
        }
        for (dst, a) in out.row_mut(t).iter_mut().zip(acc) {
            *dst = (a / DEFAULT_CAMA_SAMPLES as f64) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{forward, Capture};
    use crate::interventions::cama::{build_cama, build_rtma, CamaOptions};
    use crate::model::ModelConfig;
    use crate::tasks::Vocab;
    use crate::util::rng_from_seed;

    fn setup() -> (ModelWeights, Template, Vocab) {
        let v = Vocab::build();
        let cfg = ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: v.len(),
            max_seq: 12,
            norm_eps: 1e-5,
        };
        let w = ModelWeights::init(cfg, &mut rng_from_seed(4)).unwrap();
        let t = Template::builtin("A+B", &v).unwrap().with_operand_range(0..=5);
        (w, t, v)
    }

    #[test]
    fn dec_is_the_embedding() {
        let (w, t, v) = setup();
        let inst = t.instance(&[2, 3], &v).unwrap();
        let got = wait_vectors(WaitKind::Dec, &w, &t, &inst.tokens, 2, None, None).unwrap();
        let trace = forward(&w, &inst.tokens, &Default::default(), Capture::all()).unwrap();
        assert_eq!(&got, trace.residual(0).unwrap());
    }

    #[test]
    fn spaw_at_zero_is_the_embedding() {
        let (w, t, v) = setup();
        let inst = t.instance(&[4, 1], &v).unwrap();
        let got = wait_vectors(WaitKind::Spaw, &w, &t, &inst.tokens, 0, None, None).unwrap();
        assert_eq!(got, embed(&w, &inst.tokens));
    }

    #[test]
    fn ifp_uses_isolated_two_token_prompt() {
        let (w, t, v) = setup();
        let inst = t.instance(&[5, 2], &v).unwrap();
        let got = wait_vectors(WaitKind::Ifp, &w, &t, &inst.tokens, 2, None, None).unwrap();
        let five = inst.tokens[1];
        let trace = forward(&w, &[BOS, five], &Default::default(), Capture::all()).unwrap();
        assert_eq!(got.row(1), trace.residual(2).unwrap().row(1));
    }

    #[test]
    fn cama_requires_matching_cache() {
        let (w, t, v) = setup();
        let inst = t.instance(&[1, 1], &v).unwrap();
        assert!(wait_vectors(WaitKind::Cama, &w, &t, &inst.tokens, 1, None, None).is_err());
        let cache = build_cama(&w, &t, &v, 2, CamaOptions { samples: 3, ..Default::default() }, 0)
            .unwrap();
        assert!(
            wait_vectors(WaitKind::Cama, &w, &t, &inst.tokens, 1, Some(&cache), None).is_err()
        );
        assert!(
            wait_vectors(WaitKind::Cama, &w, &t, &inst.tokens, 2, Some(&cache), None).is_ok()
        );
    }

    #[test]
    fn rtma_needs_cache_or_rng_and_is_seed_deterministic() {
        let (w, t, v) = setup();
        let inst = t.instance(&[1, 2], &v).unwrap();
        assert!(wait_vectors(WaitKind::Rtma, &w, &t, &inst.tokens, 1, None, None).is_err());
        let a = wait_vectors(
            WaitKind::Rtma,
            &w,
            &t,
            &inst.tokens,
            1,
            None,
            Some(&mut rng_from_seed(8)),
        )
        .unwrap();
        let b = wait_vectors(
            WaitKind::Rtma,
            &w,
            &t,
            &inst.tokens,
            1,
            None,
            Some(&mut rng_from_seed(8)),
        )
        .unwrap();
        assert_eq!(a, b);
        let table = build_rtma(&w, &t, &v, &[1], 3, 8).unwrap();
        let c = wait_vectors(WaitKind::Rtma, &w, &t, &inst.tokens, 1, Some(&table[0]), None)
            .unwrap();
        assert_eq!(c.shape(), a.shape());
    }

    #[test]
    fn kinds_parse_case_insensitively() {
        assert_eq!("CAMA".parse::<WaitKind>().unwrap(), WaitKind::Cama);
        assert_eq!("spaw".parse::<WaitKind>().unwrap(), WaitKind::Spaw);
        assert!("nope".parse::<WaitKind>().is_err());
    }
}
