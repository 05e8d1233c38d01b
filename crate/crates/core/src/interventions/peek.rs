//! Attention-based peeking: per-layer, per-query allowed key sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeekMode {
    /// Every query sees all earlier keys (ordinary causal attention).
    FullAll,
    /// Every query sees only `<BOS>` and itself.
    SelfAll,
    /// The last query sees everything, all others only `<BOS>` and self.
    LastFullRestSelf,
    /// As `SelfAll`; kept distinct to mirror the subgraph schedule.
    LastSelfRestSelf,
}

impl PeekMode {
    fn rows(self, seq_len: usize) -> Vec<Vec<usize>> {
        let last = seq_len - 1;
        (0..seq_len)
            .map(|t| match self {
                PeekMode::FullAll => (0..=t).collect(),
                PeekMode::LastFullRestSelf if t == last => (0..=t).collect(),
                _ => self_row(t),
            })
            .collect()
    }
}

fn self_row(t: usize) -> Vec<usize> {
    if t == 0 {
        vec![0]
    } else {
        vec![0, t]
    }
}

/// Allowed key sets, one optional table per layer. `None` means ordinary
/// causal attention for that layer. Every row `t` satisfies
/// `{0, t} ⊆ K_t ⊆ {0..=t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeekPlan {
    seq_len: usize,
    layers: Vec<Option<Vec<Vec<usize>>>>,
}

impl PeekPlan {
    /// Plan with ordinary causal attention in every layer.
    pub fn causal(seq_len: usize, n_layers: usize) -> Self {
        Self {
            seq_len,
            layers: vec![None; n_layers],
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn set_mode(&mut self, layer: usize, mode: PeekMode) -> Result<()> {
        let rows = mode.rows(self.seq_len);
        self.set_rows(layer, rows)
    }

    /// Install explicit key sets for `layer`. Key sets are sorted and the
    /// `<BOS>` and self keys are always added.
    pub fn set_rows(&mut self, layer: usize, mut rows: Vec<Vec<usize>>) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Argument(format!(
                "peek layer {layer} out of range (plan has {} layers)",
                self.layers.len()
            )));
        }
        if rows.len() != self.seq_len {
            return Err(Error::Argument(format!(
                "peek table for layer {layer} has {} rows, sequence has {}",
                rows.len(),
                self.seq_len
            )));
        }
        for (t, row) in rows.iter_mut().enumerate() {
            if let Some(&k) = row.iter().find(|&&k| k > t) {
                return Err(Error::Argument(format!(
                    "layer {layer} query {t} may not peek at later key {k}"
                )));
            }
            row.push(0);
            row.push(t);
            row.sort_unstable();
            row.dedup();
        }
        self.layers[layer] = Some(rows);
        Ok(())
    }

    /// Allowed keys of `query` at `layer`, or `None` for causal attention.
    pub fn keys(&self, layer: usize, query: usize) -> Option<&[usize]> {
        self.layers
            .get(layer)?
            .as_ref()
            .map(|rows| rows[query].as_slice())
    }

    pub fn layer_rows(&self, layer: usize) -> Option<&Vec<Vec<usize>>> {
        self.layers.get(layer)?.as_ref()
    }

    /// Check the BOS/self/causality invariant on every stored row.
    pub fn validate(&self) -> Result<()> {
        for (l, rows) in self.layers.iter().enumerate() {
            let Some(rows) = rows else { continue };
            if rows.len() != self.seq_len {
                return Err(Error::Argument(format!("layer {l} peek table has wrong length")));
            }
            for (t, row) in rows.iter().enumerate() {
                let ok = row.contains(&0) && row.contains(&t) && row.iter().all(|&k| k <= t);
                if !ok {
                    return Err(Error::Argument(format!(
                        "layer {l} query {t} key set {row:?} violates {{0, t}} ⊆ K ⊆ {{0..=t}}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Expand one mode per layer into a plan.
pub fn peek_plan(seq_len: usize, schedule: &[PeekMode]) -> Result<PeekPlan> {
    if seq_len < 2 {
        return Err(Error::Argument(format!(
            "peek plans need at least 2 positions, got {seq_len}"
        )));
    }
    let mut plan = PeekPlan::causal(seq_len, schedule.len());
    for (layer, mode) in schedule.iter().enumerate() {
        plan.set_mode(layer, *mode)?;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Convert 0-based rows to the 1-based notation used in write-ups.
    fn one_based(plan: &PeekPlan, layer: usize) -> Vec<Vec<usize>> {
        plan.layer_rows(layer)
            .unwrap()
            .iter()
            .map(|r| r.iter().map(|k| k + 1).collect())
            .collect()
    }

    #[test]
    fn last_full_rest_self_expansion() {
        let p = peek_plan(5, &[PeekMode::LastFullRestSelf]).unwrap();
        assert_eq!(
            one_based(&p, 0),
            vec![vec![1], vec![1, 2], vec![1, 3], vec![1, 4], vec![1, 2, 3, 4, 5]]
        );
    }

    #[test]
    fn full_all_is_causal() {
        let p = peek_plan(5, &[PeekMode::FullAll]).unwrap();
        for t in 0..5 {
            assert_eq!(p.keys(0, t).unwrap(), (0..=t).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn two_positions_self_all() {
        let p = peek_plan(2, &[PeekMode::SelfAll]).unwrap();
        assert_eq!(one_based(&p, 0), vec![vec![1], vec![1, 2]]);
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        assert!(matches!(peek_plan(1, &[PeekMode::FullAll]), Err(Error::Argument(_))));
    }

    #[test]
    fn future_keys_are_rejected() {
        let mut p = PeekPlan::causal(3, 1);
        assert!(p.set_rows(0, vec![vec![0], vec![2], vec![0]]).is_err());
    }

    proptest! {
        #[test]
        fn rows_always_hold_bos_and_self(
            seq_len in 2usize..12,
            modes in proptest::collection::vec(0u8..4, 1..6),
            extra in proptest::collection::vec(proptest::collection::vec(0usize..12, 0..4), 12),
        ) {
            let schedule: Vec<PeekMode> = modes.iter().map(|m| match m {
                0 => PeekMode::FullAll,
                1 => PeekMode::SelfAll,
                2 => PeekMode::LastFullRestSelf,
                _ => PeekMode::LastSelfRestSelf,
            }).collect();
            let mut plan = peek_plan(seq_len, &schedule).unwrap();
            let custom: Vec<Vec<usize>> = (0..seq_len)
                .map(|t| extra[t].iter().copied().filter(|&k| k <= t).collect())
                .collect();
            plan.set_rows(0, custom).unwrap();
            plan.validate().unwrap();
            for l in 0..schedule.len() {
                for t in 0..seq_len {
                    let k = plan.keys(l, t).unwrap();
                    prop_assert!(k.contains(&0) && k.contains(&t));
                    prop_assert!(k.iter().all(|&x| x <= t));
                }
            }
        }
    }
}
