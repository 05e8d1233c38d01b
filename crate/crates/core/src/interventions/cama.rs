//! Context-aware mean ablation caches.
//!
//! For every token group and every value of its conditioning token, the
//! cache holds the expected residual x^(l_wait) at each position of the
//! group, averaged over prompts drawn from the task distribution with that
//! value fixed. Causality means only the prefix before the group matters,
//! so each sample runs just `0..=group.end`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Header, Reader, Writer};
use crate::error::{Error, Result};
use crate::forward::residual_stack;
use crate::model::ModelWeights;
use crate::tasks::{single_token_groups, token_groups, Slot, Template, TokenGroup, Vocab, BOS};
use crate::util::{self, derive_seed, rng_from_seed};

pub const CAMA_MAGIC: &[u8; 4] = b"AF1C";
pub const DEFAULT_CAMA_SAMPLES: usize = 100;
pub const DEFAULT_EXHAUSTIVE_CAP: u64 = 10_000_000;

/// Rejection-sampling attempts per draw before a conditioning value is
/// declared infeasible.
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    MonteCarlo,
    Exhaustive,
    /// Random-token means (prefix tokens drawn uniformly from the vocab).
    RandomToken,
}

impl Estimator {
    fn as_str(self) -> &'static str {
        match self {
            Estimator::MonteCarlo => "monte-carlo",
            Estimator::Exhaustive => "exhaustive",
            Estimator::RandomToken => "random-token",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "monte-carlo" => Ok(Estimator::MonteCarlo),
            "exhaustive" => Ok(Estimator::Exhaustive),
            "random-token" => Ok(Estimator::RandomToken),
            _ => Err(Error::Format {
                offset: 12,
                message: format!("unknown estimator {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Condition on the whole token group (fixed tokens plus operand).
    Group,
    /// Condition on each position's own token only.
    SingleToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CamaOptions {
    pub samples: usize,
    pub exhaustive: bool,
    pub conditioning: Conditioning,
    /// Maximum forward positions an exhaustive build may spend.
    pub cap: u64,
}

impl Default for CamaOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_CAMA_SAMPLES,
            exhaustive: false,
            conditioning: Conditioning::Group,
            cap: DEFAULT_EXHAUSTIVE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamaEntry {
    /// Number of task instances represented (sum of sample weights).
    pub count: u64,
    /// One row per group position.
    pub vectors: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamaCache {
    pub template: String,
    pub l_wait: usize,
    pub d_model: usize,
    pub estimator: Estimator,
    pub conditioning: Conditioning,
    pub samples: usize,
    pub groups: Vec<TokenGroup>,
    /// Per group: conditioning token id -> entry.
    pub entries: Vec<BTreeMap<u32, CamaEntry>>,
}

impl CamaCache {
    /// Replacement residuals for a whole prompt, looked up group by group.
    pub fn lookup(&self, tokens: &[u32]) -> Result<Array2<f32>> {
        let len = self.groups.last().map(|g| g.end + 1).unwrap_or(0);
        if tokens.len() != len {
            return Err(Error::Argument(format!(
                "prompt has {} tokens, cache for {} expects {len}",
                tokens.len(),
                self.template
            )));
        }
        let mut out = Array2::zeros((len, self.d_model));
        for (g, group) in self.groups.iter().enumerate() {
            let key = tokens[group.end];
            let entry = self.entries[g].get(&key).ok_or_else(|| {
                Error::Missing(format!(
                    "cache for {} at layer {} has no entry for token {key} in group {g}",
                    self.template, self.l_wait
                ))
            })?;
            for (row, pos) in group.positions().enumerate() {
                out.row_mut(pos).assign(&entry.vectors.row(row));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = Header::new();
        h.push("template", &self.template);
        h.push("l_wait", self.l_wait);
        h.push("d_model", self.d_model);
        h.push("samples", self.samples);
        h.push("estimator", self.estimator.as_str());
        h.push(
            "conditioning",
            match self.conditioning {
                Conditioning::Group => "group",
                Conditioning::SingleToken => "single-token",
            },
        );
        let groups: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                let op = g.operand.map(|o| o.to_string()).unwrap_or_else(|| "-".into());
                format!("{}-{}:{op}", g.start, g.end)
            })
            .collect();
        h.push("groups", groups.join(";"));
        for (g, entries) in self.entries.iter().enumerate() {
            let keys: Vec<String> = entries
                .iter()
                .map(|(k, e)| format!("{k}:{}", e.count))
                .collect();
            h.push(&format!("entries.{g}"), keys.join(","));
        }
        let mut w = Writer::new(CAMA_MAGIC, &h);
        for entries in &self.entries {
            for e in entries.values() {
                w.tensor(e.vectors.as_slice().expect("standard layout"));
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CAMA_MAGIC)?;
        let h = r.header.clone();
        let bad = |m: String| Error::Format {
            offset: 12,
            message: m,
        };
        let d_model: usize = h.parse("d_model")?;
        let mut groups = Vec::new();
        for spec in h.require("groups")?.split(';').filter(|s| !s.is_empty()) {
            let (span, op) = spec
                .split_once(':')
                .ok_or_else(|| bad(format!("bad group {spec:?}")))?;
            let (a, b) = span
                .split_once('-')
                .ok_or_else(|| bad(format!("bad group {spec:?}")))?;
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad group {spec:?}")));
            groups.push(TokenGroup {
                start: parse(a)?,
                end: parse(b)?,
                operand: if op == "-" { None } else { Some(parse(op)?) },
            });
        }
        let mut entries = Vec::with_capacity(groups.len());
        for (g, group) in groups.iter().enumerate() {
            let mut map = BTreeMap::new();
            let spec = h.require(&format!("entries.{g}"))?;
            for item in spec.split(',').filter(|s| !s.is_empty()) {
                let (k, c) = item
                    .split_once(':')
                    .ok_or_else(|| bad(format!("bad entry {item:?}")))?;
                let key: u32 = k.parse().map_err(|_| bad(format!("bad entry {item:?}")))?;
                let count: u64 = c.parse().map_err(|_| bad(format!("bad entry {item:?}")))?;
                map.insert(key, count);
            }
            let mut resolved = BTreeMap::new();
            for (key, count) in map {
                let data = r.tensor(group.len() * d_model, &format!("group {g} token {key}"))?;
                let vectors = Array2::from_shape_vec((group.len(), d_model), data)
                    .expect("length checked by reader");
                resolved.insert(key, CamaEntry { count, vectors });
            }
            entries.push(resolved);
        }
        r.finish()?;
        Ok(Self {
            template: h.require("template")?.to_string(),
            l_wait: h.parse("l_wait")?,
            d_model,
            estimator: Estimator::parse(h.require("estimator")?)?,
            conditioning: match h.require("conditioning")? {
                "group" => Conditioning::Group,
                "single-token" => Conditioning::SingleToken,
                other => return Err(bad(format!("unknown conditioning {other:?}"))),
            },
            samples: h.parse("samples")?,
            groups,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn content_hash(&self) -> String {
        util::sha256_hex(&self.to_bytes())
    }
}

/// One cache entry to estimate: the prompts (prefix through the group end)
/// and their weights.
struct WorkItem {
    group: usize,
    key: u32,
    prompts: Vec<(Vec<u32>, u64)>,
}

pub fn build_cama(
    weights: &ModelWeights,
    template: &Template,
    vocab: &Vocab,
    l_wait: usize,
    options: CamaOptions,
    seed: u64,
) -> Result<CamaCache> {
    Ok(build_cama_layers(weights, template, vocab, &[l_wait], options, seed)?.remove(0))
}

/// Build caches for several wait depths from the same samples.
pub fn build_cama_layers(
    weights: &ModelWeights,
    template: &Template,
    vocab: &Vocab,
    l_waits: &[usize],
    options: CamaOptions,
    seed: u64,
) -> Result<Vec<CamaCache>> {
    template.validate()?;
    if options.samples == 0 {
        return Err(Error::Argument("CAMA needs at least one sample".into()));
    }
    let groups = match options.conditioning {
        Conditioning::Group => token_groups(template)?,
        Conditioning::SingleToken => single_token_groups(template)?,
    };
    let estimator = if options.exhaustive {
        Estimator::Exhaustive
    } else {
        Estimator::MonteCarlo
    };
    let items = if options.exhaustive {
        exhaustive_items(template, vocab, &groups, options.cap)?
    } else {
        sampled_items(template, vocab, &groups, options.samples, seed)?
    };
    estimate(weights, template, &groups, items, l_waits, estimator, options)
}

/// Random-token means: for each position and each value it can take, the
/// average residual over prompts whose earlier non-BOS tokens are drawn
/// uniformly from the whole vocabulary (excluding `<BOS>`).
pub fn build_rtma(
    weights: &ModelWeights,
    template: &Template,
    vocab: &Vocab,
    l_waits: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<CamaCache>> {
    template.validate()?;
    if samples == 0 {
        return Err(Error::Argument("RTMA needs at least one sample".into()));
    }
    let groups = single_token_groups(template)?;
    let vocab_size = weights.config.vocab_size as u32;
    let mut items = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let pos = group.end;
        for key in position_values(template, vocab, pos)? {
            let prompts = if pos == 0 {
                vec![(vec![key], 1)]
            } else {
                let mut rng = rng_from_seed(derive_seed(seed, "rtma", &[g as u64, key as u64]));
                (0..samples)
                    .map(|_| {
                        let mut tokens = Vec::with_capacity(pos + 1);
                        tokens.push(BOS);
                        tokens.extend((1..pos).map(|_| rng.random_range(1..vocab_size)));
                        tokens.push(key);
                        (tokens, 1)
                    })
                    .collect()
            };
            items.push(WorkItem {
                group: g,
                key,
                prompts,
            });
        }
    }
    let options = CamaOptions {
        samples,
        conditioning: Conditioning::SingleToken,
        ..CamaOptions::default()
    };
    estimate(
        weights,
        template,
        &groups,
        items,
        l_waits,
        Estimator::RandomToken,
        options,
    )
}

/// Token ids a position can carry under the template.
fn position_values(template: &Template, vocab: &Vocab, pos: usize) -> Result<Vec<u32>> {
    match template.slots[pos] {
        Slot::Fixed(id) => Ok(vec![id]),
        Slot::Operand(_) => template
            .operand_range
            .clone()
            .map(|v| vocab.number(v as i64))
            .collect(),
    }
}

/// Operands whose slots come before `start`.
fn prefix_operands(template: &Template, start: usize) -> Vec<usize> {
    template
        .operand_positions()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p < start)
        .map(|(i, _)| i)
        .collect()
}

fn render_prefix(
    template: &Template,
    vocab: &Vocab,
    operands: &[u32],
    end: usize,
) -> Result<Vec<u32>> {
    let mut tokens = template.render(operands, vocab)?;
    tokens.truncate(end + 1);
    Ok(tokens)
}

fn conditioning_values(template: &Template, group: &TokenGroup) -> Vec<Option<u32>> {
    match group.operand {
        Some(_) => template.operand_range.clone().map(Some).collect(),
        None => vec![None],
    }
}

fn sampled_items(
    template: &Template,
    vocab: &Vocab,
    groups: &[TokenGroup],
    samples: usize,
    seed: u64,
) -> Result<Vec<WorkItem>> {
    let n_ops = template.n_operands();
    let mut items = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let prefix = prefix_operands(template, group.start);
        for value in conditioning_values(template, group) {
            let mut rng = rng_from_seed(derive_seed(
                seed,
                "cama",
                &[g as u64, value.map(|v| v as u64 + 1).unwrap_or(0)],
            ));
            let draws = if prefix.is_empty() { 1 } else { samples };
            let mut prompts = Vec::with_capacity(draws);
            let mut operands = vec![0u32; n_ops];
            'draw: for _ in 0..draws {
                for _ in 0..MAX_REJECTIONS {
                    for (i, o) in operands.iter_mut().enumerate() {
                        *o = match (group.operand, value) {
                            (Some(k), Some(v)) if k == i => v,
                            _ => rng.random_range(template.operand_range.clone()),
                        };
                    }
                    if template.answer(&operands).is_some() {
                        prompts.push((render_prefix(template, vocab, &operands, group.end)?, 1));
                        continue 'draw;
                    }
                }
                // No valid prompt carries this value.
                break;
            }
            let Some((tokens, _)) = prompts.first() else {
                continue;
            };
            let key = tokens[group.end];
            items.push(WorkItem {
                group: g,
                key,
                prompts,
            });
        }
    }
    Ok(items)
}

fn exhaustive_items(
    template: &Template,
    vocab: &Vocab,
    groups: &[TokenGroup],
    cap: u64,
) -> Result<Vec<WorkItem>> {
    let n_ops = template.n_operands();
    let range: Vec<u32> = template.operand_range.clone().collect();
    let width = range.len() as u64;

    let mut needed: u64 = 0;
    for group in groups {
        let prefix = prefix_operands(template, group.start).len() as u32;
        let values = if group.operand.is_some() { width } else { 1 };
        needed = needed.saturating_add(
            width
                .saturating_pow(prefix)
                .saturating_mul(values)
                .saturating_mul(group.end as u64 + 1),
        );
    }
    if needed > cap {
        return Err(Error::Budget { needed, cap });
    }

    let mut items = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let prefix = prefix_operands(template, group.start);
        let rest: Vec<usize> = (0..n_ops)
            .filter(|i| !prefix.contains(i) && Some(*i) != group.operand)
            .collect();
        for value in conditioning_values(template, group) {
            let mut prompts = Vec::new();
            let mut operands = vec![*range.first().unwrap_or(&0); n_ops];
            if let (Some(k), Some(v)) = (group.operand, value) {
                operands[k] = v;
            }
            for prefix_vals in grid(&range, prefix.len()) {
                for (&i, &v) in prefix.iter().zip(&prefix_vals) {
                    operands[i] = v;
                }
                // Weight: number of valid completions of the remaining operands.
                let mut weight = 0u64;
                for rest_vals in grid(&range, rest.len()) {
                    for (&i, &v) in rest.iter().zip(&rest_vals) {
                        operands[i] = v;
                    }
                    if template.answer(&operands).is_some() {
                        weight += 1;
                    }
                }
                if weight > 0 {
                    prompts.push((render_prefix(template, vocab, &operands, group.end)?, weight));
                }
            }
            if let Some((tokens, _)) = prompts.first() {
                let key = tokens[group.end];
                items.push(WorkItem {
                    group: g,
                    key,
                    prompts,
                });
            }
        }
    }
    Ok(items)
}

/// Cartesian power of `values`, in lexicographic order.
fn grid(values: &[u32], arity: usize) -> impl Iterator<Item = Vec<u32>> + '_ {
    let total = values.len().pow(arity as u32);
    (0..total).map(move |mut idx| {
        let mut out = vec![0u32; arity];
        for slot in out.iter_mut().rev() {
            *slot = values[idx % values.len()];
            idx /= values.len();
        }
        out
    })
}

fn estimate(
    weights: &ModelWeights,
    template: &Template,
    groups: &[TokenGroup],
    items: Vec<WorkItem>,
    l_waits: &[usize],
    estimator: Estimator,
    options: CamaOptions,
) -> Result<Vec<CamaCache>> {
    let n_layers = weights.config.n_layers;
    if let Some(&bad) = l_waits.iter().find(|&&l| l > n_layers) {
        return Err(Error::Argument(format!(
            "l_wait {bad} exceeds n_layers {n_layers}"
        )));
    }
    if l_waits.is_empty() {
        return Err(Error::Argument("no wait depths requested".into()));
    }
    let d = weights.config.d_model;
    let upto = *l_waits.iter().max().unwrap();
    let empty = Default::default();

    // Each item is summed in sample order; items are independent, so the
    // result does not depend on how rayon schedules them.
    let sums: Vec<Result<(u64, Vec<Array2<f64>>)>> = items
        .par_iter()
        .map(|item| {
            let group = &groups[item.group];
            let mut acc = vec![Array2::<f64>::zeros((group.len(), d)); l_waits.len()];
            let mut count = 0u64;
            for (tokens, weight) in &item.prompts {
                let stack = residual_stack(weights, tokens, &empty, upto)?;
                for (slot, &l) in acc.iter_mut().zip(l_waits) {
                    let x = &stack[l];
                    for (row, pos) in group.positions().enumerate() {
                        for (a, &v) in slot.row_mut(row).iter_mut().zip(x.row(pos)) {
                            *a += *weight as f64 * v as f64;
                        }
                    }
                }
                count += weight;
            }
            Ok((count, acc))
        })
        .collect();

    let mut caches: Vec<CamaCache> = l_waits
        .iter()
        .map(|&l| CamaCache {
            template: template.name.clone(),
            l_wait: l,
            d_model: d,
            estimator,
            conditioning: options.conditioning,
            samples: options.samples,
            groups: groups.to_vec(),
            entries: vec![BTreeMap::new(); groups.len()],
        })
        .collect();
    for (item, sum) in items.iter().zip(sums) {
        let (count, acc) = sum?;
        for (cache, a) in caches.iter_mut().zip(acc) {
            let vectors = a.mapv(|v| (v / count as f64) as f32);
            cache.entries[item.group].insert(item.key, CamaEntry { count, vectors });
        }
    }
    Ok(caches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::embed;
    use crate::model::ModelConfig;

    fn tiny_weights() -> ModelWeights {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: Vocab::build().len(),
            max_seq: 12,
            norm_eps: 1e-5,
        };
        ModelWeights::init(cfg, &mut rng_from_seed(1)).unwrap()
    }

    #[test]
    fn layer_zero_cache_is_the_embedding() {
        let v = Vocab::build();
        let w = tiny_weights();
        let t = Template::builtin("A+B", &v).unwrap().with_operand_range(0..=4);
        for exhaustive in [false, true] {
            let opts = CamaOptions {
                samples: 7,
                exhaustive,
                ..CamaOptions::default()
            };
            let cache = build_cama(&w, &t, &v, 0, opts, 3).unwrap();
            let inst = t.instance(&[3, 1], &v).unwrap();
            let got = cache.lookup(&inst.tokens).unwrap();
            let want = embed(&w, &inst.tokens);
            let bits = |a: &Array2<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&got), bits(&want));
        }
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build();
        let w = tiny_weights();
        let t = Template::builtin("A+B-C", &v).unwrap().with_operand_range(0..=2);
        let cache = build_cama(&w, &t, &v, 1, CamaOptions { samples: 3, ..Default::default() }, 9)
            .unwrap();
        let back = CamaCache::from_bytes(&cache.to_bytes()).unwrap();
        assert_eq!(back, cache);
    }

    #[test]
    fn exhaustive_budget_is_enforced() {
        let v = Vocab::build();
        let w = tiny_weights();
        let t = Template::builtin("A+B+C", &v).unwrap();
        let opts = CamaOptions {
            exhaustive: true,
            ..CamaOptions::default()
        };
        assert!(matches!(
            build_cama(&w, &t, &v, 1, opts, 0),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn infeasible_values_get_no_entry() {
        let v = Vocab::build();
        let w = tiny_weights();
        let t = Template::builtin("A/B", &v).unwrap().with_operand_range(0..=3);
        for exhaustive in [false, true] {
            let opts = CamaOptions {
                samples: 4,
                exhaustive,
                ..CamaOptions::default()
            };
            let cache = build_cama(&w, &t, &v, 1, opts, 0).unwrap();
            assert!(!cache.entries[1].contains_key(&v.number(0).unwrap()));
            assert!(cache.entries[1].contains_key(&v.number(2).unwrap()));
        }
    }

    #[test]
    fn exhaustive_weights_count_valid_completions() {
        let v = Vocab::build();
        let w = tiny_weights();
        // A-B over 0..=2: B=1 allows A in {1,2}; the '=' group covers all 6 valid pairs.
        let t = Template::builtin("A-B", &v).unwrap().with_operand_range(0..=2);
        let opts = CamaOptions {
            exhaustive: true,
            ..CamaOptions::default()
        };
        let cache = build_cama(&w, &t, &v, 1, opts, 0).unwrap();
        assert_eq!(cache.entries[1][&v.number(1).unwrap()].count, 2);
        assert_eq!(cache.entries[2].values().next().unwrap().count, 6);
        // A=0 only pairs with B=0.
        assert_eq!(cache.entries[0][&v.number(0).unwrap()].count, 1);
    }

    #[test]
    fn sampling_is_deterministic() {
        let v = Vocab::build();
        let w = tiny_weights();
        let t = Template::builtin("A+B", &v).unwrap().with_operand_range(0..=9);
        let opts = CamaOptions {
            samples: 5,
            ..CamaOptions::default()
        };
        let a = build_cama(&w, &t, &v, 2, opts, 42).unwrap();
        let b = build_cama(&w, &t, &v, 2, opts, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rtma_first_position_is_exact() {
        let v = Vocab::build();
        let w = tiny_weights();
        let t = Template::builtin("A+B", &v).unwrap().with_operand_range(0..=3);
        let caches = build_rtma(&w, &t, &v, &[1], 4, 5).unwrap();
        let cache = &caches[0];
        assert_eq!(cache.groups.len(), t.len());
        let bos = &cache.entries[0][&BOS];
        let x = residual_stack(&w, &[BOS], &Default::default(), 1).unwrap();
        assert_eq!(bos.vectors.row(0), x[1].row(0));
        assert_eq!(cache.entries[1].len(), 4);
    }
}
