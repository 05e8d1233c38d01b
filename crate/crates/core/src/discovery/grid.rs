//! Grid sweeps over (l_wait, l_transfer), subgraph selection and heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{af1_evaluate, check_dataset, SubgraphConfig};
use crate::error::{Error, Result};
use crate::interventions::{CamaCache, Estimator, WaitKind};
use crate::model::ModelWeights;
use crate::tasks::{Dataset, Template};

pub const GRID_CSV_HEADER: &str = "l_wait,l_transfer,faithfulness,n_eval";
pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub l_wait: usize,
    pub l_transfer: usize,
    pub faithfulness: f64,
    pub n_eval: usize,
    pub n_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub template: String,
    pub wait_kind: WaitKind,
    pub n_layers: usize,
    pub dataset_hash: String,
    /// Score of the (0, n_layers) cell.
    pub baseline: f64,
    /// Sorted by (l_wait, l_transfer).
    pub cells: Vec<GridCell>,
}

fn cache_for(caches: &[CamaCache], kind: WaitKind, l_wait: usize) -> Option<&CamaCache> {
    caches.iter().find(|c| {
        c.l_wait == l_wait && ((c.estimator == Estimator::RandomToken) == (kind == WaitKind::Rtma))
    })
}

/// Caches for every positive depth in `l_waits`, or a missing-artifact error
/// naming the absent depths.
fn resolve_caches<'a>(
    caches: &'a [CamaCache],
    template: &Template,
    kind: WaitKind,
    l_waits: &[usize],
) -> Result<BTreeMap<usize, Option<&'a CamaCache>>> {
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for &w in l_waits {
        let cache = if kind.needs_cache() && w > 0 {
            let found = cache_for(caches, kind, w).filter(|c| c.template == template.name);
            if found.is_none() {
                missing.push(w);
            }
            found
        } else {
            None
        };
        out.insert(w, cache);
    }
    if !missing.is_empty() {
        return Err(Error::Missing(format!(
            "{kind} caches for template {} at l_wait {missing:?}",
            template.name
        )));
    }
    Ok(out)
}

fn score_cell(
    weights: &ModelWeights,
    template: &Template,
    cfg: &SubgraphConfig,
    dataset: &Dataset,
    cache: Option<&CamaCache>,
) -> Result<GridCell> {
    let mut n_correct = 0;
    for inst in &dataset.instances {
        if af1_evaluate(weights, template, cfg, &inst.tokens, cache)? == inst.answer_id {
            n_correct += 1;
        }
    }
    let n_eval = dataset.len();
    Ok(GridCell {
        l_wait: cfg.l_wait,
        l_transfer: cfg.l_transfer,
        faithfulness: n_correct as f64 / n_eval as f64,
        n_eval,
        n_correct,
    })
}

/// Evaluate every (l_wait, l_transfer) pair on the same dataset. A pair
/// whose window would run past the last layer is evaluated with the window
/// cut at the last layer and reported under its nominal coordinates.
pub fn sweep_grid(
    weights: &ModelWeights,
    template: &Template,
    wait_kind: WaitKind,
    l_waits: &[usize],
    l_transfers: &[usize],
    dataset: &Dataset,
    caches: &[CamaCache],
) -> Result<GridResult> {
    check_dataset(weights, template, dataset)?;
    let n = weights.config.n_layers;
    if let Some(&w) = l_waits.iter().find(|&&w| w > n) {
        return Err(Error::Argument(format!("l_wait {w} exceeds n_layers {n}")));
    }
    if let Some(&t) = l_transfers.iter().find(|&&t| t > n) {
        return Err(Error::Argument(format!("l_transfer {t} exceeds n_layers {n}")));
    }
    let resolved = resolve_caches(caches, template, wait_kind, l_waits)?;

    let mut coords: Vec<(usize, usize)> = l_waits
        .iter()
        .flat_map(|&w| l_transfers.iter().map(move |&t| (w, t)))
        .collect();
    coords.sort_unstable();
    coords.dedup();

    let cells = coords
        .par_iter()
        .map(|&(w, t)| {
            let cfg = SubgraphConfig::new(w, t.min(n - w), wait_kind);
            let mut cell = score_cell(weights, template, &cfg, dataset, resolved[&w])?;
            cell.l_transfer = t;
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = match cells.iter().find(|c| c.l_wait == 0 && c.l_transfer == n) {
        Some(c) => c.faithfulness,
        None => {
            score_cell(weights, template, &SubgraphConfig::new(0, n, wait_kind), dataset, None)?
                .faithfulness
        }
    };
    Ok(GridResult {
        template: template.name.clone(),
        wait_kind,
        n_layers: n,
        dataset_hash: dataset.content_hash(),
        baseline,
        cells,
    })
}

/// Among cells scoring at least `theta * baseline`, take the deepest wait,
/// then the shortest transfer window.
pub fn select_af1(grid: &GridResult, theta: f64) -> Result<GridCell> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Argument(format!("threshold fraction {theta} outside [0, 1]")));
    }
    let threshold = theta * grid.baseline;
    // A zero baseline would let every cell qualify.
    let usable = grid.baseline > 0.0;
    grid.cells
        .iter()
        .filter(|c| usable && c.faithfulness >= threshold)
        .min_by_key(|c| (std::cmp::Reverse(c.l_wait), c.l_transfer))
        .copied()
        .ok_or_else(|| {
            let best = grid
                .cells
                .iter()
                .max_by(|a, b| {
                    a.faithfulness
                        .total_cmp(&b.faithfulness)
                        .then(a.l_wait.cmp(&b.l_wait))
                })
                .map(|c| format!("({}, {}) at {:.4}", c.l_wait, c.l_transfer, c.faithfulness))
                .unwrap_or_else(|| "none (empty grid)".into());
            Error::Selection { threshold, best }
        })
}

impl GridResult {
    pub fn cell(&self, l_wait: usize, l_transfer: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.l_wait == l_wait && c.l_transfer == l_transfer)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(GRID_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            writeln!(out, "{},{},{:.6},{}", c.l_wait, c.l_transfer, c.faithfulness, c.n_eval).unwrap();
        }
        out
    }

    fn axes(&self) -> (Vec<usize>, Vec<usize>) {
        let mut waits: Vec<usize> = self.cells.iter().map(|c| c.l_wait).collect();
        let mut transfers: Vec<usize> = self.cells.iter().map(|c| c.l_transfer).collect();
        waits.sort_unstable();
        waits.dedup();
        transfers.sort_unstable();
        transfers.dedup();
        (waits, transfers)
    }

    /// Plain (P2) graymap, one block per cell: l_transfer left to right,
    /// l_wait top to bottom, white = 1. The star cell carries a centre dot.
    pub fn to_pgm(&self, star: Option<(usize, usize)>) -> String {
        const BLOCK: usize = 16;
        let (waits, transfers) = self.axes();
        let (width, height) = (transfers.len() * BLOCK, waits.len() * BLOCK);
        let mut out = format!("P2\n{width} {height}\n255\n");
        for &w in &waits {
            for y in 0..BLOCK {
                let mut line = Vec::with_capacity(width);
                for &t in &transfers {
                    let level = self
                        .cell(w, t)
                        .map(|c| (c.faithfulness.clamp(0.0, 1.0) * 255.0).round() as u8)
                        .unwrap_or(0);
                    for x in 0..BLOCK {
                        let centre = (6..10).contains(&x) && (6..10).contains(&y);
                        let v = if centre && star == Some((w, t)) {
                            if level > 127 { 0 } else { 255 }
                        } else {
                            level
                        };
                        line.push(v.to_string());
                    }
                }
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    /// Vector heatmap with axis labels, a fixed [0, 1] scale bar and the
    /// star cell marked.
    pub fn to_svg(&self, star: Option<(usize, usize)>) -> String {
        const CELL: usize = 40;
        const LEFT: usize = 70;
        const TOP: usize = 40;
        let (waits, transfers) = self.axes();
        let grid_w = transfers.len() * CELL;
        let grid_h = waits.len() * CELL;
        let width = LEFT + grid_w + 90;
        let height = TOP + grid_h + 60;
        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle">{} faithfulness, {} ({} layers)</text>"#,
            LEFT + grid_w / 2,
            self.template,
            self.wait_kind,
            self.n_layers
        )
        .unwrap();
        for (wi, &w) in waits.iter().enumerate() {
            let y = TOP + wi * CELL;
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{w}</text>"#,
                LEFT - 6,
                y + CELL / 2 + 4
            )
            .unwrap();
            for (ti, &t) in transfers.iter().enumerate() {
                let x = LEFT + ti * CELL;
                let Some(c) = self.cell(w, t) else { continue };
                let g = (c.faithfulness.clamp(0.0, 1.0) * 255.0).round() as u8;
                let ink = if g > 127 { "black" } else { "white" };
                writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})" stroke="gray"/>"#
                )
                .unwrap();
                writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" font-size="10" fill="{ink}">{:.2}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 4,
                    c.faithfulness
                )
                .unwrap();
                if star == Some((w, t)) {
                    writeln!(
                        s,
                        r#"<text x="{}" y="{}" text-anchor="end" font-size="14" fill="red">★</text>"#,
                        x + CELL - 2,
                        y + 14
                    )
                    .unwrap();
                }
            }
        }
        for (ti, &t) in transfers.iter().enumerate() {
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#,
                LEFT + ti * CELL + CELL / 2,
                TOP + grid_h + 16
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">L_transfer</text>"#,
            LEFT + grid_w / 2,
            TOP + grid_h + 40
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">L_wait</text>"#,
            TOP + grid_h / 2,
            TOP + grid_h / 2
        )
        .unwrap();
        let bar_x = LEFT + grid_w + 30;
        for i in 0..10 {
            let g = 255 - i * 255 / 9;
            writeln!(
                s,
                r#"<rect x="{bar_x}" y="{}" width="16" height="{}" fill="rgb({g},{g},{g})"/>"#,
                TOP + i * grid_h / 10,
                grid_h / 10 + 1
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}">1</text>"#, bar_x + 20, TOP + 10).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">0</text>"#, bar_x + 20, TOP + grid_h).unwrap();
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaitComparison {
    pub template: String,
    pub dataset_hash: String,
    /// (kind, cell) rows in kind order, then cell order.
    pub rows: Vec<(WaitKind, GridCell)>,
}

impl WaitComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("wait_kind,l_wait,l_transfer,faithfulness,n_eval\n");
        for (k, c) in &self.rows {
            writeln!(out, "{k},{},{},{:.6},{}", c.l_wait, c.l_transfer, c.faithfulness, c.n_eval).unwrap();
        }
        out
    }

    /// Markdown table: one row per cell, one column per wait mechanism.
    pub fn to_markdown(&self) -> String {
        let kinds: Vec<WaitKind> = {
            let mut k: Vec<WaitKind> = self.rows.iter().map(|(k, _)| *k).collect();
            k.dedup();
            k
        };
        let mut cells: Vec<(usize, usize)> =
            self.rows.iter().map(|(_, c)| (c.l_wait, c.l_transfer)).collect();
        cells.sort_unstable();
        cells.dedup();
        let mut out = String::from("| (L_wait, L_transfer) |");
        for k in &kinds {
            write!(out, " {} |", k.as_str().to_uppercase()).unwrap();
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(kinds.len()));
        out.push('\n');
        for (w, t) in cells {
            write!(out, "| ({w}, {t}) |").unwrap();
            for k in &kinds {
                let score = self
                    .rows
                    .iter()
                    .find(|(rk, c)| rk == k && c.l_wait == w && c.l_transfer == t)
                    .map(|(_, c)| format!("{:.3}", c.faithfulness))
                    .unwrap_or_else(|| "-".into());
                write!(out, " {score} |").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Score every wait mechanism on the same cells and dataset.
pub fn compare_waits(
    weights: &ModelWeights,
    template: &Template,
    kinds: &[WaitKind],
    cells: &[(usize, usize)],
    dataset: &Dataset,
    caches: &[CamaCache],
) -> Result<WaitComparison> {
    check_dataset(weights, template, dataset)?;
    let n = weights.config.n_layers;
    let waits: Vec<usize> = cells.iter().map(|&(w, _)| w).collect();
    let mut rows = Vec::new();
    for &kind in kinds {
        let resolved = resolve_caches(caches, template, kind, &waits)?;
        let scored = cells
            .par_iter()
            .map(|&(w, t)| {
                let cfg = SubgraphConfig::new(w, t, kind);
                cfg.validate(n)?;
                score_cell(weights, template, &cfg, dataset, resolved[&w])
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(scored.into_iter().map(|c| (kind, c)));
    }
    Ok(WaitComparison {
        template: template.name.clone(),
        dataset_hash: dataset.content_hash(),
        rows,
    })
}
