//! `report.md`: a summary of every verified artifact in the workspace.

use std::fmt::Write as _;
use std::path::Path;

use af1_core::discovery::GridResult;
use af1_core::interventions::WaitKind;
use af1_core::trainer::raw_accuracy;
use af1_core::util::derive_seed;
use af1_core::{Dataset, Error as CoreError};
use anyhow::Result;

use crate::commands::{analysis_path, data_path, grid_base, slug, with_ext, Ctx, Selected};
use crate::manifest::RunManifest;
use crate::ReportArgs;

const REPORT_MANIFEST: &str = "report";

fn read_opt(path: &Path) -> Option<String> {
    std::fs::read_to_string(path).ok()
}

fn rel(ws: &Path, path: &Path) -> String {
    path.strip_prefix(ws).unwrap_or(path).to_string_lossy().into_owned()
}

/// Render a CSV artifact as a markdown table.
pub(crate) fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    let mut lines = csv.lines().filter(|l| !l.is_empty());
    let Some(header) = lines.next() else {
        return out;
    };
    let cols: Vec<&str> = header.split(',').collect();
    let _ = writeln!(out, "| {} |", cols.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
    for line in lines {
        let _ = writeln!(out, "| {} |", line.split(',').collect::<Vec<_>>().join(" | "));
    }
    out
}

/// Text heatmap with faithfulness to two decimals, rows by L_wait.
fn text_grid(g: &GridResult, star: Option<(usize, usize)>) -> String {
    let mut waits: Vec<usize> = g.cells.iter().map(|c| c.l_wait).collect();
    let mut transfers: Vec<usize> = g.cells.iter().map(|c| c.l_transfer).collect();
    waits.sort_unstable();
    waits.dedup();
    transfers.sort_unstable();
    transfers.dedup();
    let mut out = String::from("```\nL_wait \\ L_transfer");
    for t in &transfers {
        let _ = write!(out, " {t:>5}");
    }
    out.push('\n');
    for &w in &waits {
        let _ = write!(out, "{w:>19}");
        for &t in &transfers {
            match g.cell(w, t) {
                Some(c) if star == Some((w, t)) => {
                    let _ = write!(out, " *{:.2}", c.faithfulness);
                }
                Some(c) => {
                    let _ = write!(out, "  {:.2}", c.faithfulness);
                }
                None => out.push_str("     -"),
            }
        }
        out.push('\n');
    }
    out.push_str("```\n");
    out
}

fn load_manifests(ws: &Path) -> Result<Vec<(String, RunManifest)>> {
    let dir = ws.join("manifests");
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(&dir) else {
        return Ok(out);
    };
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        let Some(name) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        if path.extension().is_some_and(|e| e == "json") && name != REPORT_MANIFEST {
            out.push((name, RunManifest::load(&path)?));
        }
    }
    Ok(out)
}

fn templates_in_workspace(ws: &Path) -> Vec<String> {
    let mut names = Vec::new();
    if let Ok(entries) = std::fs::read_dir(ws.join("data")) {
        for e in entries.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "jsonl") {
                if let Ok(d) = Dataset::load(&p) {
                    names.push(d.template);
                }
            }
        }
    }
    names.sort();
    names
}

pub fn report(ctx: &Ctx, args: ReportArgs) -> Result<()> {
    let ws = &ctx.ws;
    let manifests = load_manifests(ws)?;
    for (_, m) in &manifests {
        m.verify(ws, false)?;
        m.verify(ws, true)?;
    }
    let mut run = crate::manifest::Run::new(ws, "report", ctx.argv.clone(), &ctx.cfg, ctx.workers);
    run.input(&ctx.model_path)?;
    let model = af1_core::ModelWeights::load(&ctx.model_path)?;
    let model_hash = model.content_hash();
    let templates = if args.templates.is_empty() {
        templates_in_workspace(ws)
    } else {
        args.templates.clone()
    };
    if templates.is_empty() {
        return Err(CoreError::Missing("no datasets in the workspace; run `dataset` first".into()).into());
    }

    let mut md = String::from("# AF1 report\n\n");
    let _ = writeln!(md, "Model `{}` ({} parameters, hash `{}`).\n", rel(ws, &ctx.model_path), model.param_count(), &model_hash[..16]);
    let _ = writeln!(md, "{} manifests verified against the files on disk.\n", manifests.len());
    md.push_str(
        "L_wait conventions: a cell (w, t) replaces the residual entering layer w \
         (0-based) with wait vectors, so layers 1..=w in 1-based numbering are \
         stood in for and layer w is the first computed layer. Layers w..w+t \
         let the last token read the full prompt; later layers see only <BOS> \
         and the last token itself.\n\n",
    );

    md.push_str("## Raw accuracy\n\n| template | accuracy | n |\n|---|---|---|\n");
    let eval_seed = ctx.cfg.seed_for("eval");
    let n_raw = ctx.cfg.data.n;
    for name in &templates {
        let t = ctx.template(name)?;
        let acc = raw_accuracy(&model, &t, &ctx.vocab, n_raw, derive_seed(eval_seed, name, &[]))?;
        let _ = writeln!(md, "| {name} | {acc:.4} | {n_raw} |");
    }
    md.push('\n');

    for name in &templates {
        let _ = writeln!(md, "## {name}\n");
        let dpath = data_path(ws, name);
        let dataset = Dataset::load(&dpath)?;
        if dataset.filter_model_hash.as_deref() != Some(model_hash.as_str()) {
            return Err(CoreError::Integrity(format!(
                "{} was not filtered with the current model",
                rel(ws, &dpath)
            ))
            .into());
        }
        run.input(&dpath)?;
        let _ = writeln!(md, "Dataset `{}`: {} prompts the model answers correctly.\n", rel(ws, &dpath), dataset.len());

        for kind in WaitKind::ALL {
            let base = grid_base(ws, name, kind);
            let Some(json) = read_opt(&with_ext(&base, "json")) else {
                continue;
            };
            let g: GridResult = serde_json::from_str(&json)?;
            let selected: Option<Selected> = read_opt(&with_ext(&base, "selected.json"))
                .map(|s| serde_json::from_str(&s))
                .transpose()?;
            let star = selected.as_ref().map(|s| (s.l_wait, s.l_transfer));
            let _ = writeln!(md, "### Grid ({kind} wait)\n");
            let _ = writeln!(md, "Baseline faithfulness {:.4}. Heatmap: [svg]({b}.svg), [pgm]({b}.pgm), [csv]({b}.csv).\n", g.baseline, b = rel(ws, &base));
            md.push_str(&text_grid(&g, star));
            md.push('\n');
            match &selected {
                Some(s) => {
                    let _ = writeln!(
                        md,
                        "Selected cell: L_wait {} (first computed layer {}, replaced layers {}), L_transfer {}, faithfulness {:.4} at theta {}.\n",
                        s.l_wait, s.first_computed_layer, s.replaced_layers_one_based, s.l_transfer, s.faithfulness, s.theta
                    );
                }
                None => md.push_str("No cell selected.\n\n"),
            }
        }

        let sections = [
            ("waits.md", "Wait mechanisms", false),
            ("ablate.csv", "Last-token attention ablation per layer", true),
            ("prune.af1.csv", "Head pruning inside the subgraph", true),
            ("prune.full.csv", "Head pruning in the full model", true),
        ];
        for (suffix, title, is_csv) in sections {
            let path = analysis_path(ws, name, suffix);
            if let Some(text) = read_opt(&path) {
                let _ = writeln!(md, "### {title}\n");
                md.push_str(&if is_csv { csv_to_markdown(&text) } else { text });
                let _ = writeln!(md, "\nSource: `{}`\n", rel(ws, &path));
            }
        }
        let prefix = format!("{}.", slug(name));
        let mut extra: Vec<_> = std::fs::read_dir(ws.join("analysis"))
            .map(|it| it.flatten().map(|e| e.path()).collect())
            .unwrap_or_default();
        extra.sort();
        for path in extra {
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let Some(rest) = file.strip_prefix(&prefix) else { continue };
            let title = if rest.starts_with("lens.") && rest.ends_with(".csv") {
                "Logit lens (fraction of prompts with the answer in the top k)"
            } else if rest.starts_with("attn.") && rest.ends_with(".csv") {
                "Mean attention"
            } else {
                continue;
            };
            if let Some(text) = read_opt(&path) {
                let _ = writeln!(md, "### {title}: `{rest}`\n");
                md.push_str(&csv_to_markdown(&text));
                md.push('\n');
            }
        }
    }

    let out = ws.join("report.md");
    run.output(&out, md.as_bytes())?;
    run.note("templates", &templates);
    run.finish(REPORT_MANIFEST)?;
    println!("{}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_becomes_table() {
        let md = csv_to_markdown("a,b\n1,2\n");
        assert_eq!(md, "| a | b |\n|---|---|\n| 1 | 2 |\n");
        assert_eq!(csv_to_markdown(""), "");
    }
}
