use std::path::{Path, PathBuf};
use std::time::Instant;

use af1_core::analysis::{
    ablate_every_layer, ablate_layer_last_token, export_attention, greedy_head_prune, logit_lens,
    LensNorm, PruneMode,
};
use af1_core::discovery::{
    compare_waits, select_af1, sweep_grid, GridResult, SubgraphConfig,
};
use af1_core::interventions::{build_cama_layers, build_rtma, CamaCache, CamaOptions, WaitKind};
use af1_core::tasks::{make_dataset, meta_path};
use af1_core::trainer::{self, EvalRecord};
use af1_core::util::derive_seed;
use af1_core::{Dataset, Error as CoreError, HeadId, HeadMode, ModelWeights, Template, Vocab};
use anyhow::{bail, Context, Result};
use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::manifest::{file_hash, Run, RunManifest};
use crate::{
    AblateArgs, AttnArgs, CacheKind, CamaAction, CamaArgs, Cli, Command, CompareArgs, DatasetArgs,
    GridArgs, HeadModeArg, LensArgs, PruneArgs, PruneModeArg, RerunArgs, SelectArgs, TrainArgs,
};

pub(crate) struct Ctx {
    pub ws: PathBuf,
    pub model_path: PathBuf,
    pub cfg: Config,
    pub vocab: Vocab,
    pub workers: usize,
    pub argv: Vec<String>,
}

/// File-system names for templates: `*` and `/` are not path-safe.
pub(crate) fn slug(template: &str) -> String {
    template.replace('*', "x").replace('/', "div")
}

pub(crate) fn data_path(ws: &Path, template: &str) -> PathBuf {
    ws.join("data").join(format!("{}.jsonl", slug(template)))
}

fn cache_path(ws: &Path, rtma: bool, template: &str, l_wait: usize) -> PathBuf {
    let dir = if rtma { "rtma" } else { "cama" };
    ws.join(dir).join(slug(template)).join(format!("L{l_wait}.af1c"))
}

pub(crate) fn grid_base(ws: &Path, template: &str, kind: WaitKind) -> PathBuf {
    ws.join("grid").join(format!("{}.{kind}", slug(template)))
}

pub(crate) fn analysis_path(ws: &Path, template: &str, suffix: &str) -> PathBuf {
    ws.join("analysis").join(format!("{}.{suffix}", slug(template)))
}

pub(crate) fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

fn argument(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Argument(msg.into()).into()
}

/// `a..b` (inclusive), `a..=b`, `a,b,c` or `a`.
pub(crate) fn parse_list(spec: &str) -> Result<Vec<usize>> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| argument(format!("{s:?} in {spec:?} is not a non-negative integer")))
    };
    let mut out = if let Some((a, b)) = spec.split_once("..") {
        let (lo, hi) = (num(a)?, num(b.trim_start_matches('='))?);
        if lo > hi {
            return Err(argument(format!("empty range {spec:?}")));
        }
        (lo..=hi).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Cells in first-seen order; repeats are dropped.
fn parse_cells(spec: &str) -> Result<Vec<(usize, usize)>> {
    let mut cells = Vec::new();
    for c in spec.split(',') {
        let (w, t) = c
            .split_once(':')
            .ok_or_else(|| argument(format!("cell {c:?} is not of the form w:t")))?;
        let cell = (parse_list(w)?[0], parse_list(t)?[0]);
        if !cells.contains(&cell) {
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Process CPU time (all threads) from procfs, in seconds.
fn cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    let rest = stat.rsplit_once(')')?.1;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: f64 = fields.get(11)?.parse().ok()?;
    let stime: f64 = fields.get(12)?.parse().ok()?;
    Some((utime + stime) / 100.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Selected {
    pub template: String,
    pub wait_kind: WaitKind,
    pub l_wait: usize,
    pub l_transfer: usize,
    pub faithfulness: f64,
    pub baseline: f64,
    pub theta: f64,
    /// 0-based index of the first layer that still runs.
    pub first_computed_layer: usize,
    /// 1-based numbering of the layers the wait vectors stand in for.
    pub replaced_layers_one_based: String,
}

impl Ctx {
    fn run(&self, command: &str) -> Run<'_> {
        Run::new(&self.ws, command, self.argv.clone(), &self.cfg, self.workers)
    }

    pub fn template(&self, name: &str) -> Result<Template> {
        let t = Template::builtin(name, &self.vocab)?
            .with_operand_range(0..=self.cfg.data.operand_max);
        t.validate()?;
        Ok(t)
    }

    fn model(&self, run: &mut Run) -> Result<ModelWeights> {
        run.input(&self.model_path)?;
        ModelWeights::load(&self.model_path)
            .with_context(|| format!("loading model {}", self.model_path.display()))
    }

    fn dataset(&self, run: &mut Run, template: &Template) -> Result<Dataset> {
        let path = data_path(&self.ws, &template.name);
        run.input(&path)?;
        run.input(&meta_path(&path))?;
        Ok(Dataset::load(&path)?)
    }

    fn load_caches(&self, run: &mut Run, kind: WaitKind, template: &str, waits: &[usize]) -> Result<Vec<CamaCache>> {
        let mut out = Vec::new();
        if !kind.needs_cache() {
            return Ok(out);
        }
        for &w in waits.iter().filter(|&&w| w > 0) {
            let path = cache_path(&self.ws, kind == WaitKind::Rtma, template, w);
            if path.exists() {
                run.input(&path)?;
                out.push(CamaCache::load(&path)?);
            }
        }
        Ok(out)
    }

    fn selected(&self, run: &mut Run, template: &str, kind: WaitKind) -> Result<Selected> {
        let path = with_ext(&grid_base(&self.ws, template, kind), "selected.json");
        run.input(&path)?;
        Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
    }
}

pub fn execute(cli: Cli, argv: Vec<String>) -> Result<()> {
    execute_with(cli, argv, None)
}

fn execute_with(cli: Cli, argv: Vec<String>, config: Option<Config>) -> Result<()> {
    if cli.workers == 0 {
        bail!(argument("--workers must be at least 1"));
    }
    let cfg = match config {
        Some(c) => c,
        None => Config::load(cli.config.as_deref())?,
    };
    let vocab = Vocab::build();
    let ctx = Ctx {
        model_path: cli.workspace.join(&cli.model),
        ws: cli.workspace.clone(),
        cfg,
        vocab,
        workers: cli.workers,
        argv,
    };
    std::fs::create_dir_all(&ctx.ws)
        .with_context(|| format!("creating workspace {}", ctx.ws.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()?;
    pool.install(|| match cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Dataset(a) => dataset(&ctx, a),
        Command::Cama { action: CamaAction::Build(a) } => cama_build(&ctx, a),
        Command::Grid(a) => grid(&ctx, a),
        Command::Select(a) => select(&ctx, a),
        Command::AblateLayer(a) => ablate(&ctx, a),
        Command::PruneHeads(a) => prune(&ctx, a),
        Command::LogitLens(a) => lens(&ctx, a),
        Command::AttnExport(a) => attn(&ctx, a),
        Command::CompareWaits(a) => waits(&ctx, a),
        Command::Report(a) => crate::report::report(&ctx, a),
        Command::Rerun(a) => rerun(&ctx, a),
    })
}

fn train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let mut cfg = ctx.cfg.train.clone();
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    cfg.seed = ctx.cfg.seed_for("train");
    let model_cfg = ctx.cfg.model_config(ctx.vocab.len());
    let mut run = ctx.run("train");
    let checkpoint = ctx.ws.join("checkpoint.af1w");
    let (wall0, cpu0) = (Instant::now(), cpu_seconds());
    let mut on_eval = |r: &EvalRecord, w: &ModelWeights| -> af1_core::Result<()> {
        eprintln!("{}", serde_json::to_string(r)?);
        w.save(&checkpoint)
    };
    let (weights, log) = trainer::train(&model_cfg, &cfg, &ctx.vocab, &mut on_eval)?;
    let wall = wall0.elapsed().as_secs_f64();
    let cpu = cpu_seconds().zip(cpu0).map(|(b, a)| b - a);

    run.output(&ctx.model_path, &weights.to_bytes())?;
    run.record_output(&checkpoint)?;
    let log_text: String = log
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<serde_json::Result<_>>()?;
    run.output(&ctx.ws.join("train_log.jsonl"), log_text.as_bytes())?;
    run.note("steps", cfg.steps);
    run.note("param_count", weights.param_count());
    run.note("model_hash", weights.content_hash());
    run.note("final_eval", log.last());
    run.note("wall_seconds", (wall * 10.0).round() / 10.0);
    run.note("cpu_seconds", cpu.map(|c| (c * 10.0).round() / 10.0));
    let path = run.finish("train")?;
    println!("trained {} steps in {wall:.0}s; manifest {}", cfg.steps, path.display());
    Ok(())
}

fn dataset(ctx: &Ctx, args: DatasetArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let n = args.n.unwrap_or(ctx.cfg.data.n);
    let mut run = ctx.run("dataset");
    let seed = derive_seed(ctx.cfg.seed_for("data"), &t.name, &[]);
    let filter = if args.unfiltered {
        None
    } else {
        Some(ctx.model(&mut run)?)
    };
    let d = make_dataset(&t, &ctx.vocab, n, seed, filter.as_ref())?;
    let path = data_path(&ctx.ws, &t.name);
    std::fs::create_dir_all(path.parent().unwrap())?;
    d.save(&path)?;
    run.record_output(&path)?;
    run.record_output(&meta_path(&path))?;
    run.note("n", n);
    run.note("filtered", !args.unfiltered);
    run.finish(&format!("dataset.{}", slug(&t.name)))?;
    println!("{} prompts for {} -> {}", d.len(), t.name, path.display());
    Ok(())
}

fn cama_build(ctx: &Ctx, args: CamaArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let mut run = ctx.run("cama build");
    let w = ctx.model(&mut run)?;
    let n = w.config.n_layers;
    let waits = parse_list(&args.l_wait.unwrap_or_else(|| format!("0..{n}")))?;
    if let Some(&bad) = waits.iter().find(|&&l| l > n) {
        bail!(argument(format!("l_wait {bad} exceeds n_layers {n}")));
    }
    let mut built = 0;
    if matches!(args.kind, CacheKind::Cama | CacheKind::Both) {
        let options = CamaOptions {
            samples: args.samples.unwrap_or(ctx.cfg.cama.samples),
            exhaustive: args.exhaustive || ctx.cfg.cama.exhaustive,
            ..Default::default()
        };
        let seed = derive_seed(ctx.cfg.seed_for("cama"), &t.name, &[]);
        for c in build_cama_layers(&w, &t, &ctx.vocab, &waits, options, seed)? {
            run.output(&cache_path(&ctx.ws, false, &t.name, c.l_wait), &c.to_bytes())?;
            built += 1;
        }
    }
    if matches!(args.kind, CacheKind::Rtma | CacheKind::Both) {
        let seed = derive_seed(ctx.cfg.seed_for("rtma"), &t.name, &[]);
        let samples = args.samples.unwrap_or(ctx.cfg.cama.rtma_samples);
        for c in build_rtma(&w, &t, &ctx.vocab, &waits, samples, seed)? {
            run.output(&cache_path(&ctx.ws, true, &t.name, c.l_wait), &c.to_bytes())?;
            built += 1;
        }
    }
    run.note("l_wait", &waits);
    run.finish(&format!("cama.{}", slug(&t.name)))?;
    println!("{built} caches for {}", t.name);
    Ok(())
}

fn grid(ctx: &Ctx, args: GridArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let kind: WaitKind = args.wait.parse()?;
    let mut run = ctx.run("grid");
    let w = ctx.model(&mut run)?;
    let n = w.config.n_layers;
    let waits = parse_list(&args.l_wait.unwrap_or_else(|| format!("0..{n}")))?;
    let transfers = parse_list(&args.l_transfer.unwrap_or_else(|| format!("0..{n}")))?;
    let d = ctx.dataset(&mut run, &t)?;
    let caches = ctx.load_caches(&mut run, kind, &t.name, &waits)?;
    let g = sweep_grid(&w, &t, kind, &waits, &transfers, &d, &caches)?;
    let star = select_af1(&g, ctx.cfg.grid.theta)
        .ok()
        .map(|c| (c.l_wait, c.l_transfer));
    let base = grid_base(&ctx.ws, &t.name, kind);
    run.output(&with_ext(&base, "json"), (serde_json::to_string_pretty(&g)? + "\n").as_bytes())?;
    run.output(&with_ext(&base, "csv"), g.to_csv().as_bytes())?;
    run.output(&with_ext(&base, "pgm"), g.to_pgm(star).as_bytes())?;
    run.output(&with_ext(&base, "svg"), g.to_svg(star).as_bytes())?;
    run.note("baseline", g.baseline);
    run.note("star", star);
    run.finish(&format!("grid.{}.{kind}", slug(&t.name)))?;
    println!(
        "{} cells for {} ({kind}); baseline {:.4}; star {:?}",
        g.cells.len(),
        t.name,
        g.baseline,
        star
    );
    Ok(())
}

fn select(ctx: &Ctx, args: SelectArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let kind: WaitKind = args.wait.parse()?;
    let theta = args.theta.unwrap_or(ctx.cfg.grid.theta);
    let mut run = ctx.run("select");
    let base = grid_base(&ctx.ws, &t.name, kind);
    let grid_path = with_ext(&base, "json");
    run.input(&grid_path)?;
    let g: GridResult = serde_json::from_str(
        &std::fs::read_to_string(&grid_path)
            .map_err(|e| CoreError::Missing(format!("{}: {e}", grid_path.display())))?,
    )?;
    let c = select_af1(&g, theta)?;
    let sel = Selected {
        template: t.name.clone(),
        wait_kind: kind,
        l_wait: c.l_wait,
        l_transfer: c.l_transfer,
        faithfulness: c.faithfulness,
        baseline: g.baseline,
        theta,
        first_computed_layer: c.l_wait,
        replaced_layers_one_based: if c.l_wait == 0 {
            "none".into()
        } else {
            format!("1..={}", c.l_wait)
        },
    };
    run.output(
        &with_ext(&base, "selected.json"),
        (serde_json::to_string_pretty(&sel)? + "\n").as_bytes(),
    )?;
    run.note("theta", theta);
    run.finish(&format!("select.{}.{kind}", slug(&t.name)))?;
    println!(
        "selected ({}, {}) faithfulness {:.4} (baseline {:.4}, theta {theta})",
        c.l_wait, c.l_transfer, c.faithfulness, g.baseline
    );
    Ok(())
}

fn ablate(ctx: &Ctx, args: AblateArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let mut run = ctx.run("ablate-layer");
    let w = ctx.model(&mut run)?;
    let d = ctx.dataset(&mut run, &t)?;
    let reports = match args.layer {
        Some(l) => [(l, ablate_layer_last_token(&w, &t, l, &d)?)].into_iter().collect(),
        None => ablate_every_layer(&w, &t, &d)?,
    };
    let mut csv = String::from("layer,faithfulness,n_eval\n");
    for (l, r) in &reports {
        csv.push_str(&format!("{l},{:.6},{}\n", r.score, r.n_eval));
    }
    let name = match args.layer {
        Some(l) => format!("ablate.L{l}"),
        None => "ablate".into(),
    };
    let base = analysis_path(&ctx.ws, &t.name, &name);
    run.output(&with_ext(&base, "csv"), csv.as_bytes())?;
    run.output(&with_ext(&base, "json"), (serde_json::to_string_pretty(&reports)? + "\n").as_bytes())?;
    run.finish(&format!("{name}.{}", slug(&t.name)))?;
    print!("{csv}");
    Ok(())
}

fn prune(ctx: &Ctx, args: PruneArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let mut run = ctx.run("prune-heads");
    let w = ctx.model(&mut run)?;
    let d = ctx.dataset(&mut run, &t)?;
    let n = w.config.n_layers;
    let caches;
    let (mode, default_layers, tag) = match args.mode {
        PruneModeArg::Af1 => {
            let kind: WaitKind = args.wait.parse()?;
            let (lw, lt) = match (args.l_wait, args.l_transfer) {
                (Some(a), Some(b)) => (a, b),
                (None, None) => {
                    let s = ctx.selected(&mut run, &t.name, kind)?;
                    (s.l_wait, s.l_transfer)
                }
                _ => bail!(argument("give both --l-wait and --l-transfer, or neither")),
            };
            caches = ctx.load_caches(&mut run, kind, &t.name, &[lw])?;
            if kind.needs_cache() && lw > 0 && caches.is_empty() {
                bail!(CoreError::Missing(format!("{kind} cache for {} at l_wait {lw}", t.name)));
            }
            run.note("subgraph", (lw, lt, kind));
            let config = SubgraphConfig::new(lw, lt, kind);
            (
                PruneMode::Af1 { config, cache: caches.first() },
                (lw..lw + lt).collect::<Vec<_>>(),
                "af1".to_string(),
            )
        }
        PruneModeArg::Full => {
            let head_mode = match args.head_mode {
                HeadModeArg::Cross => HeadMode::DisabledCrossToken,
                HeadModeArg::Off => HeadMode::FullyDisabled,
            };
            run.note("head_mode", head_mode);
            (PruneMode::FullModel { head_mode }, (0..n).collect(), "full".to_string())
        }
    };
    let layers = match &args.layers {
        Some(spec) => parse_list(spec)?,
        None => default_layers,
    };
    if layers.is_empty() {
        bail!(argument("the transfer window is empty; pass --layers"));
    }
    let trace = greedy_head_prune(&w, &t, &mode, &layers, &d)?;
    let base = analysis_path(&ctx.ws, &t.name, &format!("prune.{tag}"));
    run.output(&with_ext(&base, "csv"), trace.to_csv().as_bytes())?;
    run.output(&with_ext(&base, "json"), (serde_json::to_string_pretty(&trace)? + "\n").as_bytes())?;
    run.note("layers", &layers);
    run.finish(&format!("prune.{}.{tag}", slug(&t.name)))?;
    print!("{}", trace.to_csv());
    Ok(())
}

fn lens(ctx: &Ctx, args: LensArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let k = args.k.unwrap_or(ctx.cfg.analysis.lens_k);
    let norm = match args.norm.as_deref() {
        None => ctx.cfg.analysis.lens_norm,
        Some("final") => LensNorm::FinalNorm,
        Some("raw") => LensNorm::Raw,
        Some(other) => bail!(argument(format!("--norm must be final or raw, got {other:?}"))),
    };
    let mut run = ctx.run("logit-lens");
    let w = ctx.model(&mut run)?;
    let d = ctx.dataset(&mut run, &t)?;
    let report = logit_lens(&w, &d, k, norm)?;
    let base = analysis_path(&ctx.ws, &t.name, &format!("lens.k{k}"));
    run.output(&with_ext(&base, "csv"), report.to_csv().as_bytes())?;
    run.output(&with_ext(&base, "json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    run.finish(&format!("lens.{}.k{k}", slug(&t.name)))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn attn(ctx: &Ctx, args: AttnArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let head: HeadId = args.head.parse()?;
    let mut run = ctx.run("attn-export");
    let w = ctx.model(&mut run)?;
    let d = ctx.dataset(&mut run, &t)?;
    let n = args.n.unwrap_or(ctx.cfg.analysis.attention_prompts).min(d.len());
    let prompts: Vec<Vec<u32>> = d.instances[..n].iter().map(|i| i.tokens.clone()).collect();
    let m = export_attention(&w, head, &prompts, t.labels(&ctx.vocab), None)?;
    let path = with_ext(&analysis_path(&ctx.ws, &t.name, &format!("attn.{head}")), "csv");
    run.output(&path, m.to_csv().as_bytes())?;
    run.note("prompts", n);
    run.finish(&format!("attn.{}.{head}", slug(&t.name)))?;
    print!("{}", m.to_csv());
    Ok(())
}

fn waits(ctx: &Ctx, args: CompareArgs) -> Result<()> {
    let t = ctx.template(&args.template.template)?;
    let mut run = ctx.run("compare-waits");
    let w = ctx.model(&mut run)?;
    let n = w.config.n_layers;
    let cells = match &args.cells {
        Some(spec) => parse_cells(spec)?,
        None => {
            let s = ctx.selected(&mut run, &t.name, WaitKind::Cama)?;
            let mut c = vec![(s.l_wait, s.l_transfer), (s.l_wait, n - s.l_wait)];
            c.dedup();
            c
        }
    };
    let d = ctx.dataset(&mut run, &t)?;
    let depths: Vec<usize> = cells.iter().map(|&(w, _)| w).collect();
    let mut caches = ctx.load_caches(&mut run, WaitKind::Cama, &t.name, &depths)?;
    caches.extend(ctx.load_caches(&mut run, WaitKind::Rtma, &t.name, &depths)?);
    let cmp = compare_waits(&w, &t, &WaitKind::ALL, &cells, &d, &caches)?;
    let base = analysis_path(&ctx.ws, &t.name, "waits");
    run.output(&with_ext(&base, "csv"), cmp.to_csv().as_bytes())?;
    run.output(&with_ext(&base, "md"), cmp.to_markdown().as_bytes())?;
    run.output(&with_ext(&base, "json"), (serde_json::to_string_pretty(&cmp)? + "\n").as_bytes())?;
    run.finish(&format!("waits.{}", slug(&t.name)))?;
    print!("{}", cmp.to_markdown());
    Ok(())
}

fn rerun(ctx: &Ctx, args: RerunArgs) -> Result<()> {
    let manifest_path = if args.manifest.is_absolute() {
        args.manifest.clone()
    } else {
        ctx.ws.join(&args.manifest)
    };
    let original = std::fs::read(&manifest_path)
        .map_err(|e| CoreError::Missing(format!("{}: {e}", manifest_path.display())))?;
    let manifest = RunManifest::load(&manifest_path)?;
    manifest.verify(&ctx.ws, false)?;
    let mut cli = Cli::try_parse_from(&manifest.argv)
        .map_err(|e| argument(format!("manifest argv does not parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        bail!(argument("a rerun manifest cannot be replayed"));
    }
    cli.workspace = ctx.ws.clone();
    cli.workers = args.replay_workers.unwrap_or(manifest.workers);
    let workers = cli.workers;
    execute_with(cli, manifest.argv.clone(), Some(manifest.config.clone()))?;
    std::fs::write(&manifest_path, original)?;

    let mut mismatched = Vec::new();
    for (rel, want) in &manifest.outputs {
        if &file_hash(&ctx.ws.join(rel))? != want {
            mismatched.push(rel.clone());
        }
    }
    let summary = serde_json::json!({
        "manifest": manifest_path.to_string_lossy(),
        "command": manifest.command,
        "workers": workers,
        "outputs": manifest.outputs.len(),
        "identical": mismatched.is_empty(),
        "mismatched": mismatched,
    });
    println!("{summary}");
    if !mismatched.is_empty() {
        bail!(CoreError::Integrity(format!(
            "rerun of `{}` changed {} output(s)",
            manifest.command,
            mismatched.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges_parse() {
        assert_eq!(parse_list("0..6").unwrap(), (0..=6).collect::<Vec<_>>());
        assert_eq!(parse_list("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_list("4,1,1").unwrap(), vec![1, 4]);
        assert_eq!(parse_list("5").unwrap(), vec![5]);
        assert!(parse_list("3..1").is_err());
        assert!(parse_list("x").is_err());
        assert_eq!(parse_cells("3:2,1:5").unwrap(), vec![(3, 2), (1, 5)]);
        assert_eq!(parse_cells("2:4,2:4,0:6").unwrap(), vec![(2, 4), (0, 6)]);
        assert!(parse_cells("3-2").is_err());
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("A/B"), "AdivB");
        assert_eq!(slug("A*B"), "AxB");
        assert_eq!(slug("A+B-C"), "A+B-C");
    }
}
