//! The six subcommands. Each one writes its artifacts plus
//! `<command>.manifest.json` into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _};
use serde::Serialize;

use martnet_core::evaluate::{
    curve_values, estimate_cost, evaluation_subset, fit_convergence_rate, relative_errors, ErrorReport,
};
use martnet_core::networks::{init_networks, NetworkBundle};
use martnet_core::problems::{Estimate, Mode, ProblemSpec};
use martnet_core::sde::{build_start_set, curve_point, s_grid, simulate_paths, PathBatch, TimeGrid};
use martnet_core::trainer::{train, MetricsRecord};

use crate::artifacts::{csv, metrics_jsonl, Manifest, MetricsWriter};
use crate::config::RunConfig;
use crate::formats::{load_checkpoint, load_paths, save_checkpoint, save_paths, write_atomic, CheckpointHeader, PathRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenPaths,
    Train,
    Eval,
    Curve,
    Convergence,
    Cost,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenPaths => "gen-paths",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Curve => "curve",
            Command::Convergence => "convergence",
            Command::Cost => "cost",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Command::GenPaths, Command::Train, Command::Eval, Command::Curve, Command::Convergence, Command::Cost]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

pub const PATHS_FILE: &str = "paths.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    /// Worker threads; never changes any artifact.
    pub workers: usize,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Context {
    pub fn new(out: impl Into<PathBuf>, workers: usize) -> Self {
        Self { out: out.into(), workers, verbose: false }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Runs `command` on a dedicated pool of `ctx.workers` threads and returns
/// the manifest it wrote.
pub fn run(command: Command, cfg: &RunConfig, ctx: &Context) -> anyhow::Result<Manifest> {
    if ctx.workers == 0 {
        bail!("--workers must be at least 1");
    }
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    if cfg.beyond_desk_scale() {
        eprintln!("warning: d = {}, M = {} is beyond desk scale; expect long runtimes and large memory use", cfg.d, cfg.paths);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(ctx.workers).build()?;
    pool.install(|| {
        let mut manifest = Manifest::new(command.name(), cfg);
        write_atomic(&ctx.file(CONFIG_FILE), manifest.config.as_bytes())?;
        match command {
            Command::GenPaths => gen_paths(cfg, ctx, &mut manifest)?,
            Command::Train => train_command(cfg, ctx, &mut manifest)?,
            Command::Eval => eval_command(cfg, ctx, &mut manifest)?,
            Command::Curve => curve_command(cfg, ctx, &mut manifest)?,
            Command::Convergence => convergence_command(cfg, ctx, &mut manifest)?,
            Command::Cost => cost_command(cfg, ctx, &mut manifest)?,
        }
        manifest.save(&ctx.file(&format!("{}.manifest.json", command.name())))?;
        Ok(manifest)
    })
}

fn emit(ctx: &Context, manifest: &mut Manifest, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
    write_atomic(&ctx.file(name), bytes)?;
    manifest.record(name, bytes);
    Ok(())
}

fn emit_json<T: Serialize>(ctx: &Context, manifest: &mut Manifest, name: &str, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    emit(ctx, manifest, name, s.as_bytes())
}

fn spec_of(cfg: &RunConfig) -> anyhow::Result<ProblemSpec> {
    Ok(cfg.problem_spec()?)
}

fn request(cfg: &RunConfig, spec: &ProblemSpec, steps: usize) -> PathRequest {
    PathRequest {
        problem_code: spec.preset.map_or(0, |p| p.code()),
        d: cfg.d,
        steps,
        paths: cfg.paths,
        horizon: spec.horizon,
        seed: cfg.seeds.paths,
    }
}

fn simulate(cfg: &RunConfig, spec: &ProblemSpec, steps: usize) -> anyhow::Result<PathBatch> {
    let grid = TimeGrid::uniform(spec.horizon, steps)?;
    let start = build_start_set(&spec.start, cfg.d, cfg.start_points, cfg.seeds.paths)?;
    Ok(simulate_paths(spec, &grid, &start, cfg.paths, cfg.seeds.paths)?)
}

/// Reuses `paths.bin` when its header matches the configuration, otherwise
/// simulates and caches a fresh batch.
fn cached_paths(cfg: &RunConfig, spec: &ProblemSpec, ctx: &Context) -> anyhow::Result<PathBatch> {
    let file = ctx.file(PATHS_FILE);
    let req = request(cfg, spec, cfg.steps);
    if file.exists() {
        let batch = load_paths(&file)?;
        if req.check(&batch).is_ok() {
            return Ok(batch);
        }
        if ctx.verbose {
            eprintln!("{} does not match the configuration; regenerating", file.display());
        }
    }
    let batch = simulate(cfg, spec, cfg.steps)?;
    save_paths(&batch, &file)?;
    Ok(batch)
}

fn gen_paths(cfg: &RunConfig, ctx: &Context, manifest: &mut Manifest) -> anyhow::Result<()> {
    let spec = spec_of(cfg)?;
    let batch = simulate(cfg, &spec, cfg.steps)?;
    emit(ctx, manifest, PATHS_FILE, &crate::formats::encode_paths(&batch))
}

fn evaluation_points(cfg: &RunConfig, spec: &ProblemSpec) -> anyhow::Result<Vec<Vec<f64>>> {
    let start = build_start_set(&spec.start, cfg.d, cfg.start_points, cfg.seeds.paths)?;
    Ok(evaluation_subset(&start, cfg.eval_points))
}

fn references(cfg: &RunConfig, spec: &ProblemSpec, points: &[Vec<f64>]) -> anyhow::Result<Vec<Estimate>> {
    points
        .iter()
        .enumerate()
        .map(|(i, x)| Ok(spec.reference_value(0.0, x, cfg.ref_samples, cfg.seeds.reference.wrapping_add(i as u64))?))
        .collect()
}

fn report(nets: &NetworkBundle, points: &[Vec<f64>], refs: &[Estimate]) -> anyhow::Result<ErrorReport> {
    Ok(relative_errors(&nets.value, points, |x| {
        let i = points.iter().position(|p| p.as_slice() == x).expect("evaluation point");
        Ok(refs[i])
    })?)
}

/// Trains fresh networks on `batch`, streaming metrics to `metrics` when given.
fn fit(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    batch: &PathBatch,
    ctx: &Context,
    metrics: Option<&Path>,
) -> anyhow::Result<(NetworkBundle, Vec<MetricsRecord>, Option<ErrorReport>)> {
    let mut nets = init_networks(&cfg.architecture(spec), spec.terminal, spec.horizon, spec.control.clone(), cfg.seeds.init)?;
    let points = evaluation_points(cfg, spec)?;
    // Problems without a reference solution train without error tracking.
    let tracked = cfg.eval_every > 0 && spec.reference_value(0.0, &points[0], 1, cfg.seeds.reference).is_ok();
    let refs = if tracked { references(cfg, spec, &points)? } else { Vec::new() };
    let mut writer = metrics.map(MetricsWriter::create).transpose()?;
    let last = cfg.train.iterations - 1;
    let clock = Instant::now();
    let mut final_report = None;
    let mut io_error = None;
    let mut observer = |rec: &mut MetricsRecord, nets: &NetworkBundle| -> martnet_core::Result<()> {
        if tracked && (rec.iter % cfg.eval_every == 0 || rec.iter == last) {
            let rep = report(nets, &points, &refs).map_err(|e| martnet_core::Error::InvalidArgument(e.to_string()))?;
            rec.re_l1 = Some(rep.re_l1);
            rec.re_linf = Some(rep.re_linf);
            if ctx.verbose {
                eprintln!("iter {:>6}  mart {:.3e}  re_l1 {:.4}  re_linf {:.4}", rec.iter, rec.mart_loss, rep.re_l1, rep.re_linf);
            }
            if rec.iter == last {
                final_report = Some(rep);
            }
        }
        if cfg.wall_time {
            rec.wall_ms = Some(clock.elapsed().as_secs_f64() * 1e3);
        }
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.push(rec) {
                io_error = Some(e);
                return Err(martnet_core::Error::InvalidArgument("metrics stream closed".into()));
            }
        }
        Ok(())
    };
    let result = train(spec, &mut nets, batch, &cfg.train, &mut observer);
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let trained = result?;
    Ok((nets, trained.records, final_report))
}

fn train_command(cfg: &RunConfig, ctx: &Context, manifest: &mut Manifest) -> anyhow::Result<()> {
    let spec = spec_of(cfg)?;
    let batch = cached_paths(cfg, &spec, ctx)?;
    let metrics_path = ctx.file(METRICS_FILE);
    let (nets, records, _) = fit(cfg, &spec, &batch, ctx, Some(&metrics_path))?;
    manifest.record(METRICS_FILE, metrics_jsonl(&records).as_bytes());
    let header = CheckpointHeader {
        problem_code: spec.preset.map_or(0, |p| p.code()),
        arch: cfg.architecture(&spec),
        seed: cfg.seeds.init,
        horizon: spec.horizon,
    };
    let bytes = crate::formats::encode_checkpoint(&nets, &header);
    save_checkpoint(&nets, &header, &ctx.file(CHECKPOINT_FILE))?;
    manifest.record(CHECKPOINT_FILE, &bytes);
    Ok(())
}

fn trained(cfg: &RunConfig, ctx: &Context) -> anyhow::Result<(ProblemSpec, NetworkBundle)> {
    let spec = spec_of(cfg)?;
    let file = ctx.file(CHECKPOINT_FILE);
    if !file.exists() {
        bail!("no checkpoint at {}; run `train` with the same config and output directory first", file.display());
    }
    let (nets, header) = load_checkpoint(&file, &spec)?;
    if header.arch != cfg.architecture(&spec) {
        bail!("checkpoint {} was written for a different network shape than the config describes", file.display());
    }
    Ok((spec, nets))
}

#[derive(Serialize)]
struct EvalSummary {
    re_l1: f64,
    re_linf: f64,
    points: usize,
}

fn eval_command(cfg: &RunConfig, ctx: &Context, manifest: &mut Manifest) -> anyhow::Result<()> {
    let (spec, nets) = trained(cfg, ctx)?;
    let points = evaluation_points(cfg, &spec)?;
    let refs = references(cfg, &spec, &points)?;
    let rep = report(&nets, &points, &refs)?;
    let rows: Vec<Vec<f64>> = rep.rows.iter().enumerate().map(|(i, r)| vec![i as f64, r.v_true, r.v_pred, r.stderr]).collect();
    emit(ctx, manifest, "eval.csv", csv(&["point", "v_true", "v_pred", "stderr"], &rows).as_bytes())?;
    emit_json(ctx, manifest, "eval.json", &EvalSummary { re_l1: rep.re_l1, re_linf: rep.re_linf, points: points.len() })
}

fn curve_command(cfg: &RunConfig, ctx: &Context, manifest: &mut Manifest) -> anyhow::Result<()> {
    let (spec, nets) = trained(cfg, ctx)?;
    let ss = s_grid(cfg.curve_points);
    let points: Vec<Vec<f64>> = ss.iter().map(|&s| curve_point(&cfg.curve, cfg.d, s)).collect::<Result<_, _>>()?;
    let refs = references(cfg, &spec, &points)?;
    let pred = curve_values(&nets.value, &points)?;
    let rows: Vec<Vec<f64>> = ss.iter().zip(&refs).zip(&pred).map(|((s, r), p)| vec![*s, r.value, *p, r.stderr]).collect();
    emit(ctx, manifest, "curve.csv", csv(&["s", "v_true", "v_pred", "stderr"], &rows).as_bytes())
}

#[derive(Serialize)]
struct RateSummary {
    slope: f64,
    intercept: f64,
    residual: f64,
    points: Vec<(usize, f64)>,
}

fn convergence_command(cfg: &RunConfig, ctx: &Context, manifest: &mut Manifest) -> anyhow::Result<()> {
    let spec = spec_of(cfg)?;
    let points = evaluation_points(cfg, &spec)?;
    let refs = references(cfg, &spec, &points)?;
    let mut local = cfg.clone();
    local.eval_every = 0;
    let mut results = Vec::new();
    for &n in &cfg.convergence_steps {
        local.steps = n;
        let batch = simulate(&local, &spec, n)?;
        let name = format!("metrics_n{n}.jsonl");
        let (nets, records, _) = fit(&local, &spec, &batch, ctx, Some(&ctx.file(&name)))?;
        manifest.record(&name, metrics_jsonl(&records).as_bytes());
        let rep = report(&nets, &points, &refs)?;
        if ctx.verbose {
            eprintln!("N = {n}: re_l1 {:.4}", rep.re_l1);
        }
        results.push((n, rep.re_l1));
    }
    let rows: Vec<Vec<f64>> = results.iter().map(|&(n, e)| vec![n as f64, e]).collect();
    emit(ctx, manifest, "convergence.csv", csv(&["N", "re_l1"], &rows).as_bytes())?;
    let pts: Vec<(f64, f64)> = results.iter().map(|&(n, e)| (n as f64, e)).collect();
    let fit = fit_convergence_rate(&pts)?;
    emit_json(
        ctx,
        manifest,
        "convergence.json",
        &RateSummary { slope: fit.slope, intercept: fit.intercept, residual: fit.residual, points: results },
    )
}

#[derive(Serialize)]
struct CostSummary {
    cost: f64,
    cost_stderr: f64,
    value: f64,
    value_stderr: f64,
    /// `cost − 1 − value`: the cost carries a constant offset of 1 that the
    /// value formula does not.
    excess: f64,
    rollouts: usize,
    x0: Vec<f64>,
}

fn cost_command(cfg: &RunConfig, ctx: &Context, manifest: &mut Manifest) -> anyhow::Result<()> {
    let (spec, nets) = trained(cfg, ctx)?;
    if spec.mode != Mode::Hjb {
        bail!("`cost` needs a control problem; `{}` is parabolic", spec.name());
    }
    let control = nets.control.as_ref().context("checkpoint has no control network")?;
    let grid = TimeGrid::uniform(spec.horizon, cfg.steps)?;
    let j = estimate_cost(&spec, control, cfg.rollouts, &grid, &cfg.x0, cfg.seeds.reference)?;
    let v = spec.reference_value(0.0, &cfg.x0, cfg.ref_samples, cfg.seeds.reference)?;
    emit_json(
        ctx,
        manifest,
        "cost.json",
        &CostSummary {
            cost: j.value,
            cost_stderr: j.stderr,
            value: v.value,
            value_stderr: v.stderr,
            excess: j.value - 1.0 - v.value,
            rollouts: cfg.rollouts,
            x0: cfg.x0.clone(),
        },
    )
}
