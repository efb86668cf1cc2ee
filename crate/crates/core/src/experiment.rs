//! Runnable experiments behind the command-line front end.
//!
//! Every CSV written here starts with `#` comment lines holding the fully
//! resolved configuration and seed, so a file is enough to reproduce its run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use crate::agent::Agent;
use crate::baselines::{build_variant, Built, VariantSpec};
use crate::config::{ExperimentConfig, ScenarioConfig};
use crate::e2link::{self, DuSummary, RemoteEnv, ReplayRow};
use crate::error::{Error, Result};
use crate::sim::{Scenario, Simulator, TraceWriter};
use crate::trainer::{
    self, rollout, run_controller, tail_summary, train, Controller, Environment, EvalSummary, Greedy,
    MetricsWriter, StepRecord, TailSummary,
};

/// Comment block for a CSV header.
pub fn preamble(cfg: &ExperimentConfig, run: &str, variant: VariantSpec, seed: u64) -> String {
    format!(
        "ecoran {}\nrun = {run}\nrun_variant = {variant}\nrun_seed = {seed}\n--- resolved config ---\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.resolved()
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn comment_lines(out: &mut impl Write, text: &str) -> Result<()> {
    for line in text.lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

/// Result of training (or running) one variant on one environment.
#[derive(Debug)]
pub struct RunResult {
    pub variant: VariantSpec,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub tail: TailSummary,
    /// Present for learned variants.
    pub agent: Option<Agent>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

/// Train a learned variant (or run a fixed one) for `cfg.train.total_timesteps`
/// steps on `env`.
pub fn run_variant<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    variant: VariantSpec,
    seed: u64,
    outputs: &RunOutputs,
) -> Result<RunResult> {
    let mut writer = match &outputs.metrics {
        Some(p) => Some(MetricsWriter::new(create(p)?, &preamble(cfg, "train", variant, seed))?),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoints {
        fs::create_dir_all(dir)?;
    }
    let (records, agent) = match build_variant(variant, &cfg.agent, scenario, seed)? {
        Built::Learner(mut agent) => {
            let every = cfg.checkpoint_every;
            let records = train(env, &mut agent, &cfg.train, seed, |r, a| {
                if let Some(w) = &mut writer {
                    w.record(r)?;
                }
                if let (Some(dir), true) = (&outputs.checkpoints, every > 0 && (r.t + 1) % every.max(1) == 0) {
                    a.save(&dir.join(format!("step_{}.ckpt", r.t + 1)))?;
                }
                Ok(())
            })?;
            if let Some(dir) = &outputs.checkpoints {
                agent.save(&dir.join("final.ckpt"))?;
            }
            (records, Some(agent))
        }
        Built::Fixed(mut controller) => {
            let records = run_controller(
                env,
                controller.as_mut(),
                cfg.train.total_timesteps,
                cfg.train.lambda_q,
                cfg.train.lambda_d,
                |r| match &mut writer {
                    Some(w) => w.record(r),
                    None => Ok(()),
                },
            )?;
            (records, None)
        }
    };
    if let Some(w) = &mut writer {
        w.flush()?;
    }
    let tail = tail_summary(&records, cfg.final_window as usize);
    Ok(RunResult {
        variant,
        seed,
        records,
        tail,
        agent,
    })
}

/// Greedy evaluation of a learned agent, or plain evaluation of a fixed
/// controller, on the configured evaluation episodes.
pub fn evaluate_built(built: &mut Built, cfg: &ExperimentConfig, scenario: &Scenario) -> Result<EvalSummary> {
    let make = |ep: u64| Simulator::new(scenario.clone(), cfg.eval.seed_offset + ep);
    match built {
        Built::Learner(agent) => trainer::evaluate(agent, make, cfg.eval.episodes, cfg.eval.steps, &cfg.train),
        Built::Fixed(c) => evaluate_controller(c.as_mut(), cfg, scenario),
    }
}

pub fn evaluate_controller<C: Controller + ?Sized>(c: &mut C, cfg: &ExperimentConfig, scenario: &Scenario) -> Result<EvalSummary> {
    let mut total = EvalSummary::default();
    for ep in 0..cfg.eval.episodes {
        let mut sim = Simulator::new(scenario.clone(), cfg.eval.seed_offset + ep)?;
        let s = rollout(&mut sim, c, cfg.eval.steps, cfg.train.lambda_q, cfg.train.lambda_d)?;
        total = trainer::merge(total, s);
    }
    Ok(total)
}

pub fn evaluate_agent(agent: &Agent, cfg: &ExperimentConfig, scenario: &Scenario) -> Result<EvalSummary> {
    evaluate_controller(&mut Greedy(agent), cfg, scenario)
}

/// `train`: one run of `cfg.variant` on the in-process simulator, writing
/// `metrics.csv` and `checkpoints/`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunResult> {
    let scenario = cfg.scenario()?;
    let mut sim = Simulator::new(scenario.clone(), cfg.seed)?;
    run_variant(&mut sim, cfg, &scenario, cfg.variant, cfg.seed, &train_outputs(cfg))
}

fn train_outputs(cfg: &ExperimentConfig) -> RunOutputs {
    RunOutputs {
        metrics: Some(cfg.output_dir.join("metrics.csv")),
        checkpoints: cfg.variant.is_learned().then(|| cfg.output_dir.join("checkpoints")),
    }
}

pub const EVAL_COLUMNS: &str = "scope,steps,mean_reward,mean_sleep_ratio,violations,pairs,violation_ratio";

fn write_eval(path: &Path, cfg: &ExperimentConfig, s: &EvalSummary) -> Result<()> {
    let mut out = create(path)?;
    comment_lines(&mut out, &preamble(cfg, "eval", cfg.variant, cfg.seed))?;
    writeln!(out, "{EVAL_COLUMNS}")?;
    let (v, p) = s
        .per_slice
        .values()
        .fold((0, 0), |(v, p), x| (v + x.violations, p + x.pairs));
    writeln!(
        out,
        "all,{},{},{},{v},{p},{}",
        s.steps, s.mean_reward, s.mean_sleep_ratio, s.violation_ratio
    )?;
    for (id, sv) in &s.per_slice {
        let ratio = if sv.pairs == 0 { 0.0 } else { sv.violations as f64 / sv.pairs as f64 };
        writeln!(out, "slice_{id},{},,,{},{},{ratio}", s.steps, sv.violations, sv.pairs)?;
    }
    out.flush()?;
    Ok(())
}

/// `eval`: evaluate `cfg.variant`, loading `checkpoint` for learned variants.
/// Writes `eval.csv`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let scenario = cfg.scenario()?;
    let mut built = build_variant(cfg.variant, &cfg.agent, &scenario, cfg.seed)?;
    if let Built::Learner(agent) = &mut built {
        let path = checkpoint.ok_or_else(|| Error::config(format!("variant {} needs --checkpoint", cfg.variant)))?;
        agent.load(path)?;
    }
    let summary = evaluate_built(&mut built, cfg, &scenario)?;
    write_eval(&cfg.output_dir.join("eval.csv"), cfg, &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub variant: VariantSpec,
    pub seed: u64,
    pub tail: TailSummary,
    pub eval: EvalSummary,
}

pub const COMPARISON_COLUMNS: &str = "label,variant,seed,final_steps,final_reward,final_sleep_ratio,\
final_violation_ratio,eval_steps,eval_reward,eval_sleep_ratio,eval_violation_ratio";

fn write_comparison(path: &Path, preamble_text: &str, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = create(path)?;
    comment_lines(&mut out, preamble_text)?;
    writeln!(out, "{COMPARISON_COLUMNS}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.variant,
            r.seed,
            r.tail.steps,
            r.tail.mean_reward,
            r.tail.mean_sleep_ratio,
            r.tail.violation_ratio,
            r.eval.steps,
            r.eval.mean_reward,
            r.eval.mean_sleep_ratio,
            r.eval.violation_ratio
        )?;
    }
    out.flush()?;
    Ok(())
}

fn file_label(v: VariantSpec) -> String {
    v.to_string().replace(['(', ')', ':'], "_").trim_end_matches('_').to_string()
}

/// Run (or train) one variant on `scenario` with `seed`, evaluate the result,
/// and write its metrics to `metrics`.
pub fn compare_one(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    variant: VariantSpec,
    seed: u64,
    metrics: Option<PathBuf>,
    label: String,
) -> Result<ComparisonRow> {
    let mut sim = Simulator::new(scenario.clone(), seed)?;
    let outputs = RunOutputs {
        metrics,
        checkpoints: None,
    };
    let run = run_variant(&mut sim, cfg, scenario, variant, seed, &outputs)?;
    let eval = match &run.agent {
        Some(agent) => evaluate_agent(agent, cfg, scenario)?,
        None => {
            let mut built = build_variant(variant, &cfg.agent, scenario, seed)?;
            evaluate_built(&mut built, cfg, scenario)?
        }
    };
    Ok(ComparisonRow {
        label,
        variant,
        seed,
        tail: run.tail,
        eval,
    })
}

/// `ablate`: every configured variant on every configured seed. Writes one
/// metrics CSV per (variant, seed) and `comparison.csv`.
pub fn run_ablate(cfg: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    let scenario = cfg.scenario()?;
    let mut rows = Vec::new();
    for &variant in &cfg.ablation.variants {
        for &seed in &cfg.ablation.seeds {
            let name = format!("metrics_{}_s{seed}.csv", file_label(variant));
            let row = compare_one(cfg, &scenario, variant, seed, Some(cfg.output_dir.join(name)), variant.to_string())?;
            rows.push(row);
        }
    }
    write_comparison(
        &cfg.output_dir.join("comparison.csv"),
        &preamble(cfg, "ablate", cfg.variant, cfg.seed),
        &rows,
    )?;
    Ok(rows)
}

/// `scenario-grid`: `cfg.variant` on every (load, slice count) cell with
/// `grid.num_ues` UEs split evenly. Writes per-cell metrics and `grid.csv`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &level in &cfg.grid.levels {
        for &n in &cfg.grid.slice_counts {
            let sc = ScenarioConfig {
                frame: cfg.scenario.frame,
                packet_size_bytes: cfg.scenario.packet_size_bytes,
                churn_prob: cfg.scenario.churn_prob,
                ..ScenarioConfig::standard(level, n, cfg.grid.num_ues)
            };
            let scenario = sc.build()?;
            let label = format!("{}_{n}slices", level.name());
            let metrics = cfg.output_dir.join(format!("metrics_{label}.csv"));
            rows.push(compare_one(cfg, &scenario, cfg.variant, cfg.seed, Some(metrics), label)?);
        }
    }
    write_comparison(
        &cfg.output_dir.join("grid.csv"),
        &preamble(cfg, "scenario-grid", cfg.variant, cfg.seed),
        &rows,
    )?;
    Ok(rows)
}

/// `serve-du` on an already bound listener. Writes `du_trace.csv`.
pub fn run_serve_du_on(cfg: &ExperimentConfig, listener: &TcpListener, record: Option<PathBuf>) -> Result<DuSummary> {
    let scenario = cfg.scenario()?;
    let mut sim = Simulator::new(scenario, cfg.seed)?;
    let path = cfg.output_dir.join("du_trace.csv");
    let mut out = create(&path)?;
    comment_lines(&mut out, &preamble(cfg, "serve-du", cfg.variant, cfg.seed))?;
    let mut trace = TraceWriter::new(out)?;
    let summary = e2link::serve_du(&mut sim, listener, &cfg.link.du_config(record), |_, outcome, _| trace.record(outcome))?;
    trace.into_inner().flush()?;
    Ok(summary)
}

pub fn run_serve_du(cfg: &ExperimentConfig, record: Option<PathBuf>) -> Result<DuSummary> {
    let listener = TcpListener::bind(&cfg.link.address)?;
    run_serve_du_on(cfg, &listener, record)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RicMode {
    /// Train `cfg.variant` online against the remote cell.
    Train,
    /// Act greedily with a trained checkpoint (or a fixed variant).
    Act { checkpoint: Option<PathBuf> },
}

#[derive(Debug)]
pub enum RicResult {
    Trained(RunResult),
    Acted { policies: u64 },
}

/// `run-ric`: connect to a DU at `cfg.link.address`. Training writes the same
/// `metrics.csv` and checkpoints as `train`.
pub fn run_ric(cfg: &ExperimentConfig, mode: &RicMode, record: Option<&Path>) -> Result<RicResult> {
    let scenario = cfg.scenario()?;
    let mut env = RemoteEnv::connect(&cfg.link.address, Some((&scenario.frame, &scenario.slices)), record)?;
    let result = match mode {
        RicMode::Train => {
            let run = run_variant(&mut env, cfg, &scenario, cfg.variant, cfg.seed, &train_outputs(cfg))?;
            RicResult::Trained(run)
        }
        RicMode::Act { checkpoint } => {
            let mut built = build_variant(cfg.variant, &cfg.agent, &scenario, cfg.seed)?;
            let policies = match &mut built {
                Built::Learner(agent) => {
                    let path = checkpoint
                        .as_deref()
                        .ok_or_else(|| Error::config(format!("variant {} needs --checkpoint", cfg.variant)))?;
                    agent.load(path)?;
                    e2link::run_ric(&mut Greedy(agent), &mut env)?
                }
                Built::Fixed(c) => e2link::run_ric(c.as_mut(), &mut env)?,
            };
            RicResult::Acted { policies }
        }
    };
    env.close()?;
    Ok(result)
}

pub const REPLAY_COLUMNS: &str = "step,recorded_a,recorded_b,recorded_c,proposed_a,proposed_b,proposed_c,\
recorded_beta,proposed_beta,r_total,r_alpha,r_beta";

/// `replay`: re-score a recording against `cfg.variant` (from `checkpoint`
/// when learned). Writes `replay.csv`.
pub fn run_replay(cfg: &ExperimentConfig, recording: &Path, checkpoint: Option<&Path>) -> Result<Vec<ReplayRow>> {
    let scenario = cfg.scenario()?;
    let frames = e2link::read_recording(recording)?;
    let mut built = build_variant(cfg.variant, &cfg.agent, &scenario, cfg.seed)?;
    let rows = match &mut built {
        Built::Learner(agent) => {
            let path = checkpoint.ok_or_else(|| Error::config(format!("variant {} needs --checkpoint", cfg.variant)))?;
            agent.load(path)?;
            e2link::replay(&mut Greedy(agent), &frames, cfg.train.lambda_q, cfg.train.lambda_d)?
        }
        Built::Fixed(c) => e2link::replay(c.as_mut(), &frames, cfg.train.lambda_q, cfg.train.lambda_d)?,
    };
    let mut out = create(&cfg.output_dir.join("replay.csv"))?;
    comment_lines(&mut out, &preamble(cfg, "replay", cfg.variant, cfg.seed))?;
    writeln!(out, "# recording = {}", recording.display())?;
    writeln!(out, "{REPLAY_COLUMNS}")?;
    let join = |b: &[f64]| b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.recorded.a,
            r.recorded.b,
            r.recorded.c,
            r.proposed.a,
            r.proposed.b,
            r.proposed.c,
            join(r.recorded_allocation.fractions()),
            join(r.proposed_allocation.fractions()),
            r.reward.r_total,
            r.reward.r_alpha,
            r.reward.r_beta
        )?;
    }
    out.flush()?;
    Ok(rows)
}
