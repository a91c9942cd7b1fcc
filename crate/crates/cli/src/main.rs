//! `pipesim`: generate, compare, plan, simulate and verify pipeline schedules.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pipesim_core::analysis::{self, bubble_ratio, fits_memory, steady_state_idle};
use pipesim_core::dessim::{self, SimOptions, SyncPolicy};
use pipesim_core::oracle::{run_iteration, samples_needed, sequential_sgd, Batch, ToyModel};
use pipesim_core::perfmodel::{self, plan};
use pipesim_core::render::{gantt_ascii, gantt_svg};
use pipesim_core::schedgen::gen_schedule;
use pipesim_core::{ConfigViolation, CostProfile, Error, PipelineConfig, Rational, Scaling, Scheme};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "pipesim", version, about = "Pipeline-parallel training schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a schedule as JSON and an SVG Gantt chart.
    Schedule(ScheduleArgs),
    /// Bubble ratio, memory and throughput of every scheme.
    Compare(CompareArgs),
    /// Rank (W, D, B, scaling) plans for P workers.
    Plan(PlanArgs),
    /// Simulate one iteration including gradient synchronization.
    Simulate(SimulateArgs),
    /// Replay a schedule numerically against sequential SGD.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value = "chimera")]
    scheme: Scheme,
    /// Pipeline stages.
    #[arg(short = 'D', long = "depth", default_value_t = 4)]
    depth: u32,
    /// Micro-batches per iteration (defaults to D, or 1 for PipeDream).
    #[arg(short = 'N', long = "micro-batches")]
    micro_batches: Option<u32>,
    /// Replicated pipelines.
    #[arg(short = 'W', long = "width", default_value_t = 1)]
    width: u32,
    /// Micro-batch size.
    #[arg(short = 'B', long = "micro-batch-size", default_value_t = 1)]
    micro_batch_size: u32,
    /// Down pipelines (Chimera only).
    #[arg(long, default_value_t = 1)]
    f: u32,
    #[arg(long, default_value = "direct")]
    scaling: Scaling,
    #[arg(long)]
    recompute: bool,
}

impl ConfigArgs {
    fn config(&self) -> PipelineConfig {
        let n = self.micro_batches.unwrap_or(if self.scheme == Scheme::PipeDream { 1 } else { self.depth });
        PipelineConfig::new(self.scheme, self.depth, n)
            .with_width(self.width)
            .with_micro_batch_size(self.micro_batch_size)
            .with_f(self.f)
            .with_scaling(self.scaling)
            .with_recompute(self.recompute)
    }
}

#[derive(Args)]
struct ProfileArg {
    /// Profile JSON file.
    #[arg(long, env = "PIPESIM_PROFILE")]
    profile: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    profile: ProfileArg,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also print an ASCII Gantt chart.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(short = 'D', long = "depth", default_value_t = 4)]
    depth: u32,
    #[arg(short = 'N', long = "micro-batches")]
    micro_batches: Option<u32>,
    #[arg(short = 'W', long = "width", default_value_t = 1)]
    width: u32,
    #[arg(short = 'B', long = "micro-batch-size", default_value_t = 1)]
    micro_batch_size: u32,
    #[command(flatten)]
    profile: ProfileArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PlanArgs {
    /// Total workers.
    #[arg(short = 'P', long = "workers")]
    workers: u32,
    /// Mini-batch size.
    #[arg(long)]
    bhat: u32,
    #[arg(long, default_value = "chimera")]
    scheme: Scheme,
    /// Rows to print.
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[command(flatten)]
    profile: ProfileArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    profile: ProfileArg,
    #[arg(long, default_value = "end-of-iteration")]
    policy: SyncPolicy,
    /// Launch overhead of an eager allreduce (default 0.02 F_t).
    #[arg(long)]
    eager_overhead: Option<f64>,
    /// Write the timeline JSON and SVG here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    iterations: u32,
    /// Width of every toy layer.
    #[arg(long, default_value_t = 4)]
    layer_width: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Relative tolerance for PASS.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    json: bool,
}

/// Model the profile was measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelInfo {
    name: String,
    layers: u32,
    parameters: u64,
}

/// On-disk profile: cost scalars plus the model they describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    model: ModelInfo,
    profile: CostProfile,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(v) => Failure::input(violation_list(&v)),
            Error::InvalidArgument(_) | Error::NoFeasibleConfig => Failure::input(e.to_string()),
            _ => Failure::internal(format!("internal invariant violated: {e}")),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn violation_list(v: &[ConfigViolation]) -> String {
    let mut s = String::from("invalid configuration:");
    for x in v {
        s.push_str("\n  - ");
        s.push_str(&x.to_string());
    }
    s
}

fn load_profile(path: &Path) -> Result<ProfileFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let file: ProfileFile = serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("{}: malformed profile: {e}", path.display())))?;
    let v = file.profile.violations();
    if !v.is_empty() {
        return Err(Failure::input(violation_list(&v)));
    }
    Ok(file)
}

fn profile_or_default(arg: &ProfileArg) -> Result<CostProfile, Failure> {
    match &arg.profile {
        Some(p) => Ok(load_profile(p)?.profile),
        None => Ok(CostProfile::default()),
    }
}

fn require_profile(arg: &ProfileArg) -> Result<ProfileFile, Failure> {
    match &arg.profile {
        Some(p) => load_profile(p),
        None => Err(Failure::input("a profile is required (--profile or PIPESIM_PROFILE)")),
    }
}

fn check_config(c: &PipelineConfig) -> CmdResult {
    let v = c.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(Failure::input(violation_list(&v)))
    }
}

fn to_json<T: Serialize>(x: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(x).map_err(|e| Failure::internal(e.to_string()))
}

fn stem(c: &PipelineConfig) -> String {
    format!("{}_D{}_N{}", c.scheme, c.depth, c.micro_batches)
}

fn cmd_schedule(a: &ScheduleArgs) -> CmdResult {
    let c = a.config.config();
    check_config(&c)?;
    let profile = profile_or_default(&a.profile)?;
    let s = gen_schedule(&c)?;
    let timed = dessim::timed_compute(&s, &profile)?;
    fs::create_dir_all(&a.out)?;
    let base = a.out.join(stem(&c));
    fs::write(base.with_extension("json"), s.to_json())?;
    fs::write(base.with_extension("svg"), gantt_svg(&timed))?;
    if a.ascii {
        print!("{}", gantt_ascii(&s));
    }
    log::info!("wrote {}.{{json,svg}}", base.display());
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    scheme: Scheme,
    config: PipelineConfig,
    /// `[numerator, denominator]`; steady-state for asynchronous schemes.
    bubble_ratio: Rational,
    peak_mem: f64,
    recompute: bool,
    fits: bool,
    #[serde(rename = "T_predicted")]
    predicted_time: f64,
    throughput: f64,
}

fn compare_row(scheme: Scheme, a: &CompareArgs, profile: &CostProfile) -> Result<CompareRow, Failure> {
    let n = if scheme == Scheme::PipeDream { 1 } else { a.micro_batches.unwrap_or(a.depth) };
    let mut c = PipelineConfig::new(scheme, a.depth, n).with_width(a.width).with_micro_batch_size(a.micro_batch_size);
    check_config(&c)?;
    let fits = fits_memory(&c, profile) || {
        c = c.with_recompute(true);
        fits_memory(&c, profile)
    };
    let s = gen_schedule(&c)?;
    let timed = dessim::timed_compute(&s, &profile.without_communication())?;
    let bubble = if scheme.is_synchronous() {
        bubble_ratio(&timed)?
    } else {
        analysis::to_rational(steady_state_idle(&timed)?) / analysis::to_rational(timed.makespan())
    };
    let eff = perfmodel::effective_profile(&c, profile);
    let t = perfmodel::predict_T(&c, &eff)?;
    let samples = s.micro_batch_ids().len() as f64 * c.samples_per_id() * c.width as f64;
    Ok(CompareRow {
        scheme,
        config: c,
        bubble_ratio: bubble,
        peak_mem: analysis::peak_memory(&c, profile)?,
        recompute: c.recompute,
        fits,
        predicted_time: t,
        throughput: samples / t,
    })
}

fn cmd_compare(a: &CompareArgs) -> CmdResult {
    let file = require_profile(&a.profile)?;
    let rows = Scheme::ALL.iter().map(|&s| compare_row(s, a, &file.profile)).collect::<Result<Vec<_>, _>>()?;
    if a.json {
        println!("{}", to_json(&rows)?);
        return Ok(());
    }
    println!("model: {} ({} layers, {} parameters)", file.model.name, file.model.layers, file.model.parameters);
    println!(
        "{:<14} {:>10} {:>10} {:>14} {:>4} {:>12} {:>12}",
        "scheme", "bubble", "(approx)", "peak mem", "", "T", "samples/t"
    );
    for r in &rows {
        let flag = match (r.fits, r.recompute) {
            (false, _) => "OOM",
            (true, true) => "R",
            _ => "",
        };
        let approx = *r.bubble_ratio.numer() as f64 / *r.bubble_ratio.denom() as f64;
        println!(
            "{:<14} {:>10} {:>10.4} {:>14.4e} {:>4} {:>12.4} {:>12.4}",
            r.scheme.name(),
            r.bubble_ratio.to_string(),
            approx,
            r.peak_mem,
            flag,
            r.predicted_time,
            r.throughput
        );
    }
    Ok(())
}

fn cmd_plan(a: &PlanArgs) -> CmdResult {
    let file = require_profile(&a.profile)?;
    let entries = plan(a.workers, a.bhat, &file.profile, a.scheme)?;
    if a.json {
        println!("{}", to_json(&entries)?);
        return Ok(());
    }
    println!(
        "{:>4} {:>4} {:>4} {:>5} {:<17} {:>4} {:>12} {:>12}",
        "rank", "W", "D", "B", "scaling", "R", "T", "samples/t"
    );
    for (i, e) in entries.iter().take(a.top).enumerate() {
        let c = &e.config;
        println!(
            "{:>4} {:>4} {:>4} {:>5} {:<17} {:>4} {:>12.4} {:>12.4}",
            i + 1,
            c.width,
            c.depth,
            c.micro_batch_size,
            c.effective_scaling().name(),
            if c.effective_recompute() { "R" } else { "" },
            e.predicted_time,
            e.throughput
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SimSummary<'a> {
    config: PipelineConfig,
    policy: SyncPolicy,
    makespan: f64,
    compute_makespan: f64,
    allreduce_exposed: f64,
    per_worker_idle: &'a [f64],
    collectives: &'a [dessim::Collective],
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let c = a.config.config();
    check_config(&c)?;
    let profile = profile_or_default(&a.profile)?;
    let s = gen_schedule(&c)?;
    let mut opts = SimOptions::new(a.policy);
    if let Some(eps) = a.eager_overhead {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Failure::input("--eager-overhead must be finite and non-negative"));
        }
        opts = opts.with_eager_overhead(eps);
    }
    let r = dessim::simulate_with(&s, &profile, &opts)?;
    let summary = SimSummary {
        config: c,
        policy: a.policy,
        makespan: r.makespan,
        compute_makespan: r.compute_makespan,
        allreduce_exposed: r.allreduce_exposed,
        per_worker_idle: &r.per_worker_idle,
        collectives: &r.collectives,
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let base = dir.join(format!("{}_{}", stem(&c), a.policy));
        fs::write(base.with_extension("json"), r.timed.to_json())?;
        fs::write(base.with_extension("svg"), gantt_svg(&r.timed))?;
    }
    if a.json {
        println!("{}", to_json(&summary)?);
    } else {
        println!("policy            {}", a.policy);
        println!("makespan          {:.6}", r.makespan);
        println!("compute makespan  {:.6}", r.compute_makespan);
        println!("allreduce exposed {:.6}", r.allreduce_exposed);
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    config: PipelineConfig,
    iterations: u32,
    max_rel_dev: f64,
    tolerance: f64,
    pass: bool,
}

fn cmd_verify(a: &VerifyArgs) -> CmdResult {
    let c = a.config.config();
    check_config(&c)?;
    if a.layer_width == 0 || a.layer_width > 16 {
        return Err(Failure::input("--layer-width must be in 1..=16"));
    }
    let s = gen_schedule(&c)?;
    let mut pipe = ToyModel::uniform(c.depth as usize, a.layer_width, a.seed);
    let mut reference = pipe.clone();
    let mut worst: f64 = 0.0;
    for it in 0..a.iterations {
        let batch = Batch::random(samples_needed(&s), a.layer_width, a.layer_width, a.seed + 1 + it as u64);
        pipe = run_iteration(&s, &pipe, &batch, a.lr)?;
        reference = sequential_sgd(&reference, &batch, a.lr);
        worst = worst.max(pipe.rel_diff(&reference));
    }
    let report = VerifyReport {
        config: c,
        iterations: a.iterations,
        max_rel_dev: worst,
        tolerance: a.tol,
        pass: worst <= a.tol,
    };
    if a.json {
        println!("{}", to_json(&report)?);
    } else {
        println!("{} max relative deviation {worst:.3e}", if report.pass { "PASS" } else { "FAIL" });
    }
    // stale weights are expected to drift; synchronous drift is a bug
    if !report.pass && c.scheme.is_synchronous() {
        return Err(Failure::internal(format!("{} diverged from sequential SGD", c.scheme)));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Schedule(a) => cmd_schedule(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
