use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use canvas_core::cost::report as cost_report;
use canvas_core::harness::dispatch::LeaderboardEntry;
use canvas_core::harness::mock::{spawn_mock_workers, MockBehavior};
use canvas_core::harness::{emit, EmitFormat, EvalTask, Harness, HarnessConfig};
use canvas_core::interp::{equivalence_check, execute, fc_sizes, input_dims, random_weights, DenseTensor, Oracle, Weights};
use canvas_core::ir::{self, IrDocument};
use canvas_core::sampler::{sample_parallel, DedupStore, SamplerConfig, SamplerError, SamplerStats};
use canvas_core::solver::{instantiate_target, solve, BackboneSpec, Budget, ConcreteKernel, Outcome};
use canvas_core::{Assignment, KernelTemplate};

#[derive(Parser)]
#[command(name = "canvas", version, about = "Kernel architecture search over fine-grained primitives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample legal kernel templates and write them as IR files.
    Sample(SampleArgs),
    /// Fit a template's free variables to a backbone under a budget.
    Solve(SolveArgs),
    /// Run a concrete kernel on a tensor.
    Interpret(InterpretArgs),
    /// Per-target and total cost of a solved kernel.
    Stats(StatsArgs),
    /// Emit a concrete kernel as IR or module source.
    Emit(EmitArgs),
    /// Sample, solve and evaluate kernels on connected workers.
    Search(SearchArgs),
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    nodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Per-class weights, e.g. `fc=2,bcast=0.5`.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 100_000)]
    max_attempts: usize,
}

#[derive(Args, Serialize)]
struct BudgetArgs {
    #[arg(long)]
    flops_frac: Option<f64>,
    #[arg(long)]
    params_frac: Option<f64>,
    #[arg(long)]
    max_flops: Option<u64>,
    #[arg(long)]
    max_params: Option<u64>,
}

impl BudgetArgs {
    fn budget(&self) -> Budget {
        Budget {
            max_flops: self.max_flops,
            max_params: self.max_params,
            flops_frac: self.flops_frac,
            params_frac: self.params_frac,
        }
    }
}

#[derive(Args, Serialize)]
struct SolveArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    kernel: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the solved IR here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    kernel: PathBuf,
    /// Concrete values, e.g. `C=4,H=6,W=6,KH=3,KW=3,G=1,x1=2`. Overrides the
    /// kernel's own `assign:` line.
    #[arg(long)]
    assign: Option<String>,
    /// Whitespace-separated input values; random when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Whitespace-separated fully-connected weights in node order, `[out, in]`
    /// row-major, one block per copy; random when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Compare against a reference convolution instead of printing the output.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// IR carrying a `solution:` line.
    #[arg(long)]
    kernel: PathBuf,
}

#[derive(Args)]
struct EmitArgs {
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long, default_value = "ir")]
    format: EmitFormat,
    /// Bind a solved kernel to a target of this backbone.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Target index; defaults to the reference target.
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Args, Serialize)]
struct SearchArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    budget_flops_frac: f64,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long)]
    nodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 16)]
    max_kernels: usize,
    #[arg(long, default_value = "report")]
    report: PathBuf,
    /// Training epochs per task; 0 asks workers for latency only.
    #[arg(long, default_value_t = 1)]
    epochs: u32,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Seconds without worker activity before giving up.
    #[arg(long, default_value_t = 600)]
    idle_timeout: u64,
    /// Serve in-process mock workers instead of waiting for real ones.
    #[arg(long, default_value_t = 0)]
    mock_workers: usize,
}

enum CliError {
    /// Bad input: exit 2.
    Validation(anyhow::Error),
    /// Sampling exhausted or kernel discarded: exit 3.
    Outcome(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Validation(e)
    }
}

type CliResult = Result<(), CliError>;

#[derive(Serialize, Default)]
struct Counts {
    sampled: u64,
    pruned: u64,
    deduped: u64,
    discarded: u64,
    accepted: u64,
}

impl Counts {
    fn from_sampler(s: &SamplerStats) -> Counts {
        let c = Counts {
            sampled: s.attempts,
            pruned: s.pruned,
            deduped: s.deduped,
            discarded: s.dead_ends,
            accepted: s.accepted,
        };
        c.check();
        c
    }

    fn check(&self) {
        assert_eq!(
            self.sampled,
            self.pruned + self.deduped + self.discarded + self.accepted,
            "report counts out of balance"
        );
    }
}

#[derive(Serialize)]
struct RunReport<'a, C: Serialize> {
    command: &'static str,
    config: &'a C,
    seed: u64,
    counts: Counts,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    leaderboard: Vec<LeaderboardEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outcome: Option<String>,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn seed_or_draw(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(rand::random)
}

fn load_backbone(path: &Path) -> anyhow::Result<BackboneSpec> {
    BackboneSpec::from_json(&read(path)?).with_context(|| format!("backbone {}", path.display()))
}

fn load_ir(path: &Path) -> anyhow::Result<IrDocument> {
    ir::parse(&read(path)?).with_context(|| format!("kernel {}", path.display()))
}

fn sampler_config(nodes: usize, seed: u64, weights: Option<&str>, max_attempts: usize) -> anyhow::Result<SamplerConfig> {
    let mut cfg = SamplerConfig::new(nodes, seed);
    cfg.max_attempts = max_attempts;
    if let Some(w) = weights {
        cfg.set_weights(w)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sample_templates(cfg: &SamplerConfig, jobs: usize, count: usize) -> Result<(Vec<KernelTemplate>, SamplerStats), CliError> {
    let store = DedupStore::new();
    sample_parallel(cfg, jobs, count, &store).map_err(|e| match e {
        SamplerError::Exhausted(_) => CliError::Outcome(e.into()),
        e => CliError::Validation(e.into()),
    })
}

fn cmd_sample(a: &SampleArgs) -> CliResult {
    let seed = seed_or_draw(a.seed);
    let cfg = sampler_config(a.nodes, seed, a.weights.as_deref(), a.max_attempts)?;
    let (kernels, stats) = sample_templates(&cfg, a.jobs, a.count)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = String::new();
    for (i, t) in kernels.iter().enumerate() {
        let name = format!("kernel-{i:04}.cir");
        write(&a.out.join(&name), &ir::emit_template(t))?;
        manifest.push_str(&format!("{:016x} {name}\n", t.iso_hash()));
    }
    write(&a.out.join("manifest"), &manifest)?;
    let report = RunReport {
        command: "sample",
        config: a,
        seed,
        counts: Counts::from_sampler(&stats),
        leaderboard: Vec::new(),
        outcome: None,
    };
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    write(&a.out.join("report.json"), &json)?;
    println!("seed {seed}: {} kernel(s) written to {}", kernels.len(), a.out.display());
    Ok(())
}

fn cmd_solve(a: &SolveArgs) -> CliResult {
    let seed = seed_or_draw(a.seed);
    let spec = load_backbone(&a.backbone)?;
    let doc = load_ir(&a.kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = solve(&doc.template, &spec, &a.budget.budget(), &mut rng).map_err(anyhow::Error::from)?;
    match outcome {
        Outcome::Solved(sol) => {
            let mut out = IrDocument::template(doc.template.clone());
            out.solution = Some(sol.clone());
            let text = out.emit();
            match &a.out {
                Some(p) => write(p, &text)?,
                None => print!("{text}"),
            }
            eprintln!(
                "seed {seed}: solved with G={} flops={} params={}{}",
                sol.g,
                sol.achieved_flops,
                sol.achieved_params,
                if sol.budget_unsaturated { " (budget unsaturated)" } else { "" }
            );
            Ok(())
        }
        Outcome::Discard(reason) => {
            let report = RunReport {
                command: "solve",
                config: a,
                seed,
                counts: Counts {
                    sampled: 1,
                    discarded: 1,
                    ..Counts::default()
                },
                leaderboard: Vec::new(),
                outcome: Some(format!("discarded: {reason}")),
            };
            println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
            Err(CliError::Outcome(anyhow!("kernel discarded: {reason}")))
        }
    }
}

fn parse_weights(k: &ConcreteKernel, text: &str) -> anyhow::Result<Weights> {
    let values = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| anyhow!("`{t}` is not a number")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let sizes = fc_sizes(k)?;
    let per_copy: usize = sizes.iter().map(|(_, o, i)| o * i).sum();
    let copies = k.replication.copies as usize;
    if values.len() != per_copy * copies {
        bail!("weights file holds {} values, kernel needs {}", values.len(), per_copy * copies);
    }
    let mut it = values.into_iter();
    let mut weights = Vec::with_capacity(copies);
    for _ in 0..copies {
        let mut m = std::collections::BTreeMap::new();
        for &(node, o, i) in &sizes {
            let data: Vec<f64> = it.by_ref().take(o * i).collect();
            m.insert(node, DenseTensor::new(vec![o, i], data)?);
        }
        weights.push(m);
    }
    Ok(weights)
}

fn concrete_from(doc: &IrDocument, assign: Option<&str>) -> anyhow::Result<ConcreteKernel> {
    let mut k = match doc.to_concrete() {
        Some(k) => k,
        None => ConcreteKernel::new(doc.template.clone(), Assignment::new()),
    };
    if let Some(text) = assign {
        k.assignment = text.parse().map_err(|e| anyhow!("--assign: {e}"))?;
    }
    k.check().context("kernel does not evaluate under its assignment")?;
    Ok(k)
}

fn cmd_interpret(a: &InterpretArgs) -> CliResult {
    let seed = seed_or_draw(a.seed);
    let doc = load_ir(&a.kernel)?;
    let k = concrete_from(&doc, a.assign.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(name) = &a.oracle {
        let oracle = Oracle::from_name(name).ok_or_else(|| anyhow!("unknown oracle `{name}`"))?;
        let err = equivalence_check(&k, oracle, a.trials, &mut rng).map_err(anyhow::Error::from)?;
        println!("oracle {} trials {} max_abs_error {err:e}", oracle.name(), a.trials);
        return Ok(());
    }
    let dims = input_dims(&k).map_err(anyhow::Error::from)?;
    let input = match &a.input {
        Some(p) => DenseTensor::parse(&read(p)?, dims).map_err(anyhow::Error::from)?,
        None => DenseTensor::random(dims, &mut rng),
    };
    let weights = match &a.weights {
        Some(p) => parse_weights(&k, &read(p)?)?,
        None => random_weights(&k, &mut rng).map_err(anyhow::Error::from)?,
    };
    let run = execute(&k, &weights, &input).map_err(anyhow::Error::from)?;
    println!("output {:?}", run.output.dims());
    print!("{}", run.output);
    println!("macs {}", run.flops);
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> CliResult {
    let spec = load_backbone(&a.backbone)?;
    let doc = load_ir(&a.kernel)?;
    let sol = doc
        .solution
        .as_ref()
        .ok_or_else(|| anyhow!("{} has no `solution:` line; run `canvas solve` first", a.kernel.display()))?;
    let r = cost_report(&spec, sol, &doc.template).map_err(anyhow::Error::from)?;
    println!(
        "{:<16} {:>8} {:>16} {:>16} {:>12} {:>12} {:>8} {:>8}",
        "target", "replaced", "flops", "params", "base_flops", "base_params", "flops_x", "params_x"
    );
    for row in &r.rows {
        println!(
            "{:<16} {:>8} {:>16} {:>16} {:>12} {:>12} {:>8.4} {:>8.4}",
            row.name,
            if row.replaced { "yes" } else { "no" },
            row.flops,
            row.params,
            row.baseline_flops,
            row.baseline_params,
            row.flops_ratio(),
            row.params_ratio()
        );
    }
    let ratio = |a: u64, b: u64| a as f64 / b.max(1) as f64;
    println!(
        "{:<16} {:>8} {:>16} {:>16} {:>12} {:>12} {:>8.4} {:>8.4}",
        "total",
        "",
        r.total_flops,
        r.total_params,
        r.original_flops,
        r.original_params,
        ratio(r.total_flops, r.original_flops),
        ratio(r.total_params, r.original_params)
    );
    println!("ideal_speedup {:.4}", r.ideal_speedup);
    Ok(())
}

fn cmd_emit(a: &EmitArgs) -> CliResult {
    let doc = load_ir(&a.kernel)?;
    let k = match (&a.backbone, &doc.solution) {
        (Some(b), Some(sol)) => {
            let spec = load_backbone(b)?;
            let i = match a.target {
                Some(i) => i,
                None => spec.reference_target().ok_or_else(|| anyhow!("backbone has no replaceable target"))?,
            };
            instantiate_target(&doc.template, &spec, sol, i).map_err(anyhow::Error::from)?
        }
        (Some(_), None) => return Err(anyhow!("--backbone needs a kernel with a `solution:` line").into()),
        (None, _) => {
            if doc.assignment.is_none() {
                return Err(anyhow!("kernel is not concrete: give it an `assign:` line or pass --backbone").into());
            }
            concrete_from(&doc, None)?
        }
    };
    print!("{}", emit(&k, a.format).map_err(anyhow::Error::from)?);
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> CliResult {
    let seed = seed_or_draw(a.seed);
    let spec = load_backbone(&a.backbone)?;
    let reference = spec
        .reference_target()
        .ok_or_else(|| anyhow!("backbone has no replaceable target"))?;
    let cfg = sampler_config(a.nodes, seed, None, 100_000)?;
    let (templates, stats) = sample_templates(&cfg, a.jobs, a.max_kernels)?;
    let mut counts = Counts::from_sampler(&stats);
    let budget = Budget::flops_frac(a.budget_flops_frac);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let kernel_dir = a.report.join("kernels");
    fs::create_dir_all(&kernel_dir).with_context(|| format!("creating {}", kernel_dir.display()))?;
    let mut tasks = Vec::new();
    for t in &templates {
        match solve(t, &spec, &budget, &mut rng).map_err(anyhow::Error::from)? {
            Outcome::Solved(sol) => {
                let k = instantiate_target(t, &spec, &sol, reference).map_err(anyhow::Error::from)?;
                let mut doc = IrDocument::concrete(&k);
                doc.solution = Some(sol);
                let text = doc.emit();
                let task_id = tasks.len() as u64;
                write(&kernel_dir.join(format!("task-{task_id:04}.cir")), &text)?;
                tasks.push(EvalTask {
                    task_id,
                    kernel_ir: text,
                    epochs: a.epochs,
                });
            }
            Outcome::Discard(reason) => {
                log::info!("discarding kernel {:016x}: {reason}", t.iso_hash());
                counts.accepted -= 1;
                counts.discarded += 1;
            }
        }
    }
    counts.check();
    let harness = Harness::bind(&a.listen).with_context(|| format!("listening on {}", a.listen))?;
    let addr = harness.local_addr().map_err(anyhow::Error::from)?;
    eprintln!("seed {seed}: {} task(s), listening on {addr}", tasks.len());
    let mocks = spawn_mock_workers(addr, a.mock_workers, &MockBehavior::default());
    let hcfg = HarnessConfig {
        theta: a.theta,
        idle_timeout: Some(Duration::from_secs(a.idle_timeout)),
        ..HarnessConfig::default()
    };
    let result = harness.run(tasks, &hcfg).map_err(anyhow::Error::from)?;
    for m in mocks {
        let _ = m.join();
    }
    write(
        &a.report.join("results.json"),
        &serde_json::to_string_pretty(&result).map_err(anyhow::Error::from)?,
    )?;
    let report = RunReport {
        command: "search",
        config: a,
        seed,
        counts,
        leaderboard: result.leaderboard.clone(),
        outcome: None,
    };
    write(
        &a.report.join("report.json"),
        &serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?,
    )?;
    println!("{} result(s); report in {}", result.results.len(), a.report.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(64),
            };
        }
    };
    let result = match &cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Interpret(a) => cmd_interpret(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Emit(a) => cmd_emit(a),
        Command::Search(a) => cmd_search(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Outcome(e)) => {
            eprintln!("{e:#}");
            ExitCode::from(3)
        }
    }
}
