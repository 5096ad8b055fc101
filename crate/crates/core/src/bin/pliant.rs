//! Command-line surface: plan, simulate, migrate, report, gen-trace,
//! calibrate and oracle-check.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pliant::domain::{ClusterState, ParallelizationPlan, TaskSpec};
use pliant::error::PlanError;
use pliant::planner::{plan, PlannerConfig};
use pliant::report::situation_report;
use pliant::sharding::{compile_migration, shard_layout, BandwidthModel};
use pliant::simulator::{simulate, SimConfig, SimTimeline, StragglerTrace};
use pliant::solver::{
    solve_division_minlp, solve_minimax_ilp, DivisionProblem, MinimaxAssignmentProblem,
};
use pliant::tracegen::{gen_trace, LevelRates, Situation};

#[derive(Parser)]
#[command(
    name = "pliant",
    about = "Straggler-aware parallelization planner and 1F1B training simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonInputs {
    /// Task description JSON.
    #[arg(long)]
    task: PathBuf,
    /// Cluster state JSON.
    #[arg(long)]
    cluster: PathBuf,
    /// Override the reserved memory gap in MiB.
    #[arg(long)]
    gap_mib: Option<f64>,
    /// Override the DP degree.
    #[arg(long)]
    dp: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Deduce the best parallelization plan for the cluster's current rates.
    Plan {
        #[command(flatten)]
        inputs: CommonInputs,
        /// Where to write the plan JSON.
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        /// Also dump grouping and division diagnostics.
        #[arg(long)]
        explain: bool,
        /// Enumerate DP degrees, e.g. --dp-range 2,4.
        #[arg(long, value_delimiter = ',')]
        dp_range: Option<Vec<u32>>,
    },
    /// Simulate iterative training under a straggler trace.
    Simulate {
        #[command(flatten)]
        inputs: CommonInputs,
        /// Straggler trace JSON.
        #[arg(long)]
        trace: PathBuf,
        /// Timeline CSV path; a full run record lands next to it as
        /// `<out>.run.json`.
        #[arg(long, short = 'o')]
        out: PathBuf,
        /// Iterations to simulate; defaults to covering the trace plus slack.
        #[arg(long)]
        iterations: Option<u64>,
        /// Re-plan trigger threshold.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Layers per migration batch.
        #[arg(long, default_value_t = 4)]
        pack_size: u32,
        /// Standby probe cadence in iterations.
        #[arg(long, default_value_t = 10)]
        probe_period: u64,
        /// Simulated planning latency in seconds.
        #[arg(long, default_value_t = 5.0)]
        planning_latency: f64,
        /// Root seed for measurement noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compile the migration schedule between two plans.
    Migrate {
        /// Task description JSON (for layer count and state sizes).
        #[arg(long)]
        task: PathBuf,
        /// The plan currently running.
        #[arg(long)]
        old: PathBuf,
        /// The plan to migrate to.
        #[arg(long)]
        new: PathBuf,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        /// Layers per migration batch.
        #[arg(long, default_value_t = 4)]
        pack_size: u32,
        /// Intra-node bandwidth in GB/s.
        #[arg(long, default_value_t = 400.0)]
        intra_gbps: f64,
        /// Inter-node bandwidth in GB/s.
        #[arg(long, default_value_t = 200.0)]
        inter_gbps: f64,
    },
    /// Aggregate a simulation run into per-situation means and ratios.
    Report {
        /// The `.run.json` record written by `simulate`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        /// Write CSV here instead of printing the table.
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Generate a straggler trace from a situation sequence.
    GenTrace {
        #[arg(long)]
        cluster: PathBuf,
        /// Comma-separated situation tags, e.g. normal,S1,S2,S6,normal.
        #[arg(long, value_delimiter = ',')]
        situations: Vec<String>,
        /// Iterations each situation lasts.
        #[arg(long, default_value_t = 30)]
        dwell: u64,
        /// Straggling rate of a level-1 straggler.
        #[arg(long, default_value_t = 2.62)]
        level1: f64,
        /// Straggling rate of a level-2 straggler.
        #[arg(long, default_value_t = 3.8)]
        level2: f64,
        /// Straggling rate of a level-3 straggler.
        #[arg(long, default_value_t = 5.42)]
        level3: f64,
        /// Measurement-noise amplitude carried in the trace.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Maximum seeded delay of each transition, in iterations.
        #[arg(long, default_value_t = 0)]
        jitter: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Fit tau/zeta coefficients from step-timing CSV rows
    /// (group_size,b,seconds).
    Calibrate {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Compare the exact solvers against brute-force oracles on random
    /// instances.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PlanError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PlanError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PlanError::config(format!("{}: {e}", path.display())))
}

fn write_output(path: &Option<PathBuf>, content: &str) -> Result<(), PlanError> {
    match path {
        Some(p) => {
            std::fs::write(p, content)?;
            eprintln!("wrote {}", p.display());
            Ok(())
        }
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn load_inputs(inputs: &CommonInputs) -> Result<(ClusterState, TaskSpec), PlanError> {
    let cluster: ClusterState = read_json(&inputs.cluster)?;
    let mut task: TaskSpec = read_json(&inputs.task)?;
    if let Some(gap) = inputs.gap_mib {
        task.coefficients.gap_mib = gap;
    }
    if let Some(dp) = inputs.dp {
        task.dp_degree = dp;
    }
    Ok((cluster, task))
}

/// Render the chosen plan as a per-stage table: one block per pipeline,
/// stages with their GPU ranges and layer counts.
fn render_plan_table(plan: &ParallelizationPlan) -> String {
    let mut out = String::new();
    for (i, pipe) in plan.pipelines.iter().enumerate() {
        out.push_str(&format!(
            "pipeline {} | m = {} ({} stages)\n",
            i + 1,
            pipe.micro_batches,
            pipe.stages.len()
        ));
        for (j, stage) in pipe.stages.iter().enumerate() {
            let gpus = if stage.gpus.len() == 1 {
                format!("{}", stage.gpus[0])
            } else {
                format!("{}~{}", stage.gpus[0], stage.gpus[stage.gpus.len() - 1])
            };
            out.push_str(&format!(
                "  stage {:<2} tp={} gpus={:<12} layers={}\n",
                j + 1,
                stage.gpus.len(),
                gpus,
                stage.layers
            ));
        }
    }
    if !plan.removed.is_empty() {
        let removed: Vec<String> = plan.removed.iter().map(|g| g.to_string()).collect();
        out.push_str(&format!("removed: {}\n", removed.join(", ")));
    }
    out
}

fn cmd_plan(
    inputs: CommonInputs,
    out: Option<PathBuf>,
    explain: bool,
    dp_range: Option<Vec<u32>>,
) -> Result<(), PlanError> {
    let (cluster, task) = load_inputs(&inputs)?;
    let config = PlannerConfig { explain, dp_range, ..Default::default() };
    let report = plan(&cluster, &task, &config)?;
    eprintln!(
        "chosen: dp={} tp_limit={} b={} T_hat={:.4}s (planned in {:.2}s)",
        report.dp,
        report.tp_limit,
        report.plan.micro_batch_size,
        report.t_hat_seconds,
        report.planning_seconds
    );
    eprint!("{}", render_plan_table(&report.plan));
    if explain {
        for c in &report.candidates {
            eprintln!(
                "candidate dp={} tp={}: groups={} division={:?} T_hat={:?} {}",
                c.dp,
                c.tp_limit,
                c.group_count,
                c.division_objective,
                c.t_hat_seconds,
                c.rejected.as_deref().unwrap_or("")
            );
            for t in &c.split_trace {
                eprintln!(
                    "  node {} straggler {}: {} candidates, best ratio {:.6}, adopted={}",
                    t.node, t.straggler, t.candidates_examined, t.best_ratio, t.adopted
                );
            }
        }
    }
    write_output(&out, &serde_json::to_string_pretty(&report.plan)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    inputs: CommonInputs,
    trace_path: PathBuf,
    out: PathBuf,
    iterations: Option<u64>,
    threshold: f64,
    pack_size: u32,
    probe_period: u64,
    planning_latency: f64,
    seed: u64,
) -> Result<(), PlanError> {
    let (cluster, task) = load_inputs(&inputs)?;
    let trace: StragglerTrace = read_json(&trace_path)?;
    let config = SimConfig {
        iterations: iterations.unwrap_or(trace.last_iteration() + 30),
        threshold,
        probe_period,
        planning_latency_s: planning_latency,
        pack_size,
        seed,
        ..Default::default()
    };
    let timeline = simulate(&task, &cluster, &trace, &PlannerConfig::default(), &config)?;
    std::fs::write(&out, timeline.to_csv())?;
    let run_path = out.with_extension("run.json");
    std::fs::write(&run_path, serde_json::to_string_pretty(&timeline)?)?;
    eprintln!(
        "simulated {} iterations, {} re-plans, {} migrations; wrote {} and {}",
        config.iterations,
        timeline.replans.len(),
        timeline.migrations.len(),
        out.display(),
        run_path.display()
    );
    for w in &timeline.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_migrate(
    task_path: PathBuf,
    old: PathBuf,
    new: PathBuf,
    out: Option<PathBuf>,
    pack_size: u32,
    intra_gbps: f64,
    inter_gbps: f64,
) -> Result<(), PlanError> {
    let task: TaskSpec = read_json(&task_path)?;
    let old_plan: ParallelizationPlan = read_json(&old)?;
    let new_plan: ParallelizationPlan = read_json(&new)?;
    let old_layout = shard_layout(&old_plan, task.layers)?;
    let new_layout = shard_layout(&new_plan, task.layers)?;
    let schedule = compile_migration(
        &old_layout,
        &new_layout,
        task.coefficients.s,
        &BandwidthModel { intra_node_gbps: intra_gbps, inter_node_gbps: inter_gbps },
        pack_size,
        &BTreeSet::new(),
        true,
    )?;
    eprintln!(
        "{} batches, {:.1} MiB, estimated {:.3}s",
        schedule.batches.len(),
        schedule.total_mib_moved,
        schedule.total_seconds
    );
    write_output(&out, &serde_json::to_string_pretty(&schedule)?)
}

fn cmd_report(
    run: PathBuf,
    trace: PathBuf,
    cluster: PathBuf,
    out: Option<PathBuf>,
) -> Result<(), PlanError> {
    let timeline: SimTimeline = read_json(&run)?;
    let trace: StragglerTrace = read_json(&trace)?;
    let cluster: ClusterState = read_json(&cluster)?;
    let report = situation_report(&timeline, &trace, &cluster)?;
    match out {
        Some(p) => {
            std::fs::write(&p, report.to_csv())?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{}", report.render()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_trace(
    cluster: PathBuf,
    situations: Vec<String>,
    dwell: u64,
    levels: LevelRates,
    noise: f64,
    jitter: u64,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), PlanError> {
    if situations.is_empty() {
        return Err(PlanError::config("no situations given"));
    }
    let situations: Vec<Situation> =
        situations.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let cluster: ClusterState = read_json(&cluster)?;
    let trace = gen_trace(&cluster, &situations, dwell, &levels, noise, jitter, seed)?;
    write_output(&out, &serde_json::to_string_pretty(&trace)?)
}

/// Fit tau and zeta from per-layer step timings. zeta_n is the mean seconds
/// at the smallest recorded micro-batch size for each group size; tau(b) is
/// the mean seconds at each b on the group size with the largest zeta (the
/// configuration whose efficiency coefficient is 1).
fn cmd_calibrate(csv_path: PathBuf, out: Option<PathBuf>) -> Result<(), PlanError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&csv_path)
        .map_err(|e| PlanError::config(format!("{}: {e}", csv_path.display())))?;
    let mut rows: Vec<(u32, u32, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| PlanError::config(e.to_string()))?;
        if record.len() != 3 {
            return Err(PlanError::config("expected rows of group_size,b,seconds"));
        }
        let parse = |i: usize| -> Result<f64, PlanError> {
            record[i]
                .trim()
                .parse()
                .map_err(|_| PlanError::config(format!("bad number `{}`", &record[i])))
        };
        rows.push((parse(0)? as u32, parse(1)? as u32, parse(2)?));
    }
    if rows.is_empty() {
        return Err(PlanError::config("timing CSV has no data rows"));
    }
    let min_b = rows.iter().map(|(_, b, _)| *b).min().unwrap();
    let mut zeta_acc: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
    for (n, b, s) in &rows {
        if *b == min_b {
            let e = zeta_acc.entry(*n).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }
    let zeta: BTreeMap<u32, f64> =
        zeta_acc.into_iter().map(|(n, (sum, c))| (n, sum / c as f64)).collect();
    let reference_n = zeta
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, _)| *n)
        .expect("nonempty");
    let mut tau_acc: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
    for (n, b, s) in &rows {
        if *n == reference_n {
            let e = tau_acc.entry(*b).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }
    let tau: BTreeMap<u32, f64> =
        tau_acc.into_iter().map(|(b, (sum, c))| (b, sum / c as f64)).collect();
    let fragment = serde_json::json!({ "tau": tau, "zeta": zeta });
    write_output(&out, &serde_json::to_string_pretty(&fragment)?)
}

/// Brute-force comparison of both solvers on random instances.
fn cmd_oracle_check(instances: u32, seed: u64) -> Result<(), PlanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0u32;
    for i in 0..instances {
        let n = rng.random_range(1..=5usize);
        let total = rng.random_range(0..=10u64);
        let weights: Vec<f64> =
            (0..n).map(|_| rng.random_range(1..=40) as f64 / 10.0).collect();
        let bounds: Vec<Option<u64>> = (0..n)
            .map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..=6u64)))
            .collect();
        let problem = MinimaxAssignmentProblem { weights, bounds, total };
        let oracle = brute_force_minimax(&problem);
        let mine = solve_minimax_ilp(&problem).ok().map(|s| s.objective);
        if oracle != mine {
            eprintln!("minimax mismatch on instance {i}: {oracle:?} vs {mine:?}");
            failures += 1;
        }

        let dp = rng.random_range(1..=3u32);
        let slow: Vec<f64> = (0..rng.random_range(0..=3usize))
            .map(|_| rng.random_range(11..=50) as f64 / 10.0)
            .collect();
        let fast = rng.random_range(0..=5u64).max(dp as u64);
        let problem = DivisionProblem {
            fast_count: fast,
            fast_rate: 1.0,
            slow_rates: slow,
            dp,
            micro_batch_total: rng.random_range(1..=12u64),
            tau_b: 1.0,
        };
        let oracle = brute_force_division(&problem);
        let mine = solve_division_minlp(&problem, None).ok().map(|s| s.objective);
        if oracle != mine {
            eprintln!("division mismatch on instance {i}: {oracle:?} vs {mine:?}");
            failures += 1;
        }
    }
    if failures == 0 {
        println!("oracle-check: {instances} instances, all matched");
        Ok(())
    } else {
        Err(PlanError::config(format!("oracle-check: {failures} mismatches")))
    }
}

fn brute_force_minimax(problem: &MinimaxAssignmentProblem) -> Option<f64> {
    fn rec(p: &MinimaxAssignmentProblem, i: usize, left: u64, cur: f64, best: &mut Option<f64>) {
        if i == p.weights.len() {
            if left == 0 {
                *best = Some(best.map_or(cur, |b: f64| b.min(cur)));
            }
            return;
        }
        let ub = p.bounds[i].unwrap_or(left).min(left);
        for l in 0..=ub {
            let cost = if l == 0 { 0.0 } else { p.weights[i] * l as f64 };
            if cost.is_infinite() {
                continue;
            }
            rec(p, i + 1, left - l, cur.max(cost), best);
        }
    }
    let mut best = None;
    rec(problem, 0, problem.total, 0.0, &mut best);
    best
}

fn brute_force_division(problem: &DivisionProblem) -> Option<f64> {
    let dp = problem.dp as usize;
    let ms = problem.slow_rates.len();
    let mut best: Option<f64> = None;
    let placements = (dp as u64).pow(ms as u32);
    for code in 0..placements {
        let mut placement = vec![0usize; ms];
        let mut c = code;
        for slot in placement.iter_mut() {
            *slot = (c % dp as u64) as usize;
            c /= dp as u64;
        }
        let mut h = vec![0u64; dp];
        enumerate_h(problem, 0, problem.fast_count, &mut h, &placement, &mut best);
    }
    best
}

fn enumerate_h(
    problem: &DivisionProblem,
    pipe: usize,
    left: u64,
    h: &mut Vec<u64>,
    placement: &[usize],
    best: &mut Option<f64>,
) {
    let dp = problem.dp as usize;
    if pipe == dp {
        if left != 0 {
            return;
        }
        let mut d = vec![0.0f64; dp];
        for (i, hd) in h.iter().enumerate() {
            d[i] = *hd as f64 / problem.fast_rate;
        }
        let mut count = h.clone();
        for (slot, pipe) in placement.iter().enumerate() {
            d[*pipe] += 1.0 / problem.slow_rates[slot];
            count[*pipe] += 1;
        }
        if count.iter().any(|c| *c == 0) {
            return;
        }
        enumerate_m(problem, 0, problem.micro_batch_total, &d, 0.0, best);
        return;
    }
    for take in 0..=left {
        h[pipe] = take;
        enumerate_h(problem, pipe + 1, left - take, h, placement, best);
    }
    h[pipe] = 0;
}

fn enumerate_m(
    problem: &DivisionProblem,
    pipe: usize,
    left: u64,
    d: &[f64],
    cur: f64,
    best: &mut Option<f64>,
) {
    if pipe == d.len() {
        if left == 0 {
            let obj = cur * problem.tau_b;
            *best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
        return;
    }
    for m in 0..=left {
        let cost = if m == 0 {
            0.0
        } else if d[pipe] <= 0.0 {
            f64::INFINITY
        } else {
            m as f64 / d[pipe]
        };
        if cost.is_infinite() {
            continue;
        }
        enumerate_m(problem, pipe + 1, left - m, d, cur.max(cost), best);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan { inputs, out, explain, dp_range } => {
            cmd_plan(inputs, out, explain, dp_range)
        }
        Command::Simulate {
            inputs,
            trace,
            out,
            iterations,
            threshold,
            pack_size,
            probe_period,
            planning_latency,
            seed,
        } => cmd_simulate(
            inputs,
            trace,
            out,
            iterations,
            threshold,
            pack_size,
            probe_period,
            planning_latency,
            seed,
        ),
        Command::Migrate { task, old, new, out, pack_size, intra_gbps, inter_gbps } => {
            cmd_migrate(task, old, new, out, pack_size, intra_gbps, inter_gbps)
        }
        Command::Report { run, trace, cluster, out } => cmd_report(run, trace, cluster, out),
        Command::GenTrace {
            cluster,
            situations,
            dwell,
            level1,
            level2,
            level3,
            noise,
            jitter,
            seed,
            out,
        } => cmd_gen_trace(
            cluster,
            situations,
            dwell,
            LevelRates { level1, level2, level3 },
            noise,
            jitter,
            seed,
            out,
        ),
        Command::Calibrate { csv, out } => cmd_calibrate(csv, out),
        Command::OracleCheck { instances, seed } => cmd_oracle_check(instances, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
