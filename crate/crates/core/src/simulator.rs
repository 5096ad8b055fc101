//! Discrete-event simulation of iterative 1F1B training under a dynamic
//! straggler trace: profiler emulation, the re-plan trigger, asynchronous
//! planning that overlaps training, migration at iteration boundaries, and
//! periodic re-probing of standby GPUs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{plan_step_time_estimate, plan_stage_times, pipeline_time_exact};
use crate::domain::{ClusterState, GpuId, ParallelizationPlan, Rate, TaskSpec};
use crate::error::PlanError;
use crate::planner::{plan as run_planner, PlannerConfig};
use crate::sharding::{compile_migration, shard_layout, BandwidthModel};

/// One rate change in a straggler trace.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceEvent {
    pub iteration: u64,
    pub gpu: GpuId,
    pub rate: Rate,
}

/// A labelled segment boundary inside a trace, carried along for reporting.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SegmentLabel {
    pub start_iteration: u64,
    pub label: String,
}

/// A straggler trace: rate changes in nondecreasing iteration order, plus an
/// optional multiplicative measurement-noise amplitude.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StragglerTrace {
    pub events: Vec<TraceEvent>,
    #[serde(default)]
    pub noise: f64,
    /// Optional situation labels for reporting.
    #[serde(default)]
    pub segments: Vec<SegmentLabel>,
}

impl StragglerTrace {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.events.windows(2).any(|w| w[0].iteration > w[1].iteration) {
            return Err(PlanError::config("trace events must be iteration-ordered"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(PlanError::config("noise amplitude must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn last_iteration(&self) -> u64 {
        self.events.last().map_or(0, |e| e.iteration)
    }
}

/// Simulation knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Iterations to simulate.
    pub iterations: u64,
    /// Re-plan trigger threshold on relative rate change.
    pub threshold: f64,
    /// Standby GPUs are re-probed every this many iterations.
    pub probe_period: u64,
    /// Simulated wall time of one planning run; it overlaps training on the
    /// CPU and lands at the next iteration boundary after it elapses.
    pub planning_latency_s: f64,
    pub bandwidth: BandwidthModel,
    pub pack_size: u32,
    /// Optional additive per-iteration DP-sync constant.
    pub sync_overhead_s: f64,
    /// Step seconds charged while an in-plan GPU is unresponsive, emulating
    /// the communication timeout that detects failures.
    pub failure_timeout_s: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            threshold: 0.05,
            probe_period: 10,
            planning_latency_s: 5.0,
            bandwidth: BandwidthModel::default(),
            pack_size: 4,
            sync_overhead_s: 0.0,
            failure_timeout_s: 30.0,
            seed: 0,
        }
    }
}

/// One simulated training iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Exact simulated step seconds under the live rates.
    pub seconds: f64,
    /// The planner surrogate's estimate for the active plan at live rates.
    pub estimate_seconds: f64,
    pub plan_id: u32,
    /// "" | "replan_triggered" | "plan_applied" | "plan_unchanged" | "failure_stall"
    pub event: String,
    /// Migration pause appended after this iteration, if any.
    pub migration_seconds: f64,
}

/// A re-planning episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplanEvent {
    pub trigger_iteration: u64,
    pub applied_iteration: u64,
    pub planning_seconds: f64,
    pub plan_id: u32,
    /// False when the fresh plan equalled the incumbent, so no switch.
    pub changed: bool,
}

/// A migration episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MigrationEvent {
    pub iteration: u64,
    pub seconds: f64,
    pub mib_moved: f64,
    pub batches: usize,
}

/// Summary of one plan the simulation ran with.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanRecord {
    pub id: u32,
    pub t_hat_seconds: f64,
    pub tp_limit: u32,
    pub plan: ParallelizationPlan,
}

/// Everything a simulation run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimTimeline {
    pub records: Vec<IterationRecord>,
    pub replans: Vec<ReplanEvent>,
    pub migrations: Vec<MigrationEvent>,
    pub plans: Vec<PlanRecord>,
    pub warnings: Vec<String>,
    pub gpu_count: usize,
}

impl SimTimeline {
    /// CSV with the documented columns: iteration, seconds, plan_id, event.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,seconds,plan_id,event\n");
        for r in &self.records {
            let event = if r.migration_seconds > 0.0 {
                if r.event.is_empty() {
                    format!("migration:{:.6}", r.migration_seconds)
                } else {
                    format!("{};migration:{:.6}", r.event, r.migration_seconds)
                }
            } else {
                r.event.clone()
            };
            out.push_str(&format!("{},{:.9},{},{}\n", r.iteration, r.seconds, r.plan_id, event));
        }
        out
    }
}

struct PendingPlan {
    trigger_iteration: u64,
    lands_after: u64,
    rates: BTreeMap<GpuId, Rate>,
    standby: BTreeSet<GpuId>,
}

/// The profiler emulation: exact ground-truth rates, optionally perturbed by
/// multiplicative uniform noise, with standby GPUs refreshed only on probe
/// iterations (their last probed value is carried in between).
#[allow(clippy::too_many_arguments)]
fn measure_rates(
    truth: &BTreeMap<GpuId, Rate>,
    standby: &BTreeSet<GpuId>,
    last_measured: &BTreeMap<GpuId, Rate>,
    iteration: u64,
    probe_period: u64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<GpuId, Rate> {
    let probe = probe_period > 0 && iteration % probe_period == 0;
    let mut measured = BTreeMap::new();
    for (gpu, rate) in truth {
        let fresh = if standby.contains(gpu) { probe } else { true };
        let value = if fresh {
            if rate.is_failed() {
                // Failures surface immediately through communication
                // timeouts, regardless of noise.
                Rate::FAILED
            } else if noise > 0.0 {
                let u: f64 = rng.random_range(-noise..=noise);
                Rate::new((rate.value() * (1.0 + u)).max(1.0)).unwrap()
            } else {
                *rate
            }
        } else {
            last_measured.get(gpu).copied().unwrap_or(*rate)
        };
        measured.insert(*gpu, value);
    }
    measured
}

fn exact_step_seconds(
    plan: &ParallelizationPlan,
    task: &TaskSpec,
    truth: &BTreeMap<GpuId, Rate>,
    config: &SimConfig,
) -> Result<(f64, bool), PlanError> {
    let failure = plan.active_gpus().any(|g| truth.get(&g).is_some_and(|r| r.is_failed()));
    if failure {
        return Ok((config.failure_timeout_s, true));
    }
    let times = plan_stage_times(plan, &task.coefficients, |g| {
        truth.get(&g).copied().unwrap_or(Rate::NORMAL).value()
    })?;
    let step = plan
        .pipelines
        .iter()
        .zip(&times)
        .map(|(p, t)| pipeline_time_exact(p.micro_batches as u64, t))
        .fold(0.0, f64::max);
    Ok((step + config.sync_overhead_s, false))
}

/// Run the simulation loop.
///
/// Each iteration applies the trace, executes one step under the active
/// plan, measures rates, and fires the re-plan trigger when any rate moved
/// beyond the threshold. Planning runs on simulated background CPUs for
/// `planning_latency_s`, landing at the following iteration boundary at the
/// earliest; a changed plan migrates right after the iteration in which the
/// planning completed.
pub fn simulate(
    task: &TaskSpec,
    initial_cluster: &ClusterState,
    trace: &StragglerTrace,
    planner_config: &PlannerConfig,
    config: &SimConfig,
) -> Result<SimTimeline, PlanError> {
    trace.validate()?;
    initial_cluster.validate()?;
    task.validate(initial_cluster)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut truth: BTreeMap<GpuId, Rate> =
        initial_cluster.gpus().map(|g| (g, initial_cluster.rate(g))).collect();

    let initial_report = run_planner(initial_cluster, task, planner_config)?;
    let mut plans = vec![PlanRecord {
        id: 0,
        t_hat_seconds: initial_report.t_hat_seconds,
        tp_limit: initial_report.tp_limit,
        plan: initial_report.plan.clone(),
    }];
    let mut active = initial_report.plan;
    let mut active_id = 0u32;
    let mut standby: BTreeSet<GpuId> = active.removed.clone();

    let mut records = Vec::with_capacity(config.iterations as usize);
    let mut replans = Vec::new();
    let mut migrations = Vec::new();
    let mut warnings = Vec::new();

    let mut prev_measured: Option<BTreeMap<GpuId, Rate>> = None;
    let mut pending: Option<PendingPlan> = None;
    let mut event_cursor = 0usize;

    for iteration in 0..config.iterations {
        // Trace events take effect at this iteration's boundary.
        while event_cursor < trace.events.len()
            && trace.events[event_cursor].iteration <= iteration
        {
            let e = &trace.events[event_cursor];
            truth.insert(e.gpu, e.rate);
            event_cursor += 1;
        }

        let (seconds, stalled) = exact_step_seconds(&active, task, &truth, config)?;
        let estimate = plan_step_time_estimate(&active, &task.coefficients, |g| {
            truth.get(&g).copied().unwrap_or(Rate::NORMAL).value()
        })
        .unwrap_or(f64::INFINITY);

        let measured = measure_rates(
            &truth,
            &standby,
            prev_measured.as_ref().unwrap_or(&BTreeMap::new()),
            iteration,
            config.probe_period,
            trace.noise,
            &mut rng,
        );

        let mut event = String::new();
        if stalled {
            event = "failure_stall".to_string();
        }

        if pending.is_none() {
            if let Some(prev) = &prev_measured {
                if crate::planner::replan_needed(prev, &measured, config.threshold) {
                    let steps = if seconds > 0.0 {
                        (config.planning_latency_s / seconds).ceil().max(1.0) as u64
                    } else {
                        1
                    };
                    pending = Some(PendingPlan {
                        trigger_iteration: iteration,
                        lands_after: iteration + steps,
                        rates: measured.clone(),
                        standby: standby.clone(),
                    });
                    event = join_event(event, "replan_triggered");
                }
            }
        }

        let mut migration_seconds = 0.0;
        if pending.as_ref().is_some_and(|p| p.lands_after <= iteration) {
            let p = pending.take().unwrap();
            let mut cluster = initial_cluster.clone();
            cluster.rates = p.rates.clone();
            cluster.standby = p.standby.clone();
            match run_planner(&cluster, task, planner_config) {
                Ok(report) => {
                    let changed = report.plan != active;
                    if changed {
                        let failed: BTreeSet<GpuId> = p
                            .rates
                            .iter()
                            .filter(|(_, r)| r.is_failed())
                            .map(|(g, _)| *g)
                            .collect();
                        let old_layout = shard_layout(&active, task.layers)?;
                        let new_layout = shard_layout(&report.plan, task.layers)?;
                        let schedule = compile_migration(
                            &old_layout,
                            &new_layout,
                            task.coefficients.s,
                            &config.bandwidth,
                            config.pack_size,
                            &failed,
                            true,
                        )?;
                        migration_seconds = schedule.total_seconds;
                        migrations.push(MigrationEvent {
                            iteration,
                            seconds: schedule.total_seconds,
                            mib_moved: schedule.total_mib_moved,
                            batches: schedule.batches.len(),
                        });
                        active = report.plan.clone();
                        active_id = plans.len() as u32;
                        standby = active.removed.clone();
                        plans.push(PlanRecord {
                            id: active_id,
                            t_hat_seconds: report.t_hat_seconds,
                            tp_limit: report.tp_limit,
                            plan: report.plan,
                        });
                        event = join_event(event, "plan_applied");
                    } else {
                        event = join_event(event, "plan_unchanged");
                    }
                    replans.push(ReplanEvent {
                        trigger_iteration: p.trigger_iteration,
                        applied_iteration: iteration,
                        planning_seconds: config.planning_latency_s,
                        plan_id: active_id,
                        changed,
                    });
                }
                Err(e) => {
                    warnings.push(format!(
                        "planning failed at iteration {iteration}: {e}; keeping plan {active_id}"
                    ));
                    replans.push(ReplanEvent {
                        trigger_iteration: p.trigger_iteration,
                        applied_iteration: iteration,
                        planning_seconds: config.planning_latency_s,
                        plan_id: active_id,
                        changed: false,
                    });
                }
            }
        }

        records.push(IterationRecord {
            iteration,
            seconds,
            estimate_seconds: estimate,
            plan_id: active_id,
            event,
            migration_seconds,
        });
        prev_measured = Some(measured);
    }

    Ok(SimTimeline {
        records,
        replans,
        migrations,
        plans,
        warnings,
        gpu_count: initial_cluster.gpu_count(),
    })
}

fn join_event(current: String, tag: &str) -> String {
    if current.is_empty() {
        tag.to_string()
    } else {
        format!("{current};{tag}")
    }
}
