//! Top-level planning routine: enumerate the candidate TP limits, run
//! grouping, division, ordering and the lower level for each, and keep the
//! plan with the smallest estimated step time. Also hosts the re-planning
//! trigger.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_lower, LowerSolution};
use crate::domain::{
    ClusterState, GpuId, ParallelizationPlan, PipelinePlan, Rate, StagePlan, TaskSpec,
};
use crate::error::PlanError;
use crate::grouping::{group_cluster, SplitTraceEntry};
use crate::orchestration::{divide, order_division};

/// Planner tuning knobs; the defaults match the documented CLI defaults.
#[derive(Clone, Debug)]
pub struct PlannerConfig {
    /// Upper cap on the micro-batch sizes tried.
    pub b_cap: u32,
    /// Optional DP degrees to enumerate; defaults to the task's dp_degree.
    pub dp_range: Option<Vec<u32>>,
    /// Time budget for each pipeline-division solve.
    pub division_budget: Option<Duration>,
    /// Collect the grouping/division traces for `--explain`.
    pub explain: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { b_cap: 16, dp_range: None, division_budget: None, explain: false }
    }
}

/// Diagnostics for one (dp, tp_limit) candidate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateReport {
    pub dp: u32,
    pub tp_limit: u32,
    pub group_count: usize,
    pub division_objective: Option<f64>,
    pub t_hat_seconds: Option<f64>,
    pub rejected: Option<String>,
    #[serde(skip)]
    pub split_trace: Vec<SplitTraceEntry>,
}

/// The planner's full answer: the chosen plan plus per-candidate diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanReport {
    pub plan: ParallelizationPlan,
    /// Estimated step seconds of the chosen plan.
    pub t_hat_seconds: f64,
    /// Bottleneck o_i per pipeline of the chosen plan.
    pub bottlenecks: Vec<f64>,
    pub dp: u32,
    pub tp_limit: u32,
    pub candidates: Vec<CandidateReport>,
    pub planning_seconds: f64,
}

fn assemble_plan(
    solution: &LowerSolution,
    failed: &BTreeSet<GpuId>,
    cluster: &ClusterState,
) -> ParallelizationPlan {
    let mut removed: BTreeSet<GpuId> = failed.clone();
    let mut pipelines = Vec::new();
    for (pipe, m) in solution.pipelines.iter().zip(&solution.micro_batches) {
        removed.extend(pipe.removed.iter().copied());
        if *m == 0 || pipe.stages.is_empty() {
            // A benched pipeline contributes nothing; its GPUs are parked.
            removed.extend(pipe.stages.iter().flat_map(|(s, _)| s.group.members.clone()));
            continue;
        }
        pipelines.push(PipelinePlan {
            stages: pipe
                .stages
                .iter()
                .map(|(stage, layers)| StagePlan {
                    gpus: stage.group.members.clone(),
                    layers: *layers as u32,
                })
                .collect(),
            micro_batches: *m as u32,
        });
    }
    // GPUs that never made it into a group (e.g. still standby by choice)
    // count as removed too, so the plan fully partitions the cluster.
    let active: BTreeSet<GpuId> = pipelines
        .iter()
        .flat_map(|p| p.stages.iter())
        .flat_map(|s| s.gpus.iter().copied())
        .collect();
    for gpu in cluster.gpus() {
        if !active.contains(&gpu) {
            removed.insert(gpu);
        }
    }
    ParallelizationPlan {
        micro_batch_size: solution.micro_batch_size,
        pipelines,
        removed,
    }
}

fn solve_candidate(
    cluster: &ClusterState,
    task: &TaskSpec,
    dp: u32,
    tp_limit: u32,
    config: &PlannerConfig,
) -> (CandidateReport, Option<(LowerSolution, BTreeSet<GpuId>)>) {
    let mut report = CandidateReport {
        dp,
        tp_limit,
        group_count: 0,
        division_objective: None,
        t_hat_seconds: None,
        rejected: None,
        split_trace: Vec::new(),
    };
    let mut trace = Vec::new();
    let grouped = group_cluster(
        cluster,
        tp_limit,
        &task.coefficients,
        config.explain.then_some(&mut trace),
    );
    report.split_trace = trace;
    let (grouping, failed) = match grouped {
        Ok(g) => g,
        Err(e) => {
            report.rejected = Some(e.to_string());
            return (report, None);
        }
    };
    report.group_count = grouping.groups.len();
    let division = match divide(&grouping, cluster, task, dp, config.division_budget) {
        Ok(d) => d,
        Err(e) => {
            report.rejected = Some(e.to_string());
            return (report, None);
        }
    };
    report.division_objective = Some(division.objective);
    let solution = solve_lower(
        &task.micro_batch_sizes,
        task.layers,
        task.global_batch,
        config.b_cap,
        &task.coefficients,
        |b| order_division(&division, task, b),
    );
    match solution {
        Ok(sol) => {
            report.t_hat_seconds = Some(sol.t_hat_seconds);
            (report, Some((sol, failed)))
        }
        Err(e) => {
            report.rejected = Some(e.to_string());
            (report, None)
        }
    }
}

/// Deduce the best parallelization plan for the cluster's current rates.
///
/// Standby GPUs re-enter the pool on every call; failed GPUs are excluded
/// before grouping. The candidate TP limits (and optionally DP degrees) are
/// solved independently and the smallest estimated step time wins, ties
/// going to the smaller (dp, tp_limit).
pub fn plan(
    cluster: &ClusterState,
    task: &TaskSpec,
    config: &PlannerConfig,
) -> Result<PlanReport, PlanError> {
    let started = Instant::now();
    cluster.validate()?;
    task.validate(cluster)?;

    let dps: Vec<u32> = config.dp_range.clone().unwrap_or_else(|| vec![task.dp_degree]);
    let mut tps: Vec<u32> = task.tp_degrees.clone();
    tps.sort_unstable();
    let combos: Vec<(u32, u32)> =
        dps.iter().flat_map(|dp| tps.iter().map(move |tp| (*dp, *tp))).collect();

    let results: Vec<(CandidateReport, Option<(LowerSolution, BTreeSet<GpuId>)>)> = combos
        .par_iter()
        .map(|(dp, tp)| solve_candidate(cluster, task, *dp, *tp, config))
        .collect();

    let mut candidates = Vec::with_capacity(results.len());
    let mut best: Option<(f64, u32, u32, LowerSolution, BTreeSet<GpuId>)> = None;
    for (report, solution) in results {
        if let Some((sol, failed)) = solution {
            let better = match &best {
                None => true,
                Some((t, _, _, _, _)) => sol.t_hat_seconds < *t,
            };
            if better {
                best = Some((sol.t_hat_seconds, report.dp, report.tp_limit, sol, failed));
            }
        }
        candidates.push(report);
    }

    let (t_hat, dp, tp_limit, solution, failed) = best.ok_or_else(|| {
        let reasons: Vec<String> = candidates
            .iter()
            .map(|c| {
                format!(
                    "dp={} tp={}: {}",
                    c.dp,
                    c.tp_limit,
                    c.rejected.as_deref().unwrap_or("unknown")
                )
            })
            .collect();
        PlanError::infeasible(format!("no feasible candidate ({})", reasons.join("; ")))
    })?;

    let plan = assemble_plan(&solution, &failed, cluster);
    plan.validate(task)?;
    Ok(PlanReport {
        plan,
        t_hat_seconds: t_hat,
        bottlenecks: solution
            .pipelines
            .iter()
            .zip(&solution.micro_batches)
            .filter(|(_, m)| **m > 0)
            .map(|(p, _)| p.bottleneck)
            .collect(),
        dp,
        tp_limit,
        candidates,
        planning_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Re-plan trigger: true when any GPU's rate moved by strictly more than
/// `threshold` relative to its previous value. Rates must cover the same
/// GPU key set; standby GPUs report their last probed value.
pub fn replan_needed(
    prev: &std::collections::BTreeMap<GpuId, Rate>,
    new: &std::collections::BTreeMap<GpuId, Rate>,
    threshold: f64,
) -> bool {
    for (gpu, new_rate) in new {
        let Some(prev_rate) = prev.get(gpu) else {
            return true; // a GPU we had no baseline for
        };
        let (p, n) = (prev_rate.value(), new_rate.value());
        if p == n {
            continue; // covers failed -> failed without NaN arithmetic
        }
        if p.is_infinite() || n.is_infinite() {
            return true;
        }
        // Strictly greater than the threshold; the tiny relative guard keeps
        // an exact boundary change (e.g. 1.00 -> 1.05) below the trigger
        // despite decimal rounding.
        if ((n - p) / p).abs() > threshold * (1.0 + 1e-9) {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{HeadTailCoefficients, ProfiledCoefficients};
    use std::collections::BTreeMap;

    fn small_task(dp: u32) -> TaskSpec {
        TaskSpec {
            layers: 8,
            global_batch: 16,
            micro_batch_sizes: vec![1, 2],
            dp_degree: dp,
            tp_degrees: vec![1, 2, 4, 8],
            coefficients: ProfiledCoefficients {
                tau: BTreeMap::from([(1, 0.05), (2, 0.11)]),
                zeta: BTreeMap::from([(1, 1.0), (2, 0.49), (4, 0.26), (8, 0.14)]),
                a_f: 10.0,
                a_fb: 20.0,
                s: 100.0,
                head_tail: HeadTailCoefficients::default(),
                gap_mib: 1024.0,
            },
        }
    }

    #[test]
    fn uniform_cluster_yields_uniform_plan() {
        let cluster = ClusterState::normal(2, 8);
        let report = plan(&cluster, &small_task(2), &PlannerConfig::default()).unwrap();
        let plan = &report.plan;
        assert_eq!(plan.pipelines.len(), 2);
        // Identical pipelines: same stage sizes, same layers, same data.
        let sig = |p: &PipelinePlan| -> Vec<(usize, u32)> {
            p.stages.iter().map(|s| (s.gpus.len(), s.layers)).collect()
        };
        assert_eq!(sig(&plan.pipelines[0]), sig(&plan.pipelines[1]));
        assert_eq!(plan.pipelines[0].micro_batches, plan.pipelines[1].micro_batches);
        let layers: Vec<u32> = plan.pipelines[0].stages.iter().map(|s| s.layers).collect();
        let first = layers[0];
        assert!(layers.iter().all(|l| *l == first));
    }

    #[test]
    fn planning_is_idempotent() {
        let mut cluster = ClusterState::normal(2, 8);
        cluster.set_rate(GpuId::new(0, 3), Rate::new(2.62).unwrap());
        let a = plan(&cluster, &small_task(2), &PlannerConfig::default()).unwrap();
        let b = plan(&cluster, &small_task(2), &PlannerConfig::default()).unwrap();
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.t_hat_seconds, b.t_hat_seconds);
    }

    #[test]
    fn failed_gpu_is_excluded_and_removed() {
        let mut cluster = ClusterState::normal(2, 8);
        cluster.set_rate(GpuId::new(1, 7), Rate::FAILED);
        let report = plan(&cluster, &small_task(2), &PlannerConfig::default()).unwrap();
        assert!(report.plan.removed.contains(&GpuId::new(1, 7)));
        assert!(report.plan.active_gpus().all(|g| g != GpuId::new(1, 7)));
    }

    #[test]
    fn worsening_a_rate_never_improves_t_hat() {
        let task = small_task(2);
        let mut cluster = ClusterState::normal(2, 8);
        let base = plan(&cluster, &task, &PlannerConfig::default()).unwrap();
        cluster.set_rate(GpuId::new(0, 0), Rate::new(3.0).unwrap());
        let worse = plan(&cluster, &task, &PlannerConfig::default()).unwrap();
        assert!(worse.t_hat_seconds >= base.t_hat_seconds - 1e-12);
    }

    #[test]
    fn replan_trigger_uses_strict_five_percent() {
        let gpu = GpuId::new(0, 0);
        let prev = BTreeMap::from([(gpu, Rate::new(1.0).unwrap())]);
        let below = BTreeMap::from([(gpu, Rate::new(1.04).unwrap())]);
        let above = BTreeMap::from([(gpu, Rate::new(1.06).unwrap())]);
        let exact = BTreeMap::from([(gpu, Rate::new(1.05).unwrap())]);
        assert!(!replan_needed(&prev, &below, 0.05));
        assert!(replan_needed(&prev, &above, 0.05));
        assert!(!replan_needed(&prev, &exact, 0.05));
    }

    #[test]
    fn replan_trigger_handles_failures() {
        let gpu = GpuId::new(0, 0);
        let prev = BTreeMap::from([(gpu, Rate::new(1.0).unwrap())]);
        let failed = BTreeMap::from([(gpu, Rate::FAILED)]);
        assert!(replan_needed(&prev, &failed, 0.05));
        assert!(!replan_needed(&failed, &failed, 0.05));
        assert!(replan_needed(&failed, &prev, 0.05));
    }
}
