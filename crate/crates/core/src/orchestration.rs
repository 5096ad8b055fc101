//! Pipeline orchestration: divide the TP groups into DP pipelines and order
//! the groups within each pipeline.

use std::collections::BTreeMap;
use std::time::Duration;

use crate::assignment::{assign_layers, OrderedPipeline, StageSpec};
use crate::costmodel::group_rate;
use crate::domain::{ClusterState, ProfiledCoefficients, TaskSpec, TpGroup};
use crate::error::PlanError;
use crate::grouping::GroupingResult;
use crate::solver::{solve_division_minlp, DivisionProblem};

/// A rated group: the group plus its straggling rate and weakest member
/// capacity, everything the later stages need.
#[derive(Clone, Debug)]
pub struct RatedGroup {
    pub group: TpGroup,
    pub rate: f64,
    pub min_capacity_mib: f64,
}

/// Division of all groups into DP pipelines.
#[derive(Clone, Debug)]
pub struct PipelineDivision {
    pub pipelines: Vec<Vec<RatedGroup>>,
    /// Relaxed objective of the division in seconds.
    pub objective: f64,
    /// Provisional micro-batch counts from the relaxation; the lower level
    /// recomputes the real ones.
    pub provisional_micro_batches: Vec<u64>,
    pub budget_exhausted: bool,
}

/// Attach rates and capacities to groups.
pub fn rate_groups(
    grouping: &GroupingResult,
    cluster: &ClusterState,
    coeffs: &ProfiledCoefficients,
) -> Result<Vec<RatedGroup>, PlanError> {
    grouping
        .groups
        .iter()
        .map(|group| {
            let rates: Vec<f64> =
                group.members.iter().map(|m| cluster.rate(*m).value()).collect();
            let rate = group_rate(&rates, coeffs)?;
            let min_capacity_mib = group
                .members
                .iter()
                .map(|m| cluster.capacity_mib(*m))
                .fold(f64::INFINITY, f64::min);
            Ok(RatedGroup { group: group.clone(), rate, min_capacity_mib })
        })
        .collect()
}

/// The majority straggling rate: the most frequent exact rate value; if no
/// strict mode, the smallest rate among the largest cohorts.
fn modal_rate(rated: &[RatedGroup]) -> f64 {
    let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for g in rated {
        let key = g.rate.to_bits();
        let entry = counts.entry(key).or_insert((g.rate, 0));
        entry.1 += 1;
    }
    let mut best: Option<(f64, usize)> = None;
    for (_, (rate, count)) in counts {
        let better = match best {
            None => true,
            Some((brate, bcount)) => count > bcount || (count == bcount && rate < brate),
        };
        if better {
            best = Some((rate, count));
        }
    }
    best.map(|(rate, _)| rate).unwrap_or(1.0)
}

/// Divide the groups into `dp` pipelines by solving the relaxed division
/// problem exactly. Division is independent of the stage ordering and of
/// memory, so it is solved once per grouping at the smallest candidate
/// micro-batch size and reused across the b enumeration.
pub fn divide(
    grouping: &GroupingResult,
    cluster: &ClusterState,
    task: &TaskSpec,
    dp: u32,
    budget: Option<Duration>,
) -> Result<PipelineDivision, PlanError> {
    let coeffs = &task.coefficients;
    let rated = rate_groups(grouping, cluster, coeffs)?;
    if (rated.len() as u32) < dp {
        return Err(PlanError::infeasible(format!(
            "{} groups cannot form {dp} pipelines",
            rated.len()
        )));
    }
    let b = task
        .micro_batch_sizes
        .iter()
        .copied()
        .find(|b| task.global_batch % b == 0)
        .ok_or_else(|| PlanError::infeasible("no candidate micro-batch size divides B"))?;
    let tau_b = coeffs.tau(b)?;

    let y_hat = modal_rate(&rated);
    let mut fast: Vec<usize> = Vec::new();
    let mut slow: Vec<usize> = Vec::new();
    for (i, g) in rated.iter().enumerate() {
        if g.rate == y_hat {
            fast.push(i);
        } else {
            slow.push(i);
        }
    }

    let problem = DivisionProblem {
        fast_count: fast.len() as u64,
        fast_rate: y_hat,
        slow_rates: slow.iter().map(|i| rated[*i].rate).collect(),
        dp,
        micro_batch_total: (task.global_batch / b) as u64,
        tau_b,
    };
    let solution = solve_division_minlp(&problem, budget)?;

    let mut pipelines: Vec<Vec<RatedGroup>> = vec![Vec::new(); dp as usize];
    // Fast groups are interchangeable; deal them out in id order.
    let mut fast_iter = fast.iter();
    for (pipe, count) in solution.fast_counts.iter().enumerate() {
        for _ in 0..*count {
            let idx = fast_iter.next().expect("fast count consistent");
            pipelines[pipe].push(rated[*idx].clone());
        }
    }
    for (slot, pipe) in solution.slow_assignment.iter().enumerate() {
        pipelines[*pipe].push(rated[slow[slot]].clone());
    }
    for pipe in &mut pipelines {
        pipe.sort_by(|a, b| {
            b.group
                .size()
                .cmp(&a.group.size())
                .then(a.group.members[0].cmp(&b.group.members[0]))
        });
    }
    Ok(PipelineDivision {
        pipelines,
        objective: solution.objective,
        provisional_micro_batches: solution.micro_batches,
        budget_exhausted: solution.budget_exhausted,
    })
}

/// Order equal-size groups: descending straggling rate, fastest group last.
/// Stable, so equal rates keep their incoming order.
pub fn order_equal(groups: &mut [RatedGroup]) {
    groups.sort_by(|a, b| b.rate.total_cmp(&a.rate));
}

/// Outcome of ordering one pipeline.
#[derive(Clone, Debug)]
pub struct OrderedStages {
    pub stages: Vec<RatedGroup>,
    /// Layer-assignment objective of the winning permutation.
    pub objective: f64,
}

/// Order a pipeline that may mix group sizes: bundle groups of equal size,
/// order each bundle by descending rate, then try every bundle permutation
/// against the layer assignment and keep the cheapest. Bundles start in
/// ascending size order and ties keep the earliest permutation.
pub fn order_mixed(
    pipeline_groups: &[RatedGroup],
    task: &TaskSpec,
    b: u32,
) -> Result<OrderedStages, PlanError> {
    if pipeline_groups.is_empty() {
        return Err(PlanError::infeasible("empty pipeline"));
    }
    let mut bundles: BTreeMap<u32, Vec<RatedGroup>> = BTreeMap::new();
    for g in pipeline_groups {
        bundles.entry(g.group.size()).or_default().push(g.clone());
    }
    let mut bundle_list: Vec<Vec<RatedGroup>> = bundles.into_values().collect();
    for bundle in &mut bundle_list {
        order_equal(bundle);
    }

    let mut best: Option<OrderedStages> = None;
    let order: Vec<usize> = (0..bundle_list.len()).collect();
    for perm in permutations(&order) {
        let stages: Vec<RatedGroup> =
            perm.iter().flat_map(|bi| bundle_list[*bi].iter().cloned()).collect();
        let pipeline = OrderedPipeline::with_coefficients(
            stages
                .iter()
                .map(|g| StageSpec {
                    group: g.group.clone(),
                    rate: g.rate,
                    min_capacity_mib: g.min_capacity_mib,
                })
                .collect(),
        );
        match assign_layers(&pipeline, task.layers, b, &task.coefficients) {
            Ok((_, objective)) => {
                let better = match &best {
                    None => true,
                    Some(cur) => objective < cur.objective,
                };
                if better {
                    best = Some(OrderedStages { stages, objective });
                }
            }
            Err(PlanError::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| {
        PlanError::infeasible("every bundle ordering exceeds the memory bounds")
    })
}

/// All permutations of `items` in lexicographic index order.
fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

/// Canonical stage order without the layer-ILP search: bundles ascending by
/// size, descending rate inside each. Used for pipelines that no ordering
/// can make feasible, so the lower level benches them instead.
fn canonical_order(pipeline_groups: &[RatedGroup]) -> Vec<RatedGroup> {
    let mut bundles: BTreeMap<u32, Vec<RatedGroup>> = BTreeMap::new();
    for g in pipeline_groups {
        bundles.entry(g.group.size()).or_default().push(g.clone());
    }
    let mut out = Vec::with_capacity(pipeline_groups.len());
    for (_, mut bundle) in bundles {
        order_equal(&mut bundle);
        out.extend(bundle);
    }
    out
}

/// Build the ordered pipelines for one micro-batch size. A pipeline whose
/// every ordering violates the memory bounds keeps its canonical order; the
/// layer assignment will find it infeasible and bench it.
pub fn order_division(
    division: &PipelineDivision,
    task: &TaskSpec,
    b: u32,
) -> Result<Vec<OrderedPipeline>, PlanError> {
    division
        .pipelines
        .iter()
        .map(|groups| {
            let stages = match order_mixed(groups, task, b) {
                Ok(ordered) => ordered.stages,
                Err(PlanError::Infeasible(_)) => canonical_order(groups),
                Err(e) => return Err(e),
            };
            Ok(OrderedPipeline::with_coefficients(
                stages
                    .into_iter()
                    .map(|g| StageSpec {
                        group: g.group,
                        rate: g.rate,
                        min_capacity_mib: g.min_capacity_mib,
                    })
                    .collect(),
            ))
        })
        .collect()
}
