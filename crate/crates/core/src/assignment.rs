//! The lower-level problem: per-pipeline layer assignment, cross-pipeline
//! data assignment, micro-batch-size enumeration, and removal of stages the
//! optimum leaves empty.

use crate::costmodel::memory_bound;
use crate::domain::{GpuId, ProfiledCoefficients, TpGroup};
use crate::error::PlanError;
use crate::solver::{solve_minimax_ilp, MinimaxAssignmentProblem};

/// One pipeline stage as the lower level sees it.
#[derive(Clone, Debug)]
pub struct StageSpec {
    pub group: TpGroup,
    /// Group straggling rate y.
    pub rate: f64,
    /// Smallest member capacity in MiB, for the group-level memory check.
    pub min_capacity_mib: f64,
}

/// Where a pipeline's per-stage layer caps come from.
#[derive(Clone, Debug)]
pub enum MemoryModel {
    /// Derive caps from the profiled coefficients; they depend on the
    /// micro-batch size, the stage position and the live pipeline length,
    /// so they are recomputed whenever stages are dropped.
    Coefficients,
    /// Direct per-stage caps, aligned with the stage list. Used by oracle
    /// tests that want arbitrary bounds.
    FixedCaps(Vec<Option<u64>>),
}

/// An ordered pipeline ready for layer assignment.
#[derive(Clone, Debug)]
pub struct OrderedPipeline {
    pub stages: Vec<StageSpec>,
    pub memory: MemoryModel,
}

impl OrderedPipeline {
    pub fn with_coefficients(stages: Vec<StageSpec>) -> Self {
        Self { stages, memory: MemoryModel::Coefficients }
    }

    fn caps(&self, b: u32, coeffs: &ProfiledCoefficients) -> Vec<Option<u64>> {
        let pp = self.stages.len() as u32;
        match &self.memory {
            MemoryModel::FixedCaps(caps) => caps.clone(),
            MemoryModel::Coefficients => self
                .stages
                .iter()
                .enumerate()
                .map(|(j, stage)| {
                    memory_bound(
                        b,
                        j as u32 + 1,
                        pp,
                        stage.group.size(),
                        stage.min_capacity_mib,
                        coeffs,
                    )
                    .max_layers()
                })
                .collect(),
        }
    }
}

/// Layer split of one pipeline: per-stage layers plus the stage bottleneck
/// o = max_j y_j * l_j.
pub fn assign_layers(
    pipeline: &OrderedPipeline,
    layers: u32,
    b: u32,
    coeffs: &ProfiledCoefficients,
) -> Result<(Vec<u64>, f64), PlanError> {
    if pipeline.stages.is_empty() {
        return Err(PlanError::infeasible("pipeline has no stages"));
    }
    let caps = pipeline.caps(b, coeffs);
    let problem = MinimaxAssignmentProblem {
        weights: pipeline.stages.iter().map(|s| s.rate).collect(),
        bounds: caps,
        total: layers as u64,
    };
    let sol = solve_minimax_ilp(&problem)?;
    Ok((sol.loads, sol.objective))
}

/// Micro-batch split across pipelines given their layer bottlenecks.
/// Pipelines with an infinite bottleneck receive zero micro-batches.
pub fn assign_data(bottlenecks: &[f64], total_micro_batches: u64) -> Result<Vec<u64>, PlanError> {
    let problem = MinimaxAssignmentProblem {
        weights: bottlenecks.to_vec(),
        bounds: vec![None; bottlenecks.len()],
        total: total_micro_batches,
    };
    Ok(solve_minimax_ilp(&problem)?.loads)
}

/// Per-pipeline outcome of a fixed-b solve.
#[derive(Clone, Debug)]
pub struct PipelineSolution {
    /// Stages that survived compaction, with their layer counts.
    pub stages: Vec<(StageSpec, u64)>,
    /// Bottleneck o_i = max_j y_j * l_j; infinite when the pipeline could
    /// not fit the model at this micro-batch size and was benched.
    pub bottleneck: f64,
    /// GPUs whose stages ended up with zero layers.
    pub removed: Vec<GpuId>,
}

/// A full lower-level solution for one micro-batch size.
#[derive(Clone, Debug)]
pub struct LowerSolution {
    pub micro_batch_size: u32,
    pub pipelines: Vec<PipelineSolution>,
    pub micro_batches: Vec<u64>,
    /// Estimated step seconds: max_i o_i * m_i * tau(b).
    pub t_hat_seconds: f64,
}

/// Solve one pipeline at fixed b, dropping zero-layer stages and re-solving
/// with the shortened pipeline until the split is stable. Dropping a stage
/// loosens the activation-accumulation bounds, so the objective never gets
/// worse along the way.
fn solve_pipeline(
    pipeline: &OrderedPipeline,
    layers: u32,
    b: u32,
    coeffs: &ProfiledCoefficients,
) -> Result<PipelineSolution, PlanError> {
    let mut current = pipeline.clone();
    let mut removed: Vec<GpuId> = Vec::new();
    loop {
        let (loads, bottleneck) = match assign_layers(&current, layers, b, coeffs) {
            Ok(r) => r,
            Err(PlanError::Infeasible(_)) => {
                let removed = current
                    .stages
                    .iter()
                    .flat_map(|s| s.group.members.iter().copied())
                    .collect();
                return Ok(PipelineSolution {
                    stages: Vec::new(),
                    bottleneck: f64::INFINITY,
                    removed,
                });
            }
            Err(e) => return Err(e),
        };
        if loads.iter().all(|l| *l > 0) {
            let stages =
                current.stages.iter().cloned().zip(loads.iter().copied()).collect();
            return Ok(PipelineSolution { stages, bottleneck, removed });
        }
        let mut kept = Vec::new();
        let mut kept_caps = Vec::new();
        let caps = match &current.memory {
            MemoryModel::FixedCaps(caps) => Some(caps.clone()),
            MemoryModel::Coefficients => None,
        };
        for (j, stage) in current.stages.iter().enumerate() {
            if loads[j] == 0 {
                removed.extend(stage.group.members.iter().copied());
            } else {
                kept.push(stage.clone());
                if let Some(caps) = &caps {
                    kept_caps.push(caps[j]);
                }
            }
        }
        current = OrderedPipeline {
            stages: kept,
            memory: match current.memory {
                MemoryModel::FixedCaps(_) => MemoryModel::FixedCaps(kept_caps),
                MemoryModel::Coefficients => MemoryModel::Coefficients,
            },
        };
    }
}

/// Solve the lower-level problem for one micro-batch size: layer split per
/// pipeline, then the data split across pipelines.
pub fn solve_for_b(
    pipelines: &[OrderedPipeline],
    layers: u32,
    global_batch: u32,
    b: u32,
    coeffs: &ProfiledCoefficients,
) -> Result<LowerSolution, PlanError> {
    if b == 0 || global_batch % b != 0 {
        return Err(PlanError::infeasible(format!("micro-batch size {b} does not divide B")));
    }
    let tau_b = coeffs.tau(b)?;
    let mut solved = Vec::with_capacity(pipelines.len());
    for pipeline in pipelines {
        solved.push(solve_pipeline(pipeline, layers, b, coeffs)?);
    }
    if solved.iter().all(|p| p.bottleneck.is_infinite()) {
        return Err(PlanError::infeasible(format!("no pipeline can hold {layers} layers at b={b}")));
    }
    let bottlenecks: Vec<f64> = solved.iter().map(|p| p.bottleneck).collect();
    let micro = assign_data(&bottlenecks, (global_batch / b) as u64)?;
    // A benched pipeline's GPUs are all removed.
    let t_hat = solved
        .iter()
        .zip(&micro)
        .map(|(p, m)| if *m == 0 { 0.0 } else { p.bottleneck * *m as f64 })
        .fold(0.0, f64::max)
        * tau_b;
    Ok(LowerSolution {
        micro_batch_size: b,
        pipelines: solved,
        micro_batches: micro,
        t_hat_seconds: t_hat,
    })
}

/// Enumerate candidate micro-batch sizes ascending and keep the best
/// estimated step time; ties prefer the smaller b, whose warm-up gap is
/// smaller. `pipelines_for` supplies the per-b stage ordering.
pub fn solve_lower(
    candidate_b: &[u32],
    layers: u32,
    global_batch: u32,
    b_cap: u32,
    coeffs: &ProfiledCoefficients,
    mut pipelines_for: impl FnMut(u32) -> Result<Vec<OrderedPipeline>, PlanError>,
) -> Result<LowerSolution, PlanError> {
    let mut best: Option<LowerSolution> = None;
    for &b in candidate_b {
        if b == 0 || b > b_cap {
            continue;
        }
        if global_batch % b != 0 {
            continue;
        }
        if coeffs.tau(b).is_err() {
            continue;
        }
        let pipelines = match pipelines_for(b) {
            Ok(p) => p,
            Err(PlanError::Infeasible(_)) => break, // memory only tightens with b
            Err(e) => return Err(e),
        };
        match solve_for_b(&pipelines, layers, global_batch, b, coeffs) {
            Ok(sol) => {
                let better = match &best {
                    None => true,
                    Some(cur) => sol.t_hat_seconds < cur.t_hat_seconds,
                };
                if better {
                    best = Some(sol);
                }
            }
            Err(PlanError::Infeasible(_)) => break,
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| PlanError::infeasible("no feasible micro-batch size"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::HeadTailCoefficients;
    use std::collections::BTreeMap;

    fn coeffs(tau: &[(u32, f64)]) -> ProfiledCoefficients {
        ProfiledCoefficients {
            tau: tau.iter().copied().collect(),
            zeta: BTreeMap::from([(1, 1.0)]),
            a_f: 0.0,
            a_fb: 0.0,
            s: 0.0,
            head_tail: HeadTailCoefficients::default(),
            gap_mib: 0.0,
        }
    }

    fn stage(node: u32, idx: u32, rate: f64) -> StageSpec {
        StageSpec {
            group: TpGroup::new(vec![GpuId::new(node, idx)]),
            rate,
            min_capacity_mib: 1e9,
        }
    }

    fn pipeline(rates: &[f64], caps: Option<Vec<Option<u64>>>) -> OrderedPipeline {
        let stages =
            rates.iter().enumerate().map(|(i, r)| stage(0, i as u32, *r)).collect();
        OrderedPipeline {
            stages,
            memory: match caps {
                Some(c) => MemoryModel::FixedCaps(c),
                None => MemoryModel::FixedCaps(vec![None; rates.len()]),
            },
        }
    }

    #[test]
    fn layer_split_two_stages() {
        let c = coeffs(&[(1, 1.0)]);
        let p = pipeline(&[1.0, 2.0], None);
        let (l, o) = assign_layers(&p, 4, 1, &c).unwrap();
        assert_eq!(l, vec![3, 1]);
        assert_eq!(o, 3.0);
    }

    #[test]
    fn layer_split_uniform_even() {
        let c = coeffs(&[(1, 1.0)]);
        let p = pipeline(&[2.0, 2.0, 2.0], None);
        let (l, o) = assign_layers(&p, 6, 1, &c).unwrap();
        assert_eq!(l, vec![2, 2, 2]);
        assert_eq!(o, 4.0);
    }

    #[test]
    fn data_split_examples() {
        let m = assign_data(&[1.0, 2.0], 6).unwrap();
        assert_eq!(m, vec![4, 2]);
        let even = assign_data(&[3.0, 3.0], 8).unwrap();
        assert_eq!(even, vec![4, 4]);
        let benched = assign_data(&[f64::INFINITY, 1.0], 5).unwrap();
        assert_eq!(benched, vec![0, 5]);
    }

    #[test]
    fn infinite_rate_stage_gets_zero_layers_and_is_compacted() {
        let c = coeffs(&[(1, 1.0)]);
        let p = pipeline(&[f64::INFINITY, 1.0], None);
        let sol = solve_pipeline(&p, 4, 1, &c).unwrap();
        assert_eq!(sol.stages.len(), 1);
        assert_eq!(sol.removed, vec![GpuId::new(0, 0)]);
        assert_eq!(sol.bottleneck, 4.0);
    }

    #[test]
    fn benched_pipeline_when_caps_too_small() {
        let c = coeffs(&[(1, 1.0)]);
        let good = pipeline(&[1.0], None);
        let bad = pipeline(&[1.0, 1.0], Some(vec![Some(1), Some(1)]));
        let sol = solve_for_b(&[bad, good], 4, 4, 1, &c).unwrap();
        assert!(sol.pipelines[0].bottleneck.is_infinite());
        assert_eq!(sol.micro_batches, vec![0, 4]);
        assert_eq!(sol.pipelines[0].removed.len(), 2);
    }

    #[test]
    fn b_enumeration_skips_non_divisors_and_prefers_best() {
        // Single stage, single pipeline: T = (B/b) * L * y * tau(b).
        // tau(2) < 2*tau(1) makes b=2 strictly better.
        let c = coeffs(&[(1, 1.0), (2, 1.8)]);
        let sol = solve_lower(&[1, 2, 3], 4, 8, 16, &c, |_| {
            Ok(vec![pipeline(&[1.0], None)])
        })
        .unwrap();
        assert_eq!(sol.micro_batch_size, 2);
        assert_eq!(sol.t_hat_seconds, 4.0 * 4.0 * 1.8);
    }

    #[test]
    fn b_tie_prefers_smaller() {
        // tau(2) = 2*tau(1): identical estimate, keep b=1.
        let c = coeffs(&[(1, 1.0), (2, 2.0)]);
        let sol = solve_lower(&[1, 2], 4, 8, 16, &c, |_| {
            Ok(vec![pipeline(&[1.0], None)])
        })
        .unwrap();
        assert_eq!(sol.micro_batch_size, 1);
    }

    #[test]
    fn structural_invariants_hold_on_solutions() {
        let c = coeffs(&[(1, 0.5)]);
        let p1 = pipeline(&[1.0, 3.0], None);
        let p2 = pipeline(&[2.0], None);
        let sol = solve_for_b(&[p1, p2], 6, 12, 1, &c).unwrap();
        for p in &sol.pipelines {
            let total: u64 = p.stages.iter().map(|(_, l)| *l).sum();
            assert_eq!(total, 6);
        }
        let data: u64 = sol.micro_batches.iter().map(|m| m * 1).sum();
        assert_eq!(data, 12);
    }
}
