//! Closed-form time and memory cost model.
//!
//! Everything here is a pure function of profiled coefficients: group
//! straggling rates, 1F1B pipeline step time (exact and approximate), the
//! per-stage memory bound, and the throughput-conservation optimum ratio.

use crate::domain::ProfiledCoefficients;
use crate::error::PlanError;

/// Seconds one stage needs for one micro-batch: t = y * l * tau(b).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageCost {
    pub t: f64,
}

pub fn stage_time(group_rate: f64, layers: u32, tau_b: f64) -> f64 {
    group_rate * layers as f64 * tau_b
}

/// Group straggling rate y = rho_n * max member rate.
///
/// A failed member (infinite rate) propagates to an infinite group rate.
pub fn group_rate(
    member_rates: &[f64],
    coeffs: &ProfiledCoefficients,
) -> Result<f64, PlanError> {
    if member_rates.is_empty() {
        return Err(PlanError::config("group must have at least one member"));
    }
    let rho = coeffs.rho(member_rates.len() as u32)?;
    let max = member_rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(rho * max)
}

/// Exact 1F1B step time of one pipeline: (m - 1) * max_j t_j + sum_j t_j.
///
/// The first term is the steady 1F1B phase; the second covers warm-up and
/// cool-down. An idle pipeline (m = 0) takes no time.
pub fn pipeline_time_exact(micro_batches: u64, stage_times: &[f64]) -> f64 {
    if micro_batches == 0 || stage_times.is_empty() {
        return 0.0;
    }
    let max = stage_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = stage_times.iter().sum();
    (micro_batches - 1) as f64 * max + sum
}

/// Planner surrogate for the step time: m * max_j t_j.
///
/// Always a lower bound on [`pipeline_time_exact`]; the gap is
/// `sum_j t_j - max_j t_j`.
pub fn pipeline_time_approx(micro_batches: u64, stage_times: &[f64]) -> f64 {
    if micro_batches == 0 || stage_times.is_empty() {
        return 0.0;
    }
    let max = stage_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    micro_batches as f64 * max
}

/// Per-stage memory bound: a stage holding l layers fits iff
/// `l * mu + nu <= cap`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryBound {
    /// MiB per layer.
    pub mu: f64,
    /// MiB of stage-constant overhead (embedding / LM head activations).
    pub nu: f64,
    /// MiB available to the whole group.
    pub cap: f64,
}

impl MemoryBound {
    /// Largest layer count this stage can hold, if any.
    pub fn max_layers(&self) -> Option<u64> {
        if self.nu > self.cap {
            return Some(0);
        }
        if self.mu <= 0.0 {
            return None; // unconstrained
        }
        Some(((self.cap - self.nu) / self.mu).floor() as u64)
    }
}

/// Memory bound of stage `j` (1-based) in a pipeline of `pp` stages running
/// micro-batches of size `b` on a group of `group_size` GPUs.
///
/// A stage accumulates `pp - j` rounds of forward activations before the
/// steady 1F1B phase, so earlier stages admit fewer layers. The first stage
/// additionally hosts the embedding, the last stage the LM head; a
/// single-stage pipeline hosts both. Coefficients are per GPU at TP 1, so
/// the group lifts the per-GPU check by scaling the capacity with its size,
/// and the weakest member's capacity constrains the whole group.
pub fn memory_bound(
    b: u32,
    stage_index: u32,
    pp: u32,
    group_size: u32,
    min_member_capacity_mib: f64,
    coeffs: &ProfiledCoefficients,
) -> MemoryBound {
    debug_assert!(stage_index >= 1 && stage_index <= pp);
    let b = b as f64;
    let pending = (pp - stage_index) as f64;
    let mu = b * (coeffs.a_f * pending + coeffs.a_fb) + coeffs.s;
    let ht = &coeffs.head_tail;
    let mut nu = 0.0;
    if stage_index == 1 {
        nu += b * (ht.a_f_head * (pp - 1) as f64 + ht.a_fb_head) + ht.s_head;
    }
    if stage_index == pp {
        nu += b * ht.a_fb_tail + ht.s_tail;
    }
    let cap = group_size as f64 * (min_member_capacity_mib - coeffs.gap_mib);
    MemoryBound { mu, nu, cap }
}

/// Throughput-conservation bound on the slowdown of a cluster of `total`
/// GPUs where `straggler_rates` lists the stragglers' rates:
/// N / ((N - n) + sum_i 1/x_i). Failed GPUs contribute zero throughput.
pub fn theoretic_optimum_ratio(total: usize, straggler_rates: &[f64]) -> f64 {
    let n = straggler_rates.len();
    debug_assert!(n <= total);
    let straggler_throughput: f64 = straggler_rates.iter().map(|x| 1.0 / x).sum();
    total as f64 / ((total - n) as f64 + straggler_throughput)
}

/// Stage times of every pipeline of a finished plan under live per-GPU
/// rates. `rate_of` supplies the current rate of each GPU.
pub fn plan_stage_times(
    plan: &crate::domain::ParallelizationPlan,
    coeffs: &ProfiledCoefficients,
    mut rate_of: impl FnMut(crate::domain::GpuId) -> f64,
) -> Result<Vec<Vec<f64>>, PlanError> {
    let tau_b = coeffs.tau(plan.micro_batch_size)?;
    plan.pipelines
        .iter()
        .map(|pipe| {
            pipe.stages
                .iter()
                .map(|stage| {
                    let rates: Vec<f64> = stage.gpus.iter().map(|g| rate_of(*g)).collect();
                    Ok(stage_time(group_rate(&rates, coeffs)?, stage.layers, tau_b))
                })
                .collect()
        })
        .collect()
}

/// Exact step seconds of a plan: the slowest pipeline's 1F1B time.
/// Synchronous data parallelism makes the step as slow as its worst pipeline.
pub fn plan_step_time_exact(
    plan: &crate::domain::ParallelizationPlan,
    coeffs: &ProfiledCoefficients,
    rate_of: impl FnMut(crate::domain::GpuId) -> f64,
) -> Result<f64, PlanError> {
    let times = plan_stage_times(plan, coeffs, rate_of)?;
    Ok(plan
        .pipelines
        .iter()
        .zip(&times)
        .map(|(pipe, t)| pipeline_time_exact(pipe.micro_batches as u64, t))
        .fold(0.0, f64::max))
}

/// Estimated step seconds of a plan under the planner's surrogate model.
pub fn plan_step_time_estimate(
    plan: &crate::domain::ParallelizationPlan,
    coeffs: &ProfiledCoefficients,
    rate_of: impl FnMut(crate::domain::GpuId) -> f64,
) -> Result<f64, PlanError> {
    let times = plan_stage_times(plan, coeffs, rate_of)?;
    Ok(plan
        .pipelines
        .iter()
        .zip(&times)
        .map(|(pipe, t)| pipeline_time_approx(pipe.micro_batches as u64, t))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::HeadTailCoefficients;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn coeffs(zeta: &[(u32, f64)]) -> ProfiledCoefficients {
        ProfiledCoefficients {
            tau: BTreeMap::from([(1, 0.05)]),
            zeta: zeta.iter().copied().collect(),
            a_f: 0.0,
            a_fb: 0.0,
            s: 0.0,
            head_tail: HeadTailCoefficients::default(),
            gap_mib: 0.0,
        }
    }

    #[test]
    fn group_rate_of_all_normals_is_rho() {
        let c = coeffs(&[(1, 1.0), (2, 0.6), (4, 0.3)]);
        assert_eq!(group_rate(&[1.0, 1.0], &c).unwrap(), 0.6);
        assert_eq!(group_rate(&[1.0, 1.0, 1.0, 1.0], &c).unwrap(), 0.3);
    }

    #[test]
    fn group_rate_is_rho_times_max() {
        let c = coeffs(&[(1, 1.0), (2, 0.6)]);
        assert_eq!(group_rate(&[1.0, 2.5], &c).unwrap(), 0.6 * 2.5);
        // Isolated level-1 straggler at TP 1 keeps its own rate.
        assert_eq!(group_rate(&[2.62], &c).unwrap(), 2.62);
        // Failure propagates.
        assert!(group_rate(&[1.0, f64::INFINITY], &c).unwrap().is_infinite());
        // Unknown group size is a configuration error.
        assert!(group_rate(&[1.0; 8], &c).is_err());
    }

    #[test]
    fn exact_pipeline_time_formula() {
        assert_eq!(pipeline_time_exact(1, &[1.0, 2.0, 3.0]), 6.0);
        assert_eq!(pipeline_time_exact(4, &[1.0, 2.0, 1.0]), 3.0 * 2.0 + 4.0);
        assert_eq!(pipeline_time_exact(0, &[1.0]), 0.0);
    }

    #[test]
    fn approx_pipeline_time_formula() {
        assert_eq!(pipeline_time_approx(64, &[0.5]), 32.0);
        assert_eq!(pipeline_time_approx(4, &[1.0, 2.0, 1.0]), 8.0);
    }

    #[test]
    fn approx_never_exceeds_exact() {
        let cases: &[(u64, &[f64])] = &[
            (1, &[1.0, 2.0]),
            (7, &[0.3, 0.3, 0.3]),
            (100, &[5.0]),
            (3, &[2.0, 1.0, 4.0, 0.5]),
        ];
        for (m, t) in cases {
            let exact = pipeline_time_exact(*m, t);
            let approx = pipeline_time_approx(*m, t);
            assert!(approx <= exact + 1e-12, "m={m} t={t:?}");
            let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = t.iter().sum();
            assert_relative_eq!(exact - approx, sum - max, epsilon = 1e-12);
        }
    }

    #[test]
    fn memory_bound_middle_stage_has_zero_nu() {
        let mut c = coeffs(&[(1, 1.0)]);
        c.a_f = 1.0;
        c.a_fb = 3.0;
        c.s = 10.0;
        c.head_tail = HeadTailCoefficients {
            a_f_head: 0.5,
            a_fb_head: 1.0,
            s_head: 2.0,
            a_fb_tail: 0.7,
            s_tail: 3.0,
        };
        let mid = memory_bound(2, 2, 4, 1, 100.0, &c);
        assert_eq!(mid.nu, 0.0);
        // mu at j=1, pp=4, b=2: 2*(1*3+3)+10 = 22
        let first = memory_bound(2, 1, 4, 1, 100.0, &c);
        assert_eq!(first.mu, 22.0);
        assert_eq!(first.nu, 2.0 * (0.5 * 3.0 + 1.0) + 2.0);
        // last stage drops the pre-accumulation term: mu = b*a_fb + s
        let last = memory_bound(2, 4, 4, 1, 100.0, &c);
        assert_eq!(last.mu, 2.0 * 3.0 + 10.0);
        assert_eq!(last.nu, 2.0 * 0.7 + 3.0);
        // a single-stage pipeline hosts both head and tail
        let solo = memory_bound(2, 1, 1, 1, 100.0, &c);
        assert_eq!(solo.nu, first_nu_at_pp1(&c));
    }

    fn first_nu_at_pp1(c: &ProfiledCoefficients) -> f64 {
        let ht = &c.head_tail;
        2.0 * ht.a_fb_head + ht.s_head + 2.0 * ht.a_fb_tail + ht.s_tail
    }

    #[test]
    fn memory_bound_mu_nonincreasing_in_stage_index() {
        let mut c = coeffs(&[(1, 1.0)]);
        c.a_f = 2.0;
        c.a_fb = 3.0;
        c.s = 5.0;
        let mus: Vec<f64> =
            (1..=6).map(|j| memory_bound(4, j, 6, 2, 50.0, &c).mu).collect();
        assert!(mus.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn memory_cap_scales_with_group_and_respects_gap() {
        let mut c = coeffs(&[(1, 1.0)]);
        c.gap_mib = 4096.0;
        let b = memory_bound(1, 1, 1, 8, 81920.0, &c);
        assert_eq!(b.cap, 8.0 * (81920.0 - 4096.0));
    }

    #[test]
    fn max_layers_rounds_down() {
        let b = MemoryBound { mu: 3.0, nu: 1.0, cap: 10.0 };
        assert_eq!(b.max_layers(), Some(3));
        let tight = MemoryBound { mu: 3.0, nu: 11.0, cap: 10.0 };
        assert_eq!(tight.max_layers(), Some(0));
        let free = MemoryBound { mu: 0.0, nu: 0.0, cap: 10.0 };
        assert_eq!(free.max_layers(), None);
    }

    #[test]
    fn theoretic_optimum_matches_reported_values() {
        assert_eq!(theoretic_optimum_ratio(64, &[]), 1.0);
        // One straggler at 2.62 out of 64 GPUs; scaled by a 19.2 s normal
        // step this lands on the reported 19.4 s optimum.
        let r = theoretic_optimum_ratio(64, &[2.62]);
        assert_relative_eq!(19.2 * r, 19.4, epsilon = 0.05);
        assert_relative_eq!(r, 64.0 / 63.381679, epsilon = 1e-6);
        // A failed GPU contributes zero throughput.
        assert_relative_eq!(
            theoretic_optimum_ratio(4, &[f64::INFINITY]),
            4.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn theoretic_optimum_stays_in_range() {
        let r = theoretic_optimum_ratio(8, &[1.5, 2.0, 4.0]);
        assert!(r >= 1.0);
        assert!(r <= 8.0 / 5.0);
    }
}
