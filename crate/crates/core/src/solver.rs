//! Exact solvers for the small minimax integer programs the planner emits.
//!
//! Both solvers work by implicit enumeration over candidate objective values
//! with exact f64 comparisons, so results are provably optimal and
//! deterministic. Problem sizes are tiny by construction (a handful of
//! pipelines, a few dozen stages), which is why no external MILP/MINLP
//! package is needed.

use std::time::{Duration, Instant};

use crate::error::PlanError;

/// Per-bucket cost shape: monotone in the integer load.
#[derive(Clone, Copy, Debug)]
enum BucketCost {
    /// cost(l) = weight * l. An infinite weight forbids any positive load.
    Weight(f64),
    /// cost(l) = l / throughput. Zero throughput forbids any positive load.
    PerThroughput(f64),
}

impl BucketCost {
    fn cost(self, load: u64) -> f64 {
        if load == 0 {
            return 0.0;
        }
        match self {
            BucketCost::Weight(w) => w * load as f64,
            BucketCost::PerThroughput(d) => {
                if d <= 0.0 {
                    f64::INFINITY
                } else {
                    load as f64 / d
                }
            }
        }
    }

    fn blocked(self) -> bool {
        match self {
            BucketCost::Weight(w) => w.is_infinite(),
            BucketCost::PerThroughput(d) => d <= 0.0,
        }
    }
}

/// Minimize `max_i cost_i(load_i)` subject to `sum load_i = total` and
/// `load_i <= bound_i`, loads in N_0.
#[derive(Clone, Debug)]
pub struct MinimaxAssignmentProblem {
    /// Per-bucket weights; `inf` marks a forbidden bucket.
    pub weights: Vec<f64>,
    /// Optional per-bucket upper bounds on the load.
    pub bounds: Vec<Option<u64>>,
    /// Total load that must be assigned.
    pub total: u64,
}

/// An optimal assignment together with its objective value.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimaxSolution {
    pub loads: Vec<u64>,
    pub objective: f64,
}

struct MinimaxCore<'a> {
    costs: &'a [BucketCost],
    bounds: &'a [Option<u64>],
    total: u64,
}

impl MinimaxCore<'_> {
    fn bucket_cap(&self, i: usize, threshold: f64) -> u64 {
        let ub = self.bounds[i].unwrap_or(self.total).min(self.total);
        if self.costs[i].blocked() {
            return 0;
        }
        // Largest load whose cost stays within the threshold, found by
        // binary search with direct cost comparisons (no inverse division,
        // which could round the wrong way).
        let (mut lo, mut hi) = (0u64, ub);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if self.costs[i].cost(mid) <= threshold {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    fn feasible(&self, threshold: f64) -> bool {
        let mut remaining = self.total;
        for i in 0..self.costs.len() {
            remaining = remaining.saturating_sub(self.bucket_cap(i, threshold));
            if remaining == 0 {
                return true;
            }
        }
        remaining == 0
    }

    /// Lexicographically smallest load vector feasible at `threshold`.
    fn reconstruct(&self, threshold: f64) -> Option<Vec<u64>> {
        let n = self.costs.len();
        let caps: Vec<u64> = (0..n).map(|i| self.bucket_cap(i, threshold)).collect();
        let mut tail_cap = vec![0u64; n + 1];
        for i in (0..n).rev() {
            tail_cap[i] = tail_cap[i + 1].saturating_add(caps[i]);
        }
        if tail_cap[0] < self.total {
            return None;
        }
        let mut loads = vec![0u64; n];
        let mut remaining = self.total;
        for i in 0..n {
            let must_take = remaining.saturating_sub(tail_cap[i + 1]);
            let take = must_take.min(caps[i]);
            loads[i] = take;
            remaining -= take;
        }
        debug_assert_eq!(remaining, 0);
        Some(loads)
    }

    fn solve(&self) -> Option<MinimaxSolution> {
        if self.total == 0 {
            return Some(MinimaxSolution { loads: vec![0; self.costs.len()], objective: 0.0 });
        }
        if self.costs.is_empty() {
            return None;
        }
        // Candidate objective values: every achievable per-bucket cost.
        let mut candidates: Vec<f64> = Vec::new();
        for (i, c) in self.costs.iter().enumerate() {
            if c.blocked() {
                continue;
            }
            let ub = self.bounds[i].unwrap_or(self.total).min(self.total);
            for l in 1..=ub {
                candidates.push(c.cost(l));
            }
        }
        candidates.retain(|v| v.is_finite());
        candidates.sort_by(|a, b| a.total_cmp(b));
        candidates.dedup();
        if candidates.is_empty() {
            return None;
        }
        // The feasible set is upward closed in the threshold, so binary
        // search finds the least feasible candidate.
        if !self.feasible(*candidates.last().unwrap()) {
            return None;
        }
        let (mut lo, mut hi) = (0usize, candidates.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.feasible(candidates[mid]) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let threshold = candidates[lo];
        let loads = self.reconstruct(threshold)?;
        let objective = loads
            .iter()
            .enumerate()
            .map(|(i, l)| self.costs[i].cost(*l))
            .fold(0.0, f64::max);
        Some(MinimaxSolution { loads, objective })
    }
}

/// Solve a minimax assignment exactly. Ties between optimal assignments are
/// broken toward the lexicographically smallest load vector.
pub fn solve_minimax_ilp(problem: &MinimaxAssignmentProblem) -> Result<MinimaxSolution, PlanError> {
    if problem.weights.len() != problem.bounds.len() {
        return Err(PlanError::config("weights/bounds length mismatch"));
    }
    if problem.weights.iter().any(|w| !w.is_infinite() && *w <= 0.0) {
        return Err(PlanError::config("weights must be positive or infinite"));
    }
    let costs: Vec<BucketCost> = problem.weights.iter().map(|w| BucketCost::Weight(*w)).collect();
    let core = MinimaxCore { costs: &costs, bounds: &problem.bounds, total: problem.total };
    core.solve()
        .ok_or_else(|| PlanError::infeasible(format!("cannot place {} units", problem.total)))
}

/// Minimize `max_i load_i / throughput_i` over integer loads summing to
/// `total`. Used for micro-batch division where `throughput_i` is the
/// relaxed per-pipeline throughput.
pub fn solve_min_max_ratio(
    throughputs: &[f64],
    total: u64,
) -> Result<MinimaxSolution, PlanError> {
    let costs: Vec<BucketCost> =
        throughputs.iter().map(|d| BucketCost::PerThroughput(*d)).collect();
    let bounds = vec![None; throughputs.len()];
    let core = MinimaxCore { costs: &costs, bounds: &bounds, total };
    core.solve()
        .ok_or_else(|| PlanError::infeasible(format!("cannot split {total} micro-batches")))
}

/// Pipeline-division problem: place `fast_count` interchangeable fast groups
/// (rate `fast_rate`) and the individually rated slow groups into `dp`
/// pipelines, then split `micro_batch_total` micro-batches, minimizing the
/// slowest pipeline's relaxed time.
#[derive(Clone, Debug)]
pub struct DivisionProblem {
    pub fast_count: u64,
    pub fast_rate: f64,
    pub slow_rates: Vec<f64>,
    pub dp: u32,
    pub micro_batch_total: u64,
    pub tau_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivisionSolution {
    /// Fast groups per pipeline (h_i).
    pub fast_counts: Vec<u64>,
    /// Pipeline index of each slow group, in input order.
    pub slow_assignment: Vec<usize>,
    /// Provisional micro-batch counts; the lower level recomputes them.
    pub micro_batches: Vec<u64>,
    /// Relaxed step seconds of the slowest pipeline.
    pub objective: f64,
    /// Set when the time budget cut the search short of a proven optimum.
    pub budget_exhausted: bool,
}

struct DivisionSearch<'a> {
    problem: &'a DivisionProblem,
    /// Slow indices sorted by descending rate (ties by input index).
    order: Vec<usize>,
    deadline: Option<Instant>,
    best: Option<DivisionSolution>,
    /// Tie key of the incumbent: balanced fast splits win, then lexicographic.
    best_key: Option<(Vec<u64>, Vec<u64>, Vec<usize>)>,
    budget_exhausted: bool,
}

impl DivisionSearch<'_> {
    fn throughput_of_slow(&self, k: usize) -> f64 {
        let y = self.problem.slow_rates[k];
        if y.is_infinite() {
            0.0
        } else {
            1.0 / y
        }
    }

    fn fast_throughput(&self) -> f64 {
        if self.problem.fast_rate.is_infinite() {
            0.0
        } else {
            1.0 / self.problem.fast_rate
        }
    }

    /// Enumerate canonical placements of slow groups; pipelines are
    /// interchangeable until distinguished by content, so the first slow
    /// group is pinned to pipeline 0 and equal-rate groups are placed in
    /// nondecreasing pipeline order.
    fn place(&mut self, pos: usize, placement: &mut Vec<usize>, used: usize) {
        if let Some(deadline) = self.deadline {
            if Instant::now() > deadline {
                self.budget_exhausted = true;
                return;
            }
        }
        if pos == self.order.len() {
            self.evaluate(placement);
            return;
        }
        let dp = self.problem.dp as usize;
        let same_rate_as_prev = pos > 0
            && self.problem.slow_rates[self.order[pos]]
                == self.problem.slow_rates[self.order[pos - 1]];
        let min_pipe = if same_rate_as_prev { placement[pos - 1] } else { 0 };
        let max_pipe = (used + 1).min(dp) - 1;
        for pipe in min_pipe..=max_pipe {
            placement.push(pipe);
            let used_next = used.max(pipe + 1);
            self.place(pos + 1, placement, used_next);
            placement.pop();
            if self.budget_exhausted {
                return;
            }
        }
    }

    fn evaluate(&mut self, placement: &[usize]) {
        let dp = self.problem.dp as usize;
        let mut slow_thr = vec![0.0f64; dp];
        let mut slow_count = vec![0u64; dp];
        for (pos, pipe) in placement.iter().enumerate() {
            slow_thr[*pipe] += self.throughput_of_slow(self.order[pos]);
            slow_count[*pipe] += 1;
        }
        let fast_thr = self.fast_throughput();
        let mut h = vec![0u64; dp];
        self.enumerate_fast(0, self.problem.fast_count, &mut h, &slow_thr, &slow_count, placement, fast_thr);
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate_fast(
        &mut self,
        pipe: usize,
        remaining: u64,
        h: &mut Vec<u64>,
        slow_thr: &[f64],
        slow_count: &[u64],
        placement: &[usize],
        fast_thr: f64,
    ) {
        let dp = self.problem.dp as usize;
        if pipe == dp {
            if remaining == 0 {
                self.score(h, slow_thr, slow_count, placement, fast_thr);
            }
            return;
        }
        if pipe == dp - 1 {
            h[pipe] = remaining;
            self.score(h, slow_thr, slow_count, placement, fast_thr);
            h[pipe] = 0;
            return;
        }
        for take in 0..=remaining {
            h[pipe] = take;
            self.enumerate_fast(pipe + 1, remaining - take, h, slow_thr, slow_count, placement, fast_thr);
            if self.budget_exhausted {
                break;
            }
        }
        h[pipe] = 0;
    }

    fn score(
        &mut self,
        h: &[u64],
        slow_thr: &[f64],
        slow_count: &[u64],
        placement: &[usize],
        fast_thr: f64,
    ) {
        let dp = self.problem.dp as usize;
        // Every pipeline needs at least one group.
        for i in 0..dp {
            if h[i] + slow_count[i] == 0 {
                return;
            }
        }
        let d: Vec<f64> = (0..dp).map(|i| h[i] as f64 * fast_thr + slow_thr[i]).collect();
        // Continuous relaxation bound prunes placements that cannot win.
        let total_thr: f64 = d.iter().sum();
        if total_thr > 0.0 {
            let lower = self.problem.micro_batch_total as f64 / total_thr * self.problem.tau_b;
            if let Some(best) = &self.best {
                if lower > best.objective {
                    return;
                }
            }
        }
        let Ok(inner) = solve_min_max_ratio(&d, self.problem.micro_batch_total) else {
            return;
        };
        let objective = inner.objective * self.problem.tau_b;
        // Map sorted placement positions back to input slow indices.
        let mut slow_assignment = vec![0usize; self.order.len()];
        for (pos, pipe) in placement.iter().enumerate() {
            slow_assignment[self.order[pos]] = *pipe;
        }
        let mut h_sorted = h.to_vec();
        h_sorted.sort_unstable_by(|a, b| b.cmp(a));
        let key = (h_sorted, h.to_vec(), slow_assignment.clone());
        let better = match (&self.best, &self.best_key) {
            (None, _) => true,
            (Some(best), Some(best_key)) => {
                objective < best.objective || (objective == best.objective && key < *best_key)
            }
            _ => true,
        };
        if better {
            self.best = Some(DivisionSolution {
                fast_counts: h.to_vec(),
                slow_assignment,
                micro_batches: inner.loads,
                objective,
                budget_exhausted: false,
            });
            self.best_key = Some(key);
        }
    }
}

/// Solve the pipeline-division problem exactly by enumerating slow-group
/// placements (pruned by symmetry) and fast-group counts, with an inner
/// exact micro-batch split per division.
pub fn solve_division_minlp(
    problem: &DivisionProblem,
    budget: Option<Duration>,
) -> Result<DivisionSolution, PlanError> {
    if problem.dp == 0 {
        return Err(PlanError::config("dp must be >= 1"));
    }
    let groups = problem.fast_count + problem.slow_rates.len() as u64;
    if groups < problem.dp as u64 {
        return Err(PlanError::infeasible(format!(
            "{groups} groups cannot fill {} pipelines",
            problem.dp
        )));
    }
    let mut order: Vec<usize> = (0..problem.slow_rates.len()).collect();
    order.sort_by(|a, b| {
        problem.slow_rates[*b]
            .total_cmp(&problem.slow_rates[*a])
            .then(a.cmp(b))
    });
    let mut search = DivisionSearch {
        problem,
        order,
        deadline: budget.map(|b| Instant::now() + b),
        best: None,
        best_key: None,
        budget_exhausted: false,
    };
    let mut placement = Vec::with_capacity(problem.slow_rates.len());
    search.place(0, &mut placement, 0);
    let budget_exhausted = search.budget_exhausted;
    let mut best = search
        .best
        .ok_or_else(|| PlanError::infeasible("no feasible pipeline division"))?;
    best.budget_exhausted = budget_exhausted;
    Ok(best)
}
