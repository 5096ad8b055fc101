//! GPU grouping: partition each node's GPUs into TP groups.
//!
//! Even partitioning sorts a node's GPUs by descending rate and chunks them,
//! which is provably optimal for equal group sizes. Heavy stragglers are then
//! isolated one by one: candidate re-groupings of the remainder are the
//! consecutive-block arrangements, scored against the incumbent with the
//! relaxed throughput ratio.

use std::collections::BTreeSet;

use crate::costmodel::group_rate;
use crate::domain::{ClusterState, GpuId, ProfiledCoefficients, TpGroup};
use crate::error::PlanError;

/// Adopt a split only when it strictly improves the relaxed ratio; ties keep
/// the simpler grouping (fewer groups means fewer warm-up bubbles, which the
/// relaxation does not see).
const IMPROVEMENT_EPS: f64 = 1e-9;

/// Result of grouping a whole cluster for one candidate TP limit.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupingResult {
    pub groups: Vec<TpGroup>,
    pub tp_limit: u32,
}

/// One grouping decision recorded for `plan --explain`.
#[derive(Clone, Debug)]
pub struct SplitTraceEntry {
    pub node: u32,
    pub straggler: GpuId,
    pub candidates_examined: usize,
    pub best_ratio: f64,
    pub adopted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RatedGpu {
    id: GpuId,
    rate: f64,
}

/// Sort GPUs by descending rate; equal rates keep ascending id order.
fn sort_desc(gpus: &mut [RatedGpu]) {
    gpus.sort_by(|a, b| b.rate.total_cmp(&a.rate).then(a.id.cmp(&b.id)));
}

/// Theorem-style even partition: sort descending, chunk into consecutive
/// blocks of `k`.
pub fn even_partition(node_rates: &[(GpuId, f64)], k: u32) -> Result<Vec<Vec<GpuId>>, PlanError> {
    let n = node_rates.len();
    if k == 0 || n % k as usize != 0 {
        return Err(PlanError::config(format!("group size {k} does not divide {n} GPUs")));
    }
    let mut rated: Vec<RatedGpu> =
        node_rates.iter().map(|(id, rate)| RatedGpu { id: *id, rate: *rate }).collect();
    sort_desc(&mut rated);
    Ok(rated
        .chunks(k as usize)
        .map(|chunk| chunk.iter().map(|g| g.id).collect())
        .collect())
}

/// Theorem-2 relaxed time ratio T' / T'' = (sum 1/y'') / (sum 1/y').
///
/// Below 1 means grouping `a` is faster under the continuous relaxation.
/// Infinite rates contribute zero throughput.
pub fn relaxed_ratio(rates_a: &[f64], rates_b: &[f64]) -> f64 {
    let thr = |rates: &[f64]| -> f64 {
        rates.iter().map(|y| if y.is_infinite() { 0.0 } else { 1.0 / y }).sum()
    };
    thr(rates_b) / thr(rates_a)
}

/// Maximal dyadic decomposition of `n` with parts capped at `max_part`,
/// descending (e.g. 7 -> [4, 2, 1]).
pub fn dyadic_sizes(mut n: u32, max_part: u32) -> Vec<u32> {
    let mut sizes = Vec::new();
    let mut part = max_part.min(if n == 0 { 1 } else { n.next_power_of_two() });
    while !part.is_power_of_two() {
        part -= 1;
    }
    while n > 0 {
        while part > n {
            part /= 2;
        }
        n -= part;
        sizes.push(part);
    }
    sizes
}

/// Enumerate the candidate groupings admitted by the consecutive-block
/// property: for each distinct arrangement of the target sizes, lay the
/// blocks consecutively over the descending-sorted rates.
///
/// Candidates come back in canonical order: sorted by the start offsets of
/// the blocks, grouped by ascending block size. For 7 GPUs into sizes
/// {1, 2, 4} this yields exactly 6 candidates.
pub fn enumerate_splits(
    sorted_rates_desc: &[(GpuId, f64)],
    target_sizes: &[u32],
) -> Result<Vec<Vec<Vec<GpuId>>>, PlanError> {
    let total: u32 = target_sizes.iter().sum();
    if total as usize != sorted_rates_desc.len() {
        return Err(PlanError::config(format!(
            "sizes sum to {total} but {} GPUs given",
            sorted_rates_desc.len()
        )));
    }
    debug_assert!(sorted_rates_desc
        .windows(2)
        .all(|w| w[0].1 >= w[1].1 || (w[0].1.is_nan() && w[1].1.is_nan())));

    let mut sizes = target_sizes.to_vec();
    sizes.sort_unstable();

    let mut arrangements: Vec<Vec<u32>> = Vec::new();
    distinct_permutations(&mut sizes, &mut Vec::new(), &mut arrangements);

    // Canonical sort key: for sizes ascending, the start offset of each
    // size's blocks.
    let mut keyed: Vec<(Vec<usize>, Vec<u32>)> = arrangements
        .into_iter()
        .map(|arr| {
            let mut offsets: Vec<(u32, usize)> = Vec::with_capacity(arr.len());
            let mut pos = 0usize;
            for size in &arr {
                offsets.push((*size, pos));
                pos += *size as usize;
            }
            offsets.sort();
            (offsets.into_iter().map(|(_, p)| p).collect(), arr)
        })
        .collect();
    keyed.sort();

    let mut out = Vec::with_capacity(keyed.len());
    for (_, arr) in keyed {
        // Blocks in the order of the sorted sizes (smallest size first),
        // each a consecutive run of the descending-rate sequence.
        let mut start = vec![0usize; arr.len()];
        let mut pos = 0usize;
        for (i, size) in arr.iter().enumerate() {
            start[i] = pos;
            pos += *size as usize;
        }
        let mut blocks: Vec<(u32, usize)> =
            arr.iter().copied().zip(start.iter().copied()).collect();
        blocks.sort();
        let candidate = blocks
            .into_iter()
            .map(|(size, s)| {
                sorted_rates_desc[s..s + size as usize].iter().map(|(id, _)| *id).collect()
            })
            .collect();
        out.push(candidate);
    }
    Ok(out)
}

fn distinct_permutations(pool: &mut Vec<u32>, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pool.is_empty() {
        out.push(current.clone());
        return;
    }
    let mut last: Option<u32> = None;
    for i in 0..pool.len() {
        if last == Some(pool[i]) {
            continue;
        }
        last = Some(pool[i]);
        let v = pool.remove(i);
        current.push(v);
        distinct_permutations(pool, current, out);
        current.pop();
        pool.insert(i, v);
    }
}

fn group_rates(
    groups: &[Vec<RatedGpu>],
    coeffs: &ProfiledCoefficients,
) -> Result<Vec<f64>, PlanError> {
    groups
        .iter()
        .map(|g| {
            let rates: Vec<f64> = g.iter().map(|m| m.rate).collect();
            group_rate(&rates, coeffs)
        })
        .collect()
}

/// Group one node's GPUs for a given TP limit.
///
/// Starts from the even partition, then walks the stragglers in descending
/// rate order and isolates each one when some consecutive-block re-grouping
/// of its group's remainder improves the relaxed ratio.
pub fn group_node(
    node_rates: &[(GpuId, f64)],
    tp_limit: u32,
    coeffs: &ProfiledCoefficients,
    trace: Option<&mut Vec<SplitTraceEntry>>,
) -> Result<Vec<TpGroup>, PlanError> {
    let mut trace = trace;
    if node_rates.is_empty() {
        return Ok(Vec::new());
    }
    let mut rated: Vec<RatedGpu> =
        node_rates.iter().map(|(id, rate)| RatedGpu { id: *id, rate: *rate }).collect();
    sort_desc(&mut rated);

    let n = rated.len() as u32;
    let k = tp_limit.min(n);

    // Initial grouping: even chunks when the size divides, otherwise the
    // best consecutive-block arrangement of the dyadic decomposition.
    let mut groups: Vec<Vec<RatedGpu>> = if n % k == 0 {
        rated.chunks(k as usize).map(|c| c.to_vec()).collect()
    } else {
        let sizes = dyadic_sizes(n, k);
        best_split(&rated, &sizes, coeffs)?
    };

    // Stragglers in descending rate order; ties by id.
    let stragglers: Vec<RatedGpu> =
        rated.iter().copied().filter(|g| g.rate > 1.0).collect();

    for straggler in stragglers {
        let gi = groups
            .iter()
            .position(|g| g.iter().any(|m| m.id == straggler.id))
            .expect("straggler must be grouped");
        if groups[gi].len() == 1 {
            continue;
        }
        let remainder: Vec<RatedGpu> =
            groups[gi].iter().copied().filter(|m| m.id != straggler.id).collect();
        let sizes = dyadic_sizes(remainder.len() as u32, k);
        let rest: Vec<(GpuId, f64)> = remainder.iter().map(|m| (m.id, m.rate)).collect();
        let candidates = enumerate_splits(&rest, &sizes)?;

        let incumbent_rates = group_rates(&groups, coeffs)?;
        let mut best: Option<(f64, Vec<Vec<RatedGpu>>)> = None;
        for candidate in &candidates {
            let mut variant: Vec<Vec<RatedGpu>> = groups.clone();
            variant.remove(gi);
            variant.push(vec![straggler]);
            for block in candidate {
                variant.push(
                    block
                        .iter()
                        .map(|id| remainder.iter().copied().find(|m| m.id == *id).unwrap())
                        .collect(),
                );
            }
            let variant_rates = group_rates(&variant, coeffs)?;
            let ratio = relaxed_ratio(&variant_rates, &incumbent_rates);
            let better = match &best {
                None => ratio < 1.0 - IMPROVEMENT_EPS,
                Some((r, _)) => ratio < *r,
            };
            if better {
                best = Some((ratio, variant));
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(SplitTraceEntry {
                node: straggler.id.node,
                straggler: straggler.id,
                candidates_examined: candidates.len(),
                best_ratio: best.as_ref().map_or(1.0, |(r, _)| *r),
                adopted: best.is_some(),
            });
        }
        if let Some((_, variant)) = best {
            groups = variant;
        }
    }

    // Stable output order: by size descending, then first member id.
    let mut out: Vec<TpGroup> = groups
        .into_iter()
        .map(|g| TpGroup::new(g.into_iter().map(|m| m.id).collect()))
        .collect();
    out.sort_by(|a, b| b.size().cmp(&a.size()).then(a.members[0].cmp(&b.members[0])));
    Ok(out)
}

/// Pick the best consecutive-block arrangement for the given sizes by
/// relaxed throughput; ties keep the first canonical candidate.
fn best_split(
    sorted: &[RatedGpu],
    sizes: &[u32],
    coeffs: &ProfiledCoefficients,
) -> Result<Vec<Vec<RatedGpu>>, PlanError> {
    let rated: Vec<(GpuId, f64)> = sorted.iter().map(|m| (m.id, m.rate)).collect();
    let candidates = enumerate_splits(&rated, sizes)?;
    let mut best: Option<(f64, Vec<Vec<RatedGpu>>)> = None;
    for candidate in candidates {
        let variant: Vec<Vec<RatedGpu>> = candidate
            .into_iter()
            .map(|block| {
                block
                    .into_iter()
                    .map(|id| sorted.iter().copied().find(|m| m.id == id).unwrap())
                    .collect()
            })
            .collect();
        let rates = group_rates(&variant, coeffs)?;
        let throughput: f64 =
            rates.iter().map(|y| if y.is_infinite() { 0.0 } else { 1.0 / y }).sum();
        let better = match &best {
            None => true,
            Some((t, _)) => throughput > *t + IMPROVEMENT_EPS,
        };
        if better {
            best = Some((throughput, variant));
        }
    }
    Ok(best.map(|(_, v)| v).expect("at least one candidate"))
}

/// Structural check of the consecutive-block property: among the members of
/// multi-GPU groups on one node, no group may straddle an outside GPU whose
/// rate lies strictly between the group's extremes. Singleton groups are the
/// holes isolation punches and are exempt.
pub fn is_consecutive_grouping(groups: &[Vec<(GpuId, f64)>]) -> bool {
    let multi: Vec<&Vec<(GpuId, f64)>> = groups.iter().filter(|g| g.len() > 1).collect();
    for g in &multi {
        let min = g.iter().map(|(_, r)| *r).fold(f64::INFINITY, f64::min);
        let max = g.iter().map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max);
        for other in &multi {
            if std::ptr::eq(*g, *other) {
                continue;
            }
            if other.iter().any(|(_, r)| *r > min && *r < max) {
                return false;
            }
        }
    }
    true
}

/// Group every node and concatenate. Failed GPUs and GPUs already on standby
/// rejoin the pool only if their rate is finite; failed ones are returned
/// separately so the planner can park them.
pub fn group_cluster(
    cluster: &ClusterState,
    tp_limit: u32,
    coeffs: &ProfiledCoefficients,
    mut trace: Option<&mut Vec<SplitTraceEntry>>,
) -> Result<(GroupingResult, BTreeSet<GpuId>), PlanError> {
    let mut groups = Vec::new();
    let mut failed = BTreeSet::new();
    for (node_idx, _) in cluster.nodes.iter().enumerate() {
        let mut usable: Vec<(GpuId, f64)> = Vec::new();
        for gpu in cluster.node_gpus(node_idx as u32) {
            let rate = cluster.rate(gpu);
            if rate.is_failed() {
                failed.insert(gpu);
            } else {
                usable.push((gpu, rate.value()));
            }
        }
        let node_groups = group_node(&usable, tp_limit, coeffs, trace.as_deref_mut())?;
        groups.extend(node_groups);
    }
    Ok((GroupingResult { groups, tp_limit }, failed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::HeadTailCoefficients;
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

    fn ids(node: u32, rates: &[f64]) -> Vec<(GpuId, f64)> {
        rates.iter().enumerate().map(|(i, r)| (GpuId::new(node, i as u32), *r)).collect()
    }

    #[test]
    fn even_partition_sorts_then_chunks() {
        let node = ids(0, &[1.2, 1.0, 3.0, 1.0]);
        let groups = even_partition(&node, 2).unwrap();
        assert_eq!(groups.len(), 2);
        // {3.0, 1.2} then {1.0, 1.0}
        assert_eq!(groups[0], vec![GpuId::new(0, 2), GpuId::new(0, 0)]);
        assert_eq!(groups[1], vec![GpuId::new(0, 1), GpuId::new(0, 3)]);
    }

    #[test]
    fn even_partition_equal_rates_keeps_index_order() {
        let node = ids(0, &[1.0; 8]);
        let groups = even_partition(&node, 8).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 8);
        assert_eq!(groups[0][0], GpuId::new(0, 0));
        let pairs = even_partition(&node, 2).unwrap();
        assert_eq!(pairs[0], vec![GpuId::new(0, 0), GpuId::new(0, 1)]);
    }

    #[test]
    fn even_partition_rejects_non_divisor() {
        let node = ids(0, &[1.0, 1.0, 1.0]);
        assert!(even_partition(&node, 2).is_err());
    }

    #[test]
    fn relaxed_ratio_examples() {
        assert_eq!(relaxed_ratio(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        // y'={1,1}, y''={1,2} -> (1.5)/(2) = 0.75
        assert_eq!(relaxed_ratio(&[1.0, 1.0], &[1.0, 2.0]), 0.75);
        // Infinite group contributes zero throughput.
        assert_eq!(relaxed_ratio(&[1.0], &[f64::INFINITY]), 0.0);
    }

    #[test]
    fn dyadic_decomposition() {
        assert_eq!(dyadic_sizes(7, 8), vec![4, 2, 1]);
        assert_eq!(dyadic_sizes(3, 8), vec![2, 1]);
        assert_eq!(dyadic_sizes(1, 8), vec![1]);
        assert_eq!(dyadic_sizes(6, 4), vec![4, 2]);
        assert_eq!(dyadic_sizes(8, 4), vec![4, 4]);
    }

    #[test]
    fn enumerate_splits_singleton() {
        let gpus = ids(0, &[2.0]);
        let c = enumerate_splits(&gpus, &[1]).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn enumerate_splits_three_into_1_2() {
        let gpus = ids(0, &[3.0, 2.0, 1.0]);
        let c = enumerate_splits(&gpus, &[1, 2]).unwrap();
        // ({X1},{X2,X3}) and ({X3},{X1,X2})
        assert_eq!(c.len(), 2);
        assert_eq!(c[0][0], vec![GpuId::new(0, 0)]);
        assert_eq!(c[0][1], vec![GpuId::new(0, 1), GpuId::new(0, 2)]);
        assert_eq!(c[1][0], vec![GpuId::new(0, 2)]);
        assert_eq!(c[1][1], vec![GpuId::new(0, 0), GpuId::new(0, 1)]);
    }

    #[test]
    fn enumerate_splits_seven_into_1_2_4_gives_six_candidates() {
        // X1..X7 in descending-rate order.
        let gpus = ids(0, &[7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        let x = |i: u32| GpuId::new(0, i - 1);
        let c = enumerate_splits(&gpus, &[1, 2, 4]).unwrap();
        let expect = vec![
            (vec![x(1)], vec![x(2), x(3)], vec![x(4), x(5), x(6), x(7)]),
            (vec![x(1)], vec![x(6), x(7)], vec![x(2), x(3), x(4), x(5)]),
            (vec![x(3)], vec![x(1), x(2)], vec![x(4), x(5), x(6), x(7)]),
            (vec![x(5)], vec![x(6), x(7)], vec![x(1), x(2), x(3), x(4)]),
            (vec![x(7)], vec![x(1), x(2)], vec![x(3), x(4), x(5), x(6)]),
            (vec![x(7)], vec![x(5), x(6)], vec![x(1), x(2), x(3), x(4)]),
        ];
        assert_eq!(c.len(), 6);
        for (i, (a, b, d)) in expect.iter().enumerate() {
            assert_eq!(&c[i][0], a, "candidate {i} singleton");
            assert_eq!(&c[i][1], b, "candidate {i} pair");
            assert_eq!(&c[i][2], d, "candidate {i} quad");
        }
    }

    #[test]
    fn group_node_keeps_even_partition_without_stragglers() {
        let c = coeffs(&[(1, 1.0), (2, 0.6), (4, 0.35), (8, 0.2)]);
        let node = ids(0, &[1.0; 8]);
        let groups = group_node(&node, 8, &c, None).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].size(), 8);
    }

    #[test]
    fn group_node_isolates_heavy_straggler() {
        // zeta with sublinear scaling so isolation pays off for a heavy
        // straggler but not for normals.
        let c = coeffs(&[(1, 1.0), (2, 0.52), (4, 0.27), (8, 0.14)]);
        let mut rates = vec![1.0; 8];
        rates[0] = 12.0;
        let node = ids(0, &rates);
        let groups = group_node(&node, 8, &c, None).unwrap();
        let sizes: Vec<u32> = groups.iter().map(|g| g.size()).collect();
        assert_eq!(sizes, vec![4, 2, 1, 1]);
        // The straggler sits alone.
        let straggler_group =
            groups.iter().find(|g| g.members.contains(&GpuId::new(0, 0))).unwrap();
        assert_eq!(straggler_group.size(), 1);
    }

    #[test]
    fn group_node_figure12_style_multi_straggler() {
        let c = coeffs(&[(1, 1.0), (2, 0.52), (4, 0.27), (8, 0.14)]);
        let mut rates = vec![1.0; 8];
        rates[0] = 12.53;
        rates[1] = 5.42;
        rates[2] = 2.57;
        let node = ids(0, &rates);
        let mut trace = Vec::new();
        let groups = group_node(&node, 8, &c, Some(&mut trace)).unwrap();
        // All three stragglers examined in descending order.
        assert_eq!(trace[0].straggler, GpuId::new(0, 0));
        assert!(trace[0].adopted);
        // Every group is node-local and sizes are dyadic.
        for g in &groups {
            assert!(g.size().is_power_of_two());
        }
        let covered: usize = groups.iter().map(|g| g.members.len()).sum();
        assert_eq!(covered, 8);
    }

    #[test]
    fn group_cluster_parks_failed_gpus() {
        let c = coeffs(&[(1, 1.0), (2, 0.52), (4, 0.27), (8, 0.14)]);
        let mut cluster = ClusterState::normal(2, 8);
        cluster.set_rate(GpuId::new(0, 3), crate::domain::Rate::FAILED);
        let (result, failed) = group_cluster(&cluster, 8, &c, None).unwrap();
        assert!(failed.contains(&GpuId::new(0, 3)));
        let covered: usize = result.groups.iter().map(|g| g.members.len()).sum();
        assert_eq!(covered, 15);
        assert!(result.groups.iter().all(|g| !g.members.contains(&GpuId::new(0, 3))));
        // Node 1 stays a single 8-group; node 0's seven survivors form
        // dyadic blocks.
        let node1: Vec<_> = result.groups.iter().filter(|g| g.node() == 1).collect();
        assert_eq!(node1.len(), 1);
        assert_eq!(node1[0].size(), 8);
    }

    #[test]
    fn consecutive_block_property_holds() {
        let c = coeffs(&[(1, 1.0), (2, 0.52), (4, 0.27), (8, 0.14)]);
        let rates = [4.0, 1.0, 2.0, 1.0, 1.5, 1.0, 1.0, 3.0];
        let node = ids(0, &rates);
        let groups = group_node(&node, 8, &c, None).unwrap();
        let rated: Vec<Vec<(GpuId, f64)>> = groups
            .iter()
            .map(|g| g.members.iter().map(|id| (*id, rates[id.index as usize])).collect())
            .collect();
        assert!(is_consecutive_grouping(&rated));
    }
}
