//! Per-situation aggregation of a simulation run: mean steady-state step
//! time per segment, plus the actual/estimated/optimal slowdown ratios.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::costmodel::theoretic_optimum_ratio;
use crate::domain::{ClusterState, GpuId, Rate};
use crate::error::PlanError;
use crate::simulator::{SimTimeline, StragglerTrace};

/// One row of the situation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SituationRow {
    pub label: String,
    pub first_iteration: u64,
    pub last_iteration: u64,
    /// Mean exact step seconds over the steady tail of the segment.
    pub mean_seconds: f64,
    /// Mean surrogate estimate over the same iterations.
    pub mean_estimate_seconds: f64,
    /// Slowdown vs the baseline segment.
    pub r_actual: f64,
    /// Estimated slowdown vs the baseline segment's estimate.
    pub r_est: f64,
    /// Throughput-conservation bound for the segment's straggler rates.
    pub r_opt: f64,
    /// |1 - mean_estimate / mean_seconds|.
    pub estimation_error: f64,
}

/// The full report: one row per segment. The baseline is the first segment
/// whose rates are all 1.0 (usually the leading "normal" segment).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SituationReport {
    pub rows: Vec<SituationRow>,
    pub baseline_label: String,
}

/// Iterations in a segment that reflect the settled plan: everything after
/// the last plan switch inside the segment, excluding stalled iterations.
fn steady_records<'a>(
    timeline: &'a SimTimeline,
    first: u64,
    last: u64,
) -> Vec<&'a crate::simulator::IterationRecord> {
    let in_segment: Vec<_> = timeline
        .records
        .iter()
        .filter(|r| r.iteration >= first && r.iteration <= last)
        .collect();
    let last_switch = in_segment
        .iter()
        .filter(|r| r.event.contains("plan_applied"))
        .map(|r| r.iteration)
        .max();
    in_segment
        .into_iter()
        .filter(|r| {
            last_switch.is_none_or(|s| r.iteration > s)
                && !r.event.contains("failure_stall")
                && r.migration_seconds == 0.0
        })
        .collect()
}

/// Replay the trace to find the ground-truth rates at an iteration.
fn rates_at(
    cluster: &ClusterState,
    trace: &StragglerTrace,
    iteration: u64,
) -> BTreeMap<GpuId, Rate> {
    let mut rates: BTreeMap<GpuId, Rate> =
        cluster.gpus().map(|g| (g, cluster.rate(g))).collect();
    for e in &trace.events {
        if e.iteration > iteration {
            break;
        }
        rates.insert(e.gpu, e.rate);
    }
    rates
}

/// Build the per-situation report. Segments come from the trace's embedded
/// labels when present, otherwise from the distinct event iterations.
pub fn situation_report(
    timeline: &SimTimeline,
    trace: &StragglerTrace,
    cluster: &ClusterState,
) -> Result<SituationReport, PlanError> {
    let total_iterations = timeline
        .records
        .last()
        .map(|r| r.iteration + 1)
        .ok_or_else(|| PlanError::config("empty timeline"))?;

    let labels = &trace.segments;
    let mut boundaries: Vec<(u64, String)> = if labels.is_empty() {
        let mut starts: Vec<u64> = trace.events.iter().map(|e| e.iteration).collect();
        starts.push(0);
        starts.sort_unstable();
        starts.dedup();
        starts.into_iter().enumerate().map(|(i, s)| (s, format!("seg{i}"))).collect()
    } else {
        labels.iter().map(|l| (l.start_iteration, l.label.clone())).collect()
    };
    boundaries.sort_by_key(|(s, _)| *s);

    let mut rows = Vec::new();
    let mut baseline: Option<(String, f64, f64)> = None;
    for (idx, (start, label)) in boundaries.iter().enumerate() {
        let end = boundaries
            .get(idx + 1)
            .map(|(s, _)| s.saturating_sub(1))
            .unwrap_or(total_iterations - 1);
        if *start > end {
            continue;
        }
        let steady = steady_records(timeline, *start, end);
        if steady.is_empty() {
            continue;
        }
        let mean_seconds =
            steady.iter().map(|r| r.seconds).sum::<f64>() / steady.len() as f64;
        let mean_estimate =
            steady.iter().map(|r| r.estimate_seconds).sum::<f64>() / steady.len() as f64;

        let rates = rates_at(cluster, trace, end);
        let stragglers: Vec<f64> = rates
            .values()
            .filter(|r| r.is_failed() || r.value() > 1.0)
            .map(|r| r.value())
            .collect();
        let r_opt = theoretic_optimum_ratio(rates.len(), &stragglers);

        if baseline.is_none() && stragglers.is_empty() {
            baseline = Some((label.clone(), mean_seconds, mean_estimate));
        }
        rows.push(SituationRow {
            label: label.clone(),
            first_iteration: *start,
            last_iteration: end,
            mean_seconds,
            mean_estimate_seconds: mean_estimate,
            r_actual: f64::NAN, // filled below once the baseline is known
            r_est: f64::NAN,
            r_opt,
            estimation_error: (1.0 - mean_estimate / mean_seconds).abs(),
        });
    }
    let (baseline_label, base_seconds, base_estimate) = baseline
        .ok_or_else(|| PlanError::config("no straggler-free baseline segment in the run"))?;
    for row in &mut rows {
        row.r_actual = row.mean_seconds / base_seconds;
        row.r_est = row.mean_estimate_seconds / base_estimate;
    }
    Ok(SituationReport { rows, baseline_label })
}

impl SituationReport {
    /// Plain-text table in the familiar two-table layout: mean step seconds
    /// per situation, then the ratio triple.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>12} {:>12} {:>8} {:>8} {:>8} {:>10}\n",
            "situation", "seconds", "estimate", "R_act", "R_est", "R_opt", "est_err"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>12.4} {:>12.4} {:>8.4} {:>8.4} {:>8.4} {:>9.2}%\n",
                r.label,
                r.mean_seconds,
                r.mean_estimate_seconds,
                r.r_actual,
                r.r_est,
                r.r_opt,
                r.estimation_error * 100.0
            ));
        }
        out.push_str(&format!("baseline: {}\n", self.baseline_label));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "situation,first_iteration,last_iteration,mean_seconds,mean_estimate_seconds,r_actual,r_est,r_opt,estimation_error\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.9},{:.9},{:.6},{:.6},{:.6},{:.6}\n",
                r.label,
                r.first_iteration,
                r.last_iteration,
                r.mean_seconds,
                r.mean_estimate_seconds,
                r.r_actual,
                r.r_est,
                r.r_opt,
                r.estimation_error
            ));
        }
        out
    }
}
