//! Generation of straggler traces from named situation sequences.
//!
//! The six canonical situations mirror the usual evaluation set: single
//! stragglers of increasing severity, multi-node mixes, and a fully
//! straggling node, with transitions where stragglers appear and disappear.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClusterState, GpuId, Rate};
use crate::error::PlanError;
use crate::simulator::{SegmentLabel, StragglerTrace, TraceEvent};

/// Straggler severity levels and their slowdown rates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LevelRates {
    pub level1: f64,
    pub level2: f64,
    pub level3: f64,
}

impl Default for LevelRates {
    fn default() -> Self {
        // Profiled slowdowns of 1-3 extra compute processes.
        Self { level1: 2.62, level2: 3.8, level3: 5.42 }
    }
}

/// A named straggler situation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Situation {
    /// No stragglers.
    Normal,
    /// One level-1 straggler.
    S1,
    /// One level-3 straggler.
    S2,
    /// One level-1 and one level-3 straggler on different nodes.
    S3,
    /// Level-1, level-2 and level-3 stragglers on three different nodes.
    S4,
    /// Eight level-1 stragglers on one node plus a level-2 on another.
    S5,
    /// Eight level-1 stragglers on one node.
    S6,
}

impl std::str::FromStr for Situation {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "n" => Ok(Situation::Normal),
            "s1" => Ok(Situation::S1),
            "s2" => Ok(Situation::S2),
            "s3" => Ok(Situation::S3),
            "s4" => Ok(Situation::S4),
            "s5" => Ok(Situation::S5),
            "s6" => Ok(Situation::S6),
            other => Err(PlanError::config(format!("unknown situation tag `{other}`"))),
        }
    }
}

impl Situation {
    pub fn label(&self) -> &'static str {
        match self {
            Situation::Normal => "normal",
            Situation::S1 => "S1",
            Situation::S2 => "S2",
            Situation::S3 => "S3",
            Situation::S4 => "S4",
            Situation::S5 => "S5",
            Situation::S6 => "S6",
        }
    }

    /// The straggler rate of each affected GPU under this situation.
    pub fn rates(&self, cluster: &ClusterState, levels: &LevelRates) -> Result<BTreeMap<GpuId, f64>, PlanError> {
        let nodes = cluster.nodes.len() as u32;
        let need = match self {
            Situation::Normal | Situation::S1 | Situation::S2 => 1,
            Situation::S3 | Situation::S5 => 2,
            Situation::S4 => 3,
            Situation::S6 => 1,
        };
        if nodes < need {
            return Err(PlanError::config(format!(
                "situation {} needs {need} nodes, cluster has {nodes}",
                self.label()
            )));
        }
        let mut rates = BTreeMap::new();
        match self {
            Situation::Normal => {}
            Situation::S1 => {
                rates.insert(GpuId::new(0, 0), levels.level1);
            }
            Situation::S2 => {
                rates.insert(GpuId::new(0, 0), levels.level3);
            }
            Situation::S3 => {
                rates.insert(GpuId::new(0, 0), levels.level1);
                rates.insert(GpuId::new(1, 0), levels.level3);
            }
            Situation::S4 => {
                rates.insert(GpuId::new(0, 0), levels.level1);
                rates.insert(GpuId::new(1, 0), levels.level2);
                rates.insert(GpuId::new(2, 0), levels.level3);
            }
            Situation::S5 => {
                for i in 0..cluster.nodes[0].gpus.min(8) {
                    rates.insert(GpuId::new(0, i), levels.level1);
                }
                rates.insert(GpuId::new(1, 0), levels.level2);
            }
            Situation::S6 => {
                for i in 0..cluster.nodes[0].gpus.min(8) {
                    rates.insert(GpuId::new(0, i), levels.level1);
                }
            }
        }
        Ok(rates)
    }
}

/// Generate a trace that walks through `situations`, holding each for
/// `dwell` iterations. Transitions reset the previous situation's stragglers
/// to 1.0 before applying the next one. `jitter` shifts each transition
/// later by a seeded uniform offset in 0..=jitter iterations.
pub fn gen_trace(
    cluster: &ClusterState,
    situations: &[Situation],
    dwell: u64,
    levels: &LevelRates,
    noise: f64,
    jitter: u64,
    seed: u64,
) -> Result<StragglerTrace, PlanError> {
    if dwell == 0 {
        return Err(PlanError::config("dwell must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut labels = Vec::new();
    let mut current: BTreeMap<GpuId, f64> = BTreeMap::new();
    for (idx, situation) in situations.iter().enumerate() {
        let base = idx as u64 * dwell;
        let offset = if jitter > 0 { rng.random_range(0..=jitter) } else { 0 };
        let at = if idx == 0 { 0 } else { base + offset };
        let next = situation.rates(cluster, levels)?;
        for gpu in current.keys() {
            if !next.contains_key(gpu) {
                events.push(TraceEvent { iteration: at, gpu: *gpu, rate: Rate::NORMAL });
            }
        }
        for (gpu, rate) in &next {
            if current.get(gpu) != Some(rate) {
                events.push(TraceEvent {
                    iteration: at,
                    gpu: *gpu,
                    rate: Rate::new(*rate)?,
                });
            }
        }
        labels.push(SegmentLabel { start_iteration: at, label: situation.label().to_string() });
        current = next;
    }
    events.sort_by_key(|e| (e.iteration, e.gpu));
    Ok(StragglerTrace { events, noise, segments: labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s1_is_a_single_event() {
        let cluster = ClusterState::normal(2, 8);
        let trace = gen_trace(
            &cluster,
            &[Situation::Normal, Situation::S1],
            10,
            &LevelRates::default(),
            0.0,
            0,
            0,
        )
        .unwrap();
        assert_eq!(trace.events.len(), 1);
        assert_eq!(trace.events[0].iteration, 10);
        assert_eq!(trace.events[0].rate.value(), 2.62);
        assert_eq!(trace.segments.len(), 2);
    }

    #[test]
    fn s6_hits_eight_gpus_on_one_node() {
        let cluster = ClusterState::normal(2, 8);
        let trace = gen_trace(
            &cluster,
            &[Situation::S6],
            5,
            &LevelRates::default(),
            0.0,
            0,
            0,
        )
        .unwrap();
        assert_eq!(trace.events.len(), 8);
        assert!(trace.events.iter().all(|e| e.gpu.node == 0));
    }

    #[test]
    fn normal_only_is_empty() {
        let cluster = ClusterState::normal(1, 8);
        let trace =
            gen_trace(&cluster, &[Situation::Normal], 5, &LevelRates::default(), 0.0, 0, 0)
                .unwrap();
        assert!(trace.events.is_empty());
    }

    #[test]
    fn transitions_reset_previous_stragglers() {
        let cluster = ClusterState::normal(2, 8);
        let trace = gen_trace(
            &cluster,
            &[Situation::S2, Situation::Normal],
            10,
            &LevelRates::default(),
            0.0,
            0,
            0,
        )
        .unwrap();
        // S2 sets one straggler at iteration 0, recovery resets it at 10.
        assert_eq!(trace.events.len(), 2);
        assert_eq!(trace.events[1].iteration, 10);
        assert_eq!(trace.events[1].rate.value(), 1.0);
        trace.validate().unwrap();
    }

    #[test]
    fn unknown_tag_is_rejected() {
        assert!("s9".parse::<Situation>().is_err());
        assert_eq!("S4".parse::<Situation>().unwrap(), Situation::S4);
    }
}
