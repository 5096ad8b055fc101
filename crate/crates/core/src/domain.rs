//! Shared domain types: cluster topology, straggling rates, task description,
//! and parallelization plans. No algorithms live here.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::PlanError;

/// Identifies one GPU by its node and its local index within the node.
///
/// Serialized as the string `"node:index"` so it can key JSON maps.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GpuId {
    pub node: u32,
    pub index: u32,
}

impl GpuId {
    pub fn new(node: u32, index: u32) -> Self {
        Self { node, index }
    }
}

impl fmt::Display for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.index)
    }
}

impl fmt::Debug for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.index)
    }
}

impl FromStr for GpuId {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (node, index) = s
            .split_once(':')
            .ok_or_else(|| PlanError::config(format!("bad GPU id `{s}`, expected `node:index`")))?;
        let node = node
            .parse()
            .map_err(|_| PlanError::config(format!("bad node in GPU id `{s}`")))?;
        let index = index
            .parse()
            .map_err(|_| PlanError::config(format!("bad index in GPU id `{s}`")))?;
        Ok(Self { node, index })
    }
}

impl Serialize for GpuId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GpuId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Per-GPU straggling rate: 1.0 is a normal GPU, larger is slower, and a
/// failed (unresponsive) GPU carries the infinity sentinel so that max and
/// ordering stay total without ever touching NaN.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
pub struct Rate(f64);

impl Rate {
    pub const NORMAL: Rate = Rate(1.0);
    pub const FAILED: Rate = Rate(f64::INFINITY);

    pub fn new(x: f64) -> Result<Self, PlanError> {
        if x.is_nan() {
            return Err(PlanError::config("straggling rate may not be NaN"));
        }
        if x < 1.0 {
            return Err(PlanError::config(format!("straggling rate {x} < 1.0")));
        }
        Ok(Rate(x))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_failed(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Debug for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_failed() {
            write!(f, "failed")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_failed() {
            serializer.serialize_str("failed")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(x) => Rate::new(x).map_err(de::Error::custom),
            Repr::Tag(t) if t == "failed" => Ok(Rate::FAILED),
            Repr::Tag(t) => Err(de::Error::custom(format!("bad rate `{t}`"))),
        }
    }
}

/// One node record: a fixed number of GPUs, 8 unless stated otherwise.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NodeSpec {
    pub gpus: u32,
}

fn default_memory_mib() -> f64 {
    81920.0
}

/// The planner's input world: topology, live straggling rates, the standby
/// set, and per-GPU memory capacities.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClusterState {
    pub nodes: Vec<NodeSpec>,
    /// Straggling rate per GPU. GPUs missing from the map default to 1.0.
    #[serde(default)]
    pub rates: BTreeMap<GpuId, Rate>,
    /// GPUs currently excluded from training but still probed periodically.
    #[serde(default)]
    pub standby: BTreeSet<GpuId>,
    /// Per-GPU capacity overrides in MiB; GPUs not listed fall back to
    /// `default_memory_mib`.
    #[serde(default)]
    pub memory_capacity: BTreeMap<GpuId, f64>,
    #[serde(default = "default_memory_mib")]
    pub default_memory_mib: f64,
}

impl ClusterState {
    /// A healthy cluster of `nodes` x `gpus_per_node` GPUs, all at rate 1.0.
    pub fn normal(nodes: u32, gpus_per_node: u32) -> Self {
        Self {
            nodes: (0..nodes).map(|_| NodeSpec { gpus: gpus_per_node }).collect(),
            rates: BTreeMap::new(),
            standby: BTreeSet::new(),
            memory_capacity: BTreeMap::new(),
            default_memory_mib: default_memory_mib(),
        }
    }

    pub fn gpu_count(&self) -> usize {
        self.nodes.iter().map(|n| n.gpus as usize).sum()
    }

    /// All GPU ids in (node, index) order.
    pub fn gpus(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(n, spec)| (0..spec.gpus).map(move |i| GpuId::new(n as u32, i)))
    }

    /// GPU ids of one node.
    pub fn node_gpus(&self, node: u32) -> impl Iterator<Item = GpuId> + '_ {
        let gpus = self.nodes.get(node as usize).map_or(0, |n| n.gpus);
        (0..gpus).map(move |i| GpuId::new(node, i))
    }

    pub fn rate(&self, gpu: GpuId) -> Rate {
        self.rates.get(&gpu).copied().unwrap_or(Rate::NORMAL)
    }

    pub fn set_rate(&mut self, gpu: GpuId, rate: Rate) {
        self.rates.insert(gpu, rate);
    }

    pub fn capacity_mib(&self, gpu: GpuId) -> f64 {
        self.memory_capacity.get(&gpu).copied().unwrap_or(self.default_memory_mib)
    }

    pub fn contains(&self, gpu: GpuId) -> bool {
        (gpu.node as usize) < self.nodes.len() && gpu.index < self.nodes[gpu.node as usize].gpus
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        for (gpu, rate) in &self.rates {
            if !self.contains(*gpu) {
                return Err(PlanError::config(format!("rate for unknown GPU {gpu}")));
            }
            if !rate.is_failed() && rate.value() < 1.0 {
                return Err(PlanError::config(format!("rate {rate:?} for {gpu} below 1.0")));
            }
        }
        for gpu in &self.standby {
            if !self.contains(*gpu) {
                return Err(PlanError::config(format!("standby GPU {gpu} not in cluster")));
            }
        }
        for gpu in self.memory_capacity.keys() {
            if !self.contains(*gpu) {
                return Err(PlanError::config(format!("capacity for unknown GPU {gpu}")));
            }
        }
        Ok(())
    }
}

/// Memory coefficients of the non-uniform first and last layers (embedding
/// table and LM head), in MiB at TP degree 1.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct HeadTailCoefficients {
    #[serde(default)]
    pub a_f_head: f64,
    #[serde(default)]
    pub a_fb_head: f64,
    #[serde(default)]
    pub s_head: f64,
    #[serde(default)]
    pub a_fb_tail: f64,
    #[serde(default)]
    pub s_tail: f64,
}

fn default_gap_mib() -> f64 {
    4096.0
}

/// Profiled cost coefficients.
///
/// `tau` maps micro-batch size to the forward+backward seconds of one layer
/// on a group whose straggling rate is 1. `zeta` maps group size to the
/// profiled unit-workload seconds; the efficiency coefficient rho is derived
/// from it and never stored. Memory coefficients are per layer in MiB at
/// TP degree 1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProfiledCoefficients {
    pub tau: BTreeMap<u32, f64>,
    pub zeta: BTreeMap<u32, f64>,
    pub a_f: f64,
    pub a_fb: f64,
    pub s: f64,
    #[serde(default)]
    pub head_tail: HeadTailCoefficients,
    #[serde(default = "default_gap_mib")]
    pub gap_mib: f64,
}

impl ProfiledCoefficients {
    pub fn tau(&self, b: u32) -> Result<f64, PlanError> {
        self.tau
            .get(&b)
            .copied()
            .ok_or_else(|| PlanError::config(format!("no tau entry for micro-batch size {b}")))
    }

    pub fn zeta(&self, group_size: u32) -> Result<f64, PlanError> {
        self.zeta
            .get(&group_size)
            .copied()
            .ok_or_else(|| PlanError::config(format!("no zeta entry for group size {group_size}")))
    }

    /// Efficiency coefficient rho_n = zeta_n / max_n' zeta_n', normalized
    /// over the task's candidate group sizes.
    pub fn rho(&self, group_size: u32) -> Result<f64, PlanError> {
        let zeta_max = self
            .zeta
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !zeta_max.is_finite() || zeta_max <= 0.0 {
            return Err(PlanError::config("zeta table empty or non-positive"));
        }
        Ok(self.zeta(group_size)? / zeta_max)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.tau.is_empty() {
            return Err(PlanError::config("tau table is empty"));
        }
        let mut prev = 0.0;
        for (b, t) in &self.tau {
            if *t <= 0.0 {
                return Err(PlanError::config(format!("tau({b}) must be positive")));
            }
            if *t < prev {
                return Err(PlanError::config("tau must be nondecreasing in b"));
            }
            prev = *t;
        }
        let mut prev = f64::INFINITY;
        for (n, z) in &self.zeta {
            if *z <= 0.0 {
                return Err(PlanError::config(format!("zeta({n}) must be positive")));
            }
            if *z > prev {
                return Err(PlanError::config("zeta must be nonincreasing in group size"));
            }
            prev = *z;
        }
        let mems = [
            self.a_f,
            self.a_fb,
            self.s,
            self.head_tail.a_f_head,
            self.head_tail.a_fb_head,
            self.head_tail.s_head,
            self.head_tail.a_fb_tail,
            self.head_tail.s_tail,
            self.gap_mib,
        ];
        if mems.iter().any(|m| *m < 0.0) {
            return Err(PlanError::config("memory coefficients must be nonnegative"));
        }
        Ok(())
    }
}

fn default_dp() -> u32 {
    1
}

/// Description of the training task to plan for.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    /// Number of uniform model layers.
    #[serde(rename = "L")]
    pub layers: u32,
    /// Global batch size in samples per step.
    #[serde(rename = "B")]
    pub global_batch: u32,
    /// Candidate micro-batch sizes, ascending.
    pub micro_batch_sizes: Vec<u32>,
    /// Number of pipelines; held fixed across re-plans.
    #[serde(default = "default_dp")]
    pub dp_degree: u32,
    /// Candidate TP degrees, e.g. [1, 2, 4, 8].
    pub tp_degrees: Vec<u32>,
    pub coefficients: ProfiledCoefficients,
}

impl TaskSpec {
    pub fn validate(&self, cluster: &ClusterState) -> Result<(), PlanError> {
        if self.layers == 0 || self.global_batch == 0 || self.dp_degree == 0 {
            return Err(PlanError::config("L, B and dp_degree must all be >= 1"));
        }
        if self.micro_batch_sizes.is_empty() {
            return Err(PlanError::config("no candidate micro-batch sizes"));
        }
        if self.micro_batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PlanError::config("micro-batch sizes must be strictly ascending"));
        }
        if self.tp_degrees.is_empty() {
            return Err(PlanError::config("no candidate TP degrees"));
        }
        for tp in &self.tp_degrees {
            if *tp == 0 || !tp.is_power_of_two() {
                return Err(PlanError::config(format!("TP degree {tp} is not a power of two")));
            }
            for node in &cluster.nodes {
                if node.gpus % tp != 0 && *tp % node.gpus != 0 {
                    return Err(PlanError::config(format!(
                        "TP degree {tp} does not partition a node of {} GPUs",
                        node.gpus
                    )));
                }
            }
            if self.coefficients.zeta(*tp).is_err() {
                return Err(PlanError::config(format!("no zeta entry for TP degree {tp}")));
            }
        }
        self.coefficients.validate()
    }
}

/// A tensor-parallel group: a nonempty set of GPUs on one node that executes
/// one pipeline stage. The group straggling rate is derived on demand.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
pub struct TpGroup {
    pub members: Vec<GpuId>,
}

impl TpGroup {
    pub fn new(members: Vec<GpuId>) -> Self {
        debug_assert!(!members.is_empty());
        debug_assert!(members.windows(2).all(|w| w[0].node == w[1].node));
        Self { members }
    }

    pub fn size(&self) -> u32 {
        self.members.len() as u32
    }

    pub fn node(&self) -> u32 {
        self.members[0].node
    }
}

/// One pipeline stage in a finished plan.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StagePlan {
    pub gpus: Vec<GpuId>,
    pub layers: u32,
}

/// One of the DP pipelines of a plan.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PipelinePlan {
    pub stages: Vec<StagePlan>,
    pub micro_batches: u32,
}

impl PipelinePlan {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }
}

/// A complete parallelization plan: the output artifact of the planner.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParallelizationPlan {
    pub micro_batch_size: u32,
    pub pipelines: Vec<PipelinePlan>,
    /// GPUs assigned zero work by this plan; they move to standby.
    #[serde(default)]
    pub removed: BTreeSet<GpuId>,
}

impl ParallelizationPlan {
    /// All GPUs that actively train under this plan.
    pub fn active_gpus(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.pipelines
            .iter()
            .flat_map(|p| p.stages.iter())
            .flat_map(|s| s.gpus.iter().copied())
    }

    pub fn validate(&self, task: &TaskSpec) -> Result<(), PlanError> {
        if self.pipelines.is_empty() {
            return Err(PlanError::infeasible("plan has no pipelines"));
        }
        let mut seen = BTreeSet::new();
        for gpu in self.active_gpus() {
            if !seen.insert(gpu) {
                return Err(PlanError::config(format!("GPU {gpu} appears in two stages")));
            }
        }
        for gpu in &self.removed {
            if seen.contains(gpu) {
                return Err(PlanError::config(format!("removed GPU {gpu} is still active")));
            }
        }
        for (i, pipe) in self.pipelines.iter().enumerate() {
            let total: u32 = pipe.stages.iter().map(|s| s.layers).sum();
            if total != task.layers {
                return Err(PlanError::config(format!(
                    "pipeline {i} holds {total} layers, expected {}",
                    task.layers
                )));
            }
        }
        let data: u64 = self
            .pipelines
            .iter()
            .map(|p| p.micro_batches as u64 * self.micro_batch_size as u64)
            .sum();
        if data != task.global_batch as u64 {
            return Err(PlanError::config(format!(
                "plan covers {data} samples per step, expected {}",
                task.global_batch
            )));
        }
        Ok(())
    }
}
