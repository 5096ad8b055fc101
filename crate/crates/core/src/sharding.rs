//! Optimizer-state sharding and migration between plans.
//!
//! Each layer's model states are cut into `DP x TP_max` slices; every GPU of
//! the stage covering that layer in pipeline i owns `TP_max / TP_i` of them.
//! When the plan changes, the migration compiler locates the source and
//! destination of every slice at the common (finest) granularity, fuses
//! transfers with identical endpoints, and packs consecutive layers into
//! batches.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{GpuId, ParallelizationPlan};
use crate::error::PlanError;

/// Sharding of one layer: the slice owners in slice-index order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerSharding {
    pub tp_max: u32,
    /// One owner per slice; length = pipeline count x tp_max.
    pub owners: Vec<GpuId>,
}

/// Per-layer slice ownership of a whole plan.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShardLayout {
    pub layers: Vec<LayerSharding>,
}

impl ShardLayout {
    /// Number of slices a GPU owns in one layer; GPUs holding two or more
    /// invoke that many reduce-scatter/all-gather calls.
    pub fn slices_owned(&self, layer: usize, gpu: GpuId) -> usize {
        self.layers[layer].owners.iter().filter(|o| **o == gpu).count()
    }
}

/// Stage covering each layer of one pipeline, as (group size, members).
fn stage_of_layer(
    pipeline: &crate::domain::PipelinePlan,
    layer: u32,
) -> Option<&crate::domain::StagePlan> {
    let mut first = 0u32;
    for stage in &pipeline.stages {
        let end = first + stage.layers;
        if layer >= first && layer < end {
            return Some(stage);
        }
        first = end;
    }
    None
}

/// Deterministic ZeRO-1-style layout for a plan. Stages hold consecutive
/// layer ranges, so each pipeline covers every layer exactly once.
pub fn shard_layout(plan: &ParallelizationPlan, layer_count: u32) -> Result<ShardLayout, PlanError> {
    let dp = plan.pipelines.len() as u32;
    if dp == 0 {
        return Err(PlanError::infeasible("plan has no pipelines"));
    }
    let mut layers = Vec::with_capacity(layer_count as usize);
    for layer in 0..layer_count {
        let stages: Vec<&crate::domain::StagePlan> = plan
            .pipelines
            .iter()
            .map(|p| {
                stage_of_layer(p, layer).ok_or_else(|| {
                    PlanError::config(format!("pipeline does not cover layer {layer}"))
                })
            })
            .collect::<Result<_, _>>()?;
        let tp_max = stages.iter().map(|s| s.gpus.len() as u32).max().unwrap();
        let mut owners = Vec::with_capacity((dp * tp_max) as usize);
        for stage in &stages {
            let tp = stage.gpus.len() as u32;
            let per_gpu = tp_max / tp;
            debug_assert_eq!(per_gpu * tp, tp_max, "TP degrees are powers of two");
            for slice in 0..tp_max {
                owners.push(stage.gpus[(slice / per_gpu) as usize]);
            }
        }
        layers.push(LayerSharding { tp_max, owners });
    }
    Ok(ShardLayout { layers })
}

/// Network speeds used to estimate migration durations.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BandwidthModel {
    pub intra_node_gbps: f64,
    pub inter_node_gbps: f64,
}

impl Default for BandwidthModel {
    fn default() -> Self {
        // NVLink-class within a node, IB-class across nodes.
        Self { intra_node_gbps: 400.0, inter_node_gbps: 200.0 }
    }
}

impl BandwidthModel {
    fn seconds(&self, src: GpuId, dst: GpuId, mib: f64) -> f64 {
        let gbps = if src.node == dst.node { self.intra_node_gbps } else { self.inter_node_gbps };
        mib / 1024.0 / gbps
    }
}

/// One fused transfer: every unit moving between the same pair of GPUs
/// within a batch travels together.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Transfer {
    pub src: GpuId,
    pub dst: GpuId,
    pub mib: f64,
    /// (layer, unit index) pairs at the batch's unit granularity.
    pub slices: Vec<(u32, u32)>,
}

/// A slice whose old owner failed; the destination restores it from the
/// latest checkpoint instead of receiving it over the network.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointRestore {
    pub dst: GpuId,
    pub layer: u32,
    pub unit: u32,
    pub mib: f64,
}

/// Transfers of one pack of consecutive layers.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MigrationBatch {
    pub first_layer: u32,
    pub last_layer: u32,
    pub transfers: Vec<Transfer>,
    pub restores: Vec<CheckpointRestore>,
    pub seconds: f64,
}

/// The compiled migration between two plans.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MigrationSchedule {
    pub batches: Vec<MigrationBatch>,
    pub total_seconds: f64,
    pub total_mib_moved: f64,
}

impl MigrationSchedule {
    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u32, b: u32) -> u32 {
    a / gcd(a, b) * b
}

/// Owner of each unit at granularity `units` for a layer sharded into
/// `owners.len()` equal slices.
fn owners_at_granularity(owners: &[GpuId], units: u32) -> Vec<GpuId> {
    let slices = owners.len() as u32;
    debug_assert_eq!(units % slices, 0);
    (0..units).map(|u| owners[(u * slices / units) as usize]).collect()
}

/// Compile the minimal-transfer migration between two layouts.
///
/// `state_mib_per_layer` is the byte size of one layer's model states;
/// `failed` lists GPUs whose slices are unavailable. When a needed slice
/// lived on a failed GPU, the schedule flags a checkpoint restore if
/// `allow_checkpoint_restore` is set, and errors otherwise.
pub fn compile_migration(
    old: &ShardLayout,
    new: &ShardLayout,
    state_mib_per_layer: f64,
    bandwidth: &BandwidthModel,
    pack_size: u32,
    failed: &BTreeSet<GpuId>,
    allow_checkpoint_restore: bool,
) -> Result<MigrationSchedule, PlanError> {
    if old.layers.len() != new.layers.len() {
        return Err(PlanError::config(format!(
            "layouts cover {} vs {} layers; migration requires the same model",
            old.layers.len(),
            new.layers.len()
        )));
    }
    let pack_size = pack_size.max(1);
    let layer_count = old.layers.len() as u32;
    let mut batches = Vec::new();
    let mut total_seconds = 0.0;
    let mut total_mib = 0.0;

    let mut first_layer = 0u32;
    while first_layer < layer_count {
        let last_layer = (first_layer + pack_size - 1).min(layer_count - 1);
        // Fuse by endpoint pair across the whole pack.
        let mut fused: BTreeMap<(GpuId, GpuId), Transfer> = BTreeMap::new();
        let mut restores = Vec::new();
        for layer in first_layer..=last_layer {
            let old_l = &old.layers[layer as usize];
            let new_l = &new.layers[layer as usize];
            let units = lcm(old_l.owners.len() as u32, new_l.owners.len() as u32);
            let unit_mib = state_mib_per_layer / units as f64;
            let old_owners = owners_at_granularity(&old_l.owners, units);
            let new_owners = owners_at_granularity(&new_l.owners, units);
            for unit in 0..units {
                let src = old_owners[unit as usize];
                let dst = new_owners[unit as usize];
                if src == dst {
                    continue;
                }
                if failed.contains(&src) {
                    if !allow_checkpoint_restore {
                        return Err(PlanError::infeasible(format!(
                            "slice {layer}/{unit} lives on failed GPU {src}; \
                             checkpoint restore required"
                        )));
                    }
                    restores.push(CheckpointRestore { dst, layer, unit, mib: unit_mib });
                    continue;
                }
                let entry = fused.entry((src, dst)).or_insert_with(|| Transfer {
                    src,
                    dst,
                    mib: 0.0,
                    slices: Vec::new(),
                });
                entry.mib += unit_mib;
                entry.slices.push((layer, unit));
            }
        }
        if !fused.is_empty() || !restores.is_empty() {
            // Batch time: the slowest fused link, transfers in parallel.
            let seconds = fused
                .values()
                .map(|t| bandwidth.seconds(t.src, t.dst, t.mib))
                .fold(0.0, f64::max);
            let moved: f64 = fused.values().map(|t| t.mib).sum();
            total_seconds += seconds;
            total_mib += moved;
            batches.push(MigrationBatch {
                first_layer,
                last_layer,
                transfers: fused.into_values().collect(),
                restores,
                seconds,
            });
        }
        first_layer = last_layer + 1;
    }
    Ok(MigrationSchedule { batches, total_seconds, total_mib_moved: total_mib })
}

/// Apply a schedule to the old layout and return the resulting ownership at
/// the new layout's granularity (`new_shape` supplies slice counts; its
/// owner values are ignored). Used to verify the round-trip property: the
/// result must equal the new layout exactly.
pub fn apply_schedule(
    old: &ShardLayout,
    new_shape: &ShardLayout,
    schedule: &MigrationSchedule,
) -> Result<ShardLayout, PlanError> {
    let mut layers = Vec::with_capacity(old.layers.len());
    for (layer_idx, old_l) in old.layers.iter().enumerate() {
        let shape = &new_shape.layers[layer_idx];
        let new_slices = shape.owners.len() as u32;
        let units = lcm(old_l.owners.len() as u32, new_slices);
        let mut owners = owners_at_granularity(&old_l.owners, units);
        for batch in &schedule.batches {
            for t in &batch.transfers {
                for (layer, unit) in &t.slices {
                    if *layer as usize == layer_idx {
                        owners[*unit as usize] = t.dst;
                    }
                }
            }
            for r in &batch.restores {
                if r.layer as usize == layer_idx {
                    owners[r.unit as usize] = r.dst;
                }
            }
        }
        // Collapse back to the new layout's granularity.
        let per = units / new_slices;
        let mut collapsed = Vec::with_capacity(new_slices as usize);
        for s in 0..new_slices {
            let span = &owners[(s * per) as usize..((s + 1) * per) as usize];
            if span.iter().any(|o| *o != span[0]) {
                return Err(PlanError::config(format!(
                    "layer {layer_idx} slice {s} ends up split across GPUs"
                )));
            }
            collapsed.push(span[0]);
        }
        layers.push(LayerSharding { tp_max: shape.tp_max, owners: collapsed });
    }
    Ok(ShardLayout { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PipelinePlan, StagePlan};

    fn plan(stage_specs: &[Vec<(usize, u32, u32)>], b: u32, m: &[u32]) -> ParallelizationPlan {
        // stage_specs[i] = [(gpu_count, first_gpu_index, layers)] on node i=pipeline index
        ParallelizationPlan {
            micro_batch_size: b,
            pipelines: stage_specs
                .iter()
                .enumerate()
                .map(|(pi, stages)| PipelinePlan {
                    stages: stages
                        .iter()
                        .map(|(count, first, layers)| StagePlan {
                            gpus: (0..*count)
                                .map(|k| GpuId::new(pi as u32, first + k as u32))
                                .collect(),
                            layers: *layers,
                        })
                        .collect(),
                    micro_batches: m[pi],
                })
                .collect(),
            removed: BTreeSet::new(),
        }
    }

    #[test]
    fn layout_mixed_tp_degrees() {
        // DP=2; layer 0 runs at TP=4 in pipeline 0 and TP=2 in pipeline 1:
        // 8 slices, pipeline-0 GPUs hold 1 each, pipeline-1 GPUs hold 2 each.
        let p = plan(&[vec![(4, 0, 1)], vec![(2, 0, 1)]], 1, &[1, 1]);
        let layout = shard_layout(&p, 1).unwrap();
        let l = &layout.layers[0];
        assert_eq!(l.tp_max, 4);
        assert_eq!(l.owners.len(), 8);
        for k in 0..4 {
            assert_eq!(layout.slices_owned(0, GpuId::new(0, k)), 1);
        }
        for k in 0..2 {
            assert_eq!(layout.slices_owned(0, GpuId::new(1, k)), 2);
        }
    }

    #[test]
    fn layout_classic_zero1() {
        let p = plan(&[vec![(8, 0, 4)]], 1, &[1]);
        let layout = shard_layout(&p, 4).unwrap();
        for l in &layout.layers {
            assert_eq!(l.owners.len(), 8);
            let unique: BTreeSet<GpuId> = l.owners.iter().copied().collect();
            assert_eq!(unique.len(), 8);
        }
    }

    #[test]
    fn layout_pure_dp() {
        let p = plan(&[vec![(1, 0, 2)], vec![(1, 0, 2)]], 1, &[1, 1]);
        let layout = shard_layout(&p, 2).unwrap();
        assert_eq!(layout.layers[0].owners.len(), 2);
    }

    #[test]
    fn identity_migration_is_empty() {
        let p = plan(&[vec![(2, 0, 2), (2, 2, 2)]], 1, &[1]);
        let layout = shard_layout(&p, 4).unwrap();
        let schedule = compile_migration(
            &layout,
            &layout,
            100.0,
            &BandwidthModel::default(),
            4,
            &BTreeSet::new(),
            false,
        )
        .unwrap();
        assert!(schedule.is_empty());
        assert_eq!(schedule.total_seconds, 0.0);
    }

    #[test]
    fn migration_round_trip_restores_new_layout() {
        let old = plan(&[vec![(4, 0, 2), (4, 4, 2)], vec![(2, 0, 4)]], 1, &[1, 1]);
        let new = plan(&[vec![(4, 0, 4)], vec![(2, 0, 2), (2, 2, 2)]], 1, &[1, 1]);
        let old_layout = shard_layout(&old, 4).unwrap();
        let new_layout = shard_layout(&new, 4).unwrap();
        let schedule = compile_migration(
            &old_layout,
            &new_layout,
            128.0,
            &BandwidthModel::default(),
            2,
            &BTreeSet::new(),
            false,
        )
        .unwrap();
        let applied = apply_schedule(&old_layout, &new_layout, &schedule).unwrap();
        for (a, b) in applied.layers.iter().zip(&new_layout.layers) {
            assert_eq!(a.owners, b.owners);
        }
        // No self-transfers.
        for batch in &schedule.batches {
            for t in &batch.transfers {
                assert_ne!(t.src, t.dst);
            }
        }
    }

    #[test]
    fn removed_gpu_slices_fan_out_in_layer_packs() {
        // One pipeline of two singleton stages; the second GPU leaves.
        let old = plan(&[vec![(1, 0, 4), (1, 1, 4)]], 1, &[1]);
        let new = plan(&[vec![(1, 0, 8)]], 1, &[1]);
        let old_layout = shard_layout(&old, 8).unwrap();
        let new_layout = shard_layout(&new, 8).unwrap();
        let schedule = compile_migration(
            &old_layout,
            &new_layout,
            64.0,
            &BandwidthModel::default(),
            4,
            &BTreeSet::new(),
            false,
        )
        .unwrap();
        // Layers 4..8 move from GPU 0:1 to 0:0; they span ceil(4/4)=1 pack,
        // but packs are aligned to layer 0, so layers 4-7 fill exactly one.
        assert_eq!(schedule.batches.len(), 1);
        assert_eq!(schedule.batches[0].first_layer, 4);
        let moved: f64 = schedule.batches[0].transfers.iter().map(|t| t.mib).sum();
        assert_eq!(moved, 4.0 * 64.0);
    }

    #[test]
    fn failed_source_requires_checkpoint_flag() {
        let old = plan(&[vec![(2, 0, 2)]], 1, &[1]);
        let new = plan(&[vec![(1, 0, 2)]], 1, &[1]);
        let old_layout = shard_layout(&old, 2).unwrap();
        let new_layout = shard_layout(&new, 2).unwrap();
        let mut failed = BTreeSet::new();
        failed.insert(GpuId::new(0, 1));
        let err = compile_migration(
            &old_layout,
            &new_layout,
            64.0,
            &BandwidthModel::default(),
            4,
            &failed,
            false,
        );
        assert!(err.is_err());
        let ok = compile_migration(
            &old_layout,
            &new_layout,
            64.0,
            &BandwidthModel::default(),
            4,
            &failed,
            true,
        )
        .unwrap();
        let restores: usize = ok.batches.iter().map(|b| b.restores.len()).sum();
        assert!(restores > 0);
    }

    #[test]
    fn byte_conservation_per_layer() {
        let old = plan(&[vec![(4, 0, 2), (2, 4, 2)]], 1, &[1]);
        let new = plan(&[vec![(2, 0, 2), (4, 2, 2)]], 1, &[1]);
        let old_layout = shard_layout(&old, 4).unwrap();
        let new_layout = shard_layout(&new, 4).unwrap();
        let schedule = compile_migration(
            &old_layout,
            &new_layout,
            96.0,
            &BandwidthModel::default(),
            1,
            &BTreeSet::new(),
            false,
        )
        .unwrap();
        for batch in &schedule.batches {
            let layer = batch.first_layer;
            let incoming: f64 = batch
                .transfers
                .iter()
                .flat_map(|t| t.slices.iter().map(move |(l, _)| (*l, t.mib / t.slices.len() as f64)))
                .filter(|(l, _)| *l == layer)
                .map(|(_, mib)| mib)
                .sum();
            assert!(incoming <= 96.0 + 1e-9);
        }
    }
}
