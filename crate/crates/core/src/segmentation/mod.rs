//! Surface-patch over-segmentation of a view and its fine-to-coarse hierarchy.

mod base;
mod hierarchy;
mod io;

pub use base::{merge_small, segment_base, PointGraph};
pub use hierarchy::{build_hierarchy, segment_view};
pub use io::{export_segmentation, import_segmentation, parse_segmentation, SegmentationLabels};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vec3;
use crate::scene::PointCloud;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Patch count aimed for at the finest level.
    pub base_target: usize,
    pub levels: usize,
    /// Patch-count ratio between consecutive levels.
    pub reduction: f64,
    pub min_points: usize,
    /// m²
    pub min_area: f64,
    /// Weight of the normal term in K-Means, relative to the seed spacing.
    pub normal_weight: f64,
    pub kmeans_iters: usize,
    /// Two neighboring pixels are connected when their depths differ by less
    /// than `depth_jump_abs + depth_jump_rel * depth`.
    pub depth_jump_abs: f64,
    pub depth_jump_rel: f64,
    /// Radius graph used when the cloud has no pixel grid.
    pub connect_radius: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            base_target: 1000,
            levels: 4,
            reduction: 2.5,
            min_points: 20,
            min_area: 1e-3,
            normal_weight: 1.0,
            kmeans_iters: 10,
            depth_jump_abs: 0.02,
            depth_jump_rel: 0.05,
            connect_radius: 0.05,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("segmentation: {m}")));
        if self.base_target < 4 {
            return bad("base_target must be at least 4");
        }
        if self.levels < 1 {
            return bad("levels must be at least 1");
        }
        if !(self.reduction > 1.0) {
            return bad("reduction must exceed 1");
        }
        if !(self.min_area >= 0.0) || !(self.normal_weight >= 0.0) {
            return bad("min_area and normal_weight must be non-negative");
        }
        if !(self.depth_jump_abs >= 0.0 && self.depth_jump_rel >= 0.0 && self.connect_radius > 0.0) {
            return bad("connectivity thresholds must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePatch {
    pub id: usize,
    /// Centroid of the member points.
    pub mean: Vec3,
    pub normal: Vec3,
    /// Sorted member point indices.
    pub point_ids: Vec<u32>,
    pub area: f64,
    pub level: usize,
}

/// One partition of a cloud into patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// 1-based hierarchy level.
    pub level: usize,
    pub patches: Vec<SurfacePatch>,
    /// Patch id of every point.
    pub labels: Vec<u32>,
    /// Sorted ids of patches sharing a boundary with each patch.
    pub adjacency: Vec<Vec<u32>>,
}

impl PatchSet {
    /// Builds patches from dense labels `0..count`. Every label must be used.
    pub fn from_labels(cloud: &PointCloud, graph: &PointGraph, labels: Vec<u32>, level: usize) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::DimensionMismatch { expected: cloud.len(), found: labels.len() });
        }
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut members = vec![Vec::new(); count];
        for (i, &l) in labels.iter().enumerate() {
            members[l as usize].push(i as u32);
        }
        if let Some(empty) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::InvalidInput(format!("patch label {empty} has no points")));
        }
        let patches = members
            .into_iter()
            .enumerate()
            .map(|(id, ids)| make_patch(cloud, id, ids, level))
            .collect::<Result<Vec<_>>>()?;
        let mut adjacency = vec![Vec::new(); count];
        for i in 0..labels.len() {
            for &j in graph.neighbors(i) {
                let (a, b) = (labels[i], labels[j as usize]);
                if a != b {
                    adjacency[a as usize].push(b);
                }
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        Ok(Self { level, patches, labels, adjacency })
    }

    /// Merges patches according to `mapping` (old id → new dense id).
    pub fn coarsen(&self, cloud: &PointCloud, mapping: &[u32], level: usize) -> Result<Self> {
        let count = mapping.iter().max().map_or(0, |&m| m as usize + 1);
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); count];
        for (old, p) in self.patches.iter().enumerate() {
            members[mapping[old] as usize].extend_from_slice(&p.point_ids);
        }
        let patches = members
            .into_iter()
            .enumerate()
            .map(|(id, mut ids)| {
                ids.sort_unstable();
                make_patch(cloud, id, ids, level)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut adjacency = vec![Vec::new(); count];
        for (a, adj) in self.adjacency.iter().enumerate() {
            for &b in adj {
                let (na, nb) = (mapping[a], mapping[b as usize]);
                if na != nb {
                    adjacency[na as usize].push(nb);
                }
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        let labels = self.labels.iter().map(|&l| mapping[l as usize]).collect();
        Ok(Self { level, patches, labels, adjacency })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub(crate) fn make_patch(cloud: &PointCloud, id: usize, point_ids: Vec<u32>, level: usize) -> Result<SurfacePatch> {
    if point_ids.is_empty() {
        return Err(Error::InvalidInput(format!("patch {id} has no points")));
    }
    let normals = cloud.normals()?;
    let n = point_ids.len() as f64;
    let mut mean = Vec3::zeros();
    let mut nsum = Vec3::zeros();
    let mut area = 0.0;
    for &i in &point_ids {
        let i = i as usize;
        mean += cloud.points[i];
        nsum += normals[i];
        area += cloud.area(i);
    }
    mean /= n;
    let normal = if nsum.norm() > 1e-9 * n {
        nsum.normalize()
    } else if mean.norm() > 0.0 {
        -mean.normalize()
    } else {
        -Vec3::z()
    };
    Ok(SurfacePatch { id, mean, normal, point_ids, area, level })
}

/// All H levels of a view, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationHierarchy {
    pub levels: Vec<PatchSet>,
}

impl SegmentationHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(PatchSet::len).collect()
    }

    /// Checks the partition and monotone-count invariants.
    pub fn check(&self, n_points: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidInput("hierarchy has no levels".into()));
        }
        for (h, level) in self.levels.iter().enumerate() {
            let mut seen = vec![false; n_points];
            for p in &level.patches {
                for &i in &p.point_ids {
                    let slot = seen
                        .get_mut(i as usize)
                        .ok_or_else(|| Error::InvalidInput(format!("level {}: point {i} out of range", h + 1)))?;
                    if std::mem::replace(slot, true) {
                        return Err(Error::InvalidInput(format!("level {}: point {i} in two patches", h + 1)));
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::InvalidInput(format!("level {}: not every point is covered", h + 1)));
            }
            if h > 0 && level.len() > self.levels[h - 1].len() {
                return Err(Error::InvalidInput(format!("level {} has more patches than level {h}", h + 1)));
            }
        }
        Ok(())
    }
}
