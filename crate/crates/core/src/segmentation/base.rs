use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::numerics::Vec3;
use crate::scene::PointCloud;
use crate::spatial::SpatialHash;

use super::{PatchSet, SegmentationConfig};

/// Point adjacency in CSR form: 4-neighborhood on the pixel grid with a
/// depth-jump cut, or a radius graph for unorganized clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGraph {
    offsets: Vec<u32>,
    nbrs: Vec<u32>,
}

impl PointGraph {
    pub fn build(cloud: &PointCloud, cfg: &SegmentationConfig) -> Self {
        let n = cloud.len();
        let mut edges: Vec<(u32, u32)> = Vec::new();
        match &cloud.pixel_index {
            Some(px) => {
                let w = px.intrinsics.width;
                let h = px.intrinsics.height;
                let mut at = vec![u32::MAX; w * h];
                for (i, &p) in px.pixels.iter().enumerate() {
                    at[p as usize] = i as u32;
                }
                let connected = |a: usize, b: usize| {
                    let (za, zb) = (cloud.points[a].z, cloud.points[b].z);
                    (za - zb).abs() <= cfg.depth_jump_abs + cfg.depth_jump_rel * za.max(zb)
                };
                for (i, &p) in px.pixels.iter().enumerate() {
                    let (u, v) = (p as usize % w, p as usize / w);
                    if u + 1 < w {
                        let j = at[p as usize + 1];
                        if j != u32::MAX && connected(i, j as usize) {
                            edges.push((i as u32, j));
                        }
                    }
                    if v + 1 < h {
                        let j = at[p as usize + w];
                        if j != u32::MAX && connected(i, j as usize) {
                            edges.push((i as u32, j));
                        }
                    }
                }
            }
            None => {
                let hash = SpatialHash::new(&cloud.points, cfg.connect_radius);
                for (i, p) in cloud.points.iter().enumerate() {
                    for j in hash.within(&cloud.points, p, cfg.connect_radius) {
                        if j as usize > i {
                            edges.push((i as u32, j));
                        }
                    }
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Self {
        let mut deg = vec![0u32; n + 1];
        for &(a, b) in edges {
            deg[a as usize + 1] += 1;
            deg[b as usize + 1] += 1;
        }
        for i in 0..n {
            deg[i + 1] += deg[i];
        }
        let offsets = deg;
        let mut fill = offsets.clone();
        let mut nbrs = vec![0u32; edges.len() * 2];
        for &(a, b) in edges {
            nbrs[fill[a as usize] as usize] = b;
            fill[a as usize] += 1;
            nbrs[fill[b as usize] as usize] = a;
            fill[b as usize] += 1;
        }
        for i in 0..n {
            nbrs[offsets[i] as usize..offsets[i + 1] as usize].sort_unstable();
        }
        Self { offsets, nbrs }
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.nbrs[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Cell = (i64, i64, i64);

fn voxelize(points: &[Vec3], origin: &Vec3, spacing: f64) -> BTreeMap<Cell, Vec<u32>> {
    let mut cells: BTreeMap<Cell, Vec<u32>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let q = (p - origin) / spacing;
        cells.entry((q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)).or_default().push(i as u32);
    }
    cells
}

fn occupied(points: &[Vec3], origin: &Vec3, spacing: f64) -> usize {
    let mut keys: Vec<Cell> = points
        .iter()
        .map(|p| {
            let q = (p - origin) / spacing;
            (q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// One seed per occupied voxel of a grid whose spacing is bisected until the
/// occupied count is as close to `target` as possible from below.
fn grid_seeds(points: &[Vec3], target: usize) -> (Vec<u32>, f64) {
    let mut lo_c = Vec3::repeat(f64::INFINITY);
    let mut hi_c = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo_c = lo_c.inf(p);
        hi_c = hi_c.sup(p);
    }
    let extent = (hi_c - lo_c).max().max(1e-9);
    // count(spacing) is non-increasing in practice; search for the smallest
    // spacing whose count does not exceed the target
    let (mut lo, mut hi) = (extent * 1e-4, extent * 2.0);
    for _ in 0..40 {
        let mid = (lo * hi).sqrt();
        if occupied(points, &lo_c, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let spacing = hi;
    let cells = voxelize(points, &lo_c, spacing);
    let seeds = cells
        .values()
        .map(|ids| {
            let c = ids.iter().map(|&i| points[i as usize]).sum::<Vec3>() / ids.len() as f64;
            *ids.iter()
                .min_by(|&&a, &&b| {
                    (points[a as usize] - c).norm_squared().total_cmp(&(points[b as usize] - c).norm_squared())
                })
                .expect("voxel has members")
        })
        .collect();
    (seeds, spacing)
}

/// Splits every label class into connected components of `graph`. Returns
/// dense labels numbered by first appearance.
pub(crate) fn split_components(labels: &[u32], graph: &PointGraph) -> Vec<u32> {
    let mut out = vec![u32::MAX; labels.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if out[start] != u32::MAX {
            continue;
        }
        out[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for &j in graph.neighbors(i) {
                let j = j as usize;
                if out[j] == u32::MAX && labels[j] == labels[i] {
                    out[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    out
}

/// K-Means over positions and normals, seeded on a near-uniform voxel grid,
/// followed by a connected-component split.
pub fn segment_base(cloud: &PointCloud, graph: &PointGraph, cfg: &SegmentationConfig) -> Result<PatchSet> {
    let target = cfg.base_target;
    if target < 4 {
        return Err(Error::InvalidInput(format!("target patch count {target} is below 4")));
    }
    if cloud.len() < target {
        return Err(Error::TooFewPoints { needed: target, found: cloud.len() });
    }
    if graph.len() != cloud.len() {
        return Err(Error::DimensionMismatch { expected: cloud.len(), found: graph.len() });
    }
    let normals = cloud.normals()?;
    let points = &cloud.points;
    let (seeds, spacing) = grid_seeds(points, target);
    let mut centers: Vec<Vec3> = seeds.iter().map(|&i| points[i as usize]).collect();
    let mut cnormals: Vec<Vec3> = seeds.iter().map(|&i| normals[i as usize]).collect();
    let lambda = cfg.normal_weight * spacing * spacing;
    let search = 2.0 * spacing;
    let mut labels = vec![0u32; points.len()];

    let cell_of = |p: &Vec3| ((p.x / search).floor() as i64, (p.y / search).floor() as i64, (p.z / search).floor() as i64);
    let point_cells = voxelize(points, &Vec3::zeros(), search);

    for iter in 0..cfg.kmeans_iters.max(1) {
        let mut center_cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (c, p) in centers.iter().enumerate() {
            center_cells.entry(cell_of(p)).or_default().push(c as u32);
        }
        let mut changed = false;
        let mut cands = Vec::new();
        for (&(x, y, z), ids) in &point_cells {
            cands.clear();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(cs) = center_cells.get(&(x + dx, y + dy, z + dz)) {
                            cands.extend_from_slice(cs);
                        }
                    }
                }
            }
            for &i in ids {
                let i = i as usize;
                let (p, n) = (&points[i], &normals[i]);
                let cost = |c: usize| (p - centers[c]).norm_squared() + lambda * (n - cnormals[c]).norm_squared();
                let mut best = (f64::INFINITY, u32::MAX);
                for &c in &cands {
                    let d = cost(c as usize);
                    if d < best.0 || (d == best.0 && c < best.1) {
                        best = (d, c);
                    }
                }
                if best.1 == u32::MAX {
                    for c in 0..centers.len() {
                        let d = cost(c);
                        if d < best.0 {
                            best = (d, c as u32);
                        }
                    }
                }
                if iter == 0 || labels[i] != best.1 {
                    changed = true;
                    labels[i] = best.1;
                }
            }
        }
        if !changed {
            break;
        }
        let mut psum = vec![Vec3::zeros(); centers.len()];
        let mut nsum = vec![Vec3::zeros(); centers.len()];
        let mut count = vec![0usize; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            psum[l as usize] += points[i];
            nsum[l as usize] += normals[i];
            count[l as usize] += 1;
        }
        for c in 0..centers.len() {
            if count[c] > 0 {
                centers[c] = psum[c] / count[c] as f64;
                if nsum[c].norm() > 1e-12 {
                    cnormals[c] = nsum[c].normalize();
                }
            }
        }
    }

    let labels = split_components(&labels, graph);
    PatchSet::from_labels(cloud, graph, labels, 1)
}

struct Group {
    ids: Vec<u32>,
    sum_p: Vec3,
    sum_n: Vec3,
    area: f64,
    adj: BTreeSet<usize>,
}

impl Group {
    fn normal(&self) -> Vec3 {
        let n = self.sum_n.norm();
        if n > 0.0 {
            self.sum_n / n
        } else {
            Vec3::zeros()
        }
    }

    fn mean(&self) -> Vec3 {
        self.sum_p / self.ids.len() as f64
    }
}

/// Folds patches below `min_points` or `min_area` into the adjacent patch
/// with the most similar normal (the nearest patch when none is adjacent),
/// smallest first, until every survivor meets both thresholds or one patch
/// is left.
pub fn merge_small(set: &PatchSet, cloud: &PointCloud, min_points: usize, min_area: f64) -> Result<PatchSet> {
    let small = |count: usize, area: f64| count < min_points || area < min_area;
    if set.patches.iter().all(|p| !small(p.point_ids.len(), p.area)) || set.len() <= 1 {
        return Ok(set.clone());
    }
    let normals = cloud.normals()?;
    let mut groups: Vec<Option<Group>> = set
        .patches
        .iter()
        .zip(&set.adjacency)
        .map(|(p, adj)| {
            Some(Group {
                ids: p.point_ids.clone(),
                sum_p: p.point_ids.iter().map(|&i| cloud.points[i as usize]).sum(),
                sum_n: p.point_ids.iter().map(|&i| normals[i as usize]).sum(),
                area: p.area,
                adj: adj.iter().map(|&a| a as usize).collect(),
            })
        })
        .collect();
    let mut alive = groups.len();

    while alive > 1 {
        let victim = groups
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
            .filter(|(_, g)| small(g.ids.len(), g.area))
            .min_by(|a, b| a.1.ids.len().cmp(&b.1.ids.len()).then(a.1.area.total_cmp(&b.1.area)).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i);
        let Some(victim) = victim else { break };
        let g = groups[victim].take().expect("victim is alive");
        let gn = g.normal();
        let target = if g.adj.is_empty() {
            let gm = g.mean();
            groups
                .iter()
                .enumerate()
                .filter_map(|(i, o)| o.as_ref().map(|o| (i, (o.mean() - gm).norm_squared())))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .expect("another patch is alive")
        } else {
            *g.adj
                .iter()
                .max_by(|&&a, &&b| {
                    let da = groups[a].as_ref().expect("adjacent alive").normal().dot(&gn);
                    let db = groups[b].as_ref().expect("adjacent alive").normal().dot(&gn);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("non-empty adjacency")
        };
        for &a in &g.adj {
            let other = groups[a].as_mut().expect("adjacent alive");
            other.adj.remove(&victim);
            if a != target {
                other.adj.insert(target);
            }
        }
        let t = groups[target].as_mut().expect("target alive");
        t.ids.extend_from_slice(&g.ids);
        t.sum_p += g.sum_p;
        t.sum_n += g.sum_n;
        t.area += g.area;
        t.adj.extend(g.adj.iter().copied().filter(|&a| a != target));
        alive -= 1;
    }

    let mut mapping = vec![0u32; groups.len()];
    let mut new_id = vec![u32::MAX; groups.len()];
    let mut next = 0;
    for (i, g) in groups.iter().enumerate() {
        if g.is_some() {
            new_id[i] = next;
            next += 1;
        }
    }
    // absorbed patches point at whichever survivor holds their points
    for (i, g) in groups.iter().enumerate() {
        if let Some(g) = g {
            for &pid in &g.ids {
                mapping[set.labels[pid as usize] as usize] = new_id[i];
            }
        }
    }
    set.coarsen(cloud, &mapping, set.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Pose, Vec3};
    use crate::scene::{depth_to_cloud, estimate_normals, synth_scene, CameraIntrinsics, Primitive, SceneSpec, SynthOptions};

    fn render(spec: SceneSpec) -> PointCloud {
        let opts = SynthOptions { intrinsics: CameraIntrinsics::desk(), ..Default::default() };
        let frame = synth_scene(&spec, &Pose::identity(), &opts).unwrap();
        estimate_normals(&depth_to_cloud(&frame).unwrap(), 0.05).unwrap()
    }

    fn cfg(target: usize) -> SegmentationConfig {
        SegmentationConfig { base_target: target, ..Default::default() }
    }

    #[test]
    fn planar_cloud_gives_compact_patches_with_plane_normals() {
        let cloud = render(SceneSpec::new(vec![Primitive::plane(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(0.0, 0.0, -1.0),
            0.6,
            0.6,
        )
        .unwrap()]));
        let c = cfg(9);
        let graph = PointGraph::build(&cloud, &c);
        let set = segment_base(&cloud, &graph, &c).unwrap();
        assert_eq!(set.len(), 9);
        for p in &set.patches {
            let angle = p.normal.dot(&Vec3::new(0.0, 0.0, -1.0)).min(1.0).acos().to_degrees();
            assert!(angle <= 2.0);
            let centroid = p.point_ids.iter().map(|&i| cloud.points[i as usize]).sum::<Vec3>() / p.point_ids.len() as f64;
            assert!((centroid - p.mean).norm() < 1e-6);
            // compact: no member further than the plane half-diagonal / 2
            assert!(p.point_ids.iter().all(|&i| (cloud.points[i as usize] - p.mean).norm() < 0.5));
        }
    }

    #[test]
    fn parallel_planes_are_never_mixed() {
        let cloud = render(SceneSpec::new(vec![
            Primitive::plane(Vec3::new(-0.4, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0), 0.3, 0.6).unwrap(),
            Primitive::plane(Vec3::new(0.4, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0), 0.5, 0.8).unwrap(),
        ]));
        let c = cfg(10);
        let graph = PointGraph::build(&cloud, &c);
        let set = segment_base(&cloud, &graph, &c).unwrap();
        for p in &set.patches {
            let zs: Vec<f64> = p.point_ids.iter().map(|&i| cloud.points[i as usize].z).collect();
            let near = zs.iter().filter(|&&z| z < 2.5).count();
            assert!(near == 0 || near == zs.len());
        }
    }

    #[test]
    fn too_few_points() {
        let mut cloud = PointCloud::from_points(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.0, 0.1, 1.0)]);
        cloud = estimate_normals(&cloud, 0.5).unwrap();
        let c = cfg(10);
        let graph = PointGraph::build(&cloud, &c);
        assert!(matches!(segment_base(&cloud, &graph, &c), Err(Error::TooFewPoints { needed: 10, found: 3 })));
    }

    fn line_cloud(n: usize) -> (PointCloud, PointGraph) {
        let pts = (0..n).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 1.0)).collect();
        let mut cloud = PointCloud::from_points(pts);
        cloud.normals = Some(vec![-Vec3::z(); n]);
        cloud.point_area = Some(vec![1e-4; n]);
        let edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (i - 1, i)).collect();
        (cloud, PointGraph::from_edges(n, &edges))
    }

    #[test]
    fn small_patch_merges_into_neighbor() {
        let (cloud, graph) = line_cloud(505);
        let labels = (0..505).map(|i| u32::from(i >= 500)).collect();
        let set = PatchSet::from_labels(&cloud, &graph, labels, 1).unwrap();
        let merged = merge_small(&set, &cloud, 10, 0.0).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged.patches[0].point_ids.len(), 505);
    }

    #[test]
    fn merge_is_identity_when_all_large() {
        let (cloud, graph) = line_cloud(100);
        let labels = (0..100).map(|i| (i / 25) as u32).collect();
        let set = PatchSet::from_labels(&cloud, &graph, labels, 1).unwrap();
        assert_eq!(merge_small(&set, &cloud, 10, 0.0).unwrap(), set);
    }

    #[test]
    fn chain_of_small_patches_terminates() {
        let (cloud, graph) = line_cloud(40);
        // [3][3][4][30]: a chain of three small patches ending in a big one
        let labels = (0..40).map(|i| if i < 3 { 0 } else if i < 6 { 1 } else if i < 10 { 2 } else { 3 }).collect();
        let set = PatchSet::from_labels(&cloud, &graph, labels, 1).unwrap();
        let merged = merge_small(&set, &cloud, 5, 0.0).unwrap();
        assert!(merged.patches.iter().all(|p| p.point_ids.len() >= 5));
        let total: usize = merged.patches.iter().map(|p| p.point_ids.len()).sum();
        assert_eq!(total, 40);
        for (i, &l) in merged.labels.iter().enumerate() {
            assert!(merged.patches[l as usize].point_ids.binary_search(&(i as u32)).is_ok());
        }
    }

    #[test]
    fn components_split_by_graph() {
        let graph = PointGraph::from_edges(4, &[(0, 1), (2, 3)]);
        assert_eq!(split_components(&[0, 0, 0, 0], &graph), vec![0, 0, 1, 1]);
        assert_eq!(split_components(&[0, 1, 1, 1], &graph), vec![0, 1, 2, 2]);
    }
}
