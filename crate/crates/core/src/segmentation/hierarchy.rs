use std::collections::BTreeSet;

use crate::error::Result;
use crate::numerics::{kmeans_pp_seeds, SeedStream, Vec3};
use crate::scene::PointCloud;

use super::base::split_components;
use super::{merge_small, segment_base, PatchSet, PointGraph, SegmentationConfig, SegmentationHierarchy};

const DIM: usize = 6;

/// Graph, base segmentation, small-patch merge and hierarchy in one call.
pub fn segment_view(cloud: &PointCloud, cfg: &SegmentationConfig, seed: &SeedStream) -> Result<SegmentationHierarchy> {
    cfg.validate()?;
    let graph = PointGraph::build(cloud, cfg);
    let base = segment_base(cloud, &graph, cfg)?;
    let base = merge_small(&base, cloud, cfg.min_points, cfg.min_area)?;
    build_hierarchy(&base, cloud, cfg, seed)
}

/// Agglomerates `base` into `cfg.levels` levels. Level h+1 clusters the
/// patches of level h with weighted K-Means (K-Means++ seeding) on mean and
/// normal, `k = max(4, round(c_h / reduction))`, then splits clusters that are
/// not connected in the patch adjacency graph and merges adjacent clusters
/// back down to `k` when the split overshoots.
pub fn build_hierarchy(
    base: &PatchSet,
    cloud: &PointCloud,
    cfg: &SegmentationConfig,
    seed: &SeedStream,
) -> Result<SegmentationHierarchy> {
    cfg.validate()?;
    let mut levels = vec![base.clone()];
    for h in 1..cfg.levels {
        let cur = &levels[h - 1];
        let c = cur.len();
        let k = ((c as f64 / cfg.reduction).round() as usize).max(4);
        let mapping = if k >= c {
            (0..c as u32).collect()
        } else {
            cluster_patches(cur, k, cfg, &seed.derive(format!("level-{}", h + 1)))
        };
        let next = cur.coarsen(cloud, &mapping, h + 1)?;
        levels.push(next);
    }
    Ok(SegmentationHierarchy { levels })
}

fn cluster_patches(set: &PatchSet, k: usize, cfg: &SegmentationConfig, seed: &SeedStream) -> Vec<u32> {
    let c = set.len();
    let weights: Vec<f64> = set.patches.iter().map(|p| p.point_ids.len() as f64).collect();
    let total_w: f64 = weights.iter().sum();
    let centroid = set.patches.iter().zip(&weights).map(|(p, w)| p.mean * *w).sum::<Vec3>() / total_w;
    let spread = (set.patches.iter().zip(&weights).map(|(p, w)| (p.mean - centroid).norm_squared() * w).sum::<f64>()
        / total_w)
        .sqrt();
    let scale = cfg.normal_weight * spread / (k as f64).sqrt();
    let mut data = Vec::with_capacity(c * DIM);
    for p in &set.patches {
        data.extend_from_slice(&[p.mean.x, p.mean.y, p.mean.z]);
        data.extend_from_slice(&[scale * p.normal.x, scale * p.normal.y, scale * p.normal.z]);
    }
    let row = |i: usize| &data[i * DIM..(i + 1) * DIM];
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut rng = seed.rng();
    let seeds = kmeans_pp_seeds(&data, DIM, Some(&weights), k, &mut rng);
    let mut centers: Vec<[f64; DIM]> = seeds.iter().map(|&i| row(i).try_into().expect("row width")).collect();
    let mut assign = vec![0u32; c];
    for iter in 0..cfg.kmeans_iters.max(1) {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..centers.len())
                .min_by(|&x, &y| d2(row(i), &centers[x]).total_cmp(&d2(row(i), &centers[y])).then(x.cmp(&y)))
                .expect("at least one center") as u32;
            if iter == 0 || *a != best {
                changed = true;
                *a = best;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; DIM]; centers.len()];
        let mut wsum = vec![0.0; centers.len()];
        for i in 0..c {
            let a = assign[i] as usize;
            for (s, x) in sums[a].iter_mut().zip(row(i)) {
                *s += x * weights[i];
            }
            wsum[a] += weights[i];
        }
        for (j, center) in centers.iter_mut().enumerate() {
            if wsum[j] > 0.0 {
                for (x, s) in center.iter_mut().zip(&sums[j]) {
                    *x = s / wsum[j];
                }
            }
        }
    }

    let edges: Vec<(u32, u32)> = set
        .adjacency
        .iter()
        .enumerate()
        .flat_map(|(a, adj)| adj.iter().filter(move |&&b| b as usize > a).map(move |&b| (a as u32, b)))
        .collect();
    let graph = PointGraph::from_edges(c, &edges);
    let comp = split_components(&assign, &graph);
    merge_down(&comp, &graph, &data, &weights, k)
}

/// Ward-style merging of adjacent clusters until at most `k` remain (or no
/// adjacent pair is left). Returns dense labels.
fn merge_down(labels: &[u32], graph: &PointGraph, data: &[f64], weights: &[f64], k: usize) -> Vec<u32> {
    let n_clusters = labels.iter().max().map_or(0, |&m| m as usize + 1);
    if n_clusters <= k {
        return labels.to_vec();
    }
    struct Cl {
        sum: [f64; DIM],
        w: f64,
        adj: BTreeSet<usize>,
    }
    let mut cls: Vec<Option<Cl>> = (0..n_clusters).map(|_| Some(Cl { sum: [0.0; DIM], w: 0.0, adj: BTreeSet::new() })).collect();
    for (i, &l) in labels.iter().enumerate() {
        let cl = cls[l as usize].as_mut().expect("fresh cluster");
        for (s, x) in cl.sum.iter_mut().zip(&data[i * DIM..(i + 1) * DIM]) {
            *s += x * weights[i];
        }
        cl.w += weights[i];
        for &j in graph.neighbors(i) {
            let lj = labels[j as usize] as usize;
            if lj != l as usize {
                cl.adj.insert(lj);
            }
        }
    }
    let ward = |a: &Cl, b: &Cl| {
        let d: f64 = (0..DIM).map(|t| (a.sum[t] / a.w - b.sum[t] / b.w).powi(2)).sum();
        a.w * b.w / (a.w + b.w) * d
    };
    let mut parent: Vec<usize> = (0..n_clusters).collect();
    let mut alive = n_clusters;
    while alive > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for (a, ca) in cls.iter().enumerate() {
            let Some(ca) = ca else { continue };
            for &b in ca.adj.iter().filter(|&&b| b > a) {
                let cost = ward(ca, cls[b].as_ref().expect("adjacent alive"));
                if best.is_none_or(|(bc, _, _)| cost < bc) {
                    best = Some((cost, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let cb = cls[b].take().expect("alive");
        for &x in &cb.adj {
            if let Some(cx) = cls[x].as_mut() {
                cx.adj.remove(&b);
                if x != a {
                    cx.adj.insert(a);
                }
            }
        }
        let ca = cls[a].as_mut().expect("alive");
        for t in 0..DIM {
            ca.sum[t] += cb.sum[t];
        }
        ca.w += cb.w;
        ca.adj.extend(cb.adj.into_iter().filter(|&x| x != a));
        ca.adj.remove(&b);
        parent[b] = a;
        alive -= 1;
    }
    let root = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let mut dense = vec![u32::MAX; n_clusters];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            let r = root(l as usize);
            if dense[r] == u32::MAX {
                dense[r] = next;
                next += 1;
            }
            dense[r]
        })
        .collect()
}
