//! Patch correspondences between two views and two-way rigid validation.
//!
//! Patches are matched by a 24-value descriptor (mean and standard deviation
//! of the projected features the patch emitted) with mutual nearest
//! neighbors and a ratio test. A RANSAC over patch means gives the rigid
//! transform; it is refit on the inliers, optionally with a point-to-plane
//! term that uses the target patch normals.

use nalgebra::{Matrix6, Vector6};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_space::{IcaModel, PROJ_DIM};
use crate::features::LevelFeatures;
use crate::numerics::{procrustes_align, rot_exp, rot_log, RigidTransform, SeedStream, Vec3};
use crate::scene::{CameraIntrinsics, PointCloud};
use crate::segmentation::PatchSet;

pub const DESC_DIM: usize = 2 * PROJ_DIM;
pub type PatchDescriptor = [f32; DESC_DIM];

/// Coarse depth image of a view in its own sensor frame. 0 marks a hole.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSketch {
    pub intrinsics: CameraIntrinsics,
    /// meters, row-major
    pub depth: Vec<f32>,
}

/// Target sketch width in pixels.
const SKETCH_WIDTH: usize = 40;

impl DepthSketch {
    /// Block-downsamples an organized cloud: each block keeps the depth of
    /// its center pixel, or the nearest valid depth in the block.
    pub fn from_cloud(cloud: &PointCloud) -> Option<Self> {
        let px = cloud.pixel_index.as_ref()?;
        let k = &px.intrinsics;
        let f = (k.width / SKETCH_WIDTH).max(1);
        let (w, h) = (k.width / f, k.height / f);
        if w == 0 || h == 0 {
            return None;
        }
        let mut depth = vec![0f32; w * h];
        let mut score = vec![usize::MAX; w * h];
        for (i, &p) in px.pixels.iter().enumerate() {
            let (u, v) = (p as usize % k.width, p as usize / k.width);
            let (bu, bv) = (u / f, v / f);
            if bu >= w || bv >= h {
                continue;
            }
            let c = f / 2;
            let d = (u - bu * f).abs_diff(c) + (v - bv * f).abs_diff(c);
            let b = bv * w + bu;
            if d < score[b] {
                score[b] = d;
                depth[b] = cloud.points[i].z as f32;
            }
        }
        let fs = f as f64;
        let intrinsics = CameraIntrinsics {
            fx: k.fx / fs,
            fy: k.fy / fs,
            cx: (k.cx - (f / 2) as f64) / fs,
            cy: (k.cy - (f / 2) as f64) / fs,
            width: w,
            height: h,
            depth_scale: k.depth_scale,
        };
        Some(Self { intrinsics, depth })
    }

    fn at(&self, x: f64, y: f64) -> Option<f64> {
        let (u, v) = (x.round(), y.round());
        if u < 0.0 || v < 0.0 || u >= self.intrinsics.width as f64 || v >= self.intrinsics.height as f64 {
            return None;
        }
        let z = self.depth[v as usize * self.intrinsics.width + u as usize];
        (z > 0.0).then_some(z as f64)
    }

    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        let w = self.intrinsics.width;
        self.depth.iter().enumerate().filter(|(_, &z)| z > 0.0).map(move |(i, &z)| {
            self.intrinsics.ray((i % w) as f64, (i / w) as f64) * z as f64
        })
    }
}

impl DepthSketch {
    fn point_at(&self, u: usize, v: usize) -> Option<Vec3> {
        let z = self.depth[v * self.intrinsics.width + u];
        (z > 0.0).then(|| self.intrinsics.ray(u as f64, v as f64) * z as f64)
    }

    /// Grid normals from central differences, facing the sensor.
    fn normals(&self) -> Vec<Option<Vec3>> {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        (0..w * h)
            .map(|i| {
                let (u, v) = (i % w, i / w);
                if u == 0 || v == 0 || u + 1 >= w || v + 1 >= h {
                    return None;
                }
                let c = self.point_at(u, v)?;
                let du = self.point_at(u + 1, v)? - self.point_at(u - 1, v)?;
                let dv = self.point_at(u, v + 1)? - self.point_at(u, v - 1)?;
                // reject grazing or discontinuous neighborhoods
                if du.norm() > 0.1 * c.z || dv.norm() > 0.1 * c.z {
                    return None;
                }
                let n = du.cross(&dv).try_normalize(1e-12)?;
                Some(if n.dot(&c) > 0.0 { -n } else { n })
            })
            .collect()
    }
}

/// Projective point-to-plane ICP of `q`'s sketch onto `x`'s, starting at `t`.
fn sketch_icp(q: &DepthSketch, x: &DepthSketch, t: &RigidTransform) -> RigidTransform {
    let normals = x.normals();
    let src: Vec<Vec3> = q.points().collect();
    let mut cur = *t;
    for it in 0..12 {
        let gate = (0.15 * 0.75f64.powi(it)).max(0.03);
        let mut a = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        let mut used = 0;
        for s in &src {
            let p = cur.apply(s);
            let Some((u, v)) = x.intrinsics.project(&p) else { continue };
            let (u, v) = (u.round(), v.round());
            if u < 0.0 || v < 0.0 || u >= x.intrinsics.width as f64 || v >= x.intrinsics.height as f64 {
                continue;
            }
            let k = v as usize * x.intrinsics.width + u as usize;
            let (Some(n), Some(d)) = (normals[k], x.point_at(u as usize, v as usize)) else { continue };
            let e = p - d;
            let r = e.dot(&n);
            if r.abs() > gate || e.norm() > 3.0 * gate {
                continue;
            }
            let pc = p.cross(&n);
            let j = Vector6::new(pc.x, pc.y, pc.z, n.x, n.y, n.z);
            a += j * j.transpose();
            b += j * r;
            used += 1;
        }
        if used < 30 {
            break;
        }
        let damp = 1e-3 * a.trace() / 6.0;
        a += Matrix6::identity() * damp;
        let Some(step) = a.cholesky().map(|c| c.solve(&(-b))) else { break };
        let dr = rot_exp(&Vec3::new(step[0], step[1], step[2]));
        cur = RigidTransform::new(dr * cur.rotation, dr * cur.translation + Vec3::new(step[3], step[4], step[5]));
        if step.norm() < 1e-7 && gate <= 0.03 {
            break;
        }
    }
    cur
}

/// Where the points of one sketch land in another under a transform.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthCheck {
    /// on the other view's surface
    pub consistent: usize,
    /// in front of the other view's surface, i.e. in space it saw as empty
    pub free_space: usize,
    /// behind the other view's surface
    pub occluded: usize,
}

impl DepthCheck {
    pub fn seen(&self) -> usize {
        self.consistent + self.free_space + self.occluded
    }

    /// consistent minus twice the free-space violations
    pub fn score(&self) -> f64 {
        self.consistent as f64 - 2.0 * self.free_space as f64
    }

    pub fn consistent_fraction(&self) -> f64 {
        if self.seen() == 0 { 0.0 } else { self.consistent as f64 / self.seen() as f64 }
    }

    pub fn free_fraction(&self) -> f64 {
        if self.seen() == 0 { 0.0 } else { self.free_space as f64 / self.seen() as f64 }
    }
}

/// Projects `q`'s sketch through `t` (q frame to x frame) into `x`'s sketch.
/// Depths agree within `tol` plus 2% of range.
pub fn depth_check(q: &DepthSketch, x: &DepthSketch, t: &RigidTransform, tol: f64) -> DepthCheck {
    depth_check_points(q.points(), x, t, tol)
}

fn depth_check_points(points: impl Iterator<Item = Vec3>, x: &DepthSketch, t: &RigidTransform, tol: f64) -> DepthCheck {
    let mut c = DepthCheck::default();
    for p in points {
        let p = t.apply(&p);
        let Some((u, v)) = x.intrinsics.project(&p) else { continue };
        let Some(z) = x.at(u, v) else { continue };
        let band = tol + 0.02 * z;
        if (p.z - z).abs() <= band {
            c.consistent += 1;
        } else if p.z < z {
            c.free_space += 1;
        } else {
            c.occluded += 1;
        }
    }
    c
}

/// What validation needs to know about one view: patch means and normals in
/// the sensor frame, one descriptor per patch and, for range images, a
/// coarse depth sketch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewGeometry {
    pub means: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub descriptors: Vec<PatchDescriptor>,
    pub sketch: Option<DepthSketch>,
}

impl ViewGeometry {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(4 + self.len() * (48 + 4 * DESC_DIM));
        b.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            for v in self.means[i].iter().chain(self.normals[i].iter()) {
                b.extend_from_slice(&v.to_le_bytes());
            }
            for v in &self.descriptors[i] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(sk) = &self.sketch {
            let k = &sk.intrinsics;
            b.extend_from_slice(&(k.width as u32).to_le_bytes());
            b.extend_from_slice(&(k.height as u32).to_le_bytes());
            for v in [k.fx, k.fy, k.cx, k.cy, k.depth_scale] {
                b.extend_from_slice(&v.to_le_bytes());
            }
            for v in &sk.depth {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let rec = 48 + 4 * DESC_DIM;
        let n = b.get(..4).map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize);
        let n = n.ok_or_else(|| Error::Corrupt("view geometry truncated".into()))?;
        let end = n.checked_mul(rec).and_then(|x| x.checked_add(4)).filter(|&e| e <= b.len());
        let end = end.ok_or_else(|| Error::Corrupt("view geometry size mismatch".into()))?;
        let mut g = ViewGeometry::default();
        if end < b.len() {
            g.sketch = Some(parse_sketch(&b[end..])?);
        }
        for r in b[4..end].chunks_exact(rec) {
            let f = |k: usize| f64::from_le_bytes(r[8 * k..8 * k + 8].try_into().expect("8 bytes"));
            g.means.push(Vec3::new(f(0), f(1), f(2)));
            g.normals.push(Vec3::new(f(3), f(4), f(5)));
            g.descriptors.push(std::array::from_fn(|k| f32::from_le_bytes(r[48 + 4 * k..52 + 4 * k].try_into().expect("4 bytes"))));
        }
        Ok(g)
    }
}

fn parse_sketch(b: &[u8]) -> Result<DepthSketch> {
    const HEAD: usize = 8 + 5 * 8;
    let bad = || Error::Corrupt("depth sketch malformed".into());
    if b.len() < HEAD {
        return Err(bad());
    }
    let u = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
    let (width, height) = (u(0), u(4));
    let intrinsics = CameraIntrinsics { width, height, fx: f(8), fy: f(16), cx: f(24), cy: f(32), depth_scale: f(40) };
    intrinsics.validate().map_err(|_| bad())?;
    let cells = width.checked_mul(height).ok_or_else(bad)?;
    if cells.checked_mul(4).and_then(|x| x.checked_add(HEAD)) != Some(b.len()) {
        return Err(bad());
    }
    let depth: Vec<f32> = b[HEAD..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if depth.iter().any(|z| !z.is_finite() || *z < 0.0) {
        return Err(bad());
    }
    Ok(DepthSketch { intrinsics, depth })
}

/// Pools each patch's projected features into mean and standard deviation.
/// Patches that emitted no features get the zero descriptor.
pub fn describe_view(level: &PatchSet, features: &LevelFeatures, ica: &IcaModel) -> ViewGeometry {
    let n = level.len();
    let mut sum = vec![[0.0f64; PROJ_DIM]; n];
    let mut sq = vec![[0.0f64; PROJ_DIM]; n];
    let mut count = vec![0usize; n];
    for (f, &(p, _)) in features.features.iter().zip(&features.provenance) {
        let p = p as usize;
        if p >= n {
            continue;
        }
        let y = ica.project(f);
        for d in 0..PROJ_DIM {
            sum[p][d] += y[d];
            sq[p][d] += y[d] * y[d];
        }
        count[p] += 1;
    }
    let descriptors = (0..n)
        .map(|p| {
            let mut out = [0.0f32; DESC_DIM];
            if count[p] > 0 {
                let c = count[p] as f64;
                for d in 0..PROJ_DIM {
                    let m = sum[p][d] / c;
                    out[d] = m as f32;
                    out[PROJ_DIM + d] = (sq[p][d] / c - m * m).max(0.0).sqrt() as f32;
                }
            }
            out
        })
        .collect();
    ViewGeometry {
        means: level.patches.iter().map(|p| p.mean).collect(),
        normals: level.patches.iter().map(|p| p.normal).collect(),
        descriptors,
        sketch: None,
    }
}

/// How the translation part of the two-way residual is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualMode {
    /// Translation of T_f ∘ T_b, i.e. ‖R_f t_b + t_f‖.
    #[default]
    Composed,
    /// ‖t_f + t_b‖ taken literally.
    Verbatim,
}

/// How query patches are paired with candidate patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Matcher {
    /// Mutual nearest descriptors with a ratio test, 3-correspondence RANSAC.
    Mutual,
    /// Each sampled patch keeps its `candidates` nearest descriptors;
    /// hypotheses come from two point-normal correspondences.
    #[default]
    Guided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    /// rad
    pub eps_rot: f64,
    /// m
    pub eps_trans: f64,
    pub ransac_iters: usize,
    /// m
    pub inlier_dist: f64,
    pub min_inliers: usize,
    pub ratio: f64,
    /// Fraction of patches each direction samples before matching.
    pub sample_fraction: f64,
    /// Hierarchy level (1-based) used for validation.
    pub level: usize,
    pub residual: ResidualMode,
    /// Refit the consensus transform with a point-to-plane term.
    pub point_to_plane: bool,
    pub matcher: Matcher,
    /// descriptor neighbors kept per patch by the guided matcher
    pub candidates: usize,
    /// After consensus, pair every sampled patch with the nearest
    /// compatible candidate patch and refit.
    pub reassociate: bool,
    /// normal agreement for association, rad
    pub normal_tol: f64,
    /// largest in-plane offset tolerated by association, m
    pub assoc_radius: f64,
    /// consensus hypotheses refined and compared by depth agreement when
    /// both views carry a depth sketch
    pub hypotheses: usize,
    /// depth agreement band, m (plus 2% of range)
    pub depth_tol: f64,
    /// least fraction of projected sketch points that must land on the
    /// other surface, each direction
    pub min_consistent: f64,
    /// largest fraction allowed to land in the other view's free space
    pub max_free_space: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            eps_rot: 0.05,
            eps_trans: 0.10,
            ransac_iters: 500,
            inlier_dist: 0.05,
            min_inliers: 12,
            ratio: 0.9,
            sample_fraction: 0.7,
            level: 2,
            residual: ResidualMode::Composed,
            point_to_plane: true,
            matcher: Matcher::Guided,
            candidates: 8,
            reassociate: true,
            normal_tol: 0.35,
            assoc_radius: 0.10,
            hypotheses: 8,
            depth_tol: 0.03,
            min_consistent: 0.65,
            max_free_space: 0.15,
        }
    }
}

impl ValidationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_rot > 0.0
            && self.eps_trans > 0.0
            && self.ransac_iters > 0
            && self.inlier_dist > 0.0
            && self.min_inliers >= 3
            && self.ratio > 0.0
            && self.ratio <= 1.0
            && self.sample_fraction > 0.0
            && self.sample_fraction <= 1.0
            && self.level >= 1
            && self.candidates >= 1
            && self.normal_tol > 0.0
            && self.assoc_radius >= self.inlier_dist
            && self.hypotheses >= 1
            && self.depth_tol > 0.0
            && (0.0..=1.0).contains(&self.min_consistent)
            && (0.0..=1.0).contains(&self.max_free_space);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("validation: {self:?}")))
        }
    }
}

fn is_zero(d: &PatchDescriptor) -> bool {
    d.iter().all(|&v| v == 0.0)
}

fn desc_d2(a: &PatchDescriptor, b: &PatchDescriptor) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum()
}

fn nearest_two(q: &PatchDescriptor, pool: &[PatchDescriptor], allowed: &[usize]) -> Option<(usize, f64, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for &j in allowed {
        let d = desc_d2(q, &pool[j]);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1.sqrt(), second.sqrt()))
}

/// Mutual nearest neighbors in descriptor space passing the ratio test,
/// restricted to the given patch subsets. Returns (q index, x index) pairs.
pub fn match_patches_subset(q: &ViewGeometry, qs: &[usize], x: &ViewGeometry, xs: &[usize], ratio: f64) -> Vec<(usize, usize)> {
    let qs: Vec<usize> = qs.iter().copied().filter(|&i| !is_zero(&q.descriptors[i])).collect();
    let xs: Vec<usize> = xs.iter().copied().filter(|&i| !is_zero(&x.descriptors[i])).collect();
    let mut out = Vec::new();
    for &i in &qs {
        let Some((j, d1, d2)) = nearest_two(&q.descriptors[i], &x.descriptors, &xs) else { continue };
        if d2.is_finite() && d1 > ratio * d2 {
            continue;
        }
        let Some((back, _, _)) = nearest_two(&x.descriptors[j], &q.descriptors, &qs) else { continue };
        if back == i {
            out.push((i, j));
        }
    }
    out
}

pub fn match_patches(q: &ViewGeometry, x: &ViewGeometry, ratio: f64) -> Vec<(usize, usize)> {
    let qs: Vec<usize> = (0..q.len()).collect();
    let xs: Vec<usize> = (0..x.len()).collect();
    match_patches_subset(q, &qs, x, &xs, ratio)
}

/// Transform estimate with its consensus.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformEstimate {
    pub transform: RigidTransform,
    /// Inlier pairs whose candidate patch is among the query patch's
    /// `candidates` nearest descriptors.
    pub agreement: usize,
    /// Indices into the correspondence list.
    pub inliers: Vec<usize>,
    pub rms: f64,
}

fn inliers_of(t: &RigidTransform, src: &[Vec3], dst: &[Vec3], dist: f64) -> Vec<usize> {
    let d2 = dist * dist;
    (0..src.len()).filter(|&i| (t.apply(&src[i]) - dst[i]).norm_squared() <= d2).collect()
}

/// Gauss-Newton on Σ ((T p − q)·n)² + w Σ ‖T p − q‖². The small
/// point-to-point weight keeps directions the normals do not constrain.
fn refine_point_to_plane(t: &RigidTransform, src: &[Vec3], dst: &[Vec3], normals: &[Vec3], idx: &[usize]) -> RigidTransform {
    const W_POINT: f64 = 0.05;
    let mut cur = *t;
    for _ in 0..5 {
        let mut a = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for &i in idx {
            let p = cur.apply(&src[i]);
            let e = p - dst[i];
            let n = normals[i];
            // plane row: d/dω = p × n, d/dt = n
            let pc = p.cross(&n);
            let j = Vector6::new(pc.x, pc.y, pc.z, n.x, n.y, n.z);
            a += j * j.transpose();
            b += j * e.dot(&n);
            // point rows: d(e)/dω = -[p]×, d(e)/dt = I
            for k in 0..3 {
                let mut unit = Vec3::zeros();
                unit[k] = 1.0;
                let jw = p.cross(&unit);
                let jk = Vector6::new(jw.x, jw.y, jw.z, unit.x, unit.y, unit.z);
                a += W_POINT * jk * jk.transpose();
                b += W_POINT * jk * e[k];
            }
        }
        let Some(step) = a.cholesky().map(|c| c.solve(&(-b))) else { break };
        let w = Vec3::new(step[0], step[1], step[2]);
        let dt = Vec3::new(step[3], step[4], step[5]);
        let dr = rot_exp(&w);
        cur = RigidTransform::new(dr * cur.rotation, dr * cur.translation + dt);
        if step.norm() < 1e-10 {
            break;
        }
    }
    cur
}

/// RANSAC over 3-correspondence samples with Procrustes fits, then a refit
/// on all inliers. `dst_normals`, when given, enables the point-to-plane
/// refit.
pub fn estimate_transform(
    src: &[Vec3],
    dst: &[Vec3],
    dst_normals: Option<&[Vec3]>,
    cfg: &ValidationConfig,
    seed: &SeedStream,
) -> Result<TransformEstimate> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::DimensionMismatch { expected: n, found: dst.len() });
    }
    if n < 3 {
        return Err(Error::InsufficientCorrespondences { found: n });
    }
    let mut rng = seed.rng();
    let mut best: Option<(usize, f64, RigidTransform)> = None;
    for _ in 0..cfg.ransac_iters {
        let s = sample(&mut rng, n, 3);
        let (a, b): (Vec<Vec3>, Vec<Vec3>) = s.iter().map(|i| (src[i], dst[i])).unzip();
        let Ok(t) = procrustes_align(&a, &b) else { continue };
        let inl = inliers_of(&t, src, dst, cfg.inlier_dist);
        let err: f64 = inl.iter().map(|&i| (t.apply(&src[i]) - dst[i]).norm_squared()).sum();
        if best.as_ref().is_none_or(|(c, e, _)| inl.len() > *c || (inl.len() == *c && err < *e)) {
            best = Some((inl.len(), err, t));
        }
    }
    let Some((count, _, mut t)) = best else { return Err(Error::DegenerateConfiguration) };
    if count < cfg.min_inliers.max(3) {
        return Err(Error::ConsensusFailure { inliers: count, required: cfg.min_inliers });
    }
    let mut inl = inliers_of(&t, src, dst, cfg.inlier_dist);
    for _ in 0..3 {
        let (a, b): (Vec<Vec3>, Vec<Vec3>) = inl.iter().map(|&i| (src[i], dst[i])).unzip();
        if let Ok(refit) = procrustes_align(&a, &b) {
            t = refit;
        }
        if let (true, Some(normals)) = (cfg.point_to_plane, dst_normals) {
            t = refine_point_to_plane(&t, src, dst, normals, &inl);
        }
        let next = inliers_of(&t, src, dst, cfg.inlier_dist);
        if next.len() < 3 || next == inl {
            break;
        }
        inl = next;
    }
    if inl.len() < cfg.min_inliers.max(3) {
        return Err(Error::ConsensusFailure { inliers: inl.len(), required: cfg.min_inliers });
    }
    let rms = (inl.iter().map(|&i| (t.apply(&src[i]) - dst[i]).norm_squared()).sum::<f64>() / inl.len() as f64).sqrt();
    Ok(TransformEstimate { transform: t, agreement: inl.len(), inliers: inl, rms })
}

fn pick_subset(n: usize, fraction: f64, seed: &SeedStream) -> Vec<usize> {
    let keep = ((n as f64 * fraction).round() as usize).clamp(n.min(3), n);
    let mut idx = sample(&mut seed.rng(), n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Nearest candidate patch compatible with `T q_i`: normals within
/// `normal_tol`, plane distance within `inlier_dist`, offset within
/// `assoc_radius`.
fn associate(t: &RigidTransform, q: &ViewGeometry, i: usize, x: &ViewGeometry, pool: &[usize], cfg: &ValidationConfig) -> Option<usize> {
    let p = t.apply(&q.means[i]);
    let n = t.apply_vector(&q.normals[i]);
    let cos_tol = cfg.normal_tol.cos();
    let r2 = cfg.assoc_radius * cfg.assoc_radius;
    let mut best: Option<(usize, f64)> = None;
    for &j in pool {
        let e = p - x.means[j];
        let d2 = e.norm_squared();
        if d2 > r2 || n.dot(&x.normals[j]) < cos_tol || e.dot(&x.normals[j]).abs() > cfg.inlier_dist {
            continue;
        }
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((j, d2));
        }
    }
    best.map(|b| b.0)
}

/// Re-pairs every sampled query patch by proximity under the current
/// transform and refits, a few rounds.
fn reassociate(t: RigidTransform, q: &ViewGeometry, qs: &[usize], x: &ViewGeometry, cfg: &ValidationConfig) -> (RigidTransform, Vec<(usize, usize)>) {
    let all: Vec<usize> = (0..x.len()).collect();
    let mut cur = t;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for _ in 0..6 {
        let next: Vec<(usize, usize)> = qs.iter().filter_map(|&i| associate(&cur, q, i, x, &all, cfg).map(|j| (i, j))).collect();
        if next.len() < 3 {
            pairs = next;
            break;
        }
        let src: Vec<Vec3> = next.iter().map(|&(i, _)| q.means[i]).collect();
        let dst: Vec<Vec3> = next.iter().map(|&(_, j)| x.means[j]).collect();
        let nrm: Vec<Vec3> = next.iter().map(|&(_, j)| x.normals[j]).collect();
        let idx: Vec<usize> = (0..next.len()).collect();
        cur = refine_point_to_plane(&cur, &src, &dst, &nrm, &idx);
        let done = next == pairs;
        pairs = next;
        if done {
            break;
        }
    }
    (cur, pairs)
}

/// Number of candidate patches strictly closer to `q_i` in descriptor space
/// than `x_j`.
fn descriptor_rank(q: &ViewGeometry, i: usize, x: &ViewGeometry, j: usize) -> usize {
    if is_zero(&q.descriptors[i]) || is_zero(&x.descriptors[j]) {
        return usize::MAX;
    }
    let d = desc_d2(&q.descriptors[i], &x.descriptors[j]);
    (0..x.len()).filter(|&k| !is_zero(&x.descriptors[k]) && desc_d2(&q.descriptors[i], &x.descriptors[k]) < d).count()
}

/// Associated pairs and descriptor-agreeing pairs of `t` over all query
/// patches.
pub fn support(q: &ViewGeometry, x: &ViewGeometry, t: &RigidTransform, cfg: &ValidationConfig) -> (usize, usize) {
    let all: Vec<usize> = (0..x.len()).collect();
    let pairs: Vec<(usize, usize)> = (0..q.len()).filter_map(|i| associate(t, q, i, x, &all, cfg).map(|j| (i, j))).collect();
    let agree = pairs.iter().filter(|&&(i, j)| descriptor_rank(q, i, x, j) < cfg.candidates).count();
    (pairs.len(), agree)
}

fn finish(t: RigidTransform, q: &ViewGeometry, qs: &[usize], x: &ViewGeometry, cfg: &ValidationConfig) -> Result<TransformEstimate> {
    let (t, pairs) = reassociate(t, q, qs, x, cfg);
    if pairs.len() < cfg.min_inliers {
        return Err(Error::ConsensusFailure { inliers: pairs.len(), required: cfg.min_inliers });
    }
    let rms = (pairs.iter().map(|&(i, j)| (t.apply(&q.means[i]) - x.means[j]).dot(&x.normals[j]).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt();
    let agreement = pairs.iter().filter(|&&(i, j)| descriptor_rank(q, i, x, j) < cfg.candidates).count();
    Ok(TransformEstimate { transform: t, agreement, inliers: pairs.iter().map(|p| p.0).collect(), rms })
}

/// Transform from two point-normal correspondences.
fn two_point_transform(q: &ViewGeometry, x: &ViewGeometry, a: (usize, usize), b: (usize, usize)) -> Option<RigidTransform> {
    const ARM: f64 = 0.3;
    let src = [q.means[a.0], q.means[b.0], q.means[a.0] + q.normals[a.0] * ARM, q.means[b.0] + q.normals[b.0] * ARM];
    let dst = [x.means[a.1], x.means[b.1], x.means[a.1] + x.normals[a.1] * ARM, x.means[b.1] + x.normals[b.1] * ARM];
    procrustes_align(&src, &dst).ok()
}

fn guided_estimate(q: &ViewGeometry, qs: &[usize], x: &ViewGeometry, cfg: &ValidationConfig, seed: &SeedStream) -> Result<TransformEstimate> {
    let xs: Vec<usize> = (0..x.len()).filter(|&j| !is_zero(&x.descriptors[j])).collect();
    // candidate lists per sampled query patch
    let mut cands: Vec<(usize, usize)> = Vec::new();
    for &i in qs {
        if is_zero(&q.descriptors[i]) {
            continue;
        }
        let mut d: Vec<(f64, usize)> = xs.iter().map(|&j| (desc_d2(&q.descriptors[i], &x.descriptors[j]), j)).collect();
        let m = cfg.candidates.min(d.len());
        if m == 0 {
            continue;
        }
        d.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(m);
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.extend(d.into_iter().map(|(_, j)| (i, j)));
    }
    if cands.len() < 2 {
        return Err(Error::InsufficientCorrespondences { found: cands.len() });
    }
    let cos_tol = cfg.normal_tol.cos();
    let len_tol = 3.0 * cfg.inlier_dist;
    let mut rng = seed.rng();
    let mut best: Vec<(f64, RigidTransform)> = Vec::new();
    let dense = match (&q.sketch, &x.sketch) {
        (Some(a), Some(b)) => Some((a.points().step_by(3).collect::<Vec<_>>(), b)),
        _ => None,
    };
    let keep = if dense.is_some() { cfg.hypotheses } else { 1 };
    let mut scored = 0;
    for _ in 0..cfg.ransac_iters * 20 {
        if scored >= cfg.ransac_iters {
            break;
        }
        let a = cands[rng.random_range(0..cands.len())];
        let b = cands[rng.random_range(0..cands.len())];
        if a.0 == b.0 || a.1 == b.1 {
            continue;
        }
        let dq = (q.means[a.0] - q.means[b.0]).norm();
        let dx = (x.means[a.1] - x.means[b.1]).norm();
        if dq < 0.2 || (dq - dx).abs() > len_tol {
            continue;
        }
        if (q.normals[a.0].dot(&q.normals[b.0]) - x.normals[a.1].dot(&x.normals[b.1])).abs() > 1.0 - cos_tol {
            continue;
        }
        let Some(t) = two_point_transform(q, x, a, b) else { continue };
        scored += 1;
        // support: query patches with a compatible candidate under t
        let mut support = 0;
        let mut last = usize::MAX;
        let mut counted = false;
        for &(i, j) in &cands {
            if i != last {
                last = i;
                counted = false;
            }
            if counted {
                continue;
            }
            let p = t.apply(&q.means[i]);
            let e = p - x.means[j];
            if e.norm_squared() <= cfg.assoc_radius * cfg.assoc_radius
                && e.dot(&x.normals[j]).abs() <= cfg.inlier_dist
                && t.apply_vector(&q.normals[i]).dot(&x.normals[j]) >= cos_tol
            {
                support += 1;
                counted = true;
            }
        }
        let score = match &dense {
            Some((pts, xs)) => depth_check_points(pts.iter().copied(), xs, &t, 0.08).score(),
            None => support as f64,
        };
        offer(&mut best, keep, score, t, cfg);
    }
    if best.is_empty() {
        return Err(Error::DegenerateConfiguration);
    }
    pick_by_depth(best.into_iter().map(|(_, t)| t), q, qs, x, cfg)
}

/// Keeps the `keep` best-supported hypotheses, one per pose cluster.
fn offer(best: &mut Vec<(f64, RigidTransform)>, keep: usize, support: f64, t: RigidTransform, cfg: &ValidationConfig) {
    let near = |a: &RigidTransform| {
        let d = a.inverse().compose(&t);
        d.rotation_angle() <= cfg.eps_rot && d.translation.norm() <= cfg.eps_trans
    };
    if let Some(k) = best.iter().position(|(_, a)| near(a)) {
        if support <= best[k].0 {
            return;
        }
        best.remove(k);
    }
    let at = best.partition_point(|(s, _)| *s >= support);
    if at < keep {
        best.insert(at, (support, t));
        best.truncate(keep);
    }
}

/// Refines each hypothesis; with depth sketches on both sides the one with
/// the best depth agreement wins, otherwise the first that refines.
fn pick_by_depth(
    hyps: impl Iterator<Item = RigidTransform>,
    q: &ViewGeometry,
    qs: &[usize],
    x: &ViewGeometry,
    cfg: &ValidationConfig,
) -> Result<TransformEstimate> {
    let mut best: Option<(f64, TransformEstimate)> = None;
    let mut err = None;
    for t in hyps {
        let e = match finish(t, q, qs, x, cfg) {
            Ok(mut e) => {
                if let (Some(a), Some(b)) = (&q.sketch, &x.sketch) {
                    e.transform = sketch_icp(a, b, &e.transform);
                }
                e
            }
            Err(e) => {
                err.get_or_insert(e);
                continue;
            }
        };
        let (Some(a), Some(b)) = (&q.sketch, &x.sketch) else { return Ok(e) };
        let score = depth_check(a, b, &e.transform, cfg.depth_tol).score();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, e));
        }
    }
    match (best, err) {
        (Some((_, e)), _) => Ok(e),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::DegenerateConfiguration),
    }
}

/// One-way estimate mapping `q`'s frame into `x`'s frame. Query patches
/// are randomly subsampled; the candidate side is used whole.
pub fn one_way_estimate(q: &ViewGeometry, x: &ViewGeometry, cfg: &ValidationConfig, seed: &SeedStream) -> Result<TransformEstimate> {
    let qs = pick_subset(q.len(), cfg.sample_fraction, &seed.derive("sample"));
    match cfg.matcher {
        Matcher::Guided => guided_estimate(q, &qs, x, cfg, &seed.derive("ransac")),
        Matcher::Mutual => {
            let xs: Vec<usize> = (0..x.len()).collect();
            let m = match_patches_subset(q, &qs, x, &xs, cfg.ratio);
            let src: Vec<Vec3> = m.iter().map(|&(i, _)| q.means[i]).collect();
            let dst: Vec<Vec3> = m.iter().map(|&(_, j)| x.means[j]).collect();
            let nrm: Vec<Vec3> = m.iter().map(|&(_, j)| x.normals[j]).collect();
            let e = estimate_transform(&src, &dst, Some(&nrm), cfg, &seed.derive("ransac"))?;
            if cfg.reassociate {
                finish(e.transform, q, &qs, x, cfg)
            } else {
                Ok(TransformEstimate { inliers: e.inliers.iter().map(|&k| m[k].0).collect(), ..e })
            }
        }
    }
}

/// Residual of a forward/backward pair: (rotation angle, translation).
pub fn residual(forward: &RigidTransform, backward: &RigidTransform, mode: ResidualMode) -> (f64, f64) {
    let angle = rot_log(&(forward.rotation * backward.rotation)).norm();
    let trans = match mode {
        ResidualMode::Composed => forward.compose(backward).translation.norm(),
        ResidualMode::Verbatim => (forward.translation + backward.translation).norm(),
    };
    (angle, trans)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub accepted: bool,
    /// Maps query-frame points into the candidate frame.
    pub forward: Option<RigidTransform>,
    pub backward: Option<RigidTransform>,
    pub residual_rot: f64,
    pub residual_trans: f64,
    pub inliers_forward: usize,
    pub inliers_backward: usize,
    pub agreement_forward: usize,
    pub agreement_backward: usize,
    pub depth_forward: Option<DepthCheck>,
    pub depth_backward: Option<DepthCheck>,
    pub reason: Option<String>,
}

impl ValidationReport {
    fn rejected(reason: String, fwd: Option<&TransformEstimate>) -> Self {
        Self {
            accepted: false,
            forward: fwd.map(|e| e.transform),
            backward: None,
            residual_rot: f64::INFINITY,
            residual_trans: f64::INFINITY,
            inliers_forward: fwd.map_or(0, |e| e.inliers.len()),
            inliers_backward: 0,
            agreement_forward: fwd.map_or(0, |e| e.agreement),
            agreement_backward: 0,
            depth_forward: None,
            depth_backward: None,
            reason: Some(reason),
        }
    }
}

/// Decides a candidate from residual transforms alone.
pub fn judge(forward: &RigidTransform, backward: &RigidTransform, cfg: &ValidationConfig) -> (bool, f64, f64) {
    let (r, t) = residual(forward, backward, cfg.residual);
    (r <= cfg.eps_rot && t <= cfg.eps_trans, r, t)
}

/// Estimates Q→X and X→Q independently and accepts when their composition
/// is close to the identity.
pub fn two_way_validate(q: &ViewGeometry, x: &ViewGeometry, cfg: &ValidationConfig, seed: &SeedStream) -> ValidationReport {
    let fwd = match one_way_estimate(q, x, cfg, &seed.derive("forward")) {
        Ok(e) => e,
        Err(e) => return ValidationReport::rejected(format!("forward: {e}"), None),
    };
    let bwd = match one_way_estimate(x, q, cfg, &seed.derive("backward")) {
        Ok(e) => e,
        Err(e) => return ValidationReport::rejected(format!("backward: {e}"), Some(&fwd)),
    };
    let (consistent, r, t) = judge(&fwd.transform, &bwd.transform, cfg);
    let depth = match (&q.sketch, &x.sketch) {
        (Some(a), Some(b)) => Some((
            depth_check(a, b, &fwd.transform, cfg.depth_tol),
            depth_check(b, a, &bwd.transform, cfg.depth_tol),
        )),
        _ => None,
    };
    let surfaces_agree = depth.is_none_or(|(f, b)| {
        [f, b].iter().all(|c| c.consistent_fraction() >= cfg.min_consistent && c.free_fraction() <= cfg.max_free_space)
    });
    let accepted = consistent && surfaces_agree;
    let reason = if !consistent {
        Some(format!("residual {r:.4} rad / {t:.4} m above bounds"))
    } else if !surfaces_agree {
        let (f, b) = depth.expect("checked");
        Some(format!(
            "depth disagreement: on-surface {:.2}/{:.2}, free-space {:.2}/{:.2}",
            f.consistent_fraction(),
            b.consistent_fraction(),
            f.free_fraction(),
            b.free_fraction()
        ))
    } else {
        None
    };
    ValidationReport {
        accepted,
        depth_forward: depth.map(|d| d.0),
        depth_backward: depth.map(|d| d.1),
        forward: Some(fwd.transform),
        backward: Some(bwd.transform),
        residual_rot: r,
        residual_trans: t,
        inliers_forward: fwd.inliers.len(),
        inliers_backward: bwd.inliers.len(),
        agreement_forward: fwd.agreement,
        agreement_backward: bwd.agreement,
        reason,
    }
}

/// Unit quaternion (w, x, y, z) of a rotation, for reports.
pub fn quaternion(t: &RigidTransform) -> [f64; 4] {
    let q = nalgebra::UnitQuaternion::from_matrix(&t.rotation);
    [q.w, q.i, q.j, q.k]
}

#[cfg(test)]
fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn yaw(deg: f64, t: Vec3) -> RigidTransform {
        RigidTransform::from_axis_angle(Vec3::z() * deg.to_radians(), t)
    }

    #[test]
    fn residual_cases() {
        let cfg = ValidationConfig::default();
        let id = RigidTransform::identity();
        assert_eq!(judge(&id, &id, &cfg), (true, 0.0, 0.0));
        let f = yaw(10.0, Vec3::new(1.0, 0.0, 0.0));
        let (ok, r, t) = judge(&f, &f.inverse(), &cfg);
        assert!(ok && r < 1e-9 && t < 1e-9);
        let (ok, r, _) = judge(&yaw(10.0, Vec3::zeros()), &yaw(-5.0, Vec3::zeros()), &cfg);
        assert!(!ok && (r - 5f64.to_radians()).abs() < 1e-9);
        // the literal form does not vanish for an exact inverse pair
        let (_, vt) = residual(&f, &f.inverse(), ResidualMode::Verbatim);
        assert!((vt - 2.0 * 5f64.to_radians().sin()).abs() < 1e-9);
    }

    #[test]
    fn residual_is_zero_for_inverse_pairs_and_matches_quaternion_angle() {
        let mut rng = SeedStream::new(4).rng();
        for _ in 0..1000 {
            let t = RigidTransform::from_axis_angle(random_unit(&mut rng) * rng.random_range(0.0..PI), random_unit(&mut rng) * 3.0);
            let (r, tr) = residual(&t, &t.inverse(), ResidualMode::Composed);
            assert!(r < 1e-9 && tr < 1e-9);
            let b = RigidTransform::from_axis_angle(random_unit(&mut rng) * rng.random_range(0.0..PI), Vec3::zeros());
            let (r, _) = residual(&t, &b, ResidualMode::Composed);
            let qa = nalgebra::UnitQuaternion::from_matrix(&t.rotation);
            let qb = nalgebra::UnitQuaternion::from_matrix(&b.rotation.transpose());
            assert!((r - qa.angle_to(&qb)).abs() < 1e-7);
        }
    }

    fn cloud(n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(0.5..4.0))).collect()
    }

    #[test]
    fn exact_correspondences() {
        let mut rng = SeedStream::new(1).rng();
        let src = cloud(30, &mut rng);
        let t = yaw(25.0, Vec3::new(0.3, -0.2, 0.1));
        let dst: Vec<Vec3> = src.iter().map(|p| t.apply(p)).collect();
        let e = estimate_transform(&src, &dst, None, &ValidationConfig::default(), &SeedStream::new(2)).unwrap();
        assert!(e.transform.inverse().compose(&t).rotation_angle() < 1e-6);
        assert!((e.transform.translation - t.translation).norm() < 1e-6);
        assert_eq!(e.inliers.len(), 30);
        assert!(matches!(
            estimate_transform(&src[..2], &dst[..2], None, &ValidationConfig::default(), &SeedStream::new(2)),
            Err(Error::InsufficientCorrespondences { found: 2 })
        ));
    }

    #[test]
    fn half_outliers() {
        let cfg = ValidationConfig { ransac_iters: 200, ..Default::default() };
        let mut ok = 0;
        for trial in 0..100 {
            let mut rng = SeedStream::new(100 + trial).rng();
            let src = cloud(60, &mut rng);
            let t = RigidTransform::from_axis_angle(random_unit(&mut rng) * rng.random_range(0.0..0.6), random_unit(&mut rng));
            let dst: Vec<Vec3> = src
                .iter()
                .enumerate()
                .map(|(i, p)| if i % 2 == 0 { t.apply(p) } else { Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..5.0)) })
                .collect();
            if let Ok(e) = estimate_transform(&src, &dst, None, &cfg, &SeedStream::new(trial)) {
                let err = e.transform.inverse().compose(&t);
                if err.rotation_angle().to_degrees() <= 0.5 && (e.transform.translation - t.translation).norm() <= 0.01 {
                    ok += 1;
                }
            }
        }
        assert!(ok >= 99, "{ok}/100");
    }

    #[test]
    fn point_to_plane_refit_recovers_planar_offsets() {
        // three orthogonal planes; target means slide within their planes
        let mut rng = SeedStream::new(3).rng();
        let t = yaw(8.0, Vec3::new(0.1, 0.05, -0.02));
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut nrm = Vec::new();
        for k in 0..3 {
            for _ in 0..15 {
                let mut p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0));
                p[k] = if k == 2 { 3.0 } else { 1.5 };
                let mut n = Vec3::zeros();
                n[k] = -1.0;
                let slide = {
                    let mut s = Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
                    s[k] = 0.0;
                    s
                };
                let q = t.apply(&p) + t.apply_vector(&slide);
                src.push(p);
                dst.push(q);
                nrm.push(t.apply_vector(&n));
            }
        }
        let cfg = ValidationConfig { min_inliers: 12, inlier_dist: 0.1, ..Default::default() };
        let e = estimate_transform(&src, &dst, Some(&nrm), &cfg, &SeedStream::new(0)).unwrap();
        let err = e.transform.inverse().compose(&t);
        let plain = estimate_transform(&src, &dst, None, &ValidationConfig { point_to_plane: false, ..cfg }, &SeedStream::new(0)).unwrap();
        let perr = plain.transform.inverse().compose(&t);
        assert!(err.rotation_angle().to_degrees() < 0.2 && err.translation.norm() < 0.003, "{err:?}");
        assert!(err.translation.norm() < perr.translation.norm());
    }

    fn random_geometry(n: usize, seed: u64) -> ViewGeometry {
        let mut rng = SeedStream::new(seed).rng();
        ViewGeometry {
            means: cloud(n, &mut rng),
            normals: (0..n).map(|_| random_unit(&mut rng)).collect(),
            descriptors: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
            sketch: None,
        }
    }

    #[test]
    fn sketch_round_trip_and_depth_check() {
        use crate::scene::rooms::{generate_room, look_pose};
        use crate::scene::{depth_to_cloud, synth_scene, CameraIntrinsics, SynthOptions};
        let room = generate_room(2);
        let opts = SynthOptions { intrinsics: CameraIntrinsics::desk(), ..Default::default() };
        let frame = synth_scene(&room.spec, &look_pose(Vec3::new(0.0, 0.0, 1.4), 0.3, -0.3), &opts).unwrap();
        let sk = DepthSketch::from_cloud(&depth_to_cloud(&frame).unwrap()).unwrap();
        assert_eq!(sk.intrinsics.width, 40);
        assert!(sk.points().count() > 1000);
        let mut g = random_geometry(10, 9);
        g.sketch = Some(sk.clone());
        assert_eq!(ViewGeometry::from_bytes(&g.to_bytes()).unwrap(), g);
        let id = depth_check(&sk, &sk, &RigidTransform::identity(), 0.03);
        assert!(id.consistent_fraction() > 0.99 && id.free_space == 0);
        let off = depth_check(&sk, &sk, &yaw(0.0, Vec3::new(0.0, 0.0, -0.5)), 0.03);
        assert!(off.consistent_fraction() < 0.2 && off.free_fraction() > 0.5, "{off:?}");
        // an unorganized cloud has no sketch
        assert!(DepthSketch::from_cloud(&PointCloud::from_points(vec![Vec3::z()])).is_none());
    }

    #[test]
    fn identical_views_match_themselves_and_validate() {
        let g = random_geometry(80, 1);
        let m = match_patches(&g, &g, 0.9);
        assert_eq!(m.len(), 80);
        assert!(m.iter().all(|(a, b)| a == b));
        let rep = two_way_validate(&g, &g, &ValidationConfig::default(), &SeedStream::new(5));
        assert!(rep.accepted, "{rep:?}");
        assert!(rep.residual_rot < 1e-9 && rep.residual_trans < 1e-9);
    }

    #[test]
    fn transformed_view_validates_and_unrelated_views_do_not() {
        let q = random_geometry(120, 2);
        let t = yaw(20.0, Vec3::new(0.4, 0.1, 0.0));
        let x = ViewGeometry {
            means: q.means.iter().map(|p| t.apply(p)).collect(),
            normals: q.normals.iter().map(|n| t.apply_vector(n)).collect(),
            descriptors: q.descriptors.clone(),
            sketch: None,
        };
        let rep = two_way_validate(&q, &x, &ValidationConfig::default(), &SeedStream::new(1));
        assert!(rep.accepted);
        assert!(rep.forward.unwrap().inverse().compose(&t).rotation_angle() < 1e-6);
        let other = random_geometry(120, 3);
        assert!(!two_way_validate(&q, &other, &ValidationConfig::default(), &SeedStream::new(1)).accepted);
    }

    #[test]
    fn geometry_bytes_round_trip() {
        let g = random_geometry(10, 4);
        assert_eq!(ViewGeometry::from_bytes(&g.to_bytes()).unwrap(), g);
        assert!(ViewGeometry::from_bytes(&g.to_bytes()[..50]).is_err());
    }
}
