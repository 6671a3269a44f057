//! Rigid-invariant pairwise properties between surface patches.
//!
//! For a patch μ and a neighbor α with `r = l_α − l_μ`, the local frame is
//! `û = r/‖r‖`, `v̂ = normalize(n̂_μ − (n̂_μ·û)û)`, `ŵ = û × v̂`, and the
//! 13 components are
//!
//! ```text
//! θ(n̂_α,n̂_μ)  θ(û,n̂_μ)  θ(û,n̂_α)  r·n̂_μ  n̂_α·û  n̂_α·v̂  n̂_α·ŵ
//! r·(n̂_α×n̂_μ)  ‖r‖  ‖r‖·sgn(n̂_μ·û)  ‖r‖·sgn(n̂_α·û)  ‖r‖·sgn(n̂_α·v̂)  ‖r‖·sgn(n̂_α·ŵ)
//! ```
//!
//! where `sgn` is zero within `eps_theta` of perpendicular.

use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeedStream, Vec3};
use crate::segmentation::{PatchSet, SegmentationHierarchy, SurfacePatch};

pub const RAW_DIM: usize = 13;
pub type RawFeature = [f64; RAW_DIM];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalBasis {
    pub u: Vec3,
    pub v: Vec3,
    pub w: Vec3,
}

pub fn gram_schmidt_basis(n_mu: &Vec3, r: &Vec3) -> Result<LocalBasis> {
    let len = r.norm();
    if !(len > 1e-6) {
        return Err(Error::DegenerateBasis);
    }
    let u = r / len;
    let c = n_mu.dot(&u);
    if !(c.abs() < 1.0 - 1e-6) {
        return Err(Error::DegenerateBasis);
    }
    let v = (n_mu - u * c).normalize();
    Ok(LocalBasis { u, v, w: u.cross(&v) })
}

/// Sign of `a`, or 0 when `acos(a)` is within `eps_theta` of π/2.
pub fn robust_signum(a: f64, eps_theta: f64) -> f64 {
    if a.abs() <= eps_theta.sin() {
        0.0
    } else {
        a.signum()
    }
}

fn angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// The 13 properties of α relative to μ from means and unit normals.
pub fn pair_feature_raw(l_mu: &Vec3, n_mu: &Vec3, l_a: &Vec3, n_a: &Vec3, eps_theta: f64) -> Result<RawFeature> {
    let r = l_a - l_mu;
    let b = gram_schmidt_basis(n_mu, &r)?;
    let d = r.norm();
    let (au, av, aw) = (n_a.dot(&b.u), n_a.dot(&b.v), n_a.dot(&b.w));
    let sg = |x: f64| d * robust_signum(x, eps_theta);
    Ok([
        angle(n_a, n_mu),
        angle(&b.u, n_mu),
        angle(&b.u, n_a),
        r.dot(n_mu),
        au,
        av,
        aw,
        r.dot(&n_a.cross(n_mu)),
        d,
        sg(n_mu.dot(&b.u)),
        sg(au),
        sg(av),
        sg(aw),
    ])
}

pub fn pair_feature(mu: &SurfacePatch, alpha: &SurfacePatch, cfg: &FeatureConfig) -> Result<RawFeature> {
    pair_feature_raw(&mu.mean, &mu.normal, &alpha.mean, &alpha.normal, cfg.eps_theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// m
    pub neighbor_radius: f64,
    /// rad
    pub eps_theta: f64,
    pub max_neighbors: usize,
    pub patch_sample_fraction: f64,
    pub neighbor_sample_fraction: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            neighbor_radius: 3.0,
            eps_theta: 0.06,
            max_neighbors: 64,
            patch_sample_fraction: 1.0,
            neighbor_sample_fraction: 1.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |f: f64| f > 0.0 && f <= 1.0;
        if self.neighbor_radius > 0.0
            && self.eps_theta > 0.0
            && self.max_neighbors > 0
            && frac(self.patch_sample_fraction)
            && frac(self.neighbor_sample_fraction)
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("features: {self:?}")))
        }
    }
}

fn subsample(n: usize, fraction: f64, cap: usize, seed: &SeedStream) -> Vec<usize> {
    let keep = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 0), n).min(cap);
    if keep == n {
        return (0..n).collect();
    }
    let mut idx = sample(&mut seed.rng(), n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Features of patch `mu` against every other patch of `level` within the
/// neighbor radius, subsampled and capped. Returns (feature, neighbor id)
/// pairs; colinear pairs are skipped.
pub fn patch_feature_set(mu: usize, level: &PatchSet, cfg: &FeatureConfig, seed: &SeedStream) -> Vec<(RawFeature, u32)> {
    let Some(p) = level.patches.get(mu) else { return Vec::new() };
    let r2 = cfg.neighbor_radius * cfg.neighbor_radius;
    let cands: Vec<usize> = (0..level.len())
        .filter(|&a| a != mu && (level.patches[a].mean - p.mean).norm_squared() <= r2)
        .collect();
    subsample(cands.len(), cfg.neighbor_sample_fraction, cfg.max_neighbors, seed)
        .into_iter()
        .filter_map(|j| {
            let a = cands[j];
            pair_feature(p, &level.patches[a], cfg).ok().map(|f| (f, a as u32))
        })
        .collect()
}

/// Aggregated features of one hierarchy level with (patch, neighbor)
/// provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelFeatures {
    pub features: Vec<RawFeature>,
    pub provenance: Vec<(u32, u32)>,
}

impl LevelFeatures {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn level_features(level: &PatchSet, cfg: &FeatureConfig, seed: &SeedStream) -> LevelFeatures {
    let mut out = LevelFeatures::default();
    for mu in subsample(level.len(), cfg.patch_sample_fraction, usize::MAX, &seed.derive("patches")) {
        for (f, a) in patch_feature_set(mu, level, cfg, &seed.derive(mu)) {
            out.features.push(f);
            out.provenance.push((mu as u32, a));
        }
    }
    out
}

pub fn frame_feature_sets(hier: &SegmentationHierarchy, cfg: &FeatureConfig, seed: &SeedStream) -> Vec<LevelFeatures> {
    hier.levels
        .iter()
        .enumerate()
        .map(|(h, level)| level_features(level, cfg, &seed.derive(format!("level-{}", h + 1))))
        .collect()
}

const DUMP_MAGIC: &str = "scenesig-features 1";

/// Text dump: a header, then per level `level <h> rows <n>` followed by rows
/// of `patch neighbor f1 .. f13`.
pub fn write_feature_dump(frame_id: &str, levels: &[LevelFeatures]) -> String {
    let mut s = format!("{DUMP_MAGIC}\nframe_id {frame_id}\nlevels {}\n", levels.len());
    for (h, level) in levels.iter().enumerate() {
        let _ = writeln!(s, "level {} rows {}", h + 1, level.len());
        for (f, (p, a)) in level.features.iter().zip(&level.provenance) {
            let _ = write!(s, "{p} {a}");
            for x in f {
                let _ = write!(s, " {x:?}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn parse_feature_dump(text: &str) -> Result<(String, Vec<LevelFeatures>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let mut next = || lines.next().ok_or_else(|| Error::parse(0, "unexpected end of feature dump"));
    let (ln, l) = next()?;
    if l != DUMP_MAGIC {
        return Err(Error::parse(ln, "not a feature dump"));
    }
    let (ln, l) = next()?;
    let frame_id = l.strip_prefix("frame_id").ok_or_else(|| Error::parse(ln, "expected frame_id"))?.trim().to_string();
    let (ln, l) = next()?;
    let h: usize = l
        .strip_prefix("levels")
        .and_then(|r| r.trim().parse().ok())
        .ok_or_else(|| Error::parse(ln, "expected levels"))?;
    let mut levels = Vec::new();
    for expect in 1..=h {
        let (ln, l) = next()?;
        let t: Vec<&str> = l.split_whitespace().collect();
        let rows: usize = match t.as_slice() {
            ["level", lv, "rows", n] if lv.parse() == Ok(expect) => n.parse().map_err(|_| Error::parse(ln, "bad row count"))?,
            _ => return Err(Error::parse(ln, format!("expected `level {expect} rows <n>`"))),
        };
        let mut level = LevelFeatures::default();
        for _ in 0..rows {
            let (ln, l) = next()?;
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 2 + RAW_DIM {
                return Err(Error::parse(ln, format!("expected {} columns, found {}", 2 + RAW_DIM, t.len())));
            }
            let id = |s: &str| s.parse::<u32>().map_err(|_| Error::parse(ln, format!("bad id {s:?}")));
            level.provenance.push((id(t[0])?, id(t[1])?));
            let mut f = [0.0; RAW_DIM];
            for (x, s) in f.iter_mut().zip(&t[2..]) {
                *x = s.parse().map_err(|_| Error::parse(ln, format!("bad value {s:?}")))?;
            }
            level.features.push(f);
        }
        levels.push(level);
    }
    if let Ok((ln, _)) = next() {
        return Err(Error::parse(ln, "trailing content"));
    }
    Ok((frame_id, levels))
}
