//! Evaluation: pose error, coverage, diversity, sparse databases, reports,
//! and synthetic room datasets.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{median, Pose, SeedStream, Vec3};
use crate::pipeline::{relocalize, EncodedView, PipelineConfig, Variant};
use crate::retrieval::SignatureDatabase;
use crate::scene::rooms::{generate_room, look_pose, random_pose, ring_trajectory, CameraRig, Room};
use crate::scene::{synth_scene, CameraIntrinsics, PointCloud, RangeFrame, SynthOptions};

/// Geodesic angle (deg) and translation (m) of est⁻¹ ∘ gt.
pub fn pose_error(est: &Pose, gt: &Pose) -> (f64, f64) {
    let r = est.inverse().compose(gt);
    (r.rotation_angle().to_degrees(), r.translation.norm())
}

/// Mean and population standard deviation of the distances from the query
/// position to each retrieved position.
pub fn diversity_stats(query: &Pose, retrieved: &[Pose]) -> (f64, f64) {
    if retrieved.is_empty() {
        return (0.0, 0.0);
    }
    let d: Vec<f64> = retrieved.iter().map(|p| (p.translation - query.translation).norm()).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Distinct occupied cells of the union of world-frame points.
pub fn voxel_coverage(views: &[(&PointCloud, &Pose)], voxel: f64) -> usize {
    let mut cells = HashSet::new();
    for (cloud, pose) in views {
        for p in &cloud.points {
            let w = pose.apply(p);
            cells.insert(((w.x / voxel).floor() as i64, (w.y / voxel).floor() as i64, (w.z / voxel).floor() as i64));
        }
    }
    cells.len()
}

/// Indices kept when a sequence of `n` frames is thinned to one in `rate`:
/// ⌈n/rate⌉ frames at uniform intervals starting at 0.
pub fn sparsify(n: usize, rate: usize) -> Vec<usize> {
    let rate = rate.max(1);
    (0..n.div_ceil(rate)).map(|i| i * rate).collect()
}

/// The sequence a frame id belongs to: everything before its last `/`.
pub fn sequence_of(frame_id: &str) -> &str {
    frame_id.rsplit_once('/').map_or("", |(s, _)| s)
}

/// Thins every sequence of a database to one frame in `rate`, keeping the
/// entries [`sparsify`] selects in insertion order within the sequence.
pub fn sparsify_database(db: &SignatureDatabase, rate: usize) -> Result<SignatureDatabase> {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, e) in db.entries().iter().enumerate() {
        let seq = sequence_of(&e.frame_id);
        match groups.iter_mut().find(|(s, _)| *s == seq) {
            Some((_, v)) => v.push(i),
            None => groups.push((seq, vec![i])),
        }
    }
    let keep: Vec<usize> = groups.iter().flat_map(|(_, v)| sparsify(v.len(), rate).into_iter().map(|j| v[j])).collect();
    db.subset(&keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub variant: Variant,
    pub top_result: Option<String>,
    /// deg
    pub pose_error_rot: Option<f64>,
    /// m
    pub pose_error_trans: Option<f64>,
    pub accepted: bool,
    pub success: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub records: Vec<EvalRecord>,
    pub accuracy: f64,
    /// mean and stddev of retrieved-view distances to the query
    pub diversity: Option<(f64, f64)>,
    pub voxels: Option<f64>,
}

impl EvalReport {
    pub fn from_records(variant: Variant, records: Vec<EvalRecord>) -> Self {
        let n = records.len();
        let ok = records.iter().filter(|r| r.success).count();
        let accuracy = if n == 0 { 0.0 } else { ok as f64 / n as f64 };
        Self { variant, records, accuracy, diversity: None, voxels: None }
    }

    /// One JSON object per query, then one summary object.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "variant": self.variant,
            "queries": self.records.len(),
            "accuracy": self.accuracy,
            "diversity": self.diversity,
            "voxels": self.voxels,
        });
        s.push_str(&summary.to_string());
        s.push('\n');
        s
    }

    pub fn summary_table(&self) -> String {
        let errs = |f: fn(&EvalRecord) -> Option<f64>| {
            let v: Vec<f64> = self.records.iter().filter_map(f).collect();
            median(&v).map_or("-".to_string(), |m| format!("{m:.3}"))
        };
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {:>10} {:>10} {:>12} {:>12}", "variant", "queries", "localized", "accuracy%", "med.rot.deg", "med.trans.m");
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>10} {:>10.1} {:>12} {:>12}",
            self.variant.to_string(),
            self.records.len(),
            self.records.iter().filter(|r| r.success).count(),
            100.0 * self.accuracy,
            errs(|r| r.pose_error_rot),
            errs(|r| r.pose_error_trans),
        );
        s
    }
}

/// Relocalizes every query in parallel and scores it against its pose.
/// Diversity averages, over queries with a pose, the spread of the first
/// `k_dpp` retrievals (R) or the DPP selection (DR, VDR).
pub fn evaluate(queries: &[(EncodedView, Option<Pose>)], db: &SignatureDatabase, cfg: &PipelineConfig, variant: Variant) -> Result<EvalReport> {
    let rows: Result<Vec<(EvalRecord, Option<(f64, f64)>)>> = queries
        .par_iter()
        .map(|(q, gt)| {
            let rel = relocalize(q, db, cfg, variant)?;
            let est = rel.world_pose(db);
            let err = match (est, gt) {
                (Some(e), Some(g)) => Some(pose_error(&e, g)),
                _ => None,
            };
            let picked = if variant == Variant::R { &rel.retrieval.hits[..rel.retrieval.hits.len().min(cfg.k_dpp)] } else { &rel.diversified[..] };
            let poses: Option<Vec<Pose>> = picked.iter().map(|h| db.pose(h.index).copied()).collect();
            let spread = match (gt, poses) {
                (Some(g), Some(p)) if !p.is_empty() => Some(diversity_stats(g, &p)),
                _ => None,
            };
            let accepted = rel.chosen.is_some() && rel.failure.is_none();
            let success = accepted && err.is_some_and(|(r, t)| r <= cfg.success_rot_deg && t <= cfg.success_trans);
            let rec = EvalRecord {
                query_id: rel.query_id,
                variant,
                top_result: rel.chosen.map(|h| h.frame_id),
                pose_error_rot: err.map(|e| e.0),
                pose_error_trans: err.map(|e| e.1),
                accepted,
                success,
                failure: rel.failure,
            };
            Ok((rec, spread))
        })
        .collect();
    let (records, spreads): (Vec<_>, Vec<_>) = rows?.into_iter().unzip();
    let spreads: Vec<(f64, f64)> = spreads.into_iter().flatten().collect();
    let mut report = EvalReport::from_records(variant, records);
    if !spreads.is_empty() {
        let n = spreads.len() as f64;
        report.diversity = Some((spreads.iter().map(|s| s.0).sum::<f64>() / n, spreads.iter().map(|s| s.1).sum::<f64>() / n));
    }
    Ok(report)
}

/// A generated room with database and held-out query frames.
#[derive(Clone, Debug)]
pub struct RoomDataset {
    pub room: Room,
    pub database: Vec<RangeFrame>,
    pub queries: Vec<RangeFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoomDatasetConfig {
    pub db_frames: usize,
    pub queries: usize,
    pub rig: CameraRig,
    pub intrinsics: CameraIntrinsics,
    /// depth noise, m
    pub noise: f64,
}

impl Default for RoomDatasetConfig {
    fn default() -> Self {
        Self { db_frames: 60, queries: 20, rig: CameraRig::default(), intrinsics: CameraIntrinsics::desk(), noise: 0.0 }
    }
}

pub fn render(room: &Room, pose: &Pose, id: String, cfg: &RoomDatasetConfig, noise_seed: u64) -> Result<RangeFrame> {
    let opts = SynthOptions { intrinsics: cfg.intrinsics, noise_sigma: cfg.noise, noise_seed, frame_id: id, ..SynthOptions::default() };
    synth_scene(&room.spec, pose, &opts)
}

/// Database frames on a ring trajectory and queries at random rig poses.
pub fn room_dataset(seed: u64, name: &str, cfg: &RoomDatasetConfig) -> Result<RoomDataset> {
    let s = SeedStream::new(seed).derive(name);
    let room = generate_room(s.derive("room").seed());
    let ring = ring_trajectory(cfg.db_frames, &cfg.rig, s.derive("ring").seed());
    let mut rng = s.derive("queries").rng();
    let qposes: Vec<Pose> = (0..cfg.queries).map(|_| random_pose(&cfg.rig, &mut rng)).collect();
    let database = ring
        .par_iter()
        .enumerate()
        .map(|(i, p)| render(&room, p, format!("{name}/db-{i:03}"), cfg, s.derive("noise-db").derive(i).seed()))
        .collect::<Result<Vec<_>>>()?;
    let queries = qposes
        .par_iter()
        .enumerate()
        .map(|(i, p)| render(&room, p, format!("{name}/q-{i:03}"), cfg, s.derive("noise-q").derive(i).seed()))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoomDataset { room, database, queries })
}

/// A room whose database frames come in tight clusters: `clusters` ring
/// poses, each repeated `per_cluster` times with a few centimeters and
/// degrees of jitter. Queries are drawn as in [`room_dataset`].
pub fn clustered_dataset(seed: u64, name: &str, clusters: usize, per_cluster: usize, cfg: &RoomDatasetConfig) -> Result<RoomDataset> {
    let s = SeedStream::new(seed).derive(name);
    let room = generate_room(s.derive("room").seed());
    let centers = ring_trajectory(clusters, &cfg.rig, s.derive("ring").seed());
    let mut rng = s.derive("jitter").rng();
    let mut poses = Vec::with_capacity(clusters * per_cluster);
    for c in &centers {
        for _ in 0..per_cluster {
            let rot = Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
            let mut p = c.compose(&Pose::from_axis_angle(rot, Vec3::zeros()));
            p.translation += Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
            poses.push(p);
        }
    }
    let mut qrng = s.derive("queries").rng();
    let qposes: Vec<Pose> = (0..cfg.queries).map(|_| random_pose(&cfg.rig, &mut qrng)).collect();
    let database = poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| render(&room, p, format!("{name}/db-{i:03}"), cfg, s.derive("noise-db").derive(i).seed()))
        .collect::<Result<Vec<_>>>()?;
    let queries = qposes
        .par_iter()
        .enumerate()
        .map(|(i, p)| render(&room, p, format!("{name}/q-{i:03}"), cfg, s.derive("noise-q").derive(i).seed()))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoomDataset { room, database, queries })
}

/// Fraction of `a`'s valid pixels whose surface point projects into `b`'s
/// image where `b` sees the same surface (depth agrees within `tol` plus 1%).
/// Both frames need ground-truth poses.
pub fn view_overlap(a: &RangeFrame, b: &RangeFrame, tol: f64) -> Result<f64> {
    let (Some(pa), Some(pb)) = (a.pose_gt, b.pose_gt) else {
        return Err(Error::InvalidInput("overlap needs ground-truth poses".into()));
    };
    let to_b = pb.inverse().compose(&pa);
    let (ka, kb) = (&a.intrinsics, &b.intrinsics);
    let (mut valid, mut seen) = (0usize, 0usize);
    for v in 0..ka.height {
        for u in 0..ka.width {
            let d = a.depth_at(u, v);
            if d == 0 {
                continue;
            }
            valid += 1;
            let p = to_b.apply(&(ka.ray(u as f64, v as f64) * (d as f64 * ka.depth_scale)));
            let Some((x, y)) = kb.project(&p) else { continue };
            let (x, y) = (x.round(), y.round());
            if x < 0.0 || y < 0.0 || x >= kb.width as f64 || y >= kb.height as f64 {
                continue;
            }
            let db = b.depth_at(x as usize, y as usize);
            if db != 0 && (db as f64 * kb.depth_scale - p.z).abs() <= tol + 0.01 * p.z {
                seen += 1;
            }
        }
    }
    Ok(if valid == 0 { 0.0 } else { seen as f64 / valid as f64 })
}

/// Camera views of several rooms with positive (overlapping, nearby) and
/// negative (disjoint) pairs for validation experiments.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub rooms: Vec<Room>,
    /// (room index, camera pose) per view
    pub views: Vec<(usize, Pose)>,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSetConfig {
    pub positives: usize,
    pub negatives: usize,
    /// positive pairs drawn per room
    pub per_room: usize,
    pub max_rot: f64,
    pub max_trans: f64,
    pub min_overlap: f64,
    pub rig: CameraRig,
    pub intrinsics: CameraIntrinsics,
}

impl Default for PairSetConfig {
    fn default() -> Self {
        Self {
            positives: 200,
            negatives: 200,
            per_room: 40,
            max_rot: 30f64.to_radians(),
            max_trans: 1.0,
            min_overlap: 0.4,
            rig: CameraRig::default(),
            intrinsics: CameraIntrinsics::desk(),
        }
    }
}

const OVERLAP_TOL: f64 = 0.02;

impl PairSet {
    /// Each room holds a random walk of views; consecutive views form the
    /// positives. Negatives pair views of one room whose overlap is zero in
    /// both directions, topped up with pairs from different rooms.
    pub fn generate(seed: u64, cfg: &PairSetConfig) -> Result<Self> {
        let s = SeedStream::new(seed).derive("pairs");
        let n_rooms = cfg.positives.div_ceil(cfg.per_room.max(1)).max(2);
        let mut rooms = Vec::new();
        let mut views = Vec::new();
        let mut frames = Vec::new();
        let mut positives = Vec::new();
        let opts = SynthOptions { intrinsics: cfg.intrinsics, ..SynthOptions::default() };
        for r in 0..n_rooms {
            let room = generate_room(s.derive("room").derive(r).seed());
            let mut rng = s.derive("walk").derive(r).rng();
            let want = cfg.per_room.min(cfg.positives - positives.len().min(cfg.positives));
            let mut pose = random_pose(&cfg.rig, &mut rng);
            let mut frame = synth_scene(&room.spec, &pose, &opts)?.with_pose(pose);
            views.push((r, pose));
            frames.push(frame.clone());
            let mut made = 0;
            let mut attempts = 0;
            while made < want {
                attempts += 1;
                if attempts > 200 * cfg.per_room.max(1) {
                    return Err(Error::InvalidInput("could not place overlapping views".into()));
                }
                let cand = step_pose(&pose, &cfg.rig, cfg.max_rot, &mut rng);
                let rel = pose.inverse().compose(&cand);
                if rel.rotation_angle() > cfg.max_rot || rel.translation.norm() > cfg.max_trans {
                    continue;
                }
                let next = synth_scene(&room.spec, &cand, &opts)?.with_pose(cand);
                if view_overlap(&frame, &next, OVERLAP_TOL)?.min(view_overlap(&next, &frame, OVERLAP_TOL)?) < cfg.min_overlap {
                    continue;
                }
                positives.push((views.len() - 1, views.len()));
                views.push((r, cand));
                frames.push(next.clone());
                pose = cand;
                frame = next;
                made += 1;
            }
            rooms.push(room);
        }

        let mut rng = s.derive("negatives").rng();
        let mut disjoint = Vec::new();
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                if views[i].0 == views[j].0
                    && view_overlap(&frames[i], &frames[j], OVERLAP_TOL)? == 0.0
                    && view_overlap(&frames[j], &frames[i], OVERLAP_TOL)? == 0.0
                {
                    disjoint.push((i, j));
                }
            }
        }
        let take = cfg.negatives.min(disjoint.len());
        let mut negatives: Vec<(usize, usize)> =
            rand::seq::index::sample(&mut rng, disjoint.len(), take).into_iter().map(|k| disjoint[k]).collect();
        while negatives.len() < cfg.negatives {
            let i = rng.random_range(0..views.len());
            let j = rng.random_range(0..views.len());
            if views[i].0 != views[j].0 {
                negatives.push((i, j));
            }
        }
        Ok(Self { rooms, views, positives, negatives, intrinsics: cfg.intrinsics })
    }

    /// Renders every view, with depth noise `sigma` (m) when positive.
    pub fn render(&self, sigma: f64, seed: u64) -> Result<Vec<RangeFrame>> {
        let s = SeedStream::new(seed).derive("pair-noise");
        self.views
            .par_iter()
            .enumerate()
            .map(|(i, (r, pose))| {
                let opts = SynthOptions {
                    intrinsics: self.intrinsics,
                    noise_sigma: sigma,
                    noise_seed: s.derive(i).seed(),
                    frame_id: format!("room{r}/v-{i:03}"),
                    ..SynthOptions::default()
                };
                Ok(synth_scene(&self.rooms[*r].spec, pose, &opts)?.with_pose(*pose))
            })
            .collect()
    }
}

/// A nearby pose: yaw and pitch perturbed by up to `max_rot`, position
/// resampled in the rig region.
fn step_pose<R: Rng>(from: &Pose, rig: &CameraRig, max_rot: f64, rng: &mut R) -> Pose {
    let fwd = from.apply_vector(&Vec3::z());
    let yaw = fwd.y.atan2(fwd.x) + rng.random_range(-max_rot..max_rot);
    let pitch = rng.random_range(rig.pitch.0..rig.pitch.1);
    let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let r = rig.radius * rng.random::<f64>().sqrt();
    let pos = Vec3::new(r * phase.cos(), r * phase.sin(), rng.random_range(rig.height.0..rig.height.1));
    look_pose(pos, yaw, pitch)
}
