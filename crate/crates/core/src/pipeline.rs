//! End-to-end orchestration: configuration, training, per-frame encoding
//! and relocalization variants.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpp::{diversify, DppConfig};
use crate::error::{Error, Result};
use crate::feature_space::{
    fit_gmm, fit_ica, load_gmm, load_ica, model_fingerprint, GmmConfig, GmmModel, IcaConfig, IcaModel, PosteriorMode,
    ProjectedFeature, PROJ_DIM,
};
use crate::features::{frame_feature_sets, FeatureConfig, LevelFeatures, RawFeature};
use crate::fv::{encode_view, Signature};
use crate::numerics::{fnv1a, RigidTransform, SeedStream};
use crate::retrieval::{Hit, RetrievalSet, SearchMethod, SignatureDatabase};
use crate::scene::{depth_to_cloud, estimate_normals, CameraIntrinsics, PointCloud, RangeFrame};
use crate::segmentation::{segment_view, SegmentationConfig, SegmentationHierarchy};
use crate::validation::{describe_view, DepthSketch, one_way_estimate, two_way_validate, ValidationConfig, ValidationReport, ViewGeometry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// top-1 retrieval
    R,
    /// first DPP pick
    DR,
    /// first validated DPP pick
    #[default]
    VDR,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R" => Ok(Variant::R),
            "DR" => Ok(Variant::DR),
            "VDR" => Ok(Variant::VDR),
            _ => Err(Error::InvalidConfig(format!("unknown variant {s:?} (R, DR or VDR)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::R => "R",
            Variant::DR => "DR",
            Variant::VDR => "VDR",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub ica: Option<PathBuf>,
    pub gmm: Option<PathBuf>,
    pub db: Option<PathBuf>,
}

/// Kernel parameters of the diversification step; unset values are tuned
/// per retrieval set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DppParams {
    pub sigma: Option<f64>,
    pub omega: Option<f64>,
    pub kappa: f64,
}

impl Default for DppParams {
    fn default() -> Self {
        Self { sigma: None, omega: None, kappa: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// retrieval set size
    pub k: usize,
    pub k_dpp: usize,
    pub variant: Variant,
    /// m
    pub normal_radius: f64,
    pub posterior: PosteriorMode,
    /// voxel edge for coverage, m
    pub voxel: f64,
    /// 5 cm / 5 deg by default
    pub success_trans: f64,
    pub success_rot_deg: f64,
    pub intrinsics: Option<CameraIntrinsics>,
    pub paths: Paths,
    pub segmentation: SegmentationConfig,
    pub features: FeatureConfig,
    pub ica: IcaConfig,
    pub gmm: GmmConfig,
    pub validation: ValidationConfig,
    pub dpp: DppParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 20,
            k_dpp: 5,
            variant: Variant::VDR,
            normal_radius: crate::scene::DEFAULT_NORMAL_RADIUS,
            posterior: PosteriorMode::Weighted,
            voxel: 0.08,
            success_trans: 0.05,
            success_rot_deg: 5.0,
            intrinsics: None,
            paths: Paths::default(),
            segmentation: SegmentationConfig::default(),
            features: FeatureConfig::default(),
            ica: IcaConfig::default(),
            gmm: GmmConfig::default(),
            validation: ValidationConfig::default(),
            dpp: DppParams::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings sized for 160×120 synthetic frames.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.intrinsics = Some(CameraIntrinsics::desk());
        c.segmentation.base_target = 400;
        c.validation.level = 1;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k == 0 || self.k_dpp == 0 {
            return bad("k and k_dpp must be positive");
        }
        if !(self.normal_radius > 0.0 && self.voxel > 0.0 && self.success_trans > 0.0 && self.success_rot_deg > 0.0) {
            return bad("normal_radius, voxel and success bounds must be positive");
        }
        if let Some(k) = &self.intrinsics {
            k.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        self.segmentation.validate()?;
        self.features.validate()?;
        self.dpp_config().validate()?;
        self.validation.validate()?;
        if self.validation.level > self.segmentation.levels {
            return bad("validation level exceeds the hierarchy depth");
        }
        if self.gmm.components == 0 {
            return bad("gmm components must be positive");
        }
        Ok(())
    }

    pub fn dpp_config(&self) -> DppConfig {
        DppConfig { k: self.k_dpp, sigma: self.dpp.sigma, omega: self.dpp.omega, kappa: self.dpp.kappa }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Loads the models named in `paths`.
    pub fn load_models(&self) -> Result<(IcaModel, GmmModel)> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone().ok_or_else(|| Error::InvalidConfig(format!("paths.{what} is not set")))
        };
        Ok((load_ica(&need(&self.paths.ica, "ica")?)?, load_gmm(&need(&self.paths.gmm, "gmm")?)?))
    }
}

/// Seed for a view, derived from its content so that identical depth gives
/// identical output whatever the frame is called.
pub fn view_seed(root: u64, cloud: &PointCloud) -> SeedStream {
    let mut bytes = Vec::with_capacity(cloud.len() * 24);
    for p in &cloud.points {
        for v in p.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    SeedStream::new(root).derive("view").derive(format!("{:016x}", fnv1a(&bytes)))
}

/// Back-projection plus normals.
pub fn frame_cloud(frame: &RangeFrame, cfg: &PipelineConfig) -> Result<PointCloud> {
    estimate_normals(&depth_to_cloud(frame)?, cfg.normal_radius)
}

/// Segmentation and raw features of one view.
#[derive(Clone, Debug)]
pub struct ViewFeatures {
    pub frame_id: String,
    pub cloud: PointCloud,
    pub hierarchy: SegmentationHierarchy,
    pub features: Vec<LevelFeatures>,
}

pub fn extract_view(frame_id: &str, cloud: PointCloud, cfg: &PipelineConfig) -> Result<ViewFeatures> {
    let seed = view_seed(cfg.seed, &cloud);
    let hierarchy = segment_view(&cloud, &cfg.segmentation, &seed.derive("segmentation"))?;
    let features = frame_feature_sets(&hierarchy, &cfg.features, &seed.derive("features"));
    Ok(ViewFeatures { frame_id: frame_id.to_string(), cloud, hierarchy, features })
}

pub fn extract_frame(frame: &RangeFrame, cfg: &PipelineConfig) -> Result<ViewFeatures> {
    extract_view(&frame.frame_id, frame_cloud(frame, cfg)?, cfg)
}

/// Patch geometry of a view at the validation level.
pub fn view_geometry(view: &ViewFeatures, ica: &IcaModel, cfg: &PipelineConfig) -> ViewGeometry {
    let h = cfg.validation.level.min(view.hierarchy.levels.len()).max(1) - 1;
    let mut g = describe_view(&view.hierarchy.levels[h], &view.features[h], ica);
    g.sketch = DepthSketch::from_cloud(&view.cloud);
    g
}

/// Uniform random subset of at most `cap` raw features across all levels,
/// kept in level order.
pub fn thin_features(levels: &[LevelFeatures], cap: usize, seed: &SeedStream) -> Vec<RawFeature> {
    let total = levels.iter().map(LevelFeatures::len).sum();
    thin(levels.iter().flat_map(|l| l.features.iter().copied()), total, cap, seed)
}

fn thin<T>(items: impl Iterator<Item = T>, total: usize, cap: usize, seed: &SeedStream) -> Vec<T> {
    if total <= cap {
        return items.collect();
    }
    let mut keep = rand::seq::index::sample(&mut seed.rng(), total, cap).into_vec();
    keep.sort_unstable();
    let mut it = keep.into_iter().peekable();
    items
        .enumerate()
        .filter(|(i, _)| {
            let hit = it.peek() == Some(i);
            if hit {
                it.next();
            }
            hit
        })
        .map(|(_, f)| f)
        .collect()
}

/// Features each of `frames` training frames contributes: an equal share of
/// the larger of the ICA and GMM sample caps.
pub fn pool_share(frames: usize, cfg: &PipelineConfig) -> usize {
    cfg.ica.max_samples.max(cfg.gmm.max_samples).div_ceil(frames.max(1)).max(1)
}

/// Extracts frames in parallel and thins each to `share` raw features.
/// Concatenating the parts of consecutive chunks gives the same pool as one
/// call over all frames.
pub fn pool_part(frames: &[RangeFrame], share: usize, cfg: &PipelineConfig) -> Result<Vec<RawFeature>> {
    let seed = SeedStream::new(cfg.seed).derive("pool");
    let parts: Vec<Result<Vec<RawFeature>>> = frames
        .par_iter()
        .map(|f| {
            let v = extract_frame(f, cfg)?;
            Ok(thin_features(&v.features, share, &seed.derive(&f.frame_id)))
        })
        .collect();
    let mut pool = Vec::new();
    for p in parts {
        pool.extend(p?);
    }
    Ok(pool)
}

/// Training pool for a set of frames, see [`pool_share`].
pub fn training_pool(frames: &[RangeFrame], cfg: &PipelineConfig) -> Result<Vec<RawFeature>> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("no training frames".into()));
    }
    pool_part(frames, pool_share(frames.len(), cfg), cfg)
}

pub fn train_ica(pool: &[RawFeature], cfg: &PipelineConfig) -> Result<IcaModel> {
    fit_ica(pool, &cfg.ica, &SeedStream::new(cfg.seed).derive("train-ica"))
}

pub fn train_gmm(pool: &[RawFeature], ica: &IcaModel, cfg: &PipelineConfig) -> Result<GmmModel> {
    let seed = SeedStream::new(cfg.seed).derive("train-gmm");
    let mut flat = Vec::new();
    for f in thin(pool.iter(), pool.len(), cfg.gmm.max_samples, &seed.derive("pool")) {
        flat.extend_from_slice(&ica.project(f));
    }
    Ok(fit_gmm(&flat, PROJ_DIM, &cfg.gmm, &seed)?.model)
}

/// A fully encoded view: signature and validation geometry.
#[derive(Clone, Debug)]
pub struct EncodedView {
    pub signature: Signature,
    pub geometry: ViewGeometry,
}

/// Trained models plus configuration; encodes views.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: PipelineConfig,
    pub ica: IcaModel,
    pub gmm: GmmModel,
    pub model_version: u64,
}

impl Encoder {
    pub fn new(cfg: PipelineConfig, ica: IcaModel, gmm: GmmModel) -> Self {
        let model_version = model_fingerprint(&ica, &gmm);
        Self { cfg, ica, gmm, model_version }
    }

    pub fn encode_features(&self, view: &ViewFeatures) -> Result<EncodedView> {
        let projected: Vec<Vec<ProjectedFeature>> =
            view.features.iter().map(|l| l.features.iter().map(|f| self.ica.project(f)).collect()).collect();
        let signature = encode_view(&projected, &self.gmm, self.cfg.posterior, &view.frame_id, self.model_version)?;
        Ok(EncodedView { signature, geometry: view_geometry(view, &self.ica, &self.cfg) })
    }

    pub fn encode_frame(&self, frame: &RangeFrame) -> Result<EncodedView> {
        self.encode_features(&extract_frame(frame, &self.cfg)?)
    }

    /// Encodes frames in parallel; output order follows input order.
    pub fn encode_frames(&self, frames: &[RangeFrame]) -> Vec<Result<EncodedView>> {
        frames.par_iter().map(|f| self.encode_frame(f)).collect()
    }

    pub fn new_database(&self) -> SignatureDatabase {
        SignatureDatabase::new(crate::retrieval::DbMeta {
            g: self.gmm.components(),
            h: self.cfg.segmentation.levels,
            model_version: self.model_version,
        })
    }
}

/// Outcome of relocalizing one query.
#[derive(Clone, Debug)]
pub struct Relocalization {
    pub variant: Variant,
    pub query_id: String,
    pub retrieval: RetrievalSet,
    /// DPP-selected hits, empty for variant R.
    pub diversified: Vec<Hit>,
    pub chosen: Option<Hit>,
    /// Maps query-frame points into the chosen view's frame.
    pub relative: Option<RigidTransform>,
    /// Validation reports in the order candidates were tried.
    pub validations: Vec<(String, ValidationReport)>,
    pub failure: Option<String>,
}

impl Relocalization {
    /// World pose of the query, using the evaluation pose of the chosen view.
    pub fn world_pose(&self, db: &SignatureDatabase) -> Option<RigidTransform> {
        let hit = self.chosen.as_ref()?;
        let base = db.pose(hit.index)?;
        Some(match &self.relative {
            Some(t) => base.compose(t),
            None => *base,
        })
    }
}

fn candidate_geometry<'a>(db: &'a SignatureDatabase, hit: &Hit) -> Result<&'a ViewGeometry> {
    db.entry(hit.index).geometry.as_ref().ok_or_else(|| Error::MissingSignature(format!("{} has no stored geometry", hit.frame_id)))
}

pub fn validation_seed(cfg: &PipelineConfig, query_id: &str, candidate: &str) -> SeedStream {
    SeedStream::new(cfg.seed).derive("validate").derive(query_id).derive(candidate)
}

/// Retrieval, optional diversification and validation for one query.
pub fn relocalize(query: &EncodedView, db: &SignatureDatabase, cfg: &PipelineConfig, variant: Variant) -> Result<Relocalization> {
    let retrieval = db.knn_query_with(&query.signature, cfg.k, SearchMethod::Linear)?;
    let qid = query.signature.frame_id.clone();
    let diversified = match variant {
        Variant::R => Vec::new(),
        Variant::DR | Variant::VDR => diversify(&retrieval, db, &query.signature, &cfg.dpp_config())?.0,
    };
    let mut out = Relocalization {
        variant,
        query_id: qid.clone(),
        retrieval,
        diversified,
        chosen: None,
        relative: None,
        validations: Vec::new(),
        failure: None,
    };
    match variant {
        Variant::R | Variant::DR => {
            let hit = if variant == Variant::R { out.retrieval.hits.first() } else { out.diversified.first() };
            let hit = hit.cloned().ok_or(Error::EmptyDatabase)?;
            let geo = candidate_geometry(db, &hit)?;
            match one_way_estimate(&query.geometry, geo, &cfg.validation, &validation_seed(cfg, &qid, &hit.frame_id)) {
                Ok(e) => out.relative = Some(e.transform),
                Err(e) => out.failure = Some(format!("transform: {e}")),
            }
            out.chosen = Some(hit);
        }
        Variant::VDR => {
            for hit in out.diversified.clone() {
                let geo = candidate_geometry(db, &hit)?;
                let rep = two_way_validate(&query.geometry, geo, &cfg.validation, &validation_seed(cfg, &qid, &hit.frame_id));
                let accepted = rep.accepted;
                let fwd = rep.forward;
                out.validations.push((hit.frame_id.clone(), rep));
                if accepted {
                    out.relative = fwd;
                    out.chosen = Some(hit);
                    break;
                }
            }
            if out.chosen.is_none() {
                out.failure = Some(Error::NoValidatedCandidate.to_string());
            }
        }
    }
    Ok(out)
}

/// Validated hits in the given order, stopping after `limit` acceptances.
pub fn validated_views(query: &EncodedView, hits: &[Hit], db: &SignatureDatabase, cfg: &PipelineConfig, limit: usize) -> Result<Vec<(Hit, RigidTransform)>> {
    let mut out = Vec::new();
    for hit in hits {
        if out.len() >= limit {
            break;
        }
        let geo = candidate_geometry(db, hit)?;
        let rep = two_way_validate(&query.geometry, geo, &cfg.validation, &validation_seed(cfg, &query.signature.frame_id, &hit.frame_id));
        if let (true, Some(t)) = (rep.accepted, rep.forward) {
            out.push((hit.clone(), t));
        }
    }
    Ok(out)
}
