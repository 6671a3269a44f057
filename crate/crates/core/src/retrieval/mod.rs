//! Signature database and k-nearest-neighbor retrieval under negated L1.

mod store;
mod vptree;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fv::Signature;
use crate::numerics::Pose;
use crate::validation::ViewGeometry;

pub use store::{DB_MAGIC, DB_VERSION};
use vptree::VpTree;

/// s(X, Q) = −‖X − Q‖₁, accumulated in f64 in index order.
pub fn l1_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).sum()
}

pub fn similarity(a: &Signature, b: &Signature) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    if a.model_version != b.model_version {
        return Err(Error::ModelMismatch { expected: a.model_version, found: b.model_version });
    }
    Ok(-l1_distance(&a.data, &b.data))
}

/// Layout every signature in a database shares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DbMeta {
    pub g: usize,
    pub h: usize,
    pub model_version: u64,
}

impl DbMeta {
    pub fn dim(&self) -> usize {
        crate::fv::BLOCK * self.g * self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub frame_id: String,
    pub signature: Vec<f32>,
    /// Where the frame came from, if known.
    pub source: Option<String>,
    pub geometry: Option<ViewGeometry>,
}

/// One retrieved item.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub frame_id: String,
    pub similarity: f64,
}

/// Retrieval result, ordered by similarity then frame id.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSet {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SearchMethod {
    Linear,
    #[default]
    VpTree,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbStats {
    pub entries: usize,
    pub g: usize,
    pub h: usize,
    pub dim: usize,
    pub model_version: u64,
    pub with_pose: usize,
    pub with_geometry: usize,
    pub unflushed: usize,
}

/// In-memory database, optionally backed by a container file.
///
/// Poses sit in a side table that retrieval never reads; they exist for
/// evaluation only.
#[derive(Debug)]
pub struct SignatureDatabase {
    meta: DbMeta,
    entries: Vec<DbEntry>,
    poses: Vec<Option<Pose>>,
    ids: BTreeMap<String, usize>,
    path: Option<PathBuf>,
    persisted: usize,
    tree: Option<VpTree>,
}

impl SignatureDatabase {
    pub fn new(meta: DbMeta) -> Self {
        Self { meta, entries: Vec::new(), poses: Vec::new(), ids: BTreeMap::new(), path: None, persisted: 0, tree: None }
    }

    pub fn meta(&self) -> DbMeta {
        self.meta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &DbEntry {
        &self.entries[i]
    }

    pub fn index_of(&self, frame_id: &str) -> Option<usize> {
        self.ids.get(frame_id).copied()
    }

    /// Evaluation-only pose lookup.
    pub fn pose(&self, i: usize) -> Option<&Pose> {
        self.poses.get(i).and_then(Option::as_ref)
    }

    /// The stored signature of entry `i` with the database layout.
    pub fn signature(&self, i: usize) -> Signature {
        let e = &self.entries[i];
        Signature { frame_id: e.frame_id.clone(), g: self.meta.g, h: self.meta.h, model_version: self.meta.model_version, data: e.signature.clone() }
    }

    /// In-memory copy holding the entries at `keep`, in that order.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let mut out = Self::new(self.meta);
        for &i in keep {
            let e = self.entries.get(i).ok_or_else(|| Error::InvalidInput(format!("no entry {i}")))?;
            out.push(e.clone(), self.poses[i])?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, sig: &Signature, pose: Option<Pose>, source: Option<String>, geometry: Option<ViewGeometry>) -> Result<usize> {
        if sig.model_version != self.meta.model_version {
            return Err(Error::ModelMismatch { expected: self.meta.model_version, found: sig.model_version });
        }
        if sig.g != self.meta.g || sig.h != self.meta.h || sig.len() != self.meta.dim() {
            return Err(Error::DimensionMismatch { expected: self.meta.dim(), found: sig.len() });
        }
        self.push(DbEntry { frame_id: sig.frame_id.clone(), signature: sig.data.clone(), source, geometry }, pose)
    }

    fn push(&mut self, e: DbEntry, pose: Option<Pose>) -> Result<usize> {
        if self.ids.contains_key(&e.frame_id) {
            return Err(Error::DuplicateFrameId(e.frame_id));
        }
        let i = self.entries.len();
        self.ids.insert(e.frame_id.clone(), i);
        self.entries.push(e);
        self.poses.push(pose);
        self.tree = None;
        Ok(i)
    }

    fn check_query(&self, q: &Signature) -> Result<()> {
        if q.model_version != self.meta.model_version {
            return Err(Error::ModelMismatch { expected: self.meta.model_version, found: q.model_version });
        }
        if q.len() != self.meta.dim() {
            return Err(Error::DimensionMismatch { expected: self.meta.dim(), found: q.len() });
        }
        if self.entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        Ok(())
    }

    /// Builds the VP-tree now instead of on the first query.
    pub fn build_index(&mut self) {
        if self.tree.is_none() {
            self.tree = Some(VpTree::build(&self.entries));
        }
    }

    /// Top-k by similarity, ties broken by ascending frame id. Returns
    /// fewer than k hits only when the database is smaller than k.
    pub fn knn_query(&self, q: &Signature, k: usize) -> Result<RetrievalSet> {
        self.knn_query_with(q, k, SearchMethod::Linear)
    }

    pub fn knn_query_with(&self, q: &Signature, k: usize, method: SearchMethod) -> Result<RetrievalSet> {
        self.check_query(q)?;
        let found = match (method, &self.tree) {
            (SearchMethod::VpTree, Some(tree)) => tree.knn(&self.entries, &q.data, k),
            (SearchMethod::VpTree, None) => VpTree::build(&self.entries).knn(&self.entries, &q.data, k),
            (SearchMethod::Linear, _) => linear_knn(&self.entries, &q.data, k),
        };
        let hits = found
            .into_iter()
            .map(|(d, i)| Hit { index: i, frame_id: self.entries[i].frame_id.clone(), similarity: -d })
            .collect();
        Ok(RetrievalSet { query_id: q.frame_id.clone(), hits })
    }

    pub fn stats(&self) -> DbStats {
        DbStats {
            entries: self.len(),
            g: self.meta.g,
            h: self.meta.h,
            dim: self.meta.dim(),
            model_version: self.meta.model_version,
            with_pose: self.poses.iter().filter(|p| p.is_some()).count(),
            with_geometry: self.entries.iter().filter(|e| e.geometry.is_some()).count(),
            unflushed: self.len() - self.persisted,
        }
    }

    /// Creates an empty container at `path`. Fails if the file exists.
    pub fn create(path: &Path, meta: DbMeta) -> Result<Self> {
        let mut db = Self::new(meta);
        store::create(path, &meta)?;
        db.path = Some(path.to_path_buf());
        Ok(db)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut db = Self::decode(&bytes)?;
        db.path = Some(path.to_path_buf());
        Ok(db)
    }

    /// Parses a whole container image.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (meta, records) = store::decode(bytes)?;
        let mut db = Self::new(meta);
        for (e, pose) in records {
            if e.signature.len() != meta.dim() {
                return Err(Error::Corrupt(format!("entry {} has {} values, expected {}", e.frame_id, e.signature.len(), meta.dim())));
            }
            db.push(e, pose).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        db.persisted = db.len();
        Ok(db)
    }

    /// Serializes the whole database as a container image.
    pub fn encode(&self) -> Vec<u8> {
        store::encode(&self.meta, self.entries.iter().zip(&self.poses))
    }

    /// Appends entries added since the last flush. Earlier records are not
    /// rewritten; only the footer index moves.
    pub fn flush(&mut self) -> Result<()> {
        let Some(path) = self.path.clone() else {
            return Err(Error::InvalidInput("database has no backing file".into()));
        };
        let new: Vec<_> = self.entries[self.persisted..].iter().zip(&self.poses[self.persisted..]).collect();
        store::append(&path, &self.meta, self.persisted, new)?;
        self.persisted = self.len();
        Ok(())
    }

    /// Writes a full container to a new path and makes it the backing file.
    pub fn save_as(&mut self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        self.path = Some(path.to_path_buf());
        self.persisted = self.len();
        Ok(())
    }
}

fn rank_cmp(entries: &[DbEntry], a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then_with(|| entries[a.1].frame_id.cmp(&entries[b.1].frame_id))
}

pub(crate) fn linear_knn(entries: &[DbEntry], q: &[f32], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = entries.iter().enumerate().map(|(i, e)| (l1_distance(&e.signature, q), i)).collect();
    all.sort_by(|a, b| rank_cmp(entries, a, b));
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::numerics::{RigidTransform, SeedStream, Vec3};

    pub(crate) fn meta() -> DbMeta {
        DbMeta { g: 2, h: 2, model_version: 77 }
    }

    pub(crate) fn random_sig(id: &str, rng: &mut impl Rng) -> Signature {
        let dim = meta().dim();
        Signature { frame_id: id.into(), g: 2, h: 2, model_version: 77, data: (0..dim).map(|_| rng.random_range(-0.3f32..0.3)).collect() }
    }

    fn filled(n: usize, seed: u64) -> (SignatureDatabase, Vec<Signature>) {
        let mut rng = SeedStream::new(seed).rng();
        let mut db = SignatureDatabase::new(meta());
        let sigs: Vec<_> = (0..n).map(|i| random_sig(&format!("f{i:04}"), &mut rng)).collect();
        for s in &sigs {
            db.insert(s, None, None, None).unwrap();
        }
        (db, sigs)
    }

    #[test]
    fn similarity_contract() {
        let mut rng = SeedStream::new(1).rng();
        let a = random_sig("a", &mut rng);
        let b = random_sig("b", &mut rng);
        assert_eq!(similarity(&a, &a).unwrap(), 0.0);
        assert!(similarity(&a, &b).unwrap() < 0.0);
        assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        let mut c = b.clone();
        c.model_version = 1;
        assert!(matches!(similarity(&a, &c), Err(Error::ModelMismatch { .. })));
        c = b.clone();
        c.data.pop();
        assert!(matches!(similarity(&a, &c), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn self_retrieval_and_errors() {
        let (db, sigs) = filled(50, 2);
        for s in &sigs {
            let r = db.knn_query(s, 3).unwrap();
            assert_eq!(r.hits[0].frame_id, s.frame_id);
            assert_eq!(r.hits[0].similarity, 0.0);
        }
        let r = db.knn_query(&sigs[0], 500).unwrap();
        assert_eq!(r.hits.len(), 50);
        assert!(r.hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        let empty = SignatureDatabase::new(meta());
        assert!(matches!(empty.knn_query(&sigs[0], 1), Err(Error::EmptyDatabase)));
        let mut db = db;
        assert!(matches!(db.insert(&sigs[3], None, None, None), Err(Error::DuplicateFrameId(_))));
    }

    #[test]
    fn ties_break_on_frame_id_regardless_of_insertion_order() {
        let mut rng = SeedStream::new(3).rng();
        let base = random_sig("x", &mut rng);
        let ids = ["d", "b", "a", "c"];
        let mut db1 = SignatureDatabase::new(meta());
        let mut db2 = SignatureDatabase::new(meta());
        for id in ids {
            db1.insert(&Signature { frame_id: id.into(), ..base.clone() }, None, None, None).unwrap();
        }
        for id in ids.iter().rev() {
            db2.insert(&Signature { frame_id: (*id).into(), ..base.clone() }, None, None, None).unwrap();
        }
        for m in [SearchMethod::Linear, SearchMethod::VpTree] {
            let a: Vec<_> = db1.knn_query_with(&base, 3, m).unwrap().hits.into_iter().map(|h| h.frame_id).collect();
            let b: Vec<_> = db2.knn_query_with(&base, 3, m).unwrap().hits.into_iter().map(|h| h.frame_id).collect();
            assert_eq!(a, vec!["a", "b", "c"]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vptree_matches_linear_scan() {
        let (mut db, _) = filled(400, 4);
        db.build_index();
        let mut rng = SeedStream::new(5).rng();
        for t in 0..100 {
            let q = random_sig(&format!("q{t}"), &mut rng);
            for k in [1, 5, 20] {
                let a = db.knn_query_with(&q, k, SearchMethod::Linear).unwrap();
                let b = db.knn_query_with(&q, k, SearchMethod::VpTree).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn vptree_handles_duplicates() {
        let mut rng = SeedStream::new(6).rng();
        let mut db = SignatureDatabase::new(meta());
        let protos: Vec<_> = (0..5).map(|i| random_sig(&format!("p{i}"), &mut rng)).collect();
        for i in 0..100 {
            let s = Signature { frame_id: format!("d{i:03}"), ..protos[i % 5].clone() };
            db.insert(&s, None, None, None).unwrap();
        }
        db.build_index();
        for p in &protos {
            for k in [1, 7, 30] {
                assert_eq!(db.knn_query_with(p, k, SearchMethod::Linear).unwrap(), db.knn_query_with(p, k, SearchMethod::VpTree).unwrap());
            }
        }
    }

    #[test]
    fn subset_keeps_entries_and_poses() {
        let (mut db, _) = filled(6, 3);
        let pose = RigidTransform::from_translation(Vec3::x());
        let s = db.signature(2);
        let i = db.insert(&Signature { frame_id: "extra".into(), ..s.clone() }, Some(pose), None, None).unwrap();
        let sub = db.subset(&[i, 2]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.signature(1), s);
        assert_eq!(sub.pose(0), Some(&pose));
        assert_eq!(sub.index_of("extra"), Some(0));
        assert!(db.subset(&[99]).is_err());
        assert!(db.subset(&[1, 1]).is_err());
    }

    #[test]
    fn stats_and_pose_side_table() {
        let (mut db, _) = filled(3, 7);
        let mut rng = SeedStream::new(8).rng();
        let s = random_sig("posed", &mut rng);
        let pose = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let i = db.insert(&s, Some(pose), Some("somewhere".into()), Some(ViewGeometry::default())).unwrap();
        assert_eq!(db.pose(i), Some(&pose));
        assert_eq!(db.pose(0), None);
        let st = db.stats();
        assert_eq!((st.entries, st.with_pose, st.with_geometry, st.dim), (4, 1, 1, 100));
    }
}
