//! Every decoder accepts its checked-in fuzz seeds and survives mutated
//! versions of them without panicking. Mirrors the cargo-fuzz targets.

use std::path::PathBuf;
use std::str::FromStr;

use proptest::prelude::*;
use scenesig::dpp::DppConfig;
use scenesig::feature_space::Model;
use scenesig::features::parse_feature_dump;
use scenesig::fv::decode_signature_file;
use scenesig::pipeline::PipelineConfig;
use scenesig::retrieval::SignatureDatabase;
use scenesig::scene::{decode_depth_png, parse_intrinsics, parse_pose, parse_scene_spec};
use scenesig::segmentation::parse_segmentation;
use scenesig::validation::ViewGeometry;

type Decoder = fn(&[u8]) -> bool;

fn text(data: &[u8], f: impl Fn(&str) -> bool) -> bool {
    std::str::from_utf8(data).is_ok_and(f)
}

const TARGETS: &[(&str, Decoder)] = &[
    ("model", |d| Model::decode(d).is_ok()),
    ("signature", |d| decode_signature_file(d).is_ok()),
    ("database", |d| match SignatureDatabase::decode(d) {
        Ok(db) => db.is_empty() || db.knn_query(&db.signature(0), 3).is_ok(),
        Err(_) => false,
    }),
    ("view_geometry", |d| ViewGeometry::from_bytes(d).is_ok()),
    ("depth_png", |d| decode_depth_png(d).is_ok()),
    ("segmentation", |d| text(d, |t| parse_segmentation(t).is_ok())),
    ("feature_dump", |d| text(d, |t| parse_feature_dump(t).is_ok())),
    ("config", |d| text(d, |t| PipelineConfig::from_toml(t).is_ok())),
    ("scene_spec", |d| text(d, |t| parse_scene_spec(t).is_ok())),
    ("pose", |d| text(d, |t| parse_pose(t).is_ok())),
    ("intrinsics", |d| text(d, |t| parse_intrinsics(t).is_ok())),
    ("dpp_config", |d| text(d, |t| DppConfig::from_str(t).is_ok())),
];

fn seeds() -> Vec<(usize, String, Vec<u8>)> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut out = Vec::new();
    for (t, (name, _)) in TARGETS.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(root.join(name)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        assert!(!files.is_empty(), "no seeds for {name}");
        for f in files {
            out.push((t, f.display().to_string(), std::fs::read(&f).unwrap()));
        }
    }
    out
}

#[test]
fn every_seed_decodes() {
    for (t, path, bytes) in seeds() {
        assert!((TARGETS[t].1)(&bytes), "{path} rejected");
    }
}

#[test]
fn truncated_seeds_never_panic() {
    for (t, _, bytes) in seeds() {
        let step = (bytes.len() / 200).max(1);
        for n in (0..bytes.len()).step_by(step) {
            (TARGETS[t].1)(&bytes[..n]);
        }
    }
}

#[derive(Clone, Debug)]
enum Edit {
    Set(usize, u8),
    Insert(usize, Vec<u8>),
    Remove(usize, usize),
}

fn edit() -> impl Strategy<Value = Edit> {
    prop_oneof![
        (any::<usize>(), any::<u8>()).prop_map(|(i, b)| Edit::Set(i, b)),
        (any::<usize>(), prop::collection::vec(any::<u8>(), 1..8)).prop_map(|(i, v)| Edit::Insert(i, v)),
        (any::<usize>(), 1usize..16).prop_map(|(i, n)| Edit::Remove(i, n)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 400, ..ProptestConfig::default() })]

    #[test]
    fn mutated_seeds_never_panic(pick in any::<usize>(), edits in prop::collection::vec(edit(), 1..6)) {
        let all = seeds();
        let (t, _, mut bytes) = all[pick % all.len()].clone();
        for e in edits {
            let len = bytes.len().max(1);
            match e {
                Edit::Set(i, b) => if !bytes.is_empty() { bytes[i % len] = b },
                Edit::Insert(i, v) => { let at = i % (bytes.len() + 1); bytes.splice(at..at, v); }
                Edit::Remove(i, n) => if !bytes.is_empty() { let at = i % len; let end = (at + n).min(bytes.len()); bytes.drain(at..end); }
            }
        }
        (TARGETS[t].1)(&bytes);
    }

    #[test]
    fn random_bytes_never_panic(t in 0..TARGETS.len(), bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        (TARGETS[t].1)(&bytes);
    }
}
