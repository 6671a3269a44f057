//! Regenerates the fuzz seed corpus. Run from the repository root:
//! `cargo run --release -p scenesig --example seeds`.

use std::fs;
use std::path::Path;

use scenesig::eval::{room_dataset, RoomDatasetConfig};
use scenesig::feature_space::Model;
use scenesig::features::{write_feature_dump, LevelFeatures};
use scenesig::fv::encode_signature_file;
use scenesig::pipeline::{extract_frame, train_gmm, train_ica, training_pool, Encoder, PipelineConfig};
use scenesig::scene::{encode_depth_png, format_pose, synth_scene, CameraIntrinsics, SynthOptions};
use scenesig::segmentation::{export_segmentation, SegmentationLabels};

fn put(target: &str, name: &str, bytes: &[u8]) {
    let dir = Path::new("fuzz/corpus").join(target);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let mut cfg = PipelineConfig::desk();
    cfg.gmm.components = 2;
    cfg.segmentation.levels = 2;
    cfg.ica.max_samples = 3000;
    cfg.gmm.max_samples = 3000;
    let data = room_dataset(5, "seed", &RoomDatasetConfig { db_frames: 3, queries: 1, ..Default::default() }).unwrap();
    let pool = training_pool(&data.database, &cfg).unwrap();
    let ica = train_ica(&pool, &cfg).unwrap();
    let gmm = train_gmm(&pool, &ica, &cfg).unwrap();
    put("model", "ica.bin", &Model::Ica(ica.clone()).to_bytes());
    put("model", "gmm.bin", &Model::Gmm(gmm.clone()).to_bytes());
    put("model", "gmm.txt", Model::Gmm(gmm.clone()).to_text().as_bytes());
    let enc = Encoder::new(cfg.clone(), ica, gmm);
    let mut db = enc.new_database();
    for (i, (f, e)) in data.database.iter().zip(enc.encode_frames(&data.database)).enumerate() {
        let e = e.unwrap();
        if i == 0 {
            put("signature", "f32.sig", &encode_signature_file(&e.signature, 4).unwrap());
            put("signature", "f64.sig", &encode_signature_file(&e.signature, 8).unwrap());
            put("view_geometry", "view.geo", &e.geometry.to_bytes());
        }
        // only the first entry carries geometry, to keep the seed small
        db.insert(&e.signature, f.pose_gt, None, (i == 0).then_some(e.geometry)).unwrap();
    }
    put("database", "three.db", &db.encode());
    put("database", "empty.db", &enc.new_database().encode());

    let f = &data.database[0];
    put("pose", "pose.txt", format_pose(&f.pose_gt.unwrap()).as_bytes());
    put("intrinsics", "kinect.txt", b"585 585 320 240 640 480 0.001\n");
    put("intrinsics", "desk.txt", b"140 140 79.5 59.5 160 120 0.001\n");
    put("scene_spec", "room.txt", data.room.spec.to_text().as_bytes());
    put("config", "desk.toml", cfg.to_toml().as_bytes());
    put("config", "partial.toml", b"seed = 3\nk = 20\n[gmm]\ncomponents = 16\n");
    for (name, s) in [("k.txt", "5"), ("full.txt", "5,0.3,0.4,1.5"), ("gaps.txt", "4,,,2")] {
        put("dpp_config", name, s.as_bytes());
    }

    // small frame for the text dumps
    let small = CameraIntrinsics { fx: 35.0, fy: 35.0, cx: 19.5, cy: 14.5, width: 40, height: 30, depth_scale: 0.001 };
    let opts = SynthOptions { intrinsics: small, frame_id: "seed/small".into(), ..Default::default() };
    let frame = synth_scene(&data.room.spec, &f.pose_gt.unwrap(), &opts).unwrap();
    put("depth_png", "small.png", &encode_depth_png(40, 30, &frame.depth).unwrap());
    let mut scfg = cfg.clone();
    scfg.segmentation.base_target = 60;
    let view = extract_frame(&frame, &scfg).unwrap();
    put("segmentation", "small.seg", export_segmentation(&SegmentationLabels::from_hierarchy(&view.frame_id, &view.hierarchy)).as_bytes());
    let short: Vec<LevelFeatures> = view
        .features
        .iter()
        .map(|l| LevelFeatures { features: l.features.iter().take(12).copied().collect(), provenance: l.provenance.iter().take(12).copied().collect() })
        .collect();
    put("feature_dump", "small.features", write_feature_dump(&view.frame_id, &short).as_bytes());
}
