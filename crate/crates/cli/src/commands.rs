use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use scenesig::dpp::{build_kernel, diversify};
use scenesig::eval::{evaluate as run_eval, render, room_dataset, clustered_dataset, sparsify_database, RoomDatasetConfig};
use scenesig::feature_space::{load_gmm, load_ica, GmmModel, IcaModel, Model};
use scenesig::features::write_feature_dump;
use scenesig::fv::{encode_signature_file, load_signature};
use scenesig::pipeline::{relocalize, train_gmm as fit_gmm, train_ica as fit_ica, Encoder, PipelineConfig, Variant};
use scenesig::retrieval::{Hit, SignatureDatabase};
use scenesig::scene::rooms::{random_pose, ring_trajectory, Room};
use scenesig::scene::{parse_scene_spec, write_sevenscenes_frame, CameraIntrinsics, RangeFrame};
use scenesig::segmentation::{export_segmentation, SegmentationLabels};
use scenesig::{Error, RigidTransform, SeedStream};

use crate::data::{encode_each, encode_queries, sequences, training_pool};
use crate::{CliResult, EncodeArgs, EvaluateArgs, Failure, IndexArgs, QueryArgs, SynthArgs, TrainGmmArgs, TrainIcaArgs};

fn validated(cfg: &PipelineConfig) -> CliResult {
    cfg.validate().map_err(Failure::from)
}

fn pick(flag: Option<&PathBuf>, configured: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.cloned()
        .or_else(|| configured.clone())
        .ok_or_else(|| Failure::config(format!("no {what} path: pass --{what} or set paths.{what}")))
}

fn models(cfg: &PipelineConfig, ica: Option<&PathBuf>, gmm: Option<&PathBuf>) -> CliResult<(IcaModel, GmmModel)> {
    let ica = load_ica(&pick(ica, &cfg.paths.ica, "ica")?)?;
    let gmm = load_gmm(&pick(gmm, &cfg.paths.gmm, "gmm")?)?;
    Ok((ica, gmm))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| Failure { code: 3, msg: format!("{}: {e}", path.display()) })
}

fn mkdir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Failure { code: 3, msg: format!("{}: {e}", path.display()) })
}

fn print(v: Value) {
    println!("{v}");
}

fn transform_json(t: &RigidTransform) -> Value {
    json!(t.to_row_major())
}

/// File stem for a frame id: path separators become `__`.
fn file_stem(frame_id: &str) -> String {
    frame_id.replace(['/', '\\'], "__")
}

pub fn train_ica(cfg: &PipelineConfig, a: &TrainIcaArgs) -> CliResult {
    validated(cfg)?;
    let out = pick(a.out.as_ref(), &cfg.paths.ica, "ica")?;
    let pool = training_pool(&sequences(&a.data)?, a.stride, cfg)?;
    let ica = fit_ica(&pool, cfg)?;
    if !ica.converged {
        eprintln!("warning: FastICA did not converge; the unmixing is the identity");
    }
    Model::Ica(ica.clone()).save(&out)?;
    print(json!({ "model": "ica", "path": out, "samples": pool.len(), "converged": ica.converged }));
    Ok(())
}

pub fn train_gmm(cfg: &PipelineConfig, a: &TrainGmmArgs) -> CliResult {
    validated(cfg)?;
    let out = pick(a.out.as_ref(), &cfg.paths.gmm, "gmm")?;
    let ica = load_ica(&pick(a.ica.as_ref(), &cfg.paths.ica, "ica")?)?;
    let pool = training_pool(&sequences(&a.data)?, a.stride, cfg)?;
    let gmm = fit_gmm(&pool, &ica, cfg)?;
    Model::Gmm(gmm.clone()).save(&out)?;
    print(json!({ "model": "gmm", "path": out, "samples": pool.len().min(cfg.gmm.max_samples), "components": gmm.components() }));
    Ok(())
}

pub fn encode(cfg: &PipelineConfig, a: &EncodeArgs) -> CliResult {
    validated(cfg)?;
    if a.float_width != 4 && a.float_width != 8 {
        return Err(Failure::config("--float-width must be 4 or 8"));
    }
    let (ica, gmm) = models(cfg, a.models.ica.as_ref(), a.models.gmm.as_ref())?;
    let seqs = sequences(&a.data)?;
    mkdir(&a.out)?;
    let enc = Encoder::new(cfg.clone(), ica, gmm);
    let mut failure = None;
    encode_each(&seqs, 1, &enc, |_, view, e| {
        let stem = file_stem(&e.signature.frame_id);
        let sig = a.out.join(format!("{stem}.sig"));
        let mut record = json!({ "frame_id": e.signature.frame_id, "signature": sig, "dim": e.signature.len() });
        let mut outputs = vec![(sig, encode_signature_file(&e.signature, a.float_width)?)];
        if a.features {
            let p = a.out.join(format!("{stem}.features.txt"));
            record["features"] = json!(p);
            outputs.push((p, write_feature_dump(&view.frame_id, &view.features).into_bytes()));
        }
        if a.segmentation {
            let p = a.out.join(format!("{stem}.seg.txt"));
            record["segmentation"] = json!(p);
            let labels = SegmentationLabels::from_hierarchy(&view.frame_id, &view.hierarchy);
            outputs.push((p, export_segmentation(&labels).into_bytes()));
        }
        for (p, bytes) in outputs {
            if let Err(f) = write(&p, bytes) {
                failure = Some(f);
                return Err(Error::InvalidInput("write failed".into()));
            }
        }
        print(record);
        Ok(())
    })
    .map_err(|e| failure.take().unwrap_or_else(|| e.into()))?;
    Ok(())
}

pub fn index(cfg: &PipelineConfig, a: &IndexArgs) -> CliResult {
    validated(cfg)?;
    if a.sparsity == 0 {
        return Err(Failure::config("--sparsity must be at least 1"));
    }
    let path = pick(a.db.as_ref(), &cfg.paths.db, "db")?;
    let (ica, gmm) = models(cfg, a.models.ica.as_ref(), a.models.gmm.as_ref())?;
    let seqs = sequences(&a.data)?;
    let enc = Encoder::new(cfg.clone(), ica, gmm);
    let mut db = if a.append {
        let db = SignatureDatabase::open(&path)?;
        if db.meta() != enc.new_database().meta() {
            return Err(Error::ModelMismatch { expected: db.meta().model_version, found: enc.model_version }.into());
        }
        db
    } else {
        if path.exists() {
            if !a.force {
                return Err(Failure { code: 3, msg: format!("{} exists; use --append or --force", path.display()) });
            }
            fs::remove_file(&path).map_err(|e| Failure { code: 3, msg: format!("{}: {e}", path.display()) })?;
        }
        SignatureDatabase::create(&path, enc.new_database().meta())?
    };
    let added = encode_each(&seqs, a.sparsity, &enc, |f, _, e| {
        db.insert(&e.signature, f.pose_gt, Some(f.frame_id.clone()), Some(e.geometry)).map(|_| ())
    })?;
    db.flush()?;
    let st = db.stats();
    print(json!({ "db": path, "added": added, "entries": st.entries, "dim": st.dim, "model_version": format!("{:#018x}", st.model_version) }));
    Ok(())
}

fn open_db(cfg: &PipelineConfig, flag: Option<&PathBuf>) -> CliResult<SignatureDatabase> {
    Ok(SignatureDatabase::open(&pick(flag, &cfg.paths.db, "db")?)?)
}

fn hits_json(hits: &[Hit]) -> Value {
    Value::Array(hits.iter().enumerate().map(|(r, h)| json!({ "rank": r + 1, "frame_id": h.frame_id, "s": h.similarity })).collect())
}

fn dump_kernel(path: &Path, text: &str) -> CliResult {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure { code: 3, msg: format!("{}: {e}", path.display()) })?;
    f.write_all(text.as_bytes()).map_err(|e| Failure { code: 3, msg: format!("{}: {e}", path.display()) })
}

pub fn query(cfg: &PipelineConfig, a: &QueryArgs) -> CliResult {
    validated(cfg)?;
    if a.data.is_empty() == a.signature.is_empty() {
        return Err(Failure::config("give query frames (--data) or signature files (--signature)"));
    }
    let db = open_db(cfg, a.db.as_ref())?;
    let dpp = cfg.dpp_config();
    let kernel_out = |q: &scenesig::fv::Signature, set: &scenesig::retrieval::RetrievalSet| -> CliResult {
        if let Some(p) = &a.dump_kernel {
            if cfg.variant != Variant::R {
                let ids: Vec<String> = set.hits.iter().map(|h| h.frame_id.clone()).collect();
                dump_kernel(p, &format!("# query {}\n{}", q.frame_id, build_kernel(set, &db, q, &dpp)?.dump(&ids)))?;
            }
        }
        Ok(())
    };
    if !a.signature.is_empty() {
        if cfg.variant == Variant::VDR {
            return Err(Failure::config("variant VDR validates geometry and needs query frames (--data)"));
        }
        for p in &a.signature {
            let q = load_signature(p)?;
            let set = db.knn_query(&q, cfg.k)?;
            let div = if cfg.variant == Variant::DR { diversify(&set, &db, &q, &dpp)?.0 } else { Vec::new() };
            kernel_out(&q, &set)?;
            let chosen = if cfg.variant == Variant::R { set.hits.first() } else { div.first() };
            print(json!({
                "query_id": q.frame_id,
                "variant": cfg.variant,
                "hits": hits_json(&set.hits),
                "diversified": hits_json(&div),
                "chosen": chosen.map(|h| &h.frame_id),
                "pose": chosen.and_then(|h| db.pose(h.index)).map(transform_json),
            }));
        }
        return Ok(());
    }
    let (ica, gmm) = models(cfg, a.models.ica.as_ref(), a.models.gmm.as_ref())?;
    let enc = Encoder::new(cfg.clone(), ica, gmm);
    let seqs = sequences(&a.data)?;
    let mut queries = Vec::new();
    match a.frame {
        Some(i) => {
            for dir in &seqs {
                let f = crate::data::load(dir, i, cfg)?;
                queries.push(enc.encode_frame(&f)?);
            }
        }
        None => queries.extend(encode_queries(&seqs, &enc)?.into_iter().map(|(q, _)| q)),
    }
    for q in &queries {
        let rel = relocalize(q, &db, cfg, cfg.variant)?;
        kernel_out(&q.signature, &rel.retrieval)?;
        let validations: Vec<Value> = rel
            .validations
            .iter()
            .map(|(id, r)| json!({ "frame_id": id, "accepted": r.accepted, "residual_rot_deg": r.residual_rot.to_degrees(), "residual_trans": r.residual_trans, "reason": r.reason }))
            .collect();
        print(json!({
            "query_id": rel.query_id,
            "variant": rel.variant,
            "hits": hits_json(&rel.retrieval.hits),
            "diversified": hits_json(&rel.diversified),
            "validations": validations,
            "chosen": rel.chosen.as_ref().map(|h| &h.frame_id),
            "accepted": rel.chosen.is_some() && rel.failure.is_none(),
            "relative": rel.relative.as_ref().map(transform_json),
            "pose": rel.world_pose(&db).as_ref().map(transform_json),
            "failure": rel.failure,
        }));
    }
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig, a: &EvaluateArgs) -> CliResult {
    validated(cfg)?;
    if a.sparsity == 0 {
        return Err(Failure::config("--sparsity must be at least 1"));
    }
    let variants = if a.variant.is_empty() { vec![cfg.variant] } else { a.variant.clone() };
    let mut db = open_db(cfg, a.db.as_ref())?;
    if a.sparsity > 1 {
        db = sparsify_database(&db, a.sparsity)?;
    }
    let (ica, gmm) = models(cfg, a.models.ica.as_ref(), a.models.gmm.as_ref())?;
    let enc = Encoder::new(cfg.clone(), ica, gmm);
    let queries = encode_queries(&sequences(&a.data)?, &enc)?;
    let (mut lines, mut table) = (String::new(), String::new());
    for (i, v) in variants.iter().enumerate() {
        let rep = run_eval(&queries, &db, cfg, *v)?;
        lines.push_str(&rep.to_json_lines());
        let t = rep.summary_table();
        table.push_str(if i == 0 { &t } else { t.split_once('\n').map_or("", |x| x.1) });
    }
    let head = format!("database entries: {} (1/{} sparsity)\n", db.len(), a.sparsity);
    match &a.report {
        Some(p) => {
            write(p, &lines)?;
            print!("{head}{table}");
        }
        None => {
            print!("{lines}");
            eprint!("{head}{table}");
        }
    }
    Ok(())
}

fn write_sequence(dir: &Path, frames: &[RangeFrame]) -> CliResult {
    for (i, f) in frames.iter().enumerate() {
        write_sevenscenes_frame(dir, i, f)?;
    }
    Ok(())
}

pub fn synth(cfg: &PipelineConfig, has_config: bool, a: &SynthArgs) -> CliResult {
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(Failure::config("--noise must be a non-negative number"));
    }
    if a.db_frames == 0 {
        return Err(Failure::config("--db-frames must be positive"));
    }
    let intrinsics = cfg.intrinsics.unwrap_or_else(CameraIntrinsics::desk);
    let dcfg = RoomDatasetConfig { db_frames: a.db_frames, queries: a.queries, intrinsics, noise: a.noise, ..Default::default() };
    mkdir(&a.out)?;
    let mut written = Vec::new();
    if let Some(spec_path) = &a.scene {
        let text = fs::read_to_string(spec_path).map_err(|e| Failure { code: 3, msg: format!("{}: {e}", spec_path.display()) })?;
        let spec = parse_scene_spec(&text)?;
        let name = spec_path.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned());
        let room = Room { spec, width: 0.0, depth: 0.0, height: 0.0, free_radius: dcfg.rig.radius };
        let s = SeedStream::new(cfg.seed).derive(&name);
        let ring = ring_trajectory(dcfg.db_frames, &dcfg.rig, s.derive("ring").seed());
        let mut rng = s.derive("queries").rng();
        let render_all = |poses: &[scenesig::Pose], tag: &str| -> CliResult<Vec<RangeFrame>> {
            poses
                .iter()
                .enumerate()
                .map(|(i, p)| render(&room, p, format!("{name}/{tag}/frame-{i:06}"), &dcfg, s.derive(tag).derive(i).seed()).map_err(Failure::from))
                .collect()
        };
        let qposes: Vec<_> = (0..dcfg.queries).map(|_| random_pose(&dcfg.rig, &mut rng)).collect();
        write_sequence(&a.out.join(&name).join("db"), &render_all(&ring, "db")?)?;
        write_sequence(&a.out.join(&name).join("queries"), &render_all(&qposes, "queries")?)?;
        written.push(name);
    } else {
        for r in 0..a.rooms {
            let name = format!("room{r}");
            let data = match a.clustered {
                Some((c, p)) => clustered_dataset(cfg.seed, &name, c, p, &dcfg)?,
                None => room_dataset(cfg.seed, &name, &dcfg)?,
            };
            let dir = a.out.join(&name);
            write_sequence(&dir.join("db"), &data.database)?;
            write_sequence(&dir.join("queries"), &data.queries)?;
            write(&dir.join("scene.txt"), data.room.spec.to_text())?;
            written.push(name);
        }
    }
    let cfg_path = a.out.join("config.toml");
    if !cfg_path.exists() {
        let mut c = if has_config { cfg.clone() } else { PipelineConfig::desk() };
        c.intrinsics = Some(intrinsics);
        c.seed = cfg.seed;
        c.paths.ica = Some("ica.bin".into());
        c.paths.gmm = Some("gmm.bin".into());
        c.paths.db = Some("db.bin".into());
        write(&cfg_path, c.to_toml())?;
    }
    print(json!({ "out": a.out, "scenes": written, "db_frames": a.clustered.map_or(a.db_frames, |(c, p)| c * p), "queries": a.queries, "config": cfg_path }));
    Ok(())
}

pub fn db_stats(cfg: &PipelineConfig, db: Option<&PathBuf>, as_json: bool) -> CliResult {
    let path = pick(db, &cfg.paths.db, "db")?;
    let st = SignatureDatabase::open(&path)?.stats();
    let mv = format!("{:#018x}", st.model_version);
    if as_json {
        print(json!({ "entries": st.entries, "dim": st.dim, "g": st.g, "h": st.h, "model_version": mv, "with_pose": st.with_pose, "with_geometry": st.with_geometry }));
    } else {
        println!("entries        {}", st.entries);
        println!("dimension      {} (G = {}, H = {})", st.dim, st.g, st.h);
        println!("model version  {mv}");
        println!("with pose      {}", st.with_pose);
        println!("with geometry  {}", st.with_geometry);
    }
    Ok(())
}
