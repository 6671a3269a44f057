//! Frame discovery and loading from 7-scenes style directories.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use scenesig::features::RawFeature;
use scenesig::pipeline::{extract_frame, pool_part, pool_share, EncodedView, Encoder, PipelineConfig, ViewFeatures};
use scenesig::scene::{list_sevenscenes_frames, load_sevenscenes_frame, load_sevenscenes_frame_with, RangeFrame};
use scenesig::{Error, Pose, Result};

/// Frames encoded per parallel batch.
const CHUNK: usize = 32;

/// Sequence directories under each root, in sorted order. A directory with
/// frames is a sequence; otherwise its subdirectories are searched.
pub fn sequences(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for root in roots {
        if !root.is_dir() {
            return Err(Error::MissingFile(root.clone()));
        }
        collect(root, &mut out)?;
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no frames found under {}", show(roots))));
    }
    Ok(out)
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !list_sevenscenes_frames(dir)?.is_empty() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subs.sort();
    for s in subs {
        collect(&s, out)?;
    }
    Ok(())
}

fn show(roots: &[PathBuf]) -> String {
    roots.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

/// Frame indices of a sequence, every `stride`-th one.
pub fn frame_indices(dir: &Path, stride: usize) -> Result<Vec<usize>> {
    Ok(list_sevenscenes_frames(dir)?.into_iter().step_by(stride.max(1)).collect())
}

pub fn load(dir: &Path, index: usize, cfg: &PipelineConfig) -> Result<RangeFrame> {
    match cfg.intrinsics {
        Some(k) if !dir.join("intrinsics.txt").exists() => load_sevenscenes_frame_with(dir, index, k),
        _ => load_sevenscenes_frame(dir, index),
    }
}

/// Extracts and encodes every `stride`-th frame of the sequences in parallel
/// batches, handing each result to `sink` in order.
pub fn encode_each(
    seqs: &[PathBuf],
    stride: usize,
    enc: &Encoder,
    mut sink: impl FnMut(&RangeFrame, &ViewFeatures, EncodedView) -> Result<()>,
) -> Result<usize> {
    let mut n = 0;
    for dir in seqs {
        let idx = frame_indices(dir, stride)?;
        for chunk in idx.chunks(CHUNK) {
            let frames = chunk.iter().map(|&i| load(dir, i, &enc.cfg)).collect::<Result<Vec<_>>>()?;
            let done: Vec<Result<(ViewFeatures, EncodedView)>> = frames
                .par_iter()
                .map(|f| {
                    let v = extract_frame(f, &enc.cfg)?;
                    let e = enc.encode_features(&v)?;
                    Ok((v, e))
                })
                .collect();
            for (f, r) in frames.iter().zip(done) {
                let (v, e) = r.map_err(|e| Error::InvalidInput(format!("{}: {e}", f.frame_id)))?;
                sink(f, &v, e)?;
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Raw-feature training pool over every `stride`-th frame, built a batch at
/// a time.
pub fn training_pool(seqs: &[PathBuf], stride: usize, cfg: &PipelineConfig) -> Result<Vec<RawFeature>> {
    let mut jobs = Vec::new();
    for dir in seqs {
        for i in frame_indices(dir, stride)? {
            jobs.push((dir, i));
        }
    }
    let share = pool_share(jobs.len(), cfg);
    let mut pool = Vec::new();
    for chunk in jobs.chunks(CHUNK) {
        let frames = chunk.iter().map(|(d, i)| load(d, *i, cfg)).collect::<Result<Vec<_>>>()?;
        pool.extend(pool_part(&frames, share, cfg)?);
    }
    Ok(pool)
}

/// Encoded queries with their poses.
pub fn encode_queries(seqs: &[PathBuf], enc: &Encoder) -> Result<Vec<(EncodedView, Option<Pose>)>> {
    let mut out = Vec::new();
    encode_each(seqs, 1, enc, |f, _, e| {
        out.push((e, f.pose_gt));
        Ok(())
    })?;
    Ok(out)
}
