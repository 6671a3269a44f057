//! Plain-text segmentation exchange format:
//!
//! ```text
//! scenesig-segmentation 1
//! frame_id <id, rest of line>
//! levels <H>
//! points <N>
//! counts <c_1> ... <c_H>
//! level 1
//! <N patch ids in 0..c_1, whitespace separated, any line breaks>
//! level 2
//! ...
//! ```
//!
//! Lines starting with `#` are ignored. Level h is the h-th finest.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scene::PointCloud;

use super::{PatchSet, PointGraph, SegmentationConfig, SegmentationHierarchy};

const MAGIC: &str = "scenesig-segmentation 1";

/// Per-point patch ids for every level, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationLabels {
    pub frame_id: String,
    pub n_points: usize,
    pub levels: Vec<Vec<u32>>,
}

impl SegmentationLabels {
    pub fn from_hierarchy(frame_id: &str, hier: &SegmentationHierarchy) -> Self {
        Self {
            frame_id: frame_id.to_string(),
            n_points: hier.levels.first().map_or(0, |l| l.labels.len()),
            levels: hier.levels.iter().map(|l| l.labels.clone()).collect(),
        }
    }

    /// Rebuilds patches over `cloud`. Adjacency comes from the cloud's
    /// point graph under `cfg`.
    pub fn to_hierarchy(&self, cloud: &PointCloud, cfg: &SegmentationConfig) -> Result<SegmentationHierarchy> {
        if cloud.len() != self.n_points {
            return Err(Error::DimensionMismatch { expected: cloud.len(), found: self.n_points });
        }
        let graph = PointGraph::build(cloud, cfg);
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(h, labels)| PatchSet::from_labels(cloud, &graph, labels.clone(), h + 1))
            .collect::<Result<Vec<_>>>()?;
        let hier = SegmentationHierarchy { levels };
        hier.check(cloud.len())?;
        Ok(hier)
    }
}

pub fn export_segmentation(labels: &SegmentationLabels) -> String {
    let mut s = String::new();
    let counts: Vec<String> =
        labels.levels.iter().map(|l| (l.iter().max().map_or(0, |&m| m + 1)).to_string()).collect();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "frame_id {}", labels.frame_id);
    let _ = writeln!(s, "levels {}", labels.levels.len());
    let _ = writeln!(s, "points {}", labels.n_points);
    let _ = writeln!(s, "counts {}", counts.join(" "));
    for (h, level) in labels.levels.iter().enumerate() {
        let _ = writeln!(s, "level {}", h + 1);
        for chunk in level.chunks(32) {
            let row: Vec<String> = chunk.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    }
    s
}

pub fn parse_segmentation(text: &str) -> Result<SegmentationLabels> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(0, format!("unexpected end of input, expected {what}")));

    let (ln, magic) = next("header")?;
    if magic != MAGIC {
        return Err(Error::parse(ln, "not a scenesig segmentation file"));
    }
    let (ln, l) = next("frame_id")?;
    let frame_id = l.strip_prefix("frame_id").ok_or_else(|| Error::parse(ln, "expected frame_id"))?.trim().to_string();
    let levels = keyed_usize(next("levels")?, "levels")?;
    let n_points = keyed_usize(next("points")?, "points")?;
    if levels == 0 {
        return Err(Error::parse(ln, "levels must be at least 1"));
    }
    let (ln, l) = next("counts")?;
    let counts: Vec<u32> = l
        .strip_prefix("counts")
        .ok_or_else(|| Error::parse(ln, "expected counts"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("bad count {t:?}"))))
        .collect::<Result<_>>()?;
    if counts.len() != levels {
        return Err(Error::parse(ln, format!("{} counts for {levels} levels", counts.len())));
    }

    let mut out = Vec::new();
    let mut pending: Option<(usize, usize)> = None;
    let mut current: Vec<u32> = Vec::new();
    for (ln, l) in lines {
        if let Some(rest) = l.strip_prefix("level") {
            if let Some((h, _)) = pending.take() {
                finish(&mut out, &mut current, h, n_points, counts[h - 1], ln)?;
            }
            let h: usize = rest.trim().parse().map_err(|_| Error::parse(ln, "bad level number"))?;
            if h != out.len() + 1 || h > levels {
                return Err(Error::parse(ln, format!("unexpected level {h}")));
            }
            pending = Some((h, ln));
            continue;
        }
        if pending.is_none() {
            return Err(Error::parse(ln, "labels before a level line"));
        }
        for t in l.split_whitespace() {
            let v: u32 = t.parse().map_err(|_| Error::parse(ln, format!("bad label {t:?}")))?;
            if current.len() >= n_points {
                return Err(Error::parse(ln, "more labels than points"));
            }
            current.push(v);
        }
    }
    if let Some((h, ln)) = pending {
        finish(&mut out, &mut current, h, n_points, counts[h - 1], ln)?;
    }
    if out.len() != levels {
        return Err(Error::parse(0, format!("found {} of {levels} levels", out.len())));
    }
    Ok(SegmentationLabels { frame_id, n_points, levels: out })
}

fn finish(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, h: usize, n: usize, count: u32, ln: usize) -> Result<()> {
    if current.len() != n {
        return Err(Error::parse(ln, format!("level {h} has {} labels, expected {n}", current.len())));
    }
    if let Some(bad) = current.iter().find(|&&v| v >= count) {
        return Err(Error::parse(ln, format!("level {h}: label {bad} outside 0..{count}")));
    }
    out.push(std::mem::take(current));
    Ok(())
}

fn keyed_usize((ln, line): (usize, &str), key: &str) -> Result<usize> {
    line.strip_prefix(key)
        .and_then(|r| r.trim().parse().ok())
        .ok_or_else(|| Error::parse(ln, format!("expected `{key} <integer>`")))
}

/// Reads a segmentation file and rebuilds it over `cloud`.
pub fn import_segmentation(text: &str, cloud: &PointCloud, cfg: &SegmentationConfig) -> Result<SegmentationHierarchy> {
    parse_segmentation(text)?.to_hierarchy(cloud, cfg)
}
