//! Database container file.
//!
//! Layout, little-endian:
//! header: magic "SCNSIGDB", version u32, reserved u32, G u32, H u32,
//!   model version u64;
//! records, back to back;
//! index: per record offset u64, length u64, FNV-1a u64 of the record;
//! trailer: record count u64, index offset u64, FNV-1a u64 of header and
//!   index, magic "SCNSIGIX".
//!
//! Record: frame id length u32 + UTF-8, flags u8 (1 pose, 2 source,
//! 4 geometry), pose as 12 f64 (row-major 3×4), source length u32 + UTF-8,
//! geometry length u32 + bytes, then G·H·25 f32 values.

use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{DbEntry, DbMeta};
use crate::error::{Error, Result};
use crate::fv::MAX_SIGNATURE_LEN;
use crate::numerics::{fnv1a, Pose, RigidTransform};
use crate::validation::ViewGeometry;

pub const DB_MAGIC: &[u8; 8] = b"SCNSIGDB";
const INDEX_MAGIC: &[u8; 8] = b"SCNSIGIX";
pub const DB_VERSION: u32 = 1;
const HEADER: usize = 32;
const TRAILER: usize = 32;
const INDEX_ROW: usize = 24;

fn header(meta: &DbMeta) -> Vec<u8> {
    let mut b = Vec::with_capacity(HEADER);
    b.extend_from_slice(DB_MAGIC);
    for v in [DB_VERSION, 0, meta.g as u32, meta.h as u32] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&meta.model_version.to_le_bytes());
    b
}

fn record(e: &DbEntry, pose: Option<&Pose>) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&(e.frame_id.len() as u32).to_le_bytes());
    b.extend_from_slice(e.frame_id.as_bytes());
    let flags = u8::from(pose.is_some()) | (u8::from(e.source.is_some()) << 1) | (u8::from(e.geometry.is_some()) << 2);
    b.push(flags);
    if let Some(p) = pose {
        for v in p.to_row_major() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(s) = &e.source {
        b.extend_from_slice(&(s.len() as u32).to_le_bytes());
        b.extend_from_slice(s.as_bytes());
    }
    if let Some(g) = &e.geometry {
        let gb = g.to_bytes();
        b.extend_from_slice(&(gb.len() as u32).to_le_bytes());
        b.extend_from_slice(&gb);
    }
    for v in &e.signature {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn trailer(count: u64, index_offset: u64, head: &[u8], index: &[u8]) -> Vec<u8> {
    let mut check = head.to_vec();
    check.extend_from_slice(index);
    let mut b = Vec::with_capacity(TRAILER);
    b.extend_from_slice(&count.to_le_bytes());
    b.extend_from_slice(&index_offset.to_le_bytes());
    b.extend_from_slice(&fnv1a(&check).to_le_bytes());
    b.extend_from_slice(INDEX_MAGIC);
    b
}

pub(super) fn encode<'a>(meta: &DbMeta, items: impl Iterator<Item = (&'a DbEntry, &'a Option<Pose>)>) -> Vec<u8> {
    let head = header(meta);
    let mut out = head.clone();
    let mut index = Vec::new();
    let mut count = 0u64;
    for (e, p) in items {
        let r = record(e, p.as_ref());
        index.extend_from_slice(&(out.len() as u64).to_le_bytes());
        index.extend_from_slice(&(r.len() as u64).to_le_bytes());
        index.extend_from_slice(&fnv1a(&r).to_le_bytes());
        out.extend_from_slice(&r);
        count += 1;
    }
    let index_offset = out.len() as u64;
    out.extend_from_slice(&index);
    out.extend_from_slice(&trailer(count, index_offset, &head, &index));
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Corrupt("database record truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::Corrupt("string is not UTF-8".into()))
    }
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn parse_header(b: &[u8]) -> Result<DbMeta> {
    if b.len() < HEADER + TRAILER || &b[..8] != DB_MAGIC {
        return Err(Error::Corrupt("not a signature database".into()));
    }
    let version = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes"));
    if version != DB_VERSION {
        return Err(Error::UnsupportedFormat(format!("database version {version}")));
    }
    let g = u32::from_le_bytes(b[16..20].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(b[20..24].try_into().expect("4 bytes")) as usize;
    let meta = DbMeta { g, h, model_version: u64_at(b, 24) };
    if g == 0 || h == 0 || (meta.g as u64) * (meta.h as u64) * (crate::fv::BLOCK as u64) > MAX_SIGNATURE_LEN {
        return Err(Error::Corrupt(format!("database layout G={g}, H={h}")));
    }
    Ok(meta)
}

/// Validates header, trailer and index; returns (meta, count, index offset).
fn parse_frame(b: &[u8]) -> Result<(DbMeta, usize, usize)> {
    let meta = parse_header(b)?;
    let t = b.len() - TRAILER;
    if &b[t + 24..] != INDEX_MAGIC {
        return Err(Error::Corrupt("database trailer missing".into()));
    }
    let count = u64_at(b, t);
    let index_offset = u64_at(b, t + 8);
    let index_len = count.checked_mul(INDEX_ROW as u64);
    if index_offset < HEADER as u64 || index_len.and_then(|l| l.checked_add(index_offset)) != Some(t as u64) {
        return Err(Error::Corrupt("database index out of range".into()));
    }
    let index_offset = index_offset as usize;
    let mut check = b[..HEADER].to_vec();
    check.extend_from_slice(&b[index_offset..t]);
    if fnv1a(&check) != u64_at(b, t + 16) {
        return Err(Error::Corrupt("database index checksum mismatch".into()));
    }
    Ok((meta, count as usize, index_offset))
}

pub(super) fn decode(b: &[u8]) -> Result<(DbMeta, Vec<(DbEntry, Option<Pose>)>)> {
    let (meta, count, index_offset) = parse_frame(b)?;
    let dim = meta.dim();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let row = index_offset + k * INDEX_ROW;
        let (off, len) = (u64_at(b, row), u64_at(b, row + 8));
        if off < HEADER as u64 || off.checked_add(len).is_none_or(|e| e > index_offset as u64) {
            return Err(Error::Corrupt(format!("record {k} out of range")));
        }
        let r = &b[off as usize..(off + len) as usize];
        if fnv1a(r) != u64_at(b, row + 16) {
            return Err(Error::Corrupt(format!("record {k} checksum mismatch")));
        }
        let mut c = Cursor { b: r, pos: 0 };
        let frame_id = c.string()?;
        let flags = c.take(1)?[0];
        if flags > 7 {
            return Err(Error::Corrupt(format!("record {k} flags {flags}")));
        }
        let pose = if flags & 1 != 0 {
            let mut v = [0.0; 12];
            for x in &mut v {
                *x = c.f64()?;
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Corrupt(format!("record {k} pose is not finite")));
            }
            Some(RigidTransform::from_row_major(&v))
        } else {
            None
        };
        let source = if flags & 2 != 0 { Some(c.string()?) } else { None };
        let geometry = if flags & 4 != 0 {
            let n = c.u32()? as usize;
            Some(ViewGeometry::from_bytes(c.take(n)?)?)
        } else {
            None
        };
        let raw = c.take(dim.checked_mul(4).ok_or_else(|| Error::Corrupt("dimension overflow".into()))?)?;
        if c.pos != r.len() {
            return Err(Error::Corrupt(format!("record {k} has trailing bytes")));
        }
        let signature = raw.chunks_exact(4).map(|x| f32::from_le_bytes(x.try_into().expect("4 bytes"))).collect();
        out.push((DbEntry { frame_id, signature, source, geometry }, pose));
    }
    Ok((meta, out))
}

pub(super) fn create(path: &Path, meta: &DbMeta) -> Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| Error::io(path, e))?;
    let empty: [(&DbEntry, &Option<Pose>); 0] = [];
    f.write_all(&encode(meta, empty.into_iter())).map_err(|e| Error::io(path, e))
}

/// Writes `new` records where the old index started, then a fresh index
/// covering old and new records and a new trailer.
pub(super) fn append(path: &Path, meta: &DbMeta, expect_count: usize, new: Vec<(&DbEntry, &Option<Pose>)>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = OpenOptions::new().read(true).write(true).open(path).map_err(io)?;
    let len = f.metadata().map_err(io)?.len() as usize;
    if len < HEADER + TRAILER {
        return Err(Error::Corrupt("database file too short".into()));
    }
    let mut head = vec![0u8; HEADER];
    f.read_exact(&mut head).map_err(io)?;
    let mut tail = vec![0u8; TRAILER];
    f.seek(SeekFrom::Start((len - TRAILER) as u64)).map_err(io)?;
    f.read_exact(&mut tail).map_err(io)?;
    let index_offset = u64_at(&tail, 8) as usize;
    if index_offset < HEADER || index_offset > len - TRAILER {
        return Err(Error::Corrupt("database index out of range".into()));
    }
    let mut image = head.clone();
    let mut index = vec![0u8; len - TRAILER - index_offset];
    f.seek(SeekFrom::Start(index_offset as u64)).map_err(io)?;
    f.read_exact(&mut index).map_err(io)?;
    // validate the frame with a synthetic image: header + index + trailer
    image.extend_from_slice(&index);
    image.extend_from_slice(&tail);
    let fake_offset = (HEADER as u64).to_le_bytes();
    let t = image.len() - TRAILER;
    image[t + 8..t + 16].copy_from_slice(&fake_offset);
    let (file_meta, count, _) = parse_frame(&image)?;
    if file_meta != *meta {
        return Err(Error::InvalidInput("database file layout differs from the open database".into()));
    }
    if count != expect_count {
        return Err(Error::InvalidInput(format!("database file holds {count} records, expected {expect_count}")));
    }
    let mut body = Vec::new();
    let mut pos = index_offset as u64;
    for (e, p) in new {
        let r = record(e, p.as_ref());
        index.extend_from_slice(&pos.to_le_bytes());
        index.extend_from_slice(&(r.len() as u64).to_le_bytes());
        index.extend_from_slice(&fnv1a(&r).to_le_bytes());
        pos += r.len() as u64;
        body.extend_from_slice(&r);
    }
    let total = (index.len() / INDEX_ROW) as u64;
    body.extend_from_slice(&index);
    body.extend_from_slice(&trailer(total, pos, &head, &index));
    f.seek(SeekFrom::Start(index_offset as u64)).map_err(io)?;
    f.write_all(&body).map_err(io)?;
    f.set_len(index_offset as u64 + body.len() as u64).map_err(io)?;
    f.sync_data().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{meta, random_sig};
    use super::super::SignatureDatabase;
    use crate::error::Error;
    use crate::numerics::{RigidTransform, SeedStream, Vec3};
    use crate::validation::ViewGeometry;

    #[test]
    fn create_append_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.bin");
        let mut rng = SeedStream::new(1).rng();
        let mut db = SignatureDatabase::create(&path, meta()).unwrap();
        assert!(SignatureDatabase::create(&path, meta()).is_err());
        let geo = ViewGeometry { means: vec![Vec3::new(1.0, 2.0, 3.0)], normals: vec![Vec3::z()], descriptors: vec![[0.5; 24]], sketch: None };
        for i in 0..5 {
            let pose = (i % 2 == 0).then(|| RigidTransform::from_translation(Vec3::new(i as f64, 0.0, 0.0)));
            db.insert(&random_sig(&format!("a{i}"), &mut rng), pose, Some(format!("src{i}")), (i == 1).then(|| geo.clone())).unwrap();
        }
        db.flush().unwrap();
        let first = std::fs::read(&path).unwrap();
        for i in 0..3 {
            db.insert(&random_sig(&format!("b{i}"), &mut rng), None, None, None).unwrap();
        }
        db.flush().unwrap();
        let second = std::fs::read(&path).unwrap();
        // records written by the first flush are untouched
        let records_end = first.len() - 32 - 5 * 24;
        assert_eq!(first[..records_end], second[..records_end]);
        let back = SignatureDatabase::open(&path).unwrap();
        assert_eq!(back.len(), 8);
        assert_eq!(back.entries(), db.entries());
        for i in 0..8 {
            assert_eq!(back.pose(i), db.pose(i));
        }
        assert_eq!(back.entry(1).geometry.as_ref(), Some(&geo));
        assert_eq!(second, db.encode());
    }

    #[test]
    fn corruption_is_detected() {
        let mut rng = SeedStream::new(2).rng();
        let mut db = SignatureDatabase::new(meta());
        for i in 0..3 {
            db.insert(&random_sig(&format!("x{i}"), &mut rng), None, None, None).unwrap();
        }
        let img = db.encode();
        assert!(SignatureDatabase::decode(&img).is_ok());
        for at in [0, 9, 20, 40, 100, img.len() - 40, img.len() - 20, img.len() - 1] {
            let mut bad = img.clone();
            bad[at] ^= 0x10;
            assert!(SignatureDatabase::decode(&bad).is_err(), "flip at {at}");
        }
        assert!(matches!(SignatureDatabase::decode(&img[..img.len() - 3]), Err(Error::Corrupt(_))));
        assert!(SignatureDatabase::decode(b"").is_err());
    }

    #[test]
    fn stale_handle_refuses_to_flush() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.bin");
        let mut rng = SeedStream::new(3).rng();
        let mut a = SignatureDatabase::create(&path, meta()).unwrap();
        let mut b = SignatureDatabase::open(&path).unwrap();
        a.insert(&random_sig("one", &mut rng), None, None, None).unwrap();
        a.flush().unwrap();
        b.insert(&random_sig("two", &mut rng), None, None, None).unwrap();
        assert!(matches!(b.flush(), Err(Error::InvalidInput(_))));
    }
}
