//! 7-scenes dataset layout: `frame-XXXXXX.depth.png` (16-bit millimeters)
//! with `frame-XXXXXX.pose.txt` (4×4 row-major camera-to-world).
//!
//! A sequence directory may also contain `intrinsics.txt` holding
//! `fx fy cx cy width height depth_scale` on one line; without it the Kinect
//! intrinsics of the original recordings are assumed.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::numerics::{orthonormalize, Mat3, Pose, Vec3};

use super::{CameraIntrinsics, RangeFrame};

/// Stored value the 7-scenes recordings use for missing depth.
const SEVEN_SCENES_INVALID: u16 = 65535;

/// Largest tolerated deviation from orthonormality in a pose file.
const POSE_TOLERANCE: f64 = 1e-3;

fn depth_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame-{index:06}.depth.png"))
}

fn pose_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame-{index:06}.pose.txt"))
}

/// Decodes a 16-bit grayscale PNG into `(width, height, depth)`.
pub fn decode_depth_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(format!("depth png: {e}")))?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok((w as usize, h as usize, buf.into_raw()))
        }
        other => Err(Error::UnsupportedFormat(format!(
            "depth png must be 16-bit grayscale, got {:?}",
            other.color()
        ))),
    }
}

pub fn encode_depth_png(width: usize, height: usize, depth: &[u16]) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, depth.to_vec())
            .ok_or(Error::DimensionMismatch { expected: width * height, found: depth.len() })?;
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(buf)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Parses a 4×4 row-major homogeneous pose. The rotation block must be
/// orthonormal within 1e-3; it is re-projected onto SO(3) on success.
pub fn parse_pose(text: &str) -> Result<Pose> {
    let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if rows.len() != 4 {
        return Err(Error::MalformedPose(format!("expected 4 rows, found {}", rows.len())));
    }
    let mut m = [[0.0f64; 4]; 4];
    for (i, row) in rows.iter().enumerate() {
        let vals: Vec<f64> = row
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::MalformedPose(format!("bad number {t:?} in row {}", i + 1))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(Error::MalformedPose(format!("row {} has {} entries", i + 1, vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedPose(format!("non-finite entry in row {}", i + 1)));
        }
        m[i].copy_from_slice(&vals);
    }
    let bottom = [0.0, 0.0, 0.0, 1.0];
    if m[3].iter().zip(bottom).any(|(a, b)| (a - b).abs() > POSE_TOLERANCE) {
        return Err(Error::MalformedPose("last row is not [0 0 0 1]".into()));
    }
    let r = Mat3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]);
    let ortho = (r.transpose() * r - Mat3::identity()).amax();
    if ortho > POSE_TOLERANCE || (r.determinant() - 1.0).abs() > POSE_TOLERANCE {
        return Err(Error::MalformedPose(format!("rotation block is not orthonormal (error {ortho:.2e})")));
    }
    Ok(Pose::new(orthonormalize(&r), Vec3::new(m[0][3], m[1][3], m[2][3])))
}

pub fn format_pose(pose: &Pose) -> String {
    let mut s = String::new();
    for i in 0..3 {
        let r = &pose.rotation;
        s.push_str(&format!(
            "{:e} {:e} {:e} {:e}\n",
            r[(i, 0)],
            r[(i, 1)],
            r[(i, 2)],
            pose.translation[i]
        ));
    }
    s.push_str("0 0 0 1\n");
    s
}

/// Parses `fx fy cx cy width height depth_scale`, ignoring `#` comments.
pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .collect();
    if tokens.len() != 7 {
        return Err(Error::parse(1, format!("intrinsics need 7 values, found {}", tokens.len())));
    }
    let f = |i: usize| tokens[i].parse::<f64>().map_err(|_| Error::parse(1, format!("bad number {:?}", tokens[i])));
    let u = |i: usize| tokens[i].parse::<usize>().map_err(|_| Error::parse(1, format!("bad integer {:?}", tokens[i])));
    let k = CameraIntrinsics { fx: f(0)?, fy: f(1)?, cx: f(2)?, cy: f(3)?, width: u(4)?, height: u(5)?, depth_scale: f(6)? };
    k.validate()?;
    Ok(k)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads frame `index` of a sequence directory, using `intrinsics.txt` when
/// present.
pub fn load_sevenscenes_frame(dir: &Path, index: usize) -> Result<RangeFrame> {
    let intr_path = dir.join("intrinsics.txt");
    let intrinsics = if intr_path.exists() {
        parse_intrinsics(&String::from_utf8_lossy(&read(&intr_path)?))?
    } else {
        CameraIntrinsics::seven_scenes()
    };
    load_sevenscenes_frame_with(dir, index, intrinsics)
}

pub fn load_sevenscenes_frame_with(dir: &Path, index: usize, intrinsics: CameraIntrinsics) -> Result<RangeFrame> {
    let (w, h, mut depth) = decode_depth_png(&read(&depth_path(dir, index))?)?;
    if w != intrinsics.width || h != intrinsics.height {
        return Err(Error::DimensionMismatch { expected: intrinsics.width * intrinsics.height, found: w * h });
    }
    for d in &mut depth {
        if *d == SEVEN_SCENES_INVALID {
            *d = 0;
        }
    }
    let pose = parse_pose(&String::from_utf8_lossy(&read(&pose_path(dir, index))?))?;
    let seq = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let scene = dir
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frame_id = format!("{scene}/{seq}/frame-{index:06}");
    Ok(RangeFrame::new(frame_id, intrinsics, depth)?.with_pose(pose))
}

/// Sorted frame indices with both depth and pose files present.
pub fn list_sevenscenes_frames(dir: &Path) -> Result<Vec<usize>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("frame-").and_then(|r| r.strip_suffix(".depth.png")) {
            if let Ok(i) = num.parse::<usize>() {
                if pose_path(dir, i).exists() {
                    out.push(i);
                }
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Writes a frame (and its pose, when present) in the 7-scenes layout, plus
/// `intrinsics.txt`.
pub fn write_sevenscenes_frame(dir: &Path, index: usize, frame: &RangeFrame) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = &frame.intrinsics;
    let png = encode_depth_png(k.width, k.height, &frame.depth)?;
    let dp = depth_path(dir, index);
    fs::write(&dp, png).map_err(|e| Error::io(&dp, e))?;
    if let Some(pose) = &frame.pose_gt {
        let pp = pose_path(dir, index);
        fs::write(&pp, format_pose(pose)).map_err(|e| Error::io(&pp, e))?;
    }
    let ip = dir.join("intrinsics.txt");
    let text = format!("{:e} {:e} {:e} {:e} {} {} {:e}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale);
    fs::write(&ip, text).map_err(|e| Error::io(&ip, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rot_exp;

    #[test]
    fn pose_round_trip_is_orthonormal() {
        let pose = Pose::new(rot_exp(&Vec3::new(0.1, -0.4, 0.9)), Vec3::new(1.0, 2.0, -3.0));
        let back = parse_pose(&format_pose(&pose)).unwrap();
        assert!(back.is_proper(1e-9));
        assert!((back.rotation - pose.rotation).amax() < 1e-12);
        assert!((back.translation - pose.translation).norm() < 1e-12);
    }

    #[test]
    fn three_row_pose_is_malformed() {
        let err = parse_pose("1 0 0 0\n0 1 0 0\n0 0 1 0\n").unwrap_err();
        assert!(matches!(err, Error::MalformedPose(_)));
    }

    #[test]
    fn skewed_rotation_is_malformed() {
        let err = parse_pose("1 0.1 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap_err();
        assert!(matches!(err, Error::MalformedPose(_)));
    }

    #[test]
    fn eight_bit_png_is_unsupported() {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(4, 2, vec![7u8; 8]).unwrap();
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(buf).write_to(&mut out, ImageFormat::Png).unwrap();
        assert!(matches!(decode_depth_png(&out.into_inner()), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn frame_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let seq = dir.path().join("office").join("seq-01");
        let k = CameraIntrinsics::desk();
        let depth: Vec<u16> = (0..k.width * k.height).map(|i| (i % 4000) as u16).collect();
        let pose = Pose::new(rot_exp(&Vec3::new(0.0, 0.3, 0.0)), Vec3::new(0.5, 0.0, 1.0));
        let frame = RangeFrame::new("x", k, depth.clone()).unwrap().with_pose(pose);
        write_sevenscenes_frame(&seq, 3, &frame).unwrap();
        assert_eq!(list_sevenscenes_frames(&seq).unwrap(), vec![3]);
        let back = load_sevenscenes_frame(&seq, 3).unwrap();
        assert_eq!(back.depth, depth);
        assert_eq!(back.intrinsics, k);
        assert_eq!(back.frame_id, "office/seq-01/frame-000003");
        assert!(back.pose_gt.unwrap().is_proper(1e-9));
    }

    #[test]
    fn missing_pose_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let k = CameraIntrinsics::desk();
        let frame = RangeFrame::new("x", k, vec![1; k.width * k.height]).unwrap();
        write_sevenscenes_frame(dir.path(), 0, &frame).unwrap();
        assert!(matches!(load_sevenscenes_frame(dir.path(), 0), Err(Error::MissingFile(_))));
        assert!(matches!(load_sevenscenes_frame(dir.path(), 9), Err(Error::MissingFile(_))));
    }
}
