use crate::error::{Error, Result};
use crate::numerics::{Mat3, Vec3};
use crate::spatial::SpatialHash;

use super::{PixelIndex, PointCloud, RangeFrame};

/// Default neighborhood radius for normal estimation, meters.
pub const DEFAULT_NORMAL_RADIUS: f64 = 0.05;

/// Smallest `|n · ray|` used when converting pixel footprints to surface area.
const MIN_INCIDENCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalStatus {
    Estimated,
    /// Fewer than three neighbors or a rank-1 neighborhood; the normal was set
    /// to the unit vector pointing at the sensor.
    DegenerateNeighborhood,
}

/// Back-projects every nonzero pixel through the pinhole model.
pub fn depth_to_cloud(frame: &RangeFrame) -> Result<PointCloud> {
    let k = &frame.intrinsics;
    k.validate()?;
    let expected = k.width * k.height;
    if frame.depth.len() != expected {
        return Err(Error::DimensionMismatch { expected, found: frame.depth.len() });
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..k.height {
        for u in 0..k.width {
            let idx = v * k.width + u;
            let d = frame.depth[idx];
            if d == 0 {
                continue;
            }
            let z = k.depth_scale * f64::from(d);
            points.push(k.ray(u as f64, v as f64) * z);
            pixels.push(idx as u32);
        }
    }
    if points.is_empty() {
        return Err(Error::AllInvalidDepth);
    }
    Ok(PointCloud {
        points,
        normals: None,
        pixel_index: Some(PixelIndex { intrinsics: *k, pixels }),
        normal_status: None,
        point_area: None,
    })
}

/// PCA normals over a radius neighborhood, oriented toward the sensor origin.
/// Also fills the per-point surface-area estimate.
pub fn estimate_normals(cloud: &PointCloud, radius: f64) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!("normal radius must be positive, got {radius}")));
    }
    let pts = &cloud.points;
    let hash = SpatialHash::new(pts, radius);
    let mut normals = Vec::with_capacity(pts.len());
    let mut status = Vec::with_capacity(pts.len());
    let mut counts = Vec::with_capacity(pts.len());

    for p in pts {
        let nbrs = if pts.len() >= 3 { hash.within(pts, p, radius) } else { Vec::new() };
        counts.push(nbrs.len().max(1));
        match pca_normal(pts, &nbrs) {
            Some(n) => {
                normals.push(if n.dot(p) > 0.0 { -n } else { n });
                status.push(NormalStatus::Estimated);
            }
            None => {
                normals.push(sensor_facing(p));
                status.push(NormalStatus::DegenerateNeighborhood);
            }
        }
    }

    let areas = match &cloud.pixel_index {
        Some(px) => pts
            .iter()
            .zip(&normals)
            .map(|(p, n)| {
                let range = p.norm();
                if range == 0.0 {
                    return 0.0;
                }
                let ray = p / range;
                let k = &px.intrinsics;
                p.z * p.z * ray.z / (k.fx * k.fy * n.dot(&ray).abs().max(MIN_INCIDENCE))
            })
            .collect(),
        None => {
            let disk = std::f64::consts::PI * radius * radius;
            counts.iter().map(|&c| disk / c as f64).collect()
        }
    };

    Ok(PointCloud {
        points: pts.clone(),
        normals: Some(normals),
        pixel_index: cloud.pixel_index.clone(),
        normal_status: Some(status),
        point_area: Some(areas),
    })
}

fn sensor_facing(p: &Vec3) -> Vec3 {
    let n = p.norm();
    if n > 0.0 {
        -p / n
    } else {
        Vec3::new(0.0, 0.0, -1.0)
    }
}

fn pca_normal(pts: &[Vec3], nbrs: &[u32]) -> Option<Vec3> {
    if nbrs.len() < 3 {
        return None;
    }
    let n = nbrs.len() as f64;
    let mean = nbrs.iter().map(|&i| pts[i as usize]).sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for &i in nbrs {
        let d = pts[i as usize] - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (mid, hi) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(hi > 0.0) || mid <= 1e-9 * hi {
        return None;
    }
    let v: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    let norm = v.norm();
    (norm > 0.0).then(|| v / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraIntrinsics;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 24.0, width: 640, height: 480, depth_scale: 0.001 }
    }

    fn frame_with(pixels: &[((usize, usize), u16)]) -> RangeFrame {
        let k = intrinsics();
        let mut depth = vec![0u16; k.width * k.height];
        for &((u, v), d) in pixels {
            depth[v * k.width + u] = d;
        }
        RangeFrame::new("t", k, depth).unwrap()
    }

    #[test]
    fn principal_point_backprojects_onto_axis() {
        let cloud = depth_to_cloud(&frame_with(&[((32, 24), 1000)])).unwrap();
        assert_eq!(cloud.points.len(), 1);
        assert!((cloud.points[0] - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(cloud.pixel_index.as_ref().unwrap().uv(0), (32, 24));
    }

    #[test]
    fn offset_pixel_backprojection() {
        // u = cx + fx
        let cloud = depth_to_cloud(&frame_with(&[((132, 24), 2000)])).unwrap();
        assert!((cloud.points[0] - Vec3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn all_zero_depth_is_rejected() {
        assert!(matches!(depth_to_cloud(&frame_with(&[])), Err(Error::AllInvalidDepth)));
    }

    #[test]
    fn wrong_depth_length_is_rejected() {
        let frame = RangeFrame { depth: vec![1; 10], intrinsics: intrinsics(), pose_gt: None, frame_id: "x".into() };
        assert!(matches!(depth_to_cloud(&frame), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn reprojection_round_trip_within_one_unit() {
        let k = intrinsics();
        let depth: Vec<u16> = (0..k.width * k.height).map(|i| ((i * 7919) % 5000) as u16).collect();
        let frame = RangeFrame::new("rt", k, depth.clone()).unwrap();
        let cloud = depth_to_cloud(&frame).unwrap();
        let px = cloud.pixel_index.as_ref().unwrap();
        for (i, p) in cloud.points.iter().enumerate() {
            let (u, v) = k.project(p).unwrap();
            let (pu, pv) = px.uv(i);
            assert!((u - pu as f64).abs() < 1e-6 && (v - pv as f64).abs() < 1e-6);
            let d = (p.z / k.depth_scale).round() as i64;
            assert!((d - i64::from(depth[px.pixels[i] as usize])).abs() <= 1);
        }
    }

    #[test]
    fn planar_normals_face_sensor() {
        let pts: Vec<Vec3> = (0..400)
            .map(|i| Vec3::new((i % 20) as f64 * 0.01 - 0.1, (i / 20) as f64 * 0.01 - 0.1, 1.0))
            .collect();
        let cloud = estimate_normals(&PointCloud::from_points(pts), 0.05).unwrap();
        for (n, p) in cloud.normals.as_ref().unwrap().iter().zip(&cloud.points) {
            assert!((n.norm() - 1.0).abs() < 1e-6);
            assert!((n.dot(&Vec3::z()).abs() - 1.0).abs() < 1e-6);
            assert!(n.dot(p) <= 1e-6);
        }
        assert!(cloud.normal_status.unwrap().iter().all(|s| *s == NormalStatus::Estimated));
    }

    #[test]
    fn two_points_are_degenerate() {
        let pts = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.01, 0.0, 1.0)];
        let cloud = estimate_normals(&PointCloud::from_points(pts), 0.05).unwrap();
        assert!(cloud.normal_status.as_ref().unwrap().iter().all(|s| *s == NormalStatus::DegenerateNeighborhood));
        for (n, p) in cloud.normals.unwrap().iter().zip(&cloud.points) {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(p) < 0.0);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        // Visible cap of a unit sphere centered 3 m ahead, sampled on a
        // Fibonacci lattice.
        let center = Vec3::new(0.0, 0.0, 3.0);
        let n = 40_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                center + Vec3::new(r * th.cos(), y, r * th.sin())
            })
            .filter(|p| (p - center).dot(&-p.normalize()) > 0.2)
            .collect();
        let cloud = estimate_normals(&PointCloud::from_points(pts), 0.05).unwrap();
        for (n, p) in cloud.normals.as_ref().unwrap().iter().zip(&cloud.points) {
            let radial = (p - center).normalize();
            let angle = n.dot(&radial).abs().min(1.0).acos().to_degrees();
            assert!(angle <= 2.0, "normal off by {angle} deg");
            assert!(n.dot(p) <= 1e-6);
        }
    }
}
