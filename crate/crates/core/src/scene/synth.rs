//! Scene descriptions built from planes and axis-aligned boxes, rendered to
//! depth frames by ray casting.
//!
//! Text format, one primitive per line, `#` starts a comment:
//!
//! ```text
//! plane <px> <py> <pz>  <nx> <ny> <nz>  <half_u> <half_v>
//! box   <cx> <cy> <cz>  <hx> <hy> <hz>
//! ```
//!
//! A plane is a rectangle centered at `p` with normal `n`. Its in-plane axes
//! are `u = normalize(ẑ × n)` and `v = n × u`, or `u = normalize(x̂ - (x̂·n) n)`
//! when `|n·ẑ| > 0.9`. A box is given by its center and half-extents; a sensor
//! placed inside a box sees its inner faces, which is how room shells are
//! modeled.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Pose, SeedStream, Vec3};

use super::{CameraIntrinsics, RangeFrame};

const MIN_HIT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Plane { center: Vec3, normal: Vec3, half_u: f64, half_v: f64 },
    Box { center: Vec3, half: Vec3 },
}

impl Primitive {
    pub fn plane(center: Vec3, normal: Vec3, half_u: f64, half_v: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) || !(half_u > 0.0) || !(half_v > 0.0) {
            return Err(Error::InvalidInput("plane needs a nonzero normal and positive extents".into()));
        }
        Ok(Primitive::Plane { center, normal: normal / n, half_u, half_v })
    }

    pub fn cuboid(center: Vec3, half: Vec3) -> Result<Self> {
        if half.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidInput("box half-extents must be positive".into()));
        }
        Ok(Primitive::Box { center, half })
    }

    /// In-plane axes of a plane primitive.
    pub fn plane_axes(normal: &Vec3) -> (Vec3, Vec3) {
        let u = if normal.z.abs() > 0.9 {
            let x = Vec3::x();
            (x - normal * normal.dot(&x)).normalize()
        } else {
            Vec3::z().cross(normal).normalize()
        };
        (u, normal.cross(&u))
    }

    /// Ray parameter of the first intersection with `o + λ d`, `λ > 0`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self {
            Primitive::Plane { center, normal, half_u, half_v } => {
                let denom = d.dot(normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let lambda = (center - o).dot(normal) / denom;
                if lambda <= MIN_HIT {
                    return None;
                }
                let q = o + d * lambda - center;
                let (u, v) = Self::plane_axes(normal);
                (q.dot(&u).abs() <= *half_u && q.dot(&v).abs() <= *half_v).then_some(lambda)
            }
            Primitive::Box { center, half } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                for i in 0..3 {
                    let lo = center[i] - half[i];
                    let hi = center[i] + half[i];
                    if d[i].abs() < 1e-15 {
                        if o[i] < lo || o[i] > hi {
                            return None;
                        }
                        continue;
                    }
                    let a = (lo - o[i]) / d[i];
                    let b = (hi - o[i]) / d[i];
                    tmin = tmin.max(a.min(b));
                    tmax = tmax.min(a.max(b));
                }
                if tmax < tmin || tmax <= MIN_HIT {
                    return None;
                }
                Some(if tmin > MIN_HIT { tmin } else { tmax })
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    /// Nearest hit along a world-frame ray.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(f64::total_cmp)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# scene: planes and axis-aligned boxes\n");
        for p in &self.primitives {
            match p {
                Primitive::Plane { center: c, normal: n, half_u, half_v } => s.push_str(&format!(
                    "plane {} {} {}  {} {} {}  {} {}\n",
                    c.x, c.y, c.z, n.x, n.y, n.z, half_u, half_v
                )),
                Primitive::Box { center: c, half: h } => {
                    s.push_str(&format!("box {} {} {}  {} {} {}\n", c.x, c.y, c.z, h.x, h.y, h.z))
                }
            }
        }
        s
    }
}

/// Parses the scene text format described in the module docs.
pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let mut primitives = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let kind = tokens.next().unwrap_or_default();
        let nums: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(line_no, format!("bad number {t:?}")))
            })
            .collect::<Result<_>>()?;
        let want = match kind {
            "plane" => 8,
            "box" => 6,
            other => return Err(Error::parse(line_no, format!("unknown primitive {other:?}"))),
        };
        if nums.len() != want {
            return Err(Error::parse(line_no, format!("{kind} needs {want} numbers, found {}", nums.len())));
        }
        let prim = if kind == "plane" {
            Primitive::plane(Vec3::new(nums[0], nums[1], nums[2]), Vec3::new(nums[3], nums[4], nums[5]), nums[6], nums[7])
        } else {
            Primitive::cuboid(Vec3::new(nums[0], nums[1], nums[2]), Vec3::new(nums[3], nums[4], nums[5]))
        }
        .map_err(|e| Error::parse(line_no, e.to_string()))?;
        primitives.push(prim);
    }
    Ok(SceneSpec { primitives })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub intrinsics: CameraIntrinsics,
    /// Standard deviation of additive Gaussian depth noise, meters.
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Hits farther than this (camera z, meters) are dropped.
    pub max_range: f64,
    pub frame_id: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::desk(),
            noise_sigma: 0.0,
            noise_seed: 0,
            max_range: 10.0,
            frame_id: "synth".into(),
        }
    }
}

/// Renders `spec` from camera-to-world `pose`.
pub fn synth_scene(spec: &SceneSpec, pose: &Pose, opts: &SynthOptions) -> Result<RangeFrame> {
    if spec.primitives.is_empty() {
        return Err(Error::EmptyScene);
    }
    let k = &opts.intrinsics;
    k.validate()?;
    let noise = if opts.noise_sigma > 0.0 {
        Some(Normal::new(0.0, opts.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    let mut rng = SeedStream::new(opts.noise_seed).derive("depth-noise").rng();
    let max_units = f64::from(u16::MAX);
    let mut depth = vec![0u16; k.width * k.height];
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = pose.rotation * k.ray(u as f64, v as f64);
            // The camera-frame ray has unit z, so the ray parameter is depth.
            let Some(mut z) = spec.raycast(&pose.translation, &dir) else { continue };
            if let Some(n) = &noise {
                z += n.sample(&mut rng);
            }
            if z <= 0.0 || z > opts.max_range {
                continue;
            }
            let units = (z / k.depth_scale).round();
            depth[v * k.width + u] = units.clamp(1.0, max_units) as u16;
        }
    }
    Ok(RangeFrame::new(opts.frame_id.clone(), *k, depth)?.with_pose(*pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rot_exp, RigidTransform};
    use crate::scene::depth_to_cloud;

    fn opts(k: CameraIntrinsics) -> SynthOptions {
        SynthOptions { intrinsics: k, ..Default::default() }
    }

    #[test]
    fn frontal_plane_has_constant_depth() {
        let spec = SceneSpec::new(vec![Primitive::plane(Vec3::new(0.0, 0.0, 2.0), -Vec3::z(), 50.0, 50.0).unwrap()]);
        let k = CameraIntrinsics::desk();
        let frame = synth_scene(&spec, &Pose::identity(), &opts(k)).unwrap();
        assert!(frame.depth.iter().all(|&d| d == 2000));
    }

    #[test]
    fn empty_scene_is_rejected() {
        let err = synth_scene(&SceneSpec::default(), &Pose::identity(), &SynthOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyScene));
    }

    #[test]
    fn box_silhouette_matches_pinhole_area() {
        let k = CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 99.5, cy: 99.5, width: 200, height: 200, depth_scale: 0.001 };
        let spec = SceneSpec::new(vec![Primitive::cuboid(Vec3::new(0.0, 0.0, 3.0), Vec3::repeat(0.5)).unwrap()]);
        let frame = synth_scene(&spec, &Pose::identity(), &opts(k)).unwrap();
        // Front face at z = 2.5 projects to a square of side fx * 1.0 / 2.5.
        let side = k.fx * 1.0 / 2.5;
        let analytic = side * side;
        let count = frame.valid_pixels() as f64;
        assert!((count - analytic).abs() <= 0.05 * analytic, "{count} vs {analytic}");
    }

    #[test]
    fn inside_a_box_sees_inner_walls() {
        let spec = SceneSpec::new(vec![Primitive::cuboid(Vec3::zeros(), Vec3::new(2.0, 2.0, 3.0)).unwrap()]);
        let frame = synth_scene(&spec, &Pose::identity(), &SynthOptions::default()).unwrap();
        assert_eq!(frame.valid_pixels(), frame.depth.len());
        assert_eq!(frame.depth_at(80, 60), 3000);
    }

    #[test]
    fn poses_related_by_a_transform_see_the_same_surface() {
        let spec = parse_scene_spec(
            "box 0 0 1.5  3 2.5 1.5\nbox 1.2 0.8 0.4  0.3 0.4 0.4\nplane -1 -1 1.2  1 1 0  0.4 0.3\n",
        )
        .unwrap();
        let p1 = Pose::new(rot_exp(&Vec3::new(0.0, 1.3, 0.2)), Vec3::new(0.1, 0.2, 1.4));
        let t = RigidTransform::new(rot_exp(&Vec3::new(0.1, -0.2, 0.05)), Vec3::new(0.2, -0.1, 0.05));
        let p2 = p1.compose(&t);
        let f2 = synth_scene(&spec, &p2, &SynthOptions::default()).unwrap();
        let c2 = depth_to_cloud(&f2).unwrap();
        let (mut covisible, mut within) = (0, 0);
        for p in &c2.points {
            // p expressed in camera 1 coordinates
            let q = t.apply(p);
            let world_dir = p1.rotation * (q / q.z);
            if let Some(z) = spec.raycast(&p1.translation, &world_dir) {
                if (z - q.z).abs() < 0.05 {
                    covisible += 1;
                    within += usize::from((z - q.z).abs() <= 0.001);
                }
            }
        }
        assert!(covisible > c2.points.len() / 2);
        // quantization can exceed 1 mm only at grazing incidence
        assert!(within as f64 >= 0.98 * covisible as f64, "{within}/{covisible}");
    }

    #[test]
    fn noise_is_seeded() {
        let spec = SceneSpec::new(vec![Primitive::plane(Vec3::new(0.0, 0.0, 2.0), -Vec3::z(), 50.0, 50.0).unwrap()]);
        let o = SynthOptions { noise_sigma: 0.01, noise_seed: 9, ..Default::default() };
        let a = synth_scene(&spec, &Pose::identity(), &o).unwrap();
        let b = synth_scene(&spec, &Pose::identity(), &o).unwrap();
        assert_eq!(a.depth, b.depth);
        assert!(a.depth.iter().any(|&d| d != 2000));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_scene_spec("# ok\nbox 0 0 0 1 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_scene_spec("cone 1 2 3"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_scene_spec("box 0 0 0 1 -1 1"), Err(Error::Parse { .. })));
        assert!(matches!(parse_scene_spec("box 0 0 0 1 NaN 1"), Err(Error::Parse { .. })));
    }

    #[test]
    fn text_round_trip() {
        let spec = parse_scene_spec("plane 0 0 1 0 0.6 0.8 1 2\nbox 1 2 3 0.5 0.25 0.125\n").unwrap();
        assert_eq!(parse_scene_spec(&spec.to_text()).unwrap(), spec);
    }
}
