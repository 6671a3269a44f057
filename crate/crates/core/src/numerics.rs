//! Shared numerical kernels: rigid transforms, rotation log/exp, orthogonal
//! alignment, log-sum-exp and deterministic seed streams.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle (radians) the log/exp maps switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-4;

/// A proper rigid motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Sensor poses are camera-to-world rigid transforms.
pub type Pose = RigidTransform;

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self { rotation: rot_exp(&axis_angle), translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn rotation_angle(&self) -> f64 {
        rot_log(&self.rotation).norm()
    }

    /// Checks `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Mat3::identity()).amax();
        ortho <= tol && (r.determinant() - 1.0).abs() <= tol && self.translation.iter().all(|x| x.is_finite())
    }

    /// Row-major `[R | t]` as 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.rotation[(i, j)];
            }
            out[9 + i] = self.translation[i];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        let rotation = Mat3::from_row_slice(&v[..9]);
        let translation = Vec3::new(v[9], v[10], v[11]);
        Self { rotation, translation }
    }
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axis-angle vector of a rotation matrix (the SO(3) logarithm).
pub fn rot_log(r: &Mat3) -> Vec3 {
    let skew = vee(r);
    let s = skew.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = s.atan2(c);
    if angle < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return skew * (1.0 + angle * angle / 6.0);
    }
    if angle < std::f64::consts::FRAC_PI_2 {
        return skew * (angle / s);
    }
    // Near π the skew part vanishes; recover the axis from the symmetric part.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Mat3::identity() * c) / (1.0 - c);
    let mut best = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vec3 = aat.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Rotation matrix of an axis-angle vector (Rodrigues).
pub fn rot_exp(v: &Vec3) -> Mat3 {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(v);
    Mat3::identity() + k * a + k * k * b
}

/// Projects a nearly-orthonormal matrix onto SO(3).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn procrustes_align(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch { expected: src.len(), found: dst.len() });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateConfiguration);
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut cross = Mat3::zeros();
    let mut scatter = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = s - cs;
        cross += (d - cd) * a.transpose();
        scatter += a * a.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0].max(1e-300) {
        return Err(Error::DegenerateConfiguration);
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let translation = cd - rotation * cs;
    Ok(RigidTransform { rotation, translation })
}

/// `log Σ exp(x_i)` without overflow. Returns `-inf` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Deterministic hierarchy of random streams: a root seed plus a path of
/// labels. Identical `(seed, path)` pairs always produce identical streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
    path: Vec<String>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root, path: Vec::new() }
    }

    pub fn derive(&self, label: impl fmt::Display) -> Self {
        let mut path = self.path.clone();
        path.push(label.to_string());
        Self { root: self.root, path }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    pub fn seed(&self) -> u64 {
        let mut h = splitmix64(self.root);
        for label in &self.path {
            h = splitmix64(h ^ fnv1a(label.as_bytes()) ^ (label.len() as u64).rotate_left(32));
        }
        h
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed())
    }
}

impl fmt::Display for SeedStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)?;
        for p in &self.path {
            write!(f, "/{p}")?;
        }
        Ok(())
    }
}

/// K-Means++ seeding over rows of `data` (row-major, `dim` columns) with
/// optional per-row weights. Returns `k` distinct row indices (fewer when the
/// data has fewer distinct rows).
pub fn kmeans_pp_seeds<R: Rng>(
    data: &[f64],
    dim: usize,
    weights: Option<&[f64]>,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = data.len() / dim;
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let total_w: f64 = (0..n).map(w).sum();
    let first = pick_weighted(rng, total_w, n, w);
    let mut seeds = vec![first];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), row(first))).collect();
    while seeds.len() < k {
        let total: f64 = (0..n).map(|i| d2[i] * w(i)).sum();
        if !(total > 0.0) {
            break;
        }
        let next = pick_weighted(rng, total, n, |i| d2[i] * w(i));
        seeds.push(next);
        let c = row(next);
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = dist2(row(i), c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    seeds
}

fn pick_weighted<R: Rng>(rng: &mut R, total: f64, n: usize, w: impl Fn(usize) -> f64) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for i in 0..n {
        let wi = w(i);
        if wi > 0.0 {
            last_positive = i;
            acc += wi;
            if acc > target {
                return i;
            }
        }
    }
    last_positive
}

/// Median of a slice (mean of the two central values for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 { 0.5 * (v[m - 1] + v[m]) } else { v[m] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        )
        .normalize();
        let angle = rng.random_range(0.0..PI);
        rot_exp(&(axis * angle))
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(rot_log(&Mat3::identity()), Vec3::zeros());
    }

    #[test]
    fn log_of_quarter_turn_about_z() {
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let v = rot_log(&r);
        assert!((v - Vec3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-9);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = SeedStream::new(7).rng();
        for _ in 0..10_000 {
            let r = random_rotation(&mut rng);
            let back = rot_exp(&rot_log(&r));
            assert!((back - r).amax() < 1e-9);
        }
        // near the branch points
        for angle in [0.0, 1e-9, 5e-5, 1e-4, 2e-4, PI - 1e-7, PI] {
            let r = rot_exp(&(Vec3::new(0.3, -0.5, 0.8).normalize() * angle));
            assert!((rot_exp(&rot_log(&r)) - r).amax() < 1e-9, "angle {angle}");
        }
    }

    #[test]
    fn rotation_angle_matches_quaternion_oracle() {
        let mut rng = SeedStream::new(11).rng();
        for _ in 0..2000 {
            let r = random_rotation(&mut rng);
            let q = UnitQuaternion::from_matrix(&r);
            assert!((rot_log(&r).norm() - q.angle()).abs() < 1e-9);
        }
    }

    #[test]
    fn procrustes_identity_and_exact_recovery() {
        let mut rng = SeedStream::new(3).rng();
        let src: Vec<Vec3> = (0..10)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let t = procrustes_align(&src, &src).unwrap();
        assert!((t.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(t.translation.norm() < 1e-12);

        let truth = RigidTransform::new(random_rotation(&mut rng), Vec3::new(0.4, -1.0, 2.5));
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = procrustes_align(&src, &dst).unwrap();
        assert!((est.rotation - truth.rotation).amax() < 1e-9);
        assert!((est.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn procrustes_rejects_colinear_points() {
        let src: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(procrustes_align(&src, &src), Err(Error::DegenerateConfiguration)));
    }

    #[test]
    fn procrustes_noise_monte_carlo() {
        let stream = SeedStream::new(99);
        for trial in 0..20 {
            let mut rng = stream.derive(trial).rng();
            let truth = RigidTransform::new(random_rotation(&mut rng), Vec3::new(1.0, 2.0, -0.5));
            let src: Vec<Vec3> = (0..100)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let dst: Vec<Vec3> = src
                .iter()
                .map(|p| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    let m: f64 = StandardNormal.sample(&mut rng);
                    let o: f64 = StandardNormal.sample(&mut rng);
                    truth.apply(p) + Vec3::new(n, m, o) * 0.01
                })
                .collect();
            let est = procrustes_align(&src, &dst).unwrap();
            let err: Mat3 = est.rotation.transpose() * truth.rotation;
            let angle = rot_log(&err).norm().to_degrees();
            assert!(angle <= 0.5, "trial {trial}: {angle} deg");
        }
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let mut rng = SeedStream::new(5).rng();
        for _ in 0..1000 {
            let v: Vec<f64> = (0..rng.random_range(1..10)).map(|_| rng.random_range(-20.0..20.0)).collect();
            let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!((logsumexp(&v) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn seed_streams_are_reproducible_and_distinct() {
        let a = SeedStream::new(42).derive("segment").derive(3);
        let b = SeedStream::new(42).derive("segment").derive(3);
        let c = SeedStream::new(42).derive("segment").derive(4);
        assert_eq!(a.seed(), b.seed());
        assert_ne!(a.seed(), c.seed());
        let xa: Vec<u64> = (0..4).map(|_| a.rng().random()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.rng().random()).collect();
        assert_eq!(xa, xb);
        // label boundaries matter
        assert_ne!(SeedStream::new(1).derive("ab").seed(), SeedStream::new(1).derive("a").derive("b").seed());
    }

    #[test]
    fn transform_inverse_composes_to_identity() {
        let mut rng = SeedStream::new(8).rng();
        let t = RigidTransform::new(random_rotation(&mut rng), Vec3::new(1.0, -2.0, 0.3));
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        assert!(t.is_proper(1e-9));
    }
}
