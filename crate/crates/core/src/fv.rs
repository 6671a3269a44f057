//! Fisher-vector embedding of per-level feature sets and the view signature.
//!
//! Per component g, with soft assignments π_g, N features and diagonal
//! variances σ²:
//!
//! ```text
//! m0_g = 1/(N √p_g)   Σ (π_g − p_g)
//! m1_g = 1/(N √p_g)   Σ π_g (f − ν_g) / σ_g
//! m2_g = 1/(N √(2p_g)) Σ π_g ((f − ν_g)² / σ_g² − 1)
//! ```
//!
//! laid out as `[m0_1, m1_1, m2_1, ..., m0_G, m1_G, m2_G]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_space::{GmmModel, PosteriorMode, ProjectedFeature, PROJ_DIM};
use crate::numerics::fnv1a;

/// Values per mixture component: 1 + 2·12.
pub const BLOCK: usize = 1 + 2 * PROJ_DIM;

/// Raw Fisher vector of length 25·G. An empty feature set gives the zero
/// vector and `false`.
pub fn fisher_vector(features: &[ProjectedFeature], gmm: &GmmModel, mode: PosteriorMode) -> (Vec<f64>, bool) {
    let g_count = gmm.components();
    let mut out = vec![0.0; BLOCK * g_count];
    if features.is_empty() {
        return (out, false);
    }
    assert_eq!(gmm.dim(), PROJ_DIM, "mixture dimension must match projected features");
    let inv_sd: Vec<f64> = gmm.vars().iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut post = vec![0.0; g_count];
    for f in features {
        gmm.posterior_into(f, mode, &mut post);
        for (g, &pi) in post.iter().enumerate() {
            let block = &mut out[g * BLOCK..(g + 1) * BLOCK];
            block[0] += pi - gmm.weights()[g];
            if pi == 0.0 {
                continue;
            }
            let mean = gmm.mean(g);
            for d in 0..PROJ_DIM {
                let z = (f[d] - mean[d]) * inv_sd[g * PROJ_DIM + d];
                block[1 + d] += pi * z;
                block[1 + PROJ_DIM + d] += pi * (z * z - 1.0);
            }
        }
    }
    let n = features.len() as f64;
    for (g, block) in out.chunks_mut(BLOCK).enumerate() {
        let p = gmm.weights()[g];
        let a = 1.0 / (n * p.sqrt());
        let b = 1.0 / (n * (2.0 * p).sqrt());
        block[0] *= a;
        block[1..=PROJ_DIM].iter_mut().for_each(|v| *v *= a);
        block[1 + PROJ_DIM..].iter_mut().for_each(|v| *v *= b);
    }
    (out, true)
}

/// Signed square root of every component, then unit L2 norm. The zero
/// vector stays zero.
pub fn power_l2_normalize(v: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|a| a.signum() * a.abs().sqrt()).collect();
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    } else {
        out.iter_mut().for_each(|x| *x = 0.0);
    }
    out
}

/// The per-view descriptor: H normalized level blocks of 25·G values.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub frame_id: String,
    pub g: usize,
    pub h: usize,
    pub model_version: u64,
    pub data: Vec<f32>,
}

impl Signature {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn level(&self, h: usize) -> &[f32] {
        let w = BLOCK * self.g;
        &self.data[h * w..(h + 1) * w]
    }
}

/// Per-level Fisher vector, signed square root and L2, concatenated.
pub fn encode_view(
    levels: &[Vec<ProjectedFeature>],
    gmm: &GmmModel,
    mode: PosteriorMode,
    frame_id: &str,
    model_version: u64,
) -> Result<Signature> {
    if levels.iter().all(Vec::is_empty) {
        return Err(Error::AllLevelsEmpty);
    }
    let mut data = Vec::with_capacity(BLOCK * gmm.components() * levels.len());
    for level in levels {
        let (raw, _) = fisher_vector(level, gmm, mode);
        data.extend(power_l2_normalize(&raw).into_iter().map(|v| v as f32));
    }
    Ok(Signature { frame_id: frame_id.to_string(), g: gmm.components(), h: levels.len(), model_version, data })
}

pub const SIGNATURE_MAGIC: &[u8; 8] = b"SCNSIGSG";
const SIGNATURE_VERSION: u32 = 1;
/// Largest signature accepted from a file, in values.
pub(crate) const MAX_SIGNATURE_LEN: u64 = 1 << 28;

/// Signature file, little-endian:
/// magic, version u32, float width u32 (4 or 8), G u32, H u32,
/// model version u64, frame id length u32 + UTF-8 bytes, value count u64,
/// values, FNV-1a u64 of everything before it.
pub fn encode_signature_file(sig: &Signature, float_width: u32) -> Result<Vec<u8>> {
    if float_width != 4 && float_width != 8 {
        return Err(Error::InvalidInput(format!("float width must be 4 or 8, got {float_width}")));
    }
    let mut b = Vec::with_capacity(48 + sig.frame_id.len() + sig.len() * float_width as usize);
    b.extend_from_slice(SIGNATURE_MAGIC);
    for v in [SIGNATURE_VERSION, float_width, sig.g as u32, sig.h as u32] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&sig.model_version.to_le_bytes());
    b.extend_from_slice(&(sig.frame_id.len() as u32).to_le_bytes());
    b.extend_from_slice(sig.frame_id.as_bytes());
    b.extend_from_slice(&(sig.len() as u64).to_le_bytes());
    for &v in &sig.data {
        if float_width == 4 {
            b.extend_from_slice(&v.to_le_bytes());
        } else {
            b.extend_from_slice(&f64::from(v).to_le_bytes());
        }
    }
    let check = fnv1a(&b);
    b.extend_from_slice(&check.to_le_bytes());
    Ok(b)
}

pub fn decode_signature_file(bytes: &[u8]) -> Result<Signature> {
    if bytes.len() < 8 + 16 + 8 + 4 + 8 + 8 || &bytes[..8] != SIGNATURE_MAGIC {
        return Err(Error::Corrupt("not a signature file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Corrupt("signature checksum mismatch".into()));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > body.len() {
            return Err(Error::Corrupt("signature file truncated".into()));
        }
        let s = &body[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != SIGNATURE_VERSION {
        return Err(Error::UnsupportedFormat(format!("signature version {version}")));
    }
    let width = u32_at(take(4)?);
    let g = u32_at(take(4)?) as usize;
    let h = u32_at(take(4)?) as usize;
    let model_version = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let id_len = u32_at(take(4)?) as usize;
    let frame_id = std::str::from_utf8(take(id_len)?)
        .map_err(|_| Error::Corrupt("frame id is not UTF-8".into()))?
        .to_string();
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    if width != 4 && width != 8 {
        return Err(Error::Corrupt(format!("float width {width}")));
    }
    if count > MAX_SIGNATURE_LEN || count != (BLOCK as u64) * g as u64 * h as u64 {
        return Err(Error::Corrupt(format!("{count} values for G={g}, H={h}")));
    }
    let raw = take(count as usize * width as usize)?;
    let data = if width == 4 {
        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
    } else {
        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32).collect()
    };
    if pos != body.len() {
        return Err(Error::Corrupt("trailing bytes in signature file".into()));
    }
    Ok(Signature { frame_id, g, h, model_version, data })
}

pub fn save_signature(path: &Path, sig: &Signature) -> Result<()> {
    std::fs::write(path, encode_signature_file(sig, 4)?).map_err(|e| Error::io(path, e))
}

pub fn load_signature(path: &Path) -> Result<Signature> {
    decode_signature_file(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedStream;
    use rand::Rng;

    fn random_gmm(g: usize, seed: u64) -> GmmModel {
        let mut rng = SeedStream::new(seed).rng();
        let w: Vec<f64> = (0..g).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        GmmModel::new(
            PROJ_DIM,
            w.iter().map(|x| x / s).collect(),
            (0..g * PROJ_DIM).map(|_| rng.random_range(-1.5..1.5)).collect(),
            (0..g * PROJ_DIM).map(|_| rng.random_range(0.5..2.0)).collect(),
        )
        .unwrap()
    }

    fn random_features(n: usize, seed: u64) -> Vec<ProjectedFeature> {
        let mut rng = SeedStream::new(seed).rng();
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect()
    }

    #[test]
    fn sample_at_the_mean() {
        let gmm = GmmModel::new(PROJ_DIM, vec![1.0], vec![0.5; PROJ_DIM], vec![1.0; PROJ_DIM]).unwrap();
        let (v, ok) = fisher_vector(&[[0.5; PROJ_DIM]], &gmm, PosteriorMode::Weighted);
        assert!(ok);
        assert_eq!(v[0], 0.0);
        assert!(v[1..=PROJ_DIM].iter().all(|&x| x == 0.0));
        assert!(v[1 + PROJ_DIM..].iter().all(|&x| (x + 1.0 / 2f64.sqrt()).abs() < 1e-15));
        let (v, _) = fisher_vector(&random_features(30, 1), &gmm, PosteriorMode::Weighted);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn empty_set_is_flagged_zero() {
        let (v, ok) = fisher_vector(&[], &random_gmm(3, 1), PosteriorMode::Weighted);
        assert!(!ok && v.len() == 75 && v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalization() {
        let out = power_l2_normalize(&[4.0, -9.0]);
        let r = 13f64.sqrt();
        assert!((out[0] - 2.0 / r).abs() < 1e-15 && (out[1] + 3.0 / r).abs() < 1e-15);
        assert_eq!(power_l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        let mut rng = SeedStream::new(3).rng();
        for _ in 0..100 {
            let v: Vec<f64> = (0..50).map(|_| rng.random_range(-10.0..10.0)).collect();
            let n: f64 = power_l2_normalize(&v).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let gmm = random_gmm(4, 2);
        let f = random_features(40, 3);
        let (a, _) = fisher_vector(&f, &gmm, PosteriorMode::Weighted);
        let mut rev = f.clone();
        rev.reverse();
        let (b, _) = fisher_vector(&rev, &gmm, PosteriorMode::Weighted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let tripled: Vec<_> = f.iter().flat_map(|x| [*x, *x, *x]).collect();
        let (c, _) = fisher_vector(&tripled, &gmm, PosteriorMode::Weighted);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn signature_contract_and_file_round_trip() {
        let gmm = random_gmm(3, 5);
        let levels = vec![random_features(20, 1), Vec::new(), random_features(5, 2)];
        let sig = encode_view(&levels, &gmm, PosteriorMode::Weighted, "a/b", 77).unwrap();
        assert_eq!(sig.len(), 25 * 3 * 3);
        for h in 0..3 {
            let n: f64 = sig.level(h).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!(if h == 1 { n == 0.0 } else { (n - 1.0).abs() < 1e-6 });
        }
        for w in [4, 8] {
            let back = decode_signature_file(&encode_signature_file(&sig, w).unwrap()).unwrap();
            assert_eq!(back, sig);
        }
        let mut bytes = encode_signature_file(&sig, 4).unwrap();
        bytes[20] ^= 0xff;
        assert!(decode_signature_file(&bytes).is_err());
        assert!(matches!(
            encode_view(&[Vec::new(), Vec::new()], &gmm, PosteriorMode::Weighted, "x", 0),
            Err(Error::AllLevelsEmpty)
        ));
    }

    /// Σ log p(f) with weights softmax(alpha).
    fn total_ll(f: &[ProjectedFeature], alpha: &[f64], means: &[f64], vars: &[f64]) -> f64 {
        let z: f64 = alpha.iter().map(|a| a.exp()).sum();
        let w = alpha.iter().map(|a| a.exp() / z).collect();
        let gmm = GmmModel::new(PROJ_DIM, w, means.to_vec(), vars.to_vec()).unwrap();
        f.iter().map(|x| gmm.log_likelihood(x)).sum()
    }

    #[test]
    fn blocks_are_scaled_likelihood_gradients() {
        let mut rng = SeedStream::new(11).rng();
        for t in 0..10 {
            let g = rng.random_range(1..=5);
            let gmm = random_gmm(g, 100 + t);
            let f = random_features(rng.random_range(1..=100), 200 + t);
            let n = f.len() as f64;
            let (fv, _) = fisher_vector(&f, &gmm, PosteriorMode::Weighted);
            let alpha: Vec<f64> = gmm.weights().iter().map(|w| w.ln()).collect();
            let (m, v) = (gmm.means().to_vec(), gmm.vars().to_vec());
            let h = 1e-5;
            let diff = |which: usize, i: usize| {
                let (mut a, mut mm, mut vv) = (alpha.clone(), m.clone(), v.clone());
                let (mut b, mut mb, mut vb) = (alpha.clone(), m.clone(), v.clone());
                match which {
                    0 => { a[i] += h; b[i] -= h; }
                    1 => { mm[i] += h; mb[i] -= h; }
                    _ => { vv[i] += h; vb[i] -= h; }
                }
                (total_ll(&f, &a, &mm, &vv) - total_ll(&f, &b, &mb, &vb)) / (2.0 * h)
            };
            let mut fd = vec![0.0; fv.len()];
            for c in 0..g {
                let p = gmm.weights()[c];
                fd[c * BLOCK] = diff(0, c) / (n * p.sqrt());
                for d in 0..PROJ_DIM {
                    let k = c * PROJ_DIM + d;
                    fd[c * BLOCK + 1 + d] = diff(1, k) * v[k].sqrt() / (n * p.sqrt());
                    fd[c * BLOCK + 1 + PROJ_DIM + d] = diff(2, k) * v[k] * 2f64.sqrt() / (n * p.sqrt());
                }
            }
            let err: f64 = fv.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = fv.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err <= 1e-4 * norm, "instance {t}: {err} vs {norm}");
        }
    }
}
