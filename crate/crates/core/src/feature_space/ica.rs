use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{RawFeature, RAW_DIM};
use crate::numerics::SeedStream;

pub const PROJ_DIM: usize = 12;
pub type ProjectedFeature = [f64; PROJ_DIM];

/// E[log cosh ν] for ν ~ N(0, 1).
const GAUSS_LOGCOSH: f64 = 0.374_567_207_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Larger training sets are subsampled (seeded) to this size.
    pub max_samples: usize,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 500, max_samples: 30_000 }
    }
}

/// Centering, 13→12 PCA whitening and a 12×12 rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct IcaModel {
    pub mean: [f64; RAW_DIM],
    /// 12×13, row-major.
    pub whitening: Vec<f64>,
    /// 12×12, row-major.
    pub unmixing: Vec<f64>,
    /// False when FastICA hit the iteration cap; the unmixing is then the
    /// identity.
    pub converged: bool,
    projection: Vec<f64>,
}

impl IcaModel {
    pub fn new(mean: [f64; RAW_DIM], whitening: Vec<f64>, unmixing: Vec<f64>, converged: bool) -> Result<Self> {
        if whitening.len() != PROJ_DIM * RAW_DIM {
            return Err(Error::DimensionMismatch { expected: PROJ_DIM * RAW_DIM, found: whitening.len() });
        }
        if unmixing.len() != PROJ_DIM * PROJ_DIM {
            return Err(Error::DimensionMismatch { expected: PROJ_DIM * PROJ_DIM, found: unmixing.len() });
        }
        if mean.iter().chain(&whitening).chain(&unmixing).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("ICA model has non-finite entries".into()));
        }
        let w = DMatrix::from_row_slice(PROJ_DIM, RAW_DIM, &whitening);
        let u = DMatrix::from_row_slice(PROJ_DIM, PROJ_DIM, &unmixing);
        let p = u * w;
        let projection = (0..PROJ_DIM).flat_map(|r| (0..RAW_DIM).map(move |c| (r, c))).map(|(r, c)| p[(r, c)]).collect();
        Ok(Self { mean, whitening, unmixing, converged, projection })
    }

    /// Composed 12×13 projection, row-major.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn project(&self, f: &RawFeature) -> ProjectedFeature {
        let mut c = [0.0; RAW_DIM];
        for i in 0..RAW_DIM {
            c[i] = f[i] - self.mean[i];
        }
        let mut out = [0.0; PROJ_DIM];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.projection[r * RAW_DIM..(r + 1) * RAW_DIM];
            *o = row.iter().zip(&c).map(|(a, b)| a * b).sum();
        }
        out
    }
}

fn sym_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = (w * w.transpose()).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose() * w
}

pub fn fit_ica(samples: &[RawFeature], cfg: &IcaConfig, seed: &SeedStream) -> Result<IcaModel> {
    let needed = 10 * RAW_DIM;
    if samples.len() < needed {
        return Err(Error::TooFewSamples { needed, found: samples.len() });
    }
    let picked: Vec<&RawFeature> = if samples.len() > cfg.max_samples.max(needed) {
        let mut idx = sample(&mut seed.derive("subsample").rng(), samples.len(), cfg.max_samples.max(needed)).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &samples[i]).collect()
    } else {
        samples.iter().collect()
    };
    let n = picked.len();
    let nf = n as f64;

    let mut mean = [0.0; RAW_DIM];
    for f in &picked {
        for (m, x) in mean.iter_mut().zip(f.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut cov = DMatrix::<f64>::zeros(RAW_DIM, RAW_DIM);
    for f in &picked {
        let d = DVector::from_iterator(RAW_DIM, f.iter().zip(&mean).map(|(x, m)| x - m));
        cov += &d * d.transpose();
    }
    cov /= nf;

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..RAW_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-10 * top.max(1e-300) && top > 0.0).count();
    if rank < PROJ_DIM {
        return Err(Error::RankDeficient { rank, needed: PROJ_DIM });
    }
    let mut white = DMatrix::<f64>::zeros(PROJ_DIM, RAW_DIM);
    for (r, &i) in order.iter().take(PROJ_DIM).enumerate() {
        let v = eig.eigenvectors.column(i);
        // deterministic eigenvector sign: largest-magnitude entry positive
        let big = (0..RAW_DIM).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        let s = if v[big] < 0.0 { -1.0 } else { 1.0 } / eig.eigenvalues[i].sqrt();
        for c in 0..RAW_DIM {
            white[(r, c)] = s * v[c];
        }
    }

    // whitened data, n×12
    let mut z = DMatrix::<f64>::zeros(n, PROJ_DIM);
    for (k, f) in picked.iter().enumerate() {
        for r in 0..PROJ_DIM {
            z[(k, r)] = (0..RAW_DIM).map(|c| white[(r, c)] * (f[c] - mean[c])).sum();
        }
    }

    let mut rng = seed.derive("init").rng();
    let mut w = DMatrix::<f64>::from_fn(PROJ_DIM, PROJ_DIM, |_, _| StandardNormal.sample(&mut rng));
    w = sym_decorrelate(&w);
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let y = &z * w.transpose(); // n×12
        let g = y.map(f64::tanh);
        let gp_mean: Vec<f64> = (0..PROJ_DIM).map(|j| g.column(j).iter().map(|t| 1.0 - t * t).sum::<f64>() / nf).collect();
        let mut w_new = g.transpose() * &z / nf;
        for j in 0..PROJ_DIM {
            for c in 0..PROJ_DIM {
                w_new[(j, c)] -= gp_mean[j] * w[(j, c)];
            }
        }
        let w_new = sym_decorrelate(&w_new);
        let lim = (0..PROJ_DIM)
            .map(|j| (1.0 - w_new.row(j).dot(&w.row(j)).abs()).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if lim < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        w = DMatrix::identity(PROJ_DIM, PROJ_DIM);
    }

    // sign: positive skew; order: decreasing negentropy estimate
    let y = &z * w.transpose();
    let mut rows: Vec<(f64, usize, f64)> = (0..PROJ_DIM)
        .map(|j| {
            let col = y.column(j);
            let skew: f64 = col.iter().map(|v| v * v * v).sum::<f64>() / nf;
            let lc: f64 = col.iter().map(|v| v.cosh().ln()).sum::<f64>() / nf;
            ((lc - GAUSS_LOGCOSH).powi(2), j, if skew < 0.0 { -1.0 } else { 1.0 })
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut unmixing = Vec::with_capacity(PROJ_DIM * PROJ_DIM);
    for &(_, j, s) in &rows {
        unmixing.extend(w.row(j).iter().map(|v| s * v));
    }
    let whitening = (0..PROJ_DIM).flat_map(|r| (0..RAW_DIM).map(move |c| (r, c))).map(|(r, c)| white[(r, c)]).collect();
    IcaModel::new(mean, whitening, unmixing, converged)
}
