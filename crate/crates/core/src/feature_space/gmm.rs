use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kmeans_pp_seeds, logsumexp, SeedStream};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub components: usize,
    pub max_iter: usize,
    /// Stop when the log-likelihood gain per sample falls below this.
    pub tol: f64,
    pub var_floor: f64,
    /// Larger training sets are subsampled (seeded) to this size.
    pub max_samples: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { components: 64, max_iter: 200, tol: 1e-6, var_floor: 1e-6, max_samples: 60_000 }
    }
}

/// Soft-assignment form. `Weighted` is the usual responsibility including
/// the mixture weight; `Unweighted` drops p_g from numerator and
/// denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosteriorMode {
    #[default]
    Weighted,
    Unweighted,
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    dim: usize,
    weights: Vec<f64>,
    /// G×dim row-major
    means: Vec<f64>,
    vars: Vec<f64>,
    /// -½ Σ log(2π σ²) per component
    log_norm: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GmmModel {
    pub fn new(dim: usize, weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        let g = weights.len();
        if g == 0 || dim == 0 {
            return Err(Error::InvalidInput("mixture needs at least one component and dimension".into()));
        }
        if means.len() != g * dim {
            return Err(Error::DimensionMismatch { expected: g * dim, found: means.len() });
        }
        if vars.len() != g * dim {
            return Err(Error::DimensionMismatch { expected: g * dim, found: vars.len() });
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite())
            || means.iter().any(|m| !m.is_finite())
            || vars.iter().any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidInput("mixture weights and variances must be positive and finite".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}")));
        }
        let log_norm = vars.chunks(dim).map(|v| -0.5 * v.iter().map(|s| LOG_2PI + s.ln()).sum::<f64>()).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { dim, weights, means, vars, log_norm, log_weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, g: usize) -> &[f64] {
        &self.means[g * self.dim..(g + 1) * self.dim]
    }

    pub fn var(&self, g: usize) -> &[f64] {
        &self.vars[g * self.dim..(g + 1) * self.dim]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn vars(&self) -> &[f64] {
        &self.vars
    }

    /// log N(x; ν_g, Λ_g)
    pub fn component_log_density(&self, x: &[f64], g: usize) -> f64 {
        let (m, v) = (self.mean(g), self.var(g));
        let q: f64 = x.iter().zip(m).zip(v).map(|((x, m), v)| (x - m) * (x - m) / v).sum();
        self.log_norm[g] - 0.5 * q
    }

    /// Per-component log terms; `out` receives log p_g + log N (or log N).
    fn log_terms(&self, x: &[f64], mode: PosteriorMode, out: &mut [f64]) {
        for (g, o) in out.iter_mut().enumerate() {
            let lw = if mode == PosteriorMode::Weighted { self.log_weights[g] } else { 0.0 };
            *o = lw + self.component_log_density(x, g);
        }
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let mut t = vec![0.0; self.components()];
        self.log_terms(x, PosteriorMode::Weighted, &mut t);
        logsumexp(&t)
    }

    pub fn posterior(&self, x: &[f64], mode: PosteriorMode) -> Vec<f64> {
        let mut t = vec![0.0; self.components()];
        self.posterior_into(x, mode, &mut t);
        t
    }

    /// Like [`GmmModel::posterior`], writing into `out` (length G).
    pub fn posterior_into(&self, x: &[f64], mode: PosteriorMode, out: &mut [f64]) {
        self.log_terms(x, mode, out);
        let lse = logsumexp(out);
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - lse).exp();
            sum += *o;
        }
        // renormalize away the rounding left by exp
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}

/// Diagnostics of an EM run.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood per sample after initialization and after each EM
    /// iteration.
    pub ll_history: Vec<f64>,
    pub converged: bool,
}

/// K-Means++ seeding, one Lloyd step, then diagonal EM. `samples` is
/// row-major with `dim` columns.
pub fn fit_gmm(samples: &[f64], dim: usize, cfg: &GmmConfig, seed: &SeedStream) -> Result<GmmFit> {
    let g = cfg.components;
    if g == 0 || dim == 0 {
        return Err(Error::InvalidConfig("gmm: components and dim must be positive".into()));
    }
    if samples.len() % dim != 0 {
        return Err(Error::DimensionMismatch { expected: dim, found: samples.len() % dim });
    }
    let n_all = samples.len() / dim;
    if n_all < 10 * g {
        return Err(Error::TooFewSamples { needed: 10 * g, found: n_all });
    }
    let owned;
    let data: &[f64] = if n_all > cfg.max_samples.max(10 * g) {
        let mut idx =
            rand::seq::index::sample(&mut seed.derive("subsample").rng(), n_all, cfg.max_samples.max(10 * g)).into_vec();
        idx.sort_unstable();
        owned = idx.iter().flat_map(|&i| samples[i * dim..(i + 1) * dim].iter().copied()).collect::<Vec<_>>();
        &owned
    } else {
        samples
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("training samples contain non-finite values".into()));
    }
    let n = data.len() / dim;
    let nf = n as f64;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    // global variance, used for components that end up empty
    let mut gmean = vec![0.0; dim];
    for i in 0..n {
        for (m, x) in gmean.iter_mut().zip(row(i)) {
            *m += x / nf;
        }
    }
    let gvar: Vec<f64> = (0..dim)
        .map(|d| ((0..n).map(|i| (row(i)[d] - gmean[d]).powi(2)).sum::<f64>() / nf).max(cfg.var_floor))
        .collect();

    let mut rng = seed.derive("kmeans++").rng();
    let seeds = kmeans_pp_seeds(data, dim, None, g, &mut rng);
    let mut centers: Vec<f64> = seeds.iter().flat_map(|&i| row(i).iter().copied()).collect();
    // duplicates in the data can leave fewer seeds than components
    while centers.len() < g * dim {
        let i = centers.len() / dim % seeds.len().max(1);
        let c = centers[i * dim..(i + 1) * dim].to_vec();
        centers.extend(c);
    }

    // one Lloyd step
    let mut count = vec![0usize; g];
    let mut sum = vec![0.0; g * dim];
    let mut sumsq = vec![0.0; g * dim];
    for i in 0..n {
        let x = row(i);
        let best = (0..g)
            .map(|c| (c, x.iter().zip(&centers[c * dim..(c + 1) * dim]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(c, _)| c)
            .expect("g > 0");
        count[best] += 1;
        for d in 0..dim {
            let off = x[d] - centers[best * dim + d];
            sum[best * dim + d] += off;
            sumsq[best * dim + d] += off * off;
        }
    }
    let mut weights = vec![0.0; g];
    let mut means = centers.clone();
    let mut vars = vec![0.0; g * dim];
    for c in 0..g {
        if count[c] == 0 {
            weights[c] = 1.0 / nf;
            vars[c * dim..(c + 1) * dim].copy_from_slice(&gvar);
            continue;
        }
        let k = count[c] as f64;
        weights[c] = k / nf;
        for d in 0..dim {
            let shift = sum[c * dim + d] / k;
            means[c * dim + d] = centers[c * dim + d] + shift;
            vars[c * dim + d] = (sumsq[c * dim + d] / k - shift * shift).max(cfg.var_floor);
        }
    }
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);
    let mut model = GmmModel::new(dim, weights, means, vars)?;

    let mut history = Vec::new();
    let mut converged = false;
    let mut resp = vec![0.0; g];
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter {
        // E-step with accumulation around the current means
        let mut nk = vec![0.0; g];
        let mut s1 = vec![0.0; g * dim];
        let mut s2 = vec![0.0; g * dim];
        let mut ll = 0.0;
        for i in 0..n {
            let x = row(i);
            model.log_terms(x, PosteriorMode::Weighted, &mut resp);
            let lse = logsumexp(&resp);
            ll += lse;
            for c in 0..g {
                let r = (resp[c] - lse).exp();
                if r == 0.0 {
                    continue;
                }
                nk[c] += r;
                let m = model.mean(c);
                for d in 0..dim {
                    let off = x[d] - m[d];
                    s1[c * dim + d] += r * off;
                    s2[c * dim + d] += r * off * off;
                }
            }
        }
        let ll = ll / nf;
        history.push(ll);
        if ll - prev_ll < cfg.tol {
            converged = true;
            break;
        }
        prev_ll = ll;
        // M-step
        let mut weights = vec![0.0; g];
        let mut means = model.means.clone();
        let mut vars = model.vars.clone();
        for c in 0..g {
            if nk[c] < 1e-10 {
                weights[c] = 1e-10;
                continue;
            }
            weights[c] = nk[c] / nf;
            for d in 0..dim {
                let shift = s1[c * dim + d] / nk[c];
                means[c * dim + d] += shift;
                vars[c * dim + d] = (s2[c * dim + d] / nk[c] - shift * shift).max(cfg.var_floor);
            }
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
        model = GmmModel::new(dim, weights, means, vars)?;
    }
    if !converged {
        history.push(mean_ll(&model, data, dim));
    }
    Ok(GmmFit { model, ll_history: history, converged })
}

pub fn mean_ll(model: &GmmModel, data: &[f64], dim: usize) -> f64 {
    let n = data.len() / dim;
    (0..n).map(|i| model.log_likelihood(&data[i * dim..(i + 1) * dim])).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_blobs(n: usize) -> Vec<f64> {
        let mut rng = SeedStream::new(7).rng();
        let mut out = Vec::new();
        for i in 0..n {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            for _ in 0..12 {
                let z: f64 = StandardNormal.sample(&mut rng);
                out.push(c + z);
            }
        }
        out
    }

    #[test]
    fn separated_mixture_is_recovered() {
        let fit = fit_gmm(&two_blobs(4000), 12, &GmmConfig { components: 2, ..Default::default() }, &SeedStream::new(1))
            .unwrap();
        let m = &fit.model;
        let mut centers: Vec<f64> = (0..2).map(|g| m.mean(g)[0]).collect();
        centers.sort_by(f64::total_cmp);
        for g in 0..2 {
            let truth = if m.mean(g)[0] < 5.0 { 0.0 } else { 10.0 };
            assert!(m.mean(g).iter().all(|v| (v - truth).abs() < 0.1));
            assert!((m.weights()[g] - 0.5).abs() < 0.05);
        }
        for w in fit.ll_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{:?}", fit.ll_history);
        }
    }

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = SeedStream::new(2).rng();
        let data: Vec<f64> = (0..12 * 300).map(|i| rng.random::<f64>() * (1 + i % 12) as f64).collect();
        let fit = fit_gmm(&data, 12, &GmmConfig { components: 1, ..Default::default() }, &SeedStream::new(0)).unwrap();
        let n = 300.0;
        for d in 0..12 {
            let mean: f64 = (0..300).map(|i| data[i * 12 + d]).sum::<f64>() / n;
            let var: f64 = (0..300).map(|i| (data[i * 12 + d] - mean).powi(2)).sum::<f64>() / n;
            assert!((fit.model.mean(0)[d] - mean).abs() < 1e-9);
            assert!((fit.model.var(0)[d] - var).abs() < 1e-9);
        }
        assert_eq!(fit.model.weights(), &[1.0]);
    }

    #[test]
    fn too_few_samples_and_determinism() {
        let data = two_blobs(50);
        assert!(matches!(
            fit_gmm(&data, 12, &GmmConfig { components: 10, ..Default::default() }, &SeedStream::new(0)),
            Err(Error::TooFewSamples { needed: 100, found: 50 })
        ));
        let cfg = GmmConfig { components: 4, ..Default::default() };
        let data = two_blobs(600);
        assert_eq!(fit_gmm(&data, 12, &cfg, &SeedStream::new(3)).unwrap(), fit_gmm(&data, 12, &cfg, &SeedStream::new(3)).unwrap());
    }

    fn toy(g: usize) -> GmmModel {
        let mut rng = SeedStream::new(g as u64).rng();
        let w: Vec<f64> = (0..g).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        GmmModel::new(
            12,
            w.iter().map(|x| x / s).collect(),
            (0..g * 12).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..g * 12).map(|_| rng.random_range(0.5..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn posterior_cases() {
        assert_eq!(toy(1).posterior(&[0.3; 12], PosteriorMode::Weighted), vec![1.0]);
        let far = GmmModel::new(1, vec![0.5, 0.5], vec![0.0, 100.0], vec![1.0, 1.0]).unwrap();
        let p = far.posterior(&[0.0], PosteriorMode::Weighted);
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1] < 1e-6);

        let m = toy(5);
        let mut rng = SeedStream::new(9).rng();
        for _ in 0..200 {
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            for mode in [PosteriorMode::Weighted, PosteriorMode::Unweighted] {
                let p = m.posterior(&x, mode);
                let naive: Vec<f64> = (0..5)
                    .map(|g| {
                        let w = if mode == PosteriorMode::Weighted { m.weights()[g] } else { 1.0 };
                        let mut dens = w;
                        for d in 0..12 {
                            let v = m.var(g)[d];
                            dens *= (-(x[d] - m.mean(g)[d]).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                        }
                        dens
                    })
                    .collect();
                let s: f64 = naive.iter().sum();
                for (a, b) in p.iter().zip(&naive) {
                    assert!((a - b / s).abs() < 1e-9);
                }
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_is_finite_far_from_every_component() {
        let m = toy(5);
        for scale in [10.0, 100.0, 1e4] {
            let p = m.posterior(&[scale; 12], PosteriorMode::Weighted);
            assert!(p.iter().all(|v| v.is_finite()));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
