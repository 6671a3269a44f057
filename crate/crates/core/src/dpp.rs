//! k-DPP diversification of a retrieval set.
//!
//! L_{X,Y} = ρ_X ρ_Y κ exp(s(X,Y)/σ), ρ_X = exp(s(X,Q)/(2ω)).

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fv::Signature;
use crate::numerics::median;
use crate::retrieval::{l1_distance, Hit, RetrievalSet, SignatureDatabase};

/// `sigma` and `omega` left as `None` are tuned per retrieval set: σ is the
/// median pairwise L1 distance within the set, ω defaults to σ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DppConfig {
    pub k: usize,
    pub sigma: Option<f64>,
    pub omega: Option<f64>,
    pub kappa: f64,
}

impl Default for DppConfig {
    fn default() -> Self {
        Self { k: 5, sigma: None, omega: None, kappa: 1.0 }
    }
}

impl DppConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: Option<f64>| v.is_none_or(|x| x.is_finite() && x > 0.0);
        if self.k == 0 || !pos(self.sigma) || !pos(self.omega) || !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::InvalidConfig(format!("diversify: {self:?}")));
        }
        Ok(())
    }
}

/// `k[,sigma,omega,kappa]`; empty fields keep defaults.
impl FromStr for DppConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() > 4 {
            return Err(Error::InvalidConfig(format!("diversify takes at most 4 values: {s:?}")));
        }
        let bad = |what: &str| Error::InvalidConfig(format!("diversify {what} in {s:?}"));
        let num = |i: usize| -> Result<Option<f64>> {
            match parts.get(i) {
                None | Some(&"") => Ok(None),
                Some(v) => v.parse::<f64>().map(Some).map_err(|_| bad("value")),
            }
        };
        let cfg = DppConfig {
            k: parts[0].parse().map_err(|_| bad("k"))?,
            sigma: num(1)?,
            omega: num(2)?,
            kappa: num(3)?.unwrap_or(1.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DppKernel {
    pub l: DMatrix<f64>,
    pub sigma: f64,
    pub omega: f64,
    pub kappa: f64,
}

impl DppKernel {
    pub fn len(&self) -> usize {
        self.l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.l.nrows() == 0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.l.clone().symmetric_eigenvalues().min()
    }

    /// det of the principal minor on `idx`.
    pub fn det(&self, idx: &[usize]) -> f64 {
        let m = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.l[(idx[a], idx[b])]);
        m.determinant()
    }

    /// Plain-text dump with the frame ids as row labels.
    pub fn dump(&self, ids: &[String]) -> String {
        let mut s = format!("scenesig-dpp-kernel {}\nsigma {:?} omega {:?} kappa {:?}\n", self.len(), self.sigma, self.omega, self.kappa);
        for i in 0..self.len() {
            let _ = write!(s, "{}", ids.get(i).map_or("?", String::as_str));
            for j in 0..self.len() {
                let _ = write!(s, " {:.9e}", self.l[(i, j)]);
            }
            s.push('\n');
        }
        s
    }
}

/// Kernel from item signatures and their similarities to the query.
pub fn build_kernel_from(items: &[&[f32]], query_sim: &[f64], cfg: &DppConfig) -> Result<DppKernel> {
    cfg.validate()?;
    let n = items.len();
    if query_sim.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: query_sim.len() });
    }
    let mut dist = DMatrix::<f64>::zeros(n, n);
    let mut pair = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = l1_distance(items[i], items[j]);
            dist[(i, j)] = d;
            dist[(j, i)] = d;
            pair.push(d);
        }
    }
    let sigma = cfg.sigma.unwrap_or_else(|| {
        median(&pair).filter(|m| m.is_finite() && *m > 0.0).unwrap_or(1.0)
    });
    let omega = cfg.omega.unwrap_or(sigma);
    let rho: Vec<f64> = query_sim.iter().map(|s| (s / (2.0 * omega)).exp()).collect();
    let l = DMatrix::from_fn(n, n, |i, j| rho[i] * rho[j] * cfg.kappa * (-dist[(i, j)] / sigma).exp());
    Ok(DppKernel { l, sigma, omega, kappa: cfg.kappa })
}

/// Kernel over a retrieval set, signatures looked up in `db`.
pub fn build_kernel(set: &RetrievalSet, db: &SignatureDatabase, query: &Signature, cfg: &DppConfig) -> Result<DppKernel> {
    let mut items = Vec::with_capacity(set.hits.len());
    for h in &set.hits {
        let i = db.index_of(&h.frame_id).ok_or_else(|| Error::MissingSignature(h.frame_id.clone()))?;
        items.push(db.entry(i).signature.as_slice());
    }
    let sims: Vec<f64> = items.iter().map(|x| -l1_distance(x, &query.data)).collect();
    build_kernel_from(&items, &sims, cfg)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    /// In selection order.
    pub indices: Vec<usize>,
    /// Set when the determinant collapsed and the tail was filled by
    /// descending diagonal.
    pub padded: bool,
}

/// Greedy MAP: each step adds the item with the largest conditional
/// variance, tracked by an incremental Cholesky factor. k is clamped to |R|.
pub fn greedy_kdpp(kernel: &DppKernel, k: usize) -> Selection {
    let n = kernel.len();
    let k = k.min(n);
    let l = &kernel.l;
    let scale = (0..n).map(|i| l[(i, i)]).fold(0.0f64, f64::max);
    let floor = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut d2: Vec<f64> = (0..n).map(|i| l[(i, i)]).collect();
    let mut c: Vec<Vec<f64>> = vec![Vec::with_capacity(k); n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    let mut padded = false;
    while out.len() < k {
        let pick = (0..n).filter(|&i| !taken[i]).fold(None, |b: Option<usize>, i| match b {
            Some(j) if d2[j] >= d2[i] => Some(j),
            _ => Some(i),
        });
        let Some(j) = pick else { break };
        if d2[j] <= floor {
            padded = true;
            let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            rest.sort_by(|&a, &b| l[(b, b)].total_cmp(&l[(a, a)]).then(a.cmp(&b)));
            out.extend(rest.into_iter().take(k - out.len()));
            break;
        }
        taken[j] = true;
        out.push(j);
        let dj = d2[j].sqrt();
        let cj = c[j].clone();
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let dot: f64 = cj.iter().zip(&c[i]).map(|(a, b)| a * b).sum();
            let e = (l[(j, i)] - dot) / dj;
            c[i].push(e);
            d2[i] -= e * e;
        }
    }
    Selection { indices: out, padded }
}

/// Exhaustive MAP over all size-k subsets; first maximal subset in
/// lexicographic order wins.
pub fn exact_kdpp_map(kernel: &DppKernel, k: usize) -> Result<Vec<usize>> {
    const LIMIT: usize = 15;
    let n = kernel.len();
    if n > LIMIT {
        return Err(Error::TooLarge { n, limit: LIMIT });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} for {n} items")));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = (f64::NEG_INFINITY, idx.clone());
    loop {
        let d = kernel.det(&idx);
        if d > best.0 {
            best = (d, idx.clone());
        }
        // next combination
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(best.1)
}

/// Diversified subset of a retrieval set, in selection order.
pub fn diversify(set: &RetrievalSet, db: &SignatureDatabase, query: &Signature, cfg: &DppConfig) -> Result<(Vec<Hit>, Selection, DppKernel)> {
    if set.hits.is_empty() {
        return Ok((Vec::new(), Selection { indices: Vec::new(), padded: false }, build_kernel_from(&[], &[], cfg)?));
    }
    let kernel = build_kernel(set, db, query, cfg)?;
    let sel = greedy_kdpp(&kernel, cfg.k);
    let hits = sel.indices.iter().map(|&i| set.hits[i].clone()).collect();
    Ok((hits, sel, kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedStream;
    use rand::Rng;

    fn kernel(m: DMatrix<f64>) -> DppKernel {
        DppKernel { l: m, sigma: 1.0, omega: 1.0, kappa: 1.0 }
    }

    #[test]
    fn fixtures() {
        let k = kernel(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0])));
        assert_eq!(greedy_kdpp(&k, 1).indices, vec![0]);
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 3.9, 0.0, 3.9, 4.0, 0.0, 0.0, 0.0, 2.0]);
        let k = kernel(m);
        assert_eq!(greedy_kdpp(&k, 2).indices, vec![0, 2]);
        assert_eq!(exact_kdpp_map(&k, 2).unwrap(), vec![0, 2]);
        assert!((k.det(&[0, 2]) - 8.0).abs() < 1e-12 && (k.det(&[0, 1]) - 0.79).abs() < 1e-12);
        let mut all = greedy_kdpp(&k, 3).indices;
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        let d = kernel(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 5.0, 3.0, 4.0])));
        assert_eq!(exact_kdpp_map(&d, 2).unwrap(), vec![1, 3]);
        let big = kernel(DMatrix::identity(16, 16));
        assert!(matches!(exact_kdpp_map(&big, 2), Err(Error::TooLarge { n: 16, limit: 15 })));
    }

    fn random_items(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
    }

    #[test]
    fn kernel_properties() {
        let mut rng = SeedStream::new(1).rng();
        for _ in 0..50 {
            let n = rng.random_range(2..12);
            let items = random_items(n, 20, &mut rng);
            let refs: Vec<&[f32]> = items.iter().map(Vec::as_slice).collect();
            let sims: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { -rng.random_range(0.0..10.0) }).collect();
            let k = build_kernel_from(&refs, &sims, &DppConfig::default()).unwrap();
            assert!((k.l[(0, 0)] - 1.0).abs() < 1e-12);
            for i in 0..n {
                for j in 0..n {
                    assert!((k.l[(i, j)] - k.l[(j, i)]).abs() <= 1e-9);
                }
            }
            assert!(k.min_eigenvalue() >= -1e-8);
        }
        // duplicates make a singular minor
        let items = random_items(3, 20, &mut rng);
        let refs: Vec<&[f32]> = vec![&items[0], &items[0], &items[1]];
        let k = build_kernel_from(&refs, &[-1.0, -1.0, -2.0], &DppConfig::default()).unwrap();
        assert!(k.det(&[0, 1]).abs() < 1e-9);
    }

    #[test]
    fn duplicates_are_not_selected_twice_and_kappa_does_not_change_selection() {
        let mut rng = SeedStream::new(2).rng();
        for _ in 0..100 {
            let items = random_items(6, 30, &mut rng);
            let refs: Vec<&[f32]> = vec![&items[0], &items[0], &items[1], &items[2], &items[2], &items[3]];
            let sims: Vec<f64> = vec![-1.0, -1.0, -3.0, -2.0, -2.0, -4.0];
            let k = build_kernel_from(&refs, &sims, &DppConfig::default()).unwrap();
            let sel = greedy_kdpp(&k, 4);
            assert!(!(sel.indices.contains(&0) && sel.indices.contains(&1)));
            assert!(!(sel.indices.contains(&3) && sel.indices.contains(&4)));
            assert!(!sel.padded);
            let k5 = build_kernel_from(&refs, &sims, &DppConfig { kappa: 7.5, ..Default::default() }).unwrap();
            assert_eq!(greedy_kdpp(&k5, 4), sel);
        }
    }

    #[test]
    fn collapse_pads_by_diagonal() {
        let m = DMatrix::from_element(3, 3, 2.0);
        let sel = greedy_kdpp(&kernel(m), 3);
        assert!(sel.padded);
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn config_parsing() {
        assert_eq!("5".parse::<DppConfig>().unwrap(), DppConfig { k: 5, ..Default::default() });
        let c: DppConfig = "3,0.5,,2".parse().unwrap();
        assert_eq!((c.k, c.sigma, c.omega, c.kappa), (3, Some(0.5), None, 2.0));
        for bad in ["0", "x", "3,-1", "3,1,1,1,1", "3,nan"] {
            assert!(bad.parse::<DppConfig>().is_err(), "{bad}");
        }
    }
}
