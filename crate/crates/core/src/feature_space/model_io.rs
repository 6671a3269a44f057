//! Model files.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "SCNSIGMD"
//! version u32      1
//! kind    u32      1 = ICA, 2 = GMM
//! ICA:  raw_dim u32, dim u32, converged u32,
//!       mean[raw_dim], whitening[dim×raw_dim], unmixing[dim×dim]   (f64)
//! GMM:  components u32, dim u32,
//!       weights[G], means[G×dim], variances[G×dim]                (f64)
//! check u64        FNV-1a of every preceding byte
//! ```
//!
//! The text form carries the same numbers in shortest round-trip decimal, so
//! text → binary is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::RAW_DIM;
use crate::numerics::fnv1a;

use super::{GmmModel, IcaModel, PROJ_DIM};

pub const MODEL_MAGIC: &[u8; 8] = b"SCNSIGMD";
pub const MODEL_VERSION: u32 = 1;
const TEXT_MAGIC: &str = "scenesig-model 1";
/// Upper bound on mixture size accepted from files.
const MAX_COMPONENTS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ica(IcaModel),
    Gmm(GmmModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Ica(_) => "ica",
            Model::Gmm(_) => "gmm",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MODEL_MAGIC);
        b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let put = |b: &mut Vec<u8>, vals: &[f64]| vals.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        match self {
            Model::Ica(m) => {
                b.extend_from_slice(&1u32.to_le_bytes());
                for v in [RAW_DIM as u32, PROJ_DIM as u32, u32::from(m.converged)] {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                put(&mut b, &m.mean);
                put(&mut b, &m.whitening);
                put(&mut b, &m.unmixing);
            }
            Model::Gmm(m) => {
                b.extend_from_slice(&2u32.to_le_bytes());
                for v in [m.components() as u32, m.dim() as u32] {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                put(&mut b, m.weights());
                put(&mut b, m.means());
                put(&mut b, m.vars());
            }
        }
        let check = fnv1a(&b);
        b.extend_from_slice(&check.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Corrupt("not a scenesig model file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let check = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != check {
            return Err(Error::Corrupt("model checksum mismatch".into()));
        }
        let mut r = Reader { b: body, pos: 8 };
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedFormat(format!("model version {version}")));
        }
        let model = match r.u32()? {
            1 => {
                let (raw, dim, conv) = (r.u32()? as usize, r.u32()? as usize, r.u32()?);
                if raw != RAW_DIM || dim != PROJ_DIM || conv > 1 {
                    return Err(Error::Corrupt(format!("ICA header raw_dim={raw} dim={dim} converged={conv}")));
                }
                let mean: [f64; RAW_DIM] = r.f64s(RAW_DIM)?.try_into().expect("length checked");
                let whitening = r.f64s(PROJ_DIM * RAW_DIM)?;
                let unmixing = r.f64s(PROJ_DIM * PROJ_DIM)?;
                Model::Ica(IcaModel::new(mean, whitening, unmixing, conv == 1)?)
            }
            2 => {
                let (g, dim) = (r.u32()? as usize, r.u32()? as usize);
                if g == 0 || g > MAX_COMPONENTS || dim == 0 || dim > 1024 {
                    return Err(Error::Corrupt(format!("GMM header components={g} dim={dim}")));
                }
                let weights = r.f64s(g)?;
                let means = r.f64s(g * dim)?;
                let vars = r.f64s(g * dim)?;
                Model::Gmm(GmmModel::new(dim, weights, means, vars)?)
            }
            k => return Err(Error::Corrupt(format!("unknown model kind {k}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes in model file".into()));
        }
        Ok(model)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{TEXT_MAGIC}\n");
        let row = |s: &mut String, key: &str, vals: &[f64]| {
            let _ = write!(s, "{key}");
            for v in vals {
                let _ = write!(s, " {v:?}");
            }
            s.push('\n');
        };
        match self {
            Model::Ica(m) => {
                let _ = writeln!(s, "kind ica\nraw_dim {RAW_DIM}\ndim {PROJ_DIM}\nconverged {}", u8::from(m.converged));
                row(&mut s, "mean", &m.mean);
                for r in m.whitening.chunks(RAW_DIM) {
                    row(&mut s, "whitening", r);
                }
                for r in m.unmixing.chunks(PROJ_DIM) {
                    row(&mut s, "unmixing", r);
                }
            }
            Model::Gmm(m) => {
                let _ = writeln!(s, "kind gmm\ncomponents {}\ndim {}", m.components(), m.dim());
                for g in 0..m.components() {
                    row(&mut s, "weight", &[m.weights()[g]]);
                    row(&mut s, "mean", m.mean(g));
                    row(&mut s, "var", m.var(g));
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |key: &str| -> Result<(usize, Vec<&str>)> {
            let (ln, l) = lines.next().ok_or_else(|| Error::parse(0, format!("unexpected end, expected {key}")))?;
            let mut t = l.split_whitespace();
            if t.next() != Some(key) {
                return Err(Error::parse(ln, format!("expected `{key}`")));
            }
            Ok((ln, t.collect()))
        };
        let nums = |ln: usize, t: &[&str], n: usize| -> Result<Vec<f64>> {
            if t.len() != n {
                return Err(Error::parse(ln, format!("expected {n} values, found {}", t.len())));
            }
            t.iter().map(|s| s.parse::<f64>().map_err(|_| Error::parse(ln, format!("bad number {s:?}")))).collect()
        };
        let int = |(ln, t): (usize, Vec<&str>)| -> Result<usize> {
            match t.as_slice() {
                [v] => v.parse().map_err(|_| Error::parse(ln, format!("bad integer {v:?}"))),
                _ => Err(Error::parse(ln, "expected one integer")),
            }
        };
        let (ln, magic) = next("scenesig-model")?;
        if magic != ["1"] {
            return Err(Error::parse(ln, "unsupported model text version"));
        }
        let (ln, kind) = next("kind")?;
        let model = match kind.as_slice() {
            ["ica"] => {
                if int(next("raw_dim")?)? != RAW_DIM || int(next("dim")?)? != PROJ_DIM {
                    return Err(Error::parse(ln, "ICA dimensions must be 13 and 12"));
                }
                let conv = int(next("converged")?)?;
                let (ln, t) = next("mean")?;
                let mean: [f64; RAW_DIM] = nums(ln, &t, RAW_DIM)?.try_into().expect("length checked");
                let mut whitening = Vec::new();
                for _ in 0..PROJ_DIM {
                    let (ln, t) = next("whitening")?;
                    whitening.extend(nums(ln, &t, RAW_DIM)?);
                }
                let mut unmixing = Vec::new();
                for _ in 0..PROJ_DIM {
                    let (ln, t) = next("unmixing")?;
                    unmixing.extend(nums(ln, &t, PROJ_DIM)?);
                }
                Model::Ica(IcaModel::new(mean, whitening, unmixing, conv == 1)?)
            }
            ["gmm"] => {
                let g = int(next("components")?)?;
                let dim = int(next("dim")?)?;
                if g == 0 || g > MAX_COMPONENTS || dim == 0 || dim > 1024 {
                    return Err(Error::parse(ln, format!("bad mixture size {g}×{dim}")));
                }
                let (mut w, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..g {
                    let (ln, t) = next("weight")?;
                    w.extend(nums(ln, &t, 1)?);
                    let (ln, t) = next("mean")?;
                    m.extend(nums(ln, &t, dim)?);
                    let (ln, t) = next("var")?;
                    v.extend(nums(ln, &t, dim)?);
                }
                Model::Gmm(GmmModel::new(dim, w, m, v)?)
            }
            _ => return Err(Error::parse(ln, "kind must be ica or gmm")),
        };
        if let Some((ln, _)) = lines.next() {
            return Err(Error::parse(ln, "trailing content"));
        }
        Ok(model)
    }

    /// Reads either representation, detected from the leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(MODEL_MAGIC) {
            Self::from_bytes(bytes)
        } else {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Corrupt("model is neither binary nor UTF-8 text".into()))?;
            Self::from_text(text)
        }
    }

    /// Writes the binary form, or the text form when the path ends in `.txt`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "txt") { self.to_text().into_bytes() } else { self.to_bytes() };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn load_ica(path: &Path) -> Result<IcaModel> {
    match Model::load(path)? {
        Model::Ica(m) => Ok(m),
        Model::Gmm(_) => Err(Error::InvalidInput(format!("{} holds a GMM, expected an ICA model", path.display()))),
    }
}

pub fn load_gmm(path: &Path) -> Result<GmmModel> {
    match Model::load(path)? {
        Model::Gmm(m) => Ok(m),
        Model::Ica(_) => Err(Error::InvalidInput(format!("{} holds an ICA model, expected a GMM", path.display()))),
    }
}

/// Identifies an (ICA, GMM) pair; stored with every signature.
pub fn model_fingerprint(ica: &IcaModel, gmm: &GmmModel) -> u64 {
    let mut b = Model::Ica(ica.clone()).to_bytes();
    b.extend(Model::Gmm(gmm.clone()).to_bytes());
    fnv1a(&b)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| Error::Corrupt("model file truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
