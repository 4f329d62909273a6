//! Sphere geometry: positional embeddings, the truncated spherical Gaussian
//! kernel and the bank of learnable module embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensorcore::{Tensor, Var};

/// Base of the geometric frequency ladder.
const FREQ_BASE: f64 = 10_000.0;

/// Unit vector in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereEmbedding(Vec<f64>);

impl SphereEmbedding {
    /// Normalizes `v` onto the sphere.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("cannot place a zero vector on the sphere".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &SphereEmbedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    /// Bandwidth; larger values make the kernel more peaked.
    pub epsilon: f64,
    /// Cosine-similarity threshold below which the kernel is exactly zero.
    pub tau: f64,
}

impl KernelConfig {
    pub fn new(epsilon: f64, tau: f64) -> Result<Self> {
        let cfg = Self { epsilon, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Kernel that is identically one: no bandwidth and no truncation.
    pub fn dense() -> Self {
        Self { epsilon: 0.0, tau: -1.0 }
    }

    /// Accepts `epsilon >= 0`; zero is the degenerate constant kernel.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("kernel epsilon {} must be >= 0", self.epsilon)));
        }
        if !(-1.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("kernel tau {} must lie in [-1, 1)", self.tau)));
        }
        Ok(())
    }

    fn untruncated(&self, cos: f64) -> f64 {
        (-2.0 * self.epsilon * (1.0 - cos)).exp()
    }
}

/// Sinusoidal embedding of a point of `R^n` onto the unit sphere in `R^d`.
///
/// For input dimension `m` and frequency slot `i` (of `d / 2n` slots) the
/// pair `sin(x_m / 10000^(i / (d/2n)))`, `cos(..)` occupies positions
/// `2(m * d/2n + i)` and `2(m * d/2n + i) + 1`.
pub fn embed_position(x: &[f64], d: usize) -> Result<SphereEmbedding> {
    let n = x.len();
    if n == 0 || d == 0 || d % (2 * n) != 0 {
        return Err(Error::Config(format!(
            "embedding size {d} is not a positive multiple of 2 x {n}"
        )));
    }
    let slots = d / (2 * n);
    let mut s = vec![0.0; d];
    for (m, &xm) in x.iter().enumerate() {
        for i in 0..slots {
            let arg = xm / frequency_scale(i, slots);
            let at = 2 * (m * slots + i);
            s[at] = arg.sin();
            s[at + 1] = arg.cos();
        }
    }
    SphereEmbedding::new(s)
}

/// Divisor of frequency slot `i` out of `slots`.
pub fn frequency_scale(i: usize, slots: usize) -> f64 {
    FREQ_BASE.powf(i as f64 / slots as f64)
}

/// Embeds a batch of points into an `(len, d)` tensor of unit rows.
pub fn embed_positions(points: &[[f64; 2]], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(points.len() * d);
    for p in points {
        data.extend_from_slice(embed_position(p, d)?.as_slice());
    }
    Tensor::new(vec![points.len(), d], data)
}

/// `exp(-2 eps (1 - p.s))` when `p.s >= tau`, otherwise 0.
pub fn kernel(p: &SphereEmbedding, s: &SphereEmbedding, cfg: &KernelConfig) -> f64 {
    let cos = p.dot(s).clamp(-1.0, 1.0);
    if cos >= cfg.tau {
        cfg.untruncated(cos)
    } else {
        0.0
    }
}

/// Local weights `W[m, a] = Z(p_m, s_a)` for embedding rows `p: (M, d)` and
/// `s: (A, d)`.
///
/// The truncation is applied with a straight-through mask: the backward pass
/// differentiates the untruncated exponential everywhere, including entries
/// whose forward value is 0.
pub fn kernel_batch<'g>(p: &Var<'g>, s: &Var<'g>, cfg: &KernelConfig) -> Result<Var<'g>> {
    let cos = p.contract("md,ad->ma", s)?;
    kernel_from_cosines(&cos, cfg)
}

/// Straight-through truncated kernel applied to precomputed cosines.
pub fn kernel_from_cosines<'g>(cos: &Var<'g>, cfg: &KernelConfig) -> Result<Var<'g>> {
    let keep: Vec<bool> = cos.value().data().iter().map(|&c| c >= cfg.tau).collect();
    let z = cos.add_scalar(-1.0).scale(2.0 * cfg.epsilon).exp();
    z.straight_through_mask(&keep)
}

/// Learnable module embeddings `p^m`, stored as rows of an `(M, d)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleEmbeddings {
    pub rows: Tensor,
}

impl ModuleEmbeddings {
    /// Rows drawn uniformly on the sphere (normalized standard normals).
    pub fn random(modules: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(modules * d);
        for _ in 0..modules {
            loop {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                if let Ok(e) = SphereEmbedding::new(v) {
                    data.extend_from_slice(e.as_slice());
                    break;
                }
            }
        }
        Ok(Self { rows: Tensor::new(vec![modules, d], data)? })
    }

    /// Rows equal to the embeddings `P(x_m)` of positions drawn uniformly
    /// from `[0, extent]^2`, so every module starts with a non-empty enclave.
    pub fn at_random_positions(modules: usize, d: usize, extent: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f64; 2]> = (0..modules)
            .map(|_| [rng.random_range(0.0..=extent), rng.random_range(0.0..=extent)])
            .collect();
        Ok(Self { rows: embed_positions(&points, d)? })
    }

    pub fn row(&self, m: usize) -> SphereEmbedding {
        SphereEmbedding(self.rows.row(m).to_vec())
    }

    pub fn count(&self) -> usize {
        self.rows.shape()[0]
    }
}

/// Projects every row of an `(M, d)` tensor back onto the unit sphere.
pub fn renormalize_embeddings(rows: &mut Tensor) -> Result<()> {
    if rows.rank() != 2 {
        return Err(Error::Dimension(format!("embedding bank of shape {:?}", rows.shape())));
    }
    let d = rows.shape()[1];
    for row in rows.data_mut().chunks_mut(d) {
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("module embedding row has zero norm".into()));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
