//! Green function of simple random walk on `Z^d`.
//!
//! Values inside the crossover radius come from the Fourier integral
//! `g(x) = (2π)^{-d} ∫ cos(x·θ) / (1 - (1/d) Σ cos θ_j) dθ`. The integral over
//! the angle paired with the largest coordinate is done in closed form,
//!
//! `(1/2π) ∫ cos(nθ) / (a - b cos θ) dθ = ρ^|n| / sqrt(a² - b²)`, `ρ = b / (a + sqrt(a² - b²))`,
//!
//! which leaves an integrable `1/|θ|` singularity in `d - 1` variables. That
//! is removed by splitting the cube into pyramids (one per coordinate being
//! largest) and mapping each to a product domain, after which tensor
//! Gauss–Legendre converges exponentially.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use gauss_quad::GaussLegendre;
use statrs::function::gamma::gamma;

use crate::error::{LabError, Result};
use crate::lattice::{check_dim, Point, MAX_DIM};

pub const DEFAULT_ORDER: usize = 48;

const CACHE_MAGIC: &[u8; 8] = b"GFFGREEN";
const CACHE_VERSION: u32 = 1;

/// Asymptotic constant in `g(x) ~ C_d / |x|^{d-2}`.
pub fn asymptotic_constant(d: usize) -> f64 {
    let dh = d as f64 / 2.0;
    d as f64 * gamma(dh - 1.0) / (2.0 * PI.powf(dh))
}

/// Default crossover radius: the quadrature in `d = 4` is a 3-dimensional
/// integral, so the exact table is kept smaller there.
pub fn default_crossover(d: usize) -> u32 {
    if d == 3 {
        20
    } else {
        10
    }
}

/// Canonical representative under the hyperoctahedral symmetry of `g`:
/// absolute values sorted ascending.
#[inline]
fn canonical(x: &Point) -> [i32; MAX_DIM] {
    let mut c = [0i32; MAX_DIM];
    let d = x.dim();
    for i in 0..d {
        c[i] = x.coord(i).abs();
    }
    c[..d].sort_unstable();
    c
}

/// Fourier quadrature of `g(x)`; `order` is the base number of
/// Gauss–Legendre nodes per axis, raised with `|x|_1` to resolve the
/// oscillation.
pub fn fourier_green(x: &[i32], order: usize) -> f64 {
    let d = x.len();
    assert!(d >= 3, "fourier_green needs d >= 3");
    let m = d - 1;
    let mut n: Vec<i32> = x.iter().map(|c| c.abs()).collect();
    n.sort_unstable();
    let n_last = n[m];
    let n_rest: Vec<f64> = n[..m].iter().map(|&v| v as f64).collect();
    let l1: usize = n.iter().map(|&v| v as usize).sum();
    let nodes = order.max(8) + 3 * l1;
    let gl = GaussLegendre::new(nodes.try_into().expect("node count is positive"));
    let us: Vec<(f64, f64)> =
        gl.iter().map(|(t, w)| (0.5 * PI * (t + 1.0), 0.5 * PI * w)).collect();
    let vs: Vec<(f64, f64)> = gl.iter().map(|(t, w)| (0.5 * (t + 1.0), 0.5 * w)).collect();

    let b = 1.0 / d as f64;
    let nv = m - 1;
    let inner_count = vs.len().pow(nv as u32);
    let mut theta = vec![0.0; m];
    let mut total = 0.0;
    for k in 0..m {
        for &(u, wu) in &us {
            let jac = u.powi(nv as i32) * wu;
            let mut acc = 0.0;
            for mut idx in 0..inner_count {
                let mut w = 1.0;
                let mut slot = 0;
                for (j, th) in theta.iter_mut().enumerate() {
                    if j == k {
                        *th = u;
                    } else {
                        let (v, wv) = vs[idx % vs.len()];
                        idx /= vs.len();
                        *th = u * v;
                        w *= wv;
                        slot += 1;
                    }
                }
                debug_assert_eq!(slot, nv);
                let mut amb = 0.0;
                let mut osc = 1.0;
                for j in 0..m {
                    let h = (0.5 * theta[j]).sin();
                    amb += 2.0 * h * h;
                    if n_rest[j] != 0.0 {
                        osc *= (n_rest[j] * theta[j]).cos();
                    }
                }
                amb *= b;
                let s = (amb * (amb + 2.0 * b)).sqrt();
                let rho = b / (b + amb + s);
                acc += w * osc * rho.powi(n_last) / s;
            }
            total += jac * acc;
        }
    }
    total / PI.powi(m as i32)
}

/// Cached lattice Green function with exact values inside the crossover
/// radius and the asymptotic form `C_d/|x|^{d-2}` outside.
#[derive(Clone, Debug)]
pub struct GreenTable {
    dim: usize,
    crossover: u32,
    order: usize,
    c_d: f64,
    exact: HashMap<[i32; MAX_DIM], f64>,
}

impl GreenTable {
    pub fn new(dim: usize) -> Result<Self> {
        Self::build(dim, default_crossover(dim), DEFAULT_ORDER)
    }

    /// Computes every canonical displacement with `|x| < crossover`.
    pub fn build(dim: usize, crossover: u32, order: usize) -> Result<Self> {
        check_dim(dim)?;
        if crossover == 0 {
            return Err(LabError::invalid("crossover radius must be positive"));
        }
        let mut exact = HashMap::new();
        let r2 = (crossover as i64) * (crossover as i64);
        let mut c = vec![0i32; dim];
        enumerate_sorted(&mut c, 0, 0, r2, &mut |v| {
            let mut key = [0i32; MAX_DIM];
            key[..dim].copy_from_slice(v);
            exact.insert(key, fourier_green(v, order));
        });
        let t = GreenTable { dim, crossover, order, c_d: asymptotic_constant(dim), exact };
        t.check()?;
        Ok(t)
    }

    /// Loads the table from `dir` if a matching cache file exists, otherwise
    /// builds it and writes the cache.
    pub fn load_or_build(dir: &Path, dim: usize, crossover: u32, order: usize) -> Result<Self> {
        let path = dir.join(format!("green_d{dim}_r{crossover}_q{order}.bin"));
        if path.exists() {
            if let Ok(t) = Self::load(&path) {
                if t.dim == dim && t.crossover == crossover && t.order == order {
                    return Ok(t);
                }
            }
        }
        let t = Self::build(dim, crossover, order)?;
        std::fs::create_dir_all(dir)?;
        t.save(&path)?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        let g0 = self.g0();
        if !(g0 > 1.0) || self.exact.values().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(LabError::Numerical("Green table has non-positive entries".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn crossover(&self) -> u32 {
        self.crossover
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn c_d(&self) -> f64 {
        self.c_d
    }

    pub fn g0(&self) -> f64 {
        self.exact[&[0; MAX_DIM]]
    }

    /// `g(x) = g(0, x)`.
    #[inline]
    pub fn g(&self, x: &Point) -> f64 {
        debug_assert_eq!(x.dim(), self.dim);
        let r2 = x.norm2_sq();
        let c2 = self.crossover as i64 * self.crossover as i64;
        if r2 < c2 {
            self.exact[&canonical(x)]
        } else {
            self.asymptotic(r2)
        }
    }

    #[inline]
    pub fn g_between(&self, x: &Point, y: &Point) -> f64 {
        self.g(&x.sub(y))
    }

    /// Whether `g(x)` is served from the quadrature table.
    pub fn is_exact(&self, x: &Point) -> bool {
        x.norm2_sq() < self.crossover as i64 * self.crossover as i64
    }

    #[inline]
    fn asymptotic(&self, r2: i64) -> f64 {
        let r = (r2 as f64).sqrt();
        self.c_d / r.powi(self.dim as i32 - 2)
    }

    pub fn len(&self) -> usize {
        self.exact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CACHE_MAGIC)?;
        for v in [CACHE_VERSION, self.dim as u32, self.crossover, self.order as u32] {
            f.write_all(&v.to_le_bytes())?;
        }
        let mut keys: Vec<_> = self.exact.keys().copied().collect();
        keys.sort_unstable();
        f.write_all(&(keys.len() as u64).to_le_bytes())?;
        for k in keys {
            for c in &k[..self.dim] {
                f.write_all(&c.to_le_bytes())?;
            }
            f.write_all(&self.exact[&k].to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || LabError::Numerical(format!("corrupt Green cache {}", path.display()));
        if bytes.len() < 32 || &bytes[..8] != CACHE_MAGIC {
            return Err(bad());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(8) != CACHE_VERSION {
            return Err(bad());
        }
        let dim = u32_at(12) as usize;
        let crossover = u32_at(16);
        let order = u32_at(20) as usize;
        check_dim(dim)?;
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let rec = 4 * dim + 8;
        if bytes.len() != 32 + count * rec {
            return Err(bad());
        }
        let mut exact = HashMap::with_capacity(count);
        for i in 0..count {
            let o = 32 + i * rec;
            let mut key = [0i32; MAX_DIM];
            for (j, k) in key.iter_mut().take(dim).enumerate() {
                *k = i32::from_le_bytes(bytes[o + 4 * j..o + 4 * j + 4].try_into().unwrap());
            }
            let v = f64::from_le_bytes(bytes[o + 4 * dim..o + rec].try_into().unwrap());
            exact.insert(key, v);
        }
        let t = GreenTable { dim, crossover, order, c_d: asymptotic_constant(dim), exact };
        if !t.exact.contains_key(&[0; MAX_DIM]) {
            return Err(bad());
        }
        t.check()?;
        Ok(t)
    }
}

/// Visits nondecreasing nonnegative vectors `c` with `|c|² < r2`.
fn enumerate_sorted(c: &mut Vec<i32>, pos: usize, acc: i64, r2: i64, f: &mut impl FnMut(&[i32])) {
    if pos == c.len() {
        f(c);
        return;
    }
    let start = if pos == 0 { 0 } else { c[pos - 1] };
    let remaining = (c.len() - pos) as i64;
    let mut v = start;
    // all later coordinates are at least v
    while acc + remaining * (v as i64) * (v as i64) < r2 {
        c[pos] = v;
        enumerate_sorted(c, pos + 1, acc + (v as i64) * (v as i64), r2, f);
        v += 1;
    }
}
