//! Fractional Brownian driver paths.
//!
//! Sampling is exact: the increment covariance of fBm on a uniform grid is
//! stationary,
//!
//! ```text
//!   C(i, j) = h^{2H}/2 * (|k+1|^{2H} + |k-1|^{2H} - 2|k|^{2H}),  k = |i - j|,
//! ```
//!
//! and a dense (packed lower) Cholesky factor of C is cached per (grid, H)
//! behind a read-mostly lock. Components are independent and drawn
//! component-major from a counter-seeded ChaCha stream, so a given
//! (spec, grid, seed) always produces bit-identical paths.
//!
//! Block sums in [`coarsen_path`] use pairwise summation with splits at the
//! half, so coarsening composes exactly along dyadic factor chains.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::Grid;
use crate::{Error, Result};

/// Dense factorization cap; larger grids need a streaming generator this
/// crate does not provide.
pub const MAX_CHOLESKY_STEPS: usize = 1 << 14;

/// Hurst index and number of independent components of the driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    hurst: f64,
    noise_dim: usize,
}

impl NoiseSpec {
    /// Requires H in (1/4, 1/2] and at least one component.
    pub fn new(hurst: f64, noise_dim: usize) -> Result<Self> {
        if !(hurst > 0.25 && hurst <= 0.5) {
            return Err(Error::Domain(format!(
                "hurst index must lie in (1/4, 1/2], got {hurst}"
            )));
        }
        if noise_dim == 0 {
            return Err(Error::Domain("need at least one noise component".into()));
        }
        Ok(Self { hurst, noise_dim })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// rho = 1/(2H), the variation exponent of the covariance.
    pub fn rho(&self) -> f64 {
        1.0 / (2.0 * self.hurst)
    }
}

/// Increments of one realized driver path on a uniform grid.
///
/// Increments are stored row-major, one row per step, one column per noise
/// component. Component indices follow the multi-index convention: l = 0 is
/// time (increment h, not stored), l = 1..=d are the noise components.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverPath {
    grid: Grid,
    noise_dim: usize,
    increments: Vec<f64>,
}

impl DriverPath {
    pub fn from_increments(grid: Grid, noise_dim: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.n_steps() * noise_dim {
            return Err(Error::Domain(format!(
                "expected {} increments, got {}",
                grid.n_steps() * noise_dim,
                increments.len()
            )));
        }
        Ok(Self {
            grid,
            noise_dim,
            increments,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Increment of component l (1..=d) over step n.
    pub fn increment(&self, step: usize, l: usize) -> f64 {
        assert!(l >= 1 && l <= self.noise_dim, "noise component out of range");
        self.increments[step * self.noise_dim + (l - 1)]
    }

    /// Step row (h, dX^1_n, ..., dX^d_n) written into `row`.
    pub fn write_step_row(&self, step: usize, row: &mut [f64]) {
        row[0] = self.grid.h();
        row[1..=self.noise_dim]
            .copy_from_slice(&self.increments[step * self.noise_dim..(step + 1) * self.noise_dim]);
    }

    pub fn step_row(&self, step: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.noise_dim + 1];
        self.write_step_row(step, &mut row);
        row
    }

    /// CSV export: header `t,dX0,dX1,...,dXd`, one row per step, 17
    /// significant digits (lossless for f64).
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "t")?;
        for l in 0..=self.noise_dim {
            write!(w, ",dX{l}")?;
        }
        writeln!(w)?;
        let h = self.grid.h();
        for n in 0..self.grid.n_steps() {
            write!(w, "{:.16e},{:.16e}", self.grid.node(n), h)?;
            for l in 1..=self.noise_dim {
                write!(w, ",{:.16e}", self.increment(n, l))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// CSV import; rejects ragged rows and inconsistent time columns.
    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(l))) => l,
            _ => return Err(Error::Parse("empty path file".into())),
        };
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[0] != "t" {
            return Err(Error::Parse(format!("bad path header '{header}'")));
        }
        for (l, c) in cols[1..].iter().enumerate() {
            if *c != format!("dX{l}") {
                return Err(Error::Parse(format!("bad path header column '{c}'")));
            }
        }
        let noise_dim = cols.len() - 2;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::Parse(format!("line {}: {e}", idx + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.trim().split(',').map(|p| p.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse(format!("line {}: {e}", idx + 1)))?;
            if vals.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} columns, got {}",
                    idx + 1,
                    cols.len(),
                    vals.len()
                )));
            }
            rows.push(vals);
        }
        if rows.is_empty() {
            return Err(Error::Parse("path file has no steps".into()));
        }
        let h = rows[0][1];
        if !(h > 0.0) {
            return Err(Error::Parse(format!("nonpositive step size {h}")));
        }
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if (row[1] - h).abs() > 1e-12 * h {
                return Err(Error::Parse(format!("row {}: dX0 {} != step size {h}", i + 1, row[1])));
            }
            if (row[0] - i as f64 * h).abs() > 1e-9 * h.max(1.0) {
                return Err(Error::Parse(format!("row {}: t column is not uniform", i + 1)));
            }
        }
        let grid = Grid::new(h * n as f64, n)?;
        let mut increments = Vec::with_capacity(n * noise_dim);
        for row in &rows {
            increments.extend_from_slice(&row[2..]);
        }
        DriverPath::from_increments(grid, noise_dim, increments)
    }
}

/// Covariance of fBm increments over steps i and j of a uniform grid.
pub fn fbm_increment_covariance(hurst: f64, h: f64, i: usize, j: usize) -> f64 {
    let two_h = 2.0 * hurst;
    let k = i.abs_diff(j) as f64;
    0.5 * h.powf(two_h) * ((k + 1.0).powf(two_h) + (k - 1.0).abs().powf(two_h) - 2.0 * k.powf(two_h))
}

type FactorKey = (usize, u64, u64);

fn factor_cache() -> &'static RwLock<HashMap<FactorKey, Arc<Vec<f64>>>> {
    static CACHE: OnceLock<RwLock<HashMap<FactorKey, Arc<Vec<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Packed lower Cholesky of the stationary increment covariance, with one
/// jitter retry (1e-12 relative to the variance) before giving up.
fn cholesky_factor(hurst: f64, grid: &Grid) -> Result<Arc<Vec<f64>>> {
    let key: FactorKey = (grid.n_steps(), grid.t_end().to_bits(), hurst.to_bits());
    if let Some(f) = factor_cache().read().expect("factor cache poisoned").get(&key) {
        return Ok(f.clone());
    }
    let n = grid.n_steps();
    let h = grid.h();
    let var = fbm_increment_covariance(hurst, h, 0, 0);
    let mut factor = None;
    for jitter in [0.0, 1e-12] {
        match try_cholesky(hurst, h, n, jitter * var) {
            Ok(l) => {
                factor = Some(l);
                break;
            }
            Err(_) if jitter == 0.0 => continue,
            Err(e) => return Err(e),
        }
    }
    let l = Arc::new(factor.ok_or_else(|| {
        Error::Cholesky("increment covariance is not positive definite".into())
    })?);
    factor_cache()
        .write()
        .expect("factor cache poisoned")
        .insert(key, l.clone());
    Ok(l)
}

fn try_cholesky(hurst: f64, h: f64, n: usize, jitter: f64) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * (n + 1) / 2];
    for i in 0..n {
        for j in 0..=i {
            let mut s = fbm_increment_covariance(hurst, h, i, j) + if i == j { jitter } else { 0.0 };
            for k in 0..j {
                s -= l[tri(i, k)] * l[tri(j, k)];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Cholesky(format!(
                        "nonpositive pivot {s:.3e} at row {i}"
                    )));
                }
                l[tri(i, i)] = s.sqrt();
            } else {
                l[tri(i, j)] = s / l[tri(j, j)];
            }
        }
    }
    Ok(l)
}

/// Draws one exact fBm path on `grid`. Same (spec, grid, seed) gives
/// bit-identical output. Grids beyond [`MAX_CHOLESKY_STEPS`] are rejected.
pub fn sample_fbm_path(spec: &NoiseSpec, grid: &Grid, seed: u64) -> Result<DriverPath> {
    let n = grid.n_steps();
    if n > MAX_CHOLESKY_STEPS {
        return Err(Error::Domain(format!(
            "grid has {n} steps; dense factorization is capped at {MAX_CHOLESKY_STEPS}"
        )));
    }
    let d = spec.noise_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut increments = vec![0.0; n * d];
    if spec.hurst == 0.5 {
        // Brownian shortcut: the factor is sqrt(h) * I.
        let s = grid.h().sqrt();
        for l in 0..d {
            for i in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                increments[i * d + l] = s * z;
            }
        }
    } else {
        let factor = cholesky_factor(spec.hurst, grid)?;
        let mut z = vec![0.0; n];
        for l in 0..d {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (j, zj) in z[..=i].iter().enumerate() {
                    acc += factor[tri(i, j)] * zj;
                }
                increments[i * d + l] = acc;
            }
        }
    }
    DriverPath::from_increments(*grid, d, increments)
}

/// Pairwise sum with splits at the half; exact composition along dyadic
/// block structures.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Merges every `factor` consecutive steps into one by summing increments.
pub fn coarsen_path(path: &DriverPath, factor: usize) -> Result<DriverPath> {
    if factor == 0 {
        return Err(Error::Domain("coarsening factor must be positive".into()));
    }
    let n = path.grid.n_steps();
    if n % factor != 0 {
        return Err(Error::Domain(format!(
            "coarsening factor {factor} does not divide {n} steps"
        )));
    }
    let d = path.noise_dim;
    let coarse_n = n / factor;
    let mut increments = vec![0.0; coarse_n * d];
    let mut block = vec![0.0; factor];
    for j in 0..coarse_n {
        for l in 0..d {
            for (b, slot) in block.iter_mut().enumerate() {
                *slot = path.increments[(j * factor + b) * d + l];
            }
            increments[j * d + l] = pairwise_sum(&block);
        }
    }
    DriverPath::from_increments(Grid::new(path.grid.t_end(), coarse_n)?, d, increments)
}

/// A path whose noise increments are clamped to |dX| <= A_h sqrt(h) with
/// A_h = sqrt(k |ln h|). Only meaningful for Brownian (H = 1/2) inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedPath {
    pub path: DriverPath,
    pub threshold_k: f64,
    pub a_h: f64,
}

/// Clamps every noise increment of a Brownian path: xi = dX / sqrt(h) is
/// clamped to [-A_h, A_h] and mapped back. Requires h < 1 (so |ln h| > 0)
/// and k > 0. Idempotent: truncating a truncated path is the identity.
pub fn truncate_path(path: &DriverPath, k: f64) -> Result<TruncatedPath> {
    let h = path.grid.h();
    if h >= 1.0 {
        return Err(Error::Domain(format!(
            "truncation needs step size h < 1, got {h}"
        )));
    }
    if !(k > 0.0) {
        return Err(Error::Domain(format!("truncation needs k > 0, got {k}")));
    }
    let a_h = (k * h.ln().abs()).sqrt();
    let bound = a_h * h.sqrt();
    let increments = path
        .increments
        .iter()
        .map(|&x| x.clamp(-bound, bound))
        .collect();
    Ok(TruncatedPath {
        path: DriverPath {
            grid: path.grid,
            noise_dim: path.noise_dim,
            increments,
        },
        threshold_k: k,
        a_h,
    })
}

/// Analytic rho-variation ratio of the increment covariance over the
/// uniform dissection of [0, t_end]:
///
/// ```text
///   ( sum_{k,i} |E[dX_k dX_i]|^rho )^{1/rho} / t_end^{1/rho}.
/// ```
///
/// Equals 1 for Brownian motion on any grid and grows towards the
/// rho-variation constant under refinement for H < 1/2.
pub fn rho_variation_diagnostic(spec: &NoiseSpec, grid: &Grid) -> f64 {
    let rho = spec.rho();
    let n = grid.n_steps();
    let h = grid.h();
    let mut total = (n as f64) * fbm_increment_covariance(spec.hurst, h, 0, 0).abs().powf(rho);
    for lag in 1..n {
        let c = fbm_increment_covariance(spec.hurst, h, 0, lag).abs().powf(rho);
        total += 2.0 * (n - lag) as f64 * c;
    }
    total.powf(1.0 / rho) / grid.t_end().powf(1.0 / rho)
}
