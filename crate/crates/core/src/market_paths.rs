//! Controlled diffusions over a finite control set: time grids, feedback
//! policies, Euler-Maruyama ensembles, and the realised diffusion matrix
//! `a = sigma sigma^T` with its symmetric square root and Moore-Penrose
//! pseudoinverse.
//!
//! Each measure of the non-dominated family is realised as one feedback
//! policy over the control set: under policy `u`, the state follows
//!
//! ```text
//! X[k+1] = X[k] + mu(t_k, X[k], u) dt + sigma(t_k, X[k], u) dW[k]
//! ```
//!
//! Simulation is parallel across paths and deterministic: path `m` draws
//! from its own counter-based stream keyed by `(seed, m)`, so the ensemble
//! is byte-identical regardless of thread count or path count.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::PathRng;

/// Symmetry tolerance accepted by the PSD decompositions.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Most negative eigenvalue still treated as a rounded zero.
pub const EIGEN_FLOOR: f64 = -1e-10;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("matrix is not symmetric PSD within tolerance: {0}")]
    InvalidMatrix(String),
    #[error("simulation diverged: non-finite state on path {path} at step {step}")]
    SimulationDiverged { path: usize, step: usize },
    #[error("invalid control set: {0}")]
    InvalidControlSet(String),
    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
}

/// Uniform partition of `[0, T]`: the discrete skeleton of every process.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, MarketError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(MarketError::InvalidTimeGrid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(MarketError::InvalidTimeGrid("steps must be >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_k = k T / N`; `k` may equal `steps`.
    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * (k as f64) / (self.steps as f64)
    }
}

/// Finite set of control values, each a point of the control space `U`.
#[derive(Debug, Clone)]
pub struct ControlSet {
    points: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl ControlSet {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self, MarketError> {
        if points.is_empty() {
            return Err(MarketError::InvalidControlSet("empty control set".into()));
        }
        if points.len() != labels.len() {
            return Err(MarketError::InvalidControlSet(
                "one label per control point required".into(),
            ));
        }
        let dim = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(MarketError::InvalidControlSet(
                    "control points must share one dimension".into(),
                ));
            }
            for q in points.iter().skip(i + 1) {
                if p == q {
                    return Err(MarketError::InvalidControlSet(format!(
                        "duplicate control point {p:?}"
                    )));
                }
            }
        }
        Ok(Self { points, labels })
    }

    /// Scalar controls labelled by their value.
    pub fn scalar(values: &[f64]) -> Result<Self, MarketError> {
        Self::new(
            values.iter().map(|&v| vec![v]).collect(),
            values.iter().map(|v| format!("{v}")).collect(),
        )
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.iter().map(|p| p.as_slice())
    }
}

/// Drift map `mu(t, x, u)`, written into `out` (length `d`).
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Volatility map `sigma(t, x, u)`, written into `out` (row-major `d x d`).
pub type VolFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// The control set together with the coefficient maps generating the
/// measure family: one measure per feedback policy over the set.
#[derive(Clone)]
pub struct DiffusionFamily {
    pub dim: usize,
    drift: DriftFn,
    vol: VolFn,
    pub control_set: ControlSet,
    pub lipschitz_l: f64,
}

impl fmt::Debug for DiffusionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionFamily")
            .field("dim", &self.dim)
            .field("controls", &self.control_set.len())
            .field("lipschitz_l", &self.lipschitz_l)
            .finish()
    }
}

impl DiffusionFamily {
    pub fn new(
        dim: usize,
        drift: DriftFn,
        vol: VolFn,
        control_set: ControlSet,
        lipschitz_l: f64,
    ) -> Self {
        Self {
            dim,
            drift,
            vol,
            control_set,
            lipschitz_l,
        }
    }

    /// One-dimensional family from scalar coefficient closures.
    pub fn scalar(
        drift: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        vol: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        control_set: ControlSet,
        lipschitz_l: f64,
    ) -> Self {
        Self::new(
            1,
            Arc::new(move |t, x, u, out| out[0] = drift(t, x[0], u[0])),
            Arc::new(move |t, x, u, out| out[0] = vol(t, x[0], u[0])),
            control_set,
            lipschitz_l,
        )
    }

    /// Geometric dynamics `dX = X (mu_rate dt + u dW)` with the volatility
    /// as the control: the canonical uncertain-volatility market.
    pub fn uncertain_vol_gbm(sigmas: &[f64], mu_rate: f64) -> Result<Self, MarketError> {
        let set = ControlSet::scalar(sigmas)?;
        let s_max = sigmas.iter().cloned().fold(0.0, f64::max);
        let l = (mu_rate * mu_rate + s_max * s_max).sqrt() * 1.0001 + 1e-12;
        Ok(Self::scalar(
            move |_t, x, _u| mu_rate * x,
            |_t, x, u| u * x,
            set,
            l,
        ))
    }

    /// Singleton geometric market with fixed volatility.
    pub fn single_gbm(sigma: f64, mu_rate: f64) -> Result<Self, MarketError> {
        Self::uncertain_vol_gbm(&[sigma], mu_rate)
    }

    /// Arithmetic dynamics `dX = b dt + u dW` with constant coefficients;
    /// the control is the (scalar) volatility level.
    pub fn arithmetic(sigmas: &[f64], b: f64) -> Result<Self, MarketError> {
        let set = ControlSet::scalar(sigmas)?;
        Ok(Self::scalar(move |_t, _x, _u| b, |_t, _x, u| u, set, 1e-12))
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, u, out)
    }

    #[inline]
    pub fn vol_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.vol)(t, x, u, out)
    }

    /// Realised diffusion matrix `sigma sigma^T` at `(t, x, u)`, row-major.
    pub fn a_into(&self, t: f64, x: &[f64], u: &[f64], sig_buf: &mut [f64], out: &mut [f64]) {
        let d = self.dim;
        self.vol_into(t, x, u, sig_buf);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for l in 0..d {
                    s += sig_buf[i * d + l] * sig_buf[j * d + l];
                }
                out[i * d + j] = s;
            }
        }
    }

    /// Samples random `(t, x, x', u)` tuples and returns the largest observed
    /// ratio `||(mu,sigma)(t,x,u) - (mu,sigma)(t,x',u)|| / ||x - x'||`.
    /// The declared constant passes when the ratio stays below it.
    pub fn sample_lipschitz_ratio(&self, horizon: f64, samples: usize, seed: u64) -> f64 {
        let d = self.dim;
        let mut rng = PathRng::new(seed, 0xD1FF);
        let mut worst: f64 = 0.0;
        let mut mu_a = vec![0.0; d];
        let mut mu_b = vec![0.0; d];
        let mut sg_a = vec![0.0; d * d];
        let mut sg_b = vec![0.0; d * d];
        for _ in 0..samples {
            let t = rng.uniform() * horizon;
            let u = self
                .control_set
                .point((rng.next_u64() as usize) % self.control_set.len());
            let x: Vec<f64> = (0..d).map(|_| 1.0 + 2.0 * rng.normal().abs()).collect();
            let mut xp = x.clone();
            for v in xp.iter_mut() {
                *v += 0.5 * rng.normal();
            }
            let dist: f64 = x
                .iter()
                .zip(&xp)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < 1e-12 {
                continue;
            }
            self.drift_into(t, &x, u, &mut mu_a);
            self.drift_into(t, &xp, u, &mut mu_b);
            self.vol_into(t, &x, u, &mut sg_a);
            self.vol_into(t, &xp, u, &mut sg_b);
            let num: f64 = (mu_a
                .iter()
                .zip(&mu_b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                + sg_a
                    .iter()
                    .zip(&sg_b)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>())
            .sqrt();
            worst = worst.max(num / dist);
        }
        worst
    }
}

/// Uniform bucketing of the first state coordinate, used by table policies
/// and by path-mode value surfaces.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BucketGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl BucketGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 1 && hi > lo, "degenerate bucket grid");
        Self { lo, hi, n }
    }

    /// Bucket index of `x`, clamped to the boundary buckets.
    #[inline]
    pub fn bucket(&self, x: f64) -> usize {
        if x <= self.lo {
            return 0;
        }
        let w = (self.hi - self.lo) / self.n as f64;
        (((x - self.lo) / w) as usize).min(self.n - 1)
    }

    /// Centre of bucket `i`.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        let w = (self.hi - self.lo) / self.n as f64;
        self.lo + (i as f64 + 0.5) * w
    }
}

/// Markov feedback policy: a constant control, or a per-step lookup table
/// over state buckets. Stored as indices into the owning [`ControlSet`],
/// so every lookup returns a member of the set by construction.
#[derive(Debug, Clone)]
pub enum ControlPolicy {
    Constant(usize),
    Table {
        grid: BucketGrid,
        /// `indices[k][bucket]` -> control index, for `k = 0..N-1`.
        indices: Vec<Vec<usize>>,
    },
}

impl ControlPolicy {
    /// Control index applied at step `k` in state `x`.
    #[inline]
    pub fn control_index(&self, k: usize, x: &[f64]) -> usize {
        match self {
            ControlPolicy::Constant(i) => *i,
            ControlPolicy::Table { grid, indices } => {
                let row = &indices[k.min(indices.len() - 1)];
                row[grid.bucket(x[0])]
            }
        }
    }

    pub fn describe(&self, set: &ControlSet) -> String {
        match self {
            ControlPolicy::Constant(i) => format!("constant {}", set.label(*i)),
            ControlPolicy::Table { indices, .. } => format!("table[{} steps]", indices.len()),
        }
    }
}

/// Simulated ensemble under one policy: states, Brownian increments, the
/// realised diffusion matrix and drift along every path.
///
/// Layout is flat and row-major: `states[(m * (N+1) + k) * d + i]`,
/// `dw[(m * N + k) * d + i]`, `a_hat[(m * N + k) * d * d + ..]`. The
/// coefficient entries are aligned with the increment from `t_k` to
/// `t_{k+1}`, i.e. evaluated at `(t_k, X[m][k])`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub dim: usize,
    pub paths: usize,
    pub seed: u64,
    pub policy: ControlPolicy,
    states: Vec<f64>,
    dw: Vec<f64>,
    a_hat: Vec<f64>,
    drift_b: Vec<f64>,
}

impl PathEnsemble {
    #[inline]
    pub fn state(&self, m: usize, k: usize) -> &[f64] {
        let d = self.dim;
        let off = (m * (self.grid.steps() + 1) + k) * d;
        &self.states[off..off + d]
    }

    #[inline]
    pub fn increment(&self, m: usize, k: usize) -> &[f64] {
        let d = self.dim;
        let off = (m * self.grid.steps() + k) * d;
        &self.dw[off..off + d]
    }

    /// Realised `sigma sigma^T` at `(t_k, X[m][k])`, row-major `d x d`.
    #[inline]
    pub fn a_hat(&self, m: usize, k: usize) -> &[f64] {
        let d = self.dim * self.dim;
        let off = (m * self.grid.steps() + k) * d;
        &self.a_hat[off..off + d]
    }

    #[inline]
    pub fn drift(&self, m: usize, k: usize) -> &[f64] {
        let d = self.dim;
        let off = (m * self.grid.steps() + k) * d;
        &self.drift_b[off..off + d]
    }

    /// Largest negative eigenvalue over all stored `a_hat` (0 when none).
    pub fn psd_violation(&self) -> f64 {
        let d = self.dim;
        let n = self.grid.steps();
        let mut worst: f64 = 0.0;
        for m in 0..self.paths {
            for k in 0..n {
                let a = DMatrix::from_row_slice(d, d, self.a_hat(m, k));
                let eig = a.symmetric_eigenvalues();
                for v in eig.iter() {
                    if *v < worst {
                        worst = *v;
                    }
                }
            }
        }
        worst
    }

    /// Columnar CSV dump: `path,step,t,x_0..x_{d-1},dw_0..dw_{d-1}`.
    /// The terminal row of each path carries empty increment columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.dim;
        write!(w, "path,step,t")?;
        for i in 0..d {
            write!(w, ",x{i}")?;
        }
        for i in 0..d {
            write!(w, ",dw{i}")?;
        }
        writeln!(w)?;
        for m in 0..self.paths {
            for k in 0..=self.grid.steps() {
                write!(w, "{m},{k},{}", self.grid.node(k))?;
                for &v in self.state(m, k) {
                    write!(w, ",{v}")?;
                }
                if k < self.grid.steps() {
                    for &v in self.increment(m, k) {
                        write!(w, ",{v}")?;
                    }
                } else {
                    for _ in 0..d {
                        write!(w, ",")?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Euler-Maruyama simulation of `paths` trajectories under `policy`.
///
/// Deterministic for fixed `(seed, paths, grid)` independently of thread
/// count: every path writes to a disjoint slice and owns its random stream.
pub fn simulate(
    family: &DiffusionFamily,
    policy: &ControlPolicy,
    grid: TimeGrid,
    paths: usize,
    x0: &[f64],
    seed: u64,
) -> Result<PathEnsemble, MarketError> {
    if paths == 0 {
        return Err(MarketError::InvalidInput("paths must be >= 1".into()));
    }
    if x0.len() != family.dim {
        return Err(MarketError::InvalidInput(format!(
            "x0 has dimension {}, family has {}",
            x0.len(),
            family.dim
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(MarketError::InvalidInput("x0 must be finite".into()));
    }
    let d = family.dim;
    let n = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut states = vec![0.0; paths * (n + 1) * d];
    let mut dw = vec![0.0; paths * n * d];
    let mut a_hat = vec![0.0; paths * n * d * d];
    let mut drift_b = vec![0.0; paths * n * d];

    let res: Result<Vec<()>, MarketError> = states
        .par_chunks_mut((n + 1) * d)
        .zip(dw.par_chunks_mut(n * d))
        .zip(a_hat.par_chunks_mut(n * d * d))
        .zip(drift_b.par_chunks_mut(n * d))
        .enumerate()
        .map(|(m, (((xs, dws), ahs), bs))| {
            let mut rng = PathRng::new(seed, m as u64);
            let mut mu = vec![0.0; d];
            let mut sig = vec![0.0; d * d];
            xs[..d].copy_from_slice(x0);
            for k in 0..n {
                let t = grid.node(k);
                let (head, tail) = xs.split_at_mut((k + 1) * d);
                let x = &head[k * d..];
                let u_idx = policy.control_index(k, x);
                let u = family.control_set.point(u_idx);
                family.drift_into(t, x, u, &mut mu);
                family.vol_into(t, x, u, &mut sig);
                let dwk = &mut dws[k * d..(k + 1) * d];
                for v in dwk.iter_mut() {
                    *v = rng.normal() * sqrt_dt;
                }
                let xn = &mut tail[..d];
                for i in 0..d {
                    let mut diff = 0.0;
                    for j in 0..d {
                        diff += sig[i * d + j] * dwk[j];
                    }
                    xn[i] = x[i] + mu[i] * dt + diff;
                    if !xn[i].is_finite() {
                        return Err(MarketError::SimulationDiverged { path: m, step: k + 1 });
                    }
                }
                bs[k * d..(k + 1) * d].copy_from_slice(&mu);
                let ah = &mut ahs[k * d * d..(k + 1) * d * d];
                for i in 0..d {
                    for j in 0..d {
                        let mut s = 0.0;
                        for l in 0..d {
                            s += sig[i * d + l] * sig[j * d + l];
                        }
                        ah[i * d + j] = s;
                    }
                }
            }
            Ok(())
        })
        .collect();
    res?;

    Ok(PathEnsemble {
        grid,
        dim: d,
        paths,
        seed,
        policy: policy.clone(),
        states,
        dw,
        a_hat,
        drift_b,
    })
}

/// Symmetric PSD square root and Moore-Penrose pseudoinverse of `a`.
///
/// Both come from one spectral decomposition: eigenvalues in
/// `[EIGEN_FLOOR, 0)` are clamped to zero (degenerate diffusions are
/// allowed), anything lower is rejected, as is asymmetry beyond
/// [`SYMMETRY_TOL`]. Returns `(a_half, a_pinv)` with
/// `a_half a_half^T = a` and `a a_pinv a = a`.
pub fn pseudoinverse_sqrt(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), MarketError> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(MarketError::InvalidMatrix("matrix must be square".into()));
    }
    let mut max_asym: f64 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL {
        return Err(MarketError::InvalidMatrix(format!(
            "asymmetry {max_asym:.3e} exceeds {SYMMETRY_TOL:.0e}"
        )));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut max_eig: f64 = 0.0;
    for &l in eig.eigenvalues.iter() {
        max_eig = max_eig.max(l);
        if l < EIGEN_FLOOR {
            return Err(MarketError::InvalidMatrix(format!(
                "eigenvalue {l:.3e} below floor {EIGEN_FLOOR:.0e}"
            )));
        }
    }
    // Rank cut for the pseudoinverse, relative to the largest eigenvalue.
    let cut = 1e-12 * max_eig.max(1e-300);
    let q = &eig.eigenvectors;
    let mut half = DMatrix::zeros(d, d);
    let mut pinv = DMatrix::zeros(d, d);
    for idx in 0..d {
        let l = eig.eigenvalues[idx].max(0.0);
        let col = q.column(idx);
        let sq = l.sqrt();
        let iv = if l > cut { 1.0 / l } else { 0.0 };
        for i in 0..d {
            for j in 0..d {
                half[(i, j)] += sq * col[i] * col[j];
                pinv[(i, j)] += iv * col[i] * col[j];
            }
        }
    }
    Ok((half, pinv))
}

/// Pseudoinverse of the symmetric square root, `(a^{1/2})^+`, used by the
/// market risk premium.
pub fn sqrt_pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>, MarketError> {
    let (half, _) = pseudoinverse_sqrt(a)?;
    let (_, hp) = pseudoinverse_sqrt(&(half.clone() * half.transpose()))?;
    // For symmetric PSD `h`, h^+ = (h^2)^+ h.
    Ok(hp * half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn frob(a: &DMatrix<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn degenerate_diffusion_is_constant() {
        let fam = DiffusionFamily::scalar(
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            ControlSet::scalar(&[0.0]).unwrap(),
            1e-12,
        );
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, 50, &[1.0], 7).unwrap();
        for m in 0..50 {
            for k in 0..=10 {
                assert_eq!(ens.state(m, k)[0], 1.0);
            }
        }
    }

    #[test]
    fn driftless_geometric_mean_is_one() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let m = 100_000;
        let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, m, &[1.0], 42).unwrap();
        let mean: f64 =
            (0..m).map(|i| ens.state(i, 50)[0]).sum::<f64>() / m as f64;
        // stderr of X_T is about 0.2/sqrt(M); allow 3 standard errors.
        let stderr = 0.2 / (m as f64).sqrt();
        assert!(
            (mean - 1.0).abs() < 3.0 * stderr * 1.1,
            "mean {mean} vs 1.0 (stderr {stderr})"
        );
    }

    #[test]
    fn constant_vol_variance_matches_gaussian_law() {
        // dX = u dW with u = 0.3: X_T ~ N(0, 0.09 T) exactly, and the Euler
        // scheme reproduces the law exactly on the grid.
        let fam = DiffusionFamily::arithmetic(&[0.3], 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let m = 100_000;
        let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, m, &[0.0], 9).unwrap();
        let xs: Vec<f64> = (0..m).map(|i| ens.state(i, 50)[0]).collect();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
        // stderr of the sample variance of N(0, s2) is s2 sqrt(2/M).
        let s2 = 0.09;
        let stderr = s2 * (2.0 / m as f64).sqrt();
        assert!(
            (var - s2).abs() < 3.0 * stderr,
            "var {var} vs {s2} (stderr {stderr})"
        );
    }

    #[test]
    fn increments_have_correct_moments() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.05).unwrap();
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let m = 50_000;
        let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, m, &[1.0], 3).unwrap();
        let dt = grid.dt();
        let mut mean = 0.0;
        let mut var = 0.0;
        for i in 0..m {
            for k in 0..10 {
                let w = ens.increment(i, k)[0];
                mean += w;
                var += w * w;
            }
        }
        let count = (m * 10) as f64;
        mean /= count;
        var /= count;
        assert!(mean.abs() < 4.0 * dt.sqrt() / count.sqrt());
        assert!((var - dt).abs() < 4.0 * dt * (2.0 / count).sqrt());
    }

    #[test]
    fn byte_identical_across_thread_counts() {
        let fam = DiffusionFamily::single_gbm(0.25, 0.02).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                simulate(&fam, &ControlPolicy::Constant(0), grid, 500, &[100.0], 11).unwrap()
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.states, b.states);
        assert_eq!(a.dw, b.dw);
    }

    #[test]
    fn path_streams_do_not_depend_on_path_count() {
        let fam = DiffusionFamily::single_gbm(0.25, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let small = simulate(&fam, &ControlPolicy::Constant(0), grid, 10, &[1.0], 5).unwrap();
        let large = simulate(&fam, &ControlPolicy::Constant(0), grid, 1000, &[1.0], 5).unwrap();
        for m in 0..10 {
            assert_eq!(small.state(m, 20), large.state(m, 20));
        }
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let fam = DiffusionFamily::scalar(
            |_, x, _| x * 1e300,
            |_, _, _| 0.0,
            ControlSet::scalar(&[0.0]).unwrap(),
            f64::MAX,
        );
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let err = simulate(&fam, &ControlPolicy::Constant(0), grid, 2, &[1.0], 1).unwrap_err();
        match err {
            MarketError::SimulationDiverged { path, step } => {
                assert!(step >= 1);
                assert!(path < 2);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn psd_check_passes_on_gbm_ensemble() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, 100, &[1.0], 2).unwrap();
        assert!(ens.psd_violation() >= EIGEN_FLOOR);
    }

    #[test]
    fn pseudoinverse_sqrt_identity() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let (h, p) = pseudoinverse_sqrt(&i2).unwrap();
        assert!(frob(&(h.clone() - &i2)) < 1e-12);
        assert!(frob(&(p - &i2)) < 1e-12);
    }

    #[test]
    fn pseudoinverse_sqrt_zero() {
        let z = DMatrix::<f64>::zeros(2, 2);
        let (h, p) = pseudoinverse_sqrt(&z).unwrap();
        assert_eq!(frob(&h), 0.0);
        assert_eq!(frob(&p), 0.0);
    }

    #[test]
    fn pseudoinverse_sqrt_rank_deficient() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let (h, p) = pseudoinverse_sqrt(&a).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[(1, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(0, 0)], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pseudoinverse_sqrt_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(pseudoinverse_sqrt(&a).is_err());
    }

    #[test]
    fn pseudoinverse_sqrt_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(pseudoinverse_sqrt(&a).is_err());
    }

    #[test]
    fn sqrt_pinv_recovers_risk_premium_scaling() {
        // a = diag(0.04): (a^{1/2})^+ = diag(1/0.2) = diag(5).
        let a = DMatrix::from_row_slice(1, 1, &[0.04]);
        let sp = sqrt_pinv(&a).unwrap();
        assert_abs_diff_eq!(sp[(0, 0)], 5.0, epsilon = 1e-10);
    }

    #[test]
    fn gbm_weak_bias_decreases_monotonically() {
        // For dX = r X dt + s X dW the Euler scheme has
        // E[X_T] = x0 (1 + r dt)^N exactly; the deterministic bias against
        // x0 e^{rT} must shrink monotonically in N, and the Monte Carlo
        // mean must sit within 3 standard errors of the discrete mean.
        let (r, s, x0, t) = (0.05, 0.2, 1.0, 1.0);
        let fam = DiffusionFamily::single_gbm(s, r).unwrap();
        let mut biases = Vec::new();
        for &n in &[25usize, 50, 100] {
            let grid = TimeGrid::new(t, n).unwrap();
            let m = 200_000;
            let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, m, &[x0], 17).unwrap();
            let xs: Vec<f64> = (0..m).map(|i| ens.state(i, n)[0]).collect();
            let mean = xs.iter().sum::<f64>() / m as f64;
            let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64).sqrt();
            let discrete = x0 * (1.0 + r * grid.dt()).powi(n as i32);
            assert!(
                (mean - discrete).abs() <= 3.0 * sd / (m as f64).sqrt(),
                "N={n}: MC mean {mean} vs discrete {discrete}"
            );
            biases.push((discrete - x0 * (r * t).exp()).abs());
        }
        assert!(biases[0] > biases[1] && biases[1] > biases[2], "{biases:?}");
    }

    #[test]
    fn lipschitz_sampling_respects_declared_constant() {
        let fam = DiffusionFamily::uncertain_vol_gbm(&[0.1, 0.3], 0.05).unwrap();
        let ratio = fam.sample_lipschitz_ratio(1.0, 1000, 99);
        assert!(
            ratio <= fam.lipschitz_l,
            "ratio {ratio} exceeds declared {}",
            fam.lipschitz_l
        );
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, 2, &[1.0], 1).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,x0,dw0");
        assert_eq!(lines.len(), 1 + 2 * 3);
    }
}
