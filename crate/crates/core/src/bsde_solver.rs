//! Single-measure backward solver on the time grid.
//!
//! Two estimators of the conditional expectation drive the same backward
//! recursion
//!
//! ```text
//! Y_k = E[Y_{k+1} | F_k] - f(t_k, X_k, Y_k, (a^{1/2})^T Z_k, a_k, b_k) dt
//! Z_k = a_k^+ . E[Y_{k+1} (X_{k+1} - X_k - b_k dt)^T | F_k] / dt
//! ```
//!
//! * path mode: ridge-regularised least squares on a basis of the current
//!   state, over a simulated [`PathEnsemble`];
//! * lattice mode: exact expectations on a recombining chain
//!   ([`crate::lattice`]), the in-repo oracle for one-dimensional problems.
//!
//! The implicit dependence of the driver on `Y_k` is resolved by a per-step
//! Picard iteration, which contracts whenever `lipschitz_y * dt < 1`; the
//! iteration aborts with a divergence error when the sup-norm change grows
//! five times in a row. `Z_k` is computed once per step from the covariation
//! regression and held fixed during the iteration.

use std::io::{self, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::generators::{GeneratorSpec, TerminalClaim};
use crate::lattice::{Chain, LatticeError, StepExpectations};
use crate::market_paths::{pseudoinverse_sqrt, DiffusionFamily, MarketError, PathEnsemble};

/// Fixed chunk length for parallel reductions; summation order is the chunk
/// order, so results do not depend on the thread count.
const SUM_BLOCK: usize = 8192;

/// Condition-number threshold above which the ridge penalty engages.
pub const RIDGE_CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(
        "Picard iteration diverged at step {step}: sup-norm change grew 5 times in a row \
         (lipschitz_y * dt = {lipschitz_dt:.3}, contraction requires < 1)"
    )]
    StepDivergence { step: usize, lipschitz_dt: f64 },
    #[error("regression basis failure at step {step}: {reason}")]
    BasisError { step: usize, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Estimator of `E[. | F_k]` in path mode.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    /// Ridge strength applied when the normal equations get ill-conditioned.
    pub ridge: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum BasisKind {
    /// Monomials `1, x, .., x^degree` per state coordinate.
    Polynomial { degree: usize },
    /// Hat functions on uniform buckets spanning the sample range of the
    /// first coordinate.
    PiecewiseLinear { buckets: usize },
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            kind: BasisKind::Polynomial { degree: 3 },
            ridge: 1e-9,
        }
    }
}

/// Per-step feature preparation: standardisation constants and the sample
/// range, frozen before the regression.
struct FeatPrep {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl FeatPrep {
    fn from_states(ens: &PathEnsemble, k: usize) -> Self {
        let d = ens.dim;
        let n = ens.paths as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for m in 0..ens.paths {
            for (i, &v) in ens.state(m, k).iter().enumerate() {
                mean[i] += v;
            }
        }
        for v in mean.iter_mut() {
            *v /= n;
        }
        for m in 0..ens.paths {
            for (i, &v) in ens.state(m, k).iter().enumerate() {
                var[i] += (v - mean[i]) * (v - mean[i]);
            }
        }
        let inv_std = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s > 1e-300 {
                    1.0 / s
                } else {
                    0.0
                }
            })
            .collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in 0..ens.paths {
            let v = ens.state(m, k)[0];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Self {
            mean,
            inv_std,
            lo,
            hi,
        }
    }
}

impl RegressionBasis {
    fn width(&self, dim: usize) -> usize {
        match self.kind {
            BasisKind::Polynomial { degree } => 1 + degree * dim,
            BasisKind::PiecewiseLinear { buckets } => buckets + 1,
        }
    }

    /// Fills the feature row for state `x`; monomials act on standardised
    /// coordinates so the normal equations stay well conditioned.
    fn features(&self, x: &[f64], prep: &FeatPrep, out: &mut [f64]) {
        match self.kind {
            BasisKind::Polynomial { degree } => {
                out[0] = 1.0;
                let mut c = 1;
                for (i, &xi) in x.iter().enumerate() {
                    let s = (xi - prep.mean[i]) * prep.inv_std[i];
                    let mut p = 1.0;
                    for _ in 0..degree {
                        p *= s;
                        out[c] = p;
                        c += 1;
                    }
                }
            }
            BasisKind::PiecewiseLinear { buckets } => {
                out.fill(0.0);
                let span = (prep.hi - prep.lo).max(1e-300);
                let pos = ((x[0] - prep.lo) / span * buckets as f64).clamp(0.0, buckets as f64);
                let j = (pos as usize).min(buckets - 1);
                let frac = pos - j as f64;
                out[j] = 1.0 - frac;
                out[j + 1] = frac;
            }
        }
    }
}

/// Deterministic blockwise sum of per-item contributions into `acc`.
fn block_accumulate<T: Sync>(
    items: &[T],
    acc_len: usize,
    per_item: impl Fn(usize, &T, &mut [f64]) + Sync,
) -> Vec<f64> {
    let blocks: Vec<Vec<f64>> = items
        .par_chunks(SUM_BLOCK)
        .enumerate()
        .map(|(bi, chunk)| {
            let mut local = vec![0.0; acc_len];
            for (i, it) in chunk.iter().enumerate() {
                per_item(bi * SUM_BLOCK + i, it, &mut local);
            }
            local
        })
        .collect();
    let mut acc = vec![0.0; acc_len];
    for b in blocks {
        for (a, v) in acc.iter_mut().zip(b) {
            *a += v;
        }
    }
    acc
}

/// Least-squares fit on precomputed features; returns fitted values per row.
///
/// The intercept column is never penalised, so the fitted values preserve
/// the sample mean of the targets exactly and the zero-driver solve reduces
/// to the plain Monte Carlo mean.
fn regress(
    feats: &[f64],
    width: usize,
    targets: &[f64],
    ridge: f64,
    step: usize,
) -> Result<Vec<f64>, SolverError> {
    let n = targets.len();
    debug_assert_eq!(feats.len(), n * width);
    let packed = block_accumulate(
        targets,
        width * width + width,
        |i, &y, acc| {
            let row = &feats[i * width..(i + 1) * width];
            for a in 0..width {
                let ra = row[a];
                acc[width * width + a] += ra * y;
                for b in 0..width {
                    acc[a * width + b] += ra * row[b];
                }
            }
        },
    );
    let mut gram = DMatrix::from_row_slice(width, width, &packed[..width * width]);
    let rhs = nalgebra::DVector::from_column_slice(&packed[width * width..]);

    let eig = gram.clone().symmetric_eigenvalues();
    let max_e = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min_e = eig.iter().cloned().fold(f64::MAX, f64::min);
    let cond = if min_e > 0.0 { max_e / min_e } else { f64::INFINITY };
    if cond > RIDGE_CONDITION_LIMIT {
        if ridge > 0.0 {
            for i in 1..width {
                gram[(i, i)] += ridge * max_e.max(1.0);
            }
        } else {
            return Err(SolverError::BasisError {
                step,
                reason: format!("design matrix condition {cond:.3e} with no ridge configured"),
            });
        }
    }
    let chol = gram.clone().cholesky().ok_or_else(|| SolverError::BasisError {
        step,
        reason: "rank-deficient design matrix".into(),
    })?;
    let beta = chol.solve(&rhs);

    Ok((0..n)
        .map(|i| {
            let row = &feats[i * width..(i + 1) * width];
            row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum()
        })
        .collect())
}

/// Per-step Picard iteration over a slice of values.
///
/// `expect[i]` is the conditional-expectation estimate, `driver(i, y)` the
/// driver value at the slice point. Returns `(values, sweeps, residual)`.
fn picard_slice(
    expect: &[f64],
    dt: f64,
    tol: f64,
    step: usize,
    lipschitz_dt: f64,
    driver: impl Fn(usize, f64) -> f64 + Sync,
) -> Result<(Vec<f64>, usize, f64), SolverError> {
    let mut y = expect.to_vec();
    let mut y_next = vec![0.0; y.len()];
    let mut prev_change = f64::INFINITY;
    let mut growth_streak = 0usize;
    let mut sweeps = 0usize;
    let mut change = 0.0;
    const MAX_SWEEPS: usize = 200;
    for _ in 0..MAX_SWEEPS {
        sweeps += 1;
        change = y
            .par_iter()
            .enumerate()
            .zip(y_next.par_iter_mut())
            .map(|((i, &yi), out)| {
                let v = expect[i] - driver(i, yi) * dt;
                *out = v;
                (v - yi).abs()
            })
            .reduce(|| 0.0, f64::max);
        std::mem::swap(&mut y, &mut y_next);
        if change < tol {
            return Ok((y, sweeps, change));
        }
        if change > prev_change {
            growth_streak += 1;
            if growth_streak >= 5 {
                return Err(SolverError::StepDivergence { step, lipschitz_dt });
            }
        } else {
            growth_streak = 0;
        }
        prev_change = change;
    }
    if change < tol.max(1e-8) {
        Ok((y, sweeps, change))
    } else {
        Err(SolverError::StepDivergence { step, lipschitz_dt })
    }
}

/// Backward solution over an ensemble: `y[m][k]`, `z[m][k][.]`, and
/// per-step iteration diagnostics.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    pub picard_iters: Vec<usize>,
    pub residual: Vec<f64>,
}

impl BackwardSolution {
    #[inline]
    pub fn y(&self, m: usize, k: usize) -> f64 {
        self.y[m * (self.steps + 1) + k]
    }

    #[inline]
    pub fn z(&self, m: usize, k: usize) -> &[f64] {
        let off = (m * self.steps + k) * self.dim;
        &self.z[off..off + self.dim]
    }

    /// Slice of values at step `k` across paths.
    pub fn y_slice(&self, k: usize) -> Vec<f64> {
        (0..self.paths).map(|m| self.y(m, k)).collect()
    }

    /// Time-0 value (all paths share it up to regression rounding).
    pub fn y0(&self) -> f64 {
        self.y(0, 0)
    }

    /// Monte Carlo standard error proxy at time 0. Each regression
    /// preserves the target mean, so the estimator noise of `y0` is the
    /// noise of the terminal-slice mean; its standard error is the proxy.
    pub fn y0_stderr(&self) -> f64 {
        let n = self.paths as f64;
        let vals: Vec<f64> = (0..self.paths).map(|m| self.y(m, self.steps)).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (var / n).sqrt()
    }

    /// Diagnostics CSV: `step,picard_iters,residual,y_mean,y_stderr`.
    pub fn write_diagnostics_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,picard_iters,residual,y_mean,y_stderr")?;
        let n = self.paths as f64;
        for k in 0..self.steps {
            let vals: Vec<f64> = (0..self.paths).map(|m| self.y(m, k)).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            writeln!(
                w,
                "{k},{},{:e},{mean},{:e}",
                self.picard_iters[k],
                self.residual[k],
                (var / n).sqrt()
            )?;
        }
        Ok(())
    }
}

/// Solves the backward equation over `ens` with terminal condition `claim`.
///
/// `clip_m`, when set, truncates both the terminal value and the driver to
/// `[-m, m]`; with `m` beyond their sup-norms the solve is unchanged.
pub fn solve_bsde(
    ens: &PathEnsemble,
    gen: &GeneratorSpec,
    claim: &TerminalClaim,
    basis: &RegressionBasis,
    picard_tol: f64,
    clip_m: Option<f64>,
) -> Result<BackwardSolution, SolverError> {
    let n = ens.grid.steps();
    let terminal: Vec<f64> = (0..ens.paths)
        .map(|m| clip(claim.eval(ens.state(m, n)), clip_m))
        .collect();
    solve_bsde_with_terminal(ens, gen, &terminal, n, basis, picard_tol, clip_m)
}

/// Backward solve on `[0, k_end]` with explicit per-path terminal values,
/// the building block for the tower verifier.
pub fn solve_bsde_with_terminal(
    ens: &PathEnsemble,
    gen: &GeneratorSpec,
    terminal: &[f64],
    k_end: usize,
    basis: &RegressionBasis,
    picard_tol: f64,
    clip_m: Option<f64>,
) -> Result<BackwardSolution, SolverError> {
    if picard_tol <= 0.0 {
        return Err(SolverError::Precondition("picard_tol must be > 0".into()));
    }
    if terminal.len() != ens.paths {
        return Err(SolverError::Precondition(
            "terminal values must match the path count".into(),
        ));
    }
    let d = ens.dim;
    let m_paths = ens.paths;
    let dt = ens.grid.dt();
    let lipschitz_dt = gen.lipschitz_y * dt;
    let width = basis.width(d);

    let mut y = vec![0.0; m_paths * (k_end + 1)];
    let mut z = vec![0.0; m_paths * k_end * d];
    let mut picard_iters = vec![0usize; k_end];
    let mut residual = vec![0.0; k_end];

    for m in 0..m_paths {
        y[m * (k_end + 1) + k_end] = terminal[m];
    }

    let mut feats = vec![0.0; m_paths * width];
    let mut y_next: Vec<f64> = terminal.to_vec();

    for k in (0..k_end).rev() {
        let t_k = ens.grid.node(k);
        let prep = FeatPrep::from_states(ens, k);
        let degenerate = prep.hi - prep.lo < 1e-12 * (1.0 + prep.hi.abs());

        // Conditional expectation of Y_{k+1}, then the covariation
        // regression on the centred targets (Y - E[Y|F_k]) dX^c / dt: the
        // centring leaves the conditional covariation unchanged and makes
        // the estimator exact for constant values.
        let (expect, cov): (Vec<f64>, Vec<Vec<f64>>) = if degenerate || k == 0 {
            // F_0 (or a collapsed slice) admits only the plain mean.
            let mean = block_accumulate(&y_next, 1, |_, &v, acc| acc[0] += v)[0] / m_paths as f64;
            let mut cov = Vec::with_capacity(d);
            for i in 0..d {
                let s = block_accumulate(&y_next, 1, |m, &v, acc| {
                    let xc = ens.state(m, k + 1)[i]
                        - ens.state(m, k)[i]
                        - ens.drift(m, k)[i] * dt;
                    acc[0] += (v - mean) * xc / dt;
                })[0]
                    / m_paths as f64;
                cov.push(vec![s; m_paths]);
            }
            (vec![mean; m_paths], cov)
        } else {
            feats
                .par_chunks_mut(width)
                .enumerate()
                .for_each(|(m, row)| basis.features(ens.state(m, k), &prep, row));
            let expect = regress(&feats, width, &y_next, basis.ridge, k)?;
            let mut cov = Vec::with_capacity(d);
            for i in 0..d {
                let targets: Vec<f64> = (0..m_paths)
                    .map(|m| {
                        let xc = ens.state(m, k + 1)[i]
                            - ens.state(m, k)[i]
                            - ens.drift(m, k)[i] * dt;
                        (y_next[m] - expect[m]) * xc / dt
                    })
                    .collect();
                cov.push(regress(&feats, width, &targets, basis.ridge, k)?);
            }
            (expect, cov)
        };

        // Z_k = a^+ cov and its volatility-scaled form fed to the driver.
        let mut z_slice = vec![0.0; m_paths * d];
        let mut z_scaled = vec![0.0; m_paths * d];
        if d == 1 {
            z_slice
                .par_iter_mut()
                .zip(z_scaled.par_iter_mut())
                .enumerate()
                .for_each(|(m, (zs, zsc))| {
                    let a = ens.a_hat(m, k)[0];
                    let c = cov[0][m];
                    let zv = if a > 1e-300 { c / a } else { 0.0 };
                    *zs = zv;
                    *zsc = a.max(0.0).sqrt() * zv;
                });
        } else {
            let results: Result<Vec<(Vec<f64>, Vec<f64>)>, SolverError> = (0..m_paths)
                .into_par_iter()
                .map(|m| {
                    let a = DMatrix::from_row_slice(d, d, ens.a_hat(m, k));
                    let (half, pinv) = pseudoinverse_sqrt(&a)?;
                    let c: Vec<f64> = (0..d).map(|i| cov[i][m]).collect();
                    let mut zv = vec![0.0; d];
                    let mut zsc = vec![0.0; d];
                    for i in 0..d {
                        for jj in 0..d {
                            zv[i] += pinv[(i, jj)] * c[jj];
                        }
                    }
                    for i in 0..d {
                        for jj in 0..d {
                            // (a^{1/2})^T Z
                            zsc[i] += half[(jj, i)] * zv[jj];
                        }
                    }
                    Ok((zv, zsc))
                })
                .collect();
            for (m, (zv, zsc)) in results?.into_iter().enumerate() {
                z_slice[m * d..(m + 1) * d].copy_from_slice(&zv);
                z_scaled[m * d..(m + 1) * d].copy_from_slice(&zsc);
            }
        }

        let (y_k, sweeps, resid) = picard_slice(
            &expect,
            dt,
            picard_tol,
            k,
            lipschitz_dt,
            |m, yv| {
                clip(
                    gen.eval(
                        t_k,
                        ens.state(m, k),
                        yv,
                        &z_scaled[m * d..(m + 1) * d],
                        ens.a_hat(m, k),
                        ens.drift(m, k),
                    ),
                    clip_m,
                )
            },
        )?;

        for m in 0..m_paths {
            y[m * (k_end + 1) + k] = y_k[m];
        }
        for m in 0..m_paths {
            z[(m * k_end + k) * d..(m * k_end + k + 1) * d]
                .copy_from_slice(&z_slice[m * d..(m + 1) * d]);
        }
        picard_iters[k] = sweeps;
        residual[k] = resid;
        y_next = y_k;
    }

    Ok(BackwardSolution {
        paths: m_paths,
        steps: k_end,
        dim: d,
        y,
        z,
        picard_iters,
        residual,
    })
}

#[inline]
fn clip(v: f64, m: Option<f64>) -> f64 {
    match m {
        Some(c) => v.clamp(-c, c),
        None => v,
    }
}

// ---------------------------------------------------------------------------
// Lattice (exact-expectation) mode
// ---------------------------------------------------------------------------

/// One backward step on the chain under a fixed control: solves the driver
/// fixed point at every node given precomputed step expectations.
pub(crate) fn lattice_driver_step(
    chain: &Chain,
    family: &DiffusionFamily,
    gen: &GeneratorSpec,
    u: &[f64],
    t_k: f64,
    step: &StepExpectations,
    picard_tol: f64,
    step_index: usize,
) -> Result<(Vec<f64>, Vec<f64>, usize, f64), SolverError> {
    let dt = chain.grid.dt();
    let nodes = chain.x.len();
    let mut a = vec![0.0; nodes];
    let mut b = vec![0.0; nodes];
    let mut zv = vec![0.0; nodes];
    let mut z_scaled = vec![0.0; nodes];
    let mut mu = [0.0];
    let mut sg = [0.0];
    for j in 0..nodes {
        let xj = chain.x[j];
        family.drift_into(t_k, &[xj], u, &mut mu);
        family.vol_into(t_k, &[xj], u, &mut sg);
        a[j] = sg[0] * sg[0];
        b[j] = mu[0];
        zv[j] = if a[j] > 1e-300 {
            step.cov_rate[j] / a[j]
        } else {
            0.0
        };
        z_scaled[j] = a[j].sqrt() * zv[j];
    }
    let (y, sweeps, resid) = picard_slice(
        &step.value,
        dt,
        picard_tol,
        step_index,
        gen.lipschitz_y * dt,
        |j, yv| {
            gen.eval(
                t_k,
                &chain.x[j..j + 1],
                yv,
                &z_scaled[j..j + 1],
                &a[j..j + 1],
                &b[j..j + 1],
            )
        },
    )?;
    Ok((y, zv, sweeps, resid))
}

/// Backward solution on the chain: nodal values and integrands per step.
#[derive(Debug, Clone)]
pub struct LatticeSolution {
    pub chain: Chain,
    /// `values[k][j]` for `k = 0..=N`.
    pub values: Vec<Vec<f64>>,
    /// `z[k][j]` for `k = 0..N`.
    pub z: Vec<Vec<f64>>,
    pub picard_iters: Vec<usize>,
    pub residual: Vec<f64>,
}

impl LatticeSolution {
    pub fn y0(&self) -> f64 {
        self.values[0][self.chain.x0_index]
    }

    /// Value at step `k` interpolated at state `x`.
    pub fn value_at(&self, k: usize, x: f64) -> f64 {
        self.chain.interp(&self.values[k], x)
    }
}

/// Exact backward solve under one constant control (index into the family's
/// control set); the lattice counterpart of [`solve_bsde`].
pub fn solve_bsde_lattice(
    family: &DiffusionFamily,
    control_index: usize,
    chain: &Chain,
    gen: &GeneratorSpec,
    claim: &TerminalClaim,
    picard_tol: f64,
) -> Result<LatticeSolution, SolverError> {
    let n = chain.grid.steps();
    let terminal: Vec<f64> = chain.x.iter().map(|&x| claim.eval(&[x])).collect();
    solve_bsde_lattice_with_terminal(family, control_index, chain, gen, &terminal, n, picard_tol)
}

/// Lattice solve on `[0, k_end]` from an explicit terminal slice.
pub fn solve_bsde_lattice_with_terminal(
    family: &DiffusionFamily,
    control_index: usize,
    chain: &Chain,
    gen: &GeneratorSpec,
    terminal: &[f64],
    k_end: usize,
    picard_tol: f64,
) -> Result<LatticeSolution, SolverError> {
    if family.dim != 1 {
        return Err(SolverError::Precondition(
            "lattice mode is one-dimensional".into(),
        ));
    }
    let u = family.control_set.point(control_index).to_vec();
    let mut values = vec![Vec::new(); k_end + 1];
    let mut z = vec![Vec::new(); k_end];
    let mut picard_iters = vec![0usize; k_end];
    let mut residual = vec![0.0; k_end];
    values[k_end] = terminal.to_vec();
    for k in (0..k_end).rev() {
        let t_k = chain.grid.node(k);
        let step = chain.step_expectations(family, &u, t_k, &values[k + 1])?;
        let (y, zv, sweeps, resid) =
            lattice_driver_step(chain, family, gen, &u, t_k, &step, picard_tol, k)?;
        values[k] = y;
        z[k] = zv;
        picard_iters[k] = sweeps;
        residual[k] = resid;
    }
    Ok(LatticeSolution {
        chain: chain.clone(),
        values,
        z,
        picard_iters,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Verifiers
// ---------------------------------------------------------------------------

/// Outcome of the tower-property check `Y_0(T, xi) = Y_0(t_mid, Y_mid)`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TowerReport {
    pub k_mid: usize,
    pub y0_full: f64,
    pub y0_nested: f64,
    pub delta: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Path-mode tower check: re-solves the truncated equation with the
/// regression-smoothed mid-grid slice `E[Y_mid | X_mid]` as terminal data
/// and compares time-0 values. The smoothing is what makes the check
/// informative: the identity holds exactly for conditional expectations,
/// so the gap measures estimator noise and shrinks with the path count.
pub fn verify_tower(
    sol: &BackwardSolution,
    gen: &GeneratorSpec,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    k_mid: usize,
    picard_tol: f64,
    bias_allowance: f64,
) -> Result<TowerReport, SolverError> {
    if k_mid == 0 || k_mid >= sol.steps {
        return Err(SolverError::Precondition(format!(
            "k_mid must lie strictly inside the grid, got {k_mid}"
        )));
    }
    let raw = sol.y_slice(k_mid);
    let prep = FeatPrep::from_states(ens, k_mid);
    let mid = if prep.hi - prep.lo < 1e-12 * (1.0 + prep.hi.abs()) {
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        vec![mean; raw.len()]
    } else {
        let width = basis.width(ens.dim);
        let mut feats = vec![0.0; ens.paths * width];
        feats
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(m, row)| basis.features(ens.state(m, k_mid), &prep, row));
        regress(&feats, width, &raw, basis.ridge, k_mid)?
    };
    let trunc = solve_bsde_with_terminal(ens, gen, &mid, k_mid, basis, picard_tol, None)?;
    let delta = (sol.y0() - trunc.y0()).abs();
    let tolerance = 3.0 * (sol.y0_stderr() + trunc.y0_stderr()) + bias_allowance;
    Ok(TowerReport {
        k_mid,
        y0_full: sol.y0(),
        y0_nested: trunc.y0(),
        delta,
        tolerance,
        pass: delta <= tolerance,
    })
}

/// Lattice tower check; exact conditional expectations make the nested
/// solve coincide with the direct one node by node.
pub fn verify_tower_lattice(
    sol: &LatticeSolution,
    family: &DiffusionFamily,
    control_index: usize,
    gen: &GeneratorSpec,
    k_mid: usize,
    picard_tol: f64,
) -> Result<TowerReport, SolverError> {
    let n = sol.values.len() - 1;
    if k_mid == 0 || k_mid >= n {
        return Err(SolverError::Precondition(format!(
            "k_mid must lie strictly inside the grid, got {k_mid}"
        )));
    }
    let trunc = solve_bsde_lattice_with_terminal(
        family,
        control_index,
        &sol.chain,
        gen,
        &sol.values[k_mid],
        k_mid,
        picard_tol,
    )?;
    let delta = (sol.y0() - trunc.y0()).abs();
    let tolerance = 1e-10;
    Ok(TowerReport {
        k_mid,
        y0_full: sol.y0(),
        y0_nested: trunc.y0(),
        delta,
        tolerance,
        pass: delta <= tolerance,
    })
}

/// Outcome of an ordered-data comparison.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonReport {
    pub y0_upper: f64,
    pub y0_lower: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks the comparison principle on ordered data.
///
/// Hypotheses (verified on the inputs, a violation is a precondition error,
/// not a test failure): `claim_hi >= claim_lo` pathwise, and
/// `gen_hi <= gen_lo` on sampled tuples along the `hi` solution. Under the
/// sign convention `Y = xi - int f ...`, a smaller driver and a larger claim
/// both raise the value, so the conclusion is `Y_hi >= Y_lo` up to
/// tolerance.
pub fn verify_comparison(
    gen_hi: &GeneratorSpec,
    claim_hi: &TerminalClaim,
    gen_lo: &GeneratorSpec,
    claim_lo: &TerminalClaim,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    picard_tol: f64,
) -> Result<ComparisonReport, SolverError> {
    let n = ens.grid.steps();
    for m in 0..ens.paths {
        let x = ens.state(m, n);
        if claim_hi.eval(x) < claim_lo.eval(x) - 1e-12 {
            return Err(SolverError::Precondition(format!(
                "claims are not ordered on path {m}"
            )));
        }
    }
    let hi = solve_bsde(ens, gen_hi, claim_hi, basis, picard_tol, None)?;
    check_driver_order(gen_hi, gen_lo, &hi, ens)?;
    let lo = solve_bsde(ens, gen_lo, claim_lo, basis, picard_tol, None)?;
    let tolerance = 3.0 * (hi.y0_stderr() + lo.y0_stderr());
    let pass = hi.y0() >= lo.y0() - tolerance;
    Ok(ComparisonReport {
        y0_upper: hi.y0(),
        y0_lower: lo.y0(),
        tolerance,
        pass,
    })
}

fn check_driver_order(
    gen_hi: &GeneratorSpec,
    gen_lo: &GeneratorSpec,
    hi: &BackwardSolution,
    ens: &PathEnsemble,
) -> Result<(), SolverError> {
    let stride = (hi.paths / 97).max(1);
    for m in (0..hi.paths).step_by(stride) {
        for k in 0..hi.steps {
            let t = ens.grid.node(k);
            let x = ens.state(m, k);
            let a = ens.a_hat(m, k);
            let b = ens.drift(m, k);
            let y = hi.y(m, k);
            let zr = hi.z(m, k);
            let mut zsc = vec![0.0; ens.dim];
            if ens.dim == 1 {
                zsc[0] = a[0].max(0.0).sqrt() * zr[0];
            } else {
                let am = DMatrix::from_row_slice(ens.dim, ens.dim, a);
                let (half, _) = pseudoinverse_sqrt(&am)?;
                for i in 0..ens.dim {
                    for jj in 0..ens.dim {
                        zsc[i] += half[(jj, i)] * zr[jj];
                    }
                }
            }
            let fh = gen_hi.eval(t, x, y, &zsc, a, b);
            let fl = gen_lo.eval(t, x, y, &zsc, a, b);
            if fh > fl + 1e-12 {
                return Err(SolverError::Precondition(format!(
                    "drivers are not ordered at path {m}, step {k}: {fh} > {fl}"
                )));
            }
        }
    }
    Ok(())
}

/// Lattice counterpart of [`verify_comparison`] with tolerance `1e-10`.
pub fn verify_comparison_lattice(
    family: &DiffusionFamily,
    control_index: usize,
    chain: &Chain,
    gen_hi: &GeneratorSpec,
    claim_hi: &TerminalClaim,
    gen_lo: &GeneratorSpec,
    claim_lo: &TerminalClaim,
    picard_tol: f64,
) -> Result<ComparisonReport, SolverError> {
    for &x in &chain.x {
        if claim_hi.eval(&[x]) < claim_lo.eval(&[x]) - 1e-12 {
            return Err(SolverError::Precondition(
                "claims are not ordered on the lattice".into(),
            ));
        }
    }
    let hi = solve_bsde_lattice(family, control_index, chain, gen_hi, claim_hi, picard_tol)?;
    // Driver order along the hi solution.
    let u = family.control_set.point(control_index);
    let mut mu = [0.0];
    let mut sg = [0.0];
    for k in 0..chain.grid.steps() {
        let t = chain.grid.node(k);
        for (j, &x) in chain.x.iter().enumerate() {
            family.drift_into(t, &[x], u, &mut mu);
            family.vol_into(t, &[x], u, &mut sg);
            let a = [sg[0] * sg[0]];
            let zsc = [a[0].sqrt() * hi.z[k][j]];
            let y = hi.values[k][j];
            let fh = gen_hi.eval(t, &[x], y, &zsc, &a, &mu);
            let fl = gen_lo.eval(t, &[x], y, &zsc, &a, &mu);
            if fh > fl + 1e-12 {
                return Err(SolverError::Precondition(format!(
                    "drivers are not ordered at node {j}, step {k}"
                )));
            }
        }
    }
    let lo = solve_bsde_lattice(family, control_index, chain, gen_lo, claim_lo, picard_tol)?;
    let tolerance = 1e-10;
    let pass = hi.y0() >= lo.y0() - tolerance;
    Ok(ComparisonReport {
        y0_upper: hi.y0(),
        y0_lower: lo.y0(),
        tolerance,
        pass,
    })
}

/// One perturbation size in a stability sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StabilityEntry {
    pub epsilon: f64,
    /// `L^kappa` norm of the terminal perturbation.
    pub delta_xi: f64,
    /// Sup over the grid of the `L^kappa` norm of `Y - Y_perturbed`.
    pub delta_y: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StabilityReport {
    pub entries: Vec<StabilityEntry>,
    pub c_stab: f64,
    /// Largest ratio `delta_y / delta_xi` over the sweep.
    pub worst_ratio: f64,
    pub monotone: bool,
    pub pass: bool,
}

/// Perturbs the claim by `eps * direction` for each size and measures the
/// response of the whole value process in `L^kappa`.
///
/// Passes when the worst ratio stays below `c_stab` (default
/// `10 exp((L_y + L_z) T)`) and the response shrinks monotonically with the
/// perturbation.
#[allow(clippy::too_many_arguments)]
pub fn verify_stability(
    gen: &GeneratorSpec,
    claim: &TerminalClaim,
    direction: &TerminalClaim,
    epsilons: &[f64],
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    picard_tol: f64,
    kappa: f64,
    c_stab: Option<f64>,
) -> Result<StabilityReport, SolverError> {
    let base = solve_bsde(ens, gen, claim, basis, picard_tol, None)?;
    let t = ens.grid.horizon();
    let c_stab = c_stab
        .unwrap_or_else(|| 10.0 * ((gen.lipschitz_y + gen.lipschitz_z) * t).exp());
    let n = ens.grid.steps();
    let mut entries = Vec::new();
    for &eps in epsilons {
        let d = direction.clone();
        let base_claim = claim.clone();
        let perturbed = TerminalClaim::from_fn(format!("{}+{eps}*{}", claim.name, d.name), {
            move |x: &[f64]| base_claim.eval(x) + eps * d.eval(x)
        });
        let pert = solve_bsde(ens, gen, &perturbed, basis, picard_tol, None)?;
        let mut delta_xi = 0.0;
        for m in 0..ens.paths {
            delta_xi += (eps * direction.eval(ens.state(m, n))).abs().powf(kappa);
        }
        delta_xi = (delta_xi / ens.paths as f64).powf(1.0 / kappa);
        let mut delta_y: f64 = 0.0;
        for k in 0..=n {
            let mut s = 0.0;
            for m in 0..ens.paths {
                s += (base.y(m, k) - pert.y(m, k)).abs().powf(kappa);
            }
            delta_y = delta_y.max((s / ens.paths as f64).powf(1.0 / kappa));
        }
        let ratio = if delta_xi > 0.0 { delta_y / delta_xi } else { 0.0 };
        entries.push(StabilityEntry {
            epsilon: eps,
            delta_xi,
            delta_y,
            ratio,
        });
    }
    let worst_ratio = entries.iter().map(|e| e.ratio).fold(0.0, f64::max);
    let monotone = entries
        .windows(2)
        .all(|w| w[0].delta_xi < w[1].delta_xi || w[0].delta_y >= w[1].delta_y - 1e-15);
    let pass = worst_ratio <= c_stab && monotone;
    Ok(StabilityReport {
        entries,
        c_stab,
        worst_ratio,
        monotone,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{linear_pricing_generator, zero_generator, RiskPremium};
    use crate::lattice::LatticeParams;
    use crate::market_paths::{simulate, ControlPolicy, DiffusionFamily, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn gbm_ensemble(sigma: f64, paths: usize, steps: usize, seed: u64) -> PathEnsemble {
        let fam = DiffusionFamily::single_gbm(sigma, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, steps).unwrap();
        simulate(&fam, &ControlPolicy::Constant(0), grid, paths, &[100.0], seed).unwrap()
    }

    #[test]
    fn constants_are_fixed_points() {
        let ens = gbm_ensemble(0.2, 4000, 20, 1);
        let sol = solve_bsde(
            &ens,
            &zero_generator(),
            &TerminalClaim::constant(5.0),
            &RegressionBasis::default(),
            1e-12,
            None,
        )
        .unwrap();
        for m in (0..ens.paths).step_by(117) {
            for k in 0..=20 {
                assert_abs_diff_eq!(sol.y(m, k), 5.0, epsilon = 1e-9);
            }
            for k in 0..20 {
                assert_abs_diff_eq!(sol.z(m, k)[0], 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn terminal_values_are_bit_exact() {
        let ens = gbm_ensemble(0.2, 1000, 10, 3);
        let claim = TerminalClaim::call(100.0);
        let sol = solve_bsde(
            &ens,
            &zero_generator(),
            &claim,
            &RegressionBasis::default(),
            1e-10,
            None,
        )
        .unwrap();
        for m in 0..ens.paths {
            assert_eq!(sol.y(m, 10), claim.eval(ens.state(m, 10)));
        }
    }

    #[test]
    fn zero_driver_reduces_to_plain_mean() {
        let ens = gbm_ensemble(0.2, 20_000, 10, 7);
        let claim = TerminalClaim::call(100.0);
        let sol = solve_bsde(
            &ens,
            &zero_generator(),
            &claim,
            &RegressionBasis::default(),
            1e-12,
            None,
        )
        .unwrap();
        // Each regression preserves the sample mean, so composing them
        // returns exactly the Monte Carlo mean of the terminal payoff.
        let mean: f64 = (0..ens.paths)
            .map(|m| claim.eval(ens.state(m, 10)))
            .sum::<f64>()
            / ens.paths as f64;
        assert_abs_diff_eq!(sol.y0(), mean, epsilon = 1e-12 * mean.abs().max(1.0));
    }

    #[test]
    fn discount_driver_recovers_exponential() {
        // f = r y discounts: the discrete fixed point is (1 + r dt)^-N.
        let r = 0.05;
        let gen = linear_pricing_generator(r, RiskPremium::Zero);
        let ens = gbm_ensemble(0.2, 2000, 50, 11);
        let sol = solve_bsde(
            &ens,
            &gen,
            &TerminalClaim::constant(1.0),
            &RegressionBasis::default(),
            1e-13,
            None,
        )
        .unwrap();
        let dt = ens.grid.dt();
        let discrete = (1.0 + r * dt).powi(-50);
        assert_abs_diff_eq!(sol.y0(), discrete, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.y0(), (-r as f64).exp(), epsilon = 2e-3);
    }

    #[test]
    fn picard_iteration_count_respects_contraction_bound() {
        let r = 5.0; // aggressive driver, still L dt = 0.1 < 1/2
        let gen = linear_pricing_generator(r, RiskPremium::Zero);
        let ens = gbm_ensemble(0.2, 500, 50, 13);
        let tol = 1e-10;
        let sol = solve_bsde(
            &ens,
            &gen,
            &TerminalClaim::constant(1.0),
            &RegressionBasis::default(),
            tol,
            None,
        )
        .unwrap();
        let l_dt = r * ens.grid.dt();
        let bound = (tol.ln() / l_dt.ln()).ceil() as usize + 2;
        for (k, &it) in sol.picard_iters.iter().enumerate() {
            assert!(it <= bound, "step {k}: {it} sweeps > bound {bound}");
        }
    }

    #[test]
    fn picard_divergence_is_detected() {
        // lipschitz_y * dt = 3 > 1: the per-step fixed point cannot contract.
        let gen = GeneratorSpec::from_fn("explosive", 60.0, 0.0, |_, _, y, _, _, _| 60.0 * y);
        let ens = gbm_ensemble(0.2, 200, 20, 17);
        let err = solve_bsde(
            &ens,
            &gen,
            &TerminalClaim::constant(1.0),
            &RegressionBasis::default(),
            1e-10,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, SolverError::StepDivergence { .. }), "{err}");
        assert!(err.to_string().contains("lipschitz_y * dt = 3.0"));
    }

    #[test]
    fn clipping_beyond_sup_norms_is_identity() {
        let ens = gbm_ensemble(0.2, 5000, 10, 19);
        let gen = linear_pricing_generator(0.05, RiskPremium::Zero);
        let claim = TerminalClaim::call(100.0);
        let a = solve_bsde(&ens, &gen, &claim, &RegressionBasis::default(), 1e-12, None).unwrap();
        let b = solve_bsde(
            &ens,
            &gen,
            &claim,
            &RegressionBasis::default(),
            1e-12,
            Some(1e6),
        )
        .unwrap();
        for m in (0..ens.paths).step_by(61) {
            for k in 0..=10 {
                assert_eq!(a.y(m, k), b.y(m, k));
            }
        }
    }

    #[test]
    fn lattice_discount_is_exact_fixed_point() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let chain = Chain::build(&fam, grid, 100.0, LatticeParams::log_default(201)).unwrap();
        let gen = linear_pricing_generator(0.05, RiskPremium::Zero);
        let sol =
            solve_bsde_lattice(&fam, 0, &chain, &gen, &TerminalClaim::constant(1.0), 1e-13)
                .unwrap();
        let discrete = (1.0 + 0.05 * grid.dt()).powi(-50);
        assert_abs_diff_eq!(sol.y0(), discrete, epsilon = 1e-11);
    }

    #[test]
    fn tower_is_exact_on_lattice() {
        let fam = DiffusionFamily::single_gbm(0.25, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let chain = Chain::build(&fam, grid, 100.0, LatticeParams::log_default(201)).unwrap();
        let gen = linear_pricing_generator(0.03, RiskPremium::Zero);
        let claim = TerminalClaim::call(100.0);
        let sol = solve_bsde_lattice(&fam, 0, &chain, &gen, &claim, 1e-12).unwrap();
        for k_mid in [10, 20, 30] {
            let rep = verify_tower_lattice(&sol, &fam, 0, &gen, k_mid, 1e-12).unwrap();
            assert!(rep.pass, "k_mid={k_mid}: delta={}", rep.delta);
            assert!(rep.delta <= 1e-10);
        }
    }

    #[test]
    fn tower_constant_claim_is_exact_in_path_mode() {
        let ens = gbm_ensemble(0.2, 3000, 20, 23);
        let basis = RegressionBasis::default();
        let sol = solve_bsde(
            &ens,
            &zero_generator(),
            &TerminalClaim::constant(3.0),
            &basis,
            1e-12,
            None,
        )
        .unwrap();
        let rep = verify_tower(&sol, &zero_generator(), &ens, &basis, 10, 1e-12, 0.0).unwrap();
        assert!(rep.delta < 1e-10, "delta = {}", rep.delta);
    }

    #[test]
    fn tower_path_mode_against_tree_tolerance() {
        let ens = gbm_ensemble(0.2, 20_000, 20, 29);
        let basis = RegressionBasis::default();
        let gen = linear_pricing_generator(0.02, RiskPremium::Zero);
        let claim = TerminalClaim::call(100.0);
        let sol = solve_bsde(&ens, &gen, &claim, &basis, 1e-11, None).unwrap();
        let rep = verify_tower(&sol, &gen, &ens, &basis, 10, 1e-11, 0.5).unwrap();
        assert!(rep.pass, "delta = {}, tol = {}", rep.delta, rep.tolerance);
    }

    #[test]
    fn comparison_shifted_claim_zero_driver() {
        let ens = gbm_ensemble(0.2, 10_000, 10, 31);
        let basis = RegressionBasis::default();
        let claim = TerminalClaim::call(100.0);
        let up = claim.affine(1.0, 1.0);
        let rep = verify_comparison(
            &zero_generator(),
            &up,
            &zero_generator(),
            &claim,
            &ens,
            &basis,
            1e-12,
        )
        .unwrap();
        assert!(rep.pass);
        // f == 0 makes the additive shift propagate exactly.
        assert_abs_diff_eq!(rep.y0_upper - rep.y0_lower, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn comparison_driver_bump_lowers_value_exactly_on_lattice() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 30).unwrap();
        let chain = Chain::build(&fam, grid, 100.0, LatticeParams::log_default(151)).unwrap();
        let claim = TerminalClaim::call(100.0);
        let f_lo = zero_generator();
        let f_hi = GeneratorSpec::from_fn("bump", 0.0, 0.0, |_, _, _, _, _, _| 0.01);
        // Larger driver lowers the value: the ordered pair is
        // (gen_hi = zero, gen_lo = bump).
        let rep = verify_comparison_lattice(
            &fam, 0, &chain, &f_lo, &claim, &f_hi, &claim, 1e-12,
        )
        .unwrap();
        assert!(rep.pass);
        assert_abs_diff_eq!(rep.y0_upper - rep.y0_lower, 0.01, epsilon = 1e-10);
    }

    #[test]
    fn comparison_rejects_unordered_inputs() {
        let ens = gbm_ensemble(0.2, 1000, 10, 37);
        let basis = RegressionBasis::default();
        let call = TerminalClaim::call(100.0);
        let put = TerminalClaim::put(100.0);
        let err = verify_comparison(
            &zero_generator(),
            &call,
            &zero_generator(),
            &put,
            &ens,
            &basis,
            1e-10,
        )
        .unwrap_err();
        assert!(matches!(err, SolverError::Precondition(_)));
    }

    #[test]
    fn stability_zero_perturbation_and_linearity() {
        let ens = gbm_ensemble(0.2, 5000, 10, 41);
        let basis = RegressionBasis::default();
        let gen = zero_generator();
        let claim = TerminalClaim::call(100.0);
        // Constant direction with f == 0: |Y0 - Y0_eps| = eps exactly.
        let rep = verify_stability(
            &gen,
            &claim,
            &TerminalClaim::constant(1.0),
            &[0.5, 0.05],
            &ens,
            &basis,
            1e-12,
            1.5,
            None,
        )
        .unwrap();
        assert!(rep.pass);
        for e in &rep.entries {
            assert_abs_diff_eq!(e.delta_y, e.epsilon, epsilon = 1e-9);
        }
    }

    #[test]
    fn stability_scales_linearly_against_tree() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let ens = simulate(&fam, &ControlPolicy::Constant(0), grid, 30_000, &[100.0], 43).unwrap();
        let basis = RegressionBasis::default();
        let gen = linear_pricing_generator(0.02, RiskPremium::Zero);
        let claim = TerminalClaim::call(100.0);
        let rep = verify_stability(
            &gen,
            &claim,
            &TerminalClaim::asset(),
            &[0.1, 0.01, 0.001],
            &ens,
            &basis,
            1e-11,
            1.5,
            None,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        // Linear driver: response proportional to eps within 10%.
        let r0 = rep.entries[0].delta_y / rep.entries[0].epsilon;
        for e in &rep.entries {
            let r = e.delta_y / e.epsilon;
            assert!((r / r0 - 1.0).abs() < 0.1, "ratio drift: {r} vs {r0}");
        }
    }

    #[test]
    fn black_scholes_at_the_money_call_path_mode() {
        let ens = gbm_ensemble(0.2, 200_000, 50, 47);
        let basis = RegressionBasis::default();
        let sol = solve_bsde(
            &ens,
            &zero_generator(),
            &TerminalClaim::call(100.0),
            &basis,
            1e-11,
            None,
        )
        .unwrap();
        let bs = crate::pde_oracle::black_scholes(
            100.0,
            100.0,
            0.2,
            0.0,
            1.0,
            crate::pde_oracle::OptionKind::Call,
        )
        .unwrap();
        let tol = 3.0 * sol.y0_stderr().max(0.02);
        assert!(
            (sol.y0() - bs).abs() < tol,
            "y0 = {}, BS = {bs}, tol = {tol}",
            sol.y0()
        );
    }

    #[test]
    fn covariation_identity_on_lattice() {
        // sum_k a_k Z_k dt over the chain reproduces the one-step
        // covariation sums of the value process with the state.
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let chain = Chain::build(&fam, grid, 100.0, LatticeParams::log_default(101)).unwrap();
        let claim = TerminalClaim::call(100.0);
        let sol = solve_bsde_lattice(&fam, 0, &chain, &zero_generator(), &claim, 1e-13).unwrap();
        let mut sg = [0.0];
        for k in 0..10 {
            let t = grid.node(k);
            let step = chain
                .step_expectations(&fam, &[0.2], t, &sol.values[k + 1])
                .unwrap();
            for (j, &x) in chain.x.iter().enumerate() {
                fam.vol_into(t, &[x], &[0.2], &mut sg);
                let a = sg[0] * sg[0];
                let lhs = a * sol.z[k][j];
                assert_abs_diff_eq!(lhs, step.cov_rate[j], epsilon = 1e-10 * (1.0 + lhs.abs()));
            }
        }
    }
}
