//! Worst-case value over the measure family and its second-order
//! decomposition.
//!
//! The value surface solves, backward from the claim,
//!
//! ```text
//! V_k(x) = max over u of  T_k^u[V_{k+1}](x)
//! T_k^u[w](x) = E_u[w(X_{k+1}) | X_k = x] - f(t_k, x, y, (a^{1/2})^T Z, a, b) dt
//! ```
//!
//! with the per-step maximum ranging over the finite control set (the
//! dynamic programming principle collapses the supremum over feedback
//! policies to this pointwise form). For every measure `P` of the family
//! the slack of the one-step operator,
//!
//! ```text
//! dK_k^P(x) = V_k(x) - T_k^{P}[V_{k+1}](x)  >= 0,
//! ```
//!
//! accumulates into the non-decreasing compensator `K^P`, zero along the
//! argmax policy. Minimality of the family `(K^P)` -- the certificate that
//! `V` is the smallest robust super-solution -- is checked as
//! `min over P of E^P[K_T^P] = 0` plus the per-node one-step version.
//!
//! Two backends: the exact lattice sweep (identities hold to rounding) and
//! a bucketed regression sweep over per-control path ensembles (statistical
//! tolerances).

use std::io::{self, Write};

use rayon::prelude::*;

use crate::bsde_solver::{
    lattice_driver_step, solve_bsde_lattice, solve_bsde_with_terminal, RegressionBasis,
    SolverError,
};
use crate::generators::{GeneratorSpec, TerminalClaim};
use crate::lattice::{Chain, LatticeParams};
use crate::market_paths::{simulate, ControlPolicy, DiffusionFamily, TimeGrid};

/// Tolerance for lattice identities (machine-precision checks).
pub const LATTICE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveMode {
    Lattice,
    Path,
}

/// Numerical parameters shared by both backends.
#[derive(Debug, Clone)]
pub struct RobustParams {
    pub lattice: LatticeParams,
    pub picard_tol: f64,
    /// Paths per measure (path mode).
    pub paths: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
}

impl RobustParams {
    pub fn lattice_default(nodes: usize) -> Self {
        // Wider domain than the plain chain default: the boundary clamp
        // must stay below the machine-level identity tolerances.
        let mut lattice = LatticeParams::log_default(nodes);
        lattice.width_sigmas = 8.0;
        Self {
            lattice,
            picard_tol: 1e-12,
            paths: 0,
            seed: 0,
            basis: RegressionBasis::default(),
        }
    }

    pub fn path_default(nodes: usize, paths: usize, seed: u64) -> Self {
        Self {
            lattice: LatticeParams::log_default(nodes),
            picard_tol: 1e-10,
            paths,
            seed,
            basis: RegressionBasis::default(),
        }
    }
}

/// The robust value surface with the data of its decomposition.
#[derive(Debug, Clone)]
pub struct RobustSolution {
    pub mode: SolveMode,
    pub chain: Chain,
    /// `values[k][j]`, `k = 0..=N`.
    pub values: Vec<Vec<f64>>,
    /// Argmax control index per `(k, node)`, lowest index on ties.
    pub argmax: Vec<Vec<usize>>,
    /// Covariation integrand at the argmax control.
    pub z: Vec<Vec<f64>>,
    /// One-step operator values `candidates[k][u][j]`.
    pub candidates: Vec<Vec<Vec<f64>>>,
    /// Number of controls in the family.
    pub n_controls: usize,
    /// Monte Carlo standard error proxy of `value_at_x0` (path mode only).
    pub v0_stderr: Option<f64>,
    /// Path mode anchors the reported time-0 value with an unbiased
    /// forward rollout under the extracted feedback policy; the sweep
    /// surface keeps its own (selection-consistent) time-0 slice.
    pub v0_anchor: Option<f64>,
}

impl RobustSolution {
    pub fn value_at_x0(&self) -> f64 {
        self.v0_anchor
            .unwrap_or(self.values[0][self.chain.x0_index])
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    /// Value at step `k` interpolated at state `x`.
    pub fn value_at(&self, k: usize, x: f64) -> f64 {
        self.chain.interp(&self.values[k], x)
    }

    /// Strategy lookup: `Z` at step `k` interpolated at `x`, clamped to the
    /// boundary buckets.
    pub fn z_at(&self, k: usize, x: f64) -> f64 {
        self.chain.interp(&self.z[k.min(self.z.len() - 1)], x)
    }

    fn extract_k_by(
        &self,
        pick: impl Fn(usize, usize) -> usize,
    ) -> Result<Vec<Vec<f64>>, SolverError> {
        let n = self.steps();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let row: Vec<f64> = (0..self.chain.x.len())
                .map(|j| self.values[k][j] - self.candidates[k][pick(k, j)][j])
                .collect();
            if self.mode == SolveMode::Lattice {
                if let Some((j, &bad)) =
                    row.iter().enumerate().find(|(_, &v)| v < -LATTICE_TOL)
                {
                    return Err(SolverError::Precondition(format!(
                        "decomposition violation: dK = {bad:.3e} < -{LATTICE_TOL:.0e} at step {k}, node {j}"
                    )));
                }
            }
            out.push(row);
        }
        Ok(out)
    }

    /// Per-step compensator increments of `policy`:
    /// `dK_k(j) = V_k(j) - candidates[k][policy(k, j)][j]`.
    ///
    /// Increments below `-LATTICE_TOL` signal a solver bug and error out.
    pub fn extract_k(&self, policy: &ControlPolicy) -> Result<Vec<Vec<f64>>, SolverError> {
        self.extract_k_by(|k, j| policy.control_index(k, &self.chain.x[j..j + 1]))
    }

    /// Compensator increments along the recorded argmax selection: zero up
    /// to rounding, because the argmax attains the per-node maximum.
    pub fn extract_k_argmax(&self) -> Result<Vec<Vec<f64>>, SolverError> {
        self.extract_k_by(|k, j| self.argmax[k][j])
    }

    /// The argmax feedback policy quantised to a bucket table, for use with
    /// the path simulator. Buckets are uniform in the state, so on a log
    /// chain the mapping is nearest-node; exact identities should go
    /// through [`RobustSolution::extract_k_argmax`] instead.
    pub fn argmax_policy(&self) -> ControlPolicy {
        let grid = crate::market_paths::BucketGrid::new(
            self.chain.x[0] - 0.5 * self.chain.dw,
            self.chain.x[self.chain.x.len() - 1] + 0.5 * self.chain.dw,
            self.chain.x.len(),
        );
        // Bucket i of this grid need not align with node i for log
        // coordinates, so map through the node states explicitly.
        let mut indices = Vec::with_capacity(self.argmax.len());
        for row in &self.argmax {
            let mut tab = vec![0usize; grid.n];
            for b in 0..grid.n {
                let x = grid.center(b);
                // nearest chain node
                let mut best = 0usize;
                let mut bd = f64::INFINITY;
                for (j, &xj) in self.chain.x.iter().enumerate() {
                    let d = (xj - x).abs();
                    if d < bd {
                        bd = d;
                        best = j;
                    }
                }
                tab[b] = row[best];
            }
            indices.push(tab);
        }
        ControlPolicy::Table { grid, indices }
    }

    fn occupation_by(
        &self,
        family: &DiffusionFamily,
        pick: &dyn Fn(usize, usize) -> usize,
    ) -> Result<Vec<Vec<f64>>, SolverError> {
        let n = self.steps();
        let nodes = self.chain.x.len();
        let mut occ = vec![vec![0.0; nodes]; n + 1];
        occ[0][self.chain.x0_index] = 1.0;
        for k in 0..n {
            let t_k = self.chain.grid.node(k);
            let mut next = vec![0.0; nodes];
            // Group source nodes by selected control and push each group
            // through that control's kernel (the kernel is linear in mass).
            for u_idx in 0..self.n_controls {
                let mut mass = vec![0.0; nodes];
                let mut any = false;
                for j in 0..nodes {
                    if occ[k][j] != 0.0 && pick(k, j) == u_idx {
                        mass[j] = occ[k][j];
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let u = family.control_set.point(u_idx);
                let pushed = self.chain.push_forward(family, u, t_k, &mass)?;
                for j in 0..nodes {
                    next[j] += pushed[j];
                }
            }
            occ[k + 1] = next;
        }
        Ok(occ)
    }

    /// Forward occupation measure of `policy` on the chain, exact under the
    /// lattice kernels: `occ[k][j] = P(X_k = x_j)`.
    pub fn occupation(
        &self,
        family: &DiffusionFamily,
        policy: &ControlPolicy,
    ) -> Result<Vec<Vec<f64>>, SolverError> {
        self.occupation_by(family, &|k, j| {
            policy.control_index(k, &self.chain.x[j..j + 1])
        })
    }

    fn expected_k_by(
        &self,
        family: &DiffusionFamily,
        pick: &dyn Fn(usize, usize) -> usize,
        discount_rate: f64,
    ) -> Result<f64, SolverError> {
        let dk = self.extract_k_by(pick)?;
        let occ = self.occupation_by(family, pick)?;
        let dt = self.chain.grid.dt();
        let mut total = 0.0;
        for (k, row) in dk.iter().enumerate() {
            let df = (1.0 + discount_rate * dt).powi(-(k as i32));
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                s += occ[k][j] * v;
            }
            total += df * s;
        }
        Ok(total)
    }

    /// `sum_k (1 + r dt)^{-k} E^policy[dK_k]`: the discounted compensator
    /// mass under the policy's measure. With a linear driver `f = r y` this
    /// equals `V_0 - Y_0^policy` exactly on the lattice.
    pub fn expected_k_total(
        &self,
        family: &DiffusionFamily,
        policy: &ControlPolicy,
        discount_rate: f64,
    ) -> Result<f64, SolverError> {
        self.expected_k_by(
            family,
            &|k, j| policy.control_index(k, &self.chain.x[j..j + 1]),
            discount_rate,
        )
    }

    /// Compensator mass along the argmax selection (zero up to rounding).
    pub fn expected_k_argmax(
        &self,
        family: &DiffusionFamily,
        discount_rate: f64,
    ) -> Result<f64, SolverError> {
        self.expected_k_by(family, &|k, j| self.argmax[k][j], discount_rate)
    }

    /// Value-surface CSV: `step,x,value,argmax_label,z`.
    pub fn write_surface_csv<W: Write>(
        &self,
        family: &DiffusionFamily,
        mut w: W,
    ) -> io::Result<()> {
        writeln!(w, "step,x,value,control,z")?;
        let n = self.steps();
        for k in 0..n {
            for (j, &x) in self.chain.x.iter().enumerate() {
                writeln!(
                    w,
                    "{k},{x},{},{},{}",
                    self.values[k][j],
                    family.control_set.label(self.argmax[k][j]),
                    self.z[k][j]
                )?;
            }
        }
        for (j, &x) in self.chain.x.iter().enumerate() {
            writeln!(w, "{n},{x},{},,", self.values[n][j])?;
        }
        Ok(())
    }
}

fn check_contraction(gen: &GeneratorSpec, grid: &TimeGrid) -> Result<(), SolverError> {
    let l_dt = gen.lipschitz_y * grid.dt();
    if l_dt >= 0.5 {
        return Err(SolverError::Precondition(format!(
            "lipschitz_y * dt = {l_dt:.3} >= 1/2; refine the time grid"
        )));
    }
    Ok(())
}

/// Exact lattice sweep: per-step pointwise maximum over the control set.
pub fn robust_value_lattice(
    family: &DiffusionFamily,
    grid: TimeGrid,
    gen: &GeneratorSpec,
    claim: &TerminalClaim,
    x0: f64,
    params: &RobustParams,
) -> Result<RobustSolution, SolverError> {
    check_contraction(gen, &grid)?;
    let chain = Chain::build(family, grid, x0, params.lattice)?;
    let terminal: Vec<f64> = chain.x.iter().map(|&x| claim.eval(&[x])).collect();
    robust_sweep_lattice(family, gen, &chain, terminal, grid.steps(), params.picard_tol)
}

/// Lattice sweep from an explicit terminal slice on `[0, k_end]`; the
/// nested half of the dynamic-programming check.
pub fn robust_sweep_lattice(
    family: &DiffusionFamily,
    gen: &GeneratorSpec,
    chain: &Chain,
    terminal: Vec<f64>,
    k_end: usize,
    picard_tol: f64,
) -> Result<RobustSolution, SolverError> {
    if family.dim != 1 {
        return Err(SolverError::Precondition(
            "lattice mode is one-dimensional".into(),
        ));
    }
    let nodes = chain.x.len();
    let n_controls = family.control_set.len();
    let mut values = vec![Vec::new(); k_end + 1];
    let mut argmax = vec![Vec::new(); k_end];
    let mut z = vec![Vec::new(); k_end];
    let mut candidates = vec![Vec::new(); k_end];
    values[k_end] = terminal;

    for k in (0..k_end).rev() {
        let t_k = chain.grid.node(k);
        let v_next = &values[k + 1];
        let per_control: Result<Vec<(Vec<f64>, Vec<f64>)>, SolverError> = (0..n_controls)
            .into_par_iter()
            .map(|u_idx| {
                let u = family.control_set.point(u_idx);
                let step = chain.step_expectations(family, u, t_k, v_next)?;
                let (y, zv, _, _) =
                    lattice_driver_step(chain, family, gen, u, t_k, &step, picard_tol, k)?;
                Ok((y, zv))
            })
            .collect();
        let per_control = per_control?;

        let mut v_k = vec![f64::NEG_INFINITY; nodes];
        let mut am = vec![0usize; nodes];
        let mut z_k = vec![0.0; nodes];
        for (u_idx, (cand, zv)) in per_control.iter().enumerate() {
            for j in 0..nodes {
                // Strict improvement only: lowest index wins ties.
                if cand[j] > v_k[j] {
                    v_k[j] = cand[j];
                    am[j] = u_idx;
                    z_k[j] = zv[j];
                }
            }
        }
        candidates[k] = per_control.into_iter().map(|(c, _)| c).collect();
        values[k] = v_k;
        argmax[k] = am;
        z[k] = z_k;
    }

    Ok(RobustSolution {
        mode: SolveMode::Lattice,
        chain: chain.clone(),
        values,
        argmax,
        z,
        candidates,
        n_controls,
        v0_stderr: None,
        v0_anchor: None,
    })
}

/// Light per-control path store for the regression sweep.
struct ControlPaths {
    /// `states[m * (N + 1) + k]` (first coordinate only; path mode is 1D).
    states: Vec<f64>,
    paths: usize,
}

impl ControlPaths {
    #[inline]
    fn state(&self, m: usize, k: usize, n: usize) -> f64 {
        self.states[m * (n + 1) + k]
    }
}

/// Regression Monte Carlo estimate of the robust value, in two passes.
///
/// Pass one extracts the feedback policy: per-control ensembles share one
/// master seed (common random numbers), each control's one-step value is
/// regressed on its own cloud (a polynomial on the time value, i.e. the
/// target net of the claim's intrinsic, so the fit carries a small dynamic
/// range and extends honestly), and the argmax is recorded node by node,
/// restricted to controls whose cloud covers the node.
///
/// Pass two prices the policy: a fresh ensemble is simulated under the
/// extracted table policy and solved as a plain single-measure backward
/// equation. No maximum is taken anywhere in this pass, so the reported
/// value carries no selection bias -- policy error enters at second order
/// only. The value surface, the per-control one-step candidates (hence the
/// compensator increments), and the integrand surface are all rebuilt from
/// this pass by local hat regressions.
pub fn robust_value_path(
    family: &DiffusionFamily,
    grid: TimeGrid,
    gen: &GeneratorSpec,
    claim: &TerminalClaim,
    x0: f64,
    params: &RobustParams,
) -> Result<RobustSolution, SolverError> {
    check_contraction(gen, &grid)?;
    if family.dim != 1 {
        return Err(SolverError::Precondition(
            "path-mode robust sweep is one-dimensional".into(),
        ));
    }
    if params.paths < 16 {
        return Err(SolverError::Precondition(
            "path mode requires paths >= 16".into(),
        ));
    }
    let chain = Chain::build(family, grid, x0, params.lattice)?;
    let n = grid.steps();
    let dt = grid.dt();
    let n_controls = family.control_set.len();
    let nodes = chain.x.len();
    let degree = match params.basis.kind {
        crate::bsde_solver::BasisKind::Polynomial { degree } => degree,
        crate::bsde_solver::BasisKind::PiecewiseLinear { .. } => 3,
    };

    // One ensemble per control, all from the same seed; keep only states.
    let mut stores = Vec::with_capacity(n_controls);
    for u_idx in 0..n_controls {
        let ens = simulate(
            family,
            &ControlPolicy::Constant(u_idx),
            grid,
            params.paths,
            &[x0],
            params.seed,
        )?;
        let mut states = vec![0.0; params.paths * (n + 1)];
        for m in 0..params.paths {
            for k in 0..=n {
                states[m * (n + 1) + k] = ens.state(m, k)[0];
            }
        }
        stores.push(ControlPaths {
            states,
            paths: params.paths,
        });
    }

    // ---- Pass one: policy extraction. --------------------------------
    let mut argmax = vec![vec![0usize; nodes]; n];
    {
        let mut v_sel: Vec<f64> = chain.x.iter().map(|&x| claim.eval(&[x])).collect();
        let mut mu = [0.0];
        let mut sg = [0.0];
        for k in (0..n).rev() {
            let t_k = grid.node(k);
            let mut cands: Vec<(Vec<f64>, (f64, f64))> = Vec::with_capacity(n_controls);
            for (u_idx, store) in stores.iter().enumerate() {
                let u = family.control_set.point(u_idx).to_vec();
                let m_paths = store.paths;
                let (q_lo, q_hi) =
                    pooled_quantile_range(std::slice::from_ref(store), k, n, 0.005);
                let mut xs = Vec::with_capacity(m_paths);
                let mut ys = Vec::with_capacity(m_paths);
                for m in 0..m_paths {
                    let x = store.state(m, k, n);
                    let xn = store.state(m, k + 1, n);
                    let y = if k + 1 == n {
                        claim.eval(&[xn])
                    } else {
                        chain.interp(&v_sel, xn)
                    };
                    xs.push(x);
                    ys.push(y - claim.eval(&[x]));
                }
                let (expect, zsc) = if k == 0 {
                    let mean = ys.iter().sum::<f64>() / m_paths as f64;
                    (
                        chain.x.iter().map(|&x| claim.eval(&[x]) + mean).collect(),
                        vec![0.0; nodes],
                    )
                } else {
                    let fit = fit_poly(&xs, &ys, degree, k)?;
                    let (mut t_lo, mut t_hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for &t in &ys {
                        t_lo = t_lo.min(t);
                        t_hi = t_hi.max(t);
                    }
                    let e: Vec<f64> = chain
                        .x
                        .iter()
                        .map(|&x| {
                            claim.eval(&[x]) + fit.eval(x.clamp(q_lo, q_hi)).clamp(t_lo, t_hi)
                        })
                        .collect();
                    // A rough covariation proxy for the driver argument:
                    // the centred one-step regression; ranking only.
                    let cov_t: Vec<f64> = (0..m_paths)
                        .map(|m| {
                            let x = xs[m];
                            family.drift_into(t_k, &[x], &u, &mut mu);
                            let xc = store.state(m, k + 1, n) - x - mu[0] * dt;
                            (ys[m] + claim.eval(&[x]) - chain.interp(&e, x)) * xc / dt
                        })
                        .collect();
                    let cfit = fit_poly(&xs, &cov_t, degree, k)?;
                    let z: Vec<f64> = chain
                        .x
                        .iter()
                        .map(|&x| {
                            family.vol_into(t_k, &[x], &u, &mut sg);
                            let a = sg[0] * sg[0];
                            if a > 1e-300 {
                                cfit.eval(x.clamp(q_lo, q_hi)) / a.sqrt()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    (e, z)
                };
                // Driver fixed point per node.
                let mut y = expect.clone();
                for _ in 0..200 {
                    let mut change: f64 = 0.0;
                    for j in 0..nodes {
                        family.drift_into(t_k, &chain.x[j..j + 1], &u, &mut mu);
                        family.vol_into(t_k, &chain.x[j..j + 1], &u, &mut sg);
                        let a = sg[0] * sg[0];
                        let f = gen.eval(
                            t_k,
                            &chain.x[j..j + 1],
                            y[j],
                            &zsc[j..j + 1],
                            &[a],
                            &[mu[0]],
                        );
                        let yn = expect[j] - f * dt;
                        change = change.max((yn - y[j]).abs());
                        y[j] = yn;
                    }
                    if change < params.picard_tol {
                        break;
                    }
                }
                cands.push((y, (q_lo, q_hi)));
            }
            let mut v_new = vec![0.0; nodes];
            for j in 0..nodes {
                let x = chain.x[j];
                let covered = cands.iter().any(|(_, (lo, hi))| x >= *lo && x <= *hi);
                let mut best = f64::NEG_INFINITY;
                let mut pick = 0usize;
                for (u_idx, (c, (lo, hi))) in cands.iter().enumerate() {
                    if covered && (x < *lo || x > *hi) {
                        continue;
                    }
                    if c[j] > best {
                        best = c[j];
                        pick = u_idx;
                    }
                }
                v_new[j] = best;
                argmax[k][j] = pick;
            }
            v_sel = v_new;
        }
    }

    // ---- Pass two: unbiased valuation under the policy. ---------------
    let policy = table_policy_from_argmax(&chain, &argmax, n_controls);
    let roll = simulate(
        family,
        &policy,
        grid,
        params.paths,
        &[x0],
        params.seed ^ 0xA11C_E5ED,
    )?;
    let sol = crate::bsde_solver::solve_bsde(
        &roll,
        gen,
        claim,
        &params.basis,
        params.picard_tol,
        None,
    )?;

    // Value surface from the rollout solve: time value fitted locally.
    let mut values = vec![Vec::new(); n + 1];
    values[n] = chain.x.iter().map(|&x| claim.eval(&[x])).collect();
    for k in 1..n {
        let mut xs = Vec::with_capacity(params.paths);
        let mut ys = Vec::with_capacity(params.paths);
        for m in 0..params.paths {
            let x = roll.state(m, k)[0];
            xs.push(x);
            ys.push(sol.y(m, k) - claim.eval(&[x]));
        }
        let (q_lo, q_hi) = state_quantile_range(&xs, 0.005);
        let segments = (xs.len() / 250).clamp(8, 64);
        let fit = fit_hats(&xs, &ys, q_lo, q_hi, segments, k)?;
        values[k] = chain
            .x
            .iter()
            .map(|&x| claim.eval(&[x]) + fit.eval(x.clamp(q_lo, q_hi)))
            .collect();
    }
    values[0] = vec![sol.y0(); nodes];

    // Per-control one-step candidates of the pass-two surface, for the
    // compensator decomposition; no selection happens here.
    let mut candidates = vec![Vec::new(); n];
    let mut z = vec![Vec::new(); n];
    {
        let mut mu = [0.0];
        let mut sg = [0.0];
        for k in (0..n).rev() {
            let t_k = grid.node(k);
            let v_next = &values[k + 1];
            let mut cands = Vec::with_capacity(n_controls);
            let mut zs = Vec::with_capacity(n_controls);
            for (u_idx, store) in stores.iter().enumerate() {
                let u = family.control_set.point(u_idx).to_vec();
                let m_paths = store.paths;
                let (q_lo, q_hi) =
                    pooled_quantile_range(std::slice::from_ref(store), k, n, 0.005);
                let mut xs = Vec::with_capacity(m_paths);
                let mut ys = Vec::with_capacity(m_paths);
                for m in 0..m_paths {
                    let x = store.state(m, k, n);
                    let xn = store.state(m, k + 1, n);
                    let y = if k + 1 == n {
                        claim.eval(&[xn])
                    } else {
                        chain.interp(v_next, xn)
                    };
                    xs.push(x);
                    ys.push(y - claim.eval(&[x]));
                }
                let (expect, cov_nodes) = if k == 0 {
                    let mean = ys.iter().sum::<f64>() / m_paths as f64;
                    let mut cmean = 0.0;
                    for m in 0..m_paths {
                        let x = xs[m];
                        family.drift_into(t_k, &[x], &u, &mut mu);
                        let xc = store.state(m, 1, n) - x - mu[0] * dt;
                        cmean += (ys[m] - mean) * xc / dt;
                    }
                    cmean /= m_paths as f64;
                    (
                        chain
                            .x
                            .iter()
                            .map(|&x| claim.eval(&[x]) + mean)
                            .collect::<Vec<f64>>(),
                        vec![cmean; nodes],
                    )
                } else {
                    let segments = (xs.len() / 250).clamp(8, 64);
                    let fit = fit_hats(&xs, &ys, q_lo, q_hi, segments, k)?;
                    let cov_t: Vec<f64> = (0..m_paths)
                        .map(|m| {
                            let x = xs[m];
                            family.drift_into(t_k, &[x], &u, &mut mu);
                            let xc = store.state(m, k + 1, n) - x - mu[0] * dt;
                            (ys[m] - fit.eval(x.clamp(q_lo, q_hi))) * xc / dt
                        })
                        .collect();
                    let cfit = fit_hats(&xs, &cov_t, q_lo, q_hi, segments, k)?;
                    (
                        chain
                            .x
                            .iter()
                            .map(|&x| claim.eval(&[x]) + fit.eval(x.clamp(q_lo, q_hi)))
                            .collect(),
                        chain
                            .x
                            .iter()
                            .map(|&x| cfit.eval(x.clamp(q_lo, q_hi)))
                            .collect(),
                    )
                };
                let mut a = vec![0.0; nodes];
                let mut b = vec![0.0; nodes];
                let mut zsc = vec![0.0; nodes];
                let mut zv = vec![0.0; nodes];
                for j in 0..nodes {
                    family.drift_into(t_k, &chain.x[j..j + 1], &u, &mut mu);
                    family.vol_into(t_k, &chain.x[j..j + 1], &u, &mut sg);
                    a[j] = sg[0] * sg[0];
                    b[j] = mu[0];
                    zv[j] = if a[j] > 1e-300 { cov_nodes[j] / a[j] } else { 0.0 };
                    zsc[j] = a[j].sqrt() * zv[j];
                }
                let mut y = expect.clone();
                for _ in 0..200 {
                    let mut change: f64 = 0.0;
                    for j in 0..nodes {
                        let f = gen.eval(
                            t_k,
                            &chain.x[j..j + 1],
                            y[j],
                            &zsc[j..j + 1],
                            &a[j..j + 1],
                            &b[j..j + 1],
                        );
                        let yn = expect[j] - f * dt;
                        change = change.max((yn - y[j]).abs());
                        y[j] = yn;
                    }
                    if change < params.picard_tol {
                        break;
                    }
                }
                cands.push(y);
                zs.push(zv);
                let _ = u_idx;
            }
            z[k] = (0..nodes).map(|j| zs[argmax[k][j]][j]).collect();
            candidates[k] = cands;
        }
    }

    Ok(RobustSolution {
        mode: SolveMode::Path,
        chain,
        values,
        argmax,
        z,
        candidates,
        n_controls,
        v0_stderr: Some(sol.y0_stderr()),
        v0_anchor: Some(sol.y0()),
    })
}

/// Table policy over uniform state buckets quantised from per-node argmax.
fn table_policy_from_argmax(
    chain: &Chain,
    argmax: &[Vec<usize>],
    _n_controls: usize,
) -> ControlPolicy {
    let lo = chain.x[0];
    let hi = chain.x[chain.x.len() - 1];
    let grid = crate::market_paths::BucketGrid::new(lo, hi, chain.x.len());
    let indices = argmax
        .iter()
        .map(|row| {
            (0..grid.n)
                .map(|b| {
                    let x = grid.center(b);
                    let mut best = 0usize;
                    let mut bd = f64::INFINITY;
                    for (j, &xj) in chain.x.iter().enumerate() {
                        let d = (xj - x).abs();
                        if d < bd {
                            bd = d;
                            best = j;
                        }
                    }
                    row[best]
                })
                .collect()
        })
        .collect();
    ControlPolicy::Table { grid, indices }
}

fn state_quantile_range(xs: &[f64], tail: f64) -> (f64, f64) {
    let mut pooled = xs.to_vec();
    let len = pooled.len();
    let lo_i = ((len as f64 * tail) as usize).min(len - 1);
    let hi_i = ((len as f64 * (1.0 - tail)) as usize).min(len - 1);
    let (_, lo, _) = pooled.select_nth_unstable_by(lo_i, |a, b| a.partial_cmp(b).unwrap());
    let lo = *lo;
    let (_, hi, _) = pooled.select_nth_unstable_by(hi_i, |a, b| a.partial_cmp(b).unwrap());
    let hi = *hi;
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1e-9, lo + 1e-9)
    }
}

/// Inter-quantile range of the pooled state clouds at step `k`.
fn pooled_quantile_range(stores: &[ControlPaths], k: usize, n: usize, tail: f64) -> (f64, f64) {
    let mut pooled: Vec<f64> = stores
        .iter()
        .flat_map(|s| (0..s.paths).map(move |m| s.state(m, k, n)))
        .collect();
    let len = pooled.len();
    let lo_i = ((len as f64 * tail) as usize).min(len - 1);
    let hi_i = ((len as f64 * (1.0 - tail)) as usize).min(len - 1);
    let (_, lo, _) = pooled.select_nth_unstable_by(lo_i, |a, b| a.partial_cmp(b).unwrap());
    let lo = *lo;
    let (_, hi, _) = pooled.select_nth_unstable_by(hi_i, |a, b| a.partial_cmp(b).unwrap());
    let hi = *hi;
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1e-9, lo + 1e-9)
    }
}

/// Polynomial least squares on standardised coordinates.
struct PolyFit {
    mean: f64,
    inv_std: f64,
    coeffs: Vec<f64>,
}

impl PolyFit {
    fn eval(&self, x: f64) -> f64 {
        let s = (x - self.mean) * self.inv_std;
        let mut acc = self.coeffs[0];
        let mut p = 1.0;
        for c in &self.coeffs[1..] {
            p *= s;
            acc += c * p;
        }
        acc
    }
}

fn fit_poly(xs: &[f64], targets: &[f64], degree: usize, step: usize) -> Result<PolyFit, SolverError> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = if var > 1e-300 { 1.0 / var.sqrt() } else { 0.0 };
    let width = degree + 1;
    let mut gram = vec![0.0; width * width];
    let mut rhs = vec![0.0; width];
    let mut feat = vec![0.0; width];
    for (&x, &y) in xs.iter().zip(targets) {
        let s = (x - mean) * inv_std;
        feat[0] = 1.0;
        for p in 1..width {
            feat[p] = feat[p - 1] * s;
        }
        for a in 0..width {
            rhs[a] += feat[a] * y;
            for b in 0..width {
                gram[a * width + b] += feat[a] * feat[b];
            }
        }
    }
    let mut g = nalgebra::DMatrix::from_row_slice(width, width, &gram);
    let eig = g.clone().symmetric_eigenvalues();
    let max_e = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min_e = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min_e <= 0.0 || max_e / min_e > crate::bsde_solver::RIDGE_CONDITION_LIMIT {
        for i in 1..width {
            g[(i, i)] += 1e-9 * max_e.max(1.0);
        }
    }
    let beta = g
        .cholesky()
        .ok_or_else(|| SolverError::BasisError {
            step,
            reason: "rank-deficient design matrix".into(),
        })?
        .solve(&nalgebra::DVector::from_column_slice(&rhs));
    Ok(PolyFit {
        mean,
        inv_std,
        coeffs: beta.iter().cloned().collect(),
    })
}

/// Least-squares fit on hat functions over `[lo, hi]`: local in the
/// state, flat outside, with thin-coverage nodes backfilled from their
/// nearest covered neighbour.
struct HatFit {
    lo: f64,
    hi: f64,
    coeffs: Vec<f64>,
}

impl HatFit {
    fn eval(&self, x: f64) -> f64 {
        let segs = self.coeffs.len() - 1;
        let pos = ((x - self.lo) / (self.hi - self.lo) * segs as f64).clamp(0.0, segs as f64);
        let j = (pos as usize).min(segs - 1);
        let frac = pos - j as f64;
        self.coeffs[j] * (1.0 - frac) + self.coeffs[j + 1] * frac
    }
}

fn fit_hats(
    xs: &[f64],
    targets: &[f64],
    lo: f64,
    hi: f64,
    segments: usize,
    step: usize,
) -> Result<HatFit, SolverError> {
    let width = segments + 1;
    let mut gram = vec![0.0; width * width];
    let mut rhs = vec![0.0; width];
    let mut wsum = vec![0.0; width];
    let scale = segments as f64 / (hi - lo);
    for (&x, &y) in xs.iter().zip(targets) {
        let pos = ((x - lo) * scale).clamp(0.0, segments as f64);
        let j = (pos as usize).min(segments - 1);
        let frac = pos - j as f64;
        let (w0, w1) = (1.0 - frac, frac);
        gram[j * width + j] += w0 * w0;
        gram[j * width + j + 1] += w0 * w1;
        gram[(j + 1) * width + j] += w0 * w1;
        gram[(j + 1) * width + j + 1] += w1 * w1;
        rhs[j] += w0 * y;
        rhs[j + 1] += w1 * y;
        wsum[j] += w0;
        wsum[j + 1] += w1;
    }
    let max_diag = (0..width)
        .map(|i| gram[i * width + i])
        .fold(0.0, f64::max)
        .max(1.0);
    for i in 0..width {
        gram[i * width + i] += 1e-8 * max_diag;
    }
    let g = nalgebra::DMatrix::from_row_slice(width, width, &gram);
    let beta = g
        .cholesky()
        .ok_or_else(|| SolverError::BasisError {
            step,
            reason: "rank-deficient hat design".into(),
        })?
        .solve(&nalgebra::DVector::from_column_slice(&rhs));
    let mut coeffs: Vec<f64> = beta.iter().cloned().collect();
    // Backfill nodes the sample barely touches.
    let covered: Vec<usize> = (0..width).filter(|&i| wsum[i] >= 5.0).collect();
    if !covered.is_empty() {
        for i in 0..width {
            if wsum[i] < 5.0 {
                let nearest = *covered
                    .iter()
                    .min_by_key(|&&c| (c as isize - i as isize).unsigned_abs())
                    .unwrap();
                coeffs[i] = coeffs[nearest];
            }
        }
    }
    Ok(HatFit { lo, hi, coeffs })
}

/// Facade over the two backends.
pub fn robust_value(
    family: &DiffusionFamily,
    grid: TimeGrid,
    gen: &GeneratorSpec,
    claim: &TerminalClaim,
    x0: f64,
    mode: SolveMode,
    params: &RobustParams,
) -> Result<RobustSolution, SolverError> {
    match mode {
        SolveMode::Lattice => robust_value_lattice(family, grid, gen, claim, x0, params),
        SolveMode::Path => robust_value_path(family, grid, gen, claim, x0, params),
    }
}

// ---------------------------------------------------------------------------
// Verifiers
// ---------------------------------------------------------------------------

/// Dynamic-programming check at an intermediate stopping time.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DppReport {
    pub k_mid: usize,
    pub direct_value: f64,
    pub nested_value: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Lattice check: re-runs the sweep on `[0, k_mid]` with terminal slice
/// `V[k_mid]`; the recursion makes the identity exact, so the gap guards
/// the implementation rather than the theorem.
pub fn verify_dpp_lattice(
    rs: &RobustSolution,
    family: &DiffusionFamily,
    gen: &GeneratorSpec,
    k_mid: usize,
) -> Result<DppReport, SolverError> {
    let n = rs.steps();
    if k_mid == 0 || k_mid >= n {
        return Err(SolverError::Precondition(format!(
            "k_mid must lie strictly inside the grid, got {k_mid}"
        )));
    }
    let nested = robust_sweep_lattice(
        family,
        gen,
        &rs.chain,
        rs.values[k_mid].clone(),
        k_mid,
        1e-12,
    )?;
    let gap = (rs.value_at_x0() - nested.value_at_x0()).abs();
    Ok(DppReport {
        k_mid,
        direct_value: rs.value_at_x0(),
        nested_value: nested.value_at_x0(),
        gap,
        tolerance: LATTICE_TOL,
        pass: gap <= LATTICE_TOL,
    })
}

/// Path-mode check: the nested value maximises, over the constant policies
/// of the family, the regression solve on `[0, k_mid]` with the stored
/// surface at `k_mid` as terminal data. Matches the direct value within
/// Monte Carlo noise whenever a constant policy attains the supremum on
/// `[0, t_mid]` (convex claims under volatility uncertainty).
#[allow(clippy::too_many_arguments)]
pub fn verify_dpp_path(
    rs: &RobustSolution,
    family: &DiffusionFamily,
    grid: TimeGrid,
    gen: &GeneratorSpec,
    x0: f64,
    params: &RobustParams,
    k_mid: usize,
) -> Result<DppReport, SolverError> {
    let n = rs.steps();
    if k_mid == 0 || k_mid >= n {
        return Err(SolverError::Precondition(format!(
            "k_mid must lie strictly inside the grid, got {k_mid}"
        )));
    }
    let mut nested = f64::NEG_INFINITY;
    let mut stderr: f64 = 0.0;
    for u_idx in 0..family.control_set.len() {
        // Same master seed as the sweep: common random numbers make the
        // nested estimate share the direct estimate's noise.
        let ens = simulate(
            family,
            &ControlPolicy::Constant(u_idx),
            grid,
            params.paths,
            &[x0],
            params.seed,
        )?;
        let terminal: Vec<f64> = (0..params.paths)
            .map(|m| rs.value_at(k_mid, ens.state(m, k_mid)[0]))
            .collect();
        let sol = solve_bsde_with_terminal(
            &ens,
            gen,
            &terminal,
            k_mid,
            &params.basis,
            params.picard_tol,
            None,
        )?;
        if sol.y0() > nested {
            nested = sol.y0();
            stderr = sol.y0_stderr();
        }
    }
    let direct = rs.value_at_x0();
    let gap = (direct - nested).abs();
    let tolerance = 3.0 * (stderr + rs.v0_stderr.unwrap_or(0.0));
    Ok(DppReport {
        k_mid,
        direct_value: direct,
        nested_value: nested,
        gap,
        tolerance,
        pass: gap <= tolerance,
    })
}

/// Minimality certificate of the compensator family.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MinimalityReport {
    /// `min over policies of E^P[K_T^P]` (constant policies + argmax).
    pub min_expected_k: f64,
    /// Label of the minimising policy.
    pub argmin_policy: String,
    /// Worst (most negative) increment seen anywhere.
    pub worst_increment: f64,
    /// Largest per-node one-step minimum `min_u dK^u_k(j)` (0 when the max
    /// is attained, as it must be).
    pub worst_node_min: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks `min_P E^P[K_T^P] <= tol` over the constant policies and the
/// argmax feedback policy, plus the per-node one-step minimum.
pub fn verify_minimality(
    rs: &RobustSolution,
    family: &DiffusionFamily,
    tolerance: f64,
) -> Result<MinimalityReport, SolverError> {
    let mut min_expected = f64::INFINITY;
    let mut argmin = String::new();
    let mut worst_inc: f64 = 0.0;

    for u in 0..rs.n_controls {
        let pol = ControlPolicy::Constant(u);
        let dk = rs.extract_k(&pol)?;
        for row in &dk {
            for &v in row {
                worst_inc = worst_inc.min(v);
            }
        }
        let ek = rs.expected_k_total(family, &pol, 0.0)?;
        if ek < min_expected {
            min_expected = ek;
            argmin = format!("constant {}", family.control_set.label(u));
        }
    }
    {
        let dk = rs.extract_k_argmax()?;
        for row in &dk {
            for &v in row {
                worst_inc = worst_inc.min(v);
            }
        }
        let ek = rs.expected_k_argmax(family, 0.0)?;
        if ek < min_expected {
            min_expected = ek;
            argmin = "argmax".into();
        }
    }

    // Per-node one-step minimality: min_u dK^u = V - max_u candidate = 0.
    let mut worst_node_min: f64 = 0.0;
    for k in 0..rs.steps() {
        for j in 0..rs.chain.x.len() {
            let mut best = f64::INFINITY;
            for u in 0..rs.n_controls {
                best = best.min(rs.values[k][j] - rs.candidates[k][u][j]);
            }
            worst_node_min = worst_node_min.max(best.abs());
        }
    }

    let pass = min_expected.abs() <= tolerance
        && worst_inc >= -LATTICE_TOL
        && worst_node_min <= tolerance.max(LATTICE_TOL);
    Ok(MinimalityReport {
        min_expected_k: min_expected,
        argmin_policy: argmin,
        worst_increment: worst_inc,
        worst_node_min,
        tolerance,
        pass,
    })
}

/// Representation of the robust value as a maximum over constant measures.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RepresentationReport {
    pub robust_value: f64,
    pub best_constant_value: f64,
    pub best_constant_label: String,
    /// `robust_value - best_constant_value` (>= -tolerance always; zero up
    /// to tolerance when a constant measure attains the supremum).
    pub margin: f64,
    pub tolerance: f64,
    pub sup_consistent: bool,
}

/// Solves the single-measure backward equation for every constant policy on
/// the same chain and compares with the robust value.
pub fn verify_representation(
    rs: &RobustSolution,
    family: &DiffusionFamily,
    gen: &GeneratorSpec,
    claim: &TerminalClaim,
    tolerance: f64,
) -> Result<RepresentationReport, SolverError> {
    let mut best = f64::NEG_INFINITY;
    let mut label = String::new();
    for u in 0..family.control_set.len() {
        let sol = solve_bsde_lattice(family, u, &rs.chain, gen, claim, 1e-12)?;
        if sol.y0() > best {
            best = sol.y0();
            label = family.control_set.label(u).to_string();
        }
    }
    let v0 = rs.value_at_x0();
    Ok(RepresentationReport {
        robust_value: v0,
        best_constant_value: best,
        best_constant_label: label,
        margin: v0 - best,
        tolerance,
        sup_consistent: v0 >= best - tolerance,
    })
}

/// Ordered-data comparison of two robust instances.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Robust2BsdeComparisonReport {
    pub value_hi: f64,
    pub value_lo: f64,
    pub tolerance: f64,
    /// False when the hypotheses fail on the inputs (check inapplicable).
    pub applicable: bool,
    pub pass: bool,
}

/// Verifies `V_hi >= V_lo` for instances ordered as: `claim_hi >= claim_lo`
/// on the lattice nodes and `gen_hi <= gen_lo` along each solution's own
/// arguments (a larger driver lowers the value under this sign convention).
/// Hypothesis failure marks the report inapplicable instead of failing.
pub fn verify_2bsde_comparison(
    family: &DiffusionFamily,
    grid: TimeGrid,
    gen_hi: &GeneratorSpec,
    claim_hi: &TerminalClaim,
    gen_lo: &GeneratorSpec,
    claim_lo: &TerminalClaim,
    x0: f64,
    params: &RobustParams,
) -> Result<Robust2BsdeComparisonReport, SolverError> {
    let hi = robust_value_lattice(family, grid, gen_hi, claim_hi, x0, params)?;
    let lo = robust_value_lattice(family, grid, gen_lo, claim_lo, x0, params)?;
    let mut applicable = true;
    for &x in &hi.chain.x {
        if claim_hi.eval(&[x]) < claim_lo.eval(&[x]) - 1e-12 {
            applicable = false;
        }
    }
    // Driver order evaluated at the high solution's own arguments: the
    // condition under which the monotone one-step operators propagate the
    // order exactly on the lattice.
    let mut mu = [0.0];
    let mut sg = [0.0];
    'outer: for k in 0..hi.steps() {
        let t = grid.node(k);
        for j in 0..hi.chain.x.len() {
            let x = hi.chain.x[j];
            let u = family.control_set.point(hi.argmax[k][j]);
            family.drift_into(t, &[x], u, &mut mu);
            family.vol_into(t, &[x], u, &mut sg);
            let a = sg[0] * sg[0];
            let zsc = a.sqrt() * hi.z[k][j];
            let fh = gen_hi.eval(t, &[x], hi.values[k][j], &[zsc], &[a], &[mu[0]]);
            let fl = gen_lo.eval(t, &[x], hi.values[k][j], &[zsc], &[a], &[mu[0]]);
            if fh > fl + 1e-12 {
                applicable = false;
                break 'outer;
            }
        }
    }
    let tolerance = LATTICE_TOL;
    let pass = !applicable || hi.value_at_x0() >= lo.value_at_x0() - tolerance;
    Ok(Robust2BsdeComparisonReport {
        value_hi: hi.value_at_x0(),
        value_lo: lo.value_at_x0(),
        tolerance,
        applicable,
        pass,
    })
}

/// Discrete surrogates of the solution and data norms.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AprioriReport {
    /// `max_P sup_k E^P[|V_k|^p]^{1/p}`.
    pub y_norm: f64,
    /// `max_P (E^P[sum_k a Z^2 dt])^{1/2}`.
    pub z_norm: f64,
    /// `max_P E^P[K_T]`.
    pub k_norm: f64,
    /// `max_P E^P[|xi|^p]^{1/p}`.
    pub xi_norm: f64,
    /// `max_P (E^P[sum_k |f^0|^kappa dt])^{1/kappa}`.
    pub f0_norm: f64,
    /// `(y + z + k) / max(xi + f0, floor)`.
    pub ratio: f64,
    pub finite: bool,
}

/// Computes the norm surrogates over the constant policies of the family.
///
/// The exponents default to `p = 2`, `kappa = 1.5`; only finiteness and
/// grid-stability of the ratio are asserted downstream (the bounding
/// constant itself is not recoverable numerically).
pub fn verify_apriori(
    rs: &RobustSolution,
    family: &DiffusionFamily,
    gen: &GeneratorSpec,
    p: f64,
    kappa: f64,
) -> Result<AprioriReport, SolverError> {
    let n = rs.steps();
    let dt = rs.chain.grid.dt();
    let mut y_norm: f64 = 0.0;
    let mut z_norm: f64 = 0.0;
    let mut k_norm: f64 = 0.0;
    let mut xi_norm: f64 = 0.0;
    let mut f0_norm: f64 = 0.0;
    let mut mu = [0.0];
    let mut sg = [0.0];
    for u_idx in 0..rs.n_controls {
        let pol = ControlPolicy::Constant(u_idx);
        let occ = rs.occupation(family, &pol)?;
        let u = family.control_set.point(u_idx).to_vec();
        let mut y_pol: f64 = 0.0;
        let mut z_acc = 0.0;
        let mut f_acc = 0.0;
        for k in 0..=n {
            let mut yk = 0.0;
            for j in 0..rs.chain.x.len() {
                yk += occ[k][j] * rs.values[k][j].abs().powf(p);
            }
            y_pol = y_pol.max(yk);
            if k < n {
                let t = rs.chain.grid.node(k);
                for j in 0..rs.chain.x.len() {
                    if occ[k][j] == 0.0 {
                        continue;
                    }
                    let x = rs.chain.x[j];
                    family.drift_into(t, &[x], &u, &mut mu);
                    family.vol_into(t, &[x], &u, &mut sg);
                    let a = sg[0] * sg[0];
                    z_acc += occ[k][j] * a * rs.z[k][j] * rs.z[k][j] * dt;
                    let f0 = gen.eval(t, &[x], 0.0, &[0.0], &[a], &[mu[0]]);
                    f_acc += occ[k][j] * f0.abs().powf(kappa) * dt;
                }
            }
        }
        y_norm = y_norm.max(y_pol.powf(1.0 / p));
        z_norm = z_norm.max(z_acc.sqrt());
        f0_norm = f0_norm.max(f_acc.powf(1.0 / kappa));
        let mut xi = 0.0;
        for j in 0..rs.chain.x.len() {
            xi += occ[n][j] * rs.values[n][j].abs().powf(p);
        }
        xi_norm = xi_norm.max(xi.powf(1.0 / p));
        k_norm = k_norm.max(rs.expected_k_total(family, &pol, 0.0)?);
    }
    let lhs = y_norm + z_norm + k_norm;
    let rhs = (xi_norm + f0_norm).max(1e-12);
    let ratio = lhs / rhs;
    let finite = lhs.is_finite() && rhs.is_finite();
    Ok(AprioriReport {
        y_norm,
        z_norm,
        k_norm,
        xi_norm,
        f0_norm,
        ratio,
        finite,
    })
}
