//! Recombining Markov-chain lattice: the exact-expectation backend.
//!
//! One shared spatial grid (in the state itself or in its logarithm) hosts a
//! trinomial chain per control value. From node `x_j`, one substep moves to
//! `{j-1, j, j+1}` with probabilities matching the drift exactly and the
//! variance to second order:
//!
//! ```text
//! p_up/dn = var dt / (2 dw^2) +- drift dt / (2 dw),   p_mid = 1 - p_up - p_dn
//! ```
//!
//! falling back to upwind drift weights when the central form would turn
//! negative. All weights stay in `[0, 1]`, so every one-step operator is
//! monotone and mass-preserving: comparison, dynamic-programming and
//! decomposition identities hold on the lattice to rounding error, which is
//! what makes this module the in-repo oracle for the regression solver.
//!
//! Each grid step of length `dt` is realised as `n_sub` substeps chosen so
//! the stability bound `(var + |drift| dw) dt_sub <= cfl * dw^2` holds at
//! every node; the driver is applied once per grid step, on the composed
//! kernel.

use thiserror::Error;

use crate::market_paths::{DiffusionFamily, TimeGrid};

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("invalid lattice parameters: {0}")]
    BadParams(String),
    #[error("log coordinate requires a strictly positive state, got {0}")]
    NonPositiveState(f64),
    #[error("stability would require {needed} substeps per grid step (cap {cap}); refine the spatial grid instead")]
    SubstepCap { needed: usize, cap: usize },
    #[error("non-finite lattice coefficient at node {node}: var={var}, drift={drift}")]
    BadCoefficient { node: usize, var: f64, drift: f64 },
}

/// Spatial discretisation parameters for the chain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatticeParams {
    /// Number of spatial nodes.
    pub nodes: usize,
    /// Half-width of the domain in units of terminal standard deviation.
    pub width_sigmas: f64,
    /// Stability safety factor in (0, 1].
    pub cfl: f64,
    /// Work in `ln x` (states must stay positive) instead of `x`.
    pub log_coord: bool,
    /// Hard cap on substeps per grid step.
    pub substep_cap: usize,
}

impl LatticeParams {
    pub fn log_default(nodes: usize) -> Self {
        Self {
            nodes,
            width_sigmas: 6.0,
            cfl: 0.9,
            log_coord: true,
            substep_cap: 100_000,
        }
    }

    pub fn level_default(nodes: usize) -> Self {
        Self {
            log_coord: false,
            ..Self::log_default(nodes)
        }
    }
}

/// The shared grid: node coordinates `w`, states `x`, and the initial node.
#[derive(Debug, Clone)]
pub struct Chain {
    pub params: LatticeParams,
    pub grid: TimeGrid,
    /// Lattice coordinate values (uniform).
    pub w: Vec<f64>,
    /// State values at the nodes (`exp(w)` in log coordinates).
    pub x: Vec<f64>,
    pub dw: f64,
    /// Index of the node holding the initial state exactly.
    pub x0_index: usize,
}

/// Expectations of one composed grid step from every node under one control.
#[derive(Debug, Clone)]
pub struct StepExpectations {
    /// `E[v(X_next) | X = x_j]`.
    pub value: Vec<f64>,
    /// Covariation rate `(E[v(X_next) X_next] - E[v] E[X_next]) / dt`,
    /// the discrete density of `d<Y, X>/dt`.
    pub cov_rate: Vec<f64>,
    /// Substeps used for the composed kernel.
    pub n_sub: usize,
}

impl Chain {
    /// Builds the grid around `x0` (placed on a node exactly), wide enough
    /// for `width_sigmas` standard deviations under the most volatile
    /// control, drift margin included.
    pub fn build(
        family: &DiffusionFamily,
        grid: TimeGrid,
        x0: f64,
        params: LatticeParams,
    ) -> Result<Self, LatticeError> {
        if params.nodes < 3 {
            return Err(LatticeError::BadParams("need at least 3 nodes".into()));
        }
        if !(params.cfl > 0.0 && params.cfl <= 1.0) {
            return Err(LatticeError::BadParams(format!(
                "cfl must lie in (0, 1], got {}",
                params.cfl
            )));
        }
        if params.log_coord && x0 <= 0.0 {
            return Err(LatticeError::NonPositiveState(x0));
        }
        let w0 = if params.log_coord { x0.ln() } else { x0 };
        // Reference scales at (t = 0, x0) over the control set.
        let mut sig_w: f64 = 0.0;
        let mut drift_w: f64 = 0.0;
        let mut mu = [0.0];
        let mut sg = [0.0];
        for u in family.control_set.iter() {
            family.drift_into(0.0, &[x0], u, &mut mu);
            family.vol_into(0.0, &[x0], u, &mut sg);
            let (d, s2) = to_coord(params.log_coord, x0, mu[0], sg[0] * sg[0]);
            sig_w = sig_w.max(s2.sqrt());
            drift_w = drift_w.max(d.abs());
        }
        let t = grid.horizon();
        let half = params.width_sigmas * sig_w * t.sqrt() + drift_w * t + 1e-8;
        let j0 = params.nodes / 2;
        let dw = 2.0 * half / (params.nodes - 1) as f64;
        let w: Vec<f64> = (0..params.nodes)
            .map(|j| w0 + (j as f64 - j0 as f64) * dw)
            .collect();
        let x: Vec<f64> = w
            .iter()
            .map(|&wi| if params.log_coord { wi.exp() } else { wi })
            .collect();
        Ok(Self {
            params,
            grid,
            w,
            x,
            dw,
            x0_index: j0,
        })
    }

    /// Monotone linear interpolation of nodal values at state `x`,
    /// clamped to the boundary nodes.
    pub fn interp(&self, values: &[f64], xq: f64) -> f64 {
        let wq = if self.params.log_coord {
            if xq <= 0.0 {
                return values[0];
            }
            xq.ln()
        } else {
            xq
        };
        let lo = self.w[0];
        if wq <= lo {
            return values[0];
        }
        let last = self.w.len() - 1;
        if wq >= self.w[last] {
            return values[last];
        }
        let pos = (wq - lo) / self.dw;
        let j = (pos as usize).min(last - 1);
        let frac = pos - j as f64;
        values[j] * (1.0 - frac) + values[j + 1] * frac
    }

    /// Substep count and length meeting the stability bound at `t_k`.
    fn kernel_plan(
        &self,
        family: &DiffusionFamily,
        u: &[f64],
        t_k: f64,
    ) -> Result<(usize, f64), LatticeError> {
        let dt = self.grid.dt();
        let dw = self.dw;
        let mut worst_rate: f64 = 0.0;
        let mut mu = [0.0];
        let mut sg = [0.0];
        for jj in 0..self.params.nodes {
            let xj = self.x[jj];
            family.drift_into(t_k, &[xj], u, &mut mu);
            family.vol_into(t_k, &[xj], u, &mut sg);
            let (d, var) = to_coord(self.params.log_coord, xj, mu[0], sg[0] * sg[0]);
            if !d.is_finite() || !var.is_finite() || var < 0.0 {
                return Err(LatticeError::BadCoefficient {
                    node: jj,
                    var,
                    drift: d,
                });
            }
            let rate = if d.abs() * dw <= var {
                var
            } else {
                var + d.abs() * dw
            };
            worst_rate = worst_rate.max(rate);
        }
        let n_sub = ((dt * worst_rate / (self.params.cfl * dw * dw)).ceil() as usize).max(1);
        if n_sub > self.params.substep_cap {
            return Err(LatticeError::SubstepCap {
                needed: n_sub,
                cap: self.params.substep_cap,
            });
        }
        Ok((n_sub, dt / n_sub as f64))
    }

    /// Trinomial weights `(p_dn, p_mid, p_up)` at node `jj`, time `t`.
    ///
    /// Interior nodes match the *state* increment moments exactly:
    /// `E[dX] = mu dt` and `E[dX^2] = a dt + (mu dt)^2`, solved from the
    /// actual neighbour displacements. Exact first moments make linear
    /// payoffs propagate without bias (a driftless chain is a martingale
    /// in `X`, not merely in the lattice coordinate). When the solve
    /// leaves the simplex (drift-dominated nodes) the scheme falls back to
    /// upwind weights in the lattice coordinate, first-order but monotone.
    #[inline]
    fn probs(
        &self,
        family: &DiffusionFamily,
        u: &[f64],
        t: f64,
        dt_sub: f64,
        jj: usize,
        mu: &mut [f64],
        sg: &mut [f64],
    ) -> (f64, f64, f64) {
        let xj = self.x[jj];
        family.drift_into(t, &[xj], u, mu);
        family.vol_into(t, &[xj], u, sg);
        let a = sg[0] * sg[0];
        let j_hi = self.x.len() - 1;
        let m = mu[0] * dt_sub;
        let v = a * dt_sub + m * m;
        if jj > 0 && jj < j_hi {
            let up = self.x[jj + 1] - xj;
            let dn = self.x[jj - 1] - xj;
            let span = dn - up;
            if span.abs() > 1e-300 {
                let p_up = (m * dn - v) / (up * span);
                let p_dn = (v - m * up) / (dn * span);
                let p_mid = 1.0 - p_up - p_dn;
                if p_up >= 0.0 && p_dn >= 0.0 && p_mid >= 0.0 {
                    return (p_dn, p_mid, p_up);
                }
            }
        } else {
            // Boundary rows pair with a linear-in-state ghost mirrored at
            // the edge spacing, so the same moment matching applies with
            // symmetric displacements.
            let delta = if jj == 0 {
                self.x[1] - self.x[0]
            } else {
                self.x[j_hi] - self.x[j_hi - 1]
            };
            if delta > 1e-300 {
                let p_up = (v + m * delta) / (2.0 * delta * delta);
                let p_dn = (v - m * delta) / (2.0 * delta * delta);
                let p_mid = 1.0 - p_up - p_dn;
                if p_up >= 0.0 && p_dn >= 0.0 && p_mid >= 0.0 {
                    return (p_dn, p_mid, p_up);
                }
            }
        }
        // Boundary rows and drift-dominated nodes: upwind in the lattice
        // coordinate with clamped neighbours.
        let (d, var) = to_coord(self.params.log_coord, xj, mu[0], a);
        let dw = self.dw;
        let diff = var * dt_sub / (2.0 * dw * dw);
        let adv = d * dt_sub / dw;
        let (p_up, p_dn) = (diff + adv.max(0.0), diff + (-adv).max(0.0));
        let p_mid = 1.0 - p_up - p_dn;
        debug_assert!(p_up >= -1e-15 && p_dn >= -1e-15 && p_mid >= -1e-12);
        (p_dn, p_mid, p_up)
    }

    /// Composed one-grid-step expectations under control `u`, starting at
    /// time `t_k`. `v_next` holds the nodal values at `t_{k+1}`.
    pub fn step_expectations(
        &self,
        family: &DiffusionFamily,
        u: &[f64],
        t_k: f64,
        v_next: &[f64],
    ) -> Result<StepExpectations, LatticeError> {
        let dt = self.grid.dt();
        let j = self.params.nodes;
        let (n_sub, dt_sub) = self.kernel_plan(family, u, t_k)?;

        let mut h = v_next.to_vec();
        let mut phi: Vec<f64> = v_next.iter().zip(&self.x).map(|(v, x)| v * x).collect();
        let mut psi = self.x.clone();
        let mut h_new = vec![0.0; j];
        let mut phi_new = vec![0.0; j];
        let mut psi_new = vec![0.0; j];
        let mut mu = [0.0];
        let mut sg = [0.0];

        for s in 0..n_sub {
            // Backward sweep applies the latest substep kernel first;
            // coefficients sit at each substep's left endpoint.
            let t_sub = t_k + dt - (s + 1) as f64 * dt_sub;
            for jj in 0..j {
                let (p_dn, p_mid, p_up) =
                    self.probs(family, u, t_sub, dt_sub, jj, &mut mu, &mut sg);
                // Ghost neighbours extrapolate linearly at the edges, so
                // affine value profiles propagate without boundary bias.
                let gather = |v: &[f64]| -> f64 {
                    let vm = if jj == 0 { 2.0 * v[0] - v[1] } else { v[jj - 1] };
                    let vp = if jj == j - 1 {
                        2.0 * v[j - 1] - v[j - 2]
                    } else {
                        v[jj + 1]
                    };
                    p_dn * vm + p_mid * v[jj] + p_up * vp
                };
                h_new[jj] = gather(&h);
                phi_new[jj] = gather(&phi);
                psi_new[jj] = gather(&psi);
            }
            std::mem::swap(&mut h, &mut h_new);
            std::mem::swap(&mut phi, &mut phi_new);
            std::mem::swap(&mut psi, &mut psi_new);
        }

        let cov_rate = (0..j)
            .map(|jj| (phi[jj] - h[jj] * psi[jj]) / dt)
            .collect();
        Ok(StepExpectations {
            value: h,
            cov_rate,
            n_sub,
        })
    }

    /// Pushes an occupation mass one grid step forward under control `u`:
    /// the adjoint of the backward kernel composition, so forward
    /// occupation times backward values reproduces expectations exactly.
    pub fn push_forward(
        &self,
        family: &DiffusionFamily,
        u: &[f64],
        t_k: f64,
        mass: &[f64],
    ) -> Result<Vec<f64>, LatticeError> {
        let j = self.params.nodes;
        let (n_sub, dt_sub) = self.kernel_plan(family, u, t_k)?;
        let mut pi = mass.to_vec();
        let mut pi_new = vec![0.0; j];
        let mut mu = [0.0];
        let mut sg = [0.0];
        for s in 0..n_sub {
            let t_sub = t_k + s as f64 * dt_sub;
            pi_new.fill(0.0);
            for jj in 0..j {
                let m = pi[jj];
                if m == 0.0 {
                    continue;
                }
                let (p_dn, p_mid, p_up) =
                    self.probs(family, u, t_sub, dt_sub, jj, &mut mu, &mut sg);
                // Adjoint of the ghost-extrapolated backward kernel.
                if jj == 0 {
                    pi_new[0] += (p_mid + 2.0 * p_dn) * m;
                    pi_new[1] += (p_up - p_dn) * m;
                } else if jj == j - 1 {
                    pi_new[j - 1] += (p_mid + 2.0 * p_up) * m;
                    pi_new[j - 2] += (p_dn - p_up) * m;
                } else {
                    pi_new[jj - 1] += p_dn * m;
                    pi_new[jj] += p_mid * m;
                    pi_new[jj + 1] += p_up * m;
                }
            }
            std::mem::swap(&mut pi, &mut pi_new);
        }
        Ok(pi)
    }
}

#[inline]
fn to_coord(log_coord: bool, x: f64, mu: f64, a: f64) -> (f64, f64) {
    if log_coord {
        let x2 = x * x;
        (mu / x - a / (2.0 * x2), a / x2)
    } else {
        (mu, a)
    }
}
