//! Numerical machinery for worst-case (robust) valuation of backward SDEs
//! over a non-dominated family of diffusion measures.
//!
//! The library is organised around one pipeline:
//!
//! 1. [`market_paths`] describes controlled diffusions `dX = mu dt + sigma dW`
//!    over a finite control set, simulates Euler ensembles with reproducible
//!    counter-based randomness, and records the realised diffusion matrix
//!    `a = sigma sigma^T` along every path.
//! 2. [`generators`] holds drivers `f(t, x, y, z, a, b)` for the backward
//!    equation, Lipschitz in `(y, z)`, including the linear pricing driver
//!    and the two-rate (borrowing/lending) driver.
//! 3. [`bsde_solver`] solves the single-measure backward equation
//!    `Y_k = E[Y_{k+1} | F_k] - f(t_k, X_k, Y_k, (a^{1/2})^T Z_k, a_k, b_k) dt`
//!    either by least-squares regression over a path ensemble (path mode) or
//!    by exact expectations on a recombining Markov chain (lattice mode),
//!    with `Z` extracted from the covariation of `Y` with `X`.
//! 4. [`robust_2bsde`] maximises the backward solution over the measure
//!    family step by step, producing the value surface, the optimal control
//!    table, and the per-measure non-decreasing compensators `K` together
//!    with their minimality certificate.
//! 5. [`pde_oracle`] provides independent cross-checks: the Black-Scholes
//!    closed form and a monotone finite-difference solver for the
//!    Hamilton-Jacobi-Bellman equation of the worst-case value.
//! 6. [`hedging`] turns the robust value into a super-hedging price and a
//!    strategy surface, and verifies the hedge by forward simulation under
//!    every measure in the family.
//!
//! Sign convention used throughout: the backward equation is written as
//! `Y_t = xi - int_t^T f ds - int_t^T Z . dX^c`, so the driver acts as the
//! growth rate of the hedging wealth `Y_t = y_0 + int_0^t f ds + int Z . dX^c`
//! and a *larger* driver produces a *smaller* backward value. The linear
//! pricing driver `f = r y + z . theta` therefore discounts at rate `r`.

pub mod bsde_solver;
pub mod generators;
pub mod hedging;
pub mod lattice;
pub mod market_paths;
pub mod pde_oracle;
pub mod rng;
pub mod robust_2bsde;

pub use bsde_solver::{solve_bsde, BackwardSolution, RegressionBasis, SolverError};
pub use generators::{GeneratorSpec, TerminalClaim};
pub use hedging::{super_hedging_price, HedgeResult, MarketSpec};
pub use lattice::LatticeParams;
pub use market_paths::{
    simulate, ControlPolicy, ControlSet, DiffusionFamily, MarketError, PathEnsemble, TimeGrid,
};
pub use pde_oracle::{black_scholes, solve_g_equation, GOperator, OptionKind, PdeGrid};
pub use robust_2bsde::{robust_value, RobustSolution, SolveMode};
