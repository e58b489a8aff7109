//! Robust super-hedging: price, strategy surface, and forward verification.
//!
//! The super-hedging price of a claim over the measure family is the time-0
//! robust value; the strategy is the covariation integrand `Z` of the same
//! sweep. Rolling the wealth
//!
//! ```text
//! Y_{k+1} = Y_k + f(t_k, X_k, Y_k, (a^{1/2})^T Z_k, a_k, b_k) dt
//!           + Z_k (X_{k+1} - X_k - b_k dt)
//! ```
//!
//! forward from the price must dominate the claim under *every* measure of
//! the family up to discretisation error; the verifier simulates fresh
//! paths under each family policy (plus a randomized-policy stress set
//! standing in for the quasi-sure quantifier) and reports the shortfall
//! distribution `(xi - Y_T)^+`. Under sub-maximal measures the average
//! surplus equals the expected compensator mass `E[K_T]` of the
//! decomposition.

use thiserror::Error;

use crate::generators::{two_rate_generator, GeneratorSpec, RiskPremium, TerminalClaim};
use crate::market_paths::{simulate, BucketGrid, ControlPolicy, DiffusionFamily, TimeGrid};
use crate::rng::PathRng;
use crate::robust_2bsde::{robust_value, RobustParams, RobustSolution, SolveMode};
use crate::bsde_solver::SolverError;
use crate::generators::GeneratorError;

#[derive(Debug, Error)]
pub enum HedgeError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Market(#[from] crate::market_paths::MarketError),
    #[error("wealth blow-up on policy '{policy}', path {path}")]
    WealthBlowUp { policy: String, path: usize },
}

/// The market: asset dynamics under uncertainty, wealth nonlinearity, claim.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    pub family: DiffusionFamily,
    pub generator: GeneratorSpec,
    pub claim: TerminalClaim,
    pub x0: f64,
    /// Documentation flag: the family is closed under equivalent
    /// martingale-preserving changes of measure (volatility-only families
    /// are). Not enforced; recorded into reports.
    pub saturated: bool,
}

/// Price, strategy surface, and the underlying robust solution.
#[derive(Debug, Clone)]
pub struct HedgeResult {
    pub price: f64,
    pub solution: RobustSolution,
}

impl HedgeResult {
    /// Strategy lookup with linear interpolation, clamped at the surface
    /// boundary.
    pub fn strategy(&self, k: usize, x: f64) -> f64 {
        self.solution.z_at(k, x)
    }
}

/// Super-hedging price: the robust value at time 0, with the covariation
/// integrand as the hedge.
pub fn super_hedging_price(
    ms: &MarketSpec,
    grid: TimeGrid,
    mode: SolveMode,
    params: &RobustParams,
) -> Result<HedgeResult, HedgeError> {
    let solution = robust_value(
        &ms.family,
        grid,
        &ms.generator,
        &ms.claim,
        ms.x0,
        mode,
        params,
    )?;
    Ok(HedgeResult {
        price: solution.value_at_x0(),
        solution,
    })
}

/// Two-rate market price: the same pipeline with the lending/borrowing
/// driver; collapses to the linear price when the rates coincide.
#[allow(clippy::too_many_arguments)]
pub fn two_rate_price(
    family: &DiffusionFamily,
    claim: &TerminalClaim,
    x0: f64,
    r_lend: f64,
    r_borrow: f64,
    premium: RiskPremium,
    grid: TimeGrid,
    params: &RobustParams,
) -> Result<HedgeResult, HedgeError> {
    let gen = two_rate_generator(r_lend, r_borrow, premium)?;
    let ms = MarketSpec {
        family: family.clone(),
        generator: gen,
        claim: claim.clone(),
        x0,
        saturated: true,
    };
    super_hedging_price(&ms, grid, SolveMode::Lattice, params)
}

/// Shortfall summary under one policy.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PolicyShortfall {
    pub policy: String,
    pub mean_surplus: f64,
    pub shortfall_probability: f64,
    pub q50: f64,
    pub q95: f64,
    pub q99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SuperhedgeReport {
    pub price: f64,
    pub initial_wealth: f64,
    /// Pass threshold on the 99th-percentile shortfall.
    pub threshold: f64,
    pub per_policy: Vec<PolicyShortfall>,
    pub worst_q99: f64,
    pub saturated_family: bool,
    pub pass: bool,
}

/// Forward-verification configuration.
#[derive(Debug, Clone)]
pub struct HedgeVerifyConfig {
    pub paths: usize,
    pub seed: u64,
    /// Random feedback policies added to the family's constant policies.
    pub random_policies: usize,
    /// Shortfall cap as a fraction of `notional`.
    pub shortfall_fraction: f64,
    pub notional: f64,
    /// Roll from this wealth instead of the price (duality stress tests).
    pub y0_override: Option<f64>,
}

impl HedgeVerifyConfig {
    pub fn new(paths: usize, seed: u64, notional: f64) -> Self {
        Self {
            paths,
            seed,
            random_policies: 20,
            shortfall_fraction: 0.005,
            notional,
            y0_override: None,
        }
    }
}

/// Rolls the stored strategy forward under every family policy (and the
/// random stress policies) on fresh paths and summarises the shortfalls.
pub fn verify_superhedge(
    hr: &HedgeResult,
    ms: &MarketSpec,
    grid: TimeGrid,
    cfg: &HedgeVerifyConfig,
) -> Result<SuperhedgeReport, HedgeError> {
    let n_controls = ms.family.control_set.len();
    let mut policies: Vec<(String, ControlPolicy)> = (0..n_controls)
        .map(|u| {
            (
                format!("constant {}", ms.family.control_set.label(u)),
                ControlPolicy::Constant(u),
            )
        })
        .collect();
    for r in 0..cfg.random_policies {
        policies.push((
            format!("random {r}"),
            random_feedback_policy(
                &hr.solution,
                n_controls,
                grid.steps(),
                cfg.seed ^ (0x5EED_0000 + r as u64),
            ),
        ));
    }

    let y0 = cfg.y0_override.unwrap_or(hr.price);
    let dt = grid.dt();
    let n = grid.steps();
    let mut per_policy = Vec::with_capacity(policies.len());
    let mut worst_q99: f64 = 0.0;

    for (pi, (label, pol)) in policies.iter().enumerate() {
        let ens = simulate(
            &ms.family,
            pol,
            grid,
            cfg.paths,
            &[ms.x0],
            cfg.seed.wrapping_add(0x9000 + pi as u64),
        )?;
        let mut shortfalls = Vec::with_capacity(cfg.paths);
        let mut surplus_sum = 0.0;
        let mut short_count = 0usize;
        for m in 0..cfg.paths {
            let mut wealth = y0;
            for k in 0..n {
                let x = ens.state(m, k)[0];
                let z = hr.strategy(k, x);
                let a = ens.a_hat(m, k)[0];
                let b = ens.drift(m, k)[0];
                let zsc = a.max(0.0).sqrt() * z;
                let f = ms
                    .generator
                    .eval(grid.node(k), &[x], wealth, &[zsc], &[a], &[b]);
                let dxc = ens.state(m, k + 1)[0] - x - b * dt;
                wealth += f * dt + z * dxc;
                if !wealth.is_finite() || wealth.abs() > 1e12 {
                    return Err(HedgeError::WealthBlowUp {
                        policy: label.clone(),
                        path: m,
                    });
                }
            }
            let xi = ms.claim.eval(ens.state(m, n));
            let s = (xi - wealth).max(0.0);
            surplus_sum += wealth - xi;
            if s > 0.0 {
                short_count += 1;
            }
            shortfalls.push(s);
        }
        shortfalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| quantile(&shortfalls, p);
        let q99 = q(0.99);
        worst_q99 = worst_q99.max(q99);
        per_policy.push(PolicyShortfall {
            policy: label.clone(),
            mean_surplus: surplus_sum / cfg.paths as f64,
            shortfall_probability: short_count as f64 / cfg.paths as f64,
            q50: q(0.50),
            q95: q(0.95),
            q99,
            max: *shortfalls.last().unwrap(),
        });
    }

    let threshold = cfg.shortfall_fraction * cfg.notional;
    Ok(SuperhedgeReport {
        price: hr.price,
        initial_wealth: y0,
        threshold,
        per_policy,
        worst_q99,
        saturated_family: ms.saturated,
        pass: worst_q99 <= threshold,
    })
}

/// Seeded random feedback policy over the solution's bucket geometry.
fn random_feedback_policy(
    rs: &RobustSolution,
    n_controls: usize,
    steps: usize,
    seed: u64,
) -> ControlPolicy {
    let lo = rs.chain.x[0];
    let hi = rs.chain.x[rs.chain.x.len() - 1];
    let grid = BucketGrid::new(lo, hi, 32);
    let mut rng = PathRng::new(seed, 0xF0);
    let indices = (0..steps)
        .map(|_| {
            (0..grid.n)
                .map(|_| (rng.next_u64() as usize) % n_controls)
                .collect()
        })
        .collect();
    ControlPolicy::Table { grid, indices }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{linear_pricing_generator, zero_generator};
    use crate::pde_oracle::{black_scholes, black_scholes_delta, OptionKind};
    use approx::assert_abs_diff_eq;

    fn market(sigmas: &[f64], claim: TerminalClaim, gen: GeneratorSpec) -> MarketSpec {
        MarketSpec {
            family: DiffusionFamily::uncertain_vol_gbm(sigmas, 0.0).unwrap(),
            generator: gen,
            claim,
            x0: 100.0,
            saturated: true,
        }
    }

    #[test]
    fn constant_claim_prices_at_par_with_null_strategy() {
        let ms = market(&[0.1, 0.2], TerminalClaim::constant(7.0), zero_generator());
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let hr = super_hedging_price(
            &ms,
            grid,
            SolveMode::Lattice,
            &RobustParams::lattice_default(151),
        )
        .unwrap();
        assert_abs_diff_eq!(hr.price, 7.0, epsilon = 1e-10);
        for k in [0, 25, 49] {
            assert!(hr.strategy(k, 100.0).abs() < 1e-9);
        }
        let rep = verify_superhedge(
            &hr,
            &ms,
            grid,
            &HedgeVerifyConfig::new(500, 1, 100.0),
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.worst_q99 < 1e-9, "constant claim hedges exactly");
    }

    #[test]
    fn singleton_market_prices_black_scholes_with_matching_delta() {
        let ms = market(&[0.2], TerminalClaim::call(100.0), zero_generator());
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let hr = super_hedging_price(
            &ms,
            grid,
            SolveMode::Lattice,
            &RobustParams::lattice_default(401),
        )
        .unwrap();
        let bs = black_scholes(100.0, 100.0, 0.2, 0.0, 1.0, OptionKind::Call).unwrap();
        assert!((hr.price - bs).abs() / bs < 5e-3, "{} vs {bs}", hr.price);
        let delta = black_scholes_delta(100.0, 100.0, 0.2, 0.0, 1.0, OptionKind::Call).unwrap();
        let z0 = hr.strategy(0, 100.0);
        assert!(
            (z0 - delta).abs() / delta < 0.02,
            "strategy {z0} vs delta {delta}"
        );
    }

    #[test]
    fn asset_claim_is_replicated_by_buy_and_hold() {
        // Claim = X_T on a driftless market with zero lending rate: the
        // buy-and-hold replication holds a long stock account and never
        // borrows, so the spread term is dead and the price is the spot,
        // whatever the borrowing rate.
        let fam = DiffusionFamily::single_gbm(0.2, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let mut prices = Vec::new();
        for rb in [0.0, 0.05, 0.10] {
            let hr = two_rate_price(
                &fam,
                &TerminalClaim::asset(),
                100.0,
                0.0,
                rb,
                RiskPremium::Zero,
                grid,
                &RobustParams::lattice_default(301),
            )
            .unwrap();
            assert_abs_diff_eq!(hr.price, 100.0, epsilon = 1e-5 * 100.0);
            let z_mid = hr.strategy(50, 100.0);
            assert_abs_diff_eq!(z_mid, 1.0, epsilon = 2e-2);
            prices.push(hr.price);
        }
        assert_abs_diff_eq!(prices[0], prices[2], epsilon = 1e-9);
    }

    #[test]
    fn two_rate_collapse_equals_linear_price_exactly() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.02).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let params = RobustParams::lattice_default(301);
        let claim = TerminalClaim::call(100.0);
        let tr = two_rate_price(
            &fam, &claim, 100.0, 0.03, 0.03, RiskPremium::Zero, grid, &params,
        )
        .unwrap();
        let ms = MarketSpec {
            family: fam.clone(),
            generator: linear_pricing_generator(0.03, RiskPremium::Zero),
            claim,
            x0: 100.0,
            saturated: true,
        };
        let lin = super_hedging_price(&ms, grid, SolveMode::Lattice, &params).unwrap();
        assert!(
            (tr.price - lin.price).abs() <= 1e-12,
            "{} vs {}",
            tr.price,
            lin.price
        );
    }

    #[test]
    fn raising_the_borrow_rate_never_cheapens_the_claim() {
        let fam = DiffusionFamily::single_gbm(0.2, 0.02).unwrap();
        let grid = TimeGrid::new(1.0, 80).unwrap();
        let params = RobustParams::lattice_default(201);
        let claim = TerminalClaim::call(100.0);
        let mut last = f64::NEG_INFINITY;
        for rb in [0.02, 0.04, 0.06] {
            let hr = two_rate_price(
                &fam, &claim, 100.0, 0.02, rb, RiskPremium::Zero, grid, &params,
            )
            .unwrap();
            assert!(hr.price >= last - 1e-10, "rb={rb}: {} < {last}", hr.price);
            last = hr.price;
        }
    }

    #[test]
    fn price_is_monotone_in_the_claim_and_homogeneous() {
        let ms = market(&[0.1, 0.2], TerminalClaim::call(100.0), zero_generator());
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let params = RobustParams::lattice_default(151);
        let base = super_hedging_price(&ms, grid, SolveMode::Lattice, &params)
            .unwrap()
            .price;
        // Pathwise-larger claim.
        let bigger = MarketSpec {
            claim: TerminalClaim::call(95.0),
            ..ms.clone()
        };
        let pb = super_hedging_price(&bigger, grid, SolveMode::Lattice, &params)
            .unwrap()
            .price;
        assert!(pb >= base - 1e-10);
        // Positive homogeneity under the zero driver.
        let scaled = MarketSpec {
            claim: ms.claim.affine(2.5, 0.0),
            ..ms.clone()
        };
        let ps = super_hedging_price(&scaled, grid, SolveMode::Lattice, &params)
            .unwrap()
            .price;
        assert_abs_diff_eq!(ps, 2.5 * base, epsilon = 1e-10 * (1.0 + ps.abs()));
    }

    #[test]
    fn surplus_under_weak_vol_matches_compensator_mass() {
        // Hedging at the worst-case price, the sub-maximal measure banks
        // an average surplus equal to E[K_T].
        let sigmas = [0.1, 0.2];
        let ms = market(&sigmas, TerminalClaim::call(100.0), zero_generator());
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let params = RobustParams::lattice_default(301);
        let hr = super_hedging_price(&ms, grid, SolveMode::Lattice, &params).unwrap();
        let cfg = HedgeVerifyConfig {
            random_policies: 0,
            ..HedgeVerifyConfig::new(4000, 9, 100.0)
        };
        let rep = verify_superhedge(&hr, &ms, grid, &cfg).unwrap();
        let low = &rep.per_policy[0];
        assert_eq!(low.policy, "constant 0.1");
        let ek = hr
            .solution
            .expected_k_total(&ms.family, &ControlPolicy::Constant(0), 0.0)
            .unwrap();
        // Monte Carlo tolerance: the surplus has a vol-of-vol sized spread.
        assert!(
            (low.mean_surplus - ek).abs() < 0.15,
            "surplus {} vs E[K_T] {ek}",
            low.mean_surplus
        );
        assert!(ek > 0.5, "low-vol compensator should be material: {ek}");
    }

    #[test]
    fn underfunded_hedge_shows_shortfall_under_worst_policy() {
        let ms = market(&[0.1, 0.2], TerminalClaim::call(100.0), zero_generator());
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let params = RobustParams::lattice_default(301);
        let hr = super_hedging_price(&ms, grid, SolveMode::Lattice, &params).unwrap();
        let threshold = 0.005 * 100.0;
        let cfg = HedgeVerifyConfig {
            y0_override: Some(hr.price - 5.0 * threshold),
            random_policies: 0,
            ..HedgeVerifyConfig::new(2000, 21, 100.0)
        };
        let rep = verify_superhedge(&hr, &ms, grid, &cfg).unwrap();
        let worst = rep
            .per_policy
            .iter()
            .find(|p| p.policy == "constant 0.2")
            .unwrap();
        assert!(
            worst.shortfall_probability > 0.5,
            "missing funds must show: P(short) = {}",
            worst.shortfall_probability
        );
    }
}
