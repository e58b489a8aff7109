//! Experiment configuration: schema, validation, and instance building.
//!
//! One TOML file describes the market (diffusion family under
//! uncertainty), the claim, the wealth driver, the numerical knobs, and
//! the task to run. Validation failures are reported with the offending
//! field; unknown enumeration values list the accepted names.

use anyhow::{anyhow, bail, Result};
use serde::Deserialize;

use rbsde::bsde_solver::{BasisKind, RegressionBasis};
use rbsde::generators::{
    linear_pricing_generator, two_rate_generator, zero_generator, GeneratorSpec, RiskPremium,
    TerminalClaim,
};
use rbsde::market_paths::{DiffusionFamily, TimeGrid};
use rbsde::robust_2bsde::{RobustParams, SolveMode};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub market: MarketBlock,
    pub claim: ClaimBlock,
    #[serde(default)]
    pub generator: GeneratorBlock,
    pub numerics: NumericsBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    pub kind: String,
    #[serde(default)]
    pub sigmas: Vec<f64>,
    pub sigma: Option<f64>,
    #[serde(default)]
    pub mu_rate: f64,
    pub x0: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimBlock {
    pub kind: String,
    pub strike: Option<f64>,
    pub strikes: Option<[f64; 3]>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBlock {
    #[serde(default = "default_gen_kind")]
    pub kind: String,
    pub rate: Option<f64>,
    pub rate_lend: Option<f64>,
    pub rate_borrow: Option<f64>,
    #[serde(default = "default_premium")]
    pub premium: String,
    pub premium_sup: Option<f64>,
}

impl Default for GeneratorBlock {
    fn default() -> Self {
        Self {
            kind: default_gen_kind(),
            rate: None,
            rate_lend: None,
            rate_borrow: None,
            premium: default_premium(),
            premium_sup: None,
        }
    }
}

fn default_gen_kind() -> String {
    "zero".into()
}

fn default_premium() -> String {
    "zero".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsBlock {
    #[serde(default = "default_mode")]
    pub mode: String,
    pub steps: usize,
    #[serde(default = "default_nodes")]
    pub space_nodes: usize,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
}

fn default_mode() -> String {
    "lattice".into()
}
fn default_nodes() -> usize {
    301
}
fn default_picard_tol() -> f64 {
    1e-12
}
fn default_degree() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    pub suite: Option<String>,
    /// Shortfall cap for the forward hedge check, as a fraction of `x0`.
    pub hedge_threshold: Option<f64>,
    /// Paths per policy in the forward hedge check.
    pub hedge_paths: Option<usize>,
}

/// Fully validated, solver-ready instance.
pub struct Instance {
    pub task: Task,
    pub family: DiffusionFamily,
    pub claim: TerminalClaim,
    pub generator: GeneratorSpec,
    pub grid: TimeGrid,
    pub mode: SolveMode,
    pub params: RobustParams,
    pub x0: f64,
    pub suite: Option<String>,
    pub hedge_threshold: f64,
    pub hedge_paths: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    SolveBsde,
    RobustValue,
    Price,
    Verify,
}

pub const TASKS: &[&str] = &["solve-bsde", "robust-value", "price", "verify"];
pub const MARKETS: &[&str] = &["uvm", "single-gbm", "arithmetic"];
pub const CLAIMS: &[&str] = &["call", "put", "butterfly", "constant", "asset"];
pub const GENERATORS: &[&str] = &["zero", "linear", "two-rate"];
pub const SUITES: &[&str] = &["fast", "full"];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("config error: {e}"))
    }

    /// Validates the schema and builds the solver inputs. `seed_override`
    /// and `mode_override` come from the command line.
    pub fn build(
        &self,
        seed_override: Option<u64>,
        mode_override: Option<&str>,
    ) -> Result<Instance> {
        let task = match self.task.as_str() {
            "solve-bsde" => Task::SolveBsde,
            "robust-value" => Task::RobustValue,
            "price" => Task::Price,
            "verify" => Task::Verify,
            other => bail!("config error: unknown task '{other}'; valid tasks: {TASKS:?}"),
        };

        if !(self.market.x0.is_finite() && self.market.x0 > 0.0) {
            bail!("config error: market.x0 must be positive, got {}", self.market.x0);
        }
        if !(self.market.horizon > 0.0) {
            bail!(
                "config error: market.horizon must be positive, got {}",
                self.market.horizon
            );
        }
        let family = match self.market.kind.as_str() {
            "uvm" => {
                if self.market.sigmas.is_empty() {
                    bail!("config error: market.sigmas must be non-empty for kind 'uvm'");
                }
                DiffusionFamily::uncertain_vol_gbm(&self.market.sigmas, self.market.mu_rate)?
            }
            "single-gbm" => {
                let sigma = self
                    .market
                    .sigma
                    .ok_or_else(|| anyhow!("config error: market.sigma required for 'single-gbm'"))?;
                DiffusionFamily::single_gbm(sigma, self.market.mu_rate)?
            }
            "arithmetic" => {
                if self.market.sigmas.is_empty() {
                    bail!("config error: market.sigmas must be non-empty for kind 'arithmetic'");
                }
                DiffusionFamily::arithmetic(&self.market.sigmas, self.market.mu_rate)?
            }
            other => bail!(
                "config error: unknown market kind '{other}'; valid kinds: {MARKETS:?}"
            ),
        };

        let claim = match self.claim.kind.as_str() {
            "call" => TerminalClaim::call(
                self.claim
                    .strike
                    .ok_or_else(|| anyhow!("config error: claim.strike required for 'call'"))?,
            ),
            "put" => TerminalClaim::put(
                self.claim
                    .strike
                    .ok_or_else(|| anyhow!("config error: claim.strike required for 'put'"))?,
            ),
            "butterfly" => {
                let ks = self.claim.strikes.ok_or_else(|| {
                    anyhow!("config error: claim.strikes = [k1, k2, k3] required for 'butterfly'")
                })?;
                TerminalClaim::butterfly(ks[0], ks[1], ks[2])
            }
            "constant" => TerminalClaim::constant(
                self.claim
                    .value
                    .ok_or_else(|| anyhow!("config error: claim.value required for 'constant'"))?,
            ),
            "asset" => TerminalClaim::asset(),
            other => bail!(
                "config error: unknown claim kind '{other}'; valid kinds: {CLAIMS:?}"
            ),
        };

        let premium = match self.generator.premium.as_str() {
            "zero" => RiskPremium::Zero,
            "market" => RiskPremium::MarketPrice {
                rate: self.generator.rate.or(self.generator.rate_lend).unwrap_or(0.0),
                sup: self.generator.premium_sup.unwrap_or(1.0),
            },
            other => bail!(
                "config error: unknown premium '{other}'; valid values: [\"zero\", \"market\"]"
            ),
        };
        let generator = match self.generator.kind.as_str() {
            "zero" => zero_generator(),
            "linear" => {
                let r = self
                    .generator
                    .rate
                    .ok_or_else(|| anyhow!("config error: generator.rate required for 'linear'"))?;
                linear_pricing_generator(r, premium)
            }
            "two-rate" => {
                let rl = self.generator.rate_lend.ok_or_else(|| {
                    anyhow!("config error: generator.rate_lend required for 'two-rate'")
                })?;
                let rb = self.generator.rate_borrow.ok_or_else(|| {
                    anyhow!("config error: generator.rate_borrow required for 'two-rate'")
                })?;
                two_rate_generator(rl, rb, premium)?
            }
            other => bail!(
                "config error: unknown generator kind '{other}'; valid kinds: {GENERATORS:?}"
            ),
        };

        let grid = TimeGrid::new(self.market.horizon, self.numerics.steps)?;
        if self.numerics.picard_tol <= 0.0 {
            bail!(
                "config error: numerics.picard_tol must be positive, got {}",
                self.numerics.picard_tol
            );
        }

        let mode_str = mode_override.unwrap_or(self.numerics.mode.as_str());
        let mode = match mode_str {
            "lattice" => SolveMode::Lattice,
            "path" => SolveMode::Path,
            other => bail!(
                "config error: unknown mode '{other}'; valid modes: [\"lattice\", \"path\"]"
            ),
        };

        let seed = seed_override.or(self.numerics.seed);
        let needs_mc = mode == SolveMode::Path
            || task == Task::SolveBsde
            || task == Task::Price
            || task == Task::Verify;
        if needs_mc && seed.is_none() {
            bail!("config error: numerics.seed is mandatory for Monte Carlo tasks");
        }
        let paths = self.numerics.paths.unwrap_or(0);
        if (mode == SolveMode::Path || task == Task::SolveBsde) && paths == 0 {
            bail!("config error: numerics.paths is required for path-mode tasks");
        }

        let mut params = RobustParams::lattice_default(self.numerics.space_nodes);
        params.picard_tol = self.numerics.picard_tol;
        params.paths = paths;
        params.seed = seed.unwrap_or(0);
        params.basis = RegressionBasis {
            kind: BasisKind::Polynomial {
                degree: self.numerics.basis_degree,
            },
            ridge: 1e-9,
        };

        let suite = self.verify.suite.clone();
        if task == Task::Verify {
            match suite.as_deref() {
                Some("fast") | Some("full") => {}
                Some(other) => {
                    bail!("config error: unknown suite '{other}'; valid suites: {SUITES:?}")
                }
                None => bail!("config error: verify.suite required for task 'verify'"),
            }
        }

        Ok(Instance {
            task,
            family,
            claim,
            generator,
            grid,
            mode,
            params,
            x0: self.market.x0,
            suite,
            hedge_threshold: self.verify.hedge_threshold.unwrap_or(0.005),
            hedge_paths: self.verify.hedge_paths.unwrap_or(2000),
        })
    }
}
