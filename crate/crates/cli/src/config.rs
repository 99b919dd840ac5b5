//! TOML experiment configuration.
//!
//! A config is a set of named blocks. Which blocks are required depends on the
//! experiment kind; optional blocks fall back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wqcp_core::cost::{make_exponential_cost, make_inadmissible_reciprocal_cost, make_reciprocal_cost, CostFunction};
use wqcp_core::diffusion::DominanceBudget;
use wqcp_core::estimate::MonteCarloConfig;
use wqcp_core::hjb::{DcpParams, ShootingConfig};
use wqcp_core::queue::{Patience, ServiceDist};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SweepWr,
    Solve,
    VerifyDcp,
    ConvergeQcp,
    ConjugateTable,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::SweepWr => "sweep_wr",
            ExperimentKind::Solve => "solve",
            ExperimentKind::VerifyDcp => "verify_dcp",
            ExperimentKind::ConvergeQcp => "converge_qcp",
            ExperimentKind::ConjugateTable => "conjugate_table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcpBlock {
    pub sigma: f64,
    pub theta: f64,
    pub alpha: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostBlock {
    Exponential { beta: f64 },
    /// `1/(u+1)`.
    ReciprocalShifted,
    /// `1/u`; only accepted by `conjugate_table` with `allow_inadmissible`.
    Reciprocal {
        #[serde(default)]
        allow_inadmissible: bool,
    },
}

impl CostBlock {
    pub fn build(&self) -> CliResult<CostFunction> {
        match *self {
            CostBlock::Exponential { beta } => make_exponential_cost(beta).map_err(|e| CliError::field("cost.beta", e)),
            CostBlock::ReciprocalShifted => Ok(make_reciprocal_cost()),
            CostBlock::Reciprocal { allow_inadmissible: true } => Ok(make_inadmissible_reciprocal_cost()),
            CostBlock::Reciprocal { allow_inadmissible: false } => Err(CliError::Config(
                "cost.family: `reciprocal` is unbounded at zero; set `allow_inadmissible = true` for tables".into(),
            )),
        }
    }
}

/// Overrides for the shooting solver; unset fields use the solver defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootingBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_zero_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueBlock {
    pub n: Vec<u32>,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default = "default_service")]
    pub service: ServiceDist,
    /// Defaults to uniform patience with the drift's `theta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<Patience>,
    /// Overrides `monte_carlo.n_paths` for queue runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default = "default_true")]
    pub include_zero_control: bool,
}

fn default_epsilon0() -> f64 {
    0.1
}

fn default_service() -> ServiceDist {
    ServiceDist::Deterministic
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub se_multiplier: f64,
    /// Allowed bias of the feedback estimate against `Q(x0)`.
    pub feedback_abs: f64,
    pub alternative_slack: f64,
    pub fubini_se: f64,
    /// Allowed final-n gap of the queue estimate.
    pub queue_abs: f64,
    pub idle_ratio_max: f64,
    pub conjugate_abs: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            se_multiplier: 3.0,
            feedback_abs: 0.02,
            alternative_slack: 0.0,
            fubini_se: 2.0,
            queue_abs: 0.05,
            idle_ratio_max: 3.0,
            conjugate_abs: 1e-5,
        }
    }
}

impl Budgets {
    pub fn dominance(&self) -> DominanceBudget {
        DominanceBudget {
            feedback_abs: self.feedback_abs,
            alternative_slack: self.alternative_slack,
            se_multiplier: self.se_multiplier,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Keep every `stride`-th grid point in trajectory CSVs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    /// Explicit ascending shooting slopes; empty means seven values around `r*`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyBlock {
    pub x0: f64,
    /// Constant controls compared against the feedback policy, besides zero.
    pub constants: Vec<f64>,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self {
            x0: 0.0,
            constants: vec![4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConjugateBlock {
    pub points: usize,
    /// Defaults to `2 C'(0)`, which must then be finite.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_min: Option<f64>,
    pub y_max: f64,
    pub grid: usize,
}

impl Default for ConjugateBlock {
    fn default() -> Self {
        Self {
            points: 200,
            y_min: None,
            y_max: -1e-3,
            grid: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dcp: Option<DcpBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostBlock>,
    #[serde(default)]
    pub shooting: ShootingBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<QueueBlock>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default)]
    pub conjugate: ConjugateBlock,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Resolves the experiment kind from the subcommand and the config.
    pub fn resolve_kind(&mut self, requested: ExperimentKind) -> CliResult<()> {
        match self.experiment {
            Some(kind) if kind != requested => Err(CliError::Config(format!(
                "experiment: config declares `{}` but `{}` was requested",
                kind.as_str(),
                requested.as_str()
            ))),
            _ => {
                self.experiment = Some(requested);
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> CliResult<ExperimentKind> {
        self.experiment
            .ok_or_else(|| CliError::Config("experiment: no experiment kind given".into()))
    }

    fn require<'a, T>(block: &'a Option<T>, name: &str, kind: ExperimentKind) -> CliResult<&'a T> {
        block
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("{name}: block is required for `{}`", kind.as_str())))
    }

    pub fn dcp_params(&self) -> CliResult<DcpParams> {
        let kind = self.kind()?;
        let dcp = Self::require(&self.dcp, "dcp", kind)?;
        let cost = Self::require(&self.cost, "cost", kind)?.build()?;
        DcpParams::new(dcp.sigma, dcp.theta, dcp.alpha, dcp.p, cost).map_err(|e| CliError::field("dcp", e))
    }

    pub fn shooting_config(&self, params: &DcpParams) -> CliResult<ShootingConfig> {
        let mut cfg = ShootingConfig::for_params(params);
        let b = &self.shooting;
        if let Some(v) = b.step {
            cfg.step = v;
        }
        if let Some(v) = b.x_max {
            cfg.x_max = v;
        }
        if let Some(v) = b.r_tolerance {
            cfg.r_tolerance = v;
        }
        if let Some(v) = b.w_zero_tolerance {
            cfg.w_zero_tolerance = v;
        }
        if let Some(v) = b.delta {
            cfg.delta = v;
        }
        if let Some(v) = b.residual_tolerance {
            cfg.residual_tolerance = v;
        }
        cfg.validate(params).map_err(|e| CliError::field("shooting", e))?;
        Ok(cfg)
    }

    pub fn monte_carlo(&self) -> CliResult<&MonteCarloConfig> {
        let mc = Self::require(&self.monte_carlo, "monte_carlo", self.kind()?)?;
        mc.validate().map_err(|e| CliError::field("monte_carlo", e))?;
        Ok(mc)
    }

    pub fn queue(&self) -> CliResult<&QueueBlock> {
        let q = Self::require(&self.queue, "queue", self.kind()?)?;
        if q.n.len() < 3 {
            return Err(CliError::Config("queue.n: need at least 3 entries".into()));
        }
        if q.n.windows(2).any(|w| w[0] >= w[1]) || q.n[0] == 0 {
            return Err(CliError::Config("queue.n: must be positive and strictly ascending".into()));
        }
        if !(q.epsilon0 > 0.0 && q.epsilon0 < 1.0) {
            return Err(CliError::Config("queue.epsilon0: must lie in (0, 1)".into()));
        }
        if !(q.x0 >= 0.0) {
            return Err(CliError::Config("queue.x0: must be >= 0".into()));
        }
        if q.n_paths.is_some_and(|n| n < 2) {
            return Err(CliError::Config("queue.n_paths: must be at least 2".into()));
        }
        Ok(q)
    }

    /// Checks that every block the experiment reads is present and valid.
    pub fn validate(&self) -> CliResult<()> {
        let kind = self.kind()?;
        match kind {
            ExperimentKind::ConjugateTable => {
                let cost = Self::require(&self.cost, "cost", kind)?.build()?;
                let c = &self.conjugate;
                if c.y_min.is_none() && !cost.slope_at_zero().is_finite() {
                    return Err(CliError::Config(
                        "conjugate.y_min: required when C'(0) is unbounded".into(),
                    ));
                }
                if c.points < 2 {
                    return Err(CliError::Config("conjugate.points: need at least 2".into()));
                }
                if c.grid < 2 {
                    return Err(CliError::Config("conjugate.grid: need at least 2".into()));
                }
                if !(c.y_max < 0.0) {
                    return Err(CliError::Config("conjugate.y_max: must be negative".into()));
                }
                if let Some(lo) = c.y_min {
                    if !(lo < c.y_max) {
                        return Err(CliError::Config("conjugate.y_min: must be below y_max".into()));
                    }
                }
                return Ok(());
            }
            _ => {
                let params = self.dcp_params()?;
                self.shooting_config(&params)?;
            }
        }
        if kind == ExperimentKind::SweepWr {
            let r = &self.sweep.r;
            if r.iter().any(|v| !(*v >= 0.0)) || r.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(CliError::Config("sweep.r: must be non-negative and strictly ascending".into()));
            }
        }
        if matches!(kind, ExperimentKind::VerifyDcp | ExperimentKind::ConvergeQcp) {
            self.monte_carlo()?;
        }
        if kind == ExperimentKind::VerifyDcp {
            let v = &self.verify;
            if !(v.x0 >= 0.0) {
                return Err(CliError::Config("verify.x0: must be >= 0".into()));
            }
            if v.constants.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
                return Err(CliError::Config("verify.constants: must be finite and >= 0".into()));
            }
            if v.constants.is_empty() {
                return Err(CliError::Config(
                    "verify.constants: need at least one constant besides zero control".into(),
                ));
            }
        }
        if kind == ExperimentKind::ConvergeQcp {
            self.queue()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VERIFY: &str = r#"
experiment = "verify_dcp"

[dcp]
sigma = 1.0
theta = 0.5
alpha = 0.5
p = 1.0

[cost]
family = "exponential"
beta = 5.0

[monte_carlo]
dt = 0.001
horizon = 40.0
n_paths = 1000
base_seed = 7
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(VERIFY).unwrap();
        assert_eq!(cfg.kind().unwrap(), ExperimentKind::VerifyDcp);
        cfg.validate().unwrap();
        assert_eq!(cfg.verify.constants, vec![4.0]);
        assert_eq!(cfg.monte_carlo.as_ref().unwrap().local_time_bound, 10.0);
    }

    #[test]
    fn missing_block_names_the_field() {
        let mut cfg = ExperimentConfig::from_toml(VERIFY).unwrap();
        cfg.monte_carlo = None;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("monte_carlo"), "{err}");
    }

    #[test]
    fn bad_value_names_the_field() {
        let text = VERIFY.replace("alpha = 0.5", "alpha = -1.0");
        let err = ExperimentConfig::from_toml(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("dcp") && err.contains("alpha"), "{err}");
        let text = VERIFY.replace("dt = 0.001", "dt = 0.0");
        let err = ExperimentConfig::from_toml(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("monte_carlo") && err.contains("dt"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = VERIFY.replace("p = 1.0", "p = 1.0\nrho = 2.0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn kind_conflict_is_an_error() {
        let mut cfg = ExperimentConfig::from_toml(VERIFY).unwrap();
        assert!(cfg.resolve_kind(ExperimentKind::Solve).is_err());
        assert!(cfg.resolve_kind(ExperimentKind::VerifyDcp).is_ok());
    }

    #[test]
    fn inadmissible_cost_needs_the_flag() {
        let text = "experiment = \"conjugate_table\"\n[cost]\nfamily = \"reciprocal\"\n[conjugate]\ny_min = -4.0\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::from_toml(&text.replace("\"reciprocal\"", "\"reciprocal\"\nallow_inadmissible = true"))
            .unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn queue_list_must_be_ascending() {
        let base = VERIFY.replace("verify_dcp", "converge_qcp");
        let cfg = ExperimentConfig::from_toml(&format!("{base}\n[queue]\nn = [25, 100, 400]\n")).unwrap();
        cfg.validate().unwrap();
        let cfg = ExperimentConfig::from_toml(&format!("{base}\n[queue]\nn = [100, 25, 400]\n")).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("queue.n"));
        let cfg = ExperimentConfig::from_toml(&format!("{base}\n[queue]\nn = [25, 100]\n")).unwrap();
        assert!(cfg.validate().is_err());
    }
}
