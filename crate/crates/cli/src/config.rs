//! Experiment configuration files (TOML).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use dynrcm::corrector::Backend;
use dynrcm::env::{EnvironmentModel, TimePeriod};

use crate::RunError;

/// Upper bounds that keep a single run desk-sized.
pub const MAX_WALKERS: usize = 10_000_000;
pub const MAX_SITES: usize = 4096;
pub const MAX_GRID_TIMES: usize = 100_000;
pub const MAX_HORIZON: f64 = 1e7;
/// Walkers times observation times held in memory.
pub const MAX_RECORDED: usize = 50_000_000;
/// Walkers times simulated time.
pub const MAX_WALKER_TIME: f64 = 1e10;
/// Expected switches of a markov-switching field per time period.
pub const MAX_SWITCHES: f64 = 1e7;
pub const MAX_SUBLINEAR_N: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Corrector,
    VerifyQip,
    Sublinearity,
    CheckConditions,
    SobolevTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub model: EnvironmentModel,
    /// Space period `L`.
    pub sites: usize,
    /// Time period `T`; absent for static fields.
    #[serde(default)]
    pub time_period: Option<f64>,
}

impl EnvironmentSpec {
    pub fn period(&self) -> TimePeriod {
        match self.time_period {
            Some(t) => TimePeriod::Periodic(t),
            None => TimePeriod::Static,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub walkers: Option<usize>,
    pub horizon: Option<f64>,
    #[serde(default)]
    pub start_time: f64,
    #[serde(default)]
    pub start_site: i64,
    /// Extra observation times for `simulate`.
    #[serde(default)]
    pub times: Vec<f64>,
    /// Box radii for KS tests and sublinearity profiles.
    #[serde(default)]
    pub n_values: Vec<u32>,
    /// Martingale lags.
    #[serde(default)]
    pub lags: Vec<f64>,
    /// Length of the window over which martingale increments are pooled.
    pub martingale_horizon: Option<f64>,
    /// Ring size per unit of `n` for scaled sublinearity profiles.
    pub sites_per_n: Option<usize>,
    /// Full paths written for the first this-many walkers of `simulate`.
    #[serde(default)]
    pub record_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub solver: f64,
    pub backend: Backend,
    /// Relative tolerance for variance and quadratic-variation matches.
    pub variance_rel: f64,
    /// Standard errors allowed for martingale increments.
    pub martingale_z: f64,
    /// Require a negative log-log slope of sublinearity profiles.
    pub expect_decay: bool,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            solver: dynrcm::corrector::DEFAULT_TOL,
            backend: Backend::Auto,
            variance_rel: 0.03,
            martingale_z: 3.0,
            expect_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionsSpec {
    pub p_range: [f64; 2],
    pub q_range: [f64; 2],
    pub p_steps: usize,
    pub q_steps: usize,
}

impl Default for ConditionsSpec {
    fn default() -> Self {
        Self {
            p_range: [1.1, 6.0],
            q_range: [1.0, 6.0],
            p_steps: 50,
            q_steps: 51,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SobolevSpec {
    pub instances: usize,
    /// Largest box half-width and duration of random test functions.
    pub max_radius: u32,
    pub max_duration: f64,
    pub max_pieces: usize,
}

impl Default for SobolevSpec {
    fn default() -> Self {
        Self {
            instances: 1000,
            max_radius: 5,
            max_duration: 8.0,
            max_pieces: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub environment: Option<EnvironmentSpec>,
    #[serde(default)]
    pub sizes: Sizes,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub conditions: ConditionsSpec,
    #[serde(default)]
    pub sobolev: SobolevSpec,
}

fn bad<T>(msg: impl Into<String>) -> Result<T, RunError> {
    Err(RunError::Config(msg.into()))
}

fn positive(name: &str, v: f64) -> Result<(), RunError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        bad(format!("{name} must be positive and finite, got {v}"))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn environment(&self) -> Result<&EnvironmentSpec, RunError> {
        self.environment
            .as_ref()
            .ok_or_else(|| RunError::Config("missing [environment] section".into()))
    }

    pub fn walkers(&self) -> Result<usize, RunError> {
        self.sizes
            .walkers
            .ok_or_else(|| RunError::Config("missing sizes.walkers".into()))
    }

    pub fn horizon(&self) -> Result<f64, RunError> {
        self.sizes
            .horizon
            .ok_or_else(|| RunError::Config("missing sizes.horizon".into()))
    }

    /// Checks every parameter the experiment will use, before any work starts.
    pub fn validate(&self) -> Result<(), RunError> {
        if let Some(k) = self.threads {
            if k == 0 || k > 1024 {
                return bad(format!("threads must lie in 1..=1024, got {k}"));
            }
        }
        let t = &self.tolerances;
        positive("tolerances.solver", t.solver)?;
        positive("tolerances.variance_rel", t.variance_rel)?;
        positive("tolerances.martingale_z", t.martingale_z)?;
        let s = &self.sizes;
        if !s.start_time.is_finite() {
            return bad("sizes.start_time must be finite");
        }
        if s.n_values.iter().any(|&n| n == 0 || n > 1000) {
            return bad("sizes.n_values must lie in 1..=1000");
        }
        for &h in &s.lags {
            positive("sizes.lags", h)?;
        }
        if let Some(h) = s.horizon {
            positive("sizes.horizon", h)?;
            if h > MAX_HORIZON {
                return bad(format!("sizes.horizon must be at most {MAX_HORIZON}"));
            }
        }
        if let Some(m) = s.martingale_horizon {
            positive("sizes.martingale_horizon", m)?;
        }
        if let Some(w) = s.walkers {
            if w == 0 || w > MAX_WALKERS {
                return bad(format!("sizes.walkers must lie in 1..={MAX_WALKERS}, got {w}"));
            }
        }
        if self.experiment != ExperimentKind::CheckConditions {
            let env = self.environment()?;
            if env.sites < 2 || env.sites > MAX_SITES {
                return bad(format!(
                    "environment.sites must lie in 2..={MAX_SITES}, got {}",
                    env.sites
                ));
            }
            if let Some(p) = env.time_period {
                positive("environment.time_period", p)?;
            }
            if let EnvironmentModel::MarkovSwitching { switch_rate, .. } = env.model {
                let period = env.time_period.unwrap_or(0.0);
                if switch_rate * period * env.sites as f64 > MAX_SWITCHES {
                    return bad("switch_rate * time_period * sites exceeds 1e7 switches");
                }
            }
        }
        match self.experiment {
            ExperimentKind::Simulate => {
                self.walkers()?;
                let h = self.horizon()?;
                if s.times.iter().any(|&t| !(t >= s.start_time && t <= s.start_time + h)) {
                    return bad("sizes.times must lie within [start_time, start_time + horizon]");
                }
                if s.record_paths > 1000 {
                    return bad("sizes.record_paths must be at most 1000");
                }
                self.check_budget(s.times.len() + 1, h)?;
            }
            ExperimentKind::Corrector => {}
            ExperimentKind::VerifyQip => {
                let w = self.walkers()?;
                if w < dynrcm::stats::MIN_VARIANCE_WALKERS {
                    return bad(format!(
                        "verify-qip needs at least {} walkers",
                        dynrcm::stats::MIN_VARIANCE_WALKERS
                    ));
                }
                self.horizon()?;
                let grid = crate::runner::qip_grid(self);
                if grid.len() > MAX_GRID_TIMES {
                    return bad("observation grid is too fine; raise lags or lower martingale_horizon");
                }
                let last = grid.last().expect("grid holds the horizon") - s.start_time;
                self.check_budget(grid.len(), last)?;
            }
            ExperimentKind::Sublinearity => {
                if s.n_values.is_empty() {
                    return bad("sublinearity needs sizes.n_values");
                }
                if s.n_values.iter().any(|&n| n > MAX_SUBLINEAR_N) {
                    return bad(format!("sublinearity box radii must be at most {MAX_SUBLINEAR_N}"));
                }
                if let Some(k) = s.sites_per_n {
                    let largest = *s.n_values.iter().max().expect("nonempty") as usize;
                    if k == 0 || k.saturating_mul(largest) > MAX_SITES {
                        return bad("sizes.sites_per_n times the largest n must lie in 1..=4096");
                    }
                }
            }
            ExperimentKind::CheckConditions => {
                let c = &self.conditions;
                if !(c.p_range[0] > 1.0
                    && c.p_range[1] >= c.p_range[0]
                    && c.q_range[0] >= 1.0
                    && c.q_range[1] >= c.q_range[0]
                    && c.p_range[1].is_finite()
                    && c.q_range[1].is_finite())
                {
                    return bad("conditions ranges need 1 < p_lo <= p_hi and 1 <= q_lo <= q_hi");
                }
                if !(2..=2000).contains(&c.p_steps) || !(2..=2000).contains(&c.q_steps) {
                    return bad("conditions steps must lie in 2..=2000");
                }
            }
            ExperimentKind::SobolevTest => {
                let b = &self.sobolev;
                if b.instances == 0 || b.instances > 1_000_000 {
                    return bad("sobolev.instances must lie in 1..=1000000");
                }
                if b.max_radius == 0 || b.max_radius > 100 {
                    return bad("sobolev.max_radius must lie in 1..=100");
                }
                if !(b.max_duration.is_finite() && b.max_duration > 0.0 && b.max_duration <= 1e4) {
                    return bad("sobolev.max_duration must lie in (0, 1e4]");
                }
                if b.max_pieces == 0 || b.max_pieces > 100 {
                    return bad("sobolev.max_pieces must lie in 1..=100");
                }
            }
        }
        Ok(())
    }

    fn check_budget(&self, times: usize, span: f64) -> Result<(), RunError> {
        let w = self.walkers()?;
        if w.saturating_mul(times) > MAX_RECORDED {
            return bad(format!("walkers * observation times exceeds {MAX_RECORDED}"));
        }
        if w as f64 * span > MAX_WALKER_TIME {
            return bad(format!("walkers * horizon exceeds {MAX_WALKER_TIME}"));
        }
        Ok(())
    }
}
