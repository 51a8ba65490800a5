//! Experiment configuration: a flat TOML file with strict key checking
//! (unknown keys are errors, so typos cannot silently change a run).

use serde::{Deserialize, Serialize};

use crate::solver::InertialSchedule;
use crate::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    L1,
    Group,
    TvAnalysis,
    HaarSynthesis,
    SmoothToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// 1-D double well `F(x) = (x^2 - 1)^2 / 4`: minima at +-1, strict
    /// saddle at 0.
    DoubleWell,
    /// 2-D quadratic with coupling `diag(1, -1)`: strict saddle at 0.
    IndefiniteQuadratic,
    /// 2-D quadratic with coupling `diag(1, 2)`: unique minimizer at 0.
    ConvexQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleModeConfig {
    Bpg,
    Constant,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub n: usize,
    #[serde(default)]
    pub lambda: f64,
    /// Nonzeros (l1) or jump count (tv-analysis, haar-synthesis).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    /// Measurement count override; omitted = recipe for the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurements: Option<usize>,
    /// Scale the Gaussian rows by 1/sqrt(n) so row norms are near 1 (the
    /// regime where the smoothness constant is close to 3).
    #[serde(default)]
    pub normalize_rows: bool,
    /// Wavelet levels for haar-synthesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub haar_levels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub mode: ScheduleModeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_high: Option<f64>,
    /// Switch to a constant value from this iteration on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_at: Option<usize>,
}

fn default_kappa() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// `x0 = amplitude * N(0, I)`.
    Gaussian,
    /// `x0 = planted + amplitude * (|planted|/sqrt(n)) * N(0, I)`: start in
    /// the basin of the planted signal. Quadratic measurements keep only
    /// `m < n` equations here, so a blind Gaussian start generically lands
    /// in a flat spurious valley instead of the signal basin.
    NearPlanted,
}

fn default_init_mode() -> InitMode {
    InitMode::Gaussian
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothnessMode {
    /// Provable row-norm bound `(1/m) sum_j (3|a_j|^4 + |a_j|^2 y_j)`;
    /// very conservative on Gaussian ensembles (steps get tiny).
    Deterministic,
    /// Sampled curvature-ratio sup with margin and verification; matches
    /// the constants the experiments need to move at a useful pace.
    Sampled,
}

fn default_l_mode() -> SmoothnessMode {
    SmoothnessMode::Deterministic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_init_mode")]
    pub init_mode: InitMode,
    #[serde(default = "default_l_mode")]
    pub l_mode: SmoothnessMode,
    #[serde(default = "default_amplitude")]
    pub init_amplitude: f64,
    /// Fixed step size; only meaningful with a constant inertia value
    /// (internally converted to a smoothness constant).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_override: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_override: Option<f64>,
}

fn default_max_iters() -> usize {
    50_000
}
fn default_tol() -> f64 {
    1e-10
}
fn default_amplitude() -> f64 {
    1.0
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            max_iters: default_max_iters(),
            tol: default_tol(),
            init_mode: default_init_mode(),
            l_mode: default_l_mode(),
            init_amplitude: default_amplitude(),
            gamma_override: None,
            l_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub matrix: u64,
    pub signal: u64,
    pub init: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_true")]
    pub identify: bool,
    #[serde(default = "default_true")]
    pub predict_rate: bool,
    #[serde(default)]
    pub descent_report: bool,
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
}

fn default_true() -> bool {
    true
}
fn default_tail() -> f64 {
    0.5
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            identify: true,
            predict_rate: true,
            descent_report: false,
            tail_fraction: default_tail(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_amplitude")]
    pub init_scale: f64,
    #[serde(default = "default_escape_a")]
    pub a: f64,
    #[serde(default = "default_radius")]
    pub classify_radius: f64,
}

fn default_trials() -> usize {
    100
}
fn default_budget() -> usize {
    100_000
}
fn default_escape_a() -> f64 {
    0.9
}
fn default_radius() -> f64 {
    1e-3
}

impl Default for EscapeSection {
    fn default() -> Self {
        EscapeSection {
            trials: default_trials(),
            budget: default_budget(),
            init_scale: default_amplitude(),
            a: default_escape_a(),
            classify_radius: default_radius(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub problem: ProblemSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub seeds: SeedSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape: Option<EscapeSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let p = &self.problem;
        if p.n < 1 {
            return Err(Error::Config("problem.n must be at least 1".into()));
        }
        if p.lambda < 0.0 {
            return Err(Error::Config("problem.lambda must be nonnegative".into()));
        }
        match p.kind {
            ProblemKind::L1 => {
                if p.sparsity.is_none() {
                    return Err(Error::Config("l1 needs problem.sparsity".into()));
                }
            }
            ProblemKind::Group => {
                if p.blocks.is_none() || p.block_size.is_none() {
                    return Err(Error::Config(
                        "group needs problem.blocks and problem.block_size".into(),
                    ));
                }
            }
            ProblemKind::TvAnalysis => {
                if p.sparsity.is_none() {
                    return Err(Error::Config("tv-analysis needs problem.sparsity (jumps)".into()));
                }
            }
            ProblemKind::HaarSynthesis => {
                if p.sparsity.is_none() || p.haar_levels.is_none() {
                    return Err(Error::Config(
                        "haar-synthesis needs problem.sparsity and problem.haar_levels".into(),
                    ));
                }
            }
            ProblemKind::SmoothToy => {
                if p.toy.is_none() {
                    return Err(Error::Config("smooth-toy needs problem.toy".into()));
                }
            }
        }
        let s = &self.schedule;
        if !(s.kappa > 1.0 && s.kappa <= 2.0) {
            return Err(Error::Config(format!(
                "schedule.kappa must lie in (1, 2], got {}",
                s.kappa
            )));
        }
        match s.mode {
            ScheduleModeConfig::Constant => {
                let a = s
                    .a
                    .ok_or_else(|| Error::Config("constant schedule needs schedule.a".into()))?;
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::Config("schedule.a must lie in (0, 1]".into()));
                }
            }
            ScheduleModeConfig::Polynomial => {
                if s.alpha.is_none() {
                    return Err(Error::Config(
                        "polynomial schedule needs schedule.alpha".into(),
                    ));
                }
            }
            ScheduleModeConfig::Bpg => {}
        }
        if self.solver.gamma_override.is_some() {
            if !matches!(
                s.mode,
                ScheduleModeConfig::Bpg | ScheduleModeConfig::Constant
            ) {
                return Err(Error::Config(
                    "solver.gamma_override requires a constant inertia value".into(),
                ));
            }
            if self.solver.l_override.is_some() {
                return Err(Error::Config(
                    "give solver.gamma_override or solver.l_override, not both".into(),
                ));
            }
        }
        if self.solver.tol <= 0.0 || self.solver.max_iters == 0 {
            return Err(Error::Config(
                "solver.tol must be positive and solver.max_iters nonzero".into(),
            ));
        }
        if self.solver.init_mode == InitMode::NearPlanted && p.kind == ProblemKind::SmoothToy {
            return Err(Error::Config(
                "init_mode = \"near-planted\" needs a planted-signal problem".into(),
            ));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<InertialSchedule> {
        let s = &self.schedule;
        let mut schedule = match s.mode {
            ScheduleModeConfig::Bpg => InertialSchedule::bpg(),
            ScheduleModeConfig::Constant => InertialSchedule::constant(s.a.unwrap())?,
            ScheduleModeConfig::Polynomial => InertialSchedule::polynomial(s.alpha.unwrap())?,
        };
        if let Some(lo) = s.a_low {
            schedule.a_low = lo;
        }
        if let Some(hi) = s.a_high {
            schedule.a_high = hi;
        }
        schedule.freeze_at = s.freeze_at;
        Ok(schedule)
    }

    /// The constant inertia value the run settles on (used for the local
    /// model and the gamma override).
    pub fn terminal_inertia(&self) -> f64 {
        match self.schedule.mode {
            ScheduleModeConfig::Bpg => 1.0,
            ScheduleModeConfig::Constant => self.schedule.a.unwrap_or(1.0),
            ScheduleModeConfig::Polynomial => {
                let schedule = self
                    .build_schedule()
                    .expect("validated schedule always builds");
                schedule.value(self.schedule.freeze_at.unwrap_or(usize::MAX - 1))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
schema_version = 1

[problem]
kind = "l1"
n = 32
sparsity = 4
lambda = 1e-5

[schedule]
mode = "bpg"

[seeds]
matrix = 1
signal = 2
init = 3
"#;

    #[test]
    fn parse_and_roundtrip() {
        let config = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(config.problem.kind, ProblemKind::L1);
        assert_eq!(config.solver.max_iters, 50_000);
        let echoed = config.to_toml();
        let back = ExperimentConfig::from_toml(&echoed).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SAMPLE.replace("lambda = 1e-5", "lambda = 1e-5\nlamda_typo = 2.0");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn schema_version_gate() {
        let bad = SAMPLE.replace("schema_version = 1", "schema_version = 9");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn kind_specific_validation() {
        let bad = SAMPLE.replace("sparsity = 4\n", "");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let group = SAMPLE
            .replace("kind = \"l1\"", "kind = \"group\"")
            .replace("sparsity = 4", "blocks = 2\nblock_size = 4");
        assert!(ExperimentConfig::from_toml(&group).is_ok());
    }

    #[test]
    fn gamma_override_needs_constant_inertia() {
        let poly = SAMPLE.replace(
            "mode = \"bpg\"",
            "mode = \"polynomial\"\nalpha = 3.0",
        );
        let with_gamma = poly.replace(
            "[seeds]",
            "[solver]\ngamma_override = 0.33\n\n[seeds]",
        );
        assert!(ExperimentConfig::from_toml(&with_gamma).is_err());
    }
}
