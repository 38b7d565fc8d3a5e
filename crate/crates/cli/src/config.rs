//! Scenario files.
//!
//! Every key has a default, so an empty file is the default scenario. Keys
//! carry their units as suffixes (`_hr`, `_lph`, `_ppb`, ...).

use std::fmt;
use std::path::{Path, PathBuf};

use ionctl_core::model::ProcessParams;
use ionctl_core::solver::SolverConfig;
use ionctl_core::uncertainty::UncertaintySpec;
use ionctl_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Simulate,
    Moments,
    OptimizeDet,
    OptimizeStoch,
    Ensemble,
    Compare,
    McCompare,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Simulate,
        Mode::Moments,
        Mode::OptimizeDet,
        Mode::OptimizeStoch,
        Mode::Ensemble,
        Mode::Compare,
        Mode::McCompare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Moments => "moments",
            Mode::OptimizeDet => "optimize-det",
            Mode::OptimizeStoch => "optimize-stoch",
            Mode::Ensemble => "ensemble",
            Mode::Compare => "compare",
            Mode::McCompare => "mc-compare",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown mode `{s}`, expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Constant flow; the solver's `q_start_lph` when absent.
    pub flow_lph: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsSection {
    pub flow_lph: Option<f64>,
    pub t_end_hr: f64,
    pub n_grid: usize,
    pub quadrature_points: usize,
}

impl Default for MomentsSection {
    fn default() -> Self {
        Self {
            flow_lph: None,
            t_end_hr: 400.0,
            n_grid: 40_000,
            quadrature_points: 40_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItoSection {
    pub n_paths: usize,
    pub eta_per_hr: f64,
}

impl Default for ItoSection {
    fn default() -> Self {
        Self {
            n_paths: 100,
            eta_per_hr: 1.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKind {
    #[default]
    Tabulated,
    StateProportional,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StochasticSection {
    pub diffusion: DiffusionKind,
    /// c_k in g_k = c_k·y_k for the state-proportional model.
    pub proportional_coeffs: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McCompareSection {
    pub n_runs: usize,
    /// Keep members that hit the iteration cap in the envelope.
    pub include_unconverged: bool,
}

impl Default for McCompareSection {
    fn default() -> Self {
        Self {
            n_runs: 100,
            include_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: Mode,
    /// Seed for every random draw; overrides `uncertainty.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub process: ProcessParams,
    pub solver: SolverConfig,
    pub uncertainty: UncertaintySpec,
    pub simulate: SimulateSection,
    pub moments: MomentsSection,
    pub ito: ItoSection,
    pub stochastic: StochasticSection,
    pub mc_compare: McCompareSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            process: ProcessParams::default(),
            solver: SolverConfig::default(),
            uncertainty: UncertaintySpec::default(),
            simulate: SimulateSection::default(),
            moments: MomentsSection::default(),
            ito: ItoSection::default(),
            stochastic: StochasticSection::default(),
            mc_compare: McCompareSection::default(),
        }
    }
}

/// One invalid setting, addressed by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n{}", format_items(.0))]
    Invalid(Vec<FieldError>),
}

fn format_items(items: &[FieldError]) -> String {
    items
        .iter()
        .map(|e| format!("  - {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn field_error(section: &str, e: CoreError) -> FieldError {
    match e {
        CoreError::InvalidParameter { field, reason } => FieldError {
            path: format!("{section}.{field}"),
            message: reason,
        },
        CoreError::NonPositiveRate { flow, kt } => FieldError {
            path: format!("{section}.kt_alpha"),
            message: format!("K_T = {kt} is not positive at flow bound {flow} L/hr"),
        },
        other => FieldError {
            path: section.to_string(),
            message: other.to_string(),
        },
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    /// First 16 hex digits of the SHA-256 of the normalized TOML, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let normalized = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(normalized.to_toml_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// The uncertainty block with the scenario seed applied.
    pub fn uncertainty_spec(&self) -> UncertaintySpec {
        UncertaintySpec {
            seed: self.seed,
            ..self.uncertainty.clone()
        }
    }

    pub fn validation_errors(&self) -> Vec<FieldError> {
        let mut errs: Vec<FieldError> = Vec::new();
        let process_errs = self.process.validation_errors();
        let process_ok = process_errs.is_empty();
        errs.extend(process_errs.into_iter().map(|e| field_error("process", e)));
        if process_ok {
            errs.extend(
                self.solver
                    .validation_errors(&self.process)
                    .into_iter()
                    .map(|e| field_error("solver", e)),
            );
        }
        errs.extend(
            self.uncertainty
                .validation_errors()
                .into_iter()
                .map(|e| field_error("uncertainty", e)),
        );
        if self.uncertainty.seed != 0 && self.uncertainty.seed != self.seed {
            errs.push(FieldError {
                path: "uncertainty.seed".into(),
                message: "set the top-level `seed` instead".into(),
            });
        }
        let p = &self.process;
        for (path, flow) in [
            ("simulate.flow_lph", self.simulate.flow_lph),
            ("moments.flow_lph", self.moments.flow_lph),
        ] {
            if let Some(q) = flow {
                if !(q >= p.q_min_lph && q <= p.q_max_lph) {
                    errs.push(FieldError {
                        path: path.into(),
                        message: format!("{q} is outside [{}, {}]", p.q_min_lph, p.q_max_lph),
                    });
                }
            }
        }
        if !(self.moments.t_end_hr.is_finite() && self.moments.t_end_hr > 0.0) {
            errs.push(FieldError {
                path: "moments.t_end_hr".into(),
                message: "must be positive".into(),
            });
        }
        if self.moments.n_grid == 0 {
            errs.push(FieldError {
                path: "moments.n_grid".into(),
                message: "must be positive".into(),
            });
        }
        if self.moments.quadrature_points < ionctl_core::moments::MIN_QUADRATURE_POINTS {
            errs.push(FieldError {
                path: "moments.quadrature_points".into(),
                message: format!(
                    "must be at least {}",
                    ionctl_core::moments::MIN_QUADRATURE_POINTS
                ),
            });
        }
        if self.ito.n_paths == 0 {
            errs.push(FieldError {
                path: "ito.n_paths".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(self.ito.eta_per_hr > 0.0) {
            errs.push(FieldError {
                path: "ito.eta_per_hr".into(),
                message: "must be positive".into(),
            });
        }
        if self.stochastic.proportional_coeffs.iter().any(|c| !c.is_finite()) {
            errs.push(FieldError {
                path: "stochastic.proportional_coeffs".into(),
                message: "must be finite".into(),
            });
        }
        if self.mc_compare.n_runs < 2 {
            errs.push(FieldError {
                path: "mc_compare.n_runs".into(),
                message: "must be at least 2".into(),
            });
        }
        if self.output_dir.as_os_str().is_empty() {
            errs.push(FieldError {
                path: "output_dir".into(),
                message: "must not be empty".into(),
            });
        }
        errs
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}
