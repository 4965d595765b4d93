//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use hamflow_core::manifold::{CoverageSettings, ManifoldSettings};
use hamflow_core::ocp::{BvpSettings, InfiniteCostSettings};
use hamflow_core::systems::{example_system, ExampleParams, ExprSystem, PluginSpec, ScaledPenalty, SystemRef};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub penalty: PenaltySpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub inspect: InspectSpec,
    #[serde(default)]
    pub manifold: ManifoldSpec,
    #[serde(default)]
    pub turnpike: Option<TurnpikeSpec>,
    #[serde(default)]
    pub simulate: Option<SimulateSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// One of the built-in examples.
    Example {
        name: String,
        #[serde(default)]
        params: ExampleParams,
    },
    /// Expression file, resolved relative to the config file.
    Plugin { path: PathBuf },
    /// `f = Ax`, `g = B`, `h = ½|Cx|²`, matrices as lists of rows.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
    },
}

/// Which quadratic convention the penalty follows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyConvention {
    /// `h` as defined by the system, `½|Cx|²` for the quadratic ones.
    #[default]
    Half,
    /// `h` doubled, i.e. `|Cx|²`.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltySpec {
    pub convention: PenaltyConvention,
    /// Extra positive factor on `h`.
    pub weight: f64,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        Self {
            convention: PenaltyConvention::Half,
            weight: 1.0,
        }
    }
}

impl PenaltySpec {
    pub fn factor(&self) -> f64 {
        self.weight
            * match self.convention {
                PenaltyConvention::Half => 1.0,
                PenaltyConvention::Full => 2.0,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub integrator: f64,
    pub manifold: f64,
    pub bvp: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            integrator: 1e-10,
            manifold: 1e-10,
            bvp: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectSpec {
    pub growth_r0: f64,
    pub growth_ratio: f64,
    pub growth_shells: usize,
    pub growth_samples: usize,
}

impl Default for InspectSpec {
    fn default() -> Self {
        Self {
            growth_r0: 4.0,
            growth_ratio: 2.0,
            growth_shells: 8,
            growth_samples: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartSelection {
    Stable,
    Unstable,
}

/// Rectangular grid with `counts[i]` points from `lower[i]` to `upper[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn points(&self) -> Vec<DVector<f64>> {
        let axes: Vec<Vec<f64>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .zip(&self.counts)
            .map(|((lo, hi), &k)| match k {
                0 => Vec::new(),
                1 => vec![0.5 * (lo + hi)],
                _ => (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect(),
            })
            .collect();
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out.into_iter().map(DVector::from_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSpec {
    pub charts: Vec<ChartSelection>,
    pub settings: ManifoldSettings,
    pub coverage: CoverageSettings,
    /// Explicit query points, checked in addition to the grid.
    pub queries: Vec<Vec<f64>>,
    pub grid: Option<GridSpec>,
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        Self {
            charts: vec![ChartSelection::Stable],
            settings: ManifoldSettings::default(),
            coverage: CoverageSettings::default(),
            queries: Vec::new(),
            grid: None,
        }
    }
}

impl ManifoldSpec {
    pub fn query_points(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.queries.iter().map(|q| DVector::from_column_slice(q)).collect();
        if let Some(g) = &self.grid {
            out.extend(g.points());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnpikeSpec {
    pub x0: Vec<f64>,
    pub xf: Vec<f64>,
    pub horizons: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub warm_start: bool,
    /// Cross-check `x0` and `xf` against manifold coverage.
    #[serde(default)]
    pub check_sufficient: bool,
    #[serde(default = "default_uniformity_bound")]
    pub uniformity_bound: f64,
    #[serde(default)]
    pub bvp: BvpSettings,
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_uniformity_bound() -> f64 {
    1.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Zero,
    Backstepping,
    Manifold,
    Lqr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub x0: Vec<f64>,
    pub t_final: f64,
    pub feedback: FeedbackKind,
    /// Also estimate the cost on `[0, ∞)` with a quadratic tail.
    #[serde(default)]
    pub infinite_horizon: bool,
    #[serde(default)]
    pub tail: InfiniteCostSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("hamflow-out"),
            formats: vec![OutputFormat::Json, OutputFormat::Csv],
        }
    }
}

impl OutputSpec {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("system.linear.{name}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    /// Parses and validates; `base` resolves relative file references.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            CliError::Config(format!("{} (line {}, column {}): {inner}", e.path(), inner.line(), inner.column()))
        })?;
        if let SystemSpec::Plugin { path } = &mut cfg.system {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, v: f64| CliError::Config(format!("{field} must be positive, got {v}"));
        for (field, v) in [
            ("tolerances.integrator", self.tolerances.integrator),
            ("tolerances.manifold", self.tolerances.manifold),
            ("tolerances.bvp", self.tolerances.bvp),
            ("penalty.weight", self.penalty.weight),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(field, v));
            }
        }
        if let SystemSpec::Plugin { path } = &self.system {
            if !path.is_file() {
                return Err(CliError::Config(format!("system.plugin.path: {} does not exist", path.display())));
            }
        }
        if let Some(g) = &self.manifold.grid {
            if g.lower.len() != g.upper.len() || g.lower.len() != g.counts.len() {
                return Err(CliError::Config("manifold.grid: lower, upper and counts must have equal length".into()));
            }
        }
        if self.manifold.charts.is_empty() {
            return Err(CliError::Config("manifold.charts must not be empty".into()));
        }
        if let Some(t) = &self.turnpike {
            if t.horizons.is_empty() {
                return Err(CliError::Config("turnpike.horizons must not be empty".into()));
            }
            if t.horizons.iter().any(|h| !(*h > 0.0)) || t.horizons.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CliError::Config("turnpike.horizons must be positive and increasing".into()));
            }
            if !(t.epsilon > 0.0) {
                return Err(bad("turnpike.epsilon", t.epsilon));
            }
        }
        if let Some(s) = &self.simulate {
            if !(s.t_final > 0.0) {
                return Err(bad("simulate.t_final", s.t_final));
            }
        }
        Ok(())
    }

    /// Instantiates the system with the penalty convention applied.
    pub fn build_system(&self) -> Result<SystemRef, CliError> {
        let base: SystemRef = match &self.system {
            SystemSpec::Example { name, params } => example_system(name, params).map_err(|e| CliError::Config(format!("system.example: {e}")))?,
            SystemSpec::Plugin { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                let spec: PluginSpec = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?;
                Arc::new(ExprSystem::from_spec(&spec).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?)
            }
            SystemSpec::Linear { a, b, c } => {
                let sys = ExprSystem::linear(&matrix("a", a)?, &matrix("b", b)?, &matrix("c", c)?).map_err(|e| CliError::Config(format!("system.linear: {e}")))?;
                Arc::new(sys)
            }
        };
        let factor = self.penalty.factor();
        if factor == 1.0 {
            Ok(base)
        } else {
            Ok(Arc::new(ScaledPenalty::new(base, factor).map_err(|e| CliError::Config(e.to_string()))?))
        }
    }

    /// Manifold settings with the configured tolerances applied.
    pub fn manifold_settings(&self) -> ManifoldSettings {
        ManifoldSettings {
            tol: self.tolerances.manifold,
            ode_tol: self.tolerances.integrator,
            ..self.manifold.settings.clone()
        }
    }

    pub fn bvp_settings(&self) -> Option<BvpSettings> {
        self.turnpike.as_ref().map(|t| BvpSettings {
            tol: self.tolerances.bvp,
            ode_tol: self.tolerances.integrator,
            ..t.bvp.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major() {
        let g = GridSpec {
            lower: vec![0.0, -1.0],
            upper: vec![1.0, 1.0],
            counts: vec![2, 3],
        };
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].as_slice(), &[0.0, 0.0]);
        assert_eq!(pts[5].as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn field_errors_name_the_path() {
        let err = ExperimentConfig::from_json(r#"{"system": {"example": {"name": "scalar"}}, "tolerances": {"bvp": "x"}}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("tolerances.bvp"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"system": {"example": {"name": "scalar"}}, "tolerances": {"bvp": -1.0}}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("tolerances.bvp"), "{err}");
    }

    #[test]
    fn full_convention_doubles_penalty() {
        let cfg = ExperimentConfig::from_json(
            r#"{"system": {"linear": {"a": [[0.0]], "b": [[1.0]], "c": [[1.0]]}}, "penalty": {"convention": "full"}}"#,
            Path::new("."),
        )
        .unwrap();
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.h(&DVector::from_element(1, 1.0)), 1.0);
    }
}
