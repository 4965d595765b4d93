//! Subcommand pipelines. Each `run_*` computes a result without touching
//! the file system; `write_*` emits it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use hamflow_core::hamiltonian::{build_hamiltonian, simulate_controlled, HamiltonianSystem, InputSource, Trajectory};
use hamflow_core::io::{to_canonical_json, write_csv};
use hamflow_core::linalg::{care_residual, is_hurwitz, pbh_detectable, pbh_stabilizable};
use hamflow_core::manifold::{coverage, manifold_feedback, ChartKind, CoverageEstimate, ManifoldChart, ManifoldSettings};
use hamflow_core::ocp::{infinite_cost, turnpike_run, InfiniteCost, TurnpikeReport};
use hamflow_core::ode::OdeOptions;
use hamflow_core::systems::{
    backstepping_feedback, geometric_radii, growth_certificate, linearize, BacksteppingExample, FeedbackLaw, GrowthCertificate, SystemRef,
};

use crate::config::{ChartSelection, ExperimentConfig, FeedbackKind, OutputFormat, SystemSpec};
use crate::error::{CliError, Stage};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub force: bool,
    pub seed_count: Option<usize>,
    pub tol: Option<f64>,
    pub quiet: bool,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(k) = self.seed_count {
            if k == 0 {
                return Err(CliError::Config("--seed-count must be positive".into()));
            }
            cfg.manifold.settings.directions = k;
            cfg.manifold.settings.orbits = k;
        }
        if let Some(tol) = self.tol {
            if !(tol > 0.0) {
                return Err(CliError::Config(format!("--tol must be positive, got {tol}")));
            }
            cfg.tolerances.integrator = tol;
        }
        cfg.validate()
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisPath {
    /// Stabilizable and detectable linearization with a nonzero penalty.
    Riccati,
    /// Zero quadratic penalty and Hurwitz free dynamics.
    StableFreeDynamics,
    Unsupported,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSummary {
    pub p1: Vec<Vec<f64>>,
    pub p2: Vec<Vec<f64>>,
    pub closed_loop: Vec<Vec<f64>>,
    pub care_residual: f64,
    pub inverse_residual: f64,
    pub symplectic_residual: f64,
    pub off_diagonal: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub system: String,
    pub n: usize,
    pub m: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub penalty_rank: usize,
    pub open_loop_hurwitz: bool,
    pub stabilizable: bool,
    pub detectable: bool,
    pub path: HypothesisPath,
    pub growth: GrowthCertificate,
    pub riccati: Option<RiccatiSummary>,
    /// The linear hypotheses needed by the local construction hold.
    pub local_ok: bool,
    /// The growth and coercivity checks on the sampled shells hold.
    pub global_ok: bool,
    pub warnings: Vec<String>,
}

pub fn run_inspect(cfg: &ExperimentConfig) -> Result<InspectReport, CliError> {
    let sys = cfg.build_system()?;
    let lin = linearize(sys.as_ref()).stage("linearize")?;
    let rank = lin.c.nrows();
    let stabilizable = pbh_stabilizable(&lin.a, &lin.b);
    let detectable = rank > 0 && pbh_detectable(&lin.c, &lin.a);
    let hurwitz = is_hurwitz(&lin.a);
    let path = if rank > 0 && stabilizable && detectable {
        HypothesisPath::Riccati
    } else if rank == 0 && hurwitz {
        HypothesisPath::StableFreeDynamics
    } else {
        HypothesisPath::Unsupported
    };
    let spec = &cfg.inspect;
    let radii = geometric_radii(spec.growth_r0, spec.growth_ratio, spec.growth_shells);
    let growth = growth_certificate(sys.as_ref(), &radii, spec.growth_samples).stage("growth")?;
    let mut warnings = Vec::new();
    let riccati = match build_hamiltonian(Arc::clone(&sys)) {
        Ok(hs) => {
            let r = hs.sym.residuals();
            Some(RiccatiSummary {
                p1: rows(&hs.sym.p1),
                p2: rows(&hs.sym.p2),
                closed_loop: rows(&hs.sym.f),
                care_residual: care_residual(&hs.sym.p1, &lin.a, &lin.b, &lin.c).amax(),
                inverse_residual: r.inverse,
                symplectic_residual: r.symplectic,
                off_diagonal: r.off_diagonal,
            })
        }
        Err(e) => {
            warnings.push(format!("riccati: {e}"));
            None
        }
    };
    if rank == 0 {
        warnings.push("penalty has no quadratic part; detectability through C is void".into());
    }
    if growth.violation {
        warnings.push(format!("growth: f exponent {:.3} exceeds what the penalty controls", growth.f_exponent));
    }
    if !growth.h_coercive {
        warnings.push("growth: penalty is not coercive on the sampled shells".into());
    }
    Ok(InspectReport {
        system: sys.name(),
        n: sys.n(),
        m: sys.m(),
        a: rows(&lin.a),
        b: rows(&lin.b),
        c: rows(&lin.c),
        penalty_rank: rank,
        open_loop_hurwitz: hurwitz,
        stabilizable,
        detectable,
        path,
        local_ok: path != HypothesisPath::Unsupported && riccati.is_some(),
        global_ok: growth.passes(),
        growth,
        riccati,
        warnings,
    })
}

fn require_local(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(), CliError> {
    if opts.force {
        return Ok(());
    }
    let report = run_inspect(cfg)?;
    if report.local_ok {
        Ok(())
    } else {
        Err(CliError::Hypotheses(format!(
            "stabilizable = {}, detectable = {}, penalty rank = {}",
            report.stabilizable, report.detectable, report.penalty_rank
        )))
    }
}

fn hamiltonian(sys: SystemRef) -> Result<HamiltonianSystem, CliError> {
    build_hamiltonian(sys).stage("riccati")
}

#[derive(Debug, Clone, Serialize)]
pub struct ChartSummary {
    pub kind: ChartKind,
    pub seeds: usize,
    pub points: usize,
    pub max_abs_hamiltonian: f64,
    pub tangent_defect: f64,
    pub queries: usize,
    pub covered: usize,
    pub boundary: usize,
    pub uncovered: usize,
}

#[derive(Debug, Clone)]
pub struct ManifoldOutput {
    pub charts: Vec<ManifoldChart>,
    pub coverage: Vec<Option<CoverageEstimate>>,
    pub summary: Vec<ChartSummary>,
}

fn chart_kind(sel: ChartSelection) -> ChartKind {
    match sel {
        ChartSelection::Stable => ChartKind::Stable,
        ChartSelection::Unstable => ChartKind::Unstable,
    }
}

fn compute_charts(hs: &HamiltonianSystem, kinds: &[ChartKind], settings: &ManifoldSettings) -> Result<Vec<ManifoldChart>, CliError> {
    kinds
        .iter()
        .map(|&k| hamflow_core::manifold::compute_chart(hs, k, settings).stage("manifold"))
        .collect()
}

pub fn run_manifold(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ManifoldOutput, CliError> {
    require_local(cfg, opts)?;
    let hs = hamiltonian(cfg.build_system()?)?;
    let kinds: Vec<ChartKind> = cfg.manifold.charts.iter().map(|&s| chart_kind(s)).collect();
    let charts = compute_charts(&hs, &kinds, &cfg.manifold_settings())?;
    let queries = cfg.manifold.query_points();
    if let Some(q) = queries.iter().find(|q| q.len() != hs.n()) {
        return Err(CliError::Config(format!("manifold query has length {}, system has n = {}", q.len(), hs.n())));
    }
    let mut cov = Vec::with_capacity(charts.len());
    let mut summary = Vec::with_capacity(charts.len());
    for chart in &charts {
        let estimate = if queries.is_empty() {
            None
        } else {
            Some(coverage(chart, &hs, &queries, &cfg.manifold.coverage).stage("coverage")?)
        };
        summary.push(ChartSummary {
            kind: chart.kind,
            seeds: chart.seeds.len(),
            points: chart.global_points.len(),
            max_abs_hamiltonian: chart.max_abs_hamiltonian(),
            tangent_defect: chart.tangent_defect,
            queries: queries.len(),
            covered: estimate.as_ref().map_or(0, |e| e.covered),
            boundary: estimate.as_ref().map_or(0, |e| e.boundary),
            uncovered: estimate.as_ref().map_or(0, |e| e.uncovered),
        });
        cov.push(estimate);
    }
    Ok(ManifoldOutput {
        charts,
        coverage: cov,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnpikeSummary {
    pub report: TurnpikeReport,
    pub uniformity_bound: f64,
    pub within_bound: bool,
    pub penalty_factor: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TurnpikeOutput {
    pub summary: TurnpikeSummary,
    pub trajectories: Vec<Option<Trajectory>>,
}

impl TurnpikeOutput {
    pub fn hard_failure(&self) -> bool {
        !self.summary.report.all_converged
    }
}

pub fn run_turnpike(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TurnpikeOutput, CliError> {
    let spec = cfg.turnpike.as_ref().ok_or_else(|| CliError::Config("missing turnpike section".into()))?;
    let bvp = cfg.bvp_settings().expect("turnpike section present");
    require_local(cfg, opts)?;
    let hs = hamiltonian(cfg.build_system()?)?;
    let n = hs.n();
    if spec.x0.len() != n || spec.xf.len() != n {
        return Err(CliError::Config(format!("turnpike.x0 and turnpike.xf must have length {n}")));
    }
    let x0 = DVector::from_column_slice(&spec.x0);
    let xf = DVector::from_column_slice(&spec.xf);
    let run = turnpike_run(&hs, &x0, &xf, &spec.horizons, spec.epsilon, spec.warm_start, &bvp).stage("turnpike")?;
    let mut report = run.report;
    let mut warnings = Vec::new();
    if spec.check_sufficient {
        let charts = compute_charts(&hs, &[ChartKind::Stable, ChartKind::Unstable], &cfg.manifold_settings())?;
        let cond = report
            .check_sufficient_condition(&hs, &charts[0], &charts[1], &cfg.manifold.coverage)
            .stage("coverage")?;
        if !cond.satisfied {
            warnings.push(format!(
                "sufficient condition unsatisfied: x0 is {:?} by the stable chart, xf is {:?} by the unstable chart",
                cond.x0_status, cond.xf_status
            ));
        }
    }
    for e in report.entries.iter().filter(|e| !e.bvp_converged) {
        warnings.push(format!("T = {}: {}", e.horizon, e.error.as_deref().unwrap_or("not converged")));
    }
    let within_bound = report.uniformity <= spec.uniformity_bound;
    if !within_bound {
        warnings.push(format!("uniformity {:.4} exceeds bound {}", report.uniformity, spec.uniformity_bound));
    }
    Ok(TurnpikeOutput {
        summary: TurnpikeSummary {
            report,
            uniformity_bound: spec.uniformity_bound,
            within_bound,
            penalty_factor: cfg.penalty.factor(),
            warnings,
        },
        trajectories: run.trajectories,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub feedback: FeedbackKind,
    pub x0: Vec<f64>,
    pub t_final: f64,
    pub final_state: Vec<f64>,
    pub cost: f64,
    /// `½ x0ᵀ P1 x0`, the value of the linearized problem.
    pub riccati_value: Option<f64>,
    pub infinite_horizon: Option<InfiniteCost>,
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub summary: SimulateSummary,
    pub trajectory: Trajectory,
}

fn feedback_law(cfg: &ExperimentConfig, kind: FeedbackKind, sys: &SystemRef, settings: &ManifoldSettings) -> Result<(FeedbackLaw, Option<HamiltonianSystem>), CliError> {
    let m = sys.m();
    Ok(match kind {
        FeedbackKind::Zero => (FeedbackLaw::zero(m), build_hamiltonian(Arc::clone(sys)).ok()),
        FeedbackKind::Lqr => {
            let hs = hamiltonian(Arc::clone(sys))?;
            let gain = hs.sym.b.transpose() * &hs.sym.p1;
            (FeedbackLaw::linear(gain), Some(hs))
        }
        FeedbackKind::Backstepping => match &cfg.system {
            SystemSpec::Example { name, .. } if name == "backstepping" => (backstepping_feedback(Arc::new(BacksteppingExample)), build_hamiltonian(Arc::clone(sys)).ok()),
            _ => return Err(CliError::Config("simulate.feedback = backstepping needs the backstepping example".into())),
        },
        FeedbackKind::Manifold => {
            let hs = hamiltonian(Arc::clone(sys))?;
            let chart = Arc::new(hamflow_core::manifold::stable_manifold(&hs, settings).stage("manifold")?);
            let hs_law = hs.clone();
            let radius = chart.global_points.iter().map(|c| c.x.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
            let law = FeedbackLaw::new("manifold", m, radius, move |x| manifold_feedback(&chart, &hs_law, x));
            (law, Some(hs))
        }
    })
}

pub fn run_simulate(cfg: &ExperimentConfig, _opts: &RunOptions) -> Result<SimulateOutput, CliError> {
    let spec = cfg.simulate.as_ref().ok_or_else(|| CliError::Config("missing simulate section".into()))?;
    let sys = cfg.build_system()?;
    if spec.x0.len() != sys.n() {
        return Err(CliError::Config(format!("simulate.x0 must have length {}", sys.n())));
    }
    let x0 = DVector::from_column_slice(&spec.x0);
    let (law, hs) = feedback_law(cfg, spec.feedback, &sys, &cfg.manifold_settings())?;
    let opts = OdeOptions::with_tol(cfg.tolerances.integrator);
    let trajectory = simulate_controlled(sys.as_ref(), &x0, &InputSource::Feedback(law.clone()), spec.t_final, &opts).stage("simulate")?;
    let infinite = if spec.infinite_horizon {
        Some(infinite_cost(sys.as_ref(), &law, &x0, &spec.tail).stage("infinite cost")?)
    } else {
        None
    };
    Ok(SimulateOutput {
        summary: SimulateSummary {
            feedback: spec.feedback,
            x0: spec.x0.clone(),
            t_final: spec.t_final,
            final_state: trajectory.final_state().iter().copied().collect(),
            cost: trajectory.final_cost(),
            riccati_value: hs.map(|h| 0.5 * x0.dot(&(&h.sym.p1 * &x0))),
            infinite_horizon: infinite,
        },
        trajectory,
    })
}

/// Collects files and writes them in one pass once computation is done.
#[derive(Debug, Default)]
pub struct Emitter {
    files: Vec<(String, Vec<u8>)>,
}

impl Emitter {
    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = to_canonical_json(value).map_err(|e| CliError::Failed(format!("serializing {name}: {e}")))?;
        self.files.push((name.to_string(), text.into_bytes()));
        Ok(())
    }

    pub fn csv_with<F>(&mut self, name: &str, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> hamflow_core::Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf).map_err(|e| CliError::Failed(format!("writing {name}: {e}")))?;
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn flush(self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::with_capacity(self.files.len());
        for (name, bytes) in self.files {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            out.push(path);
        }
        Ok(out)
    }
}

fn horizon_tag(t: f64) -> String {
    let s = format!("{t}");
    s.replace('.', "p")
}

pub fn emit_inspect(cfg: &ExperimentConfig, report: &InspectReport) -> Result<Emitter, CliError> {
    let mut e = Emitter::default();
    if cfg.output.wants(OutputFormat::Json) {
        e.json("inspect.json", report)?;
    }
    Ok(e)
}

pub fn emit_manifold(cfg: &ExperimentConfig, out: &ManifoldOutput) -> Result<Emitter, CliError> {
    let mut e = Emitter::default();
    for (chart, cov) in out.charts.iter().zip(&out.coverage) {
        let tag = match chart.kind {
            ChartKind::Stable => "stable",
            ChartKind::Unstable => "unstable",
        };
        if cfg.output.wants(OutputFormat::Json) {
            e.json(&format!("chart_{tag}.json"), chart)?;
            if let Some(cov) = cov {
                e.json(&format!("coverage_{tag}.json"), cov)?;
            }
        }
        if cfg.output.wants(OutputFormat::Csv) {
            let (header, rows) = chart.projection_table();
            e.csv_with(&format!("projection_{tag}.csv"), |w| write_csv(w, &header, rows))?;
        }
    }
    if cfg.output.wants(OutputFormat::Json) {
        e.json("manifold.json", &out.summary)?;
    }
    Ok(e)
}

pub fn emit_turnpike(cfg: &ExperimentConfig, out: &TurnpikeOutput) -> Result<Emitter, CliError> {
    let mut e = Emitter::default();
    if cfg.output.wants(OutputFormat::Json) {
        e.json("turnpike.json", &out.summary)?;
    }
    if cfg.output.wants(OutputFormat::Csv) {
        e.csv_with("turnpike.csv", |w| out.summary.report.write_csv(w))?;
        for (entry, traj) in out.summary.report.entries.iter().zip(&out.trajectories) {
            if let Some(traj) = traj {
                e.csv_with(&format!("trajectory_T{}.csv", horizon_tag(entry.horizon)), |w| traj.write_csv(w))?;
            }
        }
    }
    Ok(e)
}

pub fn emit_simulate(cfg: &ExperimentConfig, out: &SimulateOutput) -> Result<Emitter, CliError> {
    let mut e = Emitter::default();
    if cfg.output.wants(OutputFormat::Json) {
        e.json("simulate.json", &out.summary)?;
    }
    if cfg.output.wants(OutputFormat::Csv) {
        e.csv_with("trajectory.csv", |w| out.trajectory.write_csv(w))?;
    }
    Ok(e)
}
