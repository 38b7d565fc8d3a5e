//! Mode dispatch.

use std::path::PathBuf;

use ionctl_core::control::{ControlTrajectory, TimeGrid};
use ionctl_core::model::ProcessParams;
use ionctl_core::moments::{self, MomentState};
use ionctl_core::solver::{self, SolveReport, StopReason, Throughput};
use ionctl_core::stochastic::{self, DiffusionModel};
use ionctl_core::uncertainty::{self, DiffusionTable, EnsembleStats, ItoSpec, MeanRevertingSpec};
use ionctl_core::Error as CoreError;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, DiffusionKind, Mode, ScenarioConfig};
use crate::output::{num, trajectory_rows, OutputDir, TRAJECTORY_COLUMNS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_UNCONVERGED: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Invalid(CoreError),
    #[error("numerical abort: {0}")]
    Numerical(CoreError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidParameter { .. }
            | CoreError::NonPositiveRate { .. }
            | CoreError::InvalidGrid(_)
            | CoreError::LengthMismatch { .. } => RunError::Invalid(e),
            _ => RunError::Numerical(e),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Invalid(_) => EXIT_VALIDATION,
            RunError::Numerical(_) => EXIT_NUMERICAL,
            RunError::Io(_) => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: Mode,
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
    /// An optimization hit its iteration cap.
    pub unconverged: bool,
}

impl RunSummary {
    pub fn exit_code(&self, allow_unconverged: bool) -> i32 {
        if self.unconverged && !allow_unconverged {
            EXIT_UNCONVERGED
        } else {
            EXIT_OK
        }
    }
}

/// Scalar part of a [`SolveReport`].
#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub config_hash: String,
    pub seed: u64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub update_sign: f64,
    pub final_max_dh_dq: f64,
    pub j_final: f64,
    pub objective_time_hr: f64,
    pub j_at_objective_time: f64,
    pub final_flow_lph: f64,
    pub min_flow_lph: f64,
    pub max_flow_lph: f64,
    pub report_ratio: f64,
    pub time_to_report_ratio_hr: Option<f64>,
    pub volume_processed_l: Option<f64>,
    pub mass_removed_per_resin_g_per_l: Option<f64>,
    pub j_decreases_after_burn_in: usize,
}

impl ReportSummary {
    pub fn new(cfg: &ScenarioConfig, r: &SolveReport) -> Self {
        let flows = r.control.flows();
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            converged: r.converged,
            stop_reason: r.stop_reason,
            iterations: r.iterations,
            update_sign: r.sign,
            final_max_dh_dq: r.final_max_dh_dq,
            j_final: r.j_final,
            objective_time_hr: r.objective_time_hr,
            j_at_objective_time: r.j_at_objective_time,
            final_flow_lph: r.final_flow(),
            min_flow_lph: flows.iter().copied().fold(f64::INFINITY, f64::min),
            max_flow_lph: flows.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            report_ratio: r.report_ratio,
            time_to_report_ratio_hr: r.time_to_report_ratio_hr,
            volume_processed_l: r.volume_processed_l,
            mass_removed_per_resin_g_per_l: r.mass_removed_per_resin_g_per_l,
            j_decreases_after_burn_in: r.j_decreases,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn report_lines(label: &str, r: &SolveReport) -> Vec<String> {
    vec![
        format!(
            "{label}: converged={} ({:?}) after {} iterations, max|dH/dQ|={:.3e}",
            r.converged, r.stop_reason, r.iterations, r.final_max_dh_dq
        ),
        format!(
            "  final flow {:.4} L/hr, J(t_m-sigma={:.1} hr) = {:.6e} g",
            r.final_flow(),
            r.objective_time_hr,
            r.j_at_objective_time
        ),
        format!(
            "  psi={} at {} hr, volume {} L, removal {} g/L resin",
            r.report_ratio,
            opt(r.time_to_report_ratio_hr),
            opt(r.volume_processed_l),
            opt(r.mass_removed_per_resin_g_per_l)
        ),
    ]
}

fn write_solve(out: &mut OutputDir, cfg: &ScenarioConfig, r: &SolveReport) -> std::io::Result<()> {
    let mut cols = TRAJECTORY_COLUMNS.to_vec();
    cols.push("dHdQ");
    out.csv(
        "trajectory.csv",
        &cols,
        trajectory_rows(&r.trajectory, cfg.process.c0_g_per_l(), Some(&r.dh_dq)),
    )?;
    out.csv(
        "history.csv",
        &["iter", "max_dHdQ", "J", "H_mean"],
        r.history
            .iter()
            .map(|h| vec![h.iter.to_string(), num(h.max_dh_dq), num(h.j), num(h.h_mean)]),
    )?;
    out.json("report.json", &ReportSummary::new(cfg, r))
}

fn write_g_table(out: &mut OutputDir, table: &DiffusionTable) -> std::io::Result<()> {
    out.csv(
        "g_table.csv",
        &["t_hr", "g1", "g2", "g3", "g4"],
        table.g.iter().enumerate().map(|(i, g)| {
            let mut row = vec![num(table.grid.time(i))];
            row.extend(g.iter().map(|v| num(*v)));
            row
        }),
    )
}

fn write_ensemble(out: &mut OutputDir, stats: &EnsembleStats) -> std::io::Result<()> {
    let mut rows = Vec::with_capacity(4 * stats.min.len());
    for i in 0..stats.min.len() {
        for k in 0..4 {
            rows.push(vec![
                num(stats.grid.time(i)),
                (k + 1).to_string(),
                num(stats.min[i][k]),
                num(stats.mean[i][k]),
                num(stats.max[i][k]),
                num(stats.increment_variance[i][k]),
            ]);
        }
    }
    out.csv(
        "ensemble.csv",
        &["t_hr", "moment_id", "min", "mean", "max", "var_increment"],
        rows,
    )
}

fn write_path(out: &mut OutputDir, name: &str, grid: &TimeGrid, path: &[f64]) -> std::io::Result<()> {
    out.csv(
        name,
        &["t_hr", "x"],
        path.iter().enumerate().map(|(i, x)| vec![num(grid.time(i)), num(*x)]),
    )
}

fn constant_control(cfg: &ScenarioConfig, grid: TimeGrid, flow: f64) -> Result<ControlTrajectory, RunError> {
    Ok(ControlTrajectory::constant(
        grid,
        flow,
        cfg.process.q_min_lph,
        cfg.process.q_max_lph,
    )?)
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let mut out = OutputDir::create(cfg)?;
    let (lines, unconverged) = match cfg.mode {
        Mode::Simulate => (run_simulate(cfg, &mut out)?, false),
        Mode::Moments => (run_moments(cfg, &mut out)?, false),
        Mode::OptimizeDet => run_optimize_det(cfg, &mut out)?,
        Mode::OptimizeStoch => run_optimize_stoch(cfg, &mut out)?,
        Mode::Ensemble => (run_ensemble(cfg, &mut out)?, false),
        Mode::Compare => run_compare(cfg, &mut out)?,
        Mode::McCompare => run_mc_compare(cfg, &mut out)?,
    };
    Ok(RunSummary {
        mode: cfg.mode,
        lines,
        files: out.written().to_vec(),
        unconverged,
    })
}

#[derive(Serialize)]
struct SimulateSummary {
    config_hash: String,
    seed: u64,
    flow_lph: f64,
    half_time_hr: f64,
    report_ratio: f64,
    time_to_report_ratio_hr: Option<f64>,
    closed_form: Throughput,
    volume_processed_l: Option<f64>,
    mass_removed_per_resin_g_per_l: Option<f64>,
    objective_time_hr: f64,
    j_at_objective_time: f64,
    final_state: MomentState,
}

fn run_simulate(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Vec<String>, RunError> {
    let p = &cfg.process;
    let q = cfg.simulate.flow_lph.unwrap_or(cfg.solver.q_start_lph);
    let control = constant_control(cfg, cfg.solver.grid()?, q)?;
    let traj = moments::integrate_moments(p, &control, cfg.solver.rhs_mode)?;
    out.csv(
        "trajectory.csv",
        &TRAJECTORY_COLUMNS,
        trajectory_rows(&traj, p.c0_g_per_l(), None),
    )?;
    let ratio = cfg.solver.report_ratio;
    let t = solver::time_to_ratio(&traj, ratio);
    let tp = t.map(|t| solver::throughput(&traj, p.c0_g_per_l(), p.resin_volume_l, t));
    let (t_obj, j_obj) = solver::objective_at_objective_time(&traj, p.c0_g_per_l());
    let s = SimulateSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        flow_lph: q,
        half_time_hr: p.half_time(q),
        report_ratio: ratio,
        time_to_report_ratio_hr: t,
        closed_form: solver::fixed_flow_throughput(p, q, ratio),
        volume_processed_l: tp.map(|x| x.volume_l),
        mass_removed_per_resin_g_per_l: tp.map(|x| x.mass_per_resin_g_per_l),
        objective_time_hr: t_obj,
        j_at_objective_time: j_obj,
        final_state: *traj.last(),
    };
    out.json("summary.json", &s)?;
    Ok(vec![
        format!("simulate: constant flow {q} L/hr over {} hr", cfg.solver.t_final_hr),
        format!(
            "  t_half {:.1} hr; psi={ratio} at {} hr, volume {} L, removal {} g/L resin",
            s.half_time_hr,
            opt(t),
            opt(s.volume_processed_l),
            opt(s.mass_removed_per_resin_g_per_l)
        ),
        format!("  J(t_m-sigma={t_obj:.1} hr) = {j_obj:.6e} g"),
    ])
}

#[derive(Serialize)]
struct MomentsSummary {
    config_hash: String,
    flow_lph: f64,
    t_end_hr: f64,
    max_rel_err: [f64; 4],
    hetp: f64,
    tpn: f64,
}

fn run_moments(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Vec<String>, RunError> {
    let p = &cfg.process;
    let m = &cfg.moments;
    let q = m.flow_lph.unwrap_or(cfg.solver.q_start_lph);
    let grid = TimeGrid::new(m.t_end_hr, m.n_grid)?;
    let traj = moments::integrate_moments(p, &constant_control(cfg, grid, q)?, cfg.solver.rhs_mode)?;
    let mut rows = Vec::new();
    let mut max_rel = [0.0f64; 4];
    for d in 1..=10 {
        let t = m.t_end_hr * d as f64 / 10.0;
        let ode = traj.states[grid.nearest_index(t)];
        let quad = moments::moments_by_quadrature(p, q, t, m.quadrature_points)?;
        for k in 0..4 {
            let (a, b) = (ode.get(k), quad.get(k));
            let rel = (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
            max_rel[k] = max_rel[k].max(rel);
            rows.push(vec![num(t), (k + 1).to_string(), num(a), num(b), num(rel)]);
        }
    }
    out.csv(
        "moments.csv",
        &["t_hr", "moment_id", "ode", "quadrature", "rel_err"],
        rows,
    )?;
    let last = traj.last();
    let plate = moments::hetp_tpn(last.mu1, last.mu2c, p.column_height);
    out.json(
        "summary.json",
        &MomentsSummary {
            config_hash: cfg.hash(),
            flow_lph: q,
            t_end_hr: m.t_end_hr,
            max_rel_err: max_rel,
            hetp: plate.hetp,
            tpn: plate.tpn,
        },
    )?;
    Ok(vec![
        format!("moments: flow {q} L/hr, ODE vs quadrature at deciles of {} hr", m.t_end_hr),
        format!(
            "  max relative error psi {:.2e}, mu1 {:.2e}, mu2c {:.2e}, mu3c {:.2e}",
            max_rel[0], max_rel[1], max_rel[2], max_rel[3]
        ),
        format!("  HETP {:.4}, TPN {:.3}", plate.hetp, plate.tpn),
    ])
}

fn run_optimize_det(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<(Vec<String>, bool), RunError> {
    let r = solver::solve_deterministic(&cfg.process, &cfg.solver)?;
    write_solve(out, cfg, &r)?;
    Ok((report_lines("optimize-det", &r), !r.converged))
}

fn diffusion_model(cfg: &ScenarioConfig) -> Option<DiffusionModel> {
    match cfg.stochastic.diffusion {
        DiffusionKind::Tabulated => None,
        DiffusionKind::StateProportional => Some(DiffusionModel::StateProportional {
            coeffs: cfg.stochastic.proportional_coeffs,
        }),
    }
}

fn run_optimize_stoch(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<(Vec<String>, bool), RunError> {
    let r = match diffusion_model(cfg) {
        Some(model) => stochastic::solve_stochastic_with(&cfg.process, &cfg.solver, &model)?,
        None => {
            let s = stochastic::solve_stochastic(&cfg.process, &cfg.uncertainty_spec(), &cfg.solver)?;
            write_g_table(out, &s.diffusion)?;
            write_ensemble(out, &s.ensemble)?;
            s.report
        }
    };
    write_solve(out, cfg, &r)?;
    Ok((report_lines("optimize-stoch", &r), !r.converged))
}

#[derive(Serialize)]
struct EnsembleSummary {
    config_hash: String,
    seed: u64,
    members: usize,
    failed: usize,
    baseline_contained: [bool; 4],
    reverting_eta_per_hr: f64,
    reverting_sigma: f64,
    reverting_containment_mean: f64,
    reverting_containment_min: f64,
}

fn run_ensemble(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Vec<String>, RunError> {
    let p = &cfg.process;
    let spec = cfg.uncertainty_spec();
    let grid = cfg.solver.grid()?;
    let control = constant_control(cfg, grid, cfg.solver.q_start_lph)?;
    let base = moments::integrate_moments(p, &control, cfg.solver.rhs_mode)?;
    let stats = uncertainty::ensemble_moments(p, &spec, &control, cfg.solver.rhs_mode)?;
    let g = uncertainty::estimate_diffusion(&stats, spec.smoothing_window);
    write_ensemble(out, &stats)?;
    write_g_table(out, &g)?;

    let drift = uncertainty::drift_table(&base);
    let ito = ItoSpec {
        drift: drift.iter().map(|d| d[1]).collect(),
        diffusion: g.series(1),
        dt: grid.dt(),
        seed: spec.seed,
        epsilon_sd: spec.epsilon_sd,
    };
    let mu1_path = uncertainty::ito_brownian_drift_path(&ito, base.states[0].mu1, &grid, 0)?;
    write_path(out, "path_mu1.csv", &grid, &mu1_path)?;

    let reverting = reverting_spec(cfg, &stats, &g);
    let mut fractions = Vec::with_capacity(cfg.ito.n_paths);
    let mut first = Vec::new();
    for i in 0..cfg.ito.n_paths as u64 {
        let path = uncertainty::ito_mean_reverting_path(&reverting, stats.mean[0][3], &grid, i)?;
        fractions.push(stats.containment_fraction(path.iter().copied(), 3));
        if i == 0 {
            first = path;
        }
    }
    write_path(out, "path_mu3c.csv", &grid, &first)?;
    let mean_frac = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let min_frac = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let contained = [0, 1, 2, 3].map(|k| stats.contains(&base, k));
    out.json(
        "summary.json",
        &EnsembleSummary {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            members: stats.members,
            failed: stats.failed,
            baseline_contained: contained,
            reverting_eta_per_hr: reverting.eta,
            reverting_sigma: reverting.sigma_noise,
            reverting_containment_mean: mean_frac,
            reverting_containment_min: min_frac,
        },
    )?;
    Ok(vec![
        format!(
            "ensemble: {} members ({} failed) at constant flow {} L/hr",
            stats.members, stats.failed, cfg.solver.q_start_lph
        ),
        format!("  deterministic baseline inside envelope (psi, mu1, mu2c, mu3c): {contained:?}"),
        format!(
            "  mean-reverting mu3c (eta={}): {:.1}% of points in envelope on average over {} paths",
            reverting.eta,
            100.0 * mean_frac,
            cfg.ito.n_paths
        ),
    ])
}

/// Mean-reverting spec for the third moment: ensemble mean as the target and
/// the time-averaged estimated g as the noise level.
pub fn reverting_spec(cfg: &ScenarioConfig, stats: &EnsembleStats, g: &DiffusionTable) -> MeanRevertingSpec {
    let g4 = g.series(3);
    MeanRevertingSpec {
        eta: cfg.ito.eta_per_hr,
        mean: stats.moment_series(&stats.mean, 3),
        sigma_noise: g4.iter().sum::<f64>() / g4.len() as f64,
        dt: stats.grid.dt(),
        seed: cfg.seed,
        epsilon_sd: cfg.uncertainty.epsilon_sd,
    }
}

/// One row of the throughput comparison; `error` is set when its solve failed.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub case: String,
    pub final_flow_lph: Option<f64>,
    pub time_hr: Option<f64>,
    pub volume_l: Option<f64>,
    pub removal_g_per_l: Option<f64>,
    pub error: Option<String>,
}

impl CompareRow {
    fn fixed(case: &str, p: &ProcessParams, q: f64, ratio: f64) -> Self {
        let t = solver::fixed_flow_throughput(p, q, ratio);
        Self {
            case: case.into(),
            final_flow_lph: Some(q),
            time_hr: Some(t.time_hr),
            volume_l: Some(t.volume_l),
            removal_g_per_l: Some(t.mass_per_resin_g_per_l),
            error: None,
        }
    }

    fn solved(case: &str, r: &Result<SolveReport, CoreError>) -> Self {
        match r {
            Ok(r) => Self {
                case: case.into(),
                final_flow_lph: Some(r.final_flow()),
                time_hr: r.time_to_report_ratio_hr,
                volume_l: r.volume_processed_l,
                removal_g_per_l: r.mass_removed_per_resin_g_per_l,
                error: None,
            },
            Err(e) => Self {
                case: case.into(),
                final_flow_lph: None,
                time_hr: None,
                volume_l: None,
                removal_g_per_l: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Table rows with the two optimizations behind them.
#[derive(Debug)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub deterministic: Result<SolveReport, CoreError>,
    pub stochastic: Result<SolveReport, CoreError>,
}

/// Fixed slow and fast flows plus the deterministic and stochastic optima.
///
/// A failed solve fills its row with `error` and leaves the others intact.
/// The tabulated stochastic solve estimates g under the deterministic optimum,
/// or under the starting control when that solve failed.
pub fn compare_rows(cfg: &ScenarioConfig) -> Comparison {
    let p = &cfg.process;
    let ratio = cfg.solver.report_ratio;
    let det = solver::solve_deterministic(p, &cfg.solver);
    let sto = match diffusion_model(cfg) {
        Some(model) => stochastic::solve_stochastic_with(p, &cfg.solver, &model),
        None => match &det {
            Ok(d) => Ok(d.control.clone()),
            Err(_) => cfg.solver.initial_control(p),
        }
        .and_then(|c| stochastic::solve_stochastic_from_ensemble(p, &cfg.uncertainty_spec(), &cfg.solver, &c))
        .map(|s| s.report),
    };
    let rows = vec![
        CompareRow::fixed("fixed_slow", p, p.q_min_lph, ratio),
        CompareRow::fixed("fixed_fast", p, p.q_max_lph, ratio),
        CompareRow::solved("deterministic_optimal", &det),
        CompareRow::solved("stochastic_optimal", &sto),
    ];
    Comparison {
        rows,
        deterministic: det,
        stochastic: sto,
    }
}

fn run_compare(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<(Vec<String>, bool), RunError> {
    let cmp = compare_rows(cfg);
    let cell = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), num);
    out.csv(
        "compare.csv",
        &["case", "final_flow_lph", "time_hr", "volume_l", "removal_g_per_l", "error"],
        cmp.rows.iter().map(|r| {
            vec![
                r.case.clone(),
                cell(r.final_flow_lph),
                cell(r.time_hr),
                cell(r.volume_l),
                cell(r.removal_g_per_l),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )?;
    out.json("compare.json", &cmp.rows)?;
    let status = |r: &Result<SolveReport, CoreError>| match r {
        Ok(r) => format!("{} iterations, converged {}", r.iterations, r.converged),
        Err(_) => "failed".to_string(),
    };
    let mut lines = vec![format!(
        "compare: throughput to psi={} (deterministic {}; stochastic {})",
        cfg.solver.report_ratio,
        status(&cmp.deterministic),
        status(&cmp.stochastic)
    )];
    for r in &cmp.rows {
        match &r.error {
            None => lines.push(format!(
                "  {:<22} t={} hr  V={} L  removal={} g/L",
                r.case,
                opt(r.time_hr),
                opt(r.volume_l),
                opt(r.removal_g_per_l)
            )),
            Some(e) => lines.push(format!("  {:<22} failed: {e}", r.case)),
        }
    }
    let unconverged = [&cmp.deterministic, &cmp.stochastic]
        .iter()
        .any(|r| r.as_ref().is_ok_and(|r| !r.converged));
    // Every optimization failing is an error; a partial table is still written.
    match (cmp.deterministic, cmp.stochastic) {
        (Err(e), Err(_)) => Err(e.into()),
        _ => Ok((lines, unconverged)),
    }
}

#[derive(Serialize)]
struct McSummary {
    config_hash: String,
    seed: u64,
    runs: usize,
    unconverged: usize,
    aggregated: usize,
    failed: usize,
    containment_fraction: f64,
    det_peak_ratios: Vec<f64>,
    stoch_peak_ratio: f64,
}

fn run_mc_compare(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<(Vec<String>, bool), RunError> {
    let include = cfg.mc_compare.include_unconverged;
    let mc = stochastic::mc_deterministic_comparison(
        &cfg.process,
        &cfg.uncertainty_spec(),
        &cfg.solver,
        cfg.mc_compare.n_runs,
        include,
    )?;
    out.csv(
        "comparison.csv",
        &["t_hr", "det_min", "det_mean", "det_max", "stoch_Q"],
        (0..mc.grid.len()).map(|i| {
            vec![
                num(mc.grid.time(i)),
                num(mc.det_min[i]),
                num(mc.det_mean[i]),
                num(mc.det_max[i]),
                num(mc.stoch_q[i]),
            ]
        }),
    )?;
    let frac = mc.containment_fraction();
    out.json(
        "summary.json",
        &McSummary {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            runs: mc.runs,
            unconverged: mc.unconverged,
            aggregated: mc.aggregated,
            failed: mc.failed,
            containment_fraction: frac,
            det_peak_ratios: mc.det_peak_ratios.clone(),
            stoch_peak_ratio: mc.stoch_peak_ratio,
        },
    )?;
    Ok((
        vec![
            format!(
                "mc-compare: {} deterministic runs ({} unconverged, {} aggregated, {} failed)",
                mc.runs, mc.unconverged, mc.aggregated, mc.failed
            ),
            format!("  stochastic flow inside deterministic envelope at {:.1}% of points", 100.0 * frac),
        ],
        mc.unconverged > 0 || !mc.stochastic.converged,
    ))
}
