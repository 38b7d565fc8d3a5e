//! Parameter ensembles and Ito process paths.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by `(seed, stream)`,
//! so a sample or path depends only on its own index and never on how work was
//! split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlTrajectory, TimeGrid};
use crate::dynamics::RhsMode;
use crate::error::{Error, Result};
use crate::model::ProcessParams;
use crate::moments::{self, MomentTrajectory};

/// Streams at or above this offset are reserved for noise paths so they never
/// collide with parameter draws.
const PATH_STREAM_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingDistribution {
    #[default]
    Uniform,
    /// Normal with sd = width/2, redrawn until inside ±width.
    TruncatedNormal,
}

/// Whether the four moment paths share one ε per step or draw their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStreams {
    #[default]
    Shared,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySpec {
    pub rel_width_c0: f64,
    pub rel_width_kt: f64,
    pub rel_width_qm: f64,
    pub distribution: SamplingDistribution,
    pub sample_count: usize,
    pub seed: u64,
    /// Standard deviation of ε in Ito paths.
    pub epsilon_sd: f64,
    pub noise_streams: NoiseStreams,
    /// Moving-average window for diffusion estimates; 1 disables smoothing.
    pub smoothing_window: usize,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        Self {
            rel_width_c0: 0.10,
            rel_width_kt: 0.30,
            rel_width_qm: 0.30,
            distribution: SamplingDistribution::Uniform,
            sample_count: 100,
            seed: 0,
            epsilon_sd: 1.0,
            noise_streams: NoiseStreams::Shared,
            smoothing_window: 5,
        }
    }
}

impl UncertaintySpec {
    pub fn validation_errors(&self) -> Vec<Error> {
        let mut errs = Vec::new();
        for (field, w) in [
            ("rel_width_c0", self.rel_width_c0),
            ("rel_width_kt", self.rel_width_kt),
            ("rel_width_qm", self.rel_width_qm),
        ] {
            if !(0.0..1.0).contains(&w) {
                errs.push(Error::param(field, format!("must lie in [0, 1), got {w}")));
            }
        }
        if self.sample_count < 2 {
            errs.push(Error::param("sample_count", "must be at least 2"));
        }
        if !(self.epsilon_sd.is_finite() && self.epsilon_sd >= 0.0) {
            errs.push(Error::param("epsilon_sd", "must be non-negative"));
        }
        if self.smoothing_window == 0 {
            errs.push(Error::param("smoothing_window", "must be at least 1"));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        match self.validation_errors().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Same spec with every width zeroed.
    pub fn without_spread(&self) -> Self {
        Self {
            rel_width_c0: 0.0,
            rel_width_kt: 0.0,
            rel_width_qm: 0.0,
            ..self.clone()
        }
    }
}

/// ChaCha8 generator for substream `stream` of `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Normal draws with mean 0 and standard deviation `sd`.
#[derive(Debug, Clone)]
pub struct EpsilonSource {
    rng: ChaCha8Rng,
    sd: f64,
}

impl EpsilonSource {
    pub fn new(seed: u64, stream: u64, sd: f64) -> Self {
        Self {
            rng: rng_for(seed, stream),
            sd,
        }
    }

    pub fn draw(&mut self) -> f64 {
        let e: f64 = StandardNormal.sample(&mut self.rng);
        self.sd * e
    }
}

fn factor(rng: &mut ChaCha8Rng, width: f64, dist: SamplingDistribution) -> f64 {
    if width == 0.0 {
        return 1.0;
    }
    match dist {
        SamplingDistribution::Uniform => rng.random_range(1.0 - width..=1.0 + width),
        SamplingDistribution::TruncatedNormal => loop {
            let e: f64 = StandardNormal.sample(rng);
            let x = 0.5 * width * e;
            if x.abs() <= width {
                break 1.0 + x;
            }
        },
    }
}

/// Copy of `base` with C0, K_T and q_m scaled by draws for sample `index`.
///
/// K_T is scaled as a whole through `kt_scale`; its correlation coefficients
/// are left alone.
pub fn sample_parameters(base: &ProcessParams, spec: &UncertaintySpec, index: u64) -> ProcessParams {
    let mut rng = rng_for(spec.seed, index);
    let c0 = factor(&mut rng, spec.rel_width_c0, spec.distribution);
    let kt = factor(&mut rng, spec.rel_width_kt, spec.distribution);
    let qm = factor(&mut rng, spec.rel_width_qm, spec.distribution);
    ProcessParams {
        c0_ppb: base.c0_ppb * c0,
        kt_scale: base.kt_scale * kt,
        qm_g_per_l: base.qm_g_per_l * qm,
        ..*base
    }
}

/// Pointwise envelope and increment variance of an ensemble, indexed `[point][moment]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub grid: TimeGrid,
    pub min: Vec<[f64; 4]>,
    pub mean: Vec<[f64; 4]>,
    pub max: Vec<[f64; 4]>,
    /// Sample variance of `y(i+1) − y(i)`; the last point repeats the one before.
    pub increment_variance: Vec<[f64; 4]>,
    pub members: usize,
    pub failed: usize,
}

impl EnsembleStats {
    /// Whether `traj` lies inside `[min, max]` for moment `k` at every point.
    pub fn contains(&self, traj: &MomentTrajectory, k: usize) -> bool {
        self.containment_fraction(traj.states.iter().map(|s| s.get(k)), k) == 1.0
    }

    /// Fraction of points where `values` lies in the envelope of moment `k`.
    pub fn containment_fraction(&self, values: impl IntoIterator<Item = f64>, k: usize) -> f64 {
        let mut inside = 0usize;
        let mut total = 0usize;
        for (i, v) in values.into_iter().enumerate().take(self.min.len()) {
            total += 1;
            if v >= self.min[i][k] && v <= self.max[i][k] {
                inside += 1;
            }
        }
        inside as f64 / total.max(1) as f64
    }

    pub fn moment_series(&self, which: &[[f64; 4]], k: usize) -> Vec<f64> {
        which.iter().map(|v| v[k]).collect()
    }
}

/// Reduces member trajectories in index order.
pub fn aggregate(grid: TimeGrid, members: &[MomentTrajectory], failed: usize) -> Result<EnsembleStats> {
    if members.len() < 2 {
        return Err(Error::param(
            "sample_count",
            format!("{} usable ensemble members, need at least 2", members.len()),
        ));
    }
    let len = grid.len();
    let n = members.len() as f64;
    let mut min = vec![[f64::INFINITY; 4]; len];
    let mut max = vec![[f64::NEG_INFINITY; 4]; len];
    let mut mean = vec![[0.0; 4]; len];
    for m in members {
        for (i, s) in m.states.iter().enumerate() {
            for k in 0..4 {
                let v = s.get(k);
                min[i][k] = min[i][k].min(v);
                max[i][k] = max[i][k].max(v);
                mean[i][k] += v;
            }
        }
    }
    for row in &mut mean {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let mut increment_variance = vec![[0.0; 4]; len];
    for i in 0..len - 1 {
        for k in 0..4 {
            let incs = members.iter().map(|m| m.states[i + 1].get(k) - m.states[i].get(k));
            let mu = incs.clone().sum::<f64>() / n;
            let ss: f64 = incs.map(|d| (d - mu) * (d - mu)).sum();
            increment_variance[i][k] = ss / (n - 1.0);
        }
    }
    increment_variance[len - 1] = increment_variance[len - 2];
    Ok(EnsembleStats {
        grid,
        min,
        mean,
        max,
        increment_variance,
        members: members.len(),
        failed,
    })
}

/// Moment trajectories of every sample under `control`; failed members are `Err`.
pub fn ensemble_members(
    base: &ProcessParams,
    spec: &UncertaintySpec,
    control: &ControlTrajectory,
    mode: RhsMode,
) -> Vec<Result<MomentTrajectory>> {
    (0..spec.sample_count as u64)
        .into_par_iter()
        .map(|i| {
            let p = sample_parameters(base, spec, i);
            moments::integrate_moments(&p, control, mode)
        })
        .collect()
}

pub fn ensemble_moments(
    base: &ProcessParams,
    spec: &UncertaintySpec,
    control: &ControlTrajectory,
    mode: RhsMode,
) -> Result<EnsembleStats> {
    spec.validate()?;
    let mut ok = Vec::with_capacity(spec.sample_count);
    let mut failed = 0;
    for (i, r) in ensemble_members(base, spec, control, mode).into_iter().enumerate() {
        match r {
            Ok(t) => ok.push(t),
            Err(e) => {
                log::warn!("ensemble member {i} aborted: {e}");
                failed += 1;
            }
        }
    }
    aggregate(control.grid(), &ok, failed)
}

/// Diffusion coefficients g_i(t) per grid point, indexed `[point][moment]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTable {
    pub grid: TimeGrid,
    pub g: Vec<[f64; 4]>,
}

impl DiffusionTable {
    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            g: vec![[0.0; 4]; grid.len()],
        }
    }

    pub fn series(&self, k: usize) -> Vec<f64> {
        self.g.iter().map(|v| v[k]).collect()
    }
}

/// g_i = √(var(Δy_i)/Δt), then a centered moving average over `window` points.
pub fn estimate_diffusion(stats: &EnsembleStats, window: usize) -> DiffusionTable {
    let dt = stats.grid.dt();
    let raw: Vec<[f64; 4]> = stats
        .increment_variance
        .iter()
        .map(|v| v.map(|x| (x / dt).sqrt()))
        .collect();
    DiffusionTable {
        grid: stats.grid,
        g: moving_average(&raw, window),
    }
}

/// Centered moving average, shrinking the window at the ends.
pub fn moving_average(rows: &[[f64; 4]], window: usize) -> Vec<[f64; 4]> {
    if window <= 1 {
        return rows.to_vec();
    }
    let half = window / 2;
    let n = rows.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(n);
            let mut acc = [0.0; 4];
            for r in &rows[lo..hi] {
                for k in 0..4 {
                    acc[k] += r[k];
                }
            }
            acc.map(|a| a / (hi - lo) as f64)
        })
        .collect()
}

/// Brownian motion with drift: tabulated drift F and diffusion g per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoSpec {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    pub epsilon_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRevertingSpec {
    pub eta: f64,
    pub mean: Vec<f64>,
    pub sigma_noise: f64,
    pub dt: f64,
    pub seed: u64,
    pub epsilon_sd: f64,
}

fn check_tables(grid: &TimeGrid, dt: f64, tables: &[(&str, usize)]) -> Result<()> {
    if (dt - grid.dt()).abs() > 1e-12 * grid.dt().max(1.0) {
        return Err(Error::InvalidGrid(format!(
            "path dt {dt} does not match grid spacing {}",
            grid.dt()
        )));
    }
    for (name, len) in tables {
        if *len < grid.n_steps {
            return Err(Error::LengthMismatch {
                expected: grid.n_steps,
                actual: *len,
            });
        }
        log::trace!("{name} table has {len} entries");
    }
    Ok(())
}

/// x_{i+1} = x_i + F_i·Δt + g_i·ε·√Δt for path number `path`.
pub fn ito_brownian_drift_path(spec: &ItoSpec, x0: f64, grid: &TimeGrid, path: u64) -> Result<Vec<f64>> {
    check_tables(grid, spec.dt, &[("drift", spec.drift.len()), ("diffusion", spec.diffusion.len())])?;
    if let Some(g) = spec.diffusion.iter().find(|g| !(**g >= 0.0)) {
        return Err(Error::param("diffusion", format!("must be non-negative, got {g}")));
    }
    let mut eps = EpsilonSource::new(spec.seed, PATH_STREAM_OFFSET + path, spec.epsilon_sd);
    let sq = spec.dt.sqrt();
    let mut x = x0;
    let mut out = Vec::with_capacity(grid.len());
    out.push(x);
    for i in 0..grid.n_steps {
        x += spec.drift[i] * spec.dt + spec.diffusion[i] * eps.draw() * sq;
        out.push(x);
    }
    Ok(out)
}

/// x_{i+1} = x_i + η(μ_i − x_i)Δt + σ·ε·√Δt for path number `path`.
pub fn ito_mean_reverting_path(
    spec: &MeanRevertingSpec,
    x0: f64,
    grid: &TimeGrid,
    path: u64,
) -> Result<Vec<f64>> {
    if !(spec.eta > 0.0) {
        return Err(Error::param("eta", "reversion speed must be positive"));
    }
    check_tables(grid, spec.dt, &[("mean", spec.mean.len())])?;
    if spec.eta * spec.dt > 1.0 {
        log::warn!(
            "η·Δt = {} exceeds 1; the reverting path overshoots its mean each step",
            spec.eta * spec.dt
        );
    }
    let mut eps = EpsilonSource::new(spec.seed, PATH_STREAM_OFFSET + path, spec.epsilon_sd);
    let sq = spec.dt.sqrt();
    let mut x = x0;
    let mut out = Vec::with_capacity(grid.len());
    out.push(x);
    for i in 0..grid.n_steps {
        x += spec.eta * (spec.mean[i] - x) * spec.dt + spec.sigma_noise * eps.draw() * sq;
        out.push(x);
    }
    Ok(out)
}

/// Drift equivalent of a reverting path: mean slope over `recent`.
pub fn reversion_drift_equivalent(recent: &[f64], dt: f64) -> Result<f64> {
    if recent.len() < 2 {
        return Err(Error::param("recent_path", "need at least two points"));
    }
    Ok((recent[recent.len() - 1] - recent[0]) / ((recent.len() - 1) as f64 * dt))
}

/// Forward-difference drift table `(y_{i+1} − y_i)/Δt` of a trajectory.
pub fn drift_table(traj: &MomentTrajectory) -> Vec<[f64; 4]> {
    let dt = traj.grid.dt();
    let mut out: Vec<[f64; 4]> = traj
        .states
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].to_vector(), w[1].to_vector());
            [0, 1, 2, 3].map(|k| (b[k] - a[k]) / dt)
        })
        .collect();
    out.push(*out.last().expect("at least one step"));
    out
}

/// Four moment paths driven by tabulated drift and diffusion.
///
/// With [`NoiseStreams::Shared`] one ε per step drives all four moments.
pub fn ito_moment_path(
    drift: &[[f64; 4]],
    diffusion: &DiffusionTable,
    x0: [f64; 4],
    spec: &UncertaintySpec,
    path: u64,
) -> Result<Vec<[f64; 4]>> {
    let grid = diffusion.grid;
    check_tables(&grid, grid.dt(), &[("drift", drift.len()), ("diffusion", diffusion.g.len())])?;
    let stream = PATH_STREAM_OFFSET + 4 * path;
    let mut sources: Vec<EpsilonSource> = match spec.noise_streams {
        NoiseStreams::Shared => vec![EpsilonSource::new(spec.seed, stream, spec.epsilon_sd)],
        NoiseStreams::Independent => (0..4)
            .map(|k| EpsilonSource::new(spec.seed, stream + k, spec.epsilon_sd))
            .collect(),
    };
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut x = x0;
    let mut out = Vec::with_capacity(grid.len());
    out.push(x);
    for i in 0..grid.n_steps {
        let e: Vec<f64> = sources.iter_mut().map(EpsilonSource::draw).collect();
        for k in 0..4 {
            let ek = if e.len() == 1 { e[0] } else { e[k] };
            x[k] += drift[i][k] * dt + diffusion.g[i][k] * ek * sq;
        }
        out.push(x);
    }
    Ok(out)
}
