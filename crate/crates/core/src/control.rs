//! Uniform time grids and bounded flow schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n_steps + 1` equally spaced points on `[0, t_final]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, n_steps: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::InvalidGrid(format!("t_final must be positive, got {t_final}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        Ok(Self { t_final, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    /// Δt < t_final/500, the resolution the sweeps are meant to run at.
    pub fn satisfies_step_rule(&self) -> bool {
        self.n_steps > 500
    }

    /// Index of the grid point nearest to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: f64) -> usize {
        let i = (t / self.dt()).round();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.n_steps)
        }
    }
}

/// Flow rate on a time grid, always within `[q_min, q_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTrajectory {
    grid: TimeGrid,
    flows: Vec<f64>,
    q_min: f64,
    q_max: f64,
}

impl ControlTrajectory {
    pub fn constant(grid: TimeGrid, flow: f64, q_min: f64, q_max: f64) -> Result<Self> {
        Self::from_flows(grid, vec![flow; grid.len()], q_min, q_max)
    }

    /// Builds a schedule by sampling `f` at every grid time.
    pub fn from_fn(
        grid: TimeGrid,
        q_min: f64,
        q_max: f64,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let flows = grid.times().into_iter().map(f).collect();
        Self::from_flows(grid, flows, q_min, q_max)
    }

    pub fn from_flows(grid: TimeGrid, flows: Vec<f64>, q_min: f64, q_max: f64) -> Result<Self> {
        if flows.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: flows.len(),
            });
        }
        if !(q_min > 0.0 && q_min <= q_max) {
            return Err(Error::InvalidGrid(format!(
                "flow bounds [{q_min}, {q_max}] are not an interval of positive flows"
            )));
        }
        if let Some((i, q)) = flows
            .iter()
            .enumerate()
            .find(|(_, q)| !(**q >= q_min && **q <= q_max))
        {
            return Err(Error::InvalidGrid(format!(
                "flow {q} at index {i} outside [{q_min}, {q_max}]"
            )));
        }
        Ok(Self {
            grid,
            flows,
            q_min,
            q_max,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn flows(&self) -> &[f64] {
        &self.flows
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.q_min, self.q_max)
    }

    pub fn flow(&self, i: usize) -> f64 {
        self.flows[i]
    }

    /// Adds `delta[i]` to each flow and clips to the bounds.
    pub fn step_clipped(&mut self, delta: &[f64]) {
        for (q, d) in self.flows.iter_mut().zip(delta) {
            *q = (*q + d).clamp(self.q_min, self.q_max);
        }
    }

    pub fn max_abs_diff(&self, other: &ControlTrajectory) -> f64 {
        self.flows
            .iter()
            .zip(&other.flows)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spacing_and_lookup() {
        let g = TimeGrid::new(300.0, 1000).unwrap();
        assert_eq!(g.len(), 1001);
        assert!((g.dt() - 0.3).abs() < 1e-15);
        assert!(g.satisfies_step_rule());
        assert!(!TimeGrid::new(300.0, 500).unwrap().satisfies_step_rule());
        assert_eq!(g.nearest_index(-4.0), 0);
        assert_eq!(g.nearest_index(150.1), 500);
        assert_eq!(g.nearest_index(1e9), 1000);
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(10.0, 0).is_err());
    }

    #[test]
    fn updates_are_clipped() {
        let g = TimeGrid::new(10.0, 4).unwrap();
        let mut c = ControlTrajectory::constant(g, 0.5, 0.42, 1.27).unwrap();
        c.step_clipped(&[-1.0, 0.1, 5.0, 0.0, -0.05]);
        assert_eq!(c.flows(), &[0.42, 0.6, 1.27, 0.5, 0.45]);
    }

    #[test]
    fn rejects_out_of_bounds_and_wrong_length() {
        let g = TimeGrid::new(10.0, 2).unwrap();
        assert!(ControlTrajectory::from_flows(g, vec![0.5, 0.5], 0.42, 1.27).is_err());
        assert!(ControlTrajectory::from_flows(g, vec![0.5, 2.0, 0.5], 0.42, 1.27).is_err());
    }
}
