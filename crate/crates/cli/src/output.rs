//! CSV and JSON writers.
//!
//! Every CSV starts with `#` comment lines naming the tool version, config hash,
//! mode and seed, then a header row. Floats are written with 10 significant
//! digits so reruns are byte-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ionctl_core::moments::MomentTrajectory;
use serde::Serialize;

use crate::config::ScenarioConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Ten significant digits in scientific notation.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.9e}")
    }
}

pub struct OutputDir {
    dir: PathBuf,
    header: Vec<String>,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(cfg: &ScenarioConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)?;
        Ok(Self {
            dir: cfg.output_dir.clone(),
            header: vec![
                format!("# ionctl {VERSION}"),
                format!("# config_hash={}", cfg.hash()),
                format!("# mode={}", cfg.mode),
                format!("# seed={}", cfg.seed),
            ],
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn open(&mut self, name: &str) -> std::io::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = BufWriter::new(File::create(&path)?);
        self.written.push(path);
        Ok(f)
    }

    /// Writes the comment header, `columns`, then `rows`.
    pub fn csv(&mut self, name: &str, columns: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<()> {
        let mut f = self.open(name)?;
        for line in &self.header {
            writeln!(f, "{line}")?;
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(f);
        w.write_record(columns)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> std::io::Result<()> {
        let mut f = self.open(name)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        writeln!(f)?;
        f.flush()
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 7] = ["t_hr", "Q_lph", "psi", "mu1_hr", "mu2c_hr2", "mu3c", "J"];

/// Rows of the trajectory CSV, with a `dHdQ` column when `dh_dq` is given.
pub fn trajectory_rows(traj: &MomentTrajectory, c0_g_per_l: f64, dh_dq: Option<&[f64]>) -> Vec<Vec<String>> {
    let js = traj.objective_series(c0_g_per_l);
    traj.states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![
                num(traj.grid.time(i)),
                num(traj.flows[i]),
                num(s.mu0),
                num(s.mu1),
                num(s.mu2c),
                num(s.mu3c),
                num(js[i]),
            ];
            if let Some(g) = dh_dq {
                row.push(num(g[i]));
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_significant_digits() {
        assert_eq!(num(0.42), "4.200000000e-1");
        assert_eq!(num(-1234.5678901234), "-1.234567890e3");
        assert_eq!(num(f64::NAN), "nan");
    }

    #[test]
    fn csv_has_header_and_lf() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig {
            output_dir: tmp.path().to_path_buf(),
            seed: 9,
            ..ScenarioConfig::default()
        };
        let mut out = OutputDir::create(&cfg).unwrap();
        out.csv("a.csv", &["t_hr", "x"], vec![vec![num(0.0), num(1.0)]]).unwrap();
        let text = std::fs::read_to_string(tmp.path().join("a.csv")).unwrap();
        assert!(text.contains("# seed=9\n"));
        assert!(text.contains("t_hr,x\n0.000000000e0,1.000000000e0\n"));
        assert!(!text.contains('\r'));
        assert_eq!(out.written().len(), 1);
    }
}
