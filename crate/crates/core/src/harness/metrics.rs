// SPDX-License-Identifier: Apache-2.0

//! Experiment metrics and their CSV files.
//!
//! * `attacks.csv`: `scenario,seed,targets,implanted_at,detected_at,latency,verdict,correct`
//! * `fpr_timeline.csv`: `window,time,phase,checked,raised,fpr`
//! * `restore.csv`: `scenario,seed,action,devices,tables_match,consistent`
//!
//! Device sets are `;`-separated ids. Missing detections leave `detected_at` and `latency` empty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::scenario::ScenarioId;
use crate::netmodel::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub targets: String,
    pub implanted_at: SimTime,
    pub detected_at: Option<SimTime>,
    pub latency: Option<SimTime>,
    pub verdict: String,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprPoint {
    pub window: usize,
    /// End of the window.
    pub time: SimTime,
    pub phase: Phase,
    pub checked: u64,
    pub raised: u64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreRecord {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub action: String,
    pub devices: usize,
    pub tables_match: bool,
    pub consistent: bool,
}

impl RestoreRecord {
    pub fn ok(&self) -> bool {
        self.tables_match && self.consistent
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub attacks: Vec<AttackRecord>,
    pub fpr_timeline: Vec<FprPoint>,
    pub restore_checks: Vec<RestoreRecord>,
}

impl ExperimentMetrics {
    pub fn detection_rate(&self) -> f64 {
        if self.attacks.is_empty() {
            return 0.0;
        }
        self.attacks.iter().filter(|a| a.correct).count() as f64 / self.attacks.len() as f64
    }

    pub fn mean_latency(&self) -> Option<f64> {
        let l: Vec<SimTime> = self.attacks.iter().filter(|a| a.correct).filter_map(|a| a.latency).collect();
        (!l.is_empty()).then(|| l.iter().sum::<SimTime>() as f64 / l.len() as f64)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `attacks.csv`, `fpr_timeline.csv` and `restore.csv` into `dir`.
pub fn emit_metrics(metrics: &ExperimentMetrics, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("attacks.csv"), &metrics.attacks)?;
    write_csv(&dir.join("fpr_timeline.csv"), &metrics.fpr_timeline)?;
    write_csv(&dir.join("restore.csv"), &metrics.restore_checks)?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn read_metrics(dir: &Path) -> Result<ExperimentMetrics> {
    Ok(ExperimentMetrics {
        attacks: read_csv(&dir.join("attacks.csv"))?,
        fpr_timeline: read_csv(&dir.join("fpr_timeline.csv"))?,
        restore_checks: read_csv(&dir.join("restore.csv"))?,
    })
}
