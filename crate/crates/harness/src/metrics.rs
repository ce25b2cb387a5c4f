//! Line-delimited JSON records. Every line is one self-describing object
//! whose `"event"` field names its kind:
//!
//! | event        | written by            | payload                                        |
//! |--------------|-----------------------|------------------------------------------------|
//! | `epoch`      | training loops        | stage, seed, epoch, step, lr, train losses, dev |
//! | `final`      | training loops        | stage, seed, dev                               |
//! | `sweep`      | sweep-gamma/sweep-tau | setting, mode, γ, τ, seed, dev, final loss     |
//! | `head`       | diagnose              | per-head cover ratio, ranking loss and ratios  |
//! | `range`      | diagnose              | per-token (min, max) of the attention output   |
//! | `distance`   | diagnose              | per-layer SA-GEN / SA-PROP distances           |
//! | `map`        | diagnose              | one raw attention map                          |
//! | `summary`    | diagnose              | medians over heads                             |
//! | `eigen`      | hessian               | one power-iteration estimate per seed          |
//! | `gradcheck`  | gradcheck             | worst / median relative error per case family  |

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use kdqat_core::diagnostics::{DistanceRecord, EigenEstimate, HeadRecord, RangeRecord};
use kdqat_core::gradsuite::SuiteRecord;
use kdqat_core::LossBreakdown;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

/// Dev-set quality: accuracy for classification, mean squared error for
/// regression.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DevMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
}

impl DevMetrics {
    /// Higher is better.
    pub fn score(&self) -> f64 {
        self.accuracy.or(self.mse.map(|m| -m)).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Record {
    Epoch {
        stage: String,
        seed: u64,
        epoch: usize,
        step: u64,
        lr: f32,
        train: LossBreakdown,
        dev: DevMetrics,
    },
    Final {
        stage: String,
        seed: u64,
        dev: DevMetrics,
    },
    Sweep {
        sweep: String,
        setting: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        mode: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        gamma: Option<f32>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        tau: Option<f32>,
        seed: u64,
        dev: DevMetrics,
        final_loss: f64,
        run_dir: String,
    },
    Head(HeadRecord),
    Range(RangeRecord),
    Distance(DistanceRecord),
    Map {
        model: String,
        layer: usize,
        head: usize,
        rows: Vec<Vec<f32>>,
    },
    Summary {
        examples: usize,
        median_ranking_loss: f64,
        median_cover_length_ratio: f64,
        mean_gen_dist: f64,
        mean_prop_dist: f64,
    },
    Eigen {
        seed: u64,
        #[serde(flatten)]
        estimate: EigenEstimate,
    },
    Gradcheck(GradcheckLine),
}

/// Owned mirror of [`SuiteRecord`] that can be read back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckLine {
    pub kind: String,
    pub name: String,
    pub seeds: u64,
    pub floor: String,
    pub worst_rel: f64,
    pub median_rel: f64,
    pub worst_abs: f64,
}

impl From<SuiteRecord> for GradcheckLine {
    fn from(r: SuiteRecord) -> Self {
        GradcheckLine {
            kind: r.kind.into(),
            name: r.name.into(),
            seeds: r.seeds,
            floor: r.floor,
            worst_rel: r.worst_rel,
            median_rel: r.median_rel,
            worst_abs: r.worst_abs,
        }
    }
}

/// Append-only record stream, mirrored in memory.
#[derive(Debug, Default)]
pub struct Metrics {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<Record>,
}

impl Metrics {
    pub fn memory() -> Self {
        Metrics::default()
    }

    /// Opens `path`, truncating unless `append`.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Metrics {
            path: Some(path.to_path_buf()),
            file: Some(file),
            records: Vec::new(),
        })
    }

    pub fn emit(&mut self, record: Record) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            let path = self.path.clone().unwrap_or_default();
            f.write_all(line.as_bytes()).map_err(io_err(path))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Records emitted through this handle (not earlier file contents).
    pub fn records(&self) -> &[Record] {
        &self.records
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
