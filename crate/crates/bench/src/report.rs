//! Versioned experiment reports.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tactile_core::estimator::metrics::{MetricsReport, Stat};
use tactile_core::estimator::samples::SampleSet;
use tactile_core::render::Illumination;

use crate::config::{ExperimentName, ExperimentSpec};
use crate::error::{io_err, BenchError};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software: String,
    pub version: String,
    pub spec: ExperimentSpec,
}

impl Provenance {
    pub fn new(spec: &ExperimentSpec) -> Self {
        Self {
            software: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            spec: spec.clone(),
        }
    }
}

/// Episode-id check between one training phase and the test set it was
/// scored on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub phase: String,
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub overlap: usize,
}

impl Audit {
    /// Audits `train` against `test`; any shared episode is a leakage error.
    pub fn check(phase: impl Into<String>, train: &[&SampleSet], test: &SampleSet) -> Result<Audit, BenchError> {
        let phase = phase.into();
        let train_ids: HashSet<String> = train.iter().flat_map(|s| s.episode_ids()).collect();
        let test_ids = test.episode_ids();
        let overlap = test_ids.iter().filter(|e| train_ids.contains(*e)).count();
        if overlap > 0 {
            return Err(BenchError::Leakage(format!(
                "{phase}: {overlap} test episode(s) also used for training"
            )));
        }
        Ok(Audit {
            phase,
            train_episodes: train_ids.len(),
            test_episodes: test_ids.len(),
            overlap,
        })
    }
}

/// Published results measured on physical sensors. They are included as
/// context and are not expected to match simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareReference {
    pub position_mm: (f64, Option<f64>),
    pub force_n: (f64, Option<f64>),
    pub torsion_nm: (f64, Option<f64>),
    pub depth_mm: Option<(f64, f64)>,
    pub note: String,
}

impl HardwareReference {
    pub fn in_distribution() -> Self {
        Self {
            position_mm: (0.59, None),
            force_n: (0.15, None),
            torsion_nm: (0.0002, None),
            depth_mm: Some((0.15, 0.14)),
            note: "hardware sensor, single 3 mm sphere, in-distribution test".into(),
        }
    }

    pub fn zero_shot_transfer() -> Self {
        Self {
            position_mm: (3.49, Some(0.41)),
            force_n: (2.06, Some(0.23)),
            torsion_nm: (0.0068, Some(0.0016)),
            depth_mm: None,
            note: "hardware sensor, zero-shot on a newly fabricated unit".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub configuration: String,
    pub illumination: Illumination,
    pub markers: bool,
    pub train_samples: usize,
    pub test_samples: usize,
    pub metrics: MetricsReport,
}

/// Markers against clear shell under the same illumination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerComparison {
    pub illumination: Illumination,
    pub markers_position_mm: f64,
    pub clear_position_mm: f64,
    pub markers_not_worse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub comparison: Vec<MarkerComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndenterSummary {
    pub indenter: String,
    pub position: Option<Stat>,
    pub force: Option<Stat>,
    pub torsion: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiResult {
    pub train_samples: usize,
    pub test_points: usize,
    pub metrics: MetricsReport,
    pub per_indenter: Vec<IndenterSummary>,
}

/// One training size of a learning curve, aggregated over seeds. `None`
/// where the point is undefined (no training data and no pre-training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub position: Option<Stat>,
    pub force: Option<Stat>,
    pub torsion: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCurves {
    pub seed: u64,
    /// Mean position error per training size, mm.
    pub scratch: Vec<Option<f64>>,
    pub pretrained: Vec<Option<f64>>,
    pub scratch_required: Option<usize>,
    pub pretrained_required: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyResult {
    pub threshold_mm: f64,
    pub train_sizes: Vec<usize>,
    pub scratch: Vec<CurvePoint>,
    pub pretrained: Vec<CurvePoint>,
    pub per_seed: Vec<SeedCurves>,
    /// Scratch minus pre-trained mean position error at the smallest
    /// nonzero size, mm.
    pub headline_delta_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTriple {
    pub position_mm: Option<f64>,
    pub force_n: Option<f64>,
    pub torsion_nm: Option<f64>,
}

impl ErrorTriple {
    pub fn from_metrics(m: &MetricsReport) -> Self {
        Self {
            position_mm: m.position.map(|s| s.mean),
            force_n: m.force.map(|s| s.mean),
            torsion_nm: m.torsion.map(|s| s.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSeed {
    pub seed: u64,
    pub in_distribution: ErrorTriple,
    /// One entry per fine-tune size.
    pub rows: Vec<ErrorTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub finetune_size: usize,
    pub position: Option<Stat>,
    pub force: Option<Stat>,
    pub torsion: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub target: String,
    pub in_distribution: TransferRow,
    pub rows: Vec<TransferRow>,
    pub per_seed: Vec<TransferSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Results {
    ConfigSweep(SweepResult),
    MultiIndenter(MultiResult),
    DataEfficiency(EfficiencyResult),
    Transfer(TransferResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub experiment: ExperimentName,
    pub seed: u64,
    pub provenance: Provenance,
    pub audits: Vec<Audit>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware_reference: Option<HardwareReference>,
    pub results: Results,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()).map_err(io_err(&path))
    }
}

/// Mean/std over seeds of one metric, skipping missing values.
pub fn across(values: &[Option<f64>]) -> Option<Stat> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    Stat::of(&present)
}
