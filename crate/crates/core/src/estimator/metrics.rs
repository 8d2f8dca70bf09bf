//! Error statistics of contact-state estimates.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::regressor::Regressor;
use super::samples::SampleSet;
use super::{EstimatorError, StateEstimate};
use crate::dataset::{label_uv, LabeledRecord, STRATA};
use crate::geometry::ShellGeometry;

/// Width of the force-magnitude bins, N.
pub const FORCE_BIN: f64 = 0.5;
/// Upper edge of the last force bin, N. Larger forces fall in the last bin.
pub const FORCE_BIN_MAX: f64 = 15.0;

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Per-frame errors. Force, torsion and depth are absent when the record
/// has no such label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub id: String,
    pub episode_id: String,
    pub indenter: String,
    /// Euclidean position error, mm.
    pub position: f64,
    /// Norm of the force vector error, N.
    pub force: Option<f64>,
    /// Difference of force magnitudes, N.
    pub force_magnitude: Option<f64>,
    /// True force magnitude, N.
    pub true_force: Option<f64>,
    pub torsion: Option<f64>,
    pub depth: Option<f64>,
    /// Equal-area bin of the true contact site.
    pub bin: (usize, usize),
}

pub fn error_rows(predictions: &[StateEstimate], records: &[LabeledRecord], geom: &ShellGeometry) -> Vec<ErrorRow> {
    assert_eq!(predictions.len(), records.len(), "one prediction per record");
    predictions
        .iter()
        .zip(records)
        .map(|(p, r)| {
            let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            ErrorRow {
                id: r.id.clone(),
                episode_id: r.episode_id.clone(),
                indenter: r.indenter.clone(),
                position: norm(sub(p.x, r.x)),
                force: r.f.map(|f| norm(sub(p.f, f))),
                force_magnitude: r.f.map(|f| (norm(p.f) - norm(f)).abs()),
                true_force: r.f.map(norm),
                torsion: r.tau.map(|t| (p.tau - t).abs()),
                depth: r.d.map(|d| (p.d - d).abs()),
                bin: geom.equal_area_bin(label_uv(geom, &r.x), STRATA.0, STRATA.1),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceBin {
    pub lo: f64,
    pub hi: f64,
    pub position: Option<Stat>,
    pub force: Option<Stat>,
}

/// Mean errors per equal-area surface bin, row-major by axial bin. Empty
/// bins are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub n_azimuth: usize,
    pub n_axial: usize,
    pub counts: Vec<usize>,
    pub position: Vec<Option<f64>>,
    pub force: Vec<Option<f64>>,
    pub torsion: Vec<Option<f64>>,
}

impl Heatmap {
    fn build(rows: &[&ErrorRow]) -> Self {
        let (na, nx) = STRATA;
        let mut counts = vec![0usize; na * nx];
        let mut sums = vec![[(0f64, 0usize); 3]; na * nx];
        for r in rows {
            let k = r.bin.1 * na + r.bin.0;
            counts[k] += 1;
            for (slot, v) in sums[k].iter_mut().zip([Some(r.position), r.force, r.torsion]) {
                if let Some(v) = v {
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
        }
        let mean = |m: usize| -> Vec<Option<f64>> {
            sums.iter()
                .map(|s| (s[m].1 > 0).then(|| s[m].0 / s[m].1 as f64))
                .collect()
        };
        Self {
            n_azimuth: na,
            n_axial: nx,
            counts,
            position: mean(0),
            force: mean(1),
            torsion: mean(2),
        }
    }

    /// The named metric's grid: `position`, `force` or `torsion`.
    pub fn metric(&self, name: &str) -> Option<&[Option<f64>]> {
        match name {
            "position" => Some(&self.position),
            "force" => Some(&self.force),
            "torsion" => Some(&self.torsion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub position: Option<Stat>,
    pub force: Option<Stat>,
    pub force_magnitude: Option<Stat>,
    pub torsion: Option<Stat>,
    pub depth: Option<Stat>,
    pub force_bins: Vec<ForceBin>,
    pub heatmap: Heatmap,
}

impl MetricsReport {
    /// Aggregates rows. Rows are sorted by id first, so the result does not
    /// depend on input order.
    pub fn from_rows(rows: &[ErrorRow]) -> Self {
        let mut sorted: Vec<&ErrorRow> = rows.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let pick = |f: &dyn Fn(&ErrorRow) -> Option<f64>| -> Vec<f64> { sorted.iter().filter_map(|r| f(r)).collect() };

        let nbins = (FORCE_BIN_MAX / FORCE_BIN).round() as usize;
        let force_bins = (0..nbins)
            .map(|k| {
                let in_bin: Vec<&&ErrorRow> = sorted
                    .iter()
                    .filter(|r| {
                        r.true_force
                            .is_some_and(|f| ((f / FORCE_BIN).floor() as usize).min(nbins - 1) == k)
                    })
                    .collect();
                ForceBin {
                    lo: k as f64 * FORCE_BIN,
                    hi: (k + 1) as f64 * FORCE_BIN,
                    position: Stat::of(&in_bin.iter().map(|r| r.position).collect::<Vec<_>>()),
                    force: Stat::of(&in_bin.iter().filter_map(|r| r.force).collect::<Vec<_>>()),
                }
            })
            .collect();

        Self {
            samples: rows.len(),
            position: Stat::of(&pick(&|r| Some(r.position))),
            force: Stat::of(&pick(&|r| r.force)),
            force_magnitude: Stat::of(&pick(&|r| r.force_magnitude)),
            torsion: Stat::of(&pick(&|r| r.torsion)),
            depth: Stat::of(&pick(&|r| r.depth)),
            force_bins,
            heatmap: Heatmap::build(&sorted),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per metric: `metric,mean,std,count`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,std,count\n");
        for (name, s) in [
            ("position_mm", self.position),
            ("force_n", self.force),
            ("force_magnitude_n", self.force_magnitude),
            ("torsion_nm", self.torsion),
            ("depth_mm", self.depth),
        ] {
            if let Some(s) = s {
                let _ = writeln!(out, "{name},{},{},{}", s.mean, s.std, s.count);
            }
        }
        out
    }
}

impl MetricsReport {
    /// One row per force bin: `lo,hi,count,position_mean,position_std,force_mean,force_std`.
    pub fn force_bins_csv(&self) -> String {
        let mut out = String::from("lo_n,hi_n,count,position_mean_mm,position_std_mm,force_mean_n,force_std_n\n");
        let cell = |s: Option<Stat>| s.map(|s| (s.mean.to_string(), s.std.to_string())).unwrap_or_default();
        for b in &self.force_bins {
            let (pm, ps) = cell(b.position);
            let (fm, fs) = cell(b.force);
            let count = b.position.map_or(0, |s| s.count);
            let _ = writeln!(out, "{},{},{count},{pm},{ps},{fm},{fs}", b.lo, b.hi);
        }
        out
    }

    /// One row per surface bin: `azimuth_bin,axial_bin,count,position,force,torsion`.
    pub fn heatmap_csv(&self) -> String {
        let h = &self.heatmap;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("azimuth_bin,axial_bin,count,position_mm,force_n,torsion_nm\n");
        for j in 0..h.n_axial {
            for i in 0..h.n_azimuth {
                let k = j * h.n_azimuth + i;
                let _ = writeln!(
                    out,
                    "{i},{j},{},{},{},{}",
                    h.counts[k],
                    opt(h.position[k]),
                    opt(h.force[k]),
                    opt(h.torsion[k])
                );
            }
        }
        out
    }
}

/// Per-frame CSV of `rows`.
pub fn rows_csv(rows: &[ErrorRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("id,episode_id,indenter,position_mm,force_n,force_magnitude_n,true_force_n,torsion_nm,depth_mm,bin_azimuth,bin_axial\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.episode_id,
            r.indenter,
            r.position,
            opt(r.force),
            opt(r.force_magnitude),
            opt(r.true_force),
            opt(r.torsion),
            opt(r.depth),
            r.bin.0,
            r.bin.1
        );
    }
    out
}

/// Writes `metrics.json`, the summary, force-bin, heatmap and per-frame
/// CSV tables into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport, rows: &[ErrorRow]) -> Result<(), EstimatorError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), report.to_json())?;
    std::fs::write(dir.join("metrics.csv"), report.summary_csv())?;
    std::fs::write(dir.join("force_bins.csv"), report.force_bins_csv())?;
    std::fs::write(dir.join("heatmap.csv"), report.heatmap_csv())?;
    std::fs::write(dir.join("errors.csv"), rows_csv(rows))?;
    Ok(())
}

/// Scores `model` on `test`, refusing test episodes seen in training.
pub fn evaluate(model: &mut Regressor, test: &SampleSet) -> Result<(MetricsReport, Vec<ErrorRow>), EstimatorError> {
    if test.is_empty() {
        return Err(EstimatorError::Empty("test set".into()));
    }
    model.check_disjoint(test)?;
    let preds = model.predict_set(test)?;
    let records: Vec<LabeledRecord> = test.samples.iter().map(|s| s.record.clone()).collect();
    let rows = error_rows(&preds, &records, &test.geometry);
    Ok((MetricsReport::from_rows(&rows), rows))
}
