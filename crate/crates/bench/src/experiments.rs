//! The four experiments. Each renders its datasets in memory, trains and
//! scores regressors, audits train/test episode separation and returns a
//! report. Wall-clock timings go to a separate file so that reports depend
//! only on the experiment description.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tactile_core::dataset::{DatasetConfig, STRATA};
use tactile_core::estimator::metrics::{evaluate, write_report, ErrorRow, MetricsReport, Stat};
use tactile_core::estimator::regressor::{Regressor, RegressorConfig};
use tactile_core::estimator::samples::SampleSet;
use tactile_core::render::SensorInstance;

use crate::config::{derive_seed, resize, ExperimentName, ExperimentSpec};
use crate::error::{io_err, BenchError};
use crate::report::*;

/// Seconds spent per phase, written next to the report.
#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
}

impl Timings {
    fn time<T>(&mut self, phase: impl Into<String>, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.phases.push((phase.into(), t.elapsed().as_secs_f64()));
        out
    }
}

struct Outcome {
    results: Results,
    audits: Vec<Audit>,
    warnings: Vec<String>,
}

/// Runs `spec`, writes `report.json`, metric tables and `timings.json`
/// under its output directory, and returns the report.
pub fn run(spec: &ExperimentSpec) -> Result<Report, BenchError> {
    spec.validate()?;
    let dir = spec.output_dir();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut timings = Timings::default();
    let outcome = match spec.name {
        ExperimentName::ConfigSweep => config_sweep(spec, &dir, &mut timings)?,
        ExperimentName::MultiIndenter => multi_indenter(spec, &dir, &mut timings)?,
        ExperimentName::DataEfficiency => data_efficiency(spec, &mut timings)?,
        ExperimentName::Transfer => transfer(spec, &mut timings)?,
    };
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let hardware_reference = match spec.name {
        ExperimentName::ConfigSweep | ExperimentName::MultiIndenter => Some(HardwareReference::in_distribution()),
        ExperimentName::Transfer => Some(HardwareReference::zero_shot_transfer()),
        ExperimentName::DataEfficiency => None,
    };
    let report = Report {
        schema: REPORT_SCHEMA,
        experiment: spec.name,
        seed: spec.seed,
        provenance: Provenance::new(spec),
        audits: outcome.audits,
        warnings: outcome.warnings,
        hardware_reference,
        results: outcome.results,
    };
    report.write(&dir)?;
    let tpath = dir.join("timings.json");
    std::fs::write(&tpath, serde_json::to_string_pretty(&timings).expect("timings serialize"))
        .map_err(io_err(&tpath))?;
    Ok(report)
}

fn simulate(config: &DatasetConfig, timings: &mut Timings) -> Result<SampleSet, BenchError> {
    let name = format!("render {}", config.name);
    Ok(timings.time(name, || SampleSet::simulate(config))?)
}

/// Copy of `config` with its own name and seed, sized to `records` frames.
fn held_out(config: &DatasetConfig, name: &str, seed: u64, records: usize) -> DatasetConfig {
    let mut c = resize(config.clone(), records, config.frames_per_episode);
    c.name = name.into();
    c.seed = seed;
    c
}

fn truncate(mut set: SampleSet, n: usize) -> SampleSet {
    set.samples.truncate(n);
    set
}

/// `n` records drawn from whole episodes of `pool` in a seeded order; the
/// last episode may be cut short.
pub fn subset(pool: &SampleSet, n: usize, seed: u64) -> SampleSet {
    let mut episodes = pool.episode_ids();
    episodes.sort();
    episodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut by_episode: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.samples.iter().enumerate() {
        by_episode.entry(s.record.episode_id.as_str()).or_default().push(i);
    }
    let mut picked = Vec::with_capacity(n);
    'outer: for e in &episodes {
        for &i in &by_episode[e.as_str()] {
            if picked.len() == n {
                break 'outer;
            }
            picked.push(i);
        }
    }
    let keep: HashSet<&str> = picked.into_iter().map(|i| pool.samples[i].record.id.as_str()).collect();
    pool.filter(|s| keep.contains(s.record.id.as_str()))
}

fn estimator(spec: &ExperimentSpec, seed: u64) -> RegressorConfig {
    RegressorConfig {
        seed,
        ..spec.estimator.clone()
    }
}

fn score(model: &mut Regressor, test: &SampleSet) -> Result<(MetricsReport, Vec<ErrorRow>), BenchError> {
    Ok(evaluate(model, test)?)
}

fn config_sweep(spec: &ExperimentSpec, dir: &Path, timings: &mut Timings) -> Result<Outcome, BenchError> {
    let s = spec.sweep.as_ref().expect("validated");
    let mut rows = Vec::new();
    let mut audits = Vec::new();
    for conf in &s.configurations {
        let label = conf.label();
        let mut dataset = s.dataset.clone();
        dataset.name = label.clone();
        dataset.instances = vec![SensorInstance::nominal(label.clone(), conf.illumination, conf.markers)];
        let set = simulate(&dataset, timings)?;
        let (train, test) = set.split(s.train_fraction, derive_seed(spec.seed, 10))?;
        audits.push(Audit::check(format!("{label}: train"), &[&train], &test)?);
        let mut model = Regressor::new(estimator(spec, spec.seed))?;
        timings.time(format!("train {label}"), || model.finetune(&train))?;
        let (metrics, errors) = score(&mut model, &test)?;
        write_report(&dir.join(&label), &metrics, &errors)?;
        rows.push(SweepRow {
            configuration: label,
            illumination: conf.illumination,
            markers: conf.markers,
            train_samples: train.len(),
            test_samples: test.len(),
            metrics,
        });
    }
    let mut comparison = Vec::new();
    for m in rows.iter().filter(|r| r.markers) {
        if let Some(c) = rows.iter().find(|r| !r.markers && r.illumination == m.illumination) {
            let (mp, cp) = (
                m.metrics.position.map_or(f64::INFINITY, |s| s.mean),
                c.metrics.position.map_or(f64::INFINITY, |s| s.mean),
            );
            comparison.push(MarkerComparison {
                illumination: m.illumination,
                markers_position_mm: mp,
                clear_position_mm: cp,
                markers_not_worse: mp <= cp,
            });
        }
    }
    Ok(Outcome {
        results: Results::ConfigSweep(SweepResult { rows, comparison }),
        audits,
        warnings: Vec::new(),
    })
}

fn multi_indenter(spec: &ExperimentSpec, dir: &Path, timings: &mut Timings) -> Result<Outcome, BenchError> {
    let m = spec.multi.as_ref().expect("validated");
    let mut warnings = Vec::new();
    let bins = STRATA.0 * STRATA.1;
    if m.test_points < bins {
        warnings.push(format!(
            "{} test points for {bins} surface bins: the heatmap will have empty bins",
            m.test_points
        ));
    }
    let train = simulate(&m.dataset, timings)?;
    let test_cfg = held_out(&m.dataset, "multi-test", derive_seed(spec.seed, 20), m.test_points);
    let test = truncate(simulate(&test_cfg, timings)?, m.test_points);
    let audits = vec![Audit::check("train", &[&train], &test)?];
    let mut model = Regressor::new(estimator(spec, spec.seed))?;
    timings.time("train", || model.finetune(&train))?;
    let (metrics, errors) = score(&mut model, &test)?;
    write_report(dir, &metrics, &errors)?;
    let mut per_indenter = Vec::new();
    for ind in &m.dataset.indenters {
        let name = ind.descriptor();
        let rows: Vec<&ErrorRow> = errors.iter().filter(|r| r.indenter == name).collect();
        per_indenter.push(IndenterSummary {
            indenter: name,
            position: Stat::of(&rows.iter().map(|r| r.position).collect::<Vec<_>>()),
            force: Stat::of(&rows.iter().filter_map(|r| r.force).collect::<Vec<_>>()),
            torsion: Stat::of(&rows.iter().filter_map(|r| r.torsion).collect::<Vec<_>>()),
        });
    }
    Ok(Outcome {
        results: Results::MultiIndenter(MultiResult {
            train_samples: train.len(),
            test_points: test.len(),
            metrics,
            per_indenter,
        }),
        audits,
        warnings,
    })
}

/// Smallest size whose error is at or below `threshold`.
pub fn required_size(sizes: &[usize], errors: &[Option<f64>], threshold: f64) -> Option<usize> {
    sizes
        .iter()
        .zip(errors)
        .filter(|(_, e)| e.is_some_and(|e| e <= threshold))
        .map(|(&n, _)| n)
        .min()
}

fn curve(sizes: &[usize], runs: &[Vec<Option<ErrorTriple>>]) -> Vec<CurvePoint> {
    sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let at: Vec<&ErrorTriple> = runs.iter().filter_map(|r| r[k].as_ref()).collect();
            CurvePoint {
                size,
                position: across(&at.iter().map(|e| e.position_mm).collect::<Vec<_>>()),
                force: across(&at.iter().map(|e| e.force_n).collect::<Vec<_>>()),
                torsion: across(&at.iter().map(|e| e.torsion_nm).collect::<Vec<_>>()),
            }
        })
        .collect()
}

fn data_efficiency(spec: &ExperimentSpec, timings: &mut Timings) -> Result<Outcome, BenchError> {
    let e = spec.efficiency.as_ref().expect("validated");
    let pretrain = simulate(&e.pretrain, timings)?;
    let pool = simulate(&e.pool, timings)?;
    let test_cfg = held_out(&e.pool, "efficiency-test", derive_seed(spec.seed, 30), e.test_size);
    let test = truncate(simulate(&test_cfg, timings)?, e.test_size);
    let audits = vec![
        Audit::check("pool", &[&pool], &test)?,
        Audit::check("pretrain", &[&pretrain], &test)?,
    ];

    let mut scratch_runs = Vec::new();
    let mut pretrained_runs = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &e.seeds {
        let base = Regressor::new(estimator(spec, seed))?;
        let mut pre = base.clone();
        timings.time(format!("pretrain seed {seed}"), || pre.pretrain_localization(&pretrain))?;
        let mut scratch = Vec::new();
        let mut warm = Vec::new();
        for &n in &e.train_sizes {
            let train = subset(&pool, n, derive_seed(seed, n as u64));
            if n == 0 {
                scratch.push(None);
            } else {
                let mut m = base.clone();
                timings.time(format!("scratch {n} seed {seed}"), || m.finetune(&train))?;
                scratch.push(Some(ErrorTriple::from_metrics(&score(&mut m, &test)?.0)));
            }
            let mut m = pre.clone();
            timings.time(format!("finetune {n} seed {seed}"), || m.finetune(&train))?;
            warm.push(Some(ErrorTriple::from_metrics(&score(&mut m, &test)?.0)));
        }
        let pos = |r: &[Option<ErrorTriple>]| -> Vec<Option<f64>> {
            r.iter().map(|t| t.as_ref().and_then(|t| t.position_mm)).collect()
        };
        let (sp, pp) = (pos(&scratch), pos(&warm));
        per_seed.push(SeedCurves {
            seed,
            scratch_required: required_size(&e.train_sizes, &sp, e.threshold_mm),
            pretrained_required: required_size(&e.train_sizes, &pp, e.threshold_mm),
            scratch: sp,
            pretrained: pp,
        });
        scratch_runs.push(scratch);
        pretrained_runs.push(warm);
    }
    let scratch = curve(&e.train_sizes, &scratch_runs);
    let pretrained = curve(&e.train_sizes, &pretrained_runs);
    let headline_delta_mm = e
        .train_sizes
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .min_by_key(|(_, &n)| n)
        .and_then(|(k, _)| Some(scratch[k].position?.mean - pretrained[k].position?.mean));
    Ok(Outcome {
        results: Results::DataEfficiency(EfficiencyResult {
            threshold_mm: e.threshold_mm,
            train_sizes: e.train_sizes.clone(),
            scratch,
            pretrained,
            per_seed,
            headline_delta_mm,
        }),
        audits,
        warnings: Vec::new(),
    })
}

fn transfer(spec: &ExperimentSpec, timings: &mut Timings) -> Result<Outcome, BenchError> {
    let t = spec.transfer.as_ref().expect("validated");
    let source = simulate(&t.source, timings)?;
    let (src_train, src_test) = source.split(1.0 - t.source_test_fraction, derive_seed(spec.seed, 40))?;
    let mut target_cfg = t.source.clone();
    target_cfg.instances = vec![t.target.clone()];
    let max_ft = t.finetune_sizes.iter().copied().max().unwrap_or(0);
    let pool = if max_ft > 0 {
        let c = held_out(&target_cfg, "target-pool", derive_seed(spec.seed, 41), max_ft);
        simulate(&c, timings)?
    } else {
        SampleSet::default()
    };
    let test_cfg = held_out(&target_cfg, "target-test", derive_seed(spec.seed, 42), t.test_size);
    let test = truncate(simulate(&test_cfg, timings)?, t.test_size);
    if src_train.samples.iter().any(|s| s.record.sensor_id == t.target.id) {
        return Err(BenchError::Protocol(format!("target {} appears in training data", t.target.id)));
    }
    let audits = vec![
        Audit::check("source", &[&src_train], &src_test)?,
        Audit::check("source+target", &[&src_train, &pool], &test)?,
    ];

    let mut per_seed = Vec::new();
    for &seed in &t.seeds {
        let mut model = Regressor::new(estimator(spec, seed))?;
        timings.time(format!("source seed {seed}"), || model.finetune(&src_train))?;
        let in_distribution = ErrorTriple::from_metrics(&score(&mut model, &src_test)?.0);
        let mut rows = Vec::new();
        for &n in &t.finetune_sizes {
            let mut m = model.clone();
            if n > 0 {
                let ft = subset(&pool, n, derive_seed(seed, n as u64));
                timings.time(format!("finetune {n} seed {seed}"), || m.finetune(&ft))?;
            }
            rows.push(ErrorTriple::from_metrics(&score(&mut m, &test)?.0));
        }
        per_seed.push(TransferSeed {
            seed,
            in_distribution,
            rows,
        });
    }
    let row = |size: usize, pick: &dyn Fn(&TransferSeed) -> &ErrorTriple| TransferRow {
        finetune_size: size,
        position: across(&per_seed.iter().map(|s| pick(s).position_mm).collect::<Vec<_>>()),
        force: across(&per_seed.iter().map(|s| pick(s).force_n).collect::<Vec<_>>()),
        torsion: across(&per_seed.iter().map(|s| pick(s).torsion_nm).collect::<Vec<_>>()),
    };
    let in_distribution = row(0, &|s| &s.in_distribution);
    let rows = t
        .finetune_sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| row(n, &|s| &s.rows[k]))
        .collect();
    Ok(Outcome {
        results: Results::Transfer(TransferResult {
            target: t.target.id.clone(),
            in_distribution,
            rows,
            per_seed,
        }),
        audits,
        warnings: Vec::new(),
    })
}
