//! In-memory training sets: 224x224 frames kept as 8-bit planes next to
//! their labels, plus one reference frame per sensor.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use super::{EstimatorError, StateEstimate, INPUT_CHANNELS, INPUT_SIZE, OUTPUTS};
use crate::dataset::{simulate_map, split_records, DatasetConfig, HasEpisode, LabeledDataset, LabeledRecord};
use crate::geometry::ShellGeometry;
use crate::render::reference_image;

const PLANE: usize = INPUT_SIZE * INPUT_SIZE;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: LabeledRecord,
    /// `3 x 224 x 224`, channel-major.
    pub image: Vec<u8>,
}

impl HasEpisode for Sample {
    fn episode_id(&self) -> &str {
        &self.record.episode_id
    }
}

impl Sample {
    /// Regression target and which entries of it are labeled.
    pub fn target(&self) -> ([f64; OUTPUTS], [bool; OUTPUTS]) {
        let r = &self.record;
        let f = r.f.unwrap_or([0.0; 3]);
        let v = [r.x[0], r.x[1], r.x[2], f[0], f[1], f[2], r.tau.unwrap_or(0.0), r.d.unwrap_or(0.0)];
        let full = r.f.is_some();
        let m = [true, true, true, full, full, full, r.tau.is_some(), r.d.is_some()];
        (v, m)
    }

    pub fn truth(&self) -> StateEstimate {
        StateEstimate::from_vector(&self.target().0)
    }

    pub fn has_full_state(&self) -> bool {
        self.record.f.is_some() && self.record.tau.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    /// Downsampled reference frame per sensor id, same layout as samples.
    pub references: BTreeMap<String, Vec<u8>>,
    pub samples: Vec<Sample>,
    pub geometry: ShellGeometry,
}

impl SampleSet {
    /// Renders `config` straight into memory without touching disk.
    pub fn simulate(config: &DatasetConfig) -> Result<Self, EstimatorError> {
        let samples = simulate_map(config, |record, img| {
            Ok(Sample {
                record: record.clone(),
                image: img.area_resample_u8(INPUT_SIZE),
            })
        })?;
        let mut references = BTreeMap::new();
        for inst in &config.instances {
            let r = reference_image(&config.geometry, inst)?;
            references.insert(inst.id.clone(), r.area_resample_u8(INPUT_SIZE));
        }
        Ok(Self {
            references,
            samples,
            geometry: config.geometry,
        })
    }

    pub fn from_dataset(dataset: &LabeledDataset) -> Result<Self, EstimatorError> {
        let mut references = BTreeMap::new();
        for id in dataset.references.keys() {
            references.insert(id.clone(), dataset.load_reference(id)?.area_resample_u8(INPUT_SIZE));
        }
        let samples = dataset
            .records
            .par_iter()
            .map(|r| {
                Ok(Sample {
                    record: r.clone(),
                    image: dataset.load_image(r)?.area_resample_u8(INPUT_SIZE),
                })
            })
            .collect::<Result<Vec<_>, EstimatorError>>()?;
        Ok(Self {
            references,
            samples,
            geometry: dataset.config.geometry,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct episode ids in first-seen order.
    pub fn episode_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.record.episode_id.as_str()))
            .map(|s| s.record.episode_id.clone())
            .collect()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            references: self.references.clone(),
            samples,
            geometry: self.geometry,
        }
    }

    /// Episode-disjoint split.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self), EstimatorError> {
        let (a, b) = split_records(&self.samples, train_fraction, seed)?;
        Ok((self.with_samples(a), self.with_samples(b)))
    }

    /// Samples of the first `n` episodes (in first-seen order).
    pub fn first_episodes(&self, n: usize) -> Self {
        let keep: HashSet<String> = self.episode_ids().into_iter().take(n).collect();
        self.with_samples(
            self.samples
                .iter()
                .filter(|s| keep.contains(&s.record.episode_id))
                .cloned()
                .collect(),
        )
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Self {
        self.with_samples(self.samples.iter().filter(|s| keep(s)).cloned().collect())
    }

    /// Concatenates sets; references are merged.
    pub fn merged(&self, other: &SampleSet) -> Self {
        let mut out = self.clone();
        for (k, v) in &other.references {
            out.references.entry(k.clone()).or_insert_with(|| v.clone());
        }
        out.samples.extend(other.samples.iter().cloned());
        out
    }

    /// Writes the 6-channel input of sample `i` into `out` (length
    /// `6 * 224 * 224`), scaled to `[0, 1]`.
    pub fn write_input(&self, i: usize, out: &mut [f32]) -> Result<(), EstimatorError> {
        let s = &self.samples[i];
        let reference = self.references.get(&s.record.sensor_id).ok_or_else(|| EstimatorError::Pairing {
            reference: "<none>".into(),
            frame: s.record.sensor_id.clone(),
        })?;
        assert_eq!(out.len(), INPUT_CHANNELS * PLANE);
        let (a, b) = out.split_at_mut(3 * PLANE);
        for (o, &v) in a.iter_mut().zip(reference) {
            *o = v as f32 / 255.0;
        }
        for (o, &v) in b.iter_mut().zip(&s.image) {
            *o = v as f32 / 255.0;
        }
        Ok(())
    }
}
