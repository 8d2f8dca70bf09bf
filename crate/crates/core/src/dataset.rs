//! Labeled dataset generation, persistence and splitting.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.jsonl        one LabeledRecord per line
//! dataset.json          config snapshot and reference image paths
//! images/*.png          contact frames
//! references/*.png      one no-contact frame per sensor instance
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ShellGeometry, Uv};
use crate::image::{augment, ImageError, TactileImage};
use crate::mechanics::{
    contact_load, displacement_field, episode_states, make_episode, normal_force, ContactState, Episode,
    EpisodeMagnitude, EpisodeMode, Indenter, MechanicsError, SurfaceGrid, UvGrid, FRICTION, FXY_RANGE,
    K_TANGENTIAL, K_TORSION, MAX_DEPTH, TORSION_RANGE,
};
use crate::render::{Illumination, RenderError, SensorInstance};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SIDECAR_FILE: &str = "dataset.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("record {record}: {message}")]
    Invalid { record: String, message: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {record}: image {path} does not exist")]
    MissingImage { record: String, path: PathBuf },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    PositionOnly,
    FullState,
}

/// Photometric augmentation applied to every saved frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub enabled: bool,
    pub noise_sigma: f64,
    pub gain_range: (f64, f64),
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: false,
            noise_sigma: 2.0,
            gain_range: (0.9, 1.1),
        }
    }
}

fn default_frames() -> usize {
    10
}

fn default_modes() -> Vec<EpisodeMode> {
    EpisodeMode::ALL.to_vec()
}

fn default_min_depth() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub instances: Vec<SensorInstance>,
    pub indenters: Vec<Indenter>,
    /// Episodes per (instance, indenter) pair.
    pub episodes_per_indenter: usize,
    /// Labeled frames per episode; the out-of-contact first frame is not kept.
    #[serde(default = "default_frames")]
    pub frames_per_episode: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<EpisodeMode>,
    pub label_mode: LabelMode,
    /// Keep depth labels in position-only sets.
    #[serde(default)]
    pub include_depth: bool,
    #[serde(default)]
    pub augmentation: Augmentation,
    /// Lower bound of the sampled hold depth, mm.
    #[serde(default = "default_min_depth")]
    pub min_depth: f64,
    /// Upper bound of the sampled hold depth, mm. Defaults to each indenter's
    /// load-limited maximum.
    #[serde(default)]
    pub max_depth: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub geometry: ShellGeometry,
    #[serde(default)]
    pub grid: UvGrid,
}

impl DatasetConfig {
    pub fn total_records(&self) -> usize {
        self.instances.len() * self.indenters.len() * self.episodes_per_indenter * self.frames_per_episode
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        self.geometry
            .validate()
            .map_err(|e| DatasetError::Config(e.to_string()))?;
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return bad(format!("dataset name {:?} must be non-empty [A-Za-z0-9_-]", self.name));
        }
        if self.frames_per_episode == 0 {
            return bad("frames_per_episode must be at least 1".into());
        }
        if self.modes.is_empty() {
            return bad("no episode modes".into());
        }
        if self.episodes_per_indenter > 0 && (self.instances.is_empty() || self.indenters.is_empty()) {
            return bad("episodes requested without instances or indenters".into());
        }
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if inst.id.is_empty() || !inst.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("instance id {:?} must be non-empty [A-Za-z0-9_-]", inst.id));
            }
            if !ids.insert(inst.id.as_str()) {
                return bad(format!("duplicate instance id {}", inst.id));
            }
        }
        let mut descs = HashSet::new();
        for ind in &self.indenters {
            ind.validate()?;
            if !descs.insert(ind.descriptor()) {
                return bad(format!("duplicate indenter {}", ind.descriptor()));
            }
        }
        if !(self.min_depth.is_finite() && self.min_depth > 0.0) {
            return bad(format!("min_depth {} must be positive", self.min_depth));
        }
        if let Some(d) = self.max_depth {
            if !(d.is_finite() && d >= self.min_depth && d <= MAX_DEPTH) {
                return bad(format!("max_depth {d} outside [{}, {MAX_DEPTH}]", self.min_depth));
            }
            for ind in &self.indenters {
                if normal_force(ind, d) < crate::mechanics::FZ_RANGE.0 {
                    return bad(format!(
                        "max_depth {d} mm drives {} past the {} N normal load cap",
                        ind.descriptor(),
                        crate::mechanics::FZ_RANGE.0
                    ));
                }
            }
        }
        for ind in &self.indenters {
            if self.depth_cap(ind) < self.min_depth {
                return bad(format!(
                    "min_depth {} exceeds the load-limited depth of {}",
                    self.min_depth,
                    ind.descriptor()
                ));
            }
        }
        let a = &self.augmentation;
        if a.enabled {
            let (lo, hi) = a.gain_range;
            if !(a.noise_sigma.is_finite() && a.noise_sigma >= 0.0) {
                return bad(format!("noise sigma {} must be non-negative", a.noise_sigma));
            }
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("gain range [{lo}, {hi}] is invalid"));
            }
        }
        Ok(())
    }

    fn depth_cap(&self, indenter: &Indenter) -> f64 {
        self.max_depth.unwrap_or_else(|| indenter.max_depth())
    }

    fn indenter_by_descriptor(&self, desc: &str) -> Option<&Indenter> {
        self.indenters.iter().find(|i| i.descriptor() == desc)
    }
}

/// One labeled frame. `f` and `tau` are absent in position-only sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub id: String,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub sensor_id: String,
    pub indenter: String,
    pub x: [f64; 3],
    pub f: Option<[f64; 3]>,
    pub tau: Option<f64>,
    pub d: Option<f64>,
    pub episode_id: String,
    pub frame: usize,
    /// Episode seed: together with the indenter and frame index it determines
    /// the labels.
    pub seed: u64,
}

impl LabeledRecord {
    /// Label range checks shared by `load` and generation.
    pub fn check(&self) -> Result<(), DatasetError> {
        let invalid = |message: String| DatasetError::Invalid {
            record: self.id.clone(),
            message,
        };
        if !self.x.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite position".into()));
        }
        if let Some(d) = self.d {
            if !(d.is_finite() && (0.0..=MAX_DEPTH).contains(&d)) {
                return Err(invalid(format!("depth {d} mm outside [0, {MAX_DEPTH}]")));
            }
        }
        if self.f.is_some() != self.tau.is_some() {
            return Err(invalid("force and torsion labels must be present together".into()));
        }
        if let (Some(f), Some(tau)) = (self.f, self.tau) {
            let state = ContactState {
                position: self.x.into(),
                force: f.into(),
                torsion: tau,
            };
            state.check_ranges().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn position(&self) -> nalgebra::Vector3<f64> {
        self.x.into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub config: DatasetConfig,
    /// Reference image path (relative) per sensor id.
    pub references: BTreeMap<String, String>,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub root: PathBuf,
    pub config: DatasetConfig,
    pub references: BTreeMap<String, String>,
    pub records: Vec<LabeledRecord>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn episode_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.episode_id.as_str()))
            .map(|r| r.episode_id.clone())
            .collect()
    }

    pub fn image_path(&self, record: &LabeledRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn load_image(&self, record: &LabeledRecord) -> Result<TactileImage, DatasetError> {
        Ok(TactileImage::read_png(&self.image_path(record), record.sensor_id.clone())?)
    }

    pub fn load_reference(&self, sensor_id: &str) -> Result<TactileImage, DatasetError> {
        let rel = self.references.get(sensor_id).ok_or_else(|| DatasetError::Invalid {
            record: sensor_id.to_string(),
            message: "no reference image for sensor".into(),
        })?;
        Ok(TactileImage::read_png(&self.root.join(rel), sensor_id.to_string())?)
    }
}

/// One episode scheduled by a config, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedEpisode {
    pub index: usize,
    pub instance: usize,
    pub indenter: usize,
    pub seed: u64,
    pub id: String,
    pub episode: Episode,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of episode `index`: the scrambled master seed xor the index.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    splitmix64(master) ^ index as u64
}

/// Seed of the augmentation noise of one frame.
pub fn frame_seed(episode_seed: u64, frame: usize) -> u64 {
    splitmix64(episode_seed ^ ((frame as u64) << 48))
}

pub fn episode_id(name: &str, master: u64, index: usize) -> String {
    format!("{name}-{master:x}/{index:06}")
}

/// Azimuth and axial bin counts of the contact-site strata.
pub const STRATA: (usize, usize) = (36, 18);

/// Order in which cycle `cycle` of a dataset visits the equal-area strata.
fn strata_order(master: u64, cycle: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..STRATA.0 * STRATA.1).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(master ^ splitmix64(cycle as u64))));
    order
}

/// Contact site of episode `index`. Consecutive episodes walk a shuffled
/// list of equal-area bins and land uniformly inside their bin, so the sites
/// are area-uniform and every bin is hit once per cycle.
fn stratified_site(geom: &ShellGeometry, master: u64, index: usize, rng: &mut ChaCha8Rng) -> Uv {
    let n = STRATA.0 * STRATA.1;
    let bin = strata_order(master, index / n)[index % n];
    let (i, j) = (bin % STRATA.0, bin / STRATA.0);
    let azimuth = (i as f64 + rng.random::<f64>()) * std::f64::consts::TAU / STRATA.0 as f64;
    let z = (j as f64 + rng.random::<f64>()) * geom.apex_height() / STRATA.1 as f64;
    geom.uv_at_height(azimuth, z)
}

/// Draws contact site, mode and magnitudes of episode `index` from its seed.
pub fn sample_episode(
    config: &DatasetConfig,
    indenter: &Indenter,
    index: usize,
    seed: u64,
) -> Result<Episode, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uv = stratified_site(&config.geometry, config.seed, index, &mut rng);
    let mode = config.modes[rng.random_range(0..config.modes.len())];
    let hi = config.depth_cap(indenter);
    let lo = config.min_depth.min(hi);
    let depth = if hi > lo { rng.random_range(lo..=hi) } else { hi };
    let fz = normal_force(indenter, depth).abs();
    let amplitude = match mode {
        EpisodeMode::Press => 0.0,
        EpisodeMode::Tilt => {
            // Peak tangential force within the friction cone and the label range.
            let peak = rng.random_range(0.3..1.0) * (FRICTION * fz).min(FXY_RANGE.1);
            peak / (K_TANGENTIAL * depth)
        }
        EpisodeMode::Twist => {
            let cap = TORSION_RANGE.1 / (K_TORSION * depth * depth);
            rng.random_range(0.1..0.35f64).min(0.999 * cap)
        }
    };
    let episode_rng_seed = rng.random::<u64>();
    Ok(make_episode(
        uv,
        mode,
        EpisodeMagnitude { depth, amplitude },
        config.frames_per_episode + 1,
        episode_rng_seed,
    )?)
}

/// Every episode of `config`, ordered by instance, then indenter, then
/// episode number.
pub fn plan(config: &DatasetConfig) -> Result<Vec<PlannedEpisode>, DatasetError> {
    config.validate()?;
    let mut out = Vec::new();
    let mut index = 0;
    for inst in 0..config.instances.len() {
        for (ind, indenter) in config.indenters.iter().enumerate() {
            for _ in 0..config.episodes_per_indenter {
                let seed = episode_seed(config.seed, index);
                out.push(PlannedEpisode {
                    index,
                    instance: inst,
                    indenter: ind,
                    seed,
                    id: episode_id(&config.name, config.seed, index),
                    episode: sample_episode(config, indenter, index, seed)?,
                });
                index += 1;
            }
        }
    }
    Ok(out)
}

/// Labels of frame `frame` (1-based among the kept frames) of an episode.
fn frame_labels(
    config: &DatasetConfig,
    planned: &PlannedEpisode,
    frame: usize,
    state: &ContactState,
    depth: f64,
) -> LabeledRecord {
    let inst = &config.instances[planned.instance];
    let full = config.label_mode == LabelMode::FullState;
    LabeledRecord {
        id: format!("{}#{frame:02}", planned.id),
        image: format!("images/{:06}_{frame:02}.png", planned.index),
        sensor_id: inst.id.clone(),
        indenter: config.indenters[planned.indenter].descriptor(),
        x: [state.position.x, state.position.y, state.position.z],
        f: full.then(|| [state.force.x, state.force.y, state.force.z]),
        tau: full.then_some(state.torsion),
        d: (full || config.include_depth).then_some(depth),
        episode_id: planned.id.clone(),
        frame,
        seed: planned.seed,
    }
}

/// Renders every frame of `config` and hands it to `sink`, in parallel over
/// episodes. Results come back in manifest order.
pub fn simulate_map<T, F>(config: &DatasetConfig, sink: F) -> Result<Vec<T>, DatasetError>
where
    T: Send,
    F: Fn(&LabeledRecord, TactileImage) -> Result<T, DatasetError> + Sync,
{
    let episodes = plan(config)?;
    let geom = config.geometry;
    let surface = SurfaceGrid::new(&geom, config.grid);
    for inst in &config.instances {
        inst.renderer(&geom)?;
    }
    let nested: Vec<Vec<T>> = episodes
        .par_iter()
        .map(|planned| {
            let inst = &config.instances[planned.instance];
            let indenter = &config.indenters[planned.indenter];
            let renderer = inst.renderer(&geom)?;
            let states = episode_states(&planned.episode, indenter, &geom)?;
            let mut out = Vec::with_capacity(config.frames_per_episode);
            for (frame, (spec, state)) in states.iter().enumerate().skip(1) {
                let record = frame_labels(config, planned, frame, state, spec.depth);
                record.check()?;
                let field = displacement_field(&surface, indenter, spec, &geom)?;
                let mut img = renderer.render(&field)?;
                if config.augmentation.enabled {
                    let a = &config.augmentation;
                    img = augment(&img, frame_seed(planned.seed, frame), a.noise_sigma, a.gain_range)?;
                }
                out.push(sink(&record, img)?);
            }
            Ok(out)
        })
        .collect::<Result<_, DatasetError>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Renders `config` into `config.output_dir`.
pub fn generate(config: &DatasetConfig) -> Result<LabeledDataset, DatasetError> {
    config.validate()?;
    let root = config.output_dir.clone();
    fs::create_dir_all(root.join("images")).map_err(io_err(&root))?;
    fs::create_dir_all(root.join("references")).map_err(io_err(&root))?;
    let records = simulate_map(config, |record, img| {
        let path = root.join(&record.image);
        img.write_png(&path)?;
        Ok(record.clone())
    })?;

    let mut references = BTreeMap::new();
    for inst in &config.instances {
        let rel = format!("references/{}.png", inst.id);
        crate::render::reference_image(&config.geometry, inst)?.write_png(&root.join(&rel))?;
        references.insert(inst.id.clone(), rel);
    }

    let sidecar = Sidecar {
        version: FORMAT_VERSION,
        config: config.clone(),
        references: references.clone(),
        records: records.len(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&root.join(SIDECAR_FILE), json.as_bytes())?;
    let mut manifest = String::new();
    for r in &records {
        manifest.push_str(&serde_json::to_string(r).expect("record serializes"));
        manifest.push('\n');
    }
    write_atomic(&root.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(LabeledDataset {
        root,
        config: config.clone(),
        references,
        records,
    })
}

/// Reads and validates a dataset, failing on the first bad record.
pub fn load(manifest_path: &Path) -> Result<LabeledDataset, DatasetError> {
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let sidecar_path = root.join(SIDECAR_FILE);
    let text = fs::read_to_string(&sidecar_path).map_err(io_err(&sidecar_path))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: sidecar_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if sidecar.version != FORMAT_VERSION {
        return Err(DatasetError::Config(format!(
            "unsupported dataset version {} (expected {FORMAT_VERSION})",
            sidecar.version
        )));
    }
    let file = fs::File::open(manifest_path).map_err(io_err(manifest_path))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabeledRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: manifest_path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId(record.id));
        }
        record.check()?;
        if !sidecar.references.contains_key(&record.sensor_id) {
            return Err(DatasetError::Invalid {
                record: record.id.clone(),
                message: format!("unknown sensor {}", record.sensor_id),
            });
        }
        let img = root.join(&record.image);
        if !img.is_file() {
            return Err(DatasetError::MissingImage {
                record: record.id.clone(),
                path: img,
            });
        }
        records.push(record);
    }
    if records.len() != sidecar.records {
        return Err(DatasetError::Config(format!(
            "manifest has {} records, sidecar declares {}",
            records.len(),
            sidecar.records
        )));
    }
    Ok(LabeledDataset {
        root,
        config: sidecar.config,
        references: sidecar.references,
        records,
    })
}

/// Splits by episode so that no episode lands on both sides.
pub fn split(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DatasetError> {
    let (train, test) = split_records(&dataset.records, train_fraction, seed)?;
    let side = |records: Vec<LabeledRecord>| LabeledDataset {
        root: dataset.root.clone(),
        config: dataset.config.clone(),
        references: dataset.references.clone(),
        records,
    };
    Ok((side(train), side(test)))
}

/// Episode-level split of any record list.
pub fn split_records<R: HasEpisode + Clone>(
    records: &[R],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<R>, Vec<R>), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Split(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut seen = HashSet::new();
    let mut episodes: Vec<&str> = records
        .iter()
        .map(|r| r.episode_id())
        .filter(|e| seen.insert(*e))
        .collect();
    if episodes.len() < 2 {
        return Err(DatasetError::Split(format!("{} episode(s); need at least 2", episodes.len())));
    }
    episodes.sort_unstable();
    episodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = episodes.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train_set: HashSet<&str> = episodes[..n_train].iter().copied().collect();
    let (train, test): (Vec<&R>, Vec<&R>) = records.iter().partition(|r| train_set.contains(r.episode_id()));
    Ok((train.into_iter().cloned().collect(), test.into_iter().cloned().collect()))
}

pub trait HasEpisode {
    fn episode_id(&self) -> &str;
}

impl HasEpisode for LabeledRecord {
    fn episode_id(&self) -> &str {
        &self.episode_id
    }
}

/// Recomputes a record's labels from its metadata alone.
pub fn rederive(config: &DatasetConfig, record: &LabeledRecord) -> Result<LabeledRecord, DatasetError> {
    let invalid = |m: &str| DatasetError::Invalid {
        record: record.id.clone(),
        message: m.to_string(),
    };
    let indenter_idx = config
        .indenters
        .iter()
        .position(|i| i.descriptor() == record.indenter)
        .ok_or_else(|| invalid("indenter not in config"))?;
    let instance = config
        .instances
        .iter()
        .position(|i| i.id == record.sensor_id)
        .ok_or_else(|| invalid("sensor not in config"))?;
    let indenter = config.indenter_by_descriptor(&record.indenter).expect("found above");
    let index = record
        .episode_id
        .rsplit('/')
        .next()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| invalid("malformed episode id"))?;
    let episode = sample_episode(config, indenter, index, record.seed)?;
    if record.frame == 0 || record.frame > config.frames_per_episode {
        return Err(invalid("frame index out of range"));
    }
    let spec = episode.frames[record.frame];
    let load = contact_load(indenter, &spec)?;
    let position = config.geometry.surface_point(episode.uv).map_err(MechanicsError::from)?.position;
    let state = ContactState {
        position,
        force: load.force,
        torsion: load.torsion,
    };
    let planned = PlannedEpisode {
        index,
        instance,
        indenter: indenter_idx,
        seed: record.seed,
        id: record.episode_id.clone(),
        episode,
    };
    Ok(frame_labels(config, &planned, record.frame, &state, spec.depth))
}

/// Dataset size regimes of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Position-only frames from clear shells, six indenters.
    SimLocalization,
    /// Full labels, one sensor, 3 mm sphere.
    FullState,
    /// Full labels, one sensor, six indenters.
    MultiIndenter,
    /// Full labels from three sensors, three spheres.
    TransferTrain,
}

impl Regime {
    /// Full-size record count.
    pub fn nominal_size(&self) -> usize {
        match self {
            Regime::SimLocalization => 18_000,
            Regime::FullState => 12_000,
            Regime::MultiIndenter => 20_000,
            Regime::TransferTrain => 40_000,
        }
    }
}

fn spheres() -> Vec<Indenter> {
    [3.0, 4.0, 5.0].iter().map(|&radius| Indenter::Sphere { radius }).collect()
}

/// Config of a regime at `1 / divisor` of its nominal size. The record count
/// is rounded to whole episodes per (instance, indenter) pair.
pub fn regime_config(regime: Regime, divisor: usize, seed: u64, output_dir: PathBuf) -> DatasetConfig {
    let frames = default_frames();
    let fabricate = |prefix: &str, pattern, markers, n: usize| -> Vec<SensorInstance> {
        (0..n)
            .map(|k| {
                let s = splitmix64(seed ^ (0xA5A5 + k as u64));
                SensorInstance::fabricate(format!("{prefix}{k}"), pattern, markers, s)
            })
            .collect()
    };
    let (name, instances, indenters, label_mode, augmented) = match regime {
        Regime::SimLocalization => (
            "sim-loc",
            fabricate("clear", Illumination::Rrrgggbbb, false, 2),
            Indenter::standard_set(),
            LabelMode::PositionOnly,
            true,
        ),
        Regime::FullState => (
            "full",
            vec![SensorInstance::nominal("rgb-markers", Illumination::Rrrgggbbb, true)],
            vec![Indenter::Sphere { radius: 3.0 }],
            LabelMode::FullState,
            false,
        ),
        Regime::MultiIndenter => (
            "multi",
            vec![SensorInstance::nominal("rgb-markers", Illumination::Rrrgggbbb, true)],
            Indenter::standard_set(),
            LabelMode::FullState,
            false,
        ),
        Regime::TransferTrain => (
            "transfer",
            fabricate("sensor", Illumination::Rrrgggbbb, true, 3),
            spheres(),
            LabelMode::FullState,
            true,
        ),
    };
    let pairs = instances.len() * indenters.len();
    let target = regime.nominal_size() as f64 / divisor.max(1) as f64;
    let episodes = ((target / (pairs * frames) as f64).round() as usize).max(1);
    DatasetConfig {
        name: name.into(),
        instances,
        indenters,
        episodes_per_indenter: episodes,
        frames_per_episode: frames,
        modes: default_modes(),
        label_mode,
        include_depth: false,
        augmentation: Augmentation {
            enabled: augmented,
            ..Augmentation::default()
        },
        min_depth: default_min_depth(),
        max_depth: None,
        seed,
        output_dir,
        geometry: ShellGeometry::default(),
        grid: UvGrid::default(),
    }
}

/// Equal-area bin of every planned contact site.
pub fn coverage(config: &DatasetConfig, episodes: &[PlannedEpisode], n_az: usize, n_ax: usize) -> Vec<usize> {
    let mut counts = vec![0; n_az * n_ax];
    for e in episodes {
        let (i, j) = config.geometry.equal_area_bin(e.episode.uv, n_az, n_ax);
        counts[j * n_az + i] += 1;
    }
    counts
}

/// Surface parameters of a position label.
pub fn label_uv(geom: &ShellGeometry, x: &[f64; 3]) -> Uv {
    geom.project_unchecked(&nalgebra::Vector3::from(*x)).uv
}
