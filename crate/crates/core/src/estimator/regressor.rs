//! Trainable contact-state regressor: CNN encoder plus 512-256 head with
//! eight outputs.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::{masked_mse, Backbone, Layer, Network, Optimizer, OptimizerKind, Tensor};
use super::samples::SampleSet;
use super::{EstimatorError, ModelInput, StateEstimate, INPUT_CHANNELS, INPUT_SIZE, OUTPUTS};
use crate::geometry::ShellGeometry;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TACTREG\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which output groups receive a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heads {
    pub position: bool,
    pub force: bool,
    pub torsion: bool,
    pub depth: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        position: true,
        force: true,
        torsion: true,
        depth: true,
    };
    pub const POSITION: Heads = Heads {
        position: true,
        force: false,
        torsion: false,
        depth: false,
    };

    fn mask(&self) -> [bool; OUTPUTS] {
        let (p, f, t, d) = (self.position, self.force, self.torsion, self.depth);
        [p, p, p, f, f, f, t, d]
    }
}

impl Default for Heads {
    fn default() -> Self {
        Heads::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub backbone: Backbone,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Lower bound on optimizer steps; small sets run extra epochs to reach it.
    pub min_steps: usize,
    pub seed: u64,
    pub heads: Heads,
    /// When positive, the network first maps the stacked pair to
    /// `(gain * (I_t - I_ref), I_ref)`.
    pub difference_gain: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::desk(),
            optimizer: OptimizerKind::default(),
            learning_rate: 1e-3,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            batch_size: 32,
            epochs: 20,
            min_steps: 0,
            seed: 0,
            heads: Heads::ALL,
            difference_gain: 4.0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: String| Err(EstimatorError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.difference_gain.is_finite() && self.difference_gain >= 0.0) {
            return bad(format!("difference gain {} must be non-negative", self.difference_gain));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        match &self.backbone {
            Backbone::Strided { widths } => {
                if widths.is_empty() || widths.len() > 5 || widths.contains(&0) {
                    return bad(format!("strided widths {widths:?} need 1..=5 positive entries"));
                }
            }
            Backbone::ResNet18 { width } => {
                if *width == 0 {
                    return bad("resnet width must be positive".into());
                }
            }
        }
        match self.optimizer {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("momentum {momentum} outside [0, 1)"))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                bad("adam coefficients out of range".into())
            }
            _ => Ok(()),
        }
    }
}

/// Per-output min-max scaling to `[0, 1]`, fitted on training labels only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; OUTPUTS],
    pub max: [f64; OUTPUTS],
    pub fitted: [bool; OUTPUTS],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            min: [0.0; OUTPUTS],
            max: [1.0; OUTPUTS],
            fitted: [false; OUTPUTS],
        }
    }
}

impl Normalizer {
    /// Fits every output in `which` that has labels in `set` and is not yet
    /// fitted.
    pub fn fit_missing(&mut self, set: &SampleSet, which: [bool; OUTPUTS]) {
        for j in 0..OUTPUTS {
            if self.fitted[j] || !which[j] {
                continue;
            }
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in &set.samples {
                let (v, m) = s.target();
                if m[j] {
                    lo = lo.min(v[j]);
                    hi = hi.max(v[j]);
                }
            }
            if lo.is_finite() {
                self.min[j] = lo;
                self.max[j] = hi;
                self.fitted[j] = true;
            }
        }
    }

    fn scale(&self, j: usize) -> f64 {
        let s = self.max[j] - self.min[j];
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, j: usize, v: f64) -> f64 {
        (v - self.min[j]) / self.scale(j)
    }

    pub fn denormalize(&self, j: usize, v: f64) -> f64 {
        v * self.scale(j) + self.min[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub samples: usize,
    pub epochs: Vec<EpochLog>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Regressor {
    pub config: RegressorConfig,
    pub normalizer: Normalizer,
    /// Episodes seen in training; evaluation refuses to score any of them.
    pub trained_on: BTreeSet<String>,
    pub trained: bool,
    net: Network<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RegressorConfig,
    normalizer: Normalizer,
    trained: bool,
    trained_on: Vec<String>,
    state_len: usize,
    checksum: String,
}

impl Regressor {
    pub fn new(config: RegressorConfig) -> Result<Self, EstimatorError> {
        config.validate()?;
        let mut net = Network::new(
            &config.backbone,
            [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE],
            OUTPUTS,
            config.seed,
        );
        if config.difference_gain > 0.0 {
            net.layers.insert(0, Layer::PairDifference(config.difference_gain));
        }
        Ok(Self {
            config,
            normalizer: Normalizer::default(),
            trained_on: BTreeSet::new(),
            trained: false,
            net,
        })
    }

    pub fn param_count(&mut self) -> usize {
        self.net.param_count()
    }

    /// Trains encoder and position head on position labels only. The other
    /// output heads get no gradient.
    pub fn pretrain_localization(&mut self, train: &SampleSet) -> Result<TrainReport, EstimatorError> {
        if train.is_empty() {
            return Err(EstimatorError::Empty("pretraining set".into()));
        }
        self.fit(train, Heads::POSITION)
    }

    /// Trains on full-state labels with the configured heads. An empty set
    /// leaves the model untouched.
    pub fn finetune(&mut self, train: &SampleSet) -> Result<TrainReport, EstimatorError> {
        if train.is_empty() {
            return Ok(TrainReport::default());
        }
        if let Some(s) = train.samples.iter().find(|s| !s.has_full_state()) {
            return Err(EstimatorError::Mode(format!(
                "record {} has no force/torsion labels; fine-tuning needs full-state sets",
                s.record.id
            )));
        }
        self.fit(train, self.config.heads)
    }

    fn fit(&mut self, train: &SampleSet, heads: Heads) -> Result<TrainReport, EstimatorError> {
        let active = heads.mask();
        self.normalizer.fit_missing(train, active);
        let start = Instant::now();
        let n = train.len();
        let bs = self.config.batch_size.min(n);
        let steps_per_epoch = n.div_ceil(bs);
        let epochs = self.config.epochs.max(self.config.min_steps.div_ceil(steps_per_epoch));
        let total_steps = (steps_per_epoch * epochs).max(1);
        let mut opt: Optimizer<f32> = Optimizer::new(self.config.optimizer, self.config.learning_rate);
        opt.weight_decay = self.config.weight_decay;
        let mut order: Vec<usize> = (0..n).collect();
        let sample_len = INPUT_CHANNELS * INPUT_SIZE * INPUT_SIZE;
        let mut report = TrainReport {
            samples: n,
            ..TrainReport::default()
        };
        let mut step = 0;
        for epoch in 0..epochs {
            let t0 = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (0x5EED_0000 + epoch as u64));
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(bs) {
                let mut x = Tensor::zeros([batch.len(), INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE]);
                let mut target = vec![0f32; batch.len() * OUTPUTS];
                let mut mask = vec![false; batch.len() * OUTPUTS];
                for (b, &i) in batch.iter().enumerate() {
                    train.write_input(i, &mut x.data[b * sample_len..(b + 1) * sample_len])?;
                    let (v, m) = train.samples[i].target();
                    for j in 0..OUTPUTS {
                        let on = m[j] && active[j] && self.normalizer.fitted[j];
                        mask[b * OUTPUTS + j] = on;
                        target[b * OUTPUTS + j] = self.normalizer.normalize(j, v[j]) as f32;
                    }
                }
                self.net.zero_grad();
                let out = self.net.forward(&x, true);
                let (loss, grad) = masked_mse(&out, &target, &mask);
                self.net.backward(&grad);
                opt.learning_rate = match self.config.schedule {
                    Schedule::Constant => self.config.learning_rate,
                    Schedule::Cosine => {
                        let p = step as f64 / total_steps as f64;
                        0.5 * self.config.learning_rate * (1.0 + (std::f64::consts::PI * p).cos())
                    }
                };
                opt.step(&mut self.net);
                step += 1;
                loss_sum += loss * batch.len() as f64;
            }
            let log = EpochLog {
                epoch,
                loss: loss_sum / n as f64,
                seconds: t0.elapsed().as_secs_f64(),
            };
            log::info!("epoch {} loss {:.5} ({:.1} s)", log.epoch, log.loss, log.seconds);
            report.epochs.push(log);
        }
        self.trained_on.extend(train.episode_ids());
        self.trained = true;
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    fn decode(&self, out: &[f32], geom: &ShellGeometry) -> StateEstimate {
        let mut v = [0f64; OUTPUTS];
        for j in 0..OUTPUTS {
            v[j] = if self.normalizer.fitted[j] {
                self.normalizer.denormalize(j, out[j] as f64)
            } else {
                0.0
            };
        }
        StateEstimate::from_vector(&v).projected(geom)
    }

    /// Estimate for one preprocessed pair; `x` is projected onto the membrane.
    pub fn predict(&mut self, input: &ModelInput, geom: &ShellGeometry) -> Result<StateEstimate, EstimatorError> {
        if !self.trained {
            return Err(EstimatorError::Uninitialized);
        }
        let x = Tensor::from_vec([1, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE], input.data.clone());
        let out = self.net.forward(&x, false);
        Ok(self.decode(&out.data, geom))
    }

    /// Estimates for every sample of `set`, in order.
    pub fn predict_set(&mut self, set: &SampleSet) -> Result<Vec<StateEstimate>, EstimatorError> {
        if !self.trained {
            return Err(EstimatorError::Uninitialized);
        }
        let sample_len = INPUT_CHANNELS * INPUT_SIZE * INPUT_SIZE;
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len());
        for batch in idx.chunks(32) {
            let mut x = Tensor::zeros([batch.len(), INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE]);
            for (b, &i) in batch.iter().enumerate() {
                set.write_input(i, &mut x.data[b * sample_len..(b + 1) * sample_len])?;
            }
            let y = self.net.forward(&x, false);
            for row in y.data.chunks(OUTPUTS) {
                out.push(self.decode(row, &set.geometry));
            }
        }
        Ok(out)
    }

    /// Fails if any episode of `test` was used for training.
    pub fn check_disjoint(&self, test: &SampleSet) -> Result<(), EstimatorError> {
        match test.episode_ids().into_iter().find(|e| self.trained_on.contains(e)) {
            Some(e) => Err(EstimatorError::Leakage(format!("episode {e} was used for training"))),
            None => Ok(()),
        }
    }

    fn state_bytes(&mut self) -> Vec<u8> {
        self.net.state().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 of the weights and batch-norm statistics, hex.
    pub fn weights_checksum(&mut self) -> String {
        hex(&Sha256::digest(self.state_bytes()))
    }

    pub fn save(&mut self, path: &Path) -> Result<(), EstimatorError> {
        let bytes = self.state_bytes();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            trained: self.trained,
            trained_on: self.trained_on.iter().cloned().collect(),
            state_len: bytes.len() / 4,
            checksum: hex(&Sha256::digest(&bytes)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        let bad = |m: &str| EstimatorError::Checkpoint(format!("{}: {m}", path.display()));
        let data = fs::read(path)?;
        if data.len() < 16 || &data[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a regressor checkpoint"));
        }
        let hlen = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
        let body = data.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let weights = &data[16 + hlen..];
        if weights.len() != header.state_len * 4 {
            return Err(bad("weight block length mismatch"));
        }
        if hex(&Sha256::digest(weights)) != header.checksum {
            return Err(bad("weight checksum mismatch"));
        }
        let mut model = Regressor::new(header.config)?;
        let values: Vec<f32> = weights
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !model.net.set_state(&values) {
            return Err(bad("weights do not fit the configured architecture"));
        }
        model.normalizer = header.normalizer;
        model.trained = header.trained;
        model.trained_on = header.trained_on.into_iter().collect();
        Ok(model)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
