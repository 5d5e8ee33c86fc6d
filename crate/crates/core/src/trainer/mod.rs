//! Alternating synthetic/real training with EMA evaluation.
//!
//! Each iteration takes a supervised step on an annotated frame and, in
//! `full` mode, a second step on an unannotated real frame using only its
//! precomputed masks. Every optimizer step is followed by an EMA update; the
//! EMA model is scored on the held-out split after each epoch.

mod checkpoint;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{contract_err, Error, Result};
use crate::evalmod::{evaluate_model, last_k_average};
use crate::idmap::IdMap;
use crate::losses::{cross_entropy, real_loss};
use crate::model::{ema_update, forward_on_tape, ModelConfig, ModelParams};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::scenegen::{frame_path, load_id_map, load_image, DatasetManifest};
use crate::segmask::MaskSet;

pub const CHECKPOINT_FILE: &str = "checkpoint.srgc";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Stream of the frame sampler; model init uses the seed directly.
const SAMPLER_STREAM: u64 = 11;

/// Default Adam step size. Larger steps let the real-domain objective drag
/// the shared features away from what the segmentation head was fitted on.
pub const DEFAULT_LR: f64 = 2e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Supervised steps on synthetic frames only.
    SynOnly,
    /// Supervised synthetic steps alternating with mask-pooling steps on real frames.
    Full,
    /// Supervised steps on real frames with their labels.
    RealLabels,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SynOnly => "syn-only",
            Mode::Full => "full",
            Mode::RealLabels => "real-labels",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "syn-only" => Ok(Mode::SynOnly),
            "full" => Ok(Mode::Full),
            "real-labels" => Ok(Mode::RealLabels),
            other => Err(contract_err!("unknown mode {other:?}; expected syn-only, full or real-labels")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub frames_per_epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub ema_decay: f64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub eval_last_k: usize,
    pub syn_dir: Option<PathBuf>,
    pub real_dir: Option<PathBuf>,
    pub masks_dir: Option<PathBuf>,
    /// Held-out labelled real frames scored after every epoch.
    pub test_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(mode: Mode, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            mode,
            epochs: 30,
            frames_per_epoch: 200,
            alpha: crate::losses::DEFAULT_ALPHA,
            beta: crate::losses::DEFAULT_BETA,
            ema_decay: 0.99,
            adam: AdamConfig {
                lr: DEFAULT_LR,
                ..AdamConfig::default()
            },
            model: ModelConfig::default(),
            seed: 0,
            eval_last_k: 10,
            syn_dir: None,
            real_dir: None,
            masks_dir: None,
            test_dir: None,
            out_dir: out_dir.into(),
        }
    }

    /// Data sources the mode needs, as `(flag name, value)`.
    fn required_paths(&self) -> Vec<(&'static str, &Option<PathBuf>)> {
        match self.mode {
            Mode::SynOnly => vec![("syn", &self.syn_dir)],
            Mode::Full => vec![("syn", &self.syn_dir), ("real", &self.real_dir), ("masks", &self.masks_dir)],
            Mode::RealLabels => vec![("real", &self.real_dir)],
        }
    }

    /// Names of the data sources the mode needs but the config lacks.
    pub fn missing_paths(&self) -> Vec<&'static str> {
        self.required_paths()
            .into_iter()
            .filter(|(_, p)| p.is_none())
            .map(|(name, _)| name)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let missing = self.missing_paths();
        if !missing.is_empty() {
            return Err(contract_err!(
                "mode {} needs data sources: {}",
                self.mode,
                missing.join(", ")
            ));
        }
        if self.epochs == 0 || self.frames_per_epoch == 0 {
            return Err(contract_err!("epochs and frames per epoch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(contract_err!("EMA decay {} outside [0, 1]", self.ema_decay));
        }
        if self.beta <= 0.0 || self.alpha < 0.0 {
            return Err(contract_err!("need beta > 0 and alpha ≥ 0"));
        }
        if self.eval_last_k == 0 {
            return Err(contract_err!("eval-last-k must be at least 1"));
        }
        self.model.validate()
    }
}

/// One line of the metrics log. Absent losses serialize as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_sup_loss: Option<f64>,
    pub mean_inv_loss: Option<f64>,
    pub mean_var_loss: Option<f64>,
    pub ema_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    /// Mean EMA mIoU over the last `eval_last_k` epochs, when available.
    pub last_k_miou: Option<f64>,
}

/// Real label maps, present only in modes that may read them.
enum LabelAccess {
    Loaded(Vec<IdMap>),
    Withheld(Mode),
}

/// Images of one dataset plus gated access to its labels.
struct Pool {
    dir: PathBuf,
    manifest: DatasetManifest,
    images: Vec<Tensor>,
    labels: LabelAccess,
}

impl Pool {
    fn load(dir: &Path, withhold_labels_in: Option<Mode>) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        if manifest.frames.is_empty() {
            return Err(contract_err!("dataset {} has no frames", dir.display()));
        }
        let images = manifest
            .frames
            .iter()
            .map(|f| load_image(&frame_path(dir, &f.image)))
            .collect::<Result<Vec<_>>>()?;
        let labels = match withhold_labels_in {
            None => LabelAccess::Loaded(
                manifest
                    .frames
                    .iter()
                    .map(|f| load_id_map(&frame_path(dir, &f.labels)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(mode) => LabelAccess::Withheld(mode),
        };
        Ok(Pool {
            dir: dir.to_path_buf(),
            manifest,
            images,
            labels,
        })
    }

    fn len(&self) -> usize {
        self.images.len()
    }

    fn labels(&self, k: usize) -> Result<&IdMap> {
        match &self.labels {
            LabelAccess::Loaded(l) => Ok(&l[k]),
            LabelAccess::Withheld(mode) => Err(contract_err!(
                "labels of {} are not available in {mode} mode",
                self.dir.display()
            )),
        }
    }

    fn check_against(&self, model: &ModelConfig) -> Result<()> {
        if self.manifest.classes != model.classes {
            return Err(contract_err!(
                "dataset {} has {} classes but the model has {}",
                self.dir.display(),
                self.manifest.classes,
                model.classes
            ));
        }
        for (k, img) in self.images.iter().enumerate() {
            if img.dims() != [3, self.manifest.height, self.manifest.width] {
                return Err(contract_err!(
                    "frame {} of {} is {} but the manifest says {}×{}",
                    self.manifest.frames[k].image,
                    self.dir.display(),
                    img.shape(),
                    self.manifest.height,
                    self.manifest.width
                ));
            }
        }
        Ok(())
    }
}

/// Mask sets of the real pool, read when a frame is first sampled.
struct MaskCache {
    dir: PathBuf,
    names: Vec<String>,
    dims: (usize, usize),
    loaded: Vec<Option<MaskSet>>,
}

impl MaskCache {
    fn new(dir: &Path, pool: &Pool) -> Self {
        MaskCache {
            dir: dir.to_path_buf(),
            names: pool.manifest.frames.iter().map(|f| f.masks.clone()).collect(),
            dims: (pool.manifest.width, pool.manifest.height),
            loaded: vec![None; pool.len()],
        }
    }

    fn get(&mut self, k: usize) -> Result<&MaskSet> {
        if self.loaded[k].is_none() {
            let path = self.dir.join(&self.names[k]);
            if !path.exists() {
                return Err(contract_err!(
                    "mask set for real frame {k} is missing: {}",
                    path.display()
                ));
            }
            let set = MaskSet::load(&path)?;
            if (set.width(), set.height()) != self.dims {
                return Err(contract_err!(
                    "mask set {} is {}×{} but the frame is {}×{}",
                    path.display(),
                    set.width(),
                    set.height(),
                    self.dims.0,
                    self.dims.1
                ));
            }
            self.loaded[k] = Some(set);
        }
        Ok(self.loaded[k].as_ref().expect("just loaded"))
    }
}

/// Held-out labelled frames.
struct TestSplit {
    images: Vec<Tensor>,
    labels: Vec<IdMap>,
}

impl TestSplit {
    fn load(dir: &Path) -> Result<Self> {
        let pool = Pool::load(dir, None)?;
        let LabelAccess::Loaded(labels) = pool.labels else {
            unreachable!("test labels are always loaded")
        };
        Ok(TestSplit {
            images: pool.images,
            labels,
        })
    }
}

/// Optimizer, parameters and EMA shadow.
struct Learner {
    params: ModelParams,
    ema: ModelParams,
    adam: AdamState,
    adam_config: AdamConfig,
    ema_decay: f64,
}

impl Learner {
    fn apply(&mut self, grads: &[Tensor]) -> Result<()> {
        adam_step(self.params.tensors_mut(), grads, &mut self.adam, &self.adam_config)?;
        ema_update(&mut self.ema, &self.params, self.ema_decay)
    }

    fn zero_grads(&self) -> Vec<Tensor> {
        self.params.tensors().iter().map(|t| Tensor::zeros(t.shape().clone())).collect()
    }

    /// Cross-entropy step; returns the loss.
    fn supervised_step(&mut self, image: &Tensor, labels: &IdMap) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.record_leaves(&mut tape);
        let x = tape.constant(image.clone());
        let out = forward_on_tape(&mut tape, &vars, x)?;
        let loss = cross_entropy(&mut tape, out.logits, labels)?;
        let value = tape.value(loss).item().expect("scalar loss");
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        self.apply(&grads)?;
        Ok(value)
    }

    /// Mask-pooling step; returns (invariance, variance). With fewer than
    /// two masks the loss is zero and the step uses zero gradients.
    fn real_step(&mut self, image: &Tensor, masks: &MaskSet, alpha: f64, beta: f64) -> Result<(f64, f64)> {
        if masks.len() < 2 {
            let zeros = self.zero_grads();
            self.apply(&zeros)?;
            return Ok((0.0, 0.0));
        }
        let mut tape = Tape::new();
        let vars = self.params.record_leaves(&mut tape);
        let x = tape.constant(image.clone());
        let out = forward_on_tape(&mut tape, &vars, x)?;
        let loss = real_loss(&mut tape, out.dense, masks, alpha, beta)?;
        let scalar = |v| tape.value(v).item().expect("scalar loss");
        let (inv, var) = (scalar(loss.invariance), scalar(loss.variance));
        let grads = tape.backward(loss.total)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        self.apply(&grads)?;
        Ok((inv, var))
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn check_same_geometry(a: &Pool, b: &Pool) -> Result<()> {
    let dims = |p: &Pool| (p.manifest.height, p.manifest.width, p.manifest.classes);
    if dims(a) != dims(b) {
        return Err(contract_err!(
            "datasets {} and {} disagree on height, width or classes: {:?} vs {:?}",
            a.dir.display(),
            b.dir.display(),
            dims(a),
            dims(b)
        ));
    }
    Ok(())
}

/// Runs training, writes the checkpoint and metrics log into `out_dir`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(config, &mut |_| {})
}

/// As [`train`], calling `progress` after every epoch.
pub fn train_with_progress(config: &TrainConfig, progress: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    config.validate()?;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");

    // The supervised pool and, in full mode, the unannotated real pool.
    let (supervised, unlabelled) = match config.mode {
        Mode::SynOnly => (Pool::load(&path(&config.syn_dir), None)?, None),
        Mode::RealLabels => (Pool::load(&path(&config.real_dir), None)?, None),
        Mode::Full => (
            Pool::load(&path(&config.syn_dir), None)?,
            Some(Pool::load(&path(&config.real_dir), Some(Mode::Full))?),
        ),
    };
    supervised.check_against(&config.model)?;
    if let Some(real) = &unlabelled {
        real.check_against(&config.model)?;
        check_same_geometry(&supervised, real)?;
    }
    let mut masks = unlabelled.as_ref().map(|real| MaskCache::new(&path(&config.masks_dir), real));
    let test = config.test_dir.as_deref().map(TestSplit::load).transpose()?;

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let metrics_path = config.out_dir.join(METRICS_FILE);
    let mut metrics_text = String::new();

    let params = ModelParams::init(config.model, config.seed)?;
    let mut learner = Learner {
        ema: params.clone(),
        adam: AdamState::for_params(params.tensors()),
        params,
        adam_config: config.adam,
        ema_decay: config.ema_decay,
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
    sampler.set_stream(SAMPLER_STREAM);

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut sup, mut inv, mut var) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..config.frames_per_epoch {
            let k = sampler.random_range(0..supervised.len());
            sup.push(learner.supervised_step(&supervised.images[k], supervised.labels(k)?)?);

            if let (Some(real), Some(masks)) = (&unlabelled, masks.as_mut()) {
                let r = sampler.random_range(0..real.len());
                let (i, v) = learner.real_step(&real.images[r], masks.get(r)?, config.alpha, config.beta)?;
                inv.push(i);
                var.push(v);
            }
        }
        let ema_miou = match &test {
            Some(t) => evaluate_model(&learner.ema, &t.images, &t.labels)?.dataset_miou,
            None => None,
        };
        let record = EpochMetrics {
            epoch,
            mean_sup_loss: mean(&sup),
            mean_inv_loss: mean(&inv),
            mean_var_loss: mean(&var),
            ema_miou,
        };
        metrics_text.push_str(&serde_json::to_string(&record).expect("metrics serialize"));
        metrics_text.push('\n');
        std::fs::write(&metrics_path, &metrics_text).map_err(|e| Error::io(&metrics_path, e))?;
        progress(&record);
        log.push(record);
    }

    let checkpoint = Checkpoint {
        params: learner.params,
        ema: learner.ema,
        adam: learner.adam,
        adam_config: config.adam,
        epoch: config.epochs,
        log: log.clone(),
    };
    checkpoint.save(&config.out_dir.join(CHECKPOINT_FILE))?;

    let mious: Option<Vec<f64>> = log.iter().map(|m| m.ema_miou).collect();
    let last_k_miou = match mious {
        Some(m) if m.len() >= config.eval_last_k => Some(last_k_average(&m, config.eval_last_k)?),
        _ => None,
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics: log,
        last_k_miou,
    })
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("metrics log", path, e.to_string())))
        .collect()
}
