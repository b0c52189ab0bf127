//! Pre-training loop: corpus sampling with epoch accounting, AdamW updates on
//! a warmup plus cosine schedule, metrics logging and checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradStore, Tape};
use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, Planning, Sample};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::seeds::{self, derive_seed};
use crate::tensor::{Real, Tensor};
use crate::attention::TraceRequest;
use crate::tokenizer::sample_mask;
use crate::video::{augment_pair, load_frames_dir, sample_pair_times, FramePair, Scene, SceneSpec, VideoClip};

pub const METRICS_HEADER: &str = "step,epoch,loss,lr,between_mass_mean";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Where training pairs come from and how they are formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub scene: SceneSpec,
    /// Number of synthetic clips (ignored when a manifest is given).
    pub clips: usize,
    pub manifest: Option<PathBuf>,
    pub max_gap: usize,
    /// Single-frame pairs: both slots hold the same frame.
    pub static_pairs: bool,
    pub augment: bool,
    pub crop_scale: [f32; 2],
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            clips: 200,
            manifest: None,
            max_gap: 50,
            static_pairs: false,
            augment: true,
            crop_scale: [0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub output_dir: PathBuf,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 4,
            epochs: 40,
            warmup_epochs: 2,
            seed: 0,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            output_dir: PathBuf::from("run"),
            checkpoint_every: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::rejected("batch size must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::rejected(format!("warmup epochs {} must be below total epochs {}", self.warmup_epochs, self.epochs)));
        }
        if self.data.max_gap == 0 {
            return Err(Error::rejected("maximum frame gap must be at least 1"));
        }
        let [lo, hi] = self.data.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::rejected(format!("crop scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
        }
        if self.workers == 0 {
            return Err(Error::rejected("workers must be at least 1"));
        }
        if self.data.manifest.is_none() {
            self.data.scene.validate()?;
            if self.data.scene.canvas != self.model.input_size && !self.data.augment {
                return Err(Error::rejected("scene canvas differs from model input size and augmentation is off"));
            }
        }
        Ok(())
    }

    /// Hash over everything that affects the trajectory. Output location,
    /// checkpoint cadence and worker count are excluded.
    pub fn trajectory_hash(&self) -> Result<String> {
        let mut view = self.clone();
        view.output_dir = PathBuf::new();
        view.checkpoint_every = 0;
        view.workers = 1;
        config_hash(&view)
    }
}

enum ClipSource {
    Scene(Scene),
    Clip(VideoClip),
}

/// The set of clips an epoch walks through once.
pub struct Corpus {
    clips: Vec<ClipSource>,
    canvas: Option<usize>,
}

impl Corpus {
    pub fn synthetic(spec: &SceneSpec, clips: usize, seed: u64) -> Result<Self> {
        let clips = (0..clips as u64)
            .map(|i| Scene::new(spec, derive_seed(&[seeds::TAG_CORPUS, seed, i])).map(ClipSource::Scene))
            .collect::<Result<_>>()?;
        Ok(Self { clips, canvas: Some(spec.canvas) })
    }

    pub fn from_clips(clips: Vec<VideoClip>) -> Self {
        Self { clips: clips.into_iter().map(ClipSource::Clip).collect(), canvas: None }
    }

    pub fn from_spec(data: &DataSpec, seed: u64) -> Result<Self> {
        let corpus = match &data.manifest {
            Some(path) => Self::from_clips(load_frames_dir(path)?),
            None => Self::synthetic(&data.scene, data.clips, seed)?,
        };
        if corpus.is_empty() {
            return Err(Error::rejected("training corpus is empty"));
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn canvas(&self) -> Option<usize> {
        self.canvas
    }

    /// Draws a pair from clip `index`: twin frames up to `max_gap` apart, or
    /// one frame twice when `static_pairs` is set.
    pub fn pair(&self, index: usize, max_gap: usize, static_pairs: bool, rng: &mut impl Rng) -> Result<FramePair> {
        match &self.clips[index] {
            ClipSource::Scene(scene) => {
                if static_pairs {
                    let t = rng.random_range(0..scene.len());
                    let mut pair = FramePair::from_single(scene.render(t));
                    pair.start = t;
                    return Ok(pair);
                }
                let (start, gap) = sample_pair_times(scene.len(), max_gap, rng)?;
                Ok(FramePair {
                    frame_a: scene.render(start),
                    frame_b: scene.render(start + gap),
                    start,
                    gap,
                    correspondence: None,
                })
            }
            ClipSource::Clip(clip) if static_pairs => crate::video::sample_static_pair(clip, rng),
            ClipSource::Clip(clip) => crate::video::sample_frame_pair(clip, max_gap, rng),
        }
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub between_mass_mean: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.epoch, self.loss, self.lr, self.between_mass_mean)
    }
}

struct SampleResult<T: Real> {
    loss: f64,
    between: f64,
    grads: GradStore<T>,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: u64,
    lr: f64,
    reason: String,
    sample_losses: Vec<Option<f64>>,
    parameter_norms: Vec<(&'a str, f64)>,
}

/// Owns the model, optimizer and corpus for one run.
pub struct Trainer<T: Real> {
    config: TrainConfig,
    corpus: Corpus,
    model: Model<T>,
    optimizer: AdamW<T>,
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    hash: String,
    permutation: Option<(u64, Vec<usize>)>,
}

impl<T: Real> Trainer<T> {
    /// Builds a fresh run and prepares the output directory.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let corpus = Corpus::from_spec(&config.data, config.seed)?;
        let model = Model::init(&config.model, config.seed)?;
        Self::assemble(config, corpus, model, None)
    }

    /// Restores a run from a checkpoint written by [`Trainer::save`]. The
    /// checkpoint must come from a run with the same trajectory hash.
    pub fn resume(config: TrainConfig, checkpoint: &Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        let hash = config.trajectory_hash()?;
        let stored = checkpoint.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
        if stored != hash {
            return Err(Error::rejected(format!("checkpoint config hash {stored} does not match run config {hash}")));
        }
        let step = checkpoint.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| Error::Format("missing step".into()))?;
        let n = checkpoint.tensors.len() / 3;
        if checkpoint.tensors.len() != 3 * n {
            return Err(Error::Format("checkpoint lacks optimizer state".into()));
        }
        let model = Model::from_tensors(&config.model, checkpoint.tensors[..n].to_vec())?;
        let corpus = Corpus::from_spec(&config.data, config.seed)?;
        let moments = |k: usize| checkpoint.tensors[k * n..(k + 1) * n].iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
        let optimizer = AdamW { config: adamw_config(&config), step, first: moments(1), second: moments(2) };
        Self::assemble(config, corpus, model, Some((step, optimizer)))
    }

    fn assemble(config: TrainConfig, corpus: Corpus, model: Model<T>, resumed: Option<(u64, AdamW<T>)>) -> Result<Self> {
        if let Some(canvas) = corpus.canvas() {
            if canvas != config.model.input_size && !config.data.augment {
                return Err(Error::rejected("corpus frames do not match the model input size"));
            }
        }
        let clips = corpus.len() as u64;
        let batch = config.batch_size as u64;
        let total_steps = (config.epochs as u64 * clips).div_ceil(batch);
        let warmup_steps = config.warmup_epochs as u64 * clips / batch;
        let hash = config.trajectory_hash()?;
        prepare_output(&config.output_dir)?;
        let (step, optimizer) = match resumed {
            Some(state) => state,
            None => (0, AdamW::new(adamw_config(&config), model.params())),
        };
        let trainer =
            Self { config, corpus, model, optimizer, step, total_steps, warmup_steps, hash, permutation: None };
        trainer.init_metrics()?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.config.output_dir.join(METRICS_FILE)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Keeps metrics rows for steps already taken and drops the rest, so a
    /// resumed run continues the log where the checkpoint left off.
    fn init_metrics(&self) -> Result<()> {
        let path = self.metrics_path();
        let mut text = format!("{METRICS_HEADER}\n");
        if self.step > 0 {
            if let Ok(existing) = fs::read_to_string(&path) {
                for line in existing.lines().skip(1) {
                    let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s < self.step) {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
        }
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Clip index for global sample `k`: each epoch walks a fresh permutation
    /// of the corpus, so every clip is used exactly once per epoch.
    fn clip_for(&mut self, k: u64) -> usize {
        let n = self.corpus.len() as u64;
        let epoch = k / n;
        if self.permutation.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.corpus.len()).collect();
            order.shuffle(&mut seeds::stream(&[seeds::TAG_EPOCH, self.config.seed, epoch]));
            self.permutation = Some((epoch, order));
        }
        self.permutation.as_ref().expect("set above").1[(k % n) as usize]
    }

    /// Epoch of the step's first sample.
    pub fn epoch_of(&self, step: u64) -> u64 {
        step * self.config.batch_size as u64 / self.corpus.len() as u64
    }

    fn run_sample(&self, step: u64, slot: usize, clip: usize) -> Result<SampleResult<T>> {
        let seed = derive_seed(&[seeds::TAG_SAMPLE, self.config.seed, step, slot as u64]);
        let mut rng = seeds::stream(&[seed]);
        let data = &self.config.data;
        let mut pair = self.corpus.pair(clip, data.max_gap, data.static_pairs, &mut rng)?;
        if data.augment {
            let [lo, hi] = data.crop_scale;
            pair = augment_pair(&pair, self.config.model.input_size, (lo, hi), &mut rng);
        }
        let mask = sample_mask(&self.model.layout(), self.config.model.mask_ratio, &mut rng)?;
        let sample = Sample::new(&pair, self.config.model.patch, mask)?;
        let mut tape = Tape::new();
        let options = ForwardOptions { trace: TraceRequest { masses: true, ..TraceRequest::default() } };
        let out = self.model.forward(&mut tape, &sample, Planning::Sample { seed: derive_seed(&[seed, 1]) }, options)?;
        let loss = tape.value(out.loss).item().f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let mut grads = GradStore::new();
        tape.backward(out.loss, &mut grads)?;
        Ok(SampleResult { loss, between: out.diagnostics.mean_between_mass(), grads })
    }

    /// Runs every sample of the batch, in parallel when configured. Results
    /// come back in sample order regardless of the worker count.
    fn run_batch(&mut self, step: u64) -> Vec<Result<SampleResult<T>>> {
        let batch = self.config.batch_size;
        let clips: Vec<usize> = (0..batch).map(|b| self.clip_for(step * batch as u64 + b as u64)).collect();
        let workers = self.config.workers.min(batch);
        if workers <= 1 {
            return clips.iter().enumerate().map(|(b, &c)| self.run_sample(step, b, c)).collect();
        }
        let this = &*self;
        let chunk = batch.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = clips
                .chunks(chunk)
                .enumerate()
                .map(|(w, part)| {
                    scope.spawn(move || {
                        part.iter().enumerate().map(|(i, &c)| this.run_sample(step, w * chunk + i, c)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }

    /// Performs one optimizer step and appends its metrics row.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = lr_at(step, self.config.base_lr, self.warmup_steps, self.total_steps);
        let results = self.run_batch(step);
        if results.iter().any(|r| r.is_err()) {
            let reason = results.iter().find_map(|r| r.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
            let losses = results.iter().map(|r| r.as_ref().ok().map(|s| s.loss)).collect();
            return Err(self.dump_divergence(step, lr, reason, losses));
        }
        let results: Vec<SampleResult<T>> = results.into_iter().map(|r| r.expect("checked")).collect();
        let n = results.len() as f64;
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
        let between = results.iter().map(|r| r.between).sum::<f64>() / n;
        let mut grads = GradStore::new();
        for r in &results {
            grads.merge(&r.grads);
        }
        grads.scale(T::c(1.0 / n));
        self.optimizer.update(self.model.params_mut(), &grads, lr)?;
        if self.model.params().iter().any(|p| !p.tensor.all_finite()) {
            let losses = results.iter().map(|r| Some(r.loss)).collect();
            return Err(self.dump_divergence(step, lr, "non-finite parameters after update".into(), losses));
        }
        self.step += 1;
        let record = StepRecord { step, epoch: self.epoch_of(step), loss, lr, between_mass_mean: between };
        let path = self.metrics_path();
        let mut file = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        writeln!(file, "{}", record.csv_row()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) && !self.is_done() {
            self.save(&self.config.output_dir.join(format!("step-{:06}.ckpt", self.step)))?;
        }
        Ok(record)
    }

    fn dump_divergence(&self, step: u64, lr: f64, reason: String, sample_losses: Vec<Option<f64>>) -> Error {
        let dump = DivergenceDump {
            step,
            lr,
            reason,
            sample_losses,
            parameter_norms: self
                .model
                .params()
                .iter()
                .map(|p| (p.name.as_str(), p.tensor.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()))
                .collect(),
        };
        let path = self.config.output_dir.join(format!("divergence-step{step}.json"));
        if let Ok(text) = serde_json::to_string_pretty(&dump) {
            let _ = fs::write(&path, text);
        }
        Error::Diverged { step, dump: path }
    }

    /// Trains until `stop` steps have been taken (or the schedule ends),
    /// writing the final checkpoint when the schedule completes.
    pub fn run(&mut self, stop: Option<u64>) -> Result<Vec<StepRecord>> {
        let end = stop.unwrap_or(self.total_steps).min(self.total_steps);
        let mut records = Vec::new();
        while self.step < end {
            records.push(self.train_step()?);
        }
        if self.is_done() {
            self.save(&self.config.output_dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        let meta = serde_json::json!({
            "kind": "pretrain",
            "model": self.config.model,
            "train": self.config,
            "config_hash": self.hash,
            "step": self.step,
            "seed": self.config.seed,
            "precision": T::DTYPE,
        });
        let params = self.model.params();
        let mut tensors: Vec<(String, Tensor<T>)> = params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        for (kind, moments) in [("adam.m", &self.optimizer.first), ("adam.v", &self.optimizer.second)] {
            tensors.extend(params.iter().zip(moments).map(|(p, m)| (format!("{kind}.{}", p.name), m.clone())));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }
}

fn adamw_config(config: &TrainConfig) -> AdamWConfig {
    AdamWConfig { beta1: config.beta1, beta2: config.beta2, weight_decay: config.weight_decay, ..AdamWConfig::default() }
}

fn prepare_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating output directory {}", dir.display()), e))?;
    let probe = dir.join(".write-test");
    File::create(&probe)
        .and_then(|f| BufWriter::new(f).flush())
        .map_err(|e| Error::io(format!("output directory {} is not writable", dir.display()), e))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

/// Loads the model stored in a training checkpoint.
pub fn load_model<T: Real>(checkpoint: &Checkpoint<T>) -> Result<Model<T>> {
    let config: ModelConfig = checkpoint
        .meta
        .get("model")
        .cloned()
        .ok_or_else(|| Error::Format("checkpoint has no model config".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(e.to_string())))?;
    let n = config.tensor_count();
    if checkpoint.tensors.len() < n {
        return Err(Error::Format("checkpoint has too few tensors".into()));
    }
    Model::from_tensors(&config, checkpoint.tensors[..n].to_vec())
}

/// Reads the training configuration stored in a checkpoint.
pub fn stored_train_config<T: Real>(checkpoint: &Checkpoint<T>) -> Result<TrainConfig> {
    let value = checkpoint.meta.get("train").cloned().ok_or_else(|| Error::Format("checkpoint has no train config".into()))?;
    serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StackConfig;

    pub(crate) fn tiny(dir: &Path) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 3,
            warmup_epochs: 1,
            seed: 3,
            base_lr: 1e-3,
            data: DataSpec {
                scene: SceneSpec { canvas: 16, patch: 4, sprite_size: 4, sprites: 2, clip_length: 8, ..SceneSpec::default() },
                clips: 4,
                max_gap: 3,
                ..DataSpec::default()
            },
            model: ModelConfig {
                input_size: 16,
                patch: 4,
                encoder: StackConfig { depth: 1, width: 8, heads: 2 },
                decoder: StackConfig { depth: 1, width: 8, heads: 2 },
                mlp_ratio: 2,
                ..ModelConfig::default()
            },
            output_dir: dir.to_path_buf(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_visits_every_clip_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny(dir.path());
        config.data.clips = 5;
        config.batch_size = 1;
        let mut t = Trainer::<f32>::new(config).unwrap();
        for e in 0..3u64 {
            let mut seen: Vec<usize> = (0..5).map(|i| t.clip_for(e * 5 + i)).collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(t.epoch_of(4), 0);
        assert_eq!(t.epoch_of(5), 1);
    }

    #[test]
    fn schedule_lengths_follow_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::<f32>::new(tiny(dir.path())).unwrap();
        assert_eq!(t.total_steps(), 6);
        assert_eq!(t.warmup_steps(), 2);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut a = Trainer::<f32>::new(tiny(d1.path())).unwrap();
        let mut b = Trainer::<f32>::new(TrainConfig { workers: 2, ..tiny(d2.path()) }).unwrap();
        assert_eq!(a.run(None).unwrap(), b.run(None).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(TrainConfig { warmup_epochs: 3, ..tiny(dir.path()) }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..tiny(dir.path()) }.validate().is_err());
    }
}
