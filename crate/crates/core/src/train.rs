//! Optimizer, learning-rate schedule, training loop and evaluation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use roadfuse_tensor::{no_grad, Scalar, SeedRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::adi::DEFAULT_KN;
use crate::checkpoint::{export_weights, import_weights, Checkpoint, NamedTensor, ADAM_M, ADAM_V};
use crate::data::{self, make_batch, Extents, Sample, Split};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossConfig, Supervision};
use crate::metrics::{maxf_sweep, MetricsReport, ScoreHistogram, SweepResult};
use crate::model::{ModelConfig, RoadFuseNet};
use crate::nn::{Ctx, Module};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        seed: u64,
        n: usize,
    },
    /// Frames under `root/training`; list files hold one frame id per line.
    Kitti {
        root: PathBuf,
        #[serde(default)]
        train_list: Option<PathBuf>,
        #[serde(default)]
        val_list: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic { seed: 7, n: 64 }
    }
}

impl DataConfig {
    pub fn load(&self, split: Split, extents: Extents, kn: usize) -> Result<Vec<Sample>> {
        match self {
            DataConfig::Synthetic { seed, n } => data::synth_dataset(*seed, *n, extents, kn),
            DataConfig::Kitti {
                root,
                train_list,
                val_list,
            } => {
                let list = match split {
                    Split::Train => train_list,
                    Split::Val => val_list,
                };
                data::list_frames(root, list.as_deref(), split)?
                    .iter()
                    .map(|id| data::load_kitti_sample(root, "training", id, extents, kn))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Stops early after this many optimizer steps; the schedule spans
    /// `min(epochs × batches, max_steps)`.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub height: usize,
    pub width: usize,
    pub kn: usize,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    /// Random horizontal flips.
    pub flip: bool,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 2e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 150,
            max_steps: None,
            batch_size: 2,
            height: Extents::KITTI.height,
            width: Extents::KITTI.width,
            kn: DEFAULT_KN,
            warmup_steps: 0,
            grad_clip: None,
            flip: false,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic overfit run at reduced resolution.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 7,
            lr: 2e-3,
            epochs: 16,
            max_steps: Some(200),
            batch_size: 2,
            height: 128,
            width: 416,
            model: ModelConfig {
                token_cap: Some(256),
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn extents(&self) -> Extents {
        Extents {
            height: self.height,
            width: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return fail("grad_clip must be positive");
        }
        crate::encoder::check_extents(self.height, self.width)?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| text[..s.start].matches('\n').count() + 1);
            Error::Config(format!("line {line}: {}", e.message().trim_end()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `lr0 · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Cosine schedule with an optional linear warmup.
pub fn schedule_lr(step: usize, total: usize, warmup: usize, lr0: f64) -> f64 {
    if step < warmup {
        return lr0 * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(step - warmup, total.saturating_sub(warmup), lr0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update of a single tensor; `t` is the 1-based step number.
pub fn adamw_update<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, h: &AdamWHyper) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i].to_f64();
        let mut pi = p[i].to_f64();
        pi -= h.lr * h.weight_decay * pi;
        let mi = h.beta1 * m[i].to_f64() + (1.0 - h.beta1) * gi;
        let vi = h.beta2 * v[i].to_f64() + (1.0 - h.beta2) * gi * gi;
        pi -= h.lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        p[i] = T::from_f64(pi);
    }
}

/// AdamW over the trainable parameters of a module, in visit order.
pub struct AdamW {
    pub names: Vec<String>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(model: &impl Module<f32>) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        model.visit("", &mut |name, p| {
            if p.is_trainable() {
                names.push(name.to_string());
                m.push(vec![0.0; p.numel()]);
            }
        });
        AdamW {
            names,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// Applies one step. Parameters that received no gradient are left
    /// alone. Any non-finite gradient rejects the whole step.
    pub fn step(&mut self, model: &impl Module<f32>, h: &AdamWHyper, clip: Option<f64>) -> Result<()> {
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.names.len());
        model.visit("", &mut |_, p| {
            if p.is_trainable() {
                grads.push(p.grad());
            }
        });
        if grads.len() != self.names.len() {
            return Err(Error::Invalid("optimizer does not match model topology".into()));
        }
        for (name, g) in self.names.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if let Some(max) = clip {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = (max / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
            }
        }
        self.t += 1;
        let mut i = 0;
        let mut result = Ok(());
        model.visit("", &mut |_, p| {
            if !p.is_trainable() {
                return;
            }
            if let (Some(g), true) = (&grads[i], result.is_ok()) {
                let mut data = p.to_vec();
                adamw_update(&mut data, g, &mut self.m[i], &mut self.v[i], self.t, h);
                result = p.set_data(data);
            }
            i += 1;
        });
        result
    }

    pub fn state_tensors(&self, model: &impl Module<f32>) -> Vec<NamedTensor> {
        let mut shapes = Vec::new();
        model.visit("", &mut |_, p| {
            if p.is_trainable() {
                shapes.push(p.shape());
            }
        });
        let mut out = Vec::with_capacity(2 * self.names.len());
        for (prefix, moments) in [(ADAM_M, &self.m), (ADAM_V, &self.v)] {
            for ((name, data), shape) in self.names.iter().zip(moments).zip(&shapes) {
                out.push(NamedTensor {
                    name: format!("{prefix}{name}"),
                    shape: shape.clone(),
                    data: data.clone(),
                });
            }
        }
        out
    }

    pub fn load_state(&mut self, tensors: &[NamedTensor], t: u64) -> Result<()> {
        for (prefix, moments) in [(ADAM_M, &mut self.m), (ADAM_V, &mut self.v)] {
            for (name, slot) in self.names.iter().zip(moments.iter_mut()) {
                let key = format!("{prefix}{name}");
                let found = tensors
                    .iter()
                    .find(|x| x.name == key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state `{key}` missing")))?;
                if found.data.len() != slot.len() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has the wrong length")));
                }
                slot.clone_from(&found.data);
            }
        }
        self.t = t;
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub main: f64,
    pub aux: Vec<f64>,
    pub ms: f64,
}

/// Per-sample targets with the auxiliary downsampled truths precomputed.
struct Targets {
    full: Vec<f32>,
    aux: Vec<(usize, usize, Vec<f32>)>,
}

impl Targets {
    fn new(s: &Sample) -> Result<Self> {
        let sup = Supervision::new(Tensor::from_vec(&[1, 1, s.height, s.width], s.truth_f32())?)?;
        Ok(Targets {
            full: sup.full.to_vec(),
            aux: sup
                .aux
                .iter()
                .map(|t| (t.shape()[2], t.shape()[3], t.to_vec()))
                .collect(),
        })
    }

    fn batch(items: &[&Targets], h: usize, w: usize) -> Result<Supervision<f32>> {
        let b = items.len();
        let full = Tensor::from_vec(&[b, 1, h, w], items.iter().flat_map(|t| t.full.iter().copied()).collect())?;
        let aux = (0..items[0].aux.len())
            .map(|k| {
                let (ah, aw, _) = items[0].aux[k];
                let v = items.iter().flat_map(|t| t.aux[k].2.iter().copied()).collect();
                Ok(Tensor::from_vec(&[b, 1, ah, aw], v)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Supervision { full, aux })
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: RoadFuseNet<f32>,
    pub opt: AdamW,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = RoadFuseNet::new(cfg.model, cfg.seed)?;
        let opt = AdamW::new(&model);
        Ok(Trainer {
            cfg,
            model,
            opt,
            step: 0,
        })
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.cfg.batch_size);
        let total = self.cfg.epochs * per_epoch;
        self.cfg.max_steps.map_or(total, |m| m.min(total))
    }

    fn hyper(&self, lr: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.eps,
            weight_decay: self.cfg.weight_decay,
        }
    }

    /// Forward, backward and one optimizer step on a prepared batch.
    fn train_batch(&mut self, samples: &[&Sample], sup: &Supervision<f32>, lr: f64) -> Result<LossBreakdown> {
        let batch = make_batch(samples)?;
        let ctx = Ctx::train(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.step);
        let out = self.model.forward(&batch.rgb, Some(&batch.adi), &ctx)?;
        let (loss, parts) = total_loss(&out, sup, &self.cfg.loss)?;
        self.model.zero_grad();
        loss.backward()?;
        let h = self.hyper(lr);
        self.opt.step(&self.model, &h, self.cfg.grad_clip)?;
        self.model.zero_grad();
        self.step += 1;
        Ok(parts)
    }

    /// Trains until the schedule ends, calling `on_step` after every step.
    /// Sample order is shuffled per epoch from the run seed.
    pub fn fit(&mut self, samples: &[Sample], mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        let flipped: Vec<Sample> = if self.cfg.flip {
            samples.iter().map(Sample::flipped).collect()
        } else {
            Vec::new()
        };
        let targets = samples.iter().map(Targets::new).collect::<Result<Vec<_>>>()?;
        let flipped_targets = flipped.iter().map(Targets::new).collect::<Result<Vec<_>>>()?;
        let total = self.total_steps(samples.len());
        let per_epoch = samples.len().div_ceil(self.cfg.batch_size);
        let (h, w) = (samples[0].height, samples[0].width);
        while (self.step as usize) < total {
            let epoch = self.step as usize / per_epoch;
            let mut rng = SeedRng::new(self.cfg.seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
            let mut order: Vec<usize> = (0..samples.len()).collect();
            rng.shuffle(&mut order);
            let flips: Vec<bool> = order.iter().map(|_| self.cfg.flip && rng.bernoulli(0.5)).collect();
            let first = self.step as usize % per_epoch;
            let bs = self.cfg.batch_size;
            for chunk in (first..per_epoch).map(|b| b * bs..((b + 1) * bs).min(samples.len())) {
                if self.step as usize >= total {
                    break;
                }
                let picked: Vec<(&Sample, &Targets)> = chunk
                    .map(|i| {
                        let j = order[i];
                        if flips[i] {
                            (&flipped[j], &flipped_targets[j])
                        } else {
                            (&samples[j], &targets[j])
                        }
                    })
                    .collect();
                let batch: Vec<&Sample> = picked.iter().map(|p| p.0).collect();
                let tg: Vec<&Targets> = picked.iter().map(|p| p.1).collect();
                let sup = Targets::batch(&tg, h, w)?;
                let lr = schedule_lr(self.step as usize, total, self.cfg.warmup_steps, self.cfg.lr);
                let t0 = Instant::now();
                let parts = self.train_batch(&batch, &sup, lr)?;
                let rec = StepRecord {
                    step: self.step,
                    epoch: epoch as u64,
                    lr,
                    loss: parts.total,
                    main: parts.main,
                    aux: parts.aux,
                    ms: t0.elapsed().as_secs_f64() * 1e3,
                };
                on_step(self, &rec)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, metrics: Option<&MetricsReport>) -> Result<Checkpoint> {
        let mut tensors = export_weights(&self.model);
        tensors.extend(self.opt.state_tensors(&self.model));
        Ok(Checkpoint {
            step: self.step,
            epoch: 0,
            config: serde_json::to_value(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
            metrics: metrics
                .map(serde_json::to_value)
                .transpose()
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            tensors,
        })
    }

    /// Rebuilds model and optimizer from a checkpoint, using its embedded
    /// configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut t = Trainer::new(cfg)?;
        import_weights(&t.model, &ckpt.weights())?;
        t.opt.load_state(&ckpt.tensors, ckpt.step)?;
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Road probabilities for one sample in eval mode.
pub fn predict(model: &RoadFuseNet<f32>, sample: &Sample) -> Result<Vec<f64>> {
    Ok(predict_batch(model, &[sample])?.remove(0))
}

pub fn predict_batch(model: &RoadFuseNet<f32>, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let batch = make_batch(samples)?;
    let ctx = Ctx::eval();
    let out = no_grad(|| model.forward(&batch.rgb, Some(&batch.adi), &ctx))?;
    let per = samples[0].height * samples[0].width;
    Ok(out
        .main
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|&z| roadfuse_tensor::sigmoid(z as f64)).collect())
        .collect())
}

/// Accumulates the score histogram over `samples` (valid pixels only) and
/// runs the threshold sweep.
pub fn evaluate(model: &RoadFuseNet<f32>, samples: &[Sample], batch_size: usize) -> Result<(ScoreHistogram, SweepResult)> {
    let mut hist = ScoreHistogram::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for (s, prob) in chunk.iter().zip(predict_batch(model, &refs)?) {
            hist.add(&prob, &s.truth, Some(&s.valid))?;
        }
    }
    let sweep = maxf_sweep(&hist);
    Ok((hist, sweep))
}

/// Appends one JSON line per record.
pub struct HistoryLog {
    file: std::fs::File,
}

impl HistoryLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(HistoryLog { file })
    }

    pub fn append<R: Serialize>(&mut self, rec: &R) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::Invalid(format!("writing history: {e}")))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::malformed(path, "history line", e.to_string())))
        .collect()
}

/// Outcome of [`run_training`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<StepRecord>,
    pub report: MetricsReport,
    pub final_checkpoint: Option<PathBuf>,
}

/// Full run: load data, train, evaluate on the training samples and, when
/// `out_dir` is given, write `history.jsonl`, periodic checkpoints and
/// `final.rfck` with the measured metrics embedded.
pub fn run_training(
    cfg: TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = cfg.data.load(Split::Train, cfg.extents(), cfg.kn)?;
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(HistoryLog::create(&d.join("history.jsonl"))?)
        }
        None => None,
    };
    let mut trainer = Trainer::new(cfg)?;
    let mut history = Vec::new();
    trainer.fit(&samples, |t, rec| {
        progress(rec);
        history.push(rec.clone());
        if let Some(log) = &mut log {
            log.append(rec)?;
        }
        let every = t.cfg.checkpoint_every;
        if let (Some(d), true) = (out_dir, every > 0 && rec.step % every as u64 == 0) {
            t.checkpoint(None)?.save(&d.join(format!("step_{:06}.rfck", rec.step)))?;
        }
        Ok(())
    })?;
    let (_, sweep) = evaluate(&trainer.model, &samples, trainer.cfg.batch_size)?;
    let report = MetricsReport::new(&sweep, trainer.model.inference_param_count(), None);
    let final_checkpoint = match out_dir {
        Some(d) => {
            let p = d.join("final.rfck");
            trainer.checkpoint(Some(&report))?.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        trainer,
        history,
        report,
        final_checkpoint,
    })
}
