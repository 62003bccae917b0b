//! Training: Adam optimization, the ES/ED-supervised pretraining stage, the
//! main EF loop with the combined MAE + classification objective,
//! checkpointing, and the ablation switches.

use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};
use crate::eval::predict_ef_multiclip;
use crate::model::Model;
use crate::nn::{cross_entropy_loss, ef_to_class, mae_loss, Mode};
use crate::sampling::{sample_train_clip, zoom_augment, Clip};
use crate::synth::{Manifest, Split, Video};
use crate::tensor::{Param, Tensor};
use crate::Rng;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// One bias-corrected Adam update on a flat parameter slice.
///
/// `t` is the 1-based step count *after* this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Adam state over a fixed list of trainable parameters.
pub struct Adam {
    pub lr: f64,
    step: u64,
    /// (first, second) moment per parameter, aligned with `params`.
    moments: Vec<(Tensor, Tensor)>,
    params: Vec<Rc<Param>>,
}

impl Adam {
    pub fn new(params: Vec<Rc<Param>>, lr: f64) -> Adam {
        let moments = params
            .iter()
            .map(|p| {
                let shape = p.value().shape().to_vec();
                (Tensor::zeros(&shape), Tensor::zeros(&shape))
            })
            .collect();
        Adam {
            lr,
            step: 0,
            moments,
            params,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in the params.
    pub fn step(&mut self) {
        self.step += 1;
        for (p, (m, v)) in self.params.iter().zip(self.moments.iter_mut()) {
            let grad = p.grad().clone();
            p.update_value(|value| {
                adam_step(
                    value.data_mut(),
                    grad.data(),
                    m.data_mut(),
                    v.data_mut(),
                    self.step,
                    self.lr,
                    ADAM_BETA1,
                    ADAM_BETA2,
                    ADAM_EPSILON,
                );
            });
        }
    }

    fn moments_snapshot(&self) -> Vec<(String, Tensor, Tensor)> {
        self.params
            .iter()
            .zip(self.moments.iter())
            .map(|(p, (m, v))| (p.name().to_string(), m.clone(), v.clone()))
            .collect()
    }

    fn restore_moments(&mut self, saved: &[(String, Tensor, Tensor)], step: u64) -> Result<()> {
        if saved.len() != self.params.len() {
            return Err(Error::format(format!(
                "checkpoint has {} moment entries, optimizer expects {}",
                saved.len(),
                self.params.len()
            )));
        }
        for ((p, slot), (name, m, v)) in
            self.params.iter().zip(self.moments.iter_mut()).zip(saved)
        {
            if p.name() != name {
                return Err(Error::format(format!(
                    "moment entry '{name}' does not match parameter '{}'",
                    p.name()
                )));
            }
            *slot = (m.clone(), v.clone());
        }
        self.step = step;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Config and dataset handles
// ---------------------------------------------------------------------------

/// Numeric precision of a run, mirrored from [`crate::tensor::NumericMode`]
/// for configuration and hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Verify64,
    Train32,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::Verify64 => "verify64",
            Precision::Train32 => "train32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "verify64" => Ok(Precision::Verify64),
            "train32" => Ok(Precision::Train32),
            other => Err(Error::config(format!("unknown numeric mode '{other}'"))),
        }
    }

    pub fn apply(&self) {
        let mode = match self {
            Precision::Verify64 => crate::tensor::NumericMode::Verify64,
            Precision::Train32 => crate::tensor::NumericMode::Train32,
        };
        crate::tensor::set_numeric_mode(mode);
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Ablation switch: zoom-in augmentation during training.
    pub augment: bool,
    pub augment_prob: f64,
    /// Ablation switch: add the EF-class cross-entropy term.
    pub class_loss: bool,
    /// Weight of the classification term.
    pub lambda_class: f64,
    /// Ablation switch: run the ES/ED pretraining stage first.
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    /// Width (frames) of the soft Gaussian pretraining targets.
    pub pretrain_sigma: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            augment: true,
            augment_prob: 0.2,
            class_loss: true,
            lambda_class: 1.0,
            pretrain: true,
            pretrain_epochs: 20,
            pretrain_sigma: 2.0,
            precision: Precision::Verify64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch size must be at least 2 (batch normalization)",
            ));
        }
        Ok(())
    }
}

/// One labeled video with a stable id.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub video: Video,
}

/// In-memory dataset splits.
#[derive(Default)]
pub struct LoadedDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_dataset(dataset_dir: &Path, manifest: &Manifest) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    for e in &manifest.entries {
        let video = manifest.load_video(dataset_dir, e)?;
        let sample = Sample { id: e.id, video };
        match e.split {
            Split::Train => out.train.push(sample),
            Split::Val => out.val.push(sample),
            Split::Test => out.test.push(sample),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"EGCK";
const CKPT_VERSION: u32 = 1;

/// Serialized training state; resuming from it reproduces the uninterrupted
/// run step for step (same numeric mode).
pub struct Checkpoint {
    pub config_hash: u64,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub adam_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

/// FNV-1a 64-bit content hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

fn push_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(format!("{}: bad name encoding", self.path.display())))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_raw(shape, data))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    payload.extend_from_slice(&(ckpt.epoch as u64).to_le_bytes());
    payload.extend_from_slice(&ckpt.adam_step.to_le_bytes());
    payload.extend_from_slice(&ckpt.rng_seed);
    payload.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    payload.extend_from_slice(&ckpt.best_val_mae.to_bits().to_le_bytes());
    payload.extend_from_slice(&(ckpt.best_epoch as u64).to_le_bytes());
    payload.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        push_name(&mut payload, name);
        push_tensor(&mut payload, t);
    }
    payload.extend_from_slice(&(ckpt.moments.len() as u32).to_le_bytes());
    for (name, m, v) in &ckpt.moments {
        push_name(&mut payload, name);
        push_tensor(&mut payload, m);
        push_tensor(&mut payload, v);
    }

    let mut buf = Vec::with_capacity(payload.len() + 16);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    buf.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != CKPT_MAGIC {
        return Err(Error::format(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let stored_hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload = &bytes[16..];
    if fnv1a(payload) != stored_hash {
        return Err(Error::format(format!(
            "{}: content hash mismatch",
            path.display()
        )));
    }
    let mut r = Reader {
        bytes: payload,
        pos: 0,
        path,
    };
    let config_hash = r.u64()?;
    let epoch = r.u64()? as usize;
    let adam_step = r.u64()?;
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(r.take(32)?);
    let rng_word_pos = r.u128()?;
    let best_val_mae = r.f64()?;
    let best_epoch = r.u64()? as usize;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.name()?;
        params.push((name, r.tensor()?));
    }
    let n_moments = r.u32()? as usize;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        let name = r.name()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        moments.push((name, m, v));
    }
    Ok(Checkpoint {
        config_hash,
        epoch,
        adam_step,
        rng_seed,
        rng_word_pos,
        best_val_mae,
        best_epoch,
        params,
        moments,
    })
}

/// Writes checkpointed tensors back into the model's named parameters.
pub fn restore_params(model: &Model, saved: &[(String, Tensor)]) -> Result<()> {
    let params = model.params();
    if params.len() != saved.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, model expects {}",
            saved.len(),
            params.len()
        )));
    }
    for (p, (name, t)) in params.iter().zip(saved) {
        if p.name() != name {
            return Err(Error::format(format!(
                "checkpoint entry '{name}' does not match parameter '{}'",
                p.name()
            )));
        }
        if p.value().shape() != t.shape() {
            return Err(Error::format(format!(
                "checkpoint entry '{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                p.value().shape()
            )));
        }
        p.set_value(t.clone());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Soft Gaussian target over clip-local frame indices; both peaks contribute
/// even when one lies outside the window (tails), and the sum is clipped
/// into [0, 1].
pub fn pretrain_targets(
    real_frames: usize,
    es_local: isize,
    ed_local: isize,
    sigma: f64,
) -> Vec<f64> {
    (0..real_frames)
        .map(|j| {
            let g = |c: isize| {
                let d = j as f64 - c as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            };
            (g(es_local) + g(ed_local)).clamp(0.0, 1.0)
        })
        .collect()
}

/// Clip-local index of a video-level frame index, if it falls on a real
/// (non-padded) frame of the clip.
fn clip_local(clip: &Clip, video_index: usize) -> Option<usize> {
    let local = video_index as isize - clip.start_index as isize;
    (local >= 0 && (local as usize) < clip.real_frames()).then_some(local as usize)
}

/// One epoch of ES/ED pretraining: binary cross-entropy between node weights
/// and the soft targets, updating only encoder + attention parameters.
/// Returns the mean loss over contributing samples, or None when every clip
/// missed both indices.
pub fn pretrain_epoch(
    model: &Model,
    optimizer: &mut Adam,
    data: &[Sample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let t_fixed = model.cfg.t_fixed;
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, rng);

    let mut total_loss = 0.0;
    let mut total_samples = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        // Sample clips, keeping only those containing ES or ED.
        let mut clips = Vec::new();
        let mut targets: Vec<Vec<f64>> = Vec::new();
        for &i in chunk {
            let s = &data[i];
            let clip = sample_train_clip(&s.video, s.id, t_fixed, rng);
            let es = clip_local(&clip, s.video.es_index);
            let ed = clip_local(&clip, s.video.ed_index);
            if es.is_none() && ed.is_none() {
                continue;
            }
            let es_local = s.video.es_index as isize - clip.start_index as isize;
            let ed_local = s.video.ed_index as isize - clip.start_index as isize;
            targets.push(pretrain_targets(
                clip.real_frames(),
                es_local,
                ed_local,
                cfg.pretrain_sigma,
            ));
            clips.push(clip);
        }
        if clips.len() < 2 {
            continue; // batch-norm population
        }
        let weights = model.forward_node_weights(&clips, Mode::Train)?;
        let mut losses = Vec::with_capacity(clips.len());
        for ((clip, t), w) in clips.iter().zip(targets.iter()).zip(weights.iter()) {
            let real = clip.real_frames();
            let w_active = w.slice_rows(0, real)?;
            let t_col = Tensor::new(vec![real, 1], t.clone())?;
            let one_minus_t = Tensor::new(
                vec![real, 1],
                t.iter().map(|v| 1.0 - v).collect(),
            )?;
            // −mean(t·ln w + (1−t)·ln(1−w))
            let ln_w = w_active.ln()?;
            let ln_1mw = w_active.mul_scalar(-1.0)?.add_scalar(1.0)?.ln()?;
            let bce = ln_w
                .mul_const(&t_col)?
                .add(&ln_1mw.mul_const(&one_minus_t)?)?
                .mean_all()?
                .mul_scalar(-1.0)?;
            losses.push(bce);
        }
        let mut batch_loss = losses[0].clone();
        for l in &losses[1..] {
            batch_loss = batch_loss.add(l)?;
        }
        let batch_loss = batch_loss.mul_scalar(1.0 / losses.len() as f64)?;
        let loss_value = batch_loss.value().item()?;
        model.zero_grads();
        batch_loss.backward()?;
        optimizer.step();
        total_loss += loss_value * losses.len() as f64;
        total_samples += losses.len();
    }
    Ok((total_samples > 0).then(|| total_loss / total_samples as f64))
}

// ---------------------------------------------------------------------------
// Main training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Training MAE in EF points.
    pub train_mae: f64,
    /// Training cross-entropy (0 when the classification loss is off).
    pub train_ce: f64,
    /// Validation MAE (multi-clip protocol) in EF points.
    pub val_mae: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub pretrain_log: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn shuffle(indices: &mut [usize], rng: &mut Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Validation MAE with the multi-clip protocol, in EF points.
fn validation_mae(model: &Model, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for s in data {
        let pred = predict_ef_multiclip(model, &s.video, s.id)?;
        acc += (pred - s.video.ef).abs();
    }
    Ok(acc / data.len() as f64)
}

/// Full training run: optional pretraining stage, then the EF objective.
/// Writes `train_log.csv`, `last.ckpt` and `best.ckpt` under `out_dir`.
/// Resuming from a checkpoint continues its epoch counter and RNG stream.
pub fn train(
    model: &Model,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    config_hash: u64,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let t_fixed = model.cfg.t_fixed;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");

    let mut optimizer = Adam::new(
        model
            .params()
            .into_iter()
            .filter(|p| p.trainable())
            .collect(),
        cfg.learning_rate,
    );
    let mut rng;
    let mut start_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut pretrain_log = Vec::new();

    match resume {
        Some(ckpt) => {
            if ckpt.config_hash != config_hash {
                return Err(Error::config(format!(
                    "checkpoint config hash {:016x} does not match run config {:016x}",
                    ckpt.config_hash, config_hash
                )));
            }
            restore_params(model, &ckpt.params)?;
            optimizer.restore_moments(&ckpt.moments, ckpt.adam_step)?;
            rng = Rng::from_seed(ckpt.rng_seed);
            rng.set_word_pos(ckpt.rng_word_pos);
            start_epoch = ckpt.epoch;
            best_val = ckpt.best_val_mae;
            best_epoch = ckpt.best_epoch;
        }
        None => {
            rng = Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0001);
            // Pretraining stage: encoder + attention only, fresh optimizer.
            if cfg.pretrain && cfg.pretrain_epochs > 0 {
                let mut pre_opt = Adam::new(
                    model
                        .pretrain_params()
                        .into_iter()
                        .filter(|p| p.trainable())
                        .collect(),
                    cfg.learning_rate,
                );
                let mut pre_rng = Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0002);
                for _ in 0..cfg.pretrain_epochs {
                    let loss = pretrain_epoch(model, &mut pre_opt, &data.train, cfg, &mut pre_rng)?;
                    pretrain_log.push(loss.unwrap_or(f64::NAN));
                }
            }
        }
    }

    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle(&mut order, &mut rng);

        let mut mae_acc = 0.0;
        let mut ce_acc = 0.0;
        let mut n_acc = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch-norm population
            }
            let mut clips = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &data.train[i];
                let mut clip = sample_train_clip(&s.video, s.id, t_fixed, &mut rng);
                if cfg.augment {
                    clip = zoom_augment(&clip, &mut rng, cfg.augment_prob)?;
                }
                clips.push(clip);
                targets.push(s.video.ef / 100.0);
                labels.push(ef_to_class(s.video.ef)?);
            }
            let mut step = || -> Result<(f64, f64)> {
                let out = model.forward_batch(&clips, Mode::Train)?;
                let target = Tensor::new(vec![clips.len(), 1], targets.clone())?;
                let mae = mae_loss(&out.ef_norm, &target)?;
                let mae_value = mae.value().item()?;
                let (loss, ce_value) = if cfg.class_loss {
                    let ce = cross_entropy_loss(&out.logits, &labels)?;
                    let ce_value = ce.value().item()?;
                    (mae.add(&ce.mul_scalar(cfg.lambda_class)?)?, ce_value)
                } else {
                    (mae, 0.0)
                };
                if !loss.value().item()?.is_finite() {
                    return Err(Error::numeric("non-finite training loss"));
                }
                model.zero_grads();
                loss.backward()?;
                optimizer.step();
                Ok((mae_value, ce_value))
            };
            let (mae_value, ce_value) = step().map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg}; last good checkpoint: {}",
                    last_path.display()
                )),
                other => other,
            })?;
            mae_acc += mae_value * clips.len() as f64;
            ce_acc += ce_value * clips.len() as f64;
            n_acc += clips.len();
        }

        let train_mae = if n_acc > 0 {
            100.0 * mae_acc / n_acc as f64
        } else {
            f64::NAN
        };
        let train_ce = if n_acc > 0 { ce_acc / n_acc as f64 } else { f64::NAN };
        let val_mae = validation_mae(model, &data.val)?;
        log.push(EpochLog {
            epoch,
            train_mae,
            train_ce,
            val_mae,
        });

        let snapshot = |best_val: f64, best_epoch: usize| Checkpoint {
            config_hash,
            epoch: epoch + 1,
            adam_step: optimizer.step_count(),
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            best_val_mae: best_val,
            best_epoch,
            params: crate::model::snapshot_params(&model.params()),
            moments: optimizer.moments_snapshot(),
        };
        if !val_mae.is_nan() && val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            save_checkpoint(&best_path, &snapshot(best_val, best_epoch))?;
        }
        save_checkpoint(&last_path, &snapshot(best_val, best_epoch))?;
    }

    write_train_log(&out_dir.join("train_log.csv"), &log, config_hash, cfg.seed)?;
    Ok(TrainOutcome {
        log,
        pretrain_log,
        best_epoch,
        best_val_mae: best_val,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Checkpoint of a model that only completed the pretraining stage: epoch 0,
/// fresh optimizer moments, and the initial main-loop RNG state, so the
/// training loop can resume from it exactly as if its own pretraining stage
/// had just finished.
pub fn snapshot_for_pretrain(model: &Model, config_hash: u64, seed: u64) -> Checkpoint {
    let trainable: Vec<Rc<Param>> = model
        .params()
        .into_iter()
        .filter(|p| p.trainable())
        .collect();
    let rng = Rng::seed_from_u64(seed ^ 0x7EA1_0001);
    Checkpoint {
        config_hash,
        epoch: 0,
        adam_step: 0,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        best_val_mae: f64::INFINITY,
        best_epoch: 0,
        params: crate::model::snapshot_params(&model.params()),
        moments: trainable
            .iter()
            .map(|p| {
                let shape = p.value().shape().to_vec();
                (
                    p.name().to_string(),
                    Tensor::zeros(&shape),
                    Tensor::zeros(&shape),
                )
            })
            .collect(),
    }
}

pub fn write_train_log(
    path: &Path,
    log: &[EpochLog],
    config_hash: u64,
    seed: u64,
) -> Result<()> {
    let mut s = format!("# config_hash={config_hash:016x} seed={seed}\n");
    s.push_str("epoch,train_mae,train_ce,val_mae\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_mae, e.train_ce, e.val_mae
        ));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, s)?;
    Ok(())
}
