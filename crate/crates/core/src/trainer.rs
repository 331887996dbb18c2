//! Optimization: Adam with global-norm clipping and linear warmup, EMA,
//! datasets, checkpoints and the training loop.
//!
//! All randomness of step `k` comes from named streams keyed by
//! `(seed, k)`, so a run restarted from a checkpoint continues bit-exactly.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::config::KeyValues;
use crate::diffusion::{self, LossConfig, LossTarget};
use crate::error::{Error, Result};
use crate::io::{self, Image};
use crate::params::ParamSet;
use crate::rng;
use crate::sampler::{SamplerConfig, VarianceForm};
use crate::schedule::{Interpolation, ScheduleKind, ScheduleSpec};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::uvit::{UViT, UViTConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub num_train_steps: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_steps: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-12,
            ema_decay: 0.9999,
            grad_clip: 1.0,
            num_train_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.adam_beta1) || !in_unit(self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !in_unit(self.ema_decay) && self.ema_decay != 0.0 {
            return Err(Error::Config(format!("ema_decay = {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.grad_clip > 0.0) || !(self.adam_eps > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("grad_clip, adam_eps and learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `learning_rate · min(1, step / warmup_steps)` for the 1-based update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moments plus the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamReport {
    /// Global L2 norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

pub fn global_norm<T: Scalar>(grads: &ParamSet<T>) -> f64 {
    grads.iter().flat_map(|(_, t)| t.data().iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// One clipped, warmed-up, bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<AdamReport> {
    params.check_matches(grads)?;
    params.check_matches(&state.m)?;
    let norm = global_norm(grads);
    if !norm.is_finite() {
        let bad: Vec<_> = grads.iter().filter(|(_, t)| !t.all_finite()).map(|(n, _)| n.to_string()).collect();
        return Err(Error::NonFinite(format!(
            "gradient norm {norm} at update {}; non-finite in: {}",
            state.step + 1,
            bad.join(", ")
        )));
    }
    let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step;
    let lr = cfg.lr_at(t);
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((_, p), (_, g)), ((_, m), (_, v))) in
        params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64() * clip;
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            p[i] = T::of(p[i].as_f64() - update);
        }
    }
    Ok(AdamReport { grad_norm: norm, clipped_norm: norm * clip, lr })
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update<T: Scalar>(ema: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) -> Result<()> {
    ema.check_matches(params)?;
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = T::of(decay * e.as_f64() + (1.0 - decay) * p.as_f64());
        }
    }
    Ok(())
}

/// A labelled image source. Examples are pure functions of `(seed, index)`.
pub trait Dataset: Send + Sync {
    fn resolution(&self) -> usize;
    fn channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `[H, W, C]` image in `[−1, 1]` and its class.
    fn example(&self, seed: u64, index: u64) -> (Tensor<f32>, usize);
}

/// Examples `step·B .. (step+1)·B` stacked into `[B, H, W, C]`.
pub fn batch(ds: &dyn Dataset, seed: u64, step: u64, batch_size: usize) -> (Tensor<f32>, Vec<usize>) {
    let r = ds.resolution();
    let c = ds.channels();
    let mut data = Vec::with_capacity(batch_size * r * r * c);
    let mut classes = Vec::with_capacity(batch_size);
    for i in 0..batch_size as u64 {
        let (img, class) = ds.example(seed, step * batch_size as u64 + i);
        data.extend_from_slice(img.data());
        classes.push(class);
    }
    (Tensor::from_vec(&[batch_size, r, r, c], data).expect("uniform example shape"), classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// A Gaussian bump whose center depends on the class, random amplitude.
    GaussianBlobs,
    /// Class-dependent checkerboard period, random contrast.
    Checker,
    /// Top and bottom halves in class-dependent tones, random offset.
    TwoTone,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" | "gaussian_blobs" => Ok(Self::GaussianBlobs),
            "checker" => Ok(Self::Checker),
            "twotone" | "two_tone" => Ok(Self::TwoTone),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianBlobs => "blobs",
            Self::Checker => "checker",
            Self::TwoTone => "twotone",
        }
    }
}

/// Class-conditional toy images with closed-form class means.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub kind: SyntheticKind,
    pub resolution: usize,
    pub num_classes: usize,
}

/// Blob amplitude range.
const BLOB_AMP: (f64, f64) = (0.8, 1.0);
const BLOB_WIDTH: f64 = 0.12;
const CHECKER_AMP: (f64, f64) = (0.5, 1.0);
const TONE_JITTER: f64 = 0.1;

impl Synthetic {
    pub fn new(kind: SyntheticKind, resolution: usize, num_classes: usize) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 2 {
            return Err(Error::Config(format!("resolution {resolution} must be a power of two ≥ 2")));
        }
        if num_classes == 0 {
            return Err(Error::Config("synthetic data needs at least one class".into()));
        }
        Ok(Self { kind, resolution, num_classes })
    }

    /// Shape of class `c` before the random amplitude/offset is applied.
    fn pattern(&self, c: usize) -> Vec<f64> {
        let r = self.resolution;
        let k = self.num_classes as f64;
        (0..r * r)
            .map(|i| {
                let (y, x) = (i / r, i % r);
                let (u, v) = ((x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64);
                match self.kind {
                    SyntheticKind::GaussianBlobs => {
                        let a = 2.0 * PI * c as f64 / k;
                        let (cx, cy) = (0.5 + 0.25 * a.cos(), 0.5 + 0.25 * a.sin());
                        (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * BLOB_WIDTH * BLOB_WIDTH)).exp()
                    }
                    SyntheticKind::Checker => {
                        let levels = r.trailing_zeros() as usize;
                        let cell = 1usize << (c % levels);
                        if ((x / cell) + (y / cell)) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    SyntheticKind::TwoTone => {
                        let top = -0.8 + 1.6 * (c as f64 + 1.0) / (k + 1.0);
                        if y < r / 2 {
                            top
                        } else {
                            -top
                        }
                    }
                }
            })
            .collect()
    }

    /// Analytic per-class mean image `[R, R, 1]`.
    pub fn class_mean(&self, c: usize) -> Tensor<f32> {
        let p = self.pattern(c);
        let r = self.resolution;
        Tensor::from_fn(&[r, r, 1], |i| {
            (match self.kind {
                SyntheticKind::GaussianBlobs => -1.0 + (BLOB_AMP.0 + BLOB_AMP.1) * p[i],
                SyntheticKind::Checker => 0.5 * (CHECKER_AMP.0 + CHECKER_AMP.1) * p[i],
                SyntheticKind::TwoTone => p[i],
            }) as f32
        })
    }

    /// Per-element second moment `E[x²]` over the class-balanced data.
    pub fn second_moment(&self) -> f64 {
        let var_u = |(lo, hi): (f64, f64)| (hi - lo).powi(2) / 12.0;
        let mean_u = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
        let mut acc = 0.0;
        for c in 0..self.num_classes {
            for g in self.pattern(c) {
                acc += match self.kind {
                    SyntheticKind::GaussianBlobs => {
                        // x = −1 + 2·A·g
                        let m = -1.0 + 2.0 * mean_u(BLOB_AMP) * g;
                        m * m + 4.0 * g * g * var_u(BLOB_AMP)
                    }
                    SyntheticKind::Checker => g * g * (mean_u(CHECKER_AMP).powi(2) + var_u(CHECKER_AMP)),
                    SyntheticKind::TwoTone => g * g + TONE_JITTER * TONE_JITTER / 3.0,
                };
            }
        }
        acc / (self.num_classes * self.resolution * self.resolution) as f64
    }
}

impl Dataset for Synthetic {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn channels(&self) -> usize {
        1
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn example(&self, seed: u64, index: u64) -> (Tensor<f32>, usize) {
        let mut r = rng::stream(seed, "data/synthetic", index);
        let c = r.random_range(0..self.num_classes);
        let p = self.pattern(c);
        let res = self.resolution;
        let img = match self.kind {
            SyntheticKind::GaussianBlobs => {
                let a = r.random_range(BLOB_AMP.0..BLOB_AMP.1);
                Tensor::from_fn(&[res, res, 1], |i| (-1.0 + 2.0 * a * p[i]) as f32)
            }
            SyntheticKind::Checker => {
                let a = r.random_range(CHECKER_AMP.0..CHECKER_AMP.1);
                Tensor::from_fn(&[res, res, 1], |i| (a * p[i]) as f32)
            }
            SyntheticKind::TwoTone => {
                let o = r.random_range(-TONE_JITTER..TONE_JITTER);
                Tensor::from_fn(&[res, res, 1], |i| (p[i] + o) as f32)
            }
        };
        (img, c)
    }
}

/// PGM/PPM images in class subfolders, loaded once.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    pub resolution: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    images: Vec<(Tensor<f32>, usize)>,
}

impl FolderDataset {
    /// Subfolders of `root` in lexicographic order are the classes; files in
    /// each are read in lexicographic order. Unreadable files are skipped with
    /// a warning.
    pub fn load(root: &Path, resolution: usize) -> Result<Self> {
        let sorted = |dir: &Path| -> Result<Vec<PathBuf>> {
            let mut v: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            v.sort();
            Ok(v)
        };
        let classes: Vec<PathBuf> = sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
        let mut images = Vec::new();
        let mut channels = None;
        for (ci, dir) in classes.iter().enumerate() {
            for file in sorted(dir)?.into_iter().filter(|p| p.is_file()) {
                let img = match Image::load(&file).and_then(|i| i.crop_resize(resolution)) {
                    Ok(i) => i,
                    Err(e) => {
                        log::warn!("skipping {}: {e}", file.display());
                        continue;
                    }
                };
                if *channels.get_or_insert(img.channels) != img.channels {
                    log::warn!("skipping {}: {} channels, expected {}", file.display(), img.channels, channels.unwrap());
                    continue;
                }
                images.push((img.to_tensor(), ci));
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!("no readable PGM/PPM images under {}", root.display())));
        }
        let class_names =
            classes.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
        Ok(Self { resolution, channels: channels.unwrap(), class_names, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl Dataset for FolderDataset {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn example(&self, seed: u64, index: u64) -> (Tensor<f32>, usize) {
        let i = rng::stream(seed, "data/folder", index).random_range(0..self.images.len());
        self.images[i].clone()
    }
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic(SyntheticKind),
    Folder(PathBuf),
}

/// Everything a run needs, readable from and writable to `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: UViTConfig,
    pub schedule: ScheduleSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataSpec,
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        for o in overrides {
            kv.apply_override(o)?;
        }
        let run = Self::from_kv(&kv)?;
        kv.ensure_consumed()?;
        Ok(run)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let model = UViTConfig::from_kv(kv)?;
        let d = model.image_size as u32;

        let (lmin, lmax) = (kv.get("logsnr_min", -15.0)?, kv.get("logsnr_max", 15.0)?);
        let kind = match kv.raw("schedule").unwrap_or("shifted") {
            "cosine" => ScheduleKind::Cosine,
            "shifted" | "cosine_shifted" => ScheduleKind::Shifted { noise_d: kv.get("noise_d", 64)? },
            "interpolated" | "cosine_interpolated" => ScheduleKind::Interpolated {
                noise_d_low: kv.get("noise_d_low", 32)?,
                noise_d_high: kv.get("noise_d_high", 256)?,
            },
            other => return Err(Error::Config(format!("unknown schedule {other:?} (cosine, shifted, interpolated)"))),
        };
        // so `--set schedule=cosine` works on a config written for another schedule
        for key in ["noise_d", "noise_d_low", "noise_d_high"] {
            if !kv.is_used(key) && kv.raw(key).is_some() {
                log::warn!("{key} has no effect on a {} schedule", kv.raw("schedule").unwrap_or("shifted"));
            }
        }
        let interpolation = match kv.raw("interpolation").unwrap_or("low_at_end") {
            "low_at_end" => Interpolation::LowAtEnd,
            "high_at_end" => Interpolation::HighAtEnd,
            other => return Err(Error::Config(format!("interpolation {other:?} (low_at_end, high_at_end)"))),
        };
        let schedule = ScheduleSpec::new(kind, d, lmin, lmax)?.with_interpolation(interpolation);

        if let Some(m) = kv.raw("mean_type") {
            if m != "v" {
                return Err(Error::Config(format!("mean_type {m:?}: the network always predicts v")));
            }
        }
        let target = match kv.raw("mean_loss_type").unwrap_or("v_mse") {
            "v_mse" => LossTarget::VMse,
            "eps_mse" => LossTarget::EpsMse,
            other => return Err(Error::Config(format!("mean_loss_type {other:?} (v_mse, eps_mse)"))),
        };
        let ld = LossConfig::default();
        let loss = LossConfig {
            target,
            multiscale: kv.get_bool("multiscale", ld.multiscale)?,
            base_resolution: kv.get("multiscale_base", ld.base_resolution)?,
            elbo_weighted: kv.get_bool("elbo_weighted", ld.elbo_weighted)?,
            cond_dropout: kv.get("cond_dropout", ld.cond_dropout)?,
        };
        loss.validate()?;

        if let Some(o) = kv.raw("optimizer") {
            if o != "adam" {
                return Err(Error::Config(format!("optimizer {o:?}: only adam is supported")));
            }
        }
        if kv.get("weight_decay", 0.0f64)? != 0.0 {
            return Err(Error::Config("weight_decay is not supported".into()));
        }
        let td = TrainConfig::default();
        let train = TrainConfig {
            batch_size: kv.get("batch_size", td.batch_size)?,
            learning_rate: kv.get("learning_rate", td.learning_rate)?,
            warmup_steps: kv.get("learning_rate_warmup_steps", td.warmup_steps)?,
            adam_beta1: kv.get("adam_beta1", td.adam_beta1)?,
            adam_beta2: kv.get("adam_beta2", td.adam_beta2)?,
            adam_eps: kv.get("adam_eps", td.adam_eps)?,
            ema_decay: kv.get("ema_decay", td.ema_decay)?,
            grad_clip: kv.get("grad_clip", td.grad_clip)?,
            num_train_steps: kv.get("num_train_steps", td.num_train_steps)?,
            seed: kv.get("seed", td.seed)?,
            checkpoint_every: kv.get("checkpoint_every", td.checkpoint_every)?,
        };
        train.validate()?;

        let sd = SamplerConfig::default();
        let variance_form = match kv.raw("variance_form").unwrap_or("log") {
            "log" => VarianceForm::Log,
            "verbatim" => VarianceForm::Verbatim,
            other => return Err(Error::Config(format!("variance_form {other:?} (log, verbatim)"))),
        };
        let sampler = SamplerConfig {
            num_steps: kv.get("sampler_steps", sd.num_steps)?,
            noise_param: kv.get("noise_param", sd.noise_param)?,
            guidance_scale: kv.get("guidance_scale", sd.guidance_scale)?,
            lowest_idx: kv.get("lowest_idx", sd.lowest_idx)?,
            variance_form,
        };
        sampler.validate()?;

        let data = match kv.raw("dataset").unwrap_or("blobs") {
            "folder" => DataSpec::Folder(PathBuf::from(
                kv.raw("dataset_path").ok_or_else(|| Error::Config("dataset = folder needs dataset_path".into()))?,
            )),
            other => DataSpec::Synthetic(SyntheticKind::parse(other)?),
        };
        Ok(Self { model, schedule, loss, train, sampler, data })
    }

    /// Canonical text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = self.model.to_kv_text();
        let sch = &self.schedule;
        s += &format!("logsnr_min = {:?}\nlogsnr_max = {:?}\n", sch.logsnr_min, sch.logsnr_max);
        match sch.kind {
            ScheduleKind::Cosine => s += "schedule = cosine\n",
            ScheduleKind::Shifted { noise_d } => s += &format!("schedule = shifted\nnoise_d = {noise_d}\n"),
            ScheduleKind::Interpolated { noise_d_low, noise_d_high } => {
                s += &format!("schedule = interpolated\nnoise_d_low = {noise_d_low}\nnoise_d_high = {noise_d_high}\n")
            }
        }
        s += match sch.interpolation {
            Interpolation::LowAtEnd => "interpolation = low_at_end\n",
            Interpolation::HighAtEnd => "interpolation = high_at_end\n",
        };
        let l = &self.loss;
        s += &format!(
            "mean_loss_type = {}\nmultiscale = {}\nmultiscale_base = {}\nelbo_weighted = {}\ncond_dropout = {:?}\n",
            match l.target {
                LossTarget::VMse => "v_mse",
                LossTarget::EpsMse => "eps_mse",
            },
            l.multiscale,
            l.base_resolution,
            l.elbo_weighted,
            l.cond_dropout
        );
        let t = &self.train;
        s += &format!(
            "batch_size = {}\nlearning_rate = {:?}\nlearning_rate_warmup_steps = {}\nadam_beta1 = {:?}\n\
             adam_beta2 = {:?}\nadam_eps = {:?}\nema_decay = {:?}\ngrad_clip = {:?}\nnum_train_steps = {}\n\
             seed = {}\ncheckpoint_every = {}\n",
            t.batch_size,
            t.learning_rate,
            t.warmup_steps,
            t.adam_beta1,
            t.adam_beta2,
            t.adam_eps,
            t.ema_decay,
            t.grad_clip,
            t.num_train_steps,
            t.seed,
            t.checkpoint_every
        );
        let p = &self.sampler;
        s += &format!(
            "sampler_steps = {}\nnoise_param = {:?}\nguidance_scale = {:?}\nlowest_idx = {}\nvariance_form = {}\n",
            p.num_steps,
            p.noise_param,
            p.guidance_scale,
            p.lowest_idx,
            match p.variance_form {
                VarianceForm::Log => "log",
                VarianceForm::Verbatim => "verbatim",
            }
        );
        match &self.data {
            DataSpec::Synthetic(k) => s += &format!("dataset = {}\n", k.name()),
            DataSpec::Folder(p) => s += &format!("dataset = folder\ndataset_path = {}\n", p.display()),
        }
        s
    }

    pub fn build_model(&self) -> Result<UViT> {
        UViT::new(self.model.clone(), self.schedule.attained_range())
    }

    pub fn build_dataset(&self) -> Result<Box<dyn Dataset>> {
        let ds: Box<dyn Dataset> = match &self.data {
            DataSpec::Synthetic(kind) => {
                Box::new(Synthetic::new(*kind, self.model.image_size, self.model.num_classes.max(1))?)
            }
            DataSpec::Folder(path) => Box::new(FolderDataset::load(path, self.model.image_size)?),
        };
        if ds.resolution() != self.model.image_size || ds.channels() != self.model.in_channels {
            return Err(Error::Config(format!(
                "dataset is {0}×{0}×{1} but the model expects {2}×{2}×{3}",
                ds.resolution(),
                ds.channels(),
                self.model.image_size,
                self.model.in_channels
            )));
        }
        if self.model.num_classes != 0 && ds.num_classes() != self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model num_classes = {}",
                ds.num_classes(),
                self.model.num_classes
            )));
        }
        Ok(ds)
    }
}

/// Parameters, EMA copy and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn new(params: ParamSet<f32>) -> Self {
        Self { ema: params.clone(), adam: AdamState::new(&params), params }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

pub fn encode_checkpoint(state: &TrainState, run: &RunConfig) -> Vec<u8> {
    let mut named = vec![("meta/config".to_string(), io::text_tensor(&run.to_text()))];
    named.extend(state.params.to_named("params/"));
    named.extend(state.ema.to_named("ema/"));
    named.extend(state.adam.m.to_named("adam_m/"));
    named.extend(state.adam.v.to_named("adam_v/"));
    io::encode_checkpoint(state.step(), &named)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainState, RunConfig)> {
    let (step, named) = io::decode_checkpoint(bytes)?;
    let text = named
        .iter()
        .find(|(n, _)| n == "meta/config")
        .ok_or_else(|| Error::Format("checkpoint has no meta/config".into()))
        .and_then(|(_, t)| io::tensor_text(t))?;
    let run = RunConfig::parse(&text, &[])?;
    let state = TrainState {
        params: ParamSet::from_named(&named, "params/"),
        ema: ParamSet::from_named(&named, "ema/"),
        adam: AdamState {
            m: ParamSet::from_named(&named, "adam_m/"),
            v: ParamSet::from_named(&named, "adam_v/"),
            step,
        },
    };
    let model = run.build_model()?;
    let expected = model.init(0);
    for set in [&state.params, &state.ema, &state.adam.m, &state.adam.v] {
        set.check_matches(&expected)?;
    }
    Ok((state, run))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, run: &RunConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(state, run)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig)> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm,wallclock_s";

/// Model, data and optimizer state of a run.
pub struct Trainer {
    pub run: RunConfig,
    pub model: UViT,
    pub dataset: Box<dyn Dataset>,
    pub state: TrainState,
}

impl Trainer {
    /// Fresh parameters from the configured seed.
    pub fn new(run: RunConfig) -> Result<Self> {
        let dataset = run.build_dataset()?;
        Self::with_dataset(run, dataset)
    }

    pub fn with_dataset(run: RunConfig, dataset: Box<dyn Dataset>) -> Result<Self> {
        let model = run.build_model()?;
        let state = TrainState::new(model.init(run.train.seed));
        Ok(Self { run, model, dataset, state })
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let (state, run) = load_checkpoint(path)?;
        let model = run.build_model()?;
        let dataset = run.build_dataset()?;
        Ok(Self { run, model, dataset, state })
    }

    /// Loss and gradients of the current parameters on the batch of `step`.
    pub fn loss_and_grads(&self, step: u64) -> Result<(f64, ParamSet<f32>)> {
        let seed = self.run.train.seed;
        let (x, classes) = batch(self.dataset.as_ref(), seed, step, self.run.train.batch_size);
        let classes: Vec<Option<usize>> =
            classes.into_iter().map(|c| (self.run.model.num_classes > 0).then_some(c)).collect();
        let mut noise_rng = rng::stream(seed, "train/noise", step);
        let draw = diffusion::draw_noise(x.shape(), &classes, &self.run.schedule, &self.run.loss, &mut noise_rng)?;
        let dropout_seed: u64 = rng::stream(seed, "train/dropout", step).random();
        let g = Graph::<f32>::with_mode(true, dropout_seed);
        let p = self.state.params.bind(&g, true);
        let loss = diffusion::loss_on_graph(&g, &self.model, &p, &x, &draw, &self.run.schedule, &self.run.loss)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at step {step}")));
        }
        let mut grads = g.backward(loss);
        let grads = p
            .iter()
            .map(|(name, v)| {
                let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(&g.shape(v)));
                (name.to_string(), t)
            })
            .collect();
        Ok((value, grads))
    }

    /// One optimizer update followed by the EMA update.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.state.step();
        let (loss, grads) = self.loss_and_grads(step)?;
        let report = adam_step(&mut self.state.params, &grads, &mut self.state.adam, &self.run.train)?;
        ema_update(&mut self.state.ema, &self.state.params, self.run.train.ema_decay)?;
        Ok(StepStats { step, loss, lr: report.lr, grad_norm: report.grad_norm })
    }

    /// Runs until `num_train_steps`, appending metrics to `out/metrics.csv`
    /// and writing checkpoints to `out/ckpt_<step>.sdck` and `out/last.sdck`.
    pub fn train(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        let mut metrics = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.csv");
                let fresh = self.state.step() == 0 || !path.exists();
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let start = Instant::now();
        let mut history = Vec::new();
        while self.state.step() < self.run.train.num_train_steps {
            let s = self.step()?;
            if let Some((f, path)) = metrics.as_mut() {
                writeln!(f, "{},{:?},{:?},{:?},{:.3}", s.step, s.loss, s.lr, s.grad_norm, start.elapsed().as_secs_f64())
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_step(&s);
            history.push(s);
            let every = self.run.train.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.state.step() % every == 0 {
                    let p = dir.join(format!("ckpt_{:08}.sdck", self.state.step()));
                    save_checkpoint(&p, &self.state, &self.run)?;
                }
            }
        }
        if let Some(dir) = out {
            save_checkpoint(&dir.join("last.sdck"), &self.state, &self.run)?;
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let c = TrainConfig { learning_rate: 2e-4, warmup_steps: 10_000, ..TrainConfig::default() };
        assert_eq!(c.lr_at(5000), 1e-4);
        assert_eq!(c.lr_at(20_000), 2e-4);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::full(&[3], 0.7));
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradients_halt() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[1]));
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().data_mut()[0] = f32::NAN;
        let mut st = AdamState::new(&p);
        assert!(matches!(adam_step(&mut p, &g, &mut st, &TrainConfig::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ema_edge_cases() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::full(&[2], 3.0));
        let mut e = p.zeros_like();
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e, p);
        ema_update(&mut e, &p, 0.9).unwrap();
        assert_eq!(e, p);
    }

    #[test]
    fn synthetic_range_and_determinism() {
        for kind in [SyntheticKind::GaussianBlobs, SyntheticKind::Checker, SyntheticKind::TwoTone] {
            let ds = Synthetic::new(kind, 16, 4).unwrap();
            for i in 0..50 {
                let (a, ca) = ds.example(7, i);
                let (b, cb) = ds.example(7, i);
                assert_eq!((&a, ca), (&b, cb));
                assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn run_config_roundtrip() {
        let run = RunConfig::parse("num_classes = 4\nin_channels = 1\nnoise_d = 8\n", &["seed=9".into()]).unwrap();
        assert_eq!(run.train.seed, 9);
        assert_eq!(RunConfig::parse(&run.to_text(), &[]).unwrap(), run);
        assert!(RunConfig::parse("bogus = 1\n", &[]).is_err());
    }
}
