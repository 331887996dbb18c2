//! Ancestral DDPM sampling with log-variance interpolation, static
//! x-clipping and classifier-free guidance.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng;
use crate::schedule::{alpha_sigma, log_sigmoid, ScheduleSpec};
use crate::tensor::{Scalar, Tensor};
use crate::uvit::{Cond, UViT};

/// How the two log-variance endpoints are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceForm {
    /// `ln(1 − r) + log_sigmoid(·)`.
    #[default]
    Log,
    /// `(1 − r) + log_sigmoid(·)`, kept for comparison with the literal
    /// reference pseudocode.
    Verbatim,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Interpolation weight of the upper log-variance.
    pub noise_param: f64,
    /// Reported as `1 + η`; 1 disables guidance.
    pub guidance_scale: f64,
    pub lowest_idx: usize,
    pub variance_form: VarianceForm,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 128, noise_param: 0.2, guidance_scale: 1.0, lowest_idx: 1, variance_form: VarianceForm::Log }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 2 {
            return Err(Error::Config(format!("num_steps = {} must be at least 2", self.num_steps)));
        }
        if !(0.0..=1.0).contains(&self.noise_param) {
            return Err(Error::Config(format!("noise_param = {} outside [0, 1]", self.noise_param)));
        }
        if !(self.guidance_scale >= 1.0) {
            return Err(Error::Config(format!("guidance_scale = {} below 1", self.guidance_scale)));
        }
        if self.lowest_idx > 1 {
            return Err(Error::Config(format!("lowest_idx = {} must be 0 or 1", self.lowest_idx)));
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.guidance_scale - 1.0
    }
}

/// Static clipping to `[−1, 1]`.
pub fn clip_x(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v.clamp(-1.0, 1.0))
}

/// `(1 + η)·cond − η·uncond`.
pub fn cfg_combine<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, eta: f64) -> Result<Tensor<T>> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("guidance η = {eta} must be non-negative")));
    }
    if eta == 0.0 {
        if cond.shape() != uncond.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", cond.shape(), uncond.shape())));
        }
        return Ok(cond.clone());
    }
    let (e, one) = (T::of(eta), T::one());
    cond.zip_map(uncond, |c, u| (one + e) * c - e * u)
}

/// Scalar coefficients of one `t → s` step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoeffs {
    pub alpha_t: f64,
    pub sigma_t: f64,
    /// Multiplier of `z_t` in the mean.
    pub coef_z: f64,
    /// Multiplier of the clipped `x̂` in the mean.
    pub coef_x: f64,
    pub min_lvar: f64,
    pub max_lvar: f64,
    pub log_var: f64,
}

pub fn step_coeffs(logsnr_t: f64, logsnr_s: f64, noise_param: f64, form: VarianceForm) -> Result<StepCoeffs> {
    if !(logsnr_s > logsnr_t) {
        return Err(Error::Ordering(format!("need logsnr_s > logsnr_t, got {logsnr_s} ≤ {logsnr_t}")));
    }
    let (t, s) = (alpha_sigma(logsnr_t), alpha_sigma(logsnr_s));
    let delta = logsnr_t - logsnr_s;
    let r = delta.exp();
    let one_minus_r = -delta.exp_m1();
    let base = match form {
        VarianceForm::Log => one_minus_r.ln(),
        VarianceForm::Verbatim => one_minus_r,
    };
    let min_lvar = base + log_sigmoid(-logsnr_s);
    let max_lvar = base + log_sigmoid(-logsnr_t);
    Ok(StepCoeffs {
        alpha_t: t.alpha,
        sigma_t: t.sigma,
        coef_z: r * s.alpha / t.alpha,
        coef_x: one_minus_r * s.alpha,
        min_lvar,
        max_lvar,
        log_var: noise_param * max_lvar + (1.0 - noise_param) * min_lvar,
    })
}

/// One ancestral step `z_t → z_s`.
pub fn ddpm_step(
    z_t: &Tensor<f32>,
    v_pred: &Tensor<f32>,
    logsnr_t: f64,
    logsnr_s: f64,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let c = step_coeffs(logsnr_t, logsnr_s, cfg.noise_param, cfg.variance_form)?;
    let (a, s) = (c.alpha_t as f32, c.sigma_t as f32);
    let x_hat = clip_x(&z_t.zip_map(v_pred, |z, v| a * z - s * v)?);
    let (cz, cx) = (c.coef_z as f32, c.coef_x as f32);
    let mu = z_t.zip_map(&x_hat, |z, x| cz * z + cx * x)?;
    let std = (0.5 * c.log_var).exp() as f32;
    let noise: Tensor<f32> = rng::normal(rng, z_t.shape());
    mu.zip_map(&noise, |m, n| m + std * n)
}

/// Anything that predicts `v̂` for a batch at a single log-SNR.
pub trait Denoiser {
    fn predict_v(&self, z: &Tensor<f32>, logsnr: f64, classes: &[Option<usize>]) -> Result<Tensor<f32>>;
}

/// A U-ViT with fixed parameters.
pub struct ModelDenoiser<'a> {
    pub model: &'a UViT,
    pub params: &'a ParamSet<f32>,
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict_v(&self, z: &Tensor<f32>, logsnr: f64, classes: &[Option<usize>]) -> Result<Tensor<f32>> {
        let l = vec![logsnr; classes.len()];
        self.model.predict(self.params, z, Cond { logsnr: &l, classes })
    }
}

/// Diagnostics of a sampling run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace {
    /// `(logsnr_t, logsnr_s)` per step, in execution order.
    pub steps: Vec<(f64, f64)>,
    pub coeffs: Vec<StepCoeffs>,
}

fn guided_v(
    den: &dyn Denoiser,
    z: &Tensor<f32>,
    logsnr: f64,
    classes: &[Option<usize>],
    cfg: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let cond = den.predict_v(z, logsnr, classes)?;
    if cfg.eta() == 0.0 || classes.iter().all(Option::is_none) {
        return Ok(cond);
    }
    let nulls = vec![None; classes.len()];
    let uncond = den.predict_v(z, logsnr, &nulls)?;
    cfg_combine(&cond, &uncond, cfg.eta())
}

/// Draws a batch; `shape[0]` must equal `classes.len()`.
pub fn sample(
    den: &dyn Denoiser,
    schedule: &ScheduleSpec,
    cfg: &SamplerConfig,
    shape: &[usize],
    classes: &[Option<usize>],
    seed: u64,
) -> Result<Tensor<f32>> {
    Ok(sample_traced(den, schedule, cfg, shape, classes, seed)?.0)
}

pub fn sample_traced(
    den: &dyn Denoiser,
    schedule: &ScheduleSpec,
    cfg: &SamplerConfig,
    shape: &[usize],
    classes: &[Option<usize>],
    seed: u64,
) -> Result<(Tensor<f32>, SampleTrace)> {
    cfg.validate()?;
    if shape.first() != Some(&classes.len()) {
        return Err(Error::Shape(format!("shape {shape:?} for {} classes", classes.len())));
    }
    let n = cfg.num_steps;
    let mut z: Tensor<f32> = rng::normal(&mut rng::stream(seed, "sample/init", 0), shape);
    let mut trace = SampleTrace::default();
    for t in (cfg.lowest_idx + 1..=n).rev() {
        let logsnr_t = schedule.logsnr(t as f64 / n as f64)?;
        let logsnr_s = schedule.logsnr((t - 1) as f64 / n as f64)?;
        let v = guided_v(den, &z, logsnr_t, classes, cfg)?;
        let mut r = rng::stream(seed, "sample/step", t as u64);
        z = ddpm_step(&z, &v, logsnr_t, logsnr_s, cfg, &mut r)?;
        trace.steps.push((logsnr_t, logsnr_s));
        trace.coeffs.push(step_coeffs(logsnr_t, logsnr_s, cfg.noise_param, cfg.variance_form)?);
    }
    let logsnr = schedule.logsnr(cfg.lowest_idx as f64 / n as f64)?;
    let v = guided_v(den, &z, logsnr, classes, cfg)?;
    let c = alpha_sigma(logsnr);
    let (a, s) = (c.alpha as f32, c.sigma as f32);
    let x = z.zip_map(&v, |z, v| a * z - s * v)?;
    Ok((clip_x(&x), trace))
}
