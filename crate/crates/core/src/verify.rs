//! Self-checks of every module, grouped into suites.
//!
//! Each check reports a measured value against a tolerance. The command-line
//! `verify` subcommand prints them; the acceptance tests assert on them.

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::diffusion::{convert, Parametrization};
use crate::error::{Error, Result};
use crate::io::Image;
use crate::params::Bound;
use crate::rng;
use crate::sampler::{self, cfg_combine, step_coeffs, Denoiser, SamplerConfig, VarianceForm};
use crate::schedule::{self, ScheduleSpec};
use crate::tensor::gradcheck::{check_gradients, GradCheck, GradCheckReport};
use crate::tensor::{ConvGeom, Graph, Tensor, Var};
use crate::trainer::{Synthetic, SyntheticKind};
use crate::uvit::{Cond, Patching, UViT, UViTConfig};
use crate::wavelet;

/// One measured quantity and its bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, tolerance, pass: measured <= tolerance }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self { name: name.into(), measured: if ok { 0.0 } else { 1.0 }, tolerance: 0.0, pass: ok }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<52} measured {:<12.4e} tolerance {:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Schedules,
    Wavelet,
    Gradients,
    Sampler,
    PoolingLaw,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Schedules, Suite::Wavelet, Suite::Gradients, Suite::Sampler, Suite::PoolingLaw];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "schedules" => Ok(Self::Schedules),
            "wavelet" => Ok(Self::Wavelet),
            "gradients" => Ok(Self::Gradients),
            "sampler" => Ok(Self::Sampler),
            "pooling-law" => Ok(Self::PoolingLaw),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?} (schedules, wavelet, gradients, sampler, pooling-law, all)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Schedules => "schedules",
            Self::Wavelet => "wavelet",
            Self::Gradients => "gradients",
            Self::Sampler => "sampler",
            Self::PoolingLaw => "pooling-law",
            Self::All => "all",
        }
    }
}

/// Runs a suite. `out_dir` receives the pooling pyramid images.
pub fn run(suite: Suite, seed: u64, out_dir: Option<&Path>) -> Result<Vec<Check>> {
    match suite {
        Suite::Schedules => schedule_checks(seed),
        Suite::Wavelet => wavelet_checks(seed),
        Suite::Gradients => gradient_checks(seed),
        Suite::Sampler => sampler_checks(seed),
        Suite::PoolingLaw => pooling_checks(seed, out_dir),
        Suite::All => {
            let mut all = Vec::new();
            for s in Suite::EACH {
                all.extend(run(s, seed, out_dir)?);
            }
            Ok(all)
        }
    }
}

pub fn schedule_checks(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut endpoint_err: f64 = 0.0;
    let mut mid: f64 = 0.0;
    for (lo, hi) in [(-15.0, 15.0), (-20.0, 20.0), (-10.0, 12.5), (-5.0, 30.0)] {
        endpoint_err = endpoint_err
            .max((schedule::logsnr_cosine(0.0, lo, hi)? - hi).abs())
            .max((schedule::logsnr_cosine(1.0, lo, hi)? - lo).abs());
        if lo == -hi {
            mid = mid.max(schedule::logsnr_cosine(0.5, lo, hi)?.abs());
        }
    }
    out.push(Check::at_most("cosine endpoints equal the bounds", endpoint_err, 0.0));
    out.push(Check::at_most("cosine midpoint is 0 for symmetric bounds", mid, 1e-9));

    let mut r = rng::stream(seed, "verify/shift", 0);
    let (mut composed, mut shift_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..10_000 {
        let t: f64 = r.random();
        let d = 1u32 << r.random_range(2..11);
        let n = r.random_range(1..=2048u32);
        let base = schedule::logsnr_cosine(t, -15.0, 15.0)?;
        let shifted = schedule::logsnr_shifted(t, d, n, -15.0, 15.0)?;
        composed = composed.max((shifted - (base + schedule::resolution_shift(d, n))).abs());
        shift_err = shift_err.max(((shifted - base) - 2.0 * (n as f64 / d as f64).ln()).abs());
    }
    out.push(Check::at_most("shifted = cosine + 2 ln(n/d), bitwise", composed, 0.0));
    out.push(Check::at_most("shift identity residual, 10^4 draws", shift_err, 1e-12));

    let specs = [
        ScheduleSpec::cosine(64)?,
        ScheduleSpec::shifted(256, 64)?,
        ScheduleSpec::interpolated(512, 32, 256)?,
    ];
    let (mut var_err, mut post_err, mut weight_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for spec in &specs {
        for i in 1..200 {
            let t = i as f64 / 200.0;
            let c = spec.alpha_sigma(t)?;
            var_err = var_err.max((c.alpha * c.alpha + c.sigma * c.sigma - 1.0).abs());
            let s = t - 0.5 / 200.0;
            let p = spec.posterior_coeffs(s, t)?;
            let (cs, ct) = (spec.alpha_sigma(s)?, c);
            let tr = spec.transition_coeffs(s, t)?;
            // the posterior must integrate back to the forward marginal at s
            let mean_x = p.coef_z * ct.alpha + p.coef_x;
            let var = p.coef_z * p.coef_z * ct.sigma * ct.sigma + p.var;
            post_err = post_err.max((mean_x - cs.alpha).abs()).max((var - cs.sigma * cs.sigma).abs());
            post_err = post_err.max((tr.alpha_ts * tr.alpha_ts * cs.sigma * cs.sigma + tr.sigma_ts_sq - ct.sigma * ct.sigma).abs());
            let h = 1e-6;
            let fd = -(spec.logsnr(t + h)? - spec.logsnr(t - h)?) / (2.0 * h);
            let w = spec.elbo_weight(t)?;
            weight_err = weight_err.max((w - fd).abs() / w.abs().max(1.0));
        }
    }
    out.push(Check::at_most("alpha^2 + sigma^2 = 1", var_err, 1e-12));
    out.push(Check::at_most("posterior reproduces the marginal at s", post_err, 1e-10));
    out.push(Check::at_most("ELBO weight vs central difference (rel)", weight_err, 1e-6));
    Ok(out)
}

pub fn wavelet_checks(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng::stream(seed, "verify/wavelet", 0);
    let mut err: f32 = 0.0;
    for _ in 0..100 {
        let levels = r.random_range(1..=3usize);
        let f = 1usize << levels;
        let h = f * r.random_range(1..=128 / f);
        let w = f * r.random_range(1..=128 / f);
        let c = if r.random() { 3 } else { 1 };
        let img = Tensor::from_fn(&[h, w, c], |_| r.random_range(-1.0f32..1.0));
        let back = wavelet::dwt53_inverse_2d(&wavelet::dwt53_forward_2d(&img, levels)?)?;
        err = err.max(back.max_abs_diff(&img));
    }
    let mut detail: f32 = 0.0;
    for levels in 1..=3 {
        for value in [0.0f32, 0.37, -1.0, 0.999] {
            let img = Tensor::full(&[32, 32, 3], value);
            let st = wavelet::dwt53_forward_2d(&img, levels)?;
            let pc = st.packed.last_dim();
            for (i, v) in st.packed.data().iter().enumerate() {
                if i % pc >= 3 {
                    detail = detail.max(v.abs());
                }
            }
        }
    }
    Ok(vec![
        Check::at_most("5/3 roundtrip max-abs, 100 images ≤128×128×3", err as f64, 1e-5),
        Check::at_most("detail bands of constant images", detail as f64, 0.0),
    ])
}

type OpFn = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>>;

/// Names accepted by [`grad_check_op`].
pub const GRAD_OPS: &[&str] = &[
    "add", "sub", "mul", "swish", "sigmoid", "exp", "log", "square", "scale", "add_scalar", "scale_shift", "sum",
    "mean", "reshape", "dense", "conv2d", "conv2d_stride2", "conv2d_transpose", "normalize", "softmax",
    "attn_scores", "attn_apply", "avg_pool2d", "resize_down_area", "space_to_depth", "depth_to_space", "dwt53",
    "inverse_dwt53", "dropout", "gather", "slice_last", "mse",
];

fn op_case(name: &str, seed: u64) -> Result<(Vec<Tensor<f64>>, OpFn, bool)> {
    let mut r = rng::stream(seed, "verify/grad", 0);
    let mut n = |shape: &[usize]| -> Tensor<f64> { rng::normal(&mut r, shape) };
    let x4 = n(&[2, 4, 4, 3]);
    let case: (Vec<Tensor<f64>>, OpFn) = match name {
        "add" => (vec![x4.clone(), n(&[4, 1, 3])], Box::new(|g, v| g.add(v[0], v[1]))),
        "sub" => (vec![x4.clone(), n(&[3])], Box::new(|g, v| g.sub(v[0], v[1]))),
        "mul" => (vec![x4.clone(), n(&[2, 1, 1, 3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        "swish" => (vec![x4], Box::new(|g, v| Ok(g.swish(v[0])))),
        "sigmoid" => (vec![x4], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        "exp" => (vec![x4], Box::new(|g, v| Ok(g.exp(v[0])))),
        "log" => (vec![x4.map(|x| x.abs() + 0.5)], Box::new(|g, v| Ok(g.log(v[0])))),
        "square" => (vec![x4], Box::new(|g, v| Ok(g.square(v[0])))),
        "scale" => (vec![x4], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        "add_scalar" => (vec![x4], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        "scale_shift" => {
            (vec![x4, n(&[2, 1, 1, 3]), n(&[2, 1, 1, 3])], Box::new(|g, v| g.scale_shift(v[0], v[1], v[2])))
        }
        "sum" => (vec![x4], Box::new(|g, v| Ok(g.sum(v[0])))),
        "mean" => (vec![x4], Box::new(|g, v| Ok(g.mean(v[0])))),
        "reshape" => (vec![x4], Box::new(|g, v| g.reshape(v[0], &[8, 12]))),
        "dense" => (vec![x4, n(&[3, 5]), n(&[5])], Box::new(|g, v| g.dense(v[0], v[1], Some(v[2])))),
        "conv2d" => (
            vec![x4, n(&[3, 3, 3, 4]), n(&[4])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::same(1))),
        ),
        "conv2d_stride2" => (
            vec![x4, n(&[2, 2, 3, 4]), n(&[4])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::valid(2))),
        ),
        "conv2d_transpose" => (
            vec![n(&[2, 2, 2, 4]), n(&[2, 2, 3, 4]), n(&[3])],
            Box::new(|g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), ConvGeom::valid(2))),
        ),
        "normalize" => (vec![x4, n(&[3]), n(&[3])], Box::new(|g, v| g.normalize(v[0], v[1], Some(v[2])))),
        "softmax" => (vec![x4], Box::new(|g, v| Ok(g.softmax(v[0])))),
        "attn_scores" => (vec![n(&[2, 5, 2, 3]), n(&[2, 4, 2, 3])], Box::new(|g, v| g.attn_scores(v[0], v[1]))),
        "attn_apply" => (vec![n(&[2, 2, 5, 4]), n(&[2, 4, 2, 3])], Box::new(|g, v| g.attn_apply(v[0], v[1]))),
        "avg_pool2d" => (vec![x4], Box::new(|g, v| g.avg_pool2d(v[0], 2))),
        "resize_down_area" => (vec![x4], Box::new(|g, v| g.resize_down_area(v[0], 4))),
        "space_to_depth" => (vec![x4], Box::new(|g, v| g.space_to_depth(v[0], 2))),
        "depth_to_space" => (vec![n(&[2, 2, 2, 8])], Box::new(|g, v| g.depth_to_space(v[0], 2))),
        "dwt53" => (vec![n(&[2, 8, 8, 2])], Box::new(|g, v| g.dwt53(v[0], 2))),
        "inverse_dwt53" => (vec![n(&[2, 2, 2, 32])], Box::new(|g, v| g.inverse_dwt53(v[0], 2))),
        "dropout" => (vec![x4], Box::new(|g, v| g.dropout(v[0], 0.3))),
        "gather" => (vec![n(&[5, 3])], Box::new(|g, v| g.gather(v[0], &[4, 0, 4, 2]))),
        "slice_last" => (vec![x4], Box::new(|g, v| g.slice_last(v[0], 1, 2))),
        "mse" => (vec![x4, n(&[2, 4, 4, 3])], Box::new(|g, v| g.mse(v[0], v[1]))),
        other => return Err(Error::Config(format!("unknown op {other:?}; known: {}", GRAD_OPS.join(", ")))),
    };
    Ok((case.0, case.1, name == "dropout"))
}

/// Central-difference check of one primitive in 64-bit arithmetic.
pub fn grad_check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    let (inputs, f, training) = op_case(name, seed)?;
    check_gradients(&inputs, GradCheck { probes: 12, seed, training, ..GradCheck::default() }, f)
}

/// The smallest U-ViT with every block type, used for the end-to-end check.
pub fn tiny_uvit() -> Result<UViT> {
    let cfg = UViTConfig {
        image_size: 8,
        in_channels: 2,
        base_channels: 4,
        emb_channels: 8,
        channel_multiplier: vec![1, 2],
        num_res_blocks: vec![1],
        num_transformer_blocks: 1,
        num_heads: 2,
        expansion_factor: 2,
        transformer_dropout: 0.2,
        dropout: 0.1,
        dropout_from_resolution: 8,
        patching: Patching::None,
        num_classes: 3,
        ..UViTConfig::default()
    };
    UViT::new(cfg, (-10.0, 10.0))
}

/// Gradient of a projected U-ViT output with respect to the input and every
/// parameter, with nonzero parameters so no path is masked by the zero init.
pub fn grad_check_uvit(seed: u64, probes: usize) -> Result<GradCheckReport> {
    let model = tiny_uvit()?;
    let params = model.init(seed).cast::<f64>();
    let mut r = rng::stream(seed, "verify/uvit", 0);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs = vec![rng::normal::<f64>(&mut r, &[2, 8, 8, 2])];
    for (_, t) in params.iter() {
        let noise: Tensor<f64> = rng::normal(&mut r, t.shape());
        inputs.push(t.zip_map(&noise, |p, e| p + 0.2 * e)?);
    }
    let logsnr = [-3.0, 4.0];
    let classes = [Some(1), None];
    check_gradients(&inputs, GradCheck { step: 1e-5, probes, seed, training: true }, move |g, v| {
        let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
        model.forward(g, &bound, v[0], Cond { logsnr: &logsnr, classes: &classes })
    })
}

pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for op in GRAD_OPS {
        out.push(Check::at_most(format!("gradient {op}"), grad_check_op(op, seed)?.max_rel_err(), 1e-4));
    }
    out.push(Check::at_most("gradient tiny U-ViT end to end", grad_check_uvit(seed, 3)?.max_rel_err(), 1e-3));
    Ok(out)
}

/// The exact `v` for data concentrated on one point `x0`.
pub struct PointDenoiser {
    pub x0: Tensor<f32>,
}

impl Denoiser for PointDenoiser {
    fn predict_v(&self, z: &Tensor<f32>, logsnr: f64, _classes: &[Option<usize>]) -> Result<Tensor<f32>> {
        let c = schedule::alpha_sigma(logsnr);
        let per = self.x0.len();
        let (a, s) = (c.alpha, c.sigma);
        Ok(Tensor::from_fn(z.shape(), |i| ((a * z.data()[i] as f64 - self.x0.data()[i % per] as f64) / s) as f32))
    }
}

pub fn sampler_checks(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let spec = ScheduleSpec::shifted(16, 8)?;
    let mut r = rng::stream(seed, "verify/sampler", 0);
    let x0 = Tensor::from_fn(&[8, 8, 1], |_| r.random_range(-0.9f32..0.9));
    let den = PointDenoiser { x0: x0.clone() };
    let cfg = SamplerConfig { num_steps: 128, noise_param: 0.0, ..SamplerConfig::default() };
    let (x, trace) = sampler::sample_traced(&den, &spec, &cfg, &[4, 8, 8, 1], &[None; 4], seed)?;
    let mut err: f32 = 0.0;
    for b in 0..4 {
        err = err.max(x.slice_outer(b, 1)?.reshape(&[8, 8, 1])?.max_abs_diff(&x0));
    }
    out.push(Check::at_most("exact-v sampling recovers the datapoint", err as f64, 0.02));

    let mut law: f64 = 0.0;
    for &(lt, ls) in &trace.steps {
        let c = step_coeffs(lt, ls, 0.0, VarianceForm::Log)?;
        let p = schedule::posterior_from_logsnr(ls, lt)?;
        law = law.max((c.coef_z - p.coef_z).abs()).max((c.coef_x - p.coef_x).abs()).max((c.log_var.exp() - p.var).abs());
    }
    out.push(Check::at_most("noise_param 0 step law equals the posterior", law, 1e-10));

    let mut bounds_ok = true;
    for &(lt, ls) in &trace.steps {
        for k in 0..=10 {
            let c = step_coeffs(lt, ls, k as f64 / 10.0, VarianceForm::Log)?;
            bounds_ok &= c.min_lvar <= c.log_var + 1e-12 && c.log_var <= c.max_lvar + 1e-12;
        }
    }
    out.push(Check::holds("min_lvar ≤ log-variance ≤ max_lvar", bounds_ok));
    let monotone = trace.steps.windows(2).all(|w| w[1].0 > w[0].0) && trace.steps.iter().all(|&(t, s)| s > t);
    out.push(Check::holds("log-SNR strictly increases along the loop", monotone));
    out.extend(guidance_checks(seed)?);
    Ok(out)
}

pub fn guidance_checks(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng::stream(seed, "verify/guidance", 0);
    let shape = [3, 4, 4, 2];
    let cond: Tensor<f64> = rng::normal(&mut r, &shape);
    let uncond: Tensor<f64> = rng::normal(&mut r, &shape);
    let z: Tensor<f64> = rng::normal(&mut r, &shape);
    let identity = cfg_combine(&cond, &uncond, 0.0)? == cond;
    let mut equiv: f64 = 0.0;
    for eta in [0.5, 1.0, 3.0] {
        for logsnr in [-6.0, 0.0, 5.0] {
            let c = schedule::alpha_sigma(logsnr);
            let eps = |v: &Tensor<f64>| convert(v, Parametrization::V, Parametrization::Epsilon, &z, c.alpha, c.sigma);
            let via_v = eps(&cfg_combine(&cond, &uncond, eta)?)?;
            let via_eps = cfg_combine(&eps(&cond)?, &eps(&uncond)?, eta)?;
            equiv = equiv.max(via_v.max_abs_diff(&via_eps));
        }
    }

    // with η = 0 a class-blind denoiser gives the same path with or without labels
    let spec = ScheduleSpec::cosine(8)?;
    let den = PointDenoiser { x0: Tensor::full(&[8, 8, 1], 0.25) };
    let cfg = SamplerConfig { num_steps: 16, ..SamplerConfig::default() };
    let a = sampler::sample(&den, &spec, &cfg, &[2, 8, 8, 1], &[Some(0), Some(1)], seed)?;
    let b = sampler::sample(&den, &spec, &cfg, &[2, 8, 8, 1], &[None, None], seed)?;
    Ok(vec![
        Check::holds("guidance η=0 returns the conditional prediction", identity),
        Check::at_most("v-space vs ε-space guidance", equiv, 1e-6),
        Check::holds("η=0 conditional and unconditional paths coincide", a == b),
    ])
}

/// `std(x) / std(pool_s(x))` for `side×side` standard normal pixels.
pub fn pooling_std_ratio(side: usize, s: usize, seed: u64) -> Result<f64> {
    let x: Tensor<f32> = rng::normal(&mut rng::stream(seed, "verify/pooling", s as u64), &[1, side, side, 1]);
    let g = Graph::<f32>::new();
    let p = g.avg_pool2d(g.constant(x.clone()), s)?;
    let std = |t: &Tensor<f32>| {
        let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        (t.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / t.len() as f64).sqrt()
    };
    let pooled = g.value(p).clone();
    Ok(std(&x) / std(&pooled))
}

/// `α x + σ ε` at full resolution followed by successive 2×2 average pools.
pub fn noised_pyramid(image: &Tensor<f32>, logsnr: f64, levels: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let shape = image.shape().to_vec();
    let &[h, w, c] = shape.as_slice() else {
        return Err(Error::Shape(format!("expected [H, W, C], got {shape:?}")));
    };
    let ac = schedule::alpha_sigma(logsnr);
    let eps: Tensor<f32> = rng::normal(&mut rng::stream(seed, "verify/pyramid", 0), &shape);
    let z = image.zip_map(&eps, |x, e| ac.alpha as f32 * x + ac.sigma as f32 * e)?;
    let g = Graph::<f32>::new();
    let mut cur = g.constant(z.reshape(&[1, h, w, c])?);
    let mut out = vec![image.clone()];
    for level in 0..=levels {
        if level > 0 {
            cur = g.avg_pool2d(cur, 2)?;
        }
        let t = g.value(cur).clone();
        let s = t.shape()[1..].to_vec();
        out.push(t.reshape(&s)?);
    }
    Ok(out)
}

/// Nearest-neighbour upsampling of `[h, w, c]` to `[h·f, w·f, c]`.
pub fn upsample_nearest(t: &Tensor<f32>, f: usize) -> Result<Tensor<f32>> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::Shape(format!("expected [H, W, C], got {:?}", t.shape())));
    };
    Ok(Tensor::from_fn(&[h * f, w * f, c], |i| {
        let (y, rest) = (i / (w * f * c), i % (w * f * c));
        let (x, ch) = (rest / c, rest % c);
        t.data()[((y / f) * w + x / f) * c + ch]
    }))
}

pub fn pooling_checks(seed: u64, out_dir: Option<&Path>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for s in [2, 4, 8] {
        let ratio = pooling_std_ratio(1000, s, seed)?;
        out.push(Check::at_most(format!("std ratio under {s}×{s} pooling ≈ {s} (rel)"), (ratio / s as f64 - 1.0).abs(), 0.02));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let img = Synthetic::new(SyntheticKind::GaussianBlobs, 64, 4)?.class_mean(1);
        let pyr = noised_pyramid(&img, schedule::logsnr_cosine(0.5, -15.0, 15.0)? - 2.0, 3, seed)?;
        for (i, t) in pyr.iter().enumerate() {
            let name = if i == 0 { "pyramid_clean.pgm".to_string() } else { format!("pyramid_{}.pgm", 64 >> (i - 1)) };
            let f = 64 / t.shape()[0];
            let clipped = upsample_nearest(t, f)?.map(|v| v.clamp(-1.0, 1.0));
            Image::from_tensor(&clipped)?.save(&dir.join(name))?;
        }
    }
    Ok(out)
}
