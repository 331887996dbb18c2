//! Forward process, parametrization conversions and training losses.
//!
//! Variance preserving: `z_t = α_t x + σ_t ε` with `α² + σ² = 1`. The network
//! predicts `v = α ε − σ x`, from which
//!
//! ```text
//! ε̂ = σ z + α v̂        x̂ = α z − σ v̂
//! ```

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::schedule::{alpha_sigma, ScheduleSpec};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::uvit::{Cond, UViT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parametrization {
    Epsilon,
    V,
    X,
}

/// Which residual the loss measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossTarget {
    EpsMse,
    #[default]
    VMse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub target: LossTarget,
    pub multiscale: bool,
    /// Coarsest resolution of the multiscale sum.
    pub base_resolution: usize,
    /// Weight each example by `w(t) = −dλ/dt`.
    pub elbo_weighted: bool,
    /// Probability of replacing the class with the null row.
    pub cond_dropout: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { target: LossTarget::VMse, multiscale: false, base_resolution: 32, elbo_weighted: false, cond_dropout: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if self.multiscale && !self.base_resolution.is_power_of_two() {
            return Err(Error::Config(format!("multiscale base {} must be a power of two", self.base_resolution)));
        }
        Ok(())
    }

    /// `{base, 2·base, …, d}`, or just `{d}` when multiscale is off or `d ≤ base`.
    pub fn resolutions(&self, d: usize) -> Vec<usize> {
        if !self.multiscale || d <= self.base_resolution {
            return vec![d];
        }
        let mut r = Vec::new();
        let mut s = self.base_resolution;
        while s < d {
            r.push(s);
            s *= 2;
        }
        r.push(d);
        r
    }
}

/// `α x + σ ε`.
pub fn diffuse(x: &Tensor<f32>, alpha: f64, sigma: f64, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (a, s) = (alpha as f32, sigma as f32);
    x.zip_map(eps, |x, e| a * x + s * e)
}

/// Converts a prediction between parametrizations.
///
/// Conversions that divide by `σ` (from `X`) or by `α` (from `Epsilon`)
/// fail with a domain error when that coefficient is zero.
pub fn convert<T: Scalar>(
    pred: &Tensor<T>,
    from: Parametrization,
    to: Parametrization,
    z: &Tensor<T>,
    alpha: f64,
    sigma: f64,
) -> Result<Tensor<T>> {
    use Parametrization::*;
    let (a, s) = (T::of(alpha), T::of(sigma));
    let need = |c: f64, what: &str| {
        if c == 0.0 {
            Err(Error::Domain(format!("cannot convert from {from:?}: {what} is zero")))
        } else {
            Ok(())
        }
    };
    match (from, to) {
        _ if from == to => Ok(pred.clone()),
        (V, Epsilon) => pred.zip_map(z, |v, z| s * z + a * v),
        (V, X) => pred.zip_map(z, |v, z| a * z - s * v),
        (Epsilon, V) => {
            need(alpha, "alpha")?;
            pred.zip_map(z, |e, z| (e - s * z) / a)
        }
        (Epsilon, X) => {
            need(alpha, "alpha")?;
            pred.zip_map(z, |e, z| (z - s * e) / a)
        }
        (X, Epsilon) => {
            need(sigma, "sigma")?;
            pred.zip_map(z, |x, z| (z - a * x) / s)
        }
        (X, V) => {
            need(sigma, "sigma")?;
            pred.zip_map(z, |x, z| (a * z - x) / s)
        }
        _ => unreachable!(),
    }
}

/// Randomness of one loss evaluation.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: Vec<f64>,
    pub logsnr: Vec<f64>,
    pub eps: Tensor<f32>,
    /// Classes after conditioning dropout.
    pub classes: Vec<Option<usize>>,
}

/// Samples `t ~ U(0, 1)` per example (open interval), `ε ~ N(0, I)` and the
/// conditioning dropout mask.
pub fn draw_noise(
    shape: &[usize],
    classes: &[Option<usize>],
    schedule: &ScheduleSpec,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseDraw> {
    let b = shape[0];
    if classes.len() != b {
        return Err(Error::Shape(format!("{} classes for batch {b}", classes.len())));
    }
    let mut t = Vec::with_capacity(b);
    while t.len() < b {
        let u: f64 = rng.random();
        if u > 0.0 {
            t.push(u);
        }
    }
    let logsnr = t.iter().map(|&u| schedule.logsnr(u)).collect::<Result<Vec<_>>>()?;
    let eps = rng::normal(rng, shape);
    let classes = classes.iter().map(|&c| if rng.random::<f64>() < cfg.cond_dropout { None } else { c }).collect();
    Ok(NoiseDraw { t, logsnr, eps, classes })
}

/// Per-example coefficients as a `[B, 1, …, 1]` tensor.
fn per_example<T: Scalar>(values: impl Iterator<Item = f64>, rank: usize) -> Tensor<T> {
    let v: Vec<T> = values.map(T::of).collect();
    let mut shape = vec![v.len()];
    shape.extend(std::iter::repeat_n(1, rank - 1));
    Tensor::from_vec(&shape, v).expect("one value per example")
}

/// `Σ_s (1/s)·mean((D_s r)²)` over the target resolutions, where `D_s`
/// average-pools the `d×d` residual `r` down to `s×s`.
pub fn multiscale_residual<T: Scalar>(g: &Graph<T>, residual: Var, resolutions: &[usize]) -> Result<Var> {
    let shape = g.shape(residual);
    let d = shape[1];
    let mut total: Option<Var> = None;
    for &s in resolutions {
        if s == 0 || d % s != 0 {
            return Err(Error::Divisibility(format!("resolution {s} does not divide {d}")));
        }
        let pooled = if s == d { residual } else { g.avg_pool2d(residual, d / s)? };
        let term = g.scale(g.mean(g.square(pooled)), T::of(1.0 / s as f64));
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Config("no resolutions".into()))
}

/// Multiscale loss between two tensors `[B, d, d, C]`.
pub fn multiscale_loss(eps: &Tensor<f32>, eps_hat: &Tensor<f32>, resolutions: &[usize]) -> Result<f64> {
    let g = Graph::<f64>::new();
    let a = g.constant(eps.cast());
    let b = g.constant(eps_hat.cast());
    let r = g.sub(a, b)?;
    let l = multiscale_residual(&g, r, resolutions)?;
    let v = g.value(l).data()[0];
    Ok(v)
}

/// Records the training loss on `g` for clean data `x` and a noise draw.
///
/// Returns the scalar loss node.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_graph<T: Scalar>(
    g: &Graph<T>,
    model: &UViT,
    p: &Bound,
    x: &Tensor<f32>,
    draw: &NoiseDraw,
    schedule: &ScheduleSpec,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let coeffs: Vec<_> = draw.logsnr.iter().map(|&l| alpha_sigma(l)).collect();
    let alpha = per_example::<T>(coeffs.iter().map(|c| c.alpha), rank);
    let sigma = per_example::<T>(coeffs.iter().map(|c| c.sigma), rank);

    let xt: Tensor<T> = x.cast();
    let et: Tensor<T> = draw.eps.cast();
    let z = {
        let ax = g.mul(g.constant(alpha.clone()), g.constant(xt.clone()))?;
        let se = g.mul(g.constant(sigma.clone()), g.constant(et.clone()))?;
        g.add(ax, se)?
    };
    let z_value = g.value(z).clone();
    let z_in = g.constant(z_value);
    let v_hat = model.forward(g, p, z_in, Cond { logsnr: &draw.logsnr, classes: &draw.classes })?;

    let (a, s) = (g.constant(alpha), g.constant(sigma));
    let residual = match cfg.target {
        LossTarget::VMse => {
            let v = g.sub(g.mul(a, g.constant(et))?, g.mul(s, g.constant(xt))?)?;
            g.sub(v_hat, v)?
        }
        LossTarget::EpsMse => {
            let eps_hat = g.add(g.mul(s, z_in)?, g.mul(a, v_hat)?)?;
            g.sub(eps_hat, g.constant(et))?
        }
    };
    let residual = if cfg.elbo_weighted {
        // weighting the squared residual by w is scaling it by √w
        let w = draw.t.iter().map(|&t| schedule.elbo_weight(t).map(f64::sqrt)).collect::<Result<Vec<_>>>()?;
        g.mul(residual, g.constant(per_example::<T>(w.into_iter(), rank)))?
    } else {
        residual
    };
    if cfg.multiscale {
        multiscale_residual(g, residual, &cfg.resolutions(shape[1]))
    } else {
        Ok(g.mean(g.square(residual)))
    }
}

/// Training loss without gradients (parameters held constant).
pub fn training_loss(
    model: &UViT,
    params: &ParamSet<f32>,
    x: &Tensor<f32>,
    classes: &[Option<usize>],
    schedule: &ScheduleSpec,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let draw = draw_noise(x.shape(), classes, schedule, cfg, rng)?;
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let l = loss_on_graph(&g, model, &p, x, &draw, schedule, cfg)?;
    let v = g.value(l).data()[0] as f64;
    Ok(v)
}

/// Monte-Carlo value of the v-MSE loss of a model that predicts zero:
/// `E_t[α²] + E_t[σ²]·E[x²]` for data with per-element second moment `x2`.
pub fn zero_prediction_vmse(schedule: &ScheduleSpec, x2: f64, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mut a2, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let c = alpha_sigma(schedule.logsnr(rng.random())?);
        a2 += c.alpha * c.alpha;
        s2 += c.sigma * c.sigma;
    }
    Ok((a2 + s2 * x2) / samples as f64)
}
