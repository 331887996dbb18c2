//! Central-difference gradient checks in 64-bit shadow mode.
//!
//! The function under test is projected to a scalar `L = Σ w ⊙ f(x)` with
//! fixed random weights `w`; analytic `∂L/∂x` from [`Graph::backward`] is then
//! compared with `(L(x + h e_i) − L(x − h e_i)) / 2h` on random coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Denominator floor of the relative error, so vanishing gradients compare
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Probes per input tensor.
    pub probes: usize,
    pub seed: u64,
    /// Graph mode used for every evaluation (dropout masks repeat because
    /// each evaluation reseeds the graph identically).
    pub training: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, probes: 10, seed: 0, training: false }
    }
}

impl GradCheck {
    pub fn with_probes(probes: usize) -> Self {
        Self { probes, ..Self::default() }
    }
}

fn projected<F>(opts: &GradCheck, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, f: &F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::<f64>::with_mode(opts.training, opts.seed ^ 0x5eed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let shape = g.shape(out);
    if weights.is_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        *weights = Some(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    }
    let w = g.constant(weights.clone().unwrap());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).data()[0];
    Ok(value)
}

/// Checks the analytic gradient of `f` with respect to every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    projected(&opts, inputs, &mut weights, &f)?;

    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::<f64>::with_mode(opts.training, opts.seed ^ 0x5eed);
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        let w = g.constant(weights.clone().unwrap());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let mut grads = g.backward(loss);
        vars.iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(&g.shape(v))))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut probes = Vec::new();
    for (input, t) in inputs.iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        for _ in 0..opts.probes {
            let index = rng.random_range(0..t.len());
            let mut shifted = inputs.to_vec();
            shifted[input].data_mut()[index] += opts.step;
            let plus = projected(&opts, &shifted, &mut weights, &f)?;
            shifted[input].data_mut()[index] -= 2.0 * opts.step;
            let minus = projected(&opts, &shifted, &mut weights, &f)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[input].data()[index];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient probe {input}:{index}")));
            }
            probes.push(Probe { input, index, analytic: a, numeric, rel_err: rel_err(a, numeric) });
        }
    }
    Ok(GradCheckReport { probes })
}
