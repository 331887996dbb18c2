//! Log-SNR noise schedules for variance-preserving diffusion.
//!
//! A schedule maps diffusion time `t ∈ [0, 1]` to `λ(t) = log(α_t² / σ_t²)`,
//! decreasing from `logsnr_max` to `logsnr_min`. All math is done in `f64`;
//! conversion to the tensor element type happens at the call site.
//!
//! Three families are supported:
//!
//! - **cosine**: `λ(t) = −2·ln tan(θ_min + t·(θ_max − θ_min))` with the
//!   boundary angles chosen so that `λ(0) = logsnr_max` and `λ(1) = logsnr_min`.
//!   Infinite bounds give the boundary-free `−2·ln tan(πt/2)`.
//! - **shifted**: cosine plus `2·ln(noise_d / image_d)`. Average-pooling by a
//!   factor `s` multiplies the SNR by `s²`, so this keeps the SNR seen at the
//!   `noise_d` resolution equal to the cosine design.
//! - **interpolated**: a `t`-weighted blend of two shifted schedules.

use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_LOGSNR_MIN: f64 = -15.0;
pub const DEFAULT_LOGSNR_MAX: f64 = 15.0;

/// Numerically stable `ln(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn boundary_angles(logsnr_min: f64, logsnr_max: f64) -> (f64, f64) {
    ((-0.5 * logsnr_max).exp().atan(), (-0.5 * logsnr_min).exp().atan())
}

/// Cosine log-SNR with boundaries; exact at both endpoints.
pub fn logsnr_cosine(t: f64, logsnr_min: f64, logsnr_max: f64) -> Result<f64> {
    check_t(t)?;
    if t == 0.0 {
        return Ok(logsnr_max);
    }
    if t == 1.0 {
        return Ok(logsnr_min);
    }
    let (t_min, t_max) = boundary_angles(logsnr_min, logsnr_max);
    Ok(-2.0 * (t_min + t * (t_max - t_min)).tan().ln())
}

/// Shift that keeps the SNR at the `noise_d` reference resolution fixed.
pub fn resolution_shift(image_d: u32, noise_d: u32) -> f64 {
    2.0 * (noise_d as f64 / image_d as f64).ln()
}

pub fn logsnr_shifted(t: f64, image_d: u32, noise_d: u32, logsnr_min: f64, logsnr_max: f64) -> Result<f64> {
    if image_d == 0 || noise_d == 0 {
        return Err(Error::Domain("resolutions must be positive".into()));
    }
    Ok(logsnr_cosine(t, logsnr_min, logsnr_max)? + resolution_shift(image_d, noise_d))
}

/// Which shifted endpoint carries the weight `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    /// `t·λ_low + (1 − t)·λ_high`: starts (t = 0) on the high-resolution shift.
    #[default]
    LowAtEnd,
    /// `t·λ_high + (1 − t)·λ_low`: the reverse anchoring.
    HighAtEnd,
}

/// Blend of two shifted cosine schedules (`noise_d_low < noise_d_high`).
pub fn logsnr_interpolated(
    t: f64,
    image_d: u32,
    noise_d_low: u32,
    noise_d_high: u32,
    logsnr_min: f64,
    logsnr_max: f64,
) -> Result<f64> {
    interpolate(t, image_d, noise_d_low, noise_d_high, logsnr_min, logsnr_max, Interpolation::LowAtEnd)
}

fn interpolate(t: f64, image_d: u32, low: u32, high: u32, min: f64, max: f64, conv: Interpolation) -> Result<f64> {
    let l = logsnr_shifted(t, image_d, low, min, max)?;
    let h = logsnr_shifted(t, image_d, high, min, max)?;
    Ok(match conv {
        Interpolation::LowAtEnd => t * l + (1.0 - t) * h,
        Interpolation::HighAtEnd => t * h + (1.0 - t) * l,
    })
}

/// `α_t` and `σ_t` of a variance-preserving process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSigma {
    pub alpha: f64,
    pub sigma: f64,
}

/// `α² = sigmoid(λ)`, `σ² = sigmoid(−λ)`.
pub fn alpha_sigma(logsnr: f64) -> AlphaSigma {
    AlphaSigma { alpha: sigmoid(logsnr).sqrt(), sigma: sigmoid(-logsnr).sqrt() }
}

/// SNR after `s×s` average pooling of i.i.d. per-pixel noise.
pub fn snr_at_pooled_resolution(snr: f64, s: u32) -> f64 {
    snr * (s as f64) * (s as f64)
}

/// Coefficients of `q(z_t | z_s) = N(α_ts z_s, σ_ts² I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionCoeffs {
    pub alpha_ts: f64,
    pub sigma_ts_sq: f64,
}

/// Coefficients of `q(z_s | z_t, x) = N(coef_z z_t + coef_x x, var I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_z: f64,
    pub coef_x: f64,
    pub var: f64,
}

fn check_logsnr_order(logsnr_s: f64, logsnr_t: f64) -> Result<()> {
    if !(logsnr_s > logsnr_t) {
        return Err(Error::Ordering(format!(
            "need logsnr_s > logsnr_t (s earlier than t), got {logsnr_s} ≤ {logsnr_t}"
        )));
    }
    Ok(())
}

/// Transition `s → t` from the two log-SNRs.
///
/// `σ_ts² = σ_t² − α_ts² σ_s²`, evaluated as `−σ_t²·expm1(λ_t − λ_s)` which is
/// the same quantity under variance preservation without cancellation.
pub fn transition_from_logsnr(logsnr_s: f64, logsnr_t: f64) -> Result<TransitionCoeffs> {
    check_logsnr_order(logsnr_s, logsnr_t)?;
    let (s, t) = (alpha_sigma(logsnr_s), alpha_sigma(logsnr_t));
    let sigma_ts_sq = -(t.sigma * t.sigma) * (logsnr_t - logsnr_s).exp_m1();
    Ok(TransitionCoeffs { alpha_ts: t.alpha / s.alpha, sigma_ts_sq })
}

/// Denoising posterior for `s < t` from the two log-SNRs.
pub fn posterior_from_logsnr(logsnr_s: f64, logsnr_t: f64) -> Result<PosteriorCoeffs> {
    check_logsnr_order(logsnr_s, logsnr_t)?;
    let (s, t) = (alpha_sigma(logsnr_s), alpha_sigma(logsnr_t));
    let delta = logsnr_t - logsnr_s;
    // r = SNR_t / SNR_s = α_ts² σ_s² / σ_t²
    let r = delta.exp();
    let one_minus_r = -delta.exp_m1();
    Ok(PosteriorCoeffs { coef_z: r * s.alpha / t.alpha, coef_x: s.alpha * one_minus_r, var: one_minus_r * s.sigma * s.sigma })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Cosine,
    Shifted { noise_d: u32 },
    Interpolated { noise_d_low: u32, noise_d_high: u32 },
}

/// A complete log-SNR schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub logsnr_min: f64,
    pub logsnr_max: f64,
    pub image_d: u32,
    pub interpolation: Interpolation,
}

fn check_pow2(name: &str, v: u32) -> Result<()> {
    if !v.is_power_of_two() {
        return Err(Error::Config(format!("{name} = {v} must be a power of two ≥ 1")));
    }
    Ok(())
}

impl ScheduleSpec {
    pub fn cosine(image_d: u32) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, image_d, DEFAULT_LOGSNR_MIN, DEFAULT_LOGSNR_MAX)
    }

    /// The boundary-free `−2·ln tan(πt/2)`.
    pub fn cosine_unbounded(image_d: u32) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, image_d, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn shifted(image_d: u32, noise_d: u32) -> Result<Self> {
        Self::new(ScheduleKind::Shifted { noise_d }, image_d, DEFAULT_LOGSNR_MIN, DEFAULT_LOGSNR_MAX)
    }

    pub fn interpolated(image_d: u32, noise_d_low: u32, noise_d_high: u32) -> Result<Self> {
        Self::new(
            ScheduleKind::Interpolated { noise_d_low, noise_d_high },
            image_d,
            DEFAULT_LOGSNR_MIN,
            DEFAULT_LOGSNR_MAX,
        )
    }

    pub fn new(kind: ScheduleKind, image_d: u32, logsnr_min: f64, logsnr_max: f64) -> Result<Self> {
        let spec = Self { kind, logsnr_min, logsnr_max, image_d, interpolation: Interpolation::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn with_bounds(mut self, logsnr_min: f64, logsnr_max: f64) -> Result<Self> {
        self.logsnr_min = logsnr_min;
        self.logsnr_max = logsnr_max;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logsnr_min < self.logsnr_max) {
            return Err(Error::Config(format!(
                "logsnr_min ({}) must be below logsnr_max ({})",
                self.logsnr_min, self.logsnr_max
            )));
        }
        check_pow2("image_d", self.image_d)?;
        match self.kind {
            ScheduleKind::Cosine => {}
            ScheduleKind::Shifted { noise_d } => check_pow2("noise_d", noise_d)?,
            ScheduleKind::Interpolated { noise_d_low, noise_d_high } => {
                check_pow2("noise_d_low", noise_d_low)?;
                check_pow2("noise_d_high", noise_d_high)?;
                if noise_d_low >= noise_d_high || noise_d_high > self.image_d {
                    return Err(Error::Config(format!(
                        "need noise_d_low < noise_d_high ≤ image_d, got {noise_d_low}, {noise_d_high}, {}",
                        self.image_d
                    )));
                }
            }
        }
        Ok(())
    }

    /// `true` when the schedule is the boundary-free cosine.
    pub fn is_unbounded(&self) -> bool {
        self.logsnr_min == f64::NEG_INFINITY && self.logsnr_max == f64::INFINITY
    }

    pub fn logsnr(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Cosine => logsnr_cosine(t, self.logsnr_min, self.logsnr_max),
            ScheduleKind::Shifted { noise_d } => {
                logsnr_shifted(t, self.image_d, noise_d, self.logsnr_min, self.logsnr_max)
            }
            ScheduleKind::Interpolated { noise_d_low, noise_d_high } => interpolate(
                t,
                self.image_d,
                noise_d_low,
                noise_d_high,
                self.logsnr_min,
                self.logsnr_max,
                self.interpolation,
            ),
        }
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<AlphaSigma> {
        Ok(alpha_sigma(self.logsnr(t)?))
    }

    /// The `(min, max)` log-SNR actually reached, i.e. `(λ(1), λ(0))`.
    ///
    /// Shifting moves the endpoints along with the curve, so anything that
    /// normalizes log-SNR (the network's conditioning input) reads these.
    pub fn attained_range(&self) -> (f64, f64) {
        (self.logsnr(1.0).expect("t in range"), self.logsnr(0.0).expect("t in range"))
    }

    /// `dλ/dt` of the bare cosine part.
    fn cosine_derivative(&self, t: f64) -> f64 {
        let (t_min, t_max) = boundary_angles(self.logsnr_min, self.logsnr_max);
        let theta = t_min + t * (t_max - t_min);
        // d/dθ[−2 ln tan θ] = −2 / (sin θ cos θ) = −4 / sin 2θ
        -4.0 * (t_max - t_min) / (2.0 * theta).sin()
    }

    /// ELBO weight `w(t) = −dλ/dt`, strictly positive on `(0, 1)`.
    ///
    /// Computed analytically for every family: the shift is constant in `t`
    /// and the interpolated form follows from the product rule.
    pub fn elbo_weight(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain(format!("ELBO weight needs 0 < t < 1, got {t}")));
        }
        if self.is_unbounded() {
            // λ = −2 ln tan(πt/2)  ⇒  −λ' = 2π / sin(πt)
            return Ok(2.0 * PI / (PI * t).sin());
        }
        let dcos = self.cosine_derivative(t);
        let d = match self.kind {
            ScheduleKind::Cosine | ScheduleKind::Shifted { .. } => dcos,
            ScheduleKind::Interpolated { noise_d_low, noise_d_high } => {
                let shift_low = resolution_shift(self.image_d, noise_d_low);
                let shift_high = resolution_shift(self.image_d, noise_d_high);
                // λ = c(t) + t·a + (1 − t)·b  ⇒  λ' = c'(t) + a − b
                let (a, b) = match self.interpolation {
                    Interpolation::LowAtEnd => (shift_low, shift_high),
                    Interpolation::HighAtEnd => (shift_high, shift_low),
                };
                dcos + a - b
            }
        };
        Ok(-d)
    }

    /// Transition coefficients for `0 ≤ s < t ≤ 1`.
    pub fn transition_coeffs(&self, s: f64, t: f64) -> Result<TransitionCoeffs> {
        if !(s < t) {
            return Err(Error::Ordering(format!("need s < t, got s = {s}, t = {t}")));
        }
        transition_from_logsnr(self.logsnr(s)?, self.logsnr(t)?)
    }

    /// Posterior coefficients for `0 < s < t ≤ 1`.
    pub fn posterior_coeffs(&self, s: f64, t: f64) -> Result<PosteriorCoeffs> {
        if !(s < t) {
            return Err(Error::Ordering(format!("need s < t, got s = {s}, t = {t}")));
        }
        posterior_from_logsnr(self.logsnr(s)?, self.logsnr(t)?)
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Cosine => write!(f, "cosine(d={})", self.image_d),
            ScheduleKind::Shifted { noise_d } => write!(f, "shifted(d={}, noise_d={noise_d})", self.image_d),
            ScheduleKind::Interpolated { noise_d_low, noise_d_high } => {
                write!(f, "interpolated(d={}, {noise_d_low}→{noise_d_high})", self.image_d)
            }
        }?;
        write!(f, " λ∈[{}, {}]", self.logsnr_min, self.logsnr_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(logsnr_cosine(0.0, -15.0, 15.0).unwrap(), 15.0);
        assert_eq!(logsnr_cosine(1.0, -15.0, 15.0).unwrap(), -15.0);
        assert!(logsnr_cosine(0.5, -15.0, 15.0).unwrap().abs() < 1e-12);
        // mpmath, 40 digits
        assert!((logsnr_cosine(0.25, -15.0, 15.0).unwrap() - 1.761_183_247_735_773_4).abs() < 1e-12);
        assert!(matches!(logsnr_cosine(1.5, -15.0, 15.0), Err(Error::Domain(_))));
        assert!(matches!(logsnr_cosine(-0.1, -15.0, 15.0), Err(Error::Domain(_))));
    }

    #[test]
    fn shift_values() {
        assert!((resolution_shift(128, 64) - (-1.386_294_361_119_890_6)).abs() < 1e-15);
        let s = logsnr_shifted(0.5, 256, 32, -15.0, 15.0).unwrap();
        assert!((s - (-4.158_883_083_359_671_9)).abs() < 1e-12);
        for &t in &[0.0, 0.3, 1.0] {
            assert_eq!(logsnr_shifted(t, 64, 64, -15.0, 15.0).unwrap(), logsnr_cosine(t, -15.0, 15.0).unwrap());
        }
    }

    #[test]
    fn interpolated_endpoints_and_midpoint() {
        let i0 = logsnr_interpolated(0.0, 512, 32, 256, -15.0, 15.0).unwrap();
        assert_eq!(i0, logsnr_shifted(0.0, 512, 256, -15.0, 15.0).unwrap());
        let i1 = logsnr_interpolated(1.0, 512, 32, 256, -15.0, 15.0).unwrap();
        assert_eq!(i1, logsnr_shifted(1.0, 512, 32, -15.0, 15.0).unwrap());
        let mid = logsnr_interpolated(0.5, 512, 32, 256, -15.0, 15.0).unwrap();
        assert!((mid - (-3.465_735_902_799_726_5)).abs() < 1e-12);

        let flipped = ScheduleSpec::interpolated(512, 32, 256).unwrap().with_interpolation(Interpolation::HighAtEnd);
        assert_eq!(flipped.logsnr(0.0).unwrap(), logsnr_shifted(0.0, 512, 32, -15.0, 15.0).unwrap());
    }

    #[test]
    fn alpha_sigma_values() {
        let a = alpha_sigma(0.0);
        assert!((a.alpha - 0.5f64.sqrt()).abs() < 1e-15 && (a.sigma - 0.5f64.sqrt()).abs() < 1e-15);
        let a = alpha_sigma(1.0);
        assert!((a.alpha - 0.855_019_636_400_243_7).abs() < 1e-14);
        assert!((a.sigma - 0.518_595_624_133_095_7).abs() < 1e-14);
        let big = alpha_sigma(80.0);
        assert!((big.alpha - 1.0).abs() < 1e-15 && big.sigma < 1e-16);
    }

    #[test]
    fn pooling_law_arithmetic() {
        assert_eq!(snr_at_pooled_resolution(1.0, 2), 4.0);
        assert_eq!(snr_at_pooled_resolution(0.25, 4), 4.0);
        assert_eq!(snr_at_pooled_resolution(3.7, 1), 3.7);
    }

    #[test]
    fn elbo_weights() {
        let pure = ScheduleSpec::cosine_unbounded(64).unwrap();
        assert!((pure.elbo_weight(0.5).unwrap() - 2.0 * PI).abs() < 1e-12);
        let base = ScheduleSpec::cosine(128).unwrap();
        let shifted = ScheduleSpec::shifted(128, 32).unwrap();
        for &t in &[0.01, 0.2, 0.5, 0.93] {
            assert!((base.elbo_weight(t).unwrap() - shifted.elbo_weight(t).unwrap()).abs() < 1e-8);
            assert!(base.elbo_weight(t).unwrap() > 0.0);
        }
        assert!(matches!(base.elbo_weight(0.0), Err(Error::Domain(_))));
        assert!(matches!(base.elbo_weight(1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn transition_examples() {
        let tc = transition_from_logsnr(1.0, -1.0).unwrap();
        assert!((tc.alpha_ts - (-0.5f64).exp()).abs() < 1e-14);
        let near = transition_from_logsnr(0.3 + 1e-9, 0.3).unwrap();
        assert!((near.alpha_ts - 1.0).abs() < 1e-9 && near.sigma_ts_sq.abs() < 1e-9);
        let full = ScheduleSpec::cosine(64).unwrap().transition_coeffs(0.0, 1.0).unwrap();
        assert!((full.sigma_ts_sq - sigmoid(15.0)).abs() < 1e-6);
        assert!(matches!(ScheduleSpec::cosine(64).unwrap().transition_coeffs(0.5, 0.5), Err(Error::Ordering(_))));
    }

    #[test]
    fn posterior_examples() {
        let p = posterior_from_logsnr(1.0, -1.0).unwrap();
        assert!((p.coef_z - 0.223_130_160_148_429_83).abs() < 1e-14);
        assert!((p.coef_x - 0.739_305_311_735_151_09).abs() < 1e-14);
        let near = posterior_from_logsnr(2.0 + 1e-12, 2.0).unwrap();
        assert!((near.coef_z - 1.0).abs() < 1e-9 && near.coef_x.abs() < 1e-9 && near.var.abs() < 1e-9);
        assert!(matches!(posterior_from_logsnr(-1.0, 1.0), Err(Error::Ordering(_))));
    }

    #[test]
    fn validation() {
        assert!(ScheduleSpec::shifted(100, 64).is_err());
        assert!(ScheduleSpec::interpolated(512, 256, 32).is_err());
        assert!(ScheduleSpec::cosine(64).unwrap().with_bounds(5.0, -5.0).is_err());
        let s = ScheduleSpec::shifted(128, 64).unwrap();
        let (lo, hi) = s.attained_range();
        assert!((lo - (-15.0 + resolution_shift(128, 64))).abs() < 1e-12);
        assert!((hi - (15.0 + resolution_shift(128, 64))).abs() < 1e-12);
    }
}
