//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The plain functions do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use simdiff::schedule::{snr_at_pooled_resolution, Interpolation, ScheduleSpec};
use simdiff::trainer::{Synthetic, SyntheticKind};
use simdiff::verify::{noised_pyramid, upsample_nearest};
use simdiff::wavelet::{dwt53_forward_2d, mosaic};
use simdiff::Tensor;
use wasm_bindgen::prelude::*;

type Res<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn spec(kind: &str, image_d: u32, noise_d: u32, noise_d_high: u32) -> Res<ScheduleSpec> {
    match kind {
        "cosine" => ScheduleSpec::cosine(image_d),
        "shifted" => ScheduleSpec::shifted(image_d, noise_d),
        "interpolated" => ScheduleSpec::interpolated(image_d, noise_d, noise_d_high),
        "interpolated_high" => {
            ScheduleSpec::interpolated(image_d, noise_d, noise_d_high).map(|s| s.with_interpolation(Interpolation::HighAtEnd))
        }
        other => return Err(format!("unknown schedule {other:?}")),
    }
    .map_err(err)
}

/// Rows `[t, logsnr, alpha, sigma]` on `points` evenly spaced times, flattened.
pub fn schedule_table(kind: &str, image_d: u32, noise_d: u32, noise_d_high: u32, points: usize) -> Res<Vec<f64>> {
    if points < 2 {
        return Err("need at least two points".into());
    }
    let s = spec(kind, image_d, noise_d, noise_d_high)?;
    let mut out = Vec::with_capacity(4 * points);
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let l = s.logsnr(t).map_err(err)?;
        let a = s.alpha_sigma(t).map_err(err)?;
        out.extend([t, l, a.alpha, a.sigma]);
    }
    Ok(out)
}

/// Mean image of one synthetic class as 8-bit grey.
pub fn pattern(kind: &str, side: usize, class: usize, num_classes: usize) -> Res<Vec<u8>> {
    let kind = SyntheticKind::parse(kind).map_err(err)?;
    let ds = Synthetic::new(kind, side, num_classes).map_err(err)?;
    if class >= num_classes {
        return Err(format!("class {class} of {num_classes}"));
    }
    Ok(ds.class_mean(class).data().iter().map(|&v| to_byte(v)).collect())
}

fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn grey_tensor(grey: &[u8], side: usize) -> Res<Tensor<f32>> {
    if grey.len() != side * side {
        return Err(format!("{} bytes for a {side}×{side} image", grey.len()));
    }
    Ok(Tensor::from_fn(&[side, side, 1], |i| grey[i] as f32 / 127.5 - 1.0))
}

fn rgba(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|&v| {
        let b = to_byte(v);
        [b, b, b, 255]
    }).collect()
}

/// RGBA mosaic of a `levels`-deep transform with detail bands multiplied by `gain`.
pub fn dwt_view(grey: &[u8], side: usize, levels: usize, gain: f32) -> Res<Vec<u8>> {
    let x = grey_tensor(grey, side)?;
    let stack = dwt53_forward_2d(&x, levels).map_err(err)?;
    let m = mosaic(&stack).map_err(err)?;
    let ll = side >> levels;
    let shown = Tensor::from_fn(m.shape(), |i| {
        let (y, x) = (i / side, i % side);
        if y < ll && x < ll {
            m.data()[i]
        } else {
            gain * m.data()[i]
        }
    });
    Ok(rgba(&shown))
}

/// RGBA strip `[clean | noised | pooled ×2 | pooled ×4 | …]`, each panel
/// `side×side`, for `α x + σ ε` at the given log-SNR.
pub fn pyramid_view(grey: &[u8], side: usize, logsnr: f64, levels: usize, seed: u64) -> Res<Vec<u8>> {
    if levels > side.trailing_zeros() as usize {
        return Err(format!("{levels} pooling levels on a {side}-pixel image"));
    }
    let x = grey_tensor(grey, side)?;
    let panels = noised_pyramid(&x, logsnr, levels, seed).map_err(err)?;
    let n = panels.len();
    let mut out = vec![0u8; 4 * side * side * n];
    for (k, p) in panels.iter().enumerate() {
        let f = side / p.shape()[0];
        let full = upsample_nearest(p, f).map_err(err)?;
        let px = rgba(&full);
        for y in 0..side {
            let dst = 4 * (y * side * n + k * side);
            out[dst..dst + 4 * side].copy_from_slice(&px[4 * y * side..4 * (y + 1) * side]);
        }
    }
    Ok(out)
}

/// Log-SNR after `factor×factor` average pooling of i.i.d. noise.
pub fn pooled_logsnr(logsnr: f64, factor: u32) -> f64 {
    snr_at_pooled_resolution(logsnr.exp(), factor).ln()
}

#[wasm_bindgen(js_name = scheduleTable)]
pub fn schedule_table_js(kind: &str, image_d: u32, noise_d: u32, noise_d_high: u32, points: usize) -> Result<Vec<f64>, JsError> {
    schedule_table(kind, image_d, noise_d, noise_d_high, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pattern)]
pub fn pattern_js(kind: &str, side: usize, class: usize, num_classes: usize) -> Result<Vec<u8>, JsError> {
    pattern(kind, side, class, num_classes).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = dwtView)]
pub fn dwt_view_js(grey: &[u8], side: usize, levels: usize, gain: f32) -> Result<Vec<u8>, JsError> {
    dwt_view(grey, side, levels, gain).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pyramidView)]
pub fn pyramid_view_js(grey: &[u8], side: usize, logsnr: f64, levels: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    pyramid_view(grey, side, logsnr, levels, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pooledLogsnr)]
pub fn pooled_logsnr_js(logsnr: f64, factor: u32) -> f64 {
    pooled_logsnr(logsnr, factor)
}
