//! LeGall 5/3 lifting wavelet and space-to-depth patching.
//!
//! The transform is the linear (non-rounding) lifting variant with
//! whole-sample symmetric extension at both ends:
//!
//! ```text
//! d[n] = x[2n+1] - (x[2n] + x[2n+2]) / 2      x[N] := x[N-2]
//! s[n] = x[2n]   + (d[n-1] + d[n]) / 4        d[-1] := d[0]
//! ```
//!
//! Approximation coefficients have unit DC gain and constants produce zero
//! detail. Besides forward and inverse, the adjoint of each map is provided so
//! the transforms can sit inside a differentiable graph.
//!
//! # Packed layout
//!
//! A `levels`-deep 2-D transform of an `[H, W, C]` image is packed into
//! `[H/2^L, W/2^L, C·4^L]`. Channel groups, in order: the level-`L` `LL` band,
//! then for each level from coarsest to finest its `LH`, `HL`, `HH` bands.
//! Bands finer than the coarsest level are space-to-depth packed down to the
//! coarsest grid. Band letters name the horizontal filter first: `LH` is
//! low-pass along width and high-pass along height.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A packed multi-level DWT of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DwtStack {
    pub levels: usize,
    pub base_h: usize,
    pub base_w: usize,
    /// `[base_h / 2^levels, base_w / 2^levels, C · 4^levels]`
    pub packed: Tensor<f32>,
}

impl DwtStack {
    pub fn channels(&self) -> usize {
        self.packed.last_dim() >> (2 * self.levels)
    }
}

fn half<T: Scalar>(x: f64) -> T {
    T::of(x)
}

// d -= A e
fn predict<T: Scalar>(e: &[T], d: &mut [T], sign: T) {
    let m = e.len();
    let h = half::<T>(0.5);
    for n in 0..m {
        let next = e[(n + 1).min(m - 1)];
        d[n] = d[n] + sign * h * (e[n] + next);
    }
}

// s += B d
fn update<T: Scalar>(d: &[T], s: &mut [T], sign: T) {
    let m = d.len();
    let q = half::<T>(0.25);
    for n in 0..m {
        let prev = d[n.saturating_sub(1)];
        s[n] = s[n] + sign * q * (prev + d[n]);
    }
}

// out += sign * A^T y
fn predict_t<T: Scalar>(y: &[T], out: &mut [T], sign: T) {
    let m = y.len();
    let h = half::<T>(0.5);
    for n in 0..m {
        let v = sign * h * y[n];
        out[n] = out[n] + v;
        let j = (n + 1).min(m - 1);
        out[j] = out[j] + v;
    }
}

// out += sign * B^T y
fn update_t<T: Scalar>(y: &[T], out: &mut [T], sign: T) {
    let m = y.len();
    let q = half::<T>(0.25);
    for n in 0..m {
        let v = sign * q * y[n];
        let j = n.saturating_sub(1);
        out[j] = out[j] + v;
        out[n] = out[n] + v;
    }
}

fn check_even(len: usize) -> Result<()> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::Length(format!("5/3 lifting needs an even length ≥ 2, got {len}")));
    }
    Ok(())
}

fn deinterleave<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<T>) {
    (x.iter().step_by(2).copied().collect(), x.iter().skip(1).step_by(2).copied().collect())
}

fn interleave<T: Scalar>(even: &[T], odd: &[T]) -> Vec<T> {
    even.iter().zip(odd).flat_map(|(&a, &b)| [a, b]).collect()
}

/// One level of the 1-D forward transform: `(approx, detail)`.
pub fn dwt53_forward_1d<T: Scalar>(signal: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_even(signal.len())?;
    Ok(lift_forward(signal))
}

/// Exact inverse of [`dwt53_forward_1d`].
pub fn dwt53_inverse_1d<T: Scalar>(approx: &[T], detail: &[T]) -> Result<Vec<T>> {
    if approx.len() != detail.len() {
        return Err(Error::Length(format!(
            "approx has {} coefficients, detail {}",
            approx.len(),
            detail.len()
        )));
    }
    if approx.is_empty() {
        return Err(Error::Length("empty coefficient vectors".into()));
    }
    Ok(lift_inverse(approx, detail))
}

fn lift_forward<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let (mut s, mut d) = deinterleave(x);
    predict(&s, &mut d, -T::one());
    update(&d, &mut s, T::one());
    (s, d)
}

fn lift_inverse<T: Scalar>(s: &[T], d: &[T]) -> Vec<T> {
    let mut e = s.to_vec();
    let mut o = d.to_vec();
    update(&o, &mut e, -T::one());
    predict(&e, &mut o, T::one());
    interleave(&e, &o)
}

fn lift_forward_adjoint<T: Scalar>(gs: &[T], gd: &[T]) -> Vec<T> {
    // s = e + B d ; d = o - A e
    let mut gd_total = gd.to_vec();
    update_t(gs, &mut gd_total, T::one());
    let mut ge = gs.to_vec();
    predict_t(&gd_total, &mut ge, -T::one());
    interleave(&ge, &gd_total)
}

fn lift_inverse_adjoint<T: Scalar>(gx: &[T]) -> (Vec<T>, Vec<T>) {
    // e = s - B d ; o = d + A e
    let (mut ge, go) = deinterleave(gx);
    predict_t(&go, &mut ge, T::one());
    let mut gd = go;
    update_t(&ge, &mut gd, -T::one());
    (ge, gd)
}

/// An `[h, w, c]` plane in row-major order.
#[derive(Clone)]
struct Plane<T> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    fn lane(&self, axis: usize, fixed: usize, ch: usize) -> Vec<T> {
        if axis == 1 {
            (0..self.w).map(|i| self.data[(fixed * self.w + i) * self.c + ch]).collect()
        } else {
            (0..self.h).map(|i| self.data[(i * self.w + fixed) * self.c + ch]).collect()
        }
    }

    fn set_lane(&mut self, axis: usize, fixed: usize, ch: usize, v: &[T]) {
        for (i, &x) in v.iter().enumerate() {
            let idx = if axis == 1 { (fixed * self.w + i) * self.c + ch } else { (i * self.w + fixed) * self.c + ch };
            self.data[idx] = x;
        }
    }

    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![T::zero(); h * w * c] }
    }
}

/// Splits a plane along `axis` (0 = height, 1 = width) with a lane map.
fn split_axis<T: Scalar>(p: &Plane<T>, axis: usize, f: impl Fn(&[T]) -> (Vec<T>, Vec<T>)) -> (Plane<T>, Plane<T>) {
    let (h, w) = if axis == 1 { (p.h, p.w / 2) } else { (p.h / 2, p.w) };
    let mut lo = Plane::zeros(h, w, p.c);
    let mut hi = Plane::zeros(h, w, p.c);
    let fixed_n = if axis == 1 { p.h } else { p.w };
    for fixed in 0..fixed_n {
        for ch in 0..p.c {
            let (a, b) = f(&p.lane(axis, fixed, ch));
            lo.set_lane(axis, fixed, ch, &a);
            hi.set_lane(axis, fixed, ch, &b);
        }
    }
    (lo, hi)
}

fn merge_axis<T: Scalar>(lo: &Plane<T>, hi: &Plane<T>, axis: usize, f: impl Fn(&[T], &[T]) -> Vec<T>) -> Plane<T> {
    let (h, w) = if axis == 1 { (lo.h, lo.w * 2) } else { (lo.h * 2, lo.w) };
    let mut out = Plane::zeros(h, w, lo.c);
    let fixed_n = if axis == 1 { lo.h } else { lo.w };
    for fixed in 0..fixed_n {
        for ch in 0..lo.c {
            let v = f(&lo.lane(axis, fixed, ch), &hi.lane(axis, fixed, ch));
            out.set_lane(axis, fixed, ch, &v);
        }
    }
    out
}

/// `[LL, LH, HL, HH]` of one level: width pass, then height pass.
fn level_forward<T: Scalar>(p: &Plane<T>) -> [Plane<T>; 4] {
    let (l, h) = split_axis(p, 1, lift_forward);
    let (ll, lh) = split_axis(&l, 0, lift_forward);
    let (hl, hh) = split_axis(&h, 0, lift_forward);
    [ll, lh, hl, hh]
}

fn level_inverse<T: Scalar>(b: &[Plane<T>; 4]) -> Plane<T> {
    let l = merge_axis(&b[0], &b[1], 0, lift_inverse);
    let h = merge_axis(&b[2], &b[3], 0, lift_inverse);
    merge_axis(&l, &h, 1, lift_inverse)
}

fn level_forward_adjoint<T: Scalar>(b: &[Plane<T>; 4]) -> Plane<T> {
    let l = merge_axis(&b[0], &b[1], 0, lift_forward_adjoint);
    let h = merge_axis(&b[2], &b[3], 0, lift_forward_adjoint);
    merge_axis(&l, &h, 1, lift_forward_adjoint)
}

fn level_inverse_adjoint<T: Scalar>(p: &Plane<T>) -> [Plane<T>; 4] {
    let (l, h) = split_axis(p, 1, lift_inverse_adjoint);
    let (ll, lh) = split_axis(&l, 0, lift_inverse_adjoint);
    let (hl, hh) = split_axis(&h, 0, lift_inverse_adjoint);
    [ll, lh, hl, hh]
}

fn s2d_plane<T: Scalar>(p: &Plane<T>, f: usize) -> Plane<T> {
    Plane { h: p.h / f, w: p.w / f, c: p.c * f * f, data: s2d_raw(&p.data, p.h, p.w, p.c, f) }
}

fn d2s_plane<T: Scalar>(p: &Plane<T>, f: usize) -> Plane<T> {
    let c = p.c / (f * f);
    Plane { h: p.h * f, w: p.w * f, c, data: d2s_raw(&p.data, p.h * f, p.w * f, c, f) }
}

/// Channel-concatenates planes sharing a spatial grid.
fn concat_channels<T: Scalar>(parts: &[Plane<T>]) -> Plane<T> {
    let (h, w) = (parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut data = Vec::with_capacity(h * w * c);
    for px in 0..h * w {
        for p in parts {
            data.extend_from_slice(&p.data[px * p.c..(px + 1) * p.c]);
        }
    }
    Plane { h, w, c, data }
}

fn split_channels<T: Scalar>(p: &Plane<T>, widths: &[usize]) -> Vec<Plane<T>> {
    let mut out: Vec<Plane<T>> = widths.iter().map(|&c| Plane::zeros(p.h, p.w, c)).collect();
    for px in 0..p.h * p.w {
        let mut off = px * p.c;
        for (o, &c) in out.iter_mut().zip(widths) {
            o.data[px * c..(px + 1) * c].copy_from_slice(&p.data[off..off + c]);
            off += c;
        }
    }
    out
}

/// Channel widths of the packed groups for a base channel count `c`.
fn group_widths(c: usize, levels: usize) -> Vec<usize> {
    let mut w = vec![c];
    for l in (1..=levels).rev() {
        let f = 1usize << (levels - l);
        w.extend([c * f * f; 3]);
    }
    w
}

fn forward_plane<T: Scalar>(p: Plane<T>, levels: usize) -> Plane<T> {
    let mut cur = p;
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let [ll, lh, hl, hh] = level_forward(&cur);
        details.push([lh, hl, hh]);
        cur = ll;
    }
    let mut groups = vec![cur];
    for (i, bands) in details.iter().enumerate().rev() {
        let f = 1usize << (levels - 1 - i);
        groups.extend(bands.iter().map(|b| if f == 1 { b.clone() } else { s2d_plane(b, f) }));
    }
    concat_channels(&groups)
}

fn unpack<T: Scalar>(p: &Plane<T>, levels: usize) -> (Plane<T>, Vec<[Plane<T>; 3]>) {
    let c = p.c >> (2 * levels);
    let mut groups = split_channels(p, &group_widths(c, levels)).into_iter();
    let ll = groups.next().unwrap();
    let mut details: Vec<[Plane<T>; 3]> = Vec::with_capacity(levels);
    // groups are ordered coarse -> fine; `details` is collected fine-last then reversed
    for l in (1..=levels).rev() {
        let f = 1usize << (levels - l);
        let mut take = || {
            let g = groups.next().unwrap();
            if f == 1 {
                g
            } else {
                d2s_plane(&g, f)
            }
        };
        details.push([take(), take(), take()]);
    }
    details.reverse();
    (ll, details)
}

fn inverse_plane<T: Scalar>(p: &Plane<T>, levels: usize) -> Plane<T> {
    let (mut cur, details) = unpack(p, levels);
    for bands in details.iter().rev() {
        let [lh, hl, hh] = bands.clone();
        cur = level_inverse(&[cur, lh, hl, hh]);
    }
    cur
}

fn forward_adjoint_plane<T: Scalar>(p: &Plane<T>, levels: usize) -> Plane<T> {
    let (mut cur, details) = unpack(p, levels);
    for bands in details.iter().rev() {
        let [lh, hl, hh] = bands.clone();
        cur = level_forward_adjoint(&[cur, lh, hl, hh]);
    }
    cur
}

fn inverse_adjoint_plane<T: Scalar>(p: Plane<T>, levels: usize) -> Plane<T> {
    let mut cur = p;
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let [ll, lh, hl, hh] = level_inverse_adjoint(&cur);
        details.push([lh, hl, hh]);
        cur = ll;
    }
    let mut groups = vec![cur];
    for (i, bands) in details.iter().enumerate().rev() {
        let f = 1usize << (levels - 1 - i);
        groups.extend(bands.iter().map(|b| if f == 1 { b.clone() } else { s2d_plane(b, f) }));
    }
    concat_channels(&groups)
}

/// Which of the four packed linear maps to apply in [`dwt_batch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwtMap {
    Forward,
    Inverse,
    ForwardAdjoint,
    InverseAdjoint,
}

/// Applies a packed DWT map to every image of an NHWC batch.
///
/// `(h, w, c)` is the *spatial-domain* geometry; packed inputs/outputs have
/// shape `[h / 2^levels, w / 2^levels, c · 4^levels]` per image.
pub fn dwt_batch<T: Scalar>(data: &[T], batch: usize, h: usize, w: usize, c: usize, levels: usize, map: DwtMap) -> Vec<T> {
    let per = h * w * c;
    let f = 1usize << levels;
    let mut out = Vec::with_capacity(batch * per);
    for b in 0..batch {
        let chunk = data[b * per..(b + 1) * per].to_vec();
        let res = match map {
            DwtMap::Forward => forward_plane(Plane { h, w, c, data: chunk }, levels),
            DwtMap::InverseAdjoint => inverse_adjoint_plane(Plane { h, w, c, data: chunk }, levels),
            DwtMap::Inverse => inverse_plane(&Plane { h: h / f, w: w / f, c: c * f * f, data: chunk }, levels),
            DwtMap::ForwardAdjoint => forward_adjoint_plane(&Plane { h: h / f, w: w / f, c: c * f * f, data: chunk }, levels),
        };
        out.extend(res.data);
    }
    out
}

fn check_divisible(h: usize, w: usize, f: usize) -> Result<()> {
    if f == 0 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(Error::Divisibility(format!("{h}×{w} is not divisible by {f}")));
    }
    Ok(())
}

fn hwc(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Shape(format!("expected [H, W, C], got {s:?}"))),
    }
}

/// Multi-level 2-D forward transform of an `[H, W, C]` image into the packed layout.
pub fn dwt53_forward_2d(image: &Tensor<f32>, levels: usize) -> Result<DwtStack> {
    let (h, w, c) = hwc(image)?;
    if levels == 0 {
        return Err(Error::Domain("levels must be ≥ 1".into()));
    }
    check_divisible(h, w, 1 << levels)?;
    let data = dwt_batch(image.data(), 1, h, w, c, levels, DwtMap::Forward);
    let f = 1 << levels;
    Ok(DwtStack { levels, base_h: h, base_w: w, packed: Tensor::from_vec(&[h / f, w / f, c * f * f], data)? })
}

/// Inverse of [`dwt53_forward_2d`].
pub fn dwt53_inverse_2d(stack: &DwtStack) -> Result<Tensor<f32>> {
    let f = 1usize << stack.levels;
    let (ph, pw, pc) = hwc(&stack.packed)?;
    if stack.levels == 0 || ph * f != stack.base_h || pw * f != stack.base_w || pc % (f * f) != 0 {
        return Err(Error::Shape(format!(
            "packed {:?} inconsistent with {} levels over {}×{}",
            stack.packed.shape(),
            stack.levels,
            stack.base_h,
            stack.base_w
        )));
    }
    let c = pc / (f * f);
    let data = dwt_batch(stack.packed.data(), 1, stack.base_h, stack.base_w, c, stack.levels, DwtMap::Inverse);
    Tensor::from_vec(&[stack.base_h, stack.base_w, c], data)
}

/// Classic pyramid mosaic of a packed transform, `[base_h, base_w, C]`.
///
/// The coarsest `LL` sits top-left; each level's `HL` goes to the right of
/// the coarser block, `LH` below it and `HH` diagonally.
pub fn mosaic(stack: &DwtStack) -> Result<Tensor<f32>> {
    let f = 1usize << stack.levels;
    let (ph, pw, pc) = hwc(&stack.packed)?;
    if stack.levels == 0 || ph * f != stack.base_h || pw * f != stack.base_w || pc % (f * f) != 0 {
        return Err(Error::Shape(format!("packed {:?} inconsistent with {} levels", stack.packed.shape(), stack.levels)));
    }
    let (h, w, c) = (stack.base_h, stack.base_w, pc / (f * f));
    let plane = Plane { h: ph, w: pw, c: pc, data: stack.packed.data().to_vec() };
    let (ll, details) = unpack(&plane, stack.levels);
    let mut out = vec![0.0f32; h * w * c];
    let mut put = |p: &Plane<f32>, y0: usize, x0: usize| {
        for y in 0..p.h {
            let src = y * p.w * p.c;
            let dst = ((y0 + y) * w + x0) * c;
            out[dst..dst + p.w * c].copy_from_slice(&p.data[src..src + p.w * p.c]);
        }
    };
    put(&ll, 0, 0);
    for [lh, hl, hh] in &details {
        put(hl, 0, hl.w);
        put(lh, lh.h, 0);
        put(hh, hh.h, hh.w);
    }
    Tensor::from_vec(&[h, w, c], out)
}

pub(crate) fn s2d_raw<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    let (oh, ow, oc) = (h / p, w / p, c * p * p);
    let mut out = vec![T::zero(); x.len()];
    for y in 0..h {
        for xx in 0..w {
            let (by, dy, bx, dx) = (y / p, y % p, xx / p, xx % p);
            let dst = (by * ow + bx) * oc + (dy * p + dx) * c;
            let src = (y * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    debug_assert_eq!(oh * ow * oc, out.len());
    out
}

/// Inverse of [`s2d_raw`]; `(h, w, c)` is the spatial-domain geometry.
pub(crate) fn d2s_raw<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    let (ow, oc) = (w / p, c * p * p);
    let mut out = vec![T::zero(); x.len()];
    for y in 0..h {
        for xx in 0..w {
            let (by, dy, bx, dx) = (y / p, y % p, xx / p, xx % p);
            let src = (by * ow + bx) * oc + (dy * p + dx) * c;
            let dst = (y * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

/// Rearranges `p×p` spatial blocks into channels: `[H, W, C] -> [H/p, W/p, C·p²]`.
///
/// Within a block, pixels are taken in row-major order and each pixel's
/// channels stay contiguous.
pub fn space_to_depth<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::Shape(format!("expected [H, W, C], got {s:?}"))),
    };
    check_divisible(h, w, p)?;
    Tensor::from_vec(&[h / p, w / p, c * p * p], s2d_raw(image.data(), h, w, c, p))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(packed: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match packed.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::Shape(format!("expected [H, W, C], got {s:?}"))),
    };
    if p == 0 || c % (p * p) != 0 {
        return Err(Error::Divisibility(format!("{c} channels not divisible by {p}²")));
    }
    let c0 = c / (p * p);
    Tensor::from_vec(&[h * p, w * p, c0], d2s_raw(packed.data(), h * p, w * p, c0, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_signal_has_no_detail() {
        let (s, d) = dwt53_forward_1d(&[1.0f64, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s, vec![1.0, 1.0]);
        assert_eq!(d, vec![0.0, 0.0]);
        assert_eq!(dwt53_inverse_1d(&s, &d).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn ramp_matches_hand_lifting() {
        // e = [0, 2], o = [1, 3], mirrored x[4] = x[2] = 2:
        // d0 = 1 - (0 + 2)/2 = 0, d1 = 3 - (2 + 2)/2 = 1
        // s0 = 0 + (d0 + d0)/4 = 0, s1 = 2 + (d0 + d1)/4 = 2.25
        let (s, d) = dwt53_forward_1d(&[0.0f64, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(d, vec![0.0, 1.0]);
        assert_eq!(s, vec![0.0, 2.25]);
        assert_eq!(dwt53_inverse_1d(&[0.0, 2.25], &[0.0, 1.0]).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn one_d_errors() {
        assert!(matches!(dwt53_forward_1d::<f32>(&[1.0, 2.0, 3.0]), Err(Error::Length(_))));
        assert!(matches!(dwt53_forward_1d::<f32>(&[]), Err(Error::Length(_))));
        assert!(matches!(dwt53_inverse_1d::<f32>(&[1.0], &[1.0, 2.0]), Err(Error::Length(_))));
        assert_eq!(dwt53_inverse_1d(&[0.0f32; 3], &[0.0; 3]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn random_1d_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (s, d) = dwt53_forward_1d(&x).unwrap();
        let y = dwt53_inverse_1d(&s, &d).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn two_level_shape_and_constant_annihilation() {
        let img = random_image(8, 8, 3, 1);
        let st = dwt53_forward_2d(&img, 2).unwrap();
        assert_eq!(st.packed.shape(), &[2, 2, 48]);
        assert_eq!(st.channels(), 3);

        let flat = Tensor::full(&[16, 16, 2], 0.37f32);
        for levels in 1..=3 {
            let st = dwt53_forward_2d(&flat, levels).unwrap();
            let c = st.packed.last_dim();
            for px in st.packed.data().chunks(c) {
                assert!(px[2..].iter().all(|&v| v == 0.0), "detail not zero at {levels} levels");
                assert!((px[0] - 0.37).abs() < 1e-6 && (px[1] - 0.37).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn roundtrip_2d() {
        for levels in 1..=3 {
            let img = random_image(32, 32, 3, levels as u64);
            let back = dwt53_inverse_2d(&dwt53_forward_2d(&img, levels).unwrap()).unwrap();
            assert!(img.max_abs_diff(&back) <= 1e-5);
        }
        let zero = DwtStack { levels: 2, base_h: 8, base_w: 8, packed: Tensor::zeros(&[2, 2, 16]) };
        assert_eq!(dwt53_inverse_2d(&zero).unwrap(), Tensor::zeros(&[8, 8, 1]));
    }

    #[test]
    fn divisibility_is_checked() {
        let img = random_image(12, 12, 1, 0);
        assert!(matches!(dwt53_forward_2d(&img, 3), Err(Error::Divisibility(_))));
        assert!(matches!(space_to_depth(&img, 5), Err(Error::Divisibility(_))));
    }

    #[test]
    fn space_to_depth_layout() {
        let img = Tensor::<f32>::from_fn(&[4, 4, 1], |i| i as f32);
        let p = space_to_depth(&img, 2).unwrap();
        assert_eq!(p.shape(), &[2, 2, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(space_to_depth(&img, 1).unwrap(), img);
        assert_eq!(depth_to_space(&p, 2).unwrap(), img);
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let (b, h, w, c, levels) = (2, 8, 16, 2, 2);
        let f = 1 << levels;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..b * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..b * (h / f) * (w / f) * c * f * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

        let fx = dwt_batch(&x, b, h, w, c, levels, DwtMap::Forward);
        let fty = dwt_batch(&y, b, h, w, c, levels, DwtMap::ForwardAdjoint);
        assert!((dot(&fx, &y) - dot(&x, &fty)).abs() < 1e-10);

        let iy = dwt_batch(&y, b, h, w, c, levels, DwtMap::Inverse);
        let itx = dwt_batch(&x, b, h, w, c, levels, DwtMap::InverseAdjoint);
        assert!((dot(&iy, &x) - dot(&y, &itx)).abs() < 1e-10);
    }

    #[test]
    fn mosaic_places_ll_top_left() {
        let img = Tensor::full(&[8, 8, 1], 0.5f32);
        let m = mosaic(&dwt53_forward_2d(&img, 2).unwrap()).unwrap();
        assert_eq!(m.shape(), &[8, 8, 1]);
        assert_eq!(&m.data()[..2], &[0.5, 0.5]);
        assert_eq!(m.data()[2], 0.0);
        assert_eq!(m.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }
}
