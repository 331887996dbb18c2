//! Raw loops behind the graph primitives.

use super::Scalar;

/// `c = a @ b + beta * c` where `a` is logically `m×k` and `b` is `k×n`.
/// `ta`/`tb` mean the operand is stored transposed (row-major `k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    beta: T,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above; c never aliases a or b.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` when viewed inside `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks `shape` row by row (all axes but the last), handing the callback
/// the linear output offset and the two operand offsets of each row.
pub(crate) fn walk_rows(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let rows: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    for row in 0..rows {
        f(row * inner, oa, ob);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` by accumulating over broadcast axes.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    let n: usize = target.iter().product();
    if out == target {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); n];
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    let inner = out.last().copied().unwrap_or(1);
    let s_inner = st.last().copied().unwrap_or(0);
    walk_rows(out, &st, &zeros, |o, t, _| {
        let g = &grad[o..o + inner];
        if s_inner == 0 {
            acc[t] = acc[t] + g.iter().copied().sum();
        } else {
            for (j, &v) in g.iter().enumerate() {
                acc[t + j] = acc[t + j] + v;
            }
        }
    });
    acc
}

/// Applies a binary function under broadcasting.
pub(crate) fn broadcast_binary<T: Scalar>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out.iter().product();
    let mut res = vec![T::zero(); n];
    let sa = broadcast_strides(ashape, out);
    let sb = broadcast_strides(bshape, out);
    let inner = out.last().copied().unwrap_or(1);
    let (ia, ib) = (sa.last().copied().unwrap_or(0), sb.last().copied().unwrap_or(0));
    walk_rows(out, &sa, &sb, |o, pa, pb| {
        let row = &mut res[o..o + inner];
        match (ia, ib) {
            (1, 1) => {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(a[pa + j], b[pb + j]);
                }
            }
            (1, 0) => {
                let y = b[pb];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(a[pa + j], y);
                }
            }
            (0, 1) => {
                let x = a[pa];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(x, b[pb + j]);
                }
            }
            _ => {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(a[pa + j * ia], b[pb + j * ib]);
                }
            }
        }
    });
    res
}

/// Gathers a second operand into the output's shape (used by backward rules
/// that need the other operand elementwise).
pub(crate) fn broadcast_to<T: Scalar>(x: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    if shape == out {
        return x.to_vec();
    }
    let zeros = vec![T::zero(); 1];
    broadcast_binary(x, shape, &zeros, &[1], out, |a, _| a)
}

/// Geometry of a 2-D convolution over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvShape {
    pub(crate) fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub(crate) fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

/// Unfolds input patches into a `rows × (kh·kw·cin)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvShape) -> Vec<T> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        let xb = &x[b * g.in_h * g.in_w * g.cin..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * g.cin;
                        let d = (ky * g.kw + kx) * g.cin;
                        dst[d..d + g.cin].copy_from_slice(&xb[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back, accumulating overlaps.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvShape, out: &mut [T]) {
    if g.is_pointwise() {
        for (o, c) in out.iter_mut().zip(cols) {
            *o = *o + *c;
        }
        return;
    }
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * g.cin;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.in_w + ix as usize) * g.cin;
                        let s = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            out[dst + c] = out[dst + c] + src[s + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adds a per-column bias to every row of a `rows × n` matrix.
pub(crate) fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in y.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

/// Column sums of a `rows × n` matrix.
pub(crate) fn column_sums<T: Scalar>(y: &[T], n: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); n];
    for row in y.chunks_exact(n) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a = *a + *v;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 1, 4], &[2, 5, 5, 4]), Some(vec![2, 5, 5, 4]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn broadcast_binary_matches_index_math() {
        let a: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let b: Vec<f64> = vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];
        let out = broadcast_binary(&a, &[2, 3, 4], &b, &[2, 1, 4], &[2, 3, 4], |x, y| x + y);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[(i * 3 + j) * 4 + k], a[(i * 3 + j) * 4 + k] + b[i * 4 + k]);
                }
            }
        }
        let red = reduce_to(&out, &[2, 3, 4], &[2, 1, 4]);
        for i in 0..2 {
            for k in 0..4 {
                let want: f64 = (0..3).map(|j| out[(i * 3 + j) * 4 + k]).sum();
                assert_eq!(red[i * 4 + k], want);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvShape {
            batch: 2,
            in_h: 5,
            in_w: 4,
            cin: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            out_h: 3,
            out_w: 2,
            pad_top: 1,
            pad_left: 1,
        };
        let x: Vec<f64> = (0..2 * 5 * 4 * 3).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
