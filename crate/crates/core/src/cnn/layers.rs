//! Convolution and pooling kernels on channel-major `C x H x W` buffers.

use crate::scalar::Scalar;

/// Unrolls `k x k` patches of a `c x h x w` input into a
/// `(c*k*k) x (ho*wo)` matrix for a valid, stride-1 convolution.
pub(crate) fn im2col<S: Scalar>(input: &[S], c: usize, h: usize, w: usize, k: usize, cols: &mut Vec<S>) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let plane = ho * wo;
    cols.clear();
    cols.resize(c * k * k * plane, S::zero());
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..ho {
                    let s = (y + ky) * w + kx;
                    dst[y * wo..(y + 1) * wo].copy_from_slice(&src[s..s + wo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize, out: &mut [S]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let plane = ho * wo;
    out.iter_mut().for_each(|v| *v = S::zero());
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..ho {
                    let d = (y + ky) * w + kx;
                    for (o, &g) in dst[d..d + wo].iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                        *o += g;
                    }
                }
            }
        }
    }
}

/// `out = weights * cols + bias`, weights `o x (c*k*k)`.
pub(crate) fn conv_forward<S: Scalar>(
    weights: &[S],
    bias: &[S],
    cols: &[S],
    o: usize,
    ckk: usize,
    plane: usize,
    out: &mut Vec<S>,
) {
    out.clear();
    out.reserve(o * plane);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, plane));
    }
    S::gemm(
        o, ckk, plane, S::one(), weights, ckk as isize, 1, cols, plane as isize, 1, S::one(), out,
        plane as isize, 1,
    );
}

/// Accumulates weight and bias gradients when `param_grads` is given and
/// writes column gradients when `grad_cols` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<S: Scalar>(
    weights: &[S],
    cols: &[S],
    grad_out: &[S],
    o: usize,
    ckk: usize,
    plane: usize,
    param_grads: Option<(&mut [S], &mut [S])>,
    grad_cols: Option<&mut Vec<S>>,
) {
    if let Some((grad_w, grad_b)) = param_grads {
        S::gemm(
            o, plane, ckk, S::one(), grad_out, plane as isize, 1, cols, 1, plane as isize,
            S::one(), grad_w, ckk as isize, 1,
        );
        for (gb, row) in grad_b.iter_mut().zip(grad_out.chunks_exact(plane)) {
            *gb += row.iter().copied().sum::<S>();
        }
    }
    if let Some(gc) = grad_cols {
        gc.clear();
        gc.resize(ckk * plane, S::zero());
        S::gemm(
            ckk, o, plane, S::one(), weights, 1, ckk as isize, grad_out, plane as isize, 1,
            S::zero(), gc, plane as isize, 1,
        );
    }
}

pub(crate) fn relu_inplace<S: Scalar>(v: &mut [S]) {
    for x in v {
        if *x < S::zero() {
            *x = S::zero();
        }
    }
}

/// Non-overlapping max pooling with window `p`. Records the flat input
/// index of each window's maximum, first index on ties.
pub(crate) fn maxpool_forward<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    out: &mut Vec<S>,
    argmax: &mut Vec<u32>,
) {
    let (hp, wp) = (h / p, w / p);
    out.clear();
    argmax.clear();
    out.reserve(c * hp * wp);
    argmax.reserve(c * hp * wp);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..hp {
            for x in 0..wp {
                let mut best = base + (y * p) * w + x * p;
                for dy in 0..p {
                    for dx in 0..p {
                        let idx = base + (y * p + dy) * w + x * p + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
}

pub(crate) fn maxpool_backward<S: Scalar>(grad_out: &[S], argmax: &[u32], grad_in: &mut [S]) {
    grad_in.iter_mut().for_each(|v| *v = S::zero());
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        grad_in[idx as usize] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(input: &[f64], c: usize, h: usize, w: usize, k: usize, wts: &[f64], b: &[f64]) -> Vec<f64> {
        let o = b.len();
        let (ho, wo) = (h - k + 1, w - k + 1);
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for y in 0..ho {
                for x in 0..wo {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                s += wts[((oc * c + ic) * k + ky) * k + kx]
                                    * input[ic * h * w + (y + ky) * w + x + kx];
                            }
                        }
                    }
                    out[(oc * ho + y) * wo + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_naive() {
        let (c, h, w, k, o) = (2, 6, 5, 3, 3);
        let input: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wts: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let b = vec![0.5, -1.0, 0.25];
        let mut cols = Vec::new();
        im2col(&input, c, h, w, k, &mut cols);
        let mut out = Vec::new();
        conv_forward(&wts, &b, &cols, o, c * k * k, (h - k + 1) * (w - k + 1), &mut out);
        let want = naive_conv(&input, c, h, w, k, &wts, &b);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 5, 4, 2);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut cols = Vec::new();
        im2col(&x, c, h, w, k, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_first_index_tie_break() {
        let input = [1.0, 1.0, 0.0, 1.0, 0.5, 3.0, 2.0, 3.0, 9.0];
        let mut out = Vec::new();
        let mut arg = Vec::new();
        // 3x3 with window 2 keeps only the top-left 2x2
        maxpool_forward(&input, 1, 3, 3, 2, &mut out, &mut arg);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
        let mut g = vec![0.0; 9];
        maxpool_backward(&[2.0], &arg, &mut g);
        assert_eq!(g[0], 2.0);
        assert_eq!(g.iter().sum::<f64>(), 2.0);
    }
}
