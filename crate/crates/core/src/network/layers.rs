//! Single-item layer kernels on `C x H x W` buffers.

use crate::scalar::Scalar;

/// Square convolution with zero padding that preserves the spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// Offset of the `cout x cin x k x k` weights in the parameter vector.
    pub weight: usize,
    /// Offset of the `cout` biases.
    pub bias: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds `input` into a `(cin*k*k) x (h*w)` matrix.
pub(crate) fn im2col<T: Scalar>(input: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut Vec<T>) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    col.clear();
    col.resize(cin * k * k * hw, T::zero());
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[sx0..sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `out`.
#[cfg(test)]
pub(crate) fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let sx0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + sx0..][..x_hi - x_lo];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// `conv(input)` with optional ReLU; returns `cout x h x w`.
pub(crate) fn conv_forward<T: Scalar>(
    conv: &Conv,
    params: &[T],
    input: &[T],
    h: usize,
    w: usize,
    relu: bool,
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let hw = h * w;
    let weights = &params[conv.weight..conv.weight + conv.weight_len()];
    let bias = &params[conv.bias..conv.bias + conv.cout];
    let mut out = vec![T::zero(); conv.cout * hw];
    for (co, plane) in out.chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[co]);
    }
    let col: &[T] = if conv.k == 1 {
        input
    } else {
        im2col(input, conv.cin, h, w, conv.k, scratch);
        scratch
    };
    let kk = conv.patch_len();
    T::gemm(conv.cout, kk, hw, T::one(), weights, (kk, 1), col, (hw, 1), T::one(), &mut out, (hw, 1));
    if relu {
        for v in &mut out {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
    }
    out
}

/// Backward pass of one convolution. `grad_out` is the gradient w.r.t. the
/// (post-activation) output; with `relu` it is masked by `output > 0`.
/// Parameter gradients are accumulated into `grads`; the input gradient is
/// returned.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    conv: &Conv,
    params: &[T],
    input: &[T],
    output: &[T],
    mut grad_out: Vec<T>,
    h: usize,
    w: usize,
    relu: bool,
    grads: &mut [T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let hw = h * w;
    if relu {
        for (g, &o) in grad_out.iter_mut().zip(output) {
            if !(o > T::zero()) {
                *g = T::zero();
            }
        }
    }
    let kk = conv.patch_len();
    {
        let gb = &mut grads[conv.bias..conv.bias + conv.cout];
        for (co, plane) in grad_out.chunks_exact(hw).enumerate() {
            gb[co] = gb[co] + plane.iter().copied().sum::<T>();
        }
    }
    let col: &[T] = if conv.k == 1 {
        input
    } else {
        im2col(input, conv.cin, h, w, conv.k, scratch);
        scratch
    };
    {
        let gw = &mut grads[conv.weight..conv.weight + conv.weight_len()];
        T::gemm(conv.cout, hw, kk, T::one(), &grad_out, (hw, 1), col, (1, hw), T::one(), gw, (kk, 1));
    }
    let weights = &params[conv.weight..conv.weight + conv.weight_len()];
    if conv.k == 1 {
        let mut grad_in = vec![T::zero(); conv.cin * hw];
        T::gemm(conv.cin, conv.cout, hw, T::one(), weights, (1, kk), &grad_out, (hw, 1), T::zero(), &mut grad_in, (hw, 1));
        return grad_in;
    }
    // Input gradient = grad_out convolved with the spatially flipped,
    // channel-transposed kernel: a `cin x (cout*k*k)` by `(cout*k*k) x hw` product.
    let k2 = conv.k * conv.k;
    let mut flipped = vec![T::zero(); conv.cin * conv.cout * k2];
    for co in 0..conv.cout {
        for ci in 0..conv.cin {
            for t in 0..k2 {
                flipped[(ci * conv.cout + co) * k2 + (k2 - 1 - t)] = weights[(co * conv.cin + ci) * k2 + t];
            }
        }
    }
    im2col(&grad_out, conv.cout, h, w, conv.k, scratch);
    let mut grad_in = vec![T::zero(); conv.cin * hw];
    let kf = conv.cout * k2;
    T::gemm(conv.cin, kf, hw, T::one(), &flipped, (kf, 1), scratch, (hw, 1), T::zero(), &mut grad_in, (hw, 1));
    grad_in
}

/// 2x2 max-pool with stride 2. Returns pooled values and, per output, the
/// flat input index of the winner (first maximum in scan order).
pub(crate) fn max_pool<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [base + 2 * y * w + 2 * x + 1, base + (2 * y + 1) * w + 2 * x, base + (2 * y + 1) * w + 2 * x + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward<T: Scalar>(grad_out: &[T], arg: &[u32], grad_in: &mut [T]) {
    for (&g, &i) in grad_out.iter().zip(arg) {
        grad_in[i as usize] = grad_in[i as usize] + g;
    }
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for y in 0..ho {
            let row = &input[ci * h * w + (y / 2) * w..][..w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let wo = 2 * w;
    let mut grad_in = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..2 * h {
            let src = &grad_out[(ci * 2 * h + y) * wo..][..wo];
            let dst = &mut grad_in[ci * h * w + (y / 2) * w..][..w];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = *d + src[2 * x] + src[2 * x + 1];
            }
        }
    }
    grad_in
}
