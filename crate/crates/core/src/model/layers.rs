//! Convolution, pooling and resampling primitives with explicit backward passes.
//!
//! Parameters live in one flat `f64` buffer; layers only remember offsets into it.

use std::ops::Range;

use crate::tensor::FeatureMap;

/// Positions `i` of the strided side for which `i * stride + tap - pad` lands inside `0..dense_len`.
#[inline]
fn tap_range(tap: usize, stride: usize, pad: usize, strided_len: usize, dense_len: usize) -> Range<usize> {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    // i * stride + tap - pad <= dense_len - 1
    let limit = dense_len + pad;
    let hi = if limit > tap {
        ((limit - tap - 1) / stride + 1).min(strided_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// A 2-D convolution or transposed convolution with square kernels.
///
/// Regular weights are laid out `(out, in, k, k)`; transposed weights `(in, out, k, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * self.kernel * self.kernel
    }

    pub fn output_side(&self, side: usize) -> usize {
        if self.transposed {
            (side - 1) * self.stride + self.kernel - 2 * self.pad
        } else {
            (side + 2 * self.pad - self.kernel) / self.stride + 1
        }
    }

    #[cfg(test)]
    fn w_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        let k = self.kernel;
        if self.transposed {
            self.weight + ((c * self.cout + o) * k + ky) * k + kx
        } else {
            self.weight + ((o * self.cin + c) * k + ky) * k + kx
        }
    }

    fn kernel_len(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn forward(&self, params: &[f64], input: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(input.channels, self.cin);
        let (ih, iw) = (input.height, input.width);
        let (oh, ow) = (self.output_side(ih), self.output_side(iw));
        let kk = self.kernel_len();
        let weights = &params[self.weight..self.weight + self.cin * self.cout * kk];
        if self.transposed {
            // columns (cout·k·k, ih·iw) = Wᵀ · input, then scattered onto the output grid
            let np = ih * iw;
            let rows = self.cout * kk;
            let mut cols = vec![0.0; rows * np];
            for c in 0..self.cin {
                let src = input.plane(c);
                let wrow = &weights[c * rows..(c + 1) * rows];
                for (r, &w) in wrow.iter().enumerate() {
                    axpy(w, src, &mut cols[r * np..(r + 1) * np]);
                }
            }
            let mut out = FeatureMap::zeros(self.cout, oh, ow);
            for o in 0..self.cout {
                out.plane_mut(o).fill(params[self.bias + o]);
            }
            col2im(&cols, self, ih, iw, &mut out);
            out
        } else {
            let np = oh * ow;
            let cols = im2col(input, self, oh, ow);
            let k_all = self.cin * kk;
            let mut out = FeatureMap::zeros(self.cout, oh, ow);
            for o in 0..self.cout {
                let dst = out.plane_mut(o);
                dst.fill(params[self.bias + o]);
                let wrow = &weights[o * k_all..(o + 1) * k_all];
                for (r, &w) in wrow.iter().enumerate() {
                    axpy(w, &cols[r * np..(r + 1) * np], dst);
                }
            }
            out
        }
    }

    /// Accumulates weight and bias gradients into `grads`; returns the input gradient when asked.
    pub fn backward(
        &self,
        params: &[f64],
        input: &FeatureMap,
        grad_out: &FeatureMap,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<FeatureMap> {
        let (ih, iw) = (input.height, input.width);
        let (oh, ow) = (grad_out.height, grad_out.width);
        let kk = self.kernel_len();
        let wlen = self.cin * self.cout * kk;
        let weights = &params[self.weight..self.weight + wlen];
        for o in 0..self.cout {
            grads[self.bias + o] += grad_out.plane(o).iter().sum::<f64>();
        }
        let gw = &mut grads[self.weight..self.weight + wlen];
        if self.transposed {
            let np = ih * iw;
            let rows = self.cout * kk;
            let gcols = im2col(grad_out, self, ih, iw);
            for c in 0..self.cin {
                let src = input.plane(c);
                for r in 0..rows {
                    gw[c * rows + r] += dot(src, &gcols[r * np..(r + 1) * np]);
                }
            }
            want_input.then(|| {
                let mut gi = FeatureMap::zeros(self.cin, ih, iw);
                for c in 0..self.cin {
                    let wrow = &weights[c * rows..(c + 1) * rows];
                    let dst = gi.plane_mut(c);
                    for (r, &w) in wrow.iter().enumerate() {
                        axpy(w, &gcols[r * np..(r + 1) * np], dst);
                    }
                }
                gi
            })
        } else {
            let np = oh * ow;
            let k_all = self.cin * kk;
            let cols = im2col(input, self, oh, ow);
            for o in 0..self.cout {
                let g = grad_out.plane(o);
                for r in 0..k_all {
                    gw[o * k_all + r] += dot(g, &cols[r * np..(r + 1) * np]);
                }
            }
            want_input.then(|| {
                let mut gcols = vec![0.0; k_all * np];
                for o in 0..self.cout {
                    let g = grad_out.plane(o);
                    let wrow = &weights[o * k_all..(o + 1) * k_all];
                    for (r, &w) in wrow.iter().enumerate() {
                        axpy(w, g, &mut gcols[r * np..(r + 1) * np]);
                    }
                }
                let mut gi = FeatureMap::zeros(self.cin, ih, iw);
                col2im(&gcols, self, oh, ow, &mut gi);
                gi
            })
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gathers kernel taps of the dense map onto the strided grid: rows are
/// `(channel, ky, kx)`, columns strided positions. Out-of-range taps stay zero.
fn im2col(dense: &FeatureMap, conv: &Conv, sh: usize, sw: usize) -> Vec<f64> {
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let (dh, dw) = (dense.height, dense.width);
    let np = sh * sw;
    let mut cols = vec![0.0; dense.channels * k * k * np];
    for c in 0..dense.channels {
        let src = dense.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * np;
                let rx = tap_range(kx, s, p, sw, dw);
                for y in tap_range(ky, s, p, sh, dh) {
                    let dy = y * s + ky - p;
                    let dst = &mut cols[row + y * sw..row + (y + 1) * sw];
                    let srow = &src[dy * dw..(dy + 1) * dw];
                    for x in rx.clone() {
                        dst[x] = srow[x * s + kx - p];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back onto the dense map.
fn col2im(cols: &[f64], conv: &Conv, sh: usize, sw: usize, dense: &mut FeatureMap) {
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let (dh, dw) = (dense.height, dense.width);
    let np = sh * sw;
    for c in 0..dense.channels {
        let dst = dense.plane_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * np;
                let rx = tap_range(kx, s, p, sw, dw);
                for y in tap_range(ky, s, p, sh, dh) {
                    let dy = y * s + ky - p;
                    let src = &cols[row + y * sw..row + (y + 1) * sw];
                    let drow = &mut dst[dy * dw..(dy + 1) * dw];
                    for x in rx.clone() {
                        drow[x * s + kx - p] += src[x];
                    }
                }
            }
        }
    }
}

/// Bin edges of adaptive average pooling from `src` cells onto `dst` cells.
fn pool_bins(src: usize, dst: usize) -> Vec<Range<usize>> {
    (0..dst)
        .map(|i| {
            let start = i * src / dst;
            let end = ((i + 1) * src).div_ceil(dst);
            start..end
        })
        .collect()
}

/// Adaptive average pooling of every channel onto a `side × side` grid.
pub(crate) fn adaptive_avg_pool(input: &FeatureMap, side: usize) -> FeatureMap {
    let by = pool_bins(input.height, side);
    let bx = pool_bins(input.width, side);
    let mut out = FeatureMap::zeros(input.channels, side, side);
    for c in 0..input.channels {
        for (oy, ry) in by.iter().enumerate() {
            for (ox, rx) in bx.iter().enumerate() {
                let mut acc = 0.0;
                for y in ry.clone() {
                    for x in rx.clone() {
                        acc += input.get(c, y, x);
                    }
                }
                out.set(c, oy, ox, acc / (ry.len() * rx.len()) as f64);
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward(grad_out: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let side = grad_out.height;
    let by = pool_bins(height, side);
    let bx = pool_bins(width, grad_out.width);
    let mut grad_in = FeatureMap::zeros(grad_out.channels, height, width);
    for c in 0..grad_out.channels {
        for (oy, ry) in by.iter().enumerate() {
            for (ox, rx) in bx.iter().enumerate() {
                let g = grad_out.get(c, oy, ox) / (ry.len() * rx.len()) as f64;
                for y in ry.clone() {
                    for x in rx.clone() {
                        let i = grad_in.index(c, y, x);
                        grad_in.data[i] += g;
                    }
                }
            }
        }
    }
    grad_in
}

/// Source taps `(i0, i1, frac)` for half-pixel-centred bilinear resampling of one axis.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a single plane to `height × width`.
pub(crate) fn bilinear_resize(plane: &[f64], side: usize, height: usize, width: usize) -> Vec<f64> {
    let ty = bilinear_taps(side, height);
    let tx = bilinear_taps(side, width);
    let mut out = vec![0.0; height * width];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = plane[y0 * side + x0] * (1.0 - fx) + plane[y0 * side + x1] * fx;
            let bot = plane[y1 * side + x0] * (1.0 - fx) + plane[y1 * side + x1] * fx;
            out[y * width + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

pub(crate) fn bilinear_resize_backward(grad: &[f64], side: usize, height: usize, width: usize) -> Vec<f64> {
    let ty = bilinear_taps(side, height);
    let tx = bilinear_taps(side, width);
    let mut out = vec![0.0; side * side];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = grad[y * width + x];
            out[y0 * side + x0] += g * (1.0 - fy) * (1.0 - fx);
            out[y0 * side + x1] += g * (1.0 - fy) * fx;
            out[y1 * side + x0] += g * fy * (1.0 - fx);
            out[y1 * side + x1] += g * fy * fx;
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
