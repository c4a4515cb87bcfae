//! Raw numeric kernels.
//!
//! Plain-slice implementations of the expensive operators (matrix products,
//! convolution, window partitioning) plus the broadcasting machinery. The
//! tape layers shape checking and gradient bookkeeping on top of these.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::pad_shape;

// ── matrix products ──────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n], row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[m,n] = A[k,m]^T * B[k,n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Batched product over matching leading batches: out[b] = a[b] * b[b],
/// with an optional transpose of the second operand.
pub fn bmm(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * m * n);
    for i in 0..batch {
        let ab = &a[i * m * k..(i + 1) * m * k];
        let bb = if transpose_b {
            &b[i * n * k..(i + 1) * n * k]
        } else {
            &b[i * k * n..(i + 1) * k * n]
        };
        let c = if transpose_b {
            matmul_nt(ab, bb, m, k, n)
        } else {
            matmul(ab, bb, m, k, n)
        };
        out.extend_from_slice(&c);
    }
    out
}

// ── broadcasting ─────────────────────────────────────────────────────

/// Elementwise combine of two broadcast-compatible operands into `out_shape`.
pub fn broadcast_zip(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let ndim = out_shape.len();
    let ap = pad_shape(a_shape, ndim);
    let bp = pad_shape(b_shape, ndim);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; ndim];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut af = 0;
        let mut astride = 1;
        let mut bf = 0;
        let mut bstride = 1;
        for d in (0..ndim).rev() {
            af += if ap[d] == 1 { 0 } else { coords[d] } * astride;
            astride *= ap[d];
            bf += if bp[d] == 1 { 0 } else { coords[d] } * bstride;
            bstride *= bp[d];
        }
        *slot = f(a[af], b[bf]);
    }
    out
}

/// Sum a gradient of `grad_shape` down to `target_shape` (undo broadcast).
pub fn reduce_grad_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let ndim = grad_shape.len();
    let tp = pad_shape(target_shape, ndim);
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let mut coords = vec![0usize; ndim];
    for (flat, g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut tf = 0;
        let mut stride = 1;
        for d in (0..ndim).rev() {
            tf += if tp[d] == 1 { 0 } else { coords[d] } * stride;
            stride *= tp[d];
        }
        out[tf] += g;
    }
    out
}

// ── convolution ──────────────────────────────────────────────────────

/// Output spatial extent of a zero-padded strided convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Grouped 2-D convolution, zero padding.
///
/// x: (b, cin, h, w); w: (cout, cin/groups, kh, kw); out: (b, cout, oh, ow).
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, cinpg, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let copg = cout / groups;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for oc in 0..cout {
            let g = oc / copg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..cinpg {
                        let c = g * cinpg + ic;
                        let xplane = &x[(bi * cin + c) * h * w..(bi * cin + c + 1) * h * w];
                        let wplane = &wt[(oc * cinpg + ic) * kh * kw..(oc * cinpg + ic + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xplane[iy as usize * w + ix as usize] * wplane[ky * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradient of conv2d with respect to the input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input(
    grad: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, cinpg, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let copg = cout / groups;
    let mut dx = vec![0.0; b * cin * h * w];
    for bi in 0..b {
        for oc in 0..cout {
            let g = oc / copg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = grad[((bi * cout + oc) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..cinpg {
                        let c = g * cinpg + ic;
                        let wplane = &wt[(oc * cinpg + ic) * kh * kw..(oc * cinpg + ic + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[((bi * cin + c) * h + iy as usize) * w + ix as usize] +=
                                    gv * wplane[ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of conv2d with respect to the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_weight(
    grad: &[f64],
    x: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    (cout, cinpg, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let copg = cout / groups;
    let mut dw = vec![0.0; cout * cinpg * kh * kw];
    for bi in 0..b {
        for oc in 0..cout {
            let g = oc / copg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = grad[((bi * cout + oc) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..cinpg {
                        let c = g * cinpg + ic;
                        let xplane = &x[(bi * cin + c) * h * w..(bi * cin + c + 1) * h * w];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dw[(oc * cinpg + ic) * kh * kw + ky * kw + kx] +=
                                    gv * xplane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

// ── window partition / merge ─────────────────────────────────────────

/// Geometry tying a window partition to the map it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub batch: usize,
    pub channels: usize,
    /// Original spatial extents.
    pub h: usize,
    pub w: usize,
    /// Zero-padded extents, exact multiples of `k`.
    pub padded_h: usize,
    pub padded_w: usize,
    pub k: usize,
}

impl WindowGeometry {
    pub fn new(batch: usize, channels: usize, h: usize, w: usize, k: usize) -> Self {
        let padded_h = h.div_ceil(k) * k;
        let padded_w = w.div_ceil(k) * k;
        WindowGeometry {
            batch,
            channels,
            h,
            w,
            padded_h,
            padded_w,
            k,
        }
    }

    /// Windows per batch item.
    pub fn windows_per_item(&self) -> usize {
        (self.padded_h / self.k) * (self.padded_w / self.k)
    }

    /// Map position of token `t` in window `p` (both within one batch item),
    /// which may land in the padded margin.
    pub fn token_position(&self, p: usize, t: usize) -> (usize, usize) {
        let wins_x = self.padded_w / self.k;
        let (wy, wx) = (p / wins_x, p % wins_x);
        let (ty, tx) = (t / self.k, t % self.k);
        (wy * self.k + ty, wx * self.k + tx)
    }

    /// True if token `t` of any window `p` lies inside the original map.
    pub fn token_valid(&self, p: usize, t: usize) -> bool {
        let (y, x) = self.token_position(p, t);
        y < self.h && x < self.w
    }
}

/// Partition (b, c, h, w) into row-major K*K token windows
/// (b * P, K*K, c); out-of-map tokens take `fill`.
pub fn window_partition(x: &[f64], geom: &WindowGeometry, fill: f64) -> Vec<f64> {
    let (b, c, h, w, k) = (geom.batch, geom.channels, geom.h, geom.w, geom.k);
    let p = geom.windows_per_item();
    let kk = k * k;
    let mut out = vec![fill; b * p * kk * c];
    for bi in 0..b {
        for pi in 0..p {
            for t in 0..kk {
                let (y, x_) = geom.token_position(pi, t);
                if y >= h || x_ >= w {
                    continue;
                }
                for ci in 0..c {
                    out[((bi * p + pi) * kk + t) * c + ci] = x[((bi * c + ci) * h + y) * w + x_];
                }
            }
        }
    }
    out
}

/// Inverse of [`window_partition`]: padding is cropped away.
pub fn window_merge(tokens: &[f64], geom: &WindowGeometry) -> Vec<f64> {
    let (b, c, h, w, k) = (geom.batch, geom.channels, geom.h, geom.w, geom.k);
    let p = geom.windows_per_item();
    let kk = k * k;
    let mut out = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for pi in 0..p {
            for t in 0..kk {
                let (y, x_) = geom.token_position(pi, t);
                if y >= h || x_ >= w {
                    continue;
                }
                for ci in 0..c {
                    out[((bi * c + ci) * h + y) * w + x_] = tokens[((bi * p + pi) * kk + t) * c + ci];
                }
            }
        }
    }
    out
}
