//! Reverse-mode differentiation tape.
//!
//! Every forward operator appends a node holding the result tensor and an op
//! record naming its inputs. `backward` replays the records in reverse,
//! accumulating vector-Jacobian products, and deposits gradients on the
//! `requires_grad` leaves. Ops are pure; one tape belongs to one logical
//! thread of execution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, WindowGeometry};
use crate::mathx;
use crate::tensor::{broadcast_shapes, shape_str, strides_of, Tensor};

pub type TensorId = usize;

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulScalar { a: TensorId, c: f64 },
    Matmul { a: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId, transpose_b: bool },
    Reshape { a: TensorId },
    Permute { a: TensorId, perm: Vec<usize> },
    Conv2d { x: TensorId, w: TensorId, stride: usize, pad: usize, groups: usize },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    SoftmaxLastDim { a: TensorId },
    LayerNormChan { x: TensorId, gamma: TensorId, beta: TensorId },
    BatchNormInf { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, var: Vec<f64> },
    UpsampleNearest { a: TensorId, factor: usize },
    CropSpatial { a: TensorId },
    GlobalAvgPool { a: TensorId },
    WindowPartition { x: TensorId, geom: WindowGeometry },
    WindowMerge { tokens: TensorId, geom: WindowGeometry },
    ConcatChannels { parts: Vec<TensorId> },
    RelBiasExpand { table: TensorId, k: usize },
    SumAll { a: TensorId },
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    MseLoss { pred: TensorId, target: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A tape that evaluates forward values but records no backward rules.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── node access ──────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].tensor.shape
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].tensor
    }

    /// Gradient deposited on a leaf by the last backward pass.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        debug_assert!(
            tensor.all_finite(),
            "non-finite values produced by {op:?}"
        );
        let id = self.nodes.len();
        self.nodes.push(Node { tensor, op });
        id
    }

    /// Record `op` only when the result actually needs a backward path.
    fn push_op(&mut self, mut tensor: Tensor, op: Op, inputs: &[TensorId]) -> TensorId {
        let needs = self.recording && inputs.iter().any(|&i| self.nodes[i].tensor.requires_grad);
        tensor.requires_grad = needs;
        self.push(tensor, if needs { op } else { Op::Leaf })
    }

    // ── elementwise and linear ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let data = kernels::broadcast_zip(
            self.data(a), self.shape(a), self.data(b), self.shape(b), &out_shape, |x, y| x + y,
        );
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let data = kernels::broadcast_zip(
            self.data(a), self.shape(a), self.data(b), self.shape(b), &out_shape, |x, y| x * y,
        );
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|v| v * c).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data, requires_grad: false, grad: None };
        self.push_op(t, Op::MulScalar { a, c }, &[a])
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul expects (m,k) x (k,n), got {} x {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push_op(t, Op::Matmul { a, b }, &[a, b]))
    }

    /// Batched matmul over matching leading batch: (B,m,k) x (B,k,n), or
    /// (B,m,k) x (B,n,k) with `transpose_b`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "bmm expects matching 3-d batches, got {} x {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let k2 = if transpose_b { sb[2] } else { sb[1] };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "bmm inner extents differ: {} x {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let data = kernels::bmm(self.data(a), self.data(b), batch, m, k, n, transpose_b);
        let t = Tensor::new(&[batch, m, n], data)?;
        Ok(self.push_op(t, Op::Bmm { a, b, transpose_b }, &[a, b]))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::Dimension(format!(
                "reshape {} -> {} changes element count",
                shape_str(self.shape(a)),
                shape_str(new_shape)
            )));
        }
        let t = Tensor::new(new_shape, self.data(a).to_vec())?;
        Ok(self.push_op(t, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "permute {perm:?} does not match rank of {}",
                shape_str(&shape)
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Dimension(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(a), &shape, perm);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(t, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    // ── convolution and normalization ────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and kernel, got {} and {}",
                shape_str(&xs),
                shape_str(&ws)
            )));
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cinpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cinpg {
            return Err(Error::Dimension(format!(
                "conv2d channel/group mismatch: input {} kernel {} groups {groups}",
                shape_str(&xs),
                shape_str(&ws)
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                kh, kw, h + 2 * pad, wd + 2 * pad
            )));
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad);
        let ow = kernels::conv_out_extent(wd, kw, stride, pad);
        let data = kernels::conv2d(
            self.data(x), (b, cin, h, wd), self.data(w), (cout, cinpg, kh, kw), stride, pad, groups,
        );
        let t = Tensor::new(&[b, cout, oh, ow], data)?;
        Ok(self.push_op(t, Op::Conv2d { x, w, stride, pad, groups }, &[x, w]))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data, requires_grad: false, grad: None };
        self.push_op(t, Op::Relu { a }, &[a])
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&v| mathx::gelu(v)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data, requires_grad: false, grad: None };
        self.push_op(t, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("softmax needs rank >= 1");
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = mathx::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor { shape, data, requires_grad: false, grad: None };
        self.push_op(t, Op::SoftmaxLastDim { a }, &[a])
    }

    /// Layer norm over the channel axis of an (B,C,H,W) map, per position.
    pub fn layer_norm_chan(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "layer_norm expects (b,c,h,w), got {}",
                shape_str(&shape)
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "layer_norm affine must be [{c}], got {} and {}",
                shape_str(self.shape(gamma)),
                shape_str(self.shape(beta))
            )));
        }
        let hw = h * w;
        let xs = self.data(x);
        let gs = self.data(gamma).to_vec();
        let bs = self.data(beta).to_vec();
        let mut data = vec![0.0; xs.len()];
        for bi in 0..b {
            for p in 0..hw {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += xs[(bi * c + ci) * hw + p];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = xs[(bi * c + ci) * hw + p] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / mathx::sqrt(var + LN_EPS);
                for ci in 0..c {
                    let xhat = (xs[(bi * c + ci) * hw + p] - mean) * inv;
                    data[(bi * c + ci) * hw + p] = xhat * gs[ci] + bs[ci];
                }
            }
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push_op(t, Op::LayerNormChan { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Batch norm with fixed statistics (inference semantics).
    pub fn batch_norm_inf(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        var: &[f64],
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "batch_norm expects (b,c,h,w), got {}",
                shape_str(&shape)
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c || var.len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm affine/stats must be [{c}] (input {})",
                shape_str(&shape)
            )));
        }
        let hw = h * w;
        let xs = self.data(x);
        let gs = self.data(gamma).to_vec();
        let bs = self.data(beta).to_vec();
        let mut data = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let inv = 1.0 / mathx::sqrt(var[ci] + BN_EPS);
                let scale = gs[ci] * inv;
                let shift = bs[ci] - mean[ci] * scale;
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    data[base + p] = xs[base + p] * scale + shift;
                }
            }
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push_op(
            t,
            Op::BatchNormInf { x, gamma, beta, mean: mean.to_vec(), var: var.to_vec() },
            &[x, gamma, beta],
        ))
    }

    // ── spatial ops ──────────────────────────────────────────────────

    /// Nearest-neighbor upsample: each pixel becomes a factor x factor block.
    pub fn upsample_nearest(&mut self, a: TensorId, factor: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "upsample expects (b,c,h,w), got {}",
                shape_str(&shape)
            )));
        }
        if factor == 0 {
            return Err(Error::Config(format!("upsample factor must be >= 1, got {factor}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xs = self.data(a);
        let mut data = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            for y in 0..oh {
                for x_ in 0..ow {
                    data[(bc * oh + y) * ow + x_] = xs[(bc * h + y / factor) * w + x_ / factor];
                }
            }
        }
        let t = Tensor::new(&[b, c, oh, ow], data)?;
        Ok(self.push_op(t, Op::UpsampleNearest { a, factor }, &[a]))
    }

    /// Keep the top-left (h, w) region of a (B,C,H,W) map. Upsampled maps
    /// overshoot their target stream when intermediate extents were
    /// ceil-rounded by strided convs; this trims them back.
    pub fn crop_spatial(&mut self, a: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || shape[2] < h || shape[3] < w || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "cannot crop {} to {h}x{w}",
                shape_str(&shape)
            )));
        }
        if shape[2] == h && shape[3] == w {
            return Ok(a);
        }
        let (b, c, ih, iw) = (shape[0], shape[1], shape[2], shape[3]);
        let xs = self.data(a);
        let mut data = vec![0.0; b * c * h * w];
        for bc in 0..b * c {
            for y in 0..h {
                data[(bc * h + y) * w..(bc * h + y + 1) * w]
                    .copy_from_slice(&xs[(bc * ih + y) * iw..(bc * ih + y) * iw + w]);
            }
        }
        let t = Tensor::new(&[b, c, h, w], data)?;
        Ok(self.push_op(t, Op::CropSpatial { a }, &[a]))
    }

    /// (B,C,H,W) -> (B,C) spatial mean.
    pub fn global_avg_pool(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects (b,c,h,w), got {}",
                shape_str(&shape)
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = (h * w) as f64;
        let xs = self.data(a);
        let mut data = vec![0.0; b * c];
        for (bc, slot) in data.iter_mut().enumerate() {
            *slot = xs[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let t = Tensor::new(&[b, c], data)?;
        Ok(self.push_op(t, Op::GlobalAvgPool { a }, &[a]))
    }

    /// Partition (B,C,H,W) into non-overlapping K x K windows, zero-padding
    /// bottom/right; result is (B*P, K*K, C) row-major tokens.
    pub fn window_partition(&mut self, x: TensorId, k: usize) -> Result<(TensorId, WindowGeometry)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "window partition expects (b,c,h,w), got {}",
                shape_str(&shape)
            )));
        }
        if k == 0 {
            return Err(Error::Config(format!("window size must be >= 1, got {k}")));
        }
        let geom = WindowGeometry::new(shape[0], shape[1], shape[2], shape[3], k);
        let data = kernels::window_partition(self.data(x), &geom, 0.0);
        let p = geom.windows_per_item();
        let t = Tensor::new(&[shape[0] * p, k * k, shape[1]], data)?;
        let id = self.push_op(t, Op::WindowPartition { x, geom: geom.clone() }, &[x]);
        Ok((id, geom))
    }

    /// Inverse of `window_partition`: padding cropped away.
    pub fn window_merge(&mut self, tokens: TensorId, geom: &WindowGeometry) -> Result<TensorId> {
        let shape = self.shape(tokens).to_vec();
        let p = geom.windows_per_item();
        let expect = [geom.batch * p, geom.k * geom.k, geom.channels];
        if shape != expect {
            return Err(Error::Internal(format!(
                "window merge metadata expects tokens {}, got {}",
                shape_str(&expect),
                shape_str(&shape)
            )));
        }
        let data = kernels::window_merge(self.data(tokens), geom);
        let t = Tensor::new(&[geom.batch, geom.channels, geom.h, geom.w], data)?;
        Ok(self.push_op(t, Op::WindowMerge { tokens, geom: geom.clone() }, &[tokens]))
    }

    /// Concatenate (B,Ci,H,W) maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::Dimension(format!(
                "concat expects (b,c,h,w), got {}",
                shape_str(&first)
            )));
        }
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut ctotal = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::Dimension(format!(
                    "concat operands disagree: {} vs {}",
                    shape_str(&first),
                    shape_str(s)
                )));
            }
            ctotal += s[1];
        }
        let mut data = vec![0.0; b * ctotal * h * w];
        let hw = h * w;
        for bi in 0..b {
            let mut coff = 0;
            for &p in parts {
                let c = self.shape(p)[1];
                let src = &self.data(p)[bi * c * hw..(bi + 1) * c * hw];
                data[(bi * ctotal + coff) * hw..(bi * ctotal + coff + c) * hw].copy_from_slice(src);
                coff += c;
            }
        }
        let t = Tensor::new(&[b, ctotal, h, w], data)?;
        Ok(self.push_op(t, Op::ConcatChannels { parts: parts.to_vec() }, parts))
    }

    /// Expand a per-head (H, 2K-1, 2K-1) relative-offset table into the
    /// (H, K*K, K*K) bias matrix: entry (i,j) reads the table at the 2-d
    /// offset between window positions i and j.
    pub fn rel_bias_expand(&mut self, table: TensorId, k: usize) -> Result<TensorId> {
        let s = self.shape(table).to_vec();
        let span = 2 * k - 1;
        if s.len() != 3 || s[1] != span || s[2] != span {
            return Err(Error::Dimension(format!(
                "relative bias table must be (heads,{span},{span}) for K={k}, got {}",
                shape_str(&s)
            )));
        }
        let heads = s[0];
        let kk = k * k;
        let src = self.data(table);
        let mut data = vec![0.0; heads * kk * kk];
        for h in 0..heads {
            for i in 0..kk {
                for j in 0..kk {
                    data[(h * kk + i) * kk + j] = src[h * span * span + rel_index(i, j, k)];
                }
            }
        }
        let t = Tensor::new(&[heads, kk, kk], data)?;
        Ok(self.push_op(t, Op::RelBiasExpand { table, k }, &[table]))
    }

    // ── reductions and losses ────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let t = Tensor::scalar(s);
        self.push_op(t, Op::SumAll { a }, &[a])
    }

    /// Mean cross entropy of (B,C) logits against class indices.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy expects (batch,classes) logits with one target per row, got {} and {} targets",
                shape_str(&s),
                targets.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        for &t in targets {
            if t >= c {
                return Err(Error::Config(format!("target class {t} out of range 0..{c}")));
            }
        }
        let xs = self.data(logits);
        let mut loss = 0.0;
        for (bi, &tgt) in targets.iter().enumerate() {
            let row = &xs[bi * c..(bi + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mathx::ln(row.iter().map(|&v| mathx::exp(v - max)).sum::<f64>()) + max;
            loss -= row[tgt] - lse;
        }
        loss /= b as f64;
        let t = Tensor::scalar(loss);
        Ok(self.push_op(t, Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Mean squared error against a fixed target.
    pub fn mse_loss(&mut self, pred: TensorId, target: &[f64]) -> Result<TensorId> {
        if self.data(pred).len() != target.len() {
            return Err(Error::Dimension(format!(
                "mse target has {} values, prediction {}",
                target.len(),
                self.data(pred).len()
            )));
        }
        let n = target.len() as f64;
        let loss = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let t = Tensor::scalar(loss);
        Ok(self.push_op(t, Op::MseLoss { pred, target: target.to_vec() }, &[pred]))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node, seeding with 1.
    pub fn backward(&mut self, id: TensorId) -> Result<()> {
        if !self.nodes[id].tensor.is_scalar() {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got {}",
                shape_str(self.shape(id))
            )));
        }
        self.backward_seeded(id, &[1.0])
    }

    /// Reverse sweep from `id` with an explicit output gradient.
    pub fn backward_seeded(&mut self, id: TensorId, seed: &[f64]) -> Result<()> {
        if seed.len() != self.data(id).len() {
            return Err(Error::Dimension(format!(
                "seed has {} values for node of {}",
                seed.len(),
                self.data(id).len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[id] = Some(seed.to_vec());

        for i in (0..=id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i].tensor;
                    if node.requires_grad {
                        node.grad = Some(g);
                    }
                }
                Op::Add { a, b } => {
                    let os = self.shape(i).to_vec();
                    let da = kernels::reduce_grad_to_shape(&g, &os, &self.shape(a).to_vec());
                    let db = kernels::reduce_grad_to_shape(&g, &os, &self.shape(b).to_vec());
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Mul { a, b } => {
                    let os = self.shape(i).to_vec();
                    let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                    let ga = kernels::broadcast_zip(&g, &os, self.data(b), &sb, &os, |x, y| x * y);
                    let gb = kernels::broadcast_zip(&g, &os, self.data(a), &sa, &os, |x, y| x * y);
                    accumulate(&mut grads, a, kernels::reduce_grad_to_shape(&ga, &os, &sa));
                    accumulate(&mut grads, b, kernels::reduce_grad_to_shape(&gb, &os, &sb));
                }
                Op::MulScalar { a, c } => {
                    accumulate(&mut grads, a, g.iter().map(|v| v * c).collect());
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    // da = g * b^T, db = a^T * g
                    let da = kernels::matmul_nt(&g, self.data(b), m, n, k);
                    let db = kernels::matmul_tn(self.data(a), &g, k, m, n);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Bmm { a, b, transpose_b } => {
                    let (batch, m, k) = {
                        let s = self.shape(a);
                        (s[0], s[1], s[2])
                    };
                    let n = self.shape(i)[2];
                    let mut da = Vec::with_capacity(batch * m * k);
                    let mut db = vec![0.0; self.data(b).len()];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &self.data(a)[bi * m * k..(bi + 1) * m * k];
                        if transpose_b {
                            // out = a * b^T with b (n,k): da = g * b; db = g^T * a
                            let bb = &self.data(b)[bi * n * k..(bi + 1) * n * k];
                            da.extend_from_slice(&kernels::matmul(gb, bb, m, n, k));
                            let dbb = kernels::matmul_tn(gb, ab, n, m, k);
                            for (slot, v) in db[bi * n * k..(bi + 1) * n * k].iter_mut().zip(dbb) {
                                *slot += v;
                            }
                        } else {
                            let bb = &self.data(b)[bi * k * n..(bi + 1) * k * n];
                            da.extend_from_slice(&kernels::matmul_nt(gb, bb, m, n, k));
                            let dbb = kernels::matmul_tn(ab, gb, k, m, n);
                            for (slot, v) in db[bi * k * n..(bi + 1) * k * n].iter_mut().zip(dbb) {
                                *slot += v;
                            }
                        }
                    }
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Reshape { a } => {
                    accumulate(&mut grads, a, g);
                }
                Op::Permute { a, perm } => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (new_axis, &old_axis) in perm.iter().enumerate() {
                        inverse[old_axis] = new_axis;
                    }
                    let out_shape = self.shape(i).to_vec();
                    accumulate(&mut grads, a, permute_data(&g, &out_shape, &inverse));
                }
                Op::Conv2d { x, w, stride, pad, groups } => {
                    let xs = {
                        let s = self.shape(x);
                        (s[0], s[1], s[2], s[3])
                    };
                    let ws = {
                        let s = self.shape(w);
                        (s[0], s[1], s[2], s[3])
                    };
                    let dx = kernels::conv2d_grad_input(&g, xs, self.data(w), ws, stride, pad, groups);
                    let dw = kernels::conv2d_grad_weight(&g, self.data(x), xs, ws, stride, pad, groups);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                }
                Op::Relu { a } => {
                    let dg = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, dg);
                }
                Op::Gelu { a } => {
                    let dg = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(gv, &x)| gv * mathx::gelu_grad(x))
                        .collect();
                    accumulate(&mut grads, a, dg);
                }
                Op::SoftmaxLastDim { a } => {
                    let d = *self.shape(i).last().unwrap();
                    let s = self.data(i);
                    let mut dg = vec![0.0; g.len()];
                    for r in 0..g.len() / d {
                        let srow = &s[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for c in 0..d {
                            dg[r * d + c] = srow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, a, dg);
                }
                Op::LayerNormChan { x, gamma, beta } => {
                    let (dx, dgamma, dbeta) = layer_norm_backward(
                        &g,
                        self.data(x),
                        self.data(gamma),
                        self.shape(x),
                    );
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dgamma);
                    accumulate(&mut grads, beta, dbeta);
                }
                Op::BatchNormInf { x, gamma, beta, mean, var } => {
                    let shape = self.shape(x).to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let hw = h * w;
                    let xs = self.data(x);
                    let gs = self.data(gamma);
                    let mut dx = vec![0.0; xs.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let inv = 1.0 / mathx::sqrt(var[ci] + BN_EPS);
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                let gv = g[base + p];
                                dx[base + p] = gv * gs[ci] * inv;
                                dgamma[ci] += gv * (xs[base + p] - mean[ci]) * inv;
                                dbeta[ci] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dgamma);
                    accumulate(&mut grads, beta, dbeta);
                }
                Op::UpsampleNearest { a, factor } => {
                    let s = self.shape(a).to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dg = vec![0.0; b * c * h * w];
                    for bc in 0..b * c {
                        for y in 0..oh {
                            for x_ in 0..ow {
                                dg[(bc * h + y / factor) * w + x_ / factor] +=
                                    g[(bc * oh + y) * ow + x_];
                            }
                        }
                    }
                    accumulate(&mut grads, a, dg);
                }
                Op::CropSpatial { a } => {
                    let os = self.shape(i).to_vec();
                    let is = self.shape(a).to_vec();
                    let (b, c, oh, ow) = (os[0], os[1], os[2], os[3]);
                    let (ih, iw) = (is[2], is[3]);
                    let mut dg = vec![0.0; self.data(a).len()];
                    for bc in 0..b * c {
                        for y in 0..oh {
                            dg[(bc * ih + y) * iw..(bc * ih + y) * iw + ow]
                                .copy_from_slice(&g[(bc * oh + y) * ow..(bc * oh + y + 1) * ow]);
                        }
                    }
                    accumulate(&mut grads, a, dg);
                }
                Op::GlobalAvgPool { a } => {
                    let s = self.shape(a).to_vec();
                    let hw = s[2] * s[3];
                    let mut dg = vec![0.0; self.data(a).len()];
                    for (bc, gv) in g.iter().enumerate() {
                        let share = gv / hw as f64;
                        for slot in dg[bc * hw..(bc + 1) * hw].iter_mut() {
                            *slot = share;
                        }
                    }
                    accumulate(&mut grads, a, dg);
                }
                Op::WindowPartition { x, geom } => {
                    // Each valid map position appears in exactly one window;
                    // padded token gradients are dropped with the padding.
                    accumulate(&mut grads, x, kernels::window_merge(&g, &geom));
                }
                Op::WindowMerge { tokens, geom } => {
                    accumulate(&mut grads, tokens, kernels::window_partition(&g, &geom, 0.0));
                }
                Op::ConcatChannels { parts } => {
                    let os = self.shape(i).to_vec();
                    let (b, ctotal, h, w) = (os[0], os[1], os[2], os[3]);
                    let hw = h * w;
                    let mut coff = 0;
                    for &p in &parts {
                        let c = self.shape(p)[1];
                        let mut dp = vec![0.0; b * c * hw];
                        for bi in 0..b {
                            dp[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(
                                &g[(bi * ctotal + coff) * hw..(bi * ctotal + coff + c) * hw],
                            );
                        }
                        accumulate(&mut grads, p, dp);
                        coff += c;
                    }
                }
                Op::RelBiasExpand { table, k } => {
                    let span = 2 * k - 1;
                    let heads = self.shape(table)[0];
                    let kk = k * k;
                    let mut dt = vec![0.0; heads * span * span];
                    for h in 0..heads {
                        for ii in 0..kk {
                            for jj in 0..kk {
                                dt[h * span * span + rel_index(ii, jj, k)] +=
                                    g[(h * kk + ii) * kk + jj];
                            }
                        }
                    }
                    accumulate(&mut grads, table, dt);
                }
                Op::SumAll { a } => {
                    accumulate(&mut grads, a, vec![g[0]; self.data(a).len()]);
                }
                Op::CrossEntropy { logits, targets } => {
                    let s = self.shape(logits).to_vec();
                    let (b, c) = (s[0], s[1]);
                    let xs = self.data(logits);
                    let mut dl = vec![0.0; b * c];
                    for (bi, &tgt) in targets.iter().enumerate() {
                        let row = &xs[bi * c..(bi + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| mathx::exp(v - max)).collect();
                        let sum: f64 = exps.iter().sum();
                        for ci in 0..c {
                            let p = exps[ci] / sum;
                            let onehot = if ci == tgt { 1.0 } else { 0.0 };
                            dl[bi * c + ci] = g[0] * (p - onehot) / b as f64;
                        }
                    }
                    accumulate(&mut grads, logits, dl);
                }
                Op::MseLoss { pred, target } => {
                    let n = target.len() as f64;
                    let dg = self
                        .data(pred)
                        .iter()
                        .zip(&target)
                        .map(|(p, t)| g[0] * 2.0 * (p - t) / n)
                        .collect();
                    accumulate(&mut grads, pred, dg);
                }
            }
        }
        Ok(())
    }
}

/// Offset of the (i, j) window-position pair inside a (2K-1)^2 table:
/// row `ri - rj + K - 1`, column `ci - cj + K - 1`.
fn rel_index(i: usize, j: usize, k: usize) -> usize {
    let (ri, ci) = (i / k, i % k);
    let (rj, cj) = (j / k, j % k);
    let dr = ri + k - 1 - rj;
    let dc = ci + k - 1 - cj;
    dr * (2 * k - 1) + dc
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, contribution: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (slot, v) in existing.iter_mut().zip(contribution) {
                *slot += v;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let ndim = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; ndim];
    for (flat, &v) in data.iter().enumerate() {
        let mut rem = flat;
        for d in 0..ndim {
            coords[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        let mut of = 0;
        for d in 0..ndim {
            of += coords[perm[d]] * out_strides[d];
        }
        out[of] = v;
    }
    out
}

fn layer_norm_backward(
    g: &[f64],
    xs: &[f64],
    gs: &[f64],
    shape: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let cf = c as f64;
    let mut dx = vec![0.0; xs.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for bi in 0..b {
        for p in 0..hw {
            let mut mean = 0.0;
            for ci in 0..c {
                mean += xs[(bi * c + ci) * hw + p];
            }
            mean /= cf;
            let mut var = 0.0;
            for ci in 0..c {
                let d = xs[(bi * c + ci) * hw + p] - mean;
                var += d * d;
            }
            var /= cf;
            let inv = 1.0 / mathx::sqrt(var + LN_EPS);
            for ci in 0..c {
                xhat[ci] = (xs[(bi * c + ci) * hw + p] - mean) * inv;
                let gv = g[(bi * c + ci) * hw + p];
                dgamma[ci] += gv * xhat[ci];
                dbeta[ci] += gv;
                dxhat[ci] = gv * gs[ci];
            }
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            for ci in 0..c {
                dx[(bi * c + ci) * hw + p] =
                    inv / cf * (cf * dxhat[ci] - sum_dxhat - xhat[ci] * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}
