//! Local-window self-attention.
//!
//! Feature maps are cut into non-overlapping K x K windows; multi-head
//! self-attention with a learned relative-position bias runs inside each
//! window independently, and the windows are merged back. Maps whose extents
//! are not multiples of K are zero-padded bottom/right; padded keys are
//! masked out of the softmax so valid outputs never depend on the padding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::WindowGeometry;
use crate::mathx;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Large negative logit used to mask padded keys before the softmax.
pub const MASK_NEG: f64 = -1e9;

// ── window set ───────────────────────────────────────────────────────

/// A partition of a feature map into window tokens living on a tape.
///
/// `tokens` has shape (batch * P, K*K, D) with windows enumerated row-major
/// and each window flattened row-major. `geom` remembers the original and
/// padded extents needed to merge back.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub tokens: TensorId,
    pub geom: WindowGeometry,
}

impl WindowSet {
    /// Windows per batch item.
    pub fn windows_per_item(&self) -> usize {
        self.geom.windows_per_item()
    }

    /// Per-window validity of each of the K*K token slots; identical across
    /// batch items since it only depends on the geometry.
    pub fn valid_mask(&self) -> Vec<Vec<bool>> {
        let p = self.geom.windows_per_item();
        let kk = self.geom.k * self.geom.k;
        (0..p)
            .map(|pi| (0..kk).map(|t| self.geom.token_valid(pi, t)).collect())
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.geom.channels
    }
}

/// Partition a (B,C,H,W) map into a [`WindowSet`] with window size `k`.
pub fn partition_windows(tape: &mut Tape, x: TensorId, k: usize) -> Result<WindowSet> {
    let (tokens, geom) = tape.window_partition(x, k)?;
    Ok(WindowSet { tokens, geom })
}

/// Merge a [`WindowSet`] back into its (B,C,H,W) map, cropping padding.
pub fn merge_windows(tape: &mut Tape, set: &WindowSet) -> Result<TensorId> {
    tape.window_merge(set.tokens, &set.geom)
}

// ── attention parameters ─────────────────────────────────────────────

/// Weights of one local-window multi-head self-attention.
///
/// The per-head projections W_q^h, W_k^h, W_v^h (each D x D/H) are stored
/// packed as D x D matrices whose column block h belongs to head h; `w_o` is
/// the shared D x D output projection. `rel_bias` holds one (2K-1) x (2K-1)
/// learned offset table per head.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub rel_bias: Tensor,
    pub heads: usize,
    pub window: usize,
}

impl AttentionParams {
    pub fn init(channels: usize, heads: usize, window: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        let span = 2 * window - 1;
        Ok(AttentionParams {
            w_q: Tensor::from_trunc_normal(&[channels, channels], 0.02, rng),
            w_k: Tensor::from_trunc_normal(&[channels, channels], 0.02, rng),
            w_v: Tensor::from_trunc_normal(&[channels, channels], 0.02, rng),
            w_o: Tensor::from_trunc_normal(&[channels, channels], 0.02, rng),
            rel_bias: Tensor::zeros(&[heads, span, span]),
            heads,
            window,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape[0]
    }

    /// The K^2 x K^2 bias matrix of one head: entry (i, j) reads the head's
    /// table at (row_i - row_j + K - 1, col_i - col_j + K - 1).
    pub fn bias_matrix(&self, head: usize) -> Tensor {
        let k = self.window;
        let span = 2 * k - 1;
        let kk = k * k;
        let table = &self.rel_bias.data[head * span * span..(head + 1) * span * span];
        let mut out = Tensor::zeros(&[kk, kk]);
        for i in 0..kk {
            for j in 0..kk {
                let (ri, ci) = (i / k, i % k);
                let (rj, cj) = (j / k, j % k);
                out.data[i * kk + j] = table[(ri + k - 1 - rj) * span + (ci + k - 1 - cj)];
            }
        }
        out
    }

    /// Insert the weights as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> AttentionIds {
        AttentionIds {
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            rel_bias: tape.leaf(self.rel_bias.clone()),
            heads: self.heads,
            window: self.window,
        }
    }
}

/// Tape handles of bound attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    pub rel_bias: TensorId,
    pub heads: usize,
    pub window: usize,
}

// ── attention forward ────────────────────────────────────────────────

/// Multi-head self-attention within each window, residual included:
/// X_p + Concat(head_1..head_H) W_o, padded rows zeroed afterwards.
pub fn window_mhsa(tape: &mut Tape, set: &WindowSet, params: &AttentionIds) -> Result<WindowSet> {
    let (out, _) = mhsa_inner(tape, set, params, true)?;
    Ok(WindowSet { tokens: out, geom: set.geom.clone() })
}

/// The attention update alone (no X_p residual); the transformer block adds
/// its own skip from the pre-norm input.
pub fn window_mhsa_core(tape: &mut Tape, set: &WindowSet, params: &AttentionIds) -> Result<WindowSet> {
    let (out, _) = mhsa_inner(tape, set, params, false)?;
    Ok(WindowSet { tokens: out, geom: set.geom.clone() })
}

/// As [`window_mhsa`], additionally exposing the post-softmax attention
/// weights of shape (B*P, H, K*K, K*K).
pub fn window_mhsa_with_probs(
    tape: &mut Tape,
    set: &WindowSet,
    params: &AttentionIds,
) -> Result<(WindowSet, TensorId)> {
    let (out, probs) = mhsa_inner(tape, set, params, true)?;
    Ok((WindowSet { tokens: out, geom: set.geom.clone() }, probs))
}

fn mhsa_inner(
    tape: &mut Tape,
    set: &WindowSet,
    params: &AttentionIds,
    residual: bool,
) -> Result<(TensorId, TensorId)> {
    let d = set.channels();
    if tape.shape(params.w_q) != [d, d] {
        return Err(Error::Config(format!(
            "attention weights are for {} channels, windows carry {d}",
            tape.shape(params.w_q)[0]
        )));
    }
    if params.heads == 0 || d % params.heads != 0 {
        return Err(Error::Config(format!(
            "channels {d} not divisible by heads {}",
            params.heads
        )));
    }
    if params.window != set.geom.k {
        return Err(Error::Config(format!(
            "attention bias is for K={}, windows use K={}",
            params.window, set.geom.k
        )));
    }
    let heads = params.heads;
    let dh = d / heads;
    let k = set.geom.k;
    let kk = k * k;
    let bp = set.geom.batch * set.geom.windows_per_item();

    let flat = tape.reshape(set.tokens, &[bp * kk, d])?;
    let mut project = |tape: &mut Tape, w: TensorId| -> Result<TensorId> {
        let p = tape.matmul(flat, w)?;
        let p = tape.reshape(p, &[bp, kk, heads, dh])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[bp * heads, kk, dh])
    };
    let q = project(tape, params.w_q)?;
    let kproj = project(tape, params.w_k)?;
    let v = project(tape, params.w_v)?;

    let logits = tape.bmm(q, kproj, true)?;
    let scaled = tape.mul_scalar(logits, 1.0 / mathx::sqrt(dh as f64));
    let scaled4 = tape.reshape(scaled, &[bp, heads, kk, kk])?;

    let bias = tape.rel_bias_expand(params.rel_bias, k)?;
    let bias4 = tape.reshape(bias, &[1, heads, kk, kk])?;
    let mut masked = tape.add(scaled4, bias4)?;

    let padded = set.geom.padded_h != set.geom.h || set.geom.padded_w != set.geom.w;
    if padded {
        // -1e9 on padded keys; every window keeps at least one valid key.
        let mask = key_mask(&set.geom);
        let mask_id = tape.constant(mask);
        masked = tape.add(masked, mask_id)?;
    }

    let probs4 = tape.softmax_lastdim(masked);
    let probs = tape.reshape(probs4, &[bp * heads, kk, kk])?;
    let ctx = tape.bmm(probs, v, false)?;
    let ctx = tape.reshape(ctx, &[bp, heads, kk, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[bp * kk, d])?;
    let out = tape.matmul(ctx, params.w_o)?;
    let mut out = tape.reshape(out, &[bp, kk, d])?;

    if residual {
        out = tape.add(out, set.tokens)?;
    }
    if padded {
        // Padded query rows hold attention over masked keys; zero them so
        // the window set stays clean.
        let zmask = query_zero_mask(&set.geom);
        let zid = tape.constant(zmask);
        out = tape.mul(out, zid)?;
    }
    Ok((out, probs4))
}

/// (B*P, 1, 1, K*K) additive mask: 0 on valid keys, MASK_NEG on padding.
fn key_mask(geom: &WindowGeometry) -> Tensor {
    let p = geom.windows_per_item();
    let kk = geom.k * geom.k;
    let mut data = vec![0.0; geom.batch * p * kk];
    for bi in 0..geom.batch {
        for pi in 0..p {
            for t in 0..kk {
                if !geom.token_valid(pi, t) {
                    data[(bi * p + pi) * kk + t] = MASK_NEG;
                }
            }
        }
    }
    Tensor::new(&[geom.batch * p, 1, 1, kk], data).expect("mask shape")
}

/// (B*P, K*K, 1) multiplicative mask: 1 on valid rows, 0 on padded rows.
fn query_zero_mask(geom: &WindowGeometry) -> Tensor {
    let p = geom.windows_per_item();
    let kk = geom.k * geom.k;
    let mut data = vec![0.0; geom.batch * p * kk];
    for bi in 0..geom.batch {
        for pi in 0..p {
            for t in 0..kk {
                if geom.token_valid(pi, t) {
                    data[(bi * p + pi) * kk + t] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[geom.batch * p, kk, 1], data).expect("mask shape")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Rng;

    fn map_tensor(b: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_normal(&[b, c, h, w], 1.0, rng)
    }

    // ── partition / merge ────────────────────────────────────────────

    #[test]
    fn partition_14x14_k7_exact_tiling() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = tape.leaf(map_tensor(1, 4, 14, 14, &mut rng));
        let set = partition_windows(&mut tape, x, 7).unwrap();
        assert_eq!(set.windows_per_item(), 4);
        assert_eq!(tape.shape(set.tokens), &[4, 49, 4]);
        assert!(set.valid_mask().iter().all(|w| w.iter().all(|&v| v)));
    }

    #[test]
    fn partition_8x6_k7_padding_and_mask() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let x = tape.leaf(map_tensor(1, 2, 8, 6, &mut rng));
        let set = partition_windows(&mut tape, x, 7).unwrap();
        assert_eq!(set.geom.padded_h, 14);
        assert_eq!(set.geom.padded_w, 7);
        assert_eq!(set.windows_per_item(), 2);
        let valid: usize = set
            .valid_mask()
            .iter()
            .map(|w| w.iter().filter(|&&v| v).count())
            .sum();
        assert_eq!(valid, 48);
    }

    #[test]
    fn partition_64x48_k7_pose_map() {
        // ceil(64/7) * ceil(48/7) = 10 * 7
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 64, 48]));
        let set = partition_windows(&mut tape, x, 7).unwrap();
        assert_eq!((set.geom.padded_h, set.geom.padded_w), (70, 49));
        assert_eq!(set.windows_per_item(), 70);
    }

    #[test]
    fn partition_rejects_k_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(matches!(
            partition_windows(&mut tape, x, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn merge_is_inverse_on_random_13x9() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::new();
        let x = tape.leaf(map_tensor(2, 3, 13, 9, &mut rng));
        let set = partition_windows(&mut tape, x, 4).unwrap();
        let back = merge_windows(&mut tape, &set).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
    }

    #[test]
    fn merge_zero_windows_gives_zero_map() {
        let mut tape = Tape::new();
        let geom = WindowGeometry::new(1, 2, 5, 5, 3);
        let p = geom.windows_per_item();
        let tokens = tape.leaf(Tensor::zeros(&[p, 9, 2]));
        let set = WindowSet { tokens, geom };
        let map = merge_windows(&mut tape, &set).unwrap();
        assert!(tape.data(map).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_rejects_corrupted_metadata() {
        let mut tape = Tape::new();
        let geom = WindowGeometry::new(1, 2, 5, 5, 3);
        let tokens = tape.leaf(Tensor::zeros(&[1, 9, 2])); // wrong window count
        let set = WindowSet { tokens, geom };
        assert!(matches!(
            merge_windows(&mut tape, &set),
            Err(Error::Internal(_))
        ));
    }

    // ── relative bias ────────────────────────────────────────────────

    #[test]
    fn bias_matrix_k1_is_single_entry() {
        let mut rng = Rng::new(4);
        let mut p = AttentionParams::init(4, 1, 1, &mut rng).unwrap();
        p.rel_bias.data[0] = 0.37;
        let m = p.bias_matrix(0);
        assert_eq!(m.shape, alloc::vec![1, 1]);
        assert_eq!(m.data, alloc::vec![0.37]);
    }

    #[test]
    fn bias_matrix_zero_table_is_zero() {
        let mut rng = Rng::new(5);
        let p = AttentionParams::init(4, 2, 3, &mut rng).unwrap();
        assert!(p.bias_matrix(1).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_matrix_k2_matches_pair_enumeration() {
        let mut rng = Rng::new(6);
        let mut p = AttentionParams::init(2, 1, 2, &mut rng).unwrap();
        for (i, v) in p.rel_bias.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let m = p.bias_matrix(0);
        let pos = [(0isize, 0isize), (0, 1), (1, 0), (1, 1)];
        for i in 0..4 {
            for j in 0..4 {
                let dr = pos[i].0 - pos[j].0 + 1;
                let dc = pos[i].1 - pos[j].1 + 1;
                assert_eq!(m.data[i * 4 + j], (dr * 3 + dc) as f64, "pair ({i},{j})");
            }
        }
        // query (0,0), key (1,1) reads table[0,0]
        assert_eq!(m.data[3], 0.0);
    }

    // ── attention forward ────────────────────────────────────────────

    #[test]
    fn k1_identity_weights_double_input() {
        // One-token windows: softmax over a single element is 1, so with
        // W_v = W_o = I the output is X + X.
        let mut rng = Rng::new(7);
        let d = 3;
        let mut params = AttentionParams::init(d, 1, 1, &mut rng).unwrap();
        params.w_v = Tensor::eye(d);
        params.w_o = Tensor::eye(d);
        let mut tape = Tape::new();
        let x = tape.leaf(map_tensor(1, d, 2, 2, &mut rng));
        let set = partition_windows(&mut tape, x, 1).unwrap();
        let ids = params.bind(&mut tape);
        let out = window_mhsa(&mut tape, &set, &ids).unwrap();
        let merged = merge_windows(&mut tape, &out).unwrap();
        for (y, x) in tape.data(merged).iter().zip(tape.data(x)) {
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_scaled_by_sqrt_head_dim() {
        // D=4, H=2: head dim 2, so logits are divided by sqrt(2). Verify by
        // comparing the attention weights against a hand computation.
        let mut rng = Rng::new(8);
        let d = 4;
        let params = {
            let mut p = AttentionParams::init(d, 2, 2, &mut rng).unwrap();
            p.w_q = Tensor::from_normal(&[d, d], 0.5, &mut rng);
            p.w_k = Tensor::from_normal(&[d, d], 0.5, &mut rng);
            p
        };
        let mut tape = Tape::new();
        let x = tape.leaf(map_tensor(1, d, 2, 2, &mut rng));
        let set = partition_windows(&mut tape, x, 2).unwrap();
        let ids = params.bind(&mut tape);
        let (_, probs) = window_mhsa_with_probs(&mut tape, &set, &ids).unwrap();

        // hand path for head 0, window 0
        let tokens = crate::kernels::window_partition(tape.data(x), &set.geom, 0.0);
        let dh = 2;
        let mut logits = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut qi = [0.0; 2];
                let mut kj = [0.0; 2];
                for c in 0..dh {
                    for e in 0..d {
                        qi[c] += tokens[i * d + e] * params.w_q.data[e * d + c];
                        kj[c] += tokens[j * d + e] * params.w_k.data[e * d + c];
                    }
                }
                logits[i][j] = (qi[0] * kj[0] + qi[1] * kj[1]) / mathx::sqrt(2.0);
            }
        }
        for i in 0..4 {
            let max = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits[i].iter().map(|&v| mathx::exp(v - max)).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..4 {
                let got = tape.data(probs)[i * 4 + j]; // window 0, head 0
                assert!((got - exps[j] / sum).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    /// Dense full-map attention with a block-diagonal window mask; the
    /// independent oracle for window_mhsa. Input must be K-divisible.
    pub(crate) fn dense_masked_attention(
        x: &Tensor, // (1, D, H, W)
        params: &AttentionParams,
        k: usize,
    ) -> Vec<f64> {
        let (d, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
        let n = h * w;
        let heads = params.heads;
        let dh = d / heads;
        // tokens in row-major map order
        let mut tok = vec![0.0; n * d];
        for c in 0..d {
            for p in 0..n {
                tok[p * d + c] = x.data[c * n + p];
            }
        }
        let win_of = |p: usize| -> (usize, usize) {
            let (y, x_) = (p / w, p % w);
            (y / k, x_ / k)
        };
        let inner = |p: usize| -> (usize, usize) {
            let (y, x_) = (p / w, p % w);
            (y % k, x_ % k)
        };
        let span = 2 * k - 1;
        let mut out = tok.clone(); // residual
        for head in 0..heads {
            let col = head * dh;
            let proj = |wt: &Tensor, p: usize, c: usize| -> f64 {
                let mut s = 0.0;
                for e in 0..d {
                    s += tok[p * d + e] * wt.data[e * d + col + c];
                }
                s
            };
            for qi in 0..n {
                // logits over all keys, masked outside the window
                let mut logits = vec![f64::NEG_INFINITY; n];
                for kj in 0..n {
                    if win_of(qi) != win_of(kj) {
                        continue;
                    }
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += proj(&params.w_q, qi, c) * proj(&params.w_k, kj, c);
                    }
                    let (ri, ci) = inner(qi);
                    let (rj, cj) = inner(kj);
                    let bias = params.rel_bias.data
                        [head * span * span + (ri + k - 1 - rj) * span + (ci + k - 1 - cj)];
                    logits[kj] = dot / mathx::sqrt(dh as f64) + bias;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut weights = vec![0.0; n];
                let mut sum = 0.0;
                for kj in 0..n {
                    if logits[kj] > f64::NEG_INFINITY {
                        weights[kj] = mathx::exp(logits[kj] - max);
                        sum += weights[kj];
                    }
                }
                // context for this head, then through the head's rows of W_o
                let mut ctx = vec![0.0; dh];
                for kj in 0..n {
                    if weights[kj] == 0.0 {
                        continue;
                    }
                    let a = weights[kj] / sum;
                    for c in 0..dh {
                        ctx[c] += a * proj(&params.w_v, kj, c);
                    }
                }
                for e in 0..d {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += ctx[c] * params.w_o.data[(col + c) * d + e];
                    }
                    out[qi * d + e] += s;
                }
            }
        }
        // back to (1, D, H, W)
        let mut map = vec![0.0; d * n];
        for c in 0..d {
            for p in 0..n {
                map[c * n + p] = out[p * d + c];
            }
        }
        map
    }

    pub(crate) fn random_attention_params(
        d: usize,
        heads: usize,
        k: usize,
        rng: &mut Rng,
    ) -> AttentionParams {
        let mut p = AttentionParams::init(d, heads, k, rng).unwrap();
        p.w_q = Tensor::from_normal(&[d, d], 0.5, rng);
        p.w_k = Tensor::from_normal(&[d, d], 0.5, rng);
        p.w_v = Tensor::from_normal(&[d, d], 0.5, rng);
        p.w_o = Tensor::from_normal(&[d, d], 0.5, rng);
        p.rel_bias = Tensor::from_normal(&[heads, 2 * k - 1, 2 * k - 1], 0.5, rng);
        p
    }

    #[test]
    fn equals_dense_masked_attention_on_4x4_k2() {
        let mut rng = Rng::new(9);
        let d = 4;
        let params = random_attention_params(d, 2, 2, &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(map_tensor(1, d, 4, 4, &mut rng));
        let set = partition_windows(&mut tape, x, 2).unwrap();
        let ids = params.bind(&mut tape);
        let out = window_mhsa(&mut tape, &set, &ids).unwrap();
        let merged = merge_windows(&mut tape, &out).unwrap();

        let dense = dense_masked_attention(tape.tensor(x), &params, 2);
        let max_diff = tape
            .data(merged)
            .iter()
            .zip(&dense)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "max diff {max_diff}");
    }

    #[test]
    fn valid_outputs_independent_of_pad_fill() {
        // Partition with zero fill vs random fill; masked attention must
        // produce identical valid outputs.
        let mut rng = Rng::new(10);
        let d = 4;
        let (h, w, k) = (5, 6, 4);
        let params = AttentionParams::init(d, 2, k, &mut rng).unwrap();
        let x = map_tensor(1, d, h, w, &mut rng);

        let run_with_fill = |fill: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let geom = WindowGeometry::new(1, d, h, w, k);
            let tokens = crate::kernels::window_partition(&x.data, &geom, fill);
            let p = geom.windows_per_item();
            let tid = tape.leaf(Tensor::new(&[p, k * k, d], tokens).unwrap());
            let set = WindowSet { tokens: tid, geom };
            let ids = params.bind(&mut tape);
            let out = window_mhsa(&mut tape, &set, &ids).unwrap();
            let merged = merge_windows(&mut tape, &out).unwrap();
            tape.data(merged).to_vec()
        };
        let zero = run_with_fill(0.0);
        let wild = run_with_fill(123.456);
        let max_diff = zero
            .iter()
            .zip(&wild)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "max diff {max_diff}");
    }

    #[test]
    fn attention_weights_sum_to_one_over_valid_keys() {
        let mut rng = Rng::new(11);
        let d = 4;
        let (h, w, k) = (5, 3, 2);
        let params = AttentionParams::init(d, 2, k, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(map_tensor(1, d, h, w, &mut rng));
        let set = partition_windows(&mut tape, x, k).unwrap();
        let ids = params.bind(&mut tape);
        let (_, probs) = window_mhsa_with_probs(&mut tape, &set, &ids).unwrap();
        let kk = k * k;
        let mask = set.valid_mask();
        let p = set.windows_per_item();
        for pi in 0..p {
            for head in 0..2 {
                for q in 0..kk {
                    let row = &tape.data(probs)[((pi * 2 + head) * kk + q) * kk..][..kk];
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() <= 1e-12);
                    let valid_sum: f64 = row
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| mask[pi][*j])
                        .map(|(_, v)| v)
                        .sum();
                    assert!((valid_sum - 1.0).abs() <= 1e-12, "padded keys got weight");
                }
            }
        }
    }

    #[test]
    fn translation_by_k_shifts_output() {
        let mut rng = Rng::new(12);
        let d = 2;
        let k = 4;
        let params = AttentionParams::init(d, 1, k, &mut rng).unwrap();
        let x = map_tensor(1, d, 8, 8, &mut rng);
        // wrap-shift the map down by K rows
        let mut shifted = x.clone();
        for c in 0..d {
            for y in 0..8 {
                for xx in 0..8 {
                    shifted.data[c * 64 + ((y + k) % 8) * 8 + xx] = x.data[c * 64 + y * 8 + xx];
                }
            }
        }
        let run = |inp: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let xid = tape.leaf(inp.clone());
            let set = partition_windows(&mut tape, xid, k).unwrap();
            let ids = params.bind(&mut tape);
            let out = window_mhsa(&mut tape, &set, &ids).unwrap();
            let merged = merge_windows(&mut tape, &out).unwrap();
            tape.data(merged).to_vec()
        };
        let base = run(&x);
        let moved = run(&shifted);
        for c in 0..d {
            for y in 0..8 {
                for xx in 0..8 {
                    assert_eq!(
                        moved[c * 64 + ((y + k) % 8) * 8 + xx],
                        base[c * 64 + y * 8 + xx]
                    );
                }
            }
        }
    }

    #[test]
    fn attention_param_gradcheck() {
        let mut rng = Rng::new(13);
        let d = 4;
        let k = 2;
        let mut params = AttentionParams::init(d, 2, k, &mut rng).unwrap();
        params.rel_bias = Tensor::from_normal(&[2, 3, 3], 0.1, &mut rng);
        let x = map_tensor(1, d, 4, 3, &mut rng); // non-divisible: mask in play

        let weights: Vec<f64> = {
            let mut r = Rng::new(0xabcd);
            (0..d * 12).map(|_| r.normal()).collect()
        };
        let eval = |p: &AttentionParams| -> f64 {
            let mut tape = Tape::inference();
            let xid = tape.leaf(x.clone());
            let set = partition_windows(&mut tape, xid, k).unwrap();
            let ids = p.bind(&mut tape);
            let out = window_mhsa(&mut tape, &set, &ids).unwrap();
            let merged = merge_windows(&mut tape, &out).unwrap();
            tape.data(merged).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let set = partition_windows(&mut tape, xid, k).unwrap();
        let mut tracked = params.clone();
        tracked.w_q.requires_grad = true;
        tracked.w_k.requires_grad = true;
        tracked.w_v.requires_grad = true;
        tracked.w_o.requires_grad = true;
        tracked.rel_bias.requires_grad = true;
        let ids = tracked.bind(&mut tape);
        let out = window_mhsa(&mut tape, &set, &ids).unwrap();
        let merged = merge_windows(&mut tape, &out).unwrap();
        let wid = tape.constant(Tensor::new(tape.shape(merged), weights.clone()).unwrap());
        let prod = tape.mul(merged, wid).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();

        let step = 1e-5;
        for (name, id, field_idx) in [
            ("w_q", ids.w_q, 0usize),
            ("w_k", ids.w_k, 1),
            ("w_v", ids.w_v, 2),
            ("w_o", ids.w_o, 3),
            ("rel_bias", ids.rel_bias, 4),
        ] {
            let analytic = tape.grad(id).unwrap().to_vec();
            fn field(p: &mut AttentionParams, idx: usize) -> &mut Tensor {
                match idx {
                    0 => &mut p.w_q,
                    1 => &mut p.w_k,
                    2 => &mut p.w_v,
                    3 => &mut p.w_o,
                    _ => &mut p.rel_bias,
                }
            }
            for vi in 0..analytic.len() {
                let mut plus = params.clone();
                field(&mut plus, field_idx).data[vi] += step;
                let mut minus = params.clone();
                field(&mut minus, field_idx).data[vi] -= step;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic[vi];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
                assert!(rel < 1e-5, "{name}[{vi}]: {a} vs {num} (rel {rel})");
            }
        }
    }
}
