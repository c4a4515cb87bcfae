//! The transformer block: pre-norm local-window self-attention plus the
//! FFN-DW, each wrapped in a residual from the un-normalized input.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::Result;
use crate::ffn::{ffn_dw_forward, FfnIds, FfnParams};
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::window::{merge_windows, partition_windows, window_mhsa_core, AttentionIds, AttentionParams};

/// Weights of one block: two layer norms, the attention, the FFN.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub attn: AttentionParams,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn init(channels: usize, heads: usize, window: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        Ok(BlockParams {
            norm1_gamma: Tensor::full(&[channels], 1.0),
            norm1_beta: Tensor::zeros(&[channels]),
            attn: AttentionParams::init(channels, heads, window, rng)?,
            norm2_gamma: Tensor::full(&[channels], 1.0),
            norm2_beta: Tensor::zeros(&[channels]),
            ffn: FfnParams::init(channels, ratio, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.attn.channels()
    }

    pub fn bind(&self, tape: &mut Tape) -> BlockIds {
        BlockIds {
            norm1_gamma: tape.leaf(self.norm1_gamma.clone()),
            norm1_beta: tape.leaf(self.norm1_beta.clone()),
            attn: self.attn.bind(tape),
            norm2_gamma: tape.leaf(self.norm2_gamma.clone()),
            norm2_beta: tape.leaf(self.norm2_beta.clone()),
            ffn: self.ffn.bind(tape),
        }
    }
}

/// Tape handles of bound block weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub norm1_gamma: TensorId,
    pub norm1_beta: TensorId,
    pub attn: AttentionIds,
    pub norm2_gamma: TensorId,
    pub norm2_beta: TensorId,
    pub ffn: FfnIds,
}

/// u = x + merge(attention(partition(norm1(x)))); y = u + ffn(norm2(u)).
///
/// The attention residual comes from the pre-norm input, so the inner
/// attention runs without its own skip.
pub fn block_forward(
    tape: &mut Tape,
    x: TensorId,
    params: &BlockIds,
    enable_dw: bool,
) -> Result<TensorId> {
    let normed = tape.layer_norm_chan(x, params.norm1_gamma, params.norm1_beta)?;
    let windows = partition_windows(tape, normed, params.attn.window)?;
    let attended = window_mhsa_core(tape, &windows, &params.attn)?;
    let merged = merge_windows(tape, &attended)?;
    let u = tape.add(merged, x)?;

    let normed2 = tape.layer_norm_chan(u, params.norm2_gamma, params.norm2_beta)?;
    let f = ffn_dw_forward(tape, normed2, &params.ffn, enable_dw)?;
    tape.add(u, f)
}

// ── influence oracle ─────────────────────────────────────────────────

/// Structural reach of one block: attention spreads a pixel to its whole
/// window, the depth-wise conv one more Chebyshev step. Used by the
/// Jacobian-support tests as the independent prediction.
pub fn block_reach(
    positions: &BTreeSet<(usize, usize)>,
    h: usize,
    w: usize,
    k: usize,
    enable_dw: bool,
) -> BTreeSet<(usize, usize)> {
    let mut windowed = BTreeSet::new();
    for &(y, x) in positions {
        let (wy, wx) = (y / k, x / k);
        for ty in 0..k {
            for tx in 0..k {
                let (py, px) = (wy * k + ty, wx * k + tx);
                if py < h && px < w {
                    windowed.insert((py, px));
                }
            }
        }
    }
    if !enable_dw {
        return windowed;
    }
    let mut out = BTreeSet::new();
    for &(y, x) in &windowed {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out.insert((ny as usize, nx as usize));
                }
            }
        }
    }
    out
}
