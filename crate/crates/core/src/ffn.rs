//! Feed-forward network with a 3x3 depth-wise convolution between the two
//! point-wise MLPs.
//!
//! Both MLP layers are 1x1 convolutions over the 2-D map, so the spatial
//! layout survives the whole FFN; the depth-wise stage (padding 1, stride 1)
//! is what lets information cross window boundaries. It can be disabled to
//! get the plain two-layer FFN.

use alloc::format;

use crate::error::{Error, Result};
use crate::mathx;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Weights of one FFN-DW: point-wise expansion, depth-wise 3x3, point-wise
/// projection, all with biases.
#[derive(Clone, Debug)]
pub struct FfnParams {
    /// (R*D, D, 1, 1) expansion.
    pub w1: Tensor,
    pub b1: Tensor,
    /// (R*D, 1, 3, 3) depth-wise kernel, one filter per channel.
    pub dw: Tensor,
    pub dw_b: Tensor,
    /// (D, R*D, 1, 1) projection.
    pub w2: Tensor,
    pub b2: Tensor,
    pub ratio: usize,
    pub act: Activation,
}

impl FfnParams {
    pub fn init(channels: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config(format!("expansion ratio must be >= 1, got {ratio}")));
        }
        let hidden = ratio * channels;
        // point-wise weights follow the transformer default, the depth-wise
        // kernel the conv default (fan-out normal)
        let dw_std = mathx::sqrt(2.0 / 9.0);
        Ok(FfnParams {
            w1: Tensor::from_trunc_normal(&[hidden, channels, 1, 1], 0.02, rng),
            b1: Tensor::zeros(&[hidden]),
            dw: Tensor::from_normal(&[hidden, 1, 3, 3], dw_std, rng),
            dw_b: Tensor::zeros(&[hidden]),
            w2: Tensor::from_trunc_normal(&[channels, hidden, 1, 1], 0.02, rng),
            b2: Tensor::zeros(&[channels]),
            ratio,
            act: Activation::Gelu,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> FfnIds {
        FfnIds {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            dw: tape.leaf(self.dw.clone()),
            dw_b: tape.leaf(self.dw_b.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            act: self.act,
        }
    }
}

/// Tape handles of bound FFN weights.
#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub dw: TensorId,
    pub dw_b: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub act: Activation,
}

fn activate(tape: &mut Tape, x: TensorId, act: Activation) -> TensorId {
    match act {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
    }
}

fn add_channel_bias(tape: &mut Tape, x: TensorId, bias: TensorId) -> Result<TensorId> {
    let c = tape.shape(bias)[0];
    let b3 = tape.reshape(bias, &[c, 1, 1])?;
    tape.add(x, b3)
}

/// W2 . act(DW(act(W1 . x))); the depth-wise stage is skipped entirely when
/// `enable_dw` is false. The residual is the caller's business.
pub fn ffn_dw_forward(
    tape: &mut Tape,
    x: TensorId,
    params: &FfnIds,
    enable_dw: bool,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != tape.shape(params.w1)[1] {
        return Err(Error::Config(format!(
            "ffn expects {} channels, input is {:?}",
            tape.shape(params.w1)[1],
            shape
        )));
    }
    let hidden = tape.conv2d(x, params.w1, 1, 0, 1)?;
    let hidden = add_channel_bias(tape, hidden, params.b1)?;
    let mut hidden = activate(tape, hidden, params.act);
    if enable_dw {
        let groups = tape.shape(params.dw)[0];
        let dw = tape.conv2d(hidden, params.dw, 1, 1, groups)?;
        let dw = add_channel_bias(tape, dw, params.dw_b)?;
        hidden = activate(tape, dw, params.act);
    }
    let out = tape.conv2d(hidden, params.w2, 1, 0, 1)?;
    add_channel_bias(tape, out, params.b2)
}
