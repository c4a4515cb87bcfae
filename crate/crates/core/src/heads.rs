//! Task heads over the multi-resolution stream set.
//!
//! - classification: per-stream bottlenecks onto a 128/256/512/1024 channel
//!   ladder, strided fuse-down to the lowest resolution, a 2048-channel 1x1,
//!   global average pooling, linear classifier;
//! - pose: 1x1 heatmap regression on the highest-resolution stream;
//! - segmentation: upsample-and-concatenate all streams, squeeze to 512,
//!   classify per pixel, upsample to the requested output size.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{add_channel_bias, BnParams, BottleneckParams, ConvBn, ForwardCtx};
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Channel ladder of the classification head: bottleneck s emits
/// `4 * HEAD_WIDTH_BASE << s` channels.
pub const HEAD_WIDTH_BASE: usize = 32;
/// Channels of the final 1x1 before pooling.
pub const HEAD_FINAL_CHANNELS: usize = 2048;
/// Intermediate width of the segmentation head.
pub const SEG_MID_CHANNELS: usize = 512;

#[derive(Clone, Debug)]
pub enum HeadParams {
    Classification {
        /// One depth-wise bottleneck per stream onto the fixed ladder.
        incre: Vec<BottleneckParams>,
        /// Strided fusers: depth-wise 3x3 s2 + 1x1 onto the next rung.
        down: Vec<(ConvBn, ConvBn)>,
        final_conv: ConvBn,
        classifier_w: Tensor,
        classifier_b: Tensor,
    },
    Pose {
        weight: Tensor,
        bias: Tensor,
    },
    Segmentation {
        squeeze: ConvBn,
        classify_w: Tensor,
        classify_b: Tensor,
    },
}

impl HeadParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let channels = config.stream_channels();
        match config.head {
            HeadKind::Classification => {
                let incre = channels
                    .iter()
                    .enumerate()
                    .map(|(s, &c)| BottleneckParams::init(c, HEAD_WIDTH_BASE << s, true, rng))
                    .collect::<Vec<_>>();
                let down = (0..channels.len() - 1)
                    .map(|s| {
                        let cin = 4 * (HEAD_WIDTH_BASE << s);
                        let cout = 2 * cin;
                        (
                            ConvBn::init(cin, cin, 3, 2, cin, rng),
                            ConvBn::init(cin, cout, 1, 1, 1, rng),
                        )
                    })
                    .collect::<Vec<_>>();
                let last = 4 * (HEAD_WIDTH_BASE << (channels.len() - 1));
                Ok(HeadParams::Classification {
                    incre,
                    down,
                    final_conv: ConvBn::init(last, HEAD_FINAL_CHANNELS, 1, 1, 1, rng),
                    classifier_w: Tensor::from_trunc_normal(
                        &[HEAD_FINAL_CHANNELS, config.num_classes],
                        0.02,
                        rng,
                    ),
                    classifier_b: Tensor::zeros(&[config.num_classes]),
                })
            }
            HeadKind::Pose => {
                let fan_out = config.num_keypoints as f64;
                let std = crate::mathx::sqrt(2.0 / fan_out);
                Ok(HeadParams::Pose {
                    weight: Tensor::from_normal(&[config.num_keypoints, channels[0], 1, 1], std, rng),
                    bias: Tensor::zeros(&[config.num_keypoints]),
                })
            }
            HeadKind::Segmentation => {
                let total: usize = channels.iter().sum();
                let std = crate::mathx::sqrt(2.0 / config.num_classes as f64);
                Ok(HeadParams::Segmentation {
                    squeeze: ConvBn::init(total, SEG_MID_CHANNELS, 1, 1, 1, rng),
                    classify_w: Tensor::from_normal(
                        &[config.num_classes, SEG_MID_CHANNELS, 1, 1],
                        std,
                        rng,
                    ),
                    classify_b: Tensor::zeros(&[config.num_classes]),
                })
            }
        }
    }

    /// Run the head. `out_size` is only consulted by the segmentation head.
    pub fn apply(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        streams: &[TensorId],
        out_size: Option<(usize, usize)>,
    ) -> Result<TensorId> {
        match self {
            HeadParams::Classification { incre, down, final_conv, classifier_w, classifier_b } => {
                if streams.len() != incre.len() {
                    return Err(Error::Config(format!(
                        "classification head built for {} streams, got {}",
                        incre.len(),
                        streams.len()
                    )));
                }
                let mut y = incre[0].apply(tape, ctx, "head.incre0", streams[0])?;
                for (s, (dw, pw)) in down.iter().enumerate() {
                    let fused = dw.apply(tape, ctx, &format!("head.down{s}.dw"), y, false)?;
                    let fused = pw.apply(tape, ctx, &format!("head.down{s}.pw"), fused, true)?;
                    let inc =
                        incre[s + 1].apply(tape, ctx, &format!("head.incre{}", s + 1), streams[s + 1])?;
                    y = tape.add(inc, fused)?;
                }
                let y = final_conv.apply(tape, ctx, "head.final", y, true)?;
                let pooled = tape.global_avg_pool(y)?;
                let w = ctx.bind(tape, "head.classifier.weight".into(), classifier_w);
                let b = ctx.bind(tape, "head.classifier.bias".into(), classifier_b);
                let logits = tape.matmul(pooled, w)?;
                tape.add(logits, b)
            }
            HeadParams::Pose { weight, bias } => {
                let w = ctx.bind(tape, "head.weight".into(), weight);
                let b = ctx.bind(tape, "head.bias".into(), bias);
                let maps = tape.conv2d(streams[0], w, 1, 0, 1)?;
                add_channel_bias(tape, maps, b)
            }
            HeadParams::Segmentation { squeeze, classify_w, classify_b } => {
                let base = tape.shape(streams[0]).to_vec();
                let mut parts = Vec::with_capacity(streams.len());
                parts.push(streams[0]);
                for (s, &id) in streams.iter().enumerate().skip(1) {
                    let up = tape.upsample_nearest(id, 1 << s)?;
                    parts.push(tape.crop_spatial(up, base[2], base[3])?);
                }
                let cat = tape.concat_channels(&parts)?;
                let mid = squeeze.apply(tape, ctx, "head.squeeze", cat, true)?;
                let w = ctx.bind(tape, "head.classify.weight".into(), classify_w);
                let b = ctx.bind(tape, "head.classify.bias".into(), classify_b);
                let logits = tape.conv2d(mid, w, 1, 0, 1)?;
                let logits = add_channel_bias(tape, logits, b)?;
                match out_size {
                    None => Ok(logits),
                    Some((oh, ow)) => {
                        let (h, w_) = (base[2], base[3]);
                        if oh % h != 0 || ow % w_ != 0 || oh / h != ow / w_ || oh / h == 0 {
                            return Err(Error::Config(format!(
                                "segmentation out size {oh}x{ow} is not an integer upsample of {h}x{w_}"
                            )));
                        }
                        tape.upsample_nearest(logits, oh / h)
                    }
                }
            }
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            HeadParams::Classification { incre, down, final_conv, classifier_w, classifier_b } => {
                for (s, b) in incre.iter().enumerate() {
                    b.visit(&format!("head.incre{s}"), f);
                }
                for (s, (dw, pw)) in down.iter().enumerate() {
                    dw.visit(&format!("head.down{s}.dw"), f);
                    pw.visit(&format!("head.down{s}.pw"), f);
                }
                final_conv.visit("head.final", f);
                f("head.classifier.weight", classifier_w);
                f("head.classifier.bias", classifier_b);
            }
            HeadParams::Pose { weight, bias } => {
                f("head.weight", weight);
                f("head.bias", bias);
            }
            HeadParams::Segmentation { squeeze, classify_w, classify_b } => {
                squeeze.visit("head.squeeze", f);
                f("head.classify.weight", classify_w);
                f("head.classify.bias", classify_b);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            HeadParams::Classification { incre, down, final_conv, classifier_w, classifier_b } => {
                for (s, b) in incre.iter_mut().enumerate() {
                    b.visit_mut(&format!("head.incre{s}"), f);
                }
                for (s, (dw, pw)) in down.iter_mut().enumerate() {
                    dw.visit_mut(&format!("head.down{s}.dw"), f);
                    pw.visit_mut(&format!("head.down{s}.pw"), f);
                }
                final_conv.visit_mut("head.final", f);
                f("head.classifier.weight", classifier_w);
                f("head.classifier.bias", classifier_b);
            }
            HeadParams::Pose { weight, bias } => {
                f("head.weight", weight);
                f("head.bias", bias);
            }
            HeadParams::Segmentation { squeeze, classify_w, classify_b } => {
                squeeze.visit_mut("head.squeeze", f);
                f("head.classify.weight", classify_w);
                f("head.classify.bias", classify_b);
            }
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BnParams)) {
        match self {
            HeadParams::Classification { incre, down, final_conv, .. } => {
                for (s, b) in incre.iter_mut().enumerate() {
                    b.visit_bn_mut(&format!("head.incre{s}"), f);
                }
                for (s, (dw, pw)) in down.iter_mut().enumerate() {
                    dw.visit_bn_mut(&format!("head.down{s}.dw"), f);
                    pw.visit_bn_mut(&format!("head.down{s}.pw"), f);
                }
                final_conv.visit_bn_mut("head.final", f);
            }
            HeadParams::Pose { .. } => {}
            HeadParams::Segmentation { squeeze, .. } => {
                squeeze.visit_bn_mut("head.squeeze", f);
            }
        }
    }
}
