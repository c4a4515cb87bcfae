//! The full network: convolution stem, bottleneck first stage, transformer
//! stages that add one lower-resolution stream each, convolutional
//! multi-scale fusion after every module, and a task head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::block::{block_forward, BlockIds, BlockParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::layers::{BnParams, BottleneckParams, ConvBn, ForwardCtx};
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// How stream s of one fusion output is fed from stream r.
#[derive(Clone, Debug)]
pub enum FusePath {
    /// Same stream: passed through into the sum untouched.
    Identity,
    /// Lower-resolution source: 1x1 conv + BN, then nearest upsample.
    Up { conv: ConvBn, factor: usize },
    /// Higher-resolution source: a chain of stride-2 depth-wise separable
    /// steps (dw 3x3 + BN, 1x1 + BN), ReLU between steps but not after the
    /// last; the final step lands on the target channel count.
    Down { steps: Vec<(ConvBn, ConvBn)> },
}

/// All source->target paths of one fusion: `paths[target][source]`.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub paths: Vec<Vec<FusePath>>,
}

impl FusionParams {
    pub fn init(channels: &[usize], rng: &mut Rng) -> Self {
        let n = channels.len();
        let paths = (0..n)
            .map(|r| {
                (0..n)
                    .map(|s| {
                        if s == r {
                            FusePath::Identity
                        } else if s > r {
                            FusePath::Up {
                                conv: ConvBn::init(channels[s], channels[r], 1, 1, 1, rng),
                                factor: 1 << (s - r),
                            }
                        } else {
                            let steps = (0..r - s)
                                .map(|k| {
                                    let cout = if k == r - s - 1 { channels[r] } else { channels[s] };
                                    (
                                        ConvBn::init(channels[s], channels[s], 3, 2, channels[s], rng),
                                        ConvBn::init(channels[s], cout, 1, 1, 1, rng),
                                    )
                                })
                                .collect();
                            FusePath::Down { steps }
                        }
                    })
                    .collect()
            })
            .collect();
        FusionParams { paths }
    }
}

/// One multi-resolution module: per-stream block chains, then fusion
/// (absent while only one stream exists).
#[derive(Clone, Debug)]
pub struct ModuleParams {
    pub blocks: Vec<Vec<BlockParams>>,
    pub fusion: Option<FusionParams>,
}

/// One transformer stage: the entry transition plus its modules.
#[derive(Clone, Debug)]
pub struct StageParams {
    /// Per existing stream: a 3x3 conv when the channel count changes.
    pub adapt: Vec<Option<ConvBn>>,
    /// Creates the new lowest-resolution stream from the previous lowest.
    pub add_stream: ConvBn,
    pub modules: Vec<ModuleParams>,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub stem: (ConvBn, ConvBn),
    pub stage1: Vec<BottleneckParams>,
    pub stages: Vec<StageParams>,
    pub head: HeadParams,
}

impl ModelParams {
    /// Build and initialize every weight from the config's seed.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let sc = config.stem_channels;
        let stem = (
            ConvBn::init(3, sc, 3, 2, 1, &mut rng),
            ConvBn::init(sc, sc, 3, 2, 1, &mut rng),
        );

        let w1 = config.stage1.width;
        let n1 = config.stage1.modules * config.stage1.blocks;
        let mut stage1 = Vec::with_capacity(n1);
        let mut cin = sc;
        for _ in 0..n1 {
            let blk = BottleneckParams::init(cin, w1, false, &mut rng);
            cin = blk.out_channels();
            stage1.push(blk);
        }

        let mut stages = Vec::with_capacity(config.stages.len());
        let mut pre: Vec<usize> = vec![4 * w1];
        for (i, sc) in config.stages.iter().enumerate() {
            let t = i + 2;
            let cur: Vec<usize> = (0..t).map(|s| sc.channels << s).collect();
            let adapt = (0..pre.len())
                .map(|s| {
                    (pre[s] != cur[s]).then(|| ConvBn::init(pre[s], cur[s], 3, 1, 1, &mut rng))
                })
                .collect();
            let add_stream = ConvBn::init(*pre.last().unwrap(), *cur.last().unwrap(), 3, 2, 1, &mut rng);
            let mut modules = Vec::with_capacity(sc.modules);
            for _ in 0..sc.modules {
                let blocks = (0..t)
                    .map(|s| {
                        (0..sc.blocks)
                            .map(|_| {
                                BlockParams::init(
                                    cur[s],
                                    sc.heads[s],
                                    sc.window[s],
                                    sc.mlp_ratio[s],
                                    &mut rng,
                                )
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fusion = (t > 1).then(|| FusionParams::init(&cur, &mut rng));
                modules.push(ModuleParams { blocks, fusion });
            }
            stages.push(StageParams { adapt, add_stream, modules });
            pre = cur;
        }

        let head = HeadParams::init(config, &mut rng)?;
        Ok(ModelParams { config: config.clone(), stem, stage1, stages, head })
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit(&mut |_, t| total += t.numel() as u64);
        total
    }

    // ── forward ──────────────────────────────────────────────────────

    /// Stem: two stride-2 3x3 conv+BN+ReLU layers down to stride 4.
    pub fn stem_forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, image: TensorId) -> Result<TensorId> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!(
                "stem expects (b,3,h,w) input, got {shape:?}"
            )));
        }
        if shape[2] < 4 || shape[3] < 4 {
            return Err(Error::Config(format!(
                "input {}x{} too small for the stride-4 stem",
                shape[2], shape[3]
            )));
        }
        let x = self.stem.0.apply(tape, ctx, "stem.conv1", image, true)?;
        self.stem.1.apply(tape, ctx, "stem.conv2", x, true)
    }

    /// First stage: the bottleneck chain (emits 4 * width channels).
    pub fn stage1_forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: TensorId) -> Result<TensorId> {
        let mut cur = x;
        for (i, blk) in self.stage1.iter().enumerate() {
            cur = blk.apply(tape, ctx, &format!("stage1.block{i}"), cur)?;
        }
        Ok(cur)
    }

    /// Run the whole backbone; returns one map per stream.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        image: TensorId,
    ) -> Result<Vec<TensorId>> {
        let x = self.stem_forward(tape, ctx, image)?;
        let x = self.stage1_forward(tape, ctx, x)?;
        let mut streams = vec![x];
        for (i, stage) in self.stages.iter().enumerate() {
            let t = i + 2;
            let prefix = format!("stage{t}");
            // transition: adapt existing streams, add one lower stream
            let lowest = *streams.last().unwrap();
            let mut next = Vec::with_capacity(t);
            for (s, id) in streams.iter().enumerate() {
                next.push(match &stage.adapt[s] {
                    Some(conv) => conv.apply(tape, ctx, &format!("{prefix}.adapt{s}"), *id, true)?,
                    None => *id,
                });
            }
            next.push(stage.add_stream.apply(tape, ctx, &format!("{prefix}.add_stream"), lowest, true)?);
            streams = next;

            for (m, module) in stage.modules.iter().enumerate() {
                let mprefix = format!("{prefix}.module{m}");
                for (s, chain) in module.blocks.iter().enumerate() {
                    let mut cur = streams[s];
                    for (b, blk) in chain.iter().enumerate() {
                        let ids = bind_block(tape, ctx, &format!("{mprefix}.stream{s}.block{b}"), blk);
                        cur = block_forward(tape, cur, &ids, self.config.enable_ffn_dwconv)?;
                    }
                    streams[s] = cur;
                }
                if let Some(fusion) = &module.fusion {
                    streams = fuse_streams(tape, ctx, &format!("{mprefix}.fuse"), fusion, &streams)?;
                }
            }
        }
        Ok(streams)
    }

    /// Backbone plus head. The segmentation head upsamples to `seg_out`
    /// when given (other heads ignore it).
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        image: TensorId,
        seg_out: Option<(usize, usize)>,
    ) -> Result<ModelOutput> {
        let streams = self.backbone_forward(tape, ctx, image)?;
        let head = self.head.apply(tape, ctx, &streams, seg_out)?;
        Ok(ModelOutput { streams, head })
    }

    // ── visitors ─────────────────────────────────────────────────────

    /// Walk every learnable tensor with its path; order and paths match
    /// the forward pass bindings exactly.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.0.visit("stem.conv1", f);
        self.stem.1.visit("stem.conv2", f);
        for (i, blk) in self.stage1.iter().enumerate() {
            blk.visit(&format!("stage1.block{i}"), f);
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let t = i + 2;
            let prefix = format!("stage{t}");
            for (s, adapt) in stage.adapt.iter().enumerate() {
                if let Some(conv) = adapt {
                    conv.visit(&format!("{prefix}.adapt{s}"), f);
                }
            }
            stage.add_stream.visit(&format!("{prefix}.add_stream"), f);
            for (m, module) in stage.modules.iter().enumerate() {
                let mprefix = format!("{prefix}.module{m}");
                for (s, chain) in module.blocks.iter().enumerate() {
                    for (b, blk) in chain.iter().enumerate() {
                        visit_block(blk, &format!("{mprefix}.stream{s}.block{b}"), f);
                    }
                }
                if let Some(fusion) = &module.fusion {
                    visit_fusion(fusion, &format!("{mprefix}.fuse"), f);
                }
            }
        }
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.0.visit_mut("stem.conv1", f);
        self.stem.1.visit_mut("stem.conv2", f);
        for (i, blk) in self.stage1.iter_mut().enumerate() {
            blk.visit_mut(&format!("stage1.block{i}"), f);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let t = i + 2;
            let prefix = format!("stage{t}");
            for (s, adapt) in stage.adapt.iter_mut().enumerate() {
                if let Some(conv) = adapt {
                    conv.visit_mut(&format!("{prefix}.adapt{s}"), f);
                }
            }
            stage.add_stream.visit_mut(&format!("{prefix}.add_stream"), f);
            for (m, module) in stage.modules.iter_mut().enumerate() {
                let mprefix = format!("{prefix}.module{m}");
                for (s, chain) in module.blocks.iter_mut().enumerate() {
                    for (b, blk) in chain.iter_mut().enumerate() {
                        visit_block_mut(blk, &format!("{mprefix}.stream{s}.block{b}"), f);
                    }
                }
                if let Some(fusion) = &mut module.fusion {
                    visit_fusion_mut(fusion, &format!("{mprefix}.fuse"), f);
                }
            }
        }
        self.head.visit_mut(f);
    }

    /// Walk every batch-norm unit (running statistic buffers).
    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BnParams)) {
        self.stem.0.visit_bn_mut("stem.conv1", f);
        self.stem.1.visit_bn_mut("stem.conv2", f);
        for (i, blk) in self.stage1.iter_mut().enumerate() {
            blk.visit_bn_mut(&format!("stage1.block{i}"), f);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let t = i + 2;
            let prefix = format!("stage{t}");
            for (s, adapt) in stage.adapt.iter_mut().enumerate() {
                if let Some(conv) = adapt {
                    conv.visit_bn_mut(&format!("{prefix}.adapt{s}"), f);
                }
            }
            stage.add_stream.visit_bn_mut(&format!("{prefix}.add_stream"), f);
            for (m, module) in stage.modules.iter_mut().enumerate() {
                let mprefix = format!("{prefix}.module{m}");
                for (s, _) in module.blocks.iter().enumerate() {
                    let _ = s; // transformer blocks carry no batch norm
                }
                if let Some(fusion) = &mut module.fusion {
                    visit_fusion_bn_mut(fusion, &format!("{mprefix}.fuse"), f);
                }
            }
        }
        self.head.visit_bn_mut(f);
    }

    /// Plain SGD over every learnable tensor using gradients recorded on
    /// the tape under `binding` paths.
    pub fn sgd_step(&mut self, tape: &Tape, ctx: &ForwardCtx, lr: f64) {
        let grads: BTreeMap<&str, TensorId> =
            ctx.binding.iter().map(|(p, id)| (p.as_str(), *id)).collect();
        self.visit_mut(&mut |path, tensor| {
            if let Some(&id) = grads.get(path) {
                if let Some(grad) = tape.grad(id) {
                    for (w, g) in tensor.data.iter_mut().zip(grad) {
                        *w -= lr * g;
                    }
                }
            }
        });
    }

    /// Refresh every batch norm's running statistics from the batch
    /// moments of its recorded input (momentum 0.1).
    pub fn update_bn_stats(&mut self, tape: &Tape, ctx: &ForwardCtx, momentum: f64) {
        let mut updates: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (path, input) in &ctx.bn_uses {
            let shape = tape.shape(*input);
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let n = (b * h * w) as f64;
            let data = tape.data(*input);
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &data[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    mean[ci] += plane.iter().sum::<f64>();
                }
            }
            for m in mean.iter_mut() {
                *m /= n;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &data[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    var[ci] += plane.iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>();
                }
            }
            for v in var.iter_mut() {
                *v /= n;
            }
            updates.insert(path.clone(), (mean, var));
        }
        self.visit_bn_mut(&mut |path, bn| {
            if let Some((mean, var)) = updates.get(path) {
                bn.update_stats(mean, var, momentum);
            }
        });
    }
}

/// Backbone streams plus the head output.
pub struct ModelOutput {
    pub streams: Vec<TensorId>,
    pub head: TensorId,
}

// ── fusion forward ───────────────────────────────────────────────────

/// output_r = ReLU( sum_s path_{s->r}(stream_s) ).
pub fn fuse_streams(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    prefix: &str,
    fusion: &FusionParams,
    streams: &[TensorId],
) -> Result<Vec<TensorId>> {
    if fusion.paths.len() != streams.len() {
        return Err(Error::Config(format!(
            "fusion built for {} streams, got {}",
            fusion.paths.len(),
            streams.len()
        )));
    }
    let mut out = Vec::with_capacity(streams.len());
    for (r, row) in fusion.paths.iter().enumerate() {
        let mut acc = streams[r];
        for (s, path) in row.iter().enumerate() {
            match path {
                FusePath::Identity => {}
                FusePath::Up { conv, factor } => {
                    let y = conv.apply(tape, ctx, &format!("{prefix}.to{r}.from{s}"), streams[s], false)?;
                    let y = tape.upsample_nearest(y, *factor)?;
                    // ceil-rounded strides can make the upsample overshoot
                    let target = tape.shape(streams[r]).to_vec();
                    let y = tape.crop_spatial(y, target[2], target[3])?;
                    acc = tape.add(acc, y)?;
                }
                FusePath::Down { steps } => {
                    let mut y = streams[s];
                    for (k, (dw, pw)) in steps.iter().enumerate() {
                        let last = k == steps.len() - 1;
                        let p = format!("{prefix}.to{r}.from{s}.step{k}");
                        y = dw.apply(tape, ctx, &format!("{p}.dw"), y, false)?;
                        y = pw.apply(tape, ctx, &format!("{p}.pw"), y, false)?;
                        if !last {
                            y = tape.relu(y);
                        }
                    }
                    acc = tape.add(acc, y)?;
                }
            }
        }
        out.push(tape.relu(acc));
    }
    Ok(out)
}

// ── block binding / visiting ─────────────────────────────────────────

fn bind_block(tape: &mut Tape, ctx: &mut ForwardCtx, path: &str, blk: &BlockParams) -> BlockIds {
    BlockIds {
        norm1_gamma: ctx.bind(tape, format!("{path}.norm1.gamma"), &blk.norm1_gamma),
        norm1_beta: ctx.bind(tape, format!("{path}.norm1.beta"), &blk.norm1_beta),
        attn: crate::window::AttentionIds {
            w_q: ctx.bind(tape, format!("{path}.attn.w_q"), &blk.attn.w_q),
            w_k: ctx.bind(tape, format!("{path}.attn.w_k"), &blk.attn.w_k),
            w_v: ctx.bind(tape, format!("{path}.attn.w_v"), &blk.attn.w_v),
            w_o: ctx.bind(tape, format!("{path}.attn.w_o"), &blk.attn.w_o),
            rel_bias: ctx.bind(tape, format!("{path}.attn.rel_bias"), &blk.attn.rel_bias),
            heads: blk.attn.heads,
            window: blk.attn.window,
        },
        norm2_gamma: ctx.bind(tape, format!("{path}.norm2.gamma"), &blk.norm2_gamma),
        norm2_beta: ctx.bind(tape, format!("{path}.norm2.beta"), &blk.norm2_beta),
        ffn: crate::ffn::FfnIds {
            w1: ctx.bind(tape, format!("{path}.ffn.w1"), &blk.ffn.w1),
            b1: ctx.bind(tape, format!("{path}.ffn.b1"), &blk.ffn.b1),
            dw: ctx.bind(tape, format!("{path}.ffn.dw"), &blk.ffn.dw),
            dw_b: ctx.bind(tape, format!("{path}.ffn.dw_b"), &blk.ffn.dw_b),
            w2: ctx.bind(tape, format!("{path}.ffn.w2"), &blk.ffn.w2),
            b2: ctx.bind(tape, format!("{path}.ffn.b2"), &blk.ffn.b2),
            act: blk.ffn.act,
        },
    }
}

fn visit_block(blk: &BlockParams, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{path}.norm1.gamma"), &blk.norm1_gamma);
    f(&format!("{path}.norm1.beta"), &blk.norm1_beta);
    f(&format!("{path}.attn.w_q"), &blk.attn.w_q);
    f(&format!("{path}.attn.w_k"), &blk.attn.w_k);
    f(&format!("{path}.attn.w_v"), &blk.attn.w_v);
    f(&format!("{path}.attn.w_o"), &blk.attn.w_o);
    f(&format!("{path}.attn.rel_bias"), &blk.attn.rel_bias);
    f(&format!("{path}.norm2.gamma"), &blk.norm2_gamma);
    f(&format!("{path}.norm2.beta"), &blk.norm2_beta);
    f(&format!("{path}.ffn.w1"), &blk.ffn.w1);
    f(&format!("{path}.ffn.b1"), &blk.ffn.b1);
    f(&format!("{path}.ffn.dw"), &blk.ffn.dw);
    f(&format!("{path}.ffn.dw_b"), &blk.ffn.dw_b);
    f(&format!("{path}.ffn.w2"), &blk.ffn.w2);
    f(&format!("{path}.ffn.b2"), &blk.ffn.b2);
}

fn visit_block_mut(blk: &mut BlockParams, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{path}.norm1.gamma"), &mut blk.norm1_gamma);
    f(&format!("{path}.norm1.beta"), &mut blk.norm1_beta);
    f(&format!("{path}.attn.w_q"), &mut blk.attn.w_q);
    f(&format!("{path}.attn.w_k"), &mut blk.attn.w_k);
    f(&format!("{path}.attn.w_v"), &mut blk.attn.w_v);
    f(&format!("{path}.attn.w_o"), &mut blk.attn.w_o);
    f(&format!("{path}.attn.rel_bias"), &mut blk.attn.rel_bias);
    f(&format!("{path}.norm2.gamma"), &mut blk.norm2_gamma);
    f(&format!("{path}.norm2.beta"), &mut blk.norm2_beta);
    f(&format!("{path}.ffn.w1"), &mut blk.ffn.w1);
    f(&format!("{path}.ffn.b1"), &mut blk.ffn.b1);
    f(&format!("{path}.ffn.dw"), &mut blk.ffn.dw);
    f(&format!("{path}.ffn.dw_b"), &mut blk.ffn.dw_b);
    f(&format!("{path}.ffn.w2"), &mut blk.ffn.w2);
    f(&format!("{path}.ffn.b2"), &mut blk.ffn.b2);
}

fn visit_fusion(fusion: &FusionParams, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    for (r, row) in fusion.paths.iter().enumerate() {
        for (s, path) in row.iter().enumerate() {
            match path {
                FusePath::Identity => {}
                FusePath::Up { conv, .. } => conv.visit(&format!("{prefix}.to{r}.from{s}"), f),
                FusePath::Down { steps } => {
                    for (k, (dw, pw)) in steps.iter().enumerate() {
                        let p = format!("{prefix}.to{r}.from{s}.step{k}");
                        dw.visit(&format!("{p}.dw"), f);
                        pw.visit(&format!("{p}.pw"), f);
                    }
                }
            }
        }
    }
}

fn visit_fusion_mut(fusion: &mut FusionParams, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    for (r, row) in fusion.paths.iter_mut().enumerate() {
        for (s, path) in row.iter_mut().enumerate() {
            match path {
                FusePath::Identity => {}
                FusePath::Up { conv, .. } => conv.visit_mut(&format!("{prefix}.to{r}.from{s}"), f),
                FusePath::Down { steps } => {
                    for (k, (dw, pw)) in steps.iter_mut().enumerate() {
                        let p = format!("{prefix}.to{r}.from{s}.step{k}");
                        dw.visit_mut(&format!("{p}.dw"), f);
                        pw.visit_mut(&format!("{p}.pw"), f);
                    }
                }
            }
        }
    }
}

fn visit_fusion_bn_mut(fusion: &mut FusionParams, prefix: &str, f: &mut dyn FnMut(&str, &mut BnParams)) {
    for (r, row) in fusion.paths.iter_mut().enumerate() {
        for (s, path) in row.iter_mut().enumerate() {
            match path {
                FusePath::Identity => {}
                FusePath::Up { conv, .. } => conv.visit_bn_mut(&format!("{prefix}.to{r}.from{s}"), f),
                FusePath::Down { steps } => {
                    for (k, (dw, pw)) in steps.iter_mut().enumerate() {
                        let p = format!("{prefix}.to{r}.from{s}.step{k}");
                        dw.visit_bn_mut(&format!("{p}.dw"), f);
                        pw.visit_bn_mut(&format!("{p}.pw"), f);
                    }
                }
            }
        }
    }
}

/// Gradcheck/reporting group of a parameter path.
pub fn param_group(path: &str) -> &'static str {
    if path.contains(".attn.rel_bias") {
        "rel_bias"
    } else if path.contains(".attn.") {
        "attention"
    } else if path.contains(".ffn.dw") {
        "dw_kernel"
    } else if path.contains(".ffn.") {
        "ffn"
    } else if path.contains(".norm1.") || path.contains(".norm2.") || path.contains(".bn.") {
        "norms"
    } else if path.starts_with("head.") {
        "head"
    } else if path.contains(".fuse.") {
        "fusion"
    } else if path.contains(".adapt") || path.contains(".add_stream") {
        "transition"
    } else if path.starts_with("stem.") {
        "stem"
    } else {
        "stage1"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadKind;
    use std::collections::BTreeSet;
    use std::string::ToString;

    fn forward_micro(cfg: &ModelConfig, h: usize, w: usize) -> (Tape, ForwardCtx, ModelOutput) {
        let params = ModelParams::init(cfg).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new();
        let mut rng = Rng::new(7);
        let img = tape.leaf(Tensor::from_normal(&[1, 3, h, w], 1.0, &mut rng));
        let out = params.forward(&mut tape, &mut ctx, img, None).unwrap();
        (tape, ctx, out)
    }

    #[test]
    fn stem_shapes() {
        let cfg = ModelConfig::preset("hrformer-t").unwrap();
        let params = ModelParams::init(&cfg).unwrap();
        for (h, w, eh, ew) in [(224, 224, 56, 56), (256, 192, 64, 48), (32, 32, 8, 8)] {
            let mut tape = Tape::inference();
            let mut ctx = ForwardCtx::new();
            let img = tape.leaf(Tensor::zeros(&[1, 3, h, w]));
            let out = params.stem_forward(&mut tape, &mut ctx, img).unwrap();
            assert_eq!(tape.shape(out), &[1, 64, eh, ew]);
        }
    }

    #[test]
    fn stem_rejects_tiny_input() {
        let cfg = ModelConfig::micro();
        let params = ModelParams::init(&cfg).unwrap();
        let mut tape = Tape::inference();
        let mut ctx = ForwardCtx::new();
        let img = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(matches!(
            params.stem_forward(&mut tape, &mut ctx, img),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage1_emits_256_channels_before_transition() {
        let cfg = ModelConfig::preset("hrformer-t").unwrap();
        assert_eq!(cfg.stage1.modules * cfg.stage1.blocks, 2);
        let params = ModelParams::init(&cfg).unwrap();
        let mut tape = Tape::inference();
        let mut ctx = ForwardCtx::new();
        let img = tape.leaf(Tensor::zeros(&[1, 3, 32, 32]));
        let x = params.stem_forward(&mut tape, &mut ctx, img).unwrap();
        let y = params.stage1_forward(&mut tape, &mut ctx, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 256, 8, 8]);
    }

    #[test]
    fn stage1_zeroed_residual_is_near_identity() {
        // zero the residual branch of every bottleneck; the stage collapses
        // to its (BN-affine) shortcut path with ReLUs.
        let cfg = ModelConfig::micro();
        let mut params = ModelParams::init(&cfg).unwrap();
        for blk in params.stage1.iter_mut() {
            for v in blk.expand.weight.data.iter_mut() {
                *v = 0.0;
            }
            if let Some(s) = &mut blk.shortcut {
                // identity-like shortcut: 1x1 conv that copies the first
                // min(cin,cout) channels
                for v in s.weight.data.iter_mut() {
                    *v = 0.0;
                }
                let (cout, cin) = (s.weight.shape[0], s.weight.shape[1]);
                for c in 0..cout.min(cin) {
                    s.weight.data[c * cin + c] = 1.0;
                }
            }
        }
        let mut tape = Tape::inference();
        let mut ctx = ForwardCtx::new();
        let mut rng = Rng::new(3);
        let x = tape.leaf(Tensor::from_normal(&[1, 8, 4, 4], 1.0, &mut rng));
        let y = params.stage1_forward(&mut tape, &mut ctx, x).unwrap();
        // first 8 of 16 output channels equal relu(x) up to the BN scale
        let scale = 1.0 / libm::sqrt(1.0 + 1e-5);
        for c in 0..8 {
            for p in 0..16 {
                let got = tape.data(y)[c * 16 + p];
                let want = (tape.data(x)[c * 16 + p] * scale).max(0.0);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stream_counts_grow_per_stage() {
        let cfg = ModelConfig::preset("hrformer-t").unwrap();
        let params = ModelParams::init(&cfg).unwrap();
        // stage entries: 1 -> 2 -> 3 -> 4 streams
        assert_eq!(params.stages[0].adapt.len(), 1);
        assert_eq!(params.stages[1].adapt.len(), 2);
        assert_eq!(params.stages[2].adapt.len(), 3);
        // stage-4 new stream maps 4C -> 8C with stride 2
        let add = &params.stages[2].add_stream;
        assert_eq!(add.weight.shape, vec![144, 72, 3, 3]);
        assert_eq!(add.stride, 2);
        // HRFormer-B stage-4 channels
        let b = ModelConfig::preset("hrformer-b").unwrap();
        assert_eq!(b.stream_channels(), vec![78, 156, 312, 624]);
    }

    #[test]
    fn micro_forward_shapes_and_determinism() {
        let cfg = ModelConfig::micro();
        let (tape, _, out) = forward_micro(&cfg, 16, 16);
        assert_eq!(out.streams.len(), 2);
        assert_eq!(tape.shape(out.streams[0]), &[1, 4, 4, 4]);
        assert_eq!(tape.shape(out.streams[1]), &[1, 8, 2, 2]);
        assert_eq!(tape.shape(out.head), &[1, 2]);

        let (tape2, _, out2) = forward_micro(&cfg, 16, 16);
        assert_eq!(tape.data(out.head), tape2.data(out2.head), "same seed, same bits");
        for (a, b) in out.streams.iter().zip(&out2.streams) {
            assert_eq!(tape.data(*a), tape2.data(*b));
        }
    }

    #[test]
    fn fusion_zero_weights_keep_identity_branch() {
        let cfg = ModelConfig::micro();
        let mut params = ModelParams::init(&cfg).unwrap();
        // zero every fusion conv
        let module = &mut params.stages[0].modules[0];
        if let Some(f) = &mut module.fusion {
            for row in f.paths.iter_mut() {
                for p in row.iter_mut() {
                    match p {
                        FusePath::Identity => {}
                        FusePath::Up { conv, .. } => conv.weight.data.iter_mut().for_each(|v| *v = 0.0),
                        FusePath::Down { steps } => {
                            for (dw, pw) in steps {
                                dw.weight.data.iter_mut().for_each(|v| *v = 0.0);
                                pw.weight.data.iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                    }
                }
            }
        }
        let mut rng = Rng::new(11);
        let mut tape = Tape::inference();
        let mut ctx = ForwardCtx::new();
        let a = tape.leaf(Tensor::from_normal(&[1, 4, 4, 4], 1.0, &mut rng));
        let b = tape.leaf(Tensor::from_normal(&[1, 8, 2, 2], 1.0, &mut rng));
        let fused = fuse_streams(
            &mut tape,
            &mut ctx,
            "t",
            params.stages[0].modules[0].fusion.as_ref().unwrap(),
            &[a, b],
        )
        .unwrap();
        // zero contributions from the other stream: output r = relu(identity)
        for (y, x) in tape.data(fused[0]).iter().zip(tape.data(a)) {
            assert_eq!(*y, x.max(0.0));
        }
        for (y, x) in tape.data(fused[1]).iter().zip(tape.data(b)) {
            assert_eq!(*y, x.max(0.0));
        }
        // shapes preserved
        assert_eq!(tape.shape(fused[0]), tape.shape(a));
        assert_eq!(tape.shape(fused[1]), tape.shape(b));
    }

    #[test]
    fn visit_paths_match_forward_binding() {
        for head in [HeadKind::Classification, HeadKind::Pose, HeadKind::Segmentation] {
            let mut cfg = ModelConfig::micro();
            cfg.head = head;
            let params = ModelParams::init(&cfg).unwrap();
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::new();
            let img = tape.leaf(Tensor::zeros(&[1, 3, 16, 16]));
            params.forward(&mut tape, &mut ctx, img, None).unwrap();
            let bound: BTreeSet<String> = ctx.binding.iter().map(|(p, _)| p.clone()).collect();
            assert_eq!(bound.len(), ctx.binding.len(), "duplicate binding path");
            let mut visited = BTreeSet::new();
            params.visit(&mut |p, _| {
                visited.insert(p.to_string());
            });
            assert_eq!(bound, visited, "forward bindings and visitor disagree ({head:?})");
        }
    }

    #[test]
    fn param_groups_cover_expected_kinds() {
        let cfg = ModelConfig::micro();
        let params = ModelParams::init(&cfg).unwrap();
        let mut groups = BTreeSet::new();
        params.visit(&mut |p, _| {
            groups.insert(param_group(p));
        });
        for expected in [
            "attention", "rel_bias", "ffn", "dw_kernel", "norms", "fusion", "transition", "stem",
            "stage1", "head",
        ] {
            assert!(groups.contains(expected), "missing group {expected}");
        }
    }
}
