//! Static parameter and FLOP accounting.
//!
//! Walks the model configuration without allocating any tensors and tallies
//! learnable scalars and forward FLOPs per named submodule. Counting
//! convention: one multiply-accumulate is one FLOP; softmax, norms,
//! activations, and elementwise adds are excluded; attention and projection
//! FLOPs are charged per valid token (h*w per stream), window padding is
//! not billed. Parameter counts match the instantiated model exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{HeadKind, ModelConfig};
use crate::error::Result;
use crate::heads::{HEAD_FINAL_CHANNELS, HEAD_WIDTH_BASE, SEG_MID_CHANNELS};

/// One named entry of the complexity tree; parents hold the sums of their
/// children.
#[derive(Clone, Debug)]
pub struct ComplexityNode {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub children: Vec<ComplexityNode>,
}

impl ComplexityNode {
    fn leaf(name: &str, params: u64, flops: u64) -> Self {
        ComplexityNode { name: name.into(), params, flops, children: Vec::new() }
    }

    fn parent(name: &str, children: Vec<ComplexityNode>) -> Self {
        let params = children.iter().map(|c| c.params).sum();
        let flops = children.iter().map(|c| c.flops).sum();
        ComplexityNode { name: name.into(), params, flops, children }
    }

    /// Sum of leaf values below (and including) this node.
    pub fn leaf_sum(&self) -> (u64, u64) {
        if self.children.is_empty() {
            return (self.params, self.flops);
        }
        let mut p = 0;
        let mut f = 0;
        for c in &self.children {
            let (cp, cf) = c.leaf_sum();
            p += cp;
            f += cf;
        }
        (p, f)
    }

    /// Look up a dot-separated path below this node.
    pub fn find(&self, path: &str) -> Option<&ComplexityNode> {
        let mut cur = self;
        for part in path.split('.') {
            cur = cur.children.iter().find(|c| c.name == part)?;
        }
        Some(cur)
    }
}

/// Full complexity report for one configuration and optional input size.
#[derive(Clone, Debug)]
pub struct ComplexityReport {
    pub root: ComplexityNode,
    pub input: Option<(usize, usize)>,
    pub batch: usize,
}

impl ComplexityReport {
    pub fn total_params(&self) -> u64 {
        self.root.params
    }

    pub fn total_flops(&self) -> u64 {
        self.root.flops
    }

    /// Human-readable table down to `depth` levels (root is depth 0).
    pub fn to_table(&self, depth: usize) -> String {
        let mut out = String::new();
        match self.input {
            Some((h, w)) => out.push_str(&format!(
                "input {h}x{w}, batch {}\n{:<44} {:>14} {:>16}\n",
                self.batch, "module", "params", "flops"
            )),
            None => out.push_str(&format!("{:<44} {:>14}\n", "module", "params")),
        }
        self.table_rows(&self.root, 0, depth, &mut out);
        out
    }

    fn table_rows(&self, node: &ComplexityNode, level: usize, depth: usize, out: &mut String) {
        let indent = "  ".repeat(level);
        let name = format!("{indent}{}", node.name);
        if self.input.is_some() {
            out.push_str(&format!("{:<44} {:>14} {:>16}\n", name, node.params, node.flops));
        } else {
            out.push_str(&format!("{:<44} {:>14}\n", name, node.params));
        }
        if level < depth {
            for c in &node.children {
                self.table_rows(c, level + 1, depth, out);
            }
        }
    }

    /// Machine-readable `path.params=N` / `path.flops=N` records.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        self.kv_rows(&self.root, &self.root.name.clone(), &mut out);
        out
    }

    fn kv_rows(&self, node: &ComplexityNode, path: &str, out: &mut String) {
        out.push_str(&format!("{path}.params={}\n", node.params));
        if self.input.is_some() {
            out.push_str(&format!("{path}.flops={}\n", node.flops));
        }
        for c in &node.children {
            let cp = format!("{path}.{}", c.name);
            self.kv_rows(c, &cp, out);
        }
    }
}

// ── shape arithmetic ─────────────────────────────────────────────────

fn ceil_half(x: usize) -> usize {
    x.div_ceil(2)
}

/// Per-stream (channels, h, w) after the final stage, driven by the actual
/// stride-2 conv arithmetic (output extent ceil(x/2) at each halving).
pub fn stream_shapes(config: &ModelConfig, input: (usize, usize)) -> Vec<(usize, usize, usize)> {
    let channels = config.stream_channels();
    let mut h = ceil_half(ceil_half(input.0));
    let mut w = ceil_half(ceil_half(input.1));
    let mut out = Vec::with_capacity(channels.len());
    for &c in &channels {
        out.push((c, h, w));
        h = ceil_half(h);
        w = ceil_half(w);
    }
    out
}

/// Shape of the head output for a given input, excluding softmax.
pub fn head_output_shape(
    config: &ModelConfig,
    input: (usize, usize),
    batch: usize,
    seg_out: Option<(usize, usize)>,
) -> Vec<usize> {
    let shapes = stream_shapes(config, input);
    match config.head {
        HeadKind::Classification => vec![batch, config.num_classes],
        HeadKind::Pose => vec![batch, config.num_keypoints, shapes[0].1, shapes[0].2],
        HeadKind::Segmentation => {
            let (oh, ow) = seg_out.unwrap_or((shapes[0].1, shapes[0].2));
            vec![batch, config.num_classes, oh, ow]
        }
    }
}

// ── counting ─────────────────────────────────────────────────────────

struct Counter {
    /// Spatial positions multiplier; None in params-only mode.
    positions_on: bool,
    batch: u64,
}

impl Counter {
    fn conv(
        &self,
        name: &str,
        res: (usize, usize),
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> ComplexityNode {
        let params = (cout * (cin / groups) * k * k + if bias { cout } else { 0 }) as u64;
        let flops = if self.positions_on {
            self.batch * (res.0 * res.1) as u64 * (k * k * (cin / groups) * cout) as u64
        } else {
            0
        };
        ComplexityNode::leaf(name, params, flops)
    }

    fn bn(&self, name: &str, c: usize) -> ComplexityNode {
        ComplexityNode::leaf(name, 2 * c as u64, 0)
    }

    fn conv_bn(
        &self,
        name: &str,
        res: (usize, usize),
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
    ) -> ComplexityNode {
        ComplexityNode::parent(
            name,
            vec![
                self.conv("conv", res, cin, cout, k, groups, false),
                self.bn("bn", cout),
            ],
        )
    }

    fn bottleneck(
        &self,
        name: &str,
        res: (usize, usize),
        cin: usize,
        width: usize,
        depthwise: bool,
    ) -> ComplexityNode {
        let out = 4 * width;
        let mut children = vec![
            self.conv_bn("reduce", res, cin, width, 1, 1),
            self.conv_bn("center", res, width, width, 3, if depthwise { width } else { 1 }),
            self.conv_bn("expand", res, width, out, 1, 1),
        ];
        if cin != out {
            children.push(self.conv_bn("shortcut", res, cin, out, 1, 1));
        }
        ComplexityNode::parent(name, children)
    }

    fn block(
        &self,
        name: &str,
        res: (usize, usize),
        d: usize,
        heads: usize,
        k: usize,
        ratio: usize,
        enable_dw: bool,
    ) -> ComplexityNode {
        let n = if self.positions_on {
            self.batch * (res.0 * res.1) as u64
        } else {
            0
        };
        let d64 = d as u64;
        let kk = (k * k) as u64;
        let span = (2 * k - 1) as u64;
        let attn = ComplexityNode::parent(
            "attn",
            vec![
                ComplexityNode::leaf("proj_qkv", 3 * d64 * d64, 3 * n * d64 * d64),
                ComplexityNode::leaf("logits", 0, n * kk * d64),
                ComplexityNode::leaf("attend", 0, n * kk * d64),
                ComplexityNode::leaf("proj_out", d64 * d64, n * d64 * d64),
                ComplexityNode::leaf("rel_bias", heads as u64 * span * span, 0),
            ],
        );
        let hid = (ratio * d) as u64;
        let mut ffn_children = vec![ComplexityNode::leaf("w1", d64 * hid + hid, n * d64 * hid)];
        if enable_dw {
            ffn_children.push(ComplexityNode::leaf("dw", 9 * hid + hid, n * 9 * hid));
        }
        ffn_children.push(ComplexityNode::leaf("w2", hid * d64 + d64, n * hid * d64));
        let ffn = ComplexityNode::parent("ffn", ffn_children);
        ComplexityNode::parent(
            name,
            vec![
                ComplexityNode::leaf("norm1", 2 * d64, 0),
                attn,
                ComplexityNode::leaf("norm2", 2 * d64, 0),
                ffn,
            ],
        )
    }
}

/// Count parameters and (when an input size is given) forward FLOPs.
pub fn analyze(
    config: &ModelConfig,
    input: Option<(usize, usize)>,
    batch: usize,
) -> Result<ComplexityReport> {
    config.validate()?;
    let counter = Counter { positions_on: input.is_some(), batch: batch as u64 };
    // resolution bookkeeping; an arbitrary placeholder in params-only mode
    let (h0, w0) = input.unwrap_or((64, 64));
    let stem_mid = (ceil_half(h0), ceil_half(w0));
    let r4 = (ceil_half(stem_mid.0), ceil_half(stem_mid.1));
    let mut res = vec![r4];
    for _ in 1..config.stream_count() {
        let last = *res.last().unwrap();
        res.push((ceil_half(last.0), ceil_half(last.1)));
    }

    let sc = config.stem_channels;
    let stem = ComplexityNode::parent(
        "stem",
        vec![
            counter.conv_bn("conv1", stem_mid, 3, sc, 3, 1),
            counter.conv_bn("conv2", r4, sc, sc, 3, 1),
        ],
    );

    let w1 = config.stage1.width;
    let n1 = config.stage1.modules * config.stage1.blocks;
    let mut stage1_children = Vec::with_capacity(n1);
    let mut cin = sc;
    for i in 0..n1 {
        stage1_children.push(counter.bottleneck(&format!("block{i}"), r4, cin, w1, false));
        cin = 4 * w1;
    }
    let stage1 = ComplexityNode::parent("stage1", stage1_children);

    let mut stage_nodes = vec![stem, stage1];
    let mut pre: Vec<usize> = vec![4 * w1];
    for (i, stage) in config.stages.iter().enumerate() {
        let t = i + 2;
        let cur: Vec<usize> = (0..t).map(|s| stage.channels << s).collect();
        let mut children = Vec::new();
        for s in 0..pre.len() {
            if pre[s] != cur[s] {
                children.push(counter.conv_bn(&format!("adapt{s}"), res[s], pre[s], cur[s], 3, 1));
            }
        }
        children.push(counter.conv_bn(
            "add_stream",
            res[t - 1],
            *pre.last().unwrap(),
            *cur.last().unwrap(),
            3,
            1,
        ));
        for m in 0..stage.modules {
            let mut mod_children = Vec::new();
            for (s, &d) in cur.iter().enumerate() {
                let mut blocks = Vec::with_capacity(stage.blocks);
                for b in 0..stage.blocks {
                    blocks.push(counter.block(
                        &format!("block{b}"),
                        res[s],
                        d,
                        stage.heads[s],
                        stage.window[s],
                        stage.mlp_ratio[s],
                        config.enable_ffn_dwconv,
                    ));
                }
                mod_children.push(ComplexityNode::parent(&format!("stream{s}"), blocks));
            }
            if t > 1 {
                mod_children.push(fusion_node(&counter, &cur, &res));
            }
            children.push(ComplexityNode::parent(&format!("module{m}"), mod_children));
        }
        stage_nodes.push(ComplexityNode::parent(&format!("stage{t}"), children));
        pre = cur;
    }

    stage_nodes.push(head_node(&counter, config, &res)?);
    let root = ComplexityNode::parent("model", stage_nodes);
    Ok(ComplexityReport { root, input, batch })
}

fn fusion_node(counter: &Counter, channels: &[usize], res: &[(usize, usize)]) -> ComplexityNode {
    let n = channels.len();
    let mut children = Vec::new();
    for r in 0..n {
        for s in 0..n {
            if s == r {
                continue;
            }
            let name = format!("to{r}.from{s}");
            if s > r {
                // conv at the source resolution, then free nearest upsample
                children.push(ComplexityNode::parent(
                    &name,
                    vec![counter.conv_bn("up", res[s], channels[s], channels[r], 1, 1)],
                ));
            } else {
                let mut steps = Vec::new();
                for k in 0..r - s {
                    let step_res = res[s + k + 1];
                    let cout = if k == r - s - 1 { channels[r] } else { channels[s] };
                    steps.push(ComplexityNode::parent(
                        &format!("step{k}"),
                        vec![
                            counter.conv_bn("dw", step_res, channels[s], channels[s], 3, channels[s]),
                            counter.conv_bn("pw", step_res, channels[s], cout, 1, 1),
                        ],
                    ));
                }
                children.push(ComplexityNode::parent(&name, steps));
            }
        }
    }
    ComplexityNode::parent("fuse", children)
}

fn head_node(
    counter: &Counter,
    config: &ModelConfig,
    res: &[(usize, usize)],
) -> Result<ComplexityNode> {
    let channels = config.stream_channels();
    let n = channels.len();
    let children = match config.head {
        HeadKind::Classification => {
            let mut children = Vec::new();
            for (s, &c) in channels.iter().enumerate() {
                children.push(counter.bottleneck(
                    &format!("incre{s}"),
                    res[s],
                    c,
                    HEAD_WIDTH_BASE << s,
                    true,
                ));
            }
            for s in 0..n - 1 {
                let cin = 4 * (HEAD_WIDTH_BASE << s);
                children.push(ComplexityNode::parent(
                    &format!("down{s}"),
                    vec![
                        counter.conv_bn("dw", res[s + 1], cin, cin, 3, cin),
                        counter.conv_bn("pw", res[s + 1], cin, 2 * cin, 1, 1),
                    ],
                ));
            }
            let last = 4 * (HEAD_WIDTH_BASE << (n - 1));
            children.push(counter.conv_bn("final", res[n - 1], last, HEAD_FINAL_CHANNELS, 1, 1));
            let nc = config.num_classes as u64;
            let cls_flops = if counter.positions_on {
                counter.batch * HEAD_FINAL_CHANNELS as u64 * nc
            } else {
                0
            };
            children.push(ComplexityNode::leaf(
                "classifier",
                HEAD_FINAL_CHANNELS as u64 * nc + nc,
                cls_flops,
            ));
            children
        }
        HeadKind::Pose => {
            let kp = config.num_keypoints;
            let mut conv = counter.conv("regress", res[0], channels[0], kp, 1, 1, true);
            // the 1x1 regression conv carries a bias
            conv.name = "regress".into();
            vec![conv]
        }
        HeadKind::Segmentation => {
            let total: usize = channels.iter().sum();
            vec![
                counter.conv_bn("squeeze", res[0], total, SEG_MID_CHANNELS, 1, 1),
                counter.conv("classify", res[0], SEG_MID_CHANNELS, config.num_classes, 1, 1, true),
            ]
        }
    };
    Ok(ComplexityNode::parent("head", children))
}

/// Convenience: parameters only.
pub fn count_params(config: &ModelConfig) -> Result<ComplexityReport> {
    analyze(config, None, 1)
}

/// Convenience: parameters and FLOPs at the given input size.
pub fn count_flops(config: &ModelConfig, input: (usize, usize), batch: usize) -> Result<ComplexityReport> {
    analyze(config, Some(input), batch)
}

/// One row of a window-size sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub windows: Vec<usize>,
    pub params: u64,
    pub flops: u64,
}

/// Re-analyze the config under each per-stream window assignment.
pub fn window_sweep(
    config: &ModelConfig,
    window_sets: &[Vec<usize>],
    input: (usize, usize),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(window_sets.len());
    for ws in window_sets {
        let mut cfg = config.clone();
        for stage in cfg.stages.iter_mut() {
            let streams = stage.window.len();
            if ws.len() < streams {
                return Err(crate::error::Error::Config(format!(
                    "window tuple {ws:?} too short for {streams} streams"
                )));
            }
            stage.window = ws[..streams].to_vec();
        }
        let report = count_flops(&cfg, input, 1)?;
        rows.push(SweepRow {
            windows: ws.clone(),
            params: report.total_params(),
            flops: report.total_flops(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn preset(name: &str) -> ModelConfig {
        ModelConfig::preset(name).unwrap()
    }

    #[test]
    fn params_match_published_tables() {
        // classification (±3%): T 8.0M, S 13.5M, B 50.3M
        for (name, expect) in [
            ("hrformer-t", 8.0e6),
            ("hrformer-s", 13.5e6),
            ("hrformer-b", 50.3e6),
        ] {
            let got = count_params(&preset(name)).unwrap().total_params() as f64;
            let dev = (got - expect).abs() / expect;
            assert!(dev <= 0.03, "{name} classification params {got} vs {expect} ({dev:.3})");
        }
        // pose (±3%): T 2.5M, S 7.8M, B 43.2M
        for (name, expect) in [
            ("hrformer-t", 2.5e6),
            ("hrformer-s", 7.8e6),
            ("hrformer-b", 43.2e6),
        ] {
            let mut cfg = preset(name);
            cfg.head = HeadKind::Pose;
            let got = count_params(&cfg).unwrap().total_params() as f64;
            let dev = (got - expect).abs() / expect;
            assert!(dev <= 0.03, "{name} pose params {got} vs {expect} ({dev:.3})");
        }
    }

    #[test]
    fn flops_match_published_tables() {
        // classification @224 (±10%): T 1.8G, S 3.6G, B 13.7G
        for (name, expect) in [
            ("hrformer-t", 1.8e9),
            ("hrformer-s", 3.6e9),
            ("hrformer-b", 13.7e9),
        ] {
            let got = count_flops(&preset(name), (224, 224), 1).unwrap().total_flops() as f64;
            let dev = (got - expect).abs() / expect;
            assert!(dev <= 0.10, "{name} flops {got} vs {expect} ({dev:.3})");
        }
        // pose: T @256x192 1.3G, B @384x288 26.8G
        let mut t = preset("hrformer-t");
        t.head = HeadKind::Pose;
        let got = count_flops(&t, (256, 192), 1).unwrap().total_flops() as f64;
        assert!((got - 1.3e9).abs() / 1.3e9 <= 0.10, "pose-T flops {got}");
        let mut b = preset("hrformer-b");
        b.head = HeadKind::Pose;
        let got = count_flops(&b, (384, 288), 1).unwrap().total_flops() as f64;
        assert!((got - 26.8e9).abs() / 26.8e9 <= 0.10, "pose-B flops {got}");
    }

    #[test]
    fn params_equal_instantiated_store_exactly() {
        // the strong cross-check: analyzer == actual parameter store
        let mut micro_pose = ModelConfig::micro();
        micro_pose.head = HeadKind::Pose;
        let mut micro_seg = ModelConfig::micro();
        micro_seg.head = HeadKind::Segmentation;
        micro_seg.num_classes = 5;
        let mut odd = ModelConfig::micro();
        odd.stages = vec![
            crate::config::StageConfig {
                modules: 2,
                blocks: 2,
                channels: 6,
                heads: alloc::vec![1, 3],
                mlp_ratio: alloc::vec![2, 3],
                window: alloc::vec![2, 3],
            },
            crate::config::StageConfig {
                modules: 1,
                blocks: 1,
                channels: 6,
                heads: alloc::vec![2, 4, 8],
                mlp_ratio: alloc::vec![2, 2, 2],
                window: alloc::vec![3, 2, 1],
            },
        ];
        for cfg in [
            ModelConfig::micro(),
            micro_pose,
            micro_seg,
            odd,
            preset("hrformer-t"),
        ] {
            let counted = count_params(&cfg).unwrap().total_params();
            let built = ModelParams::init(&cfg).unwrap().param_count();
            assert_eq!(counted, built, "analyzer vs store for {:?}", cfg.summary());
        }
    }

    #[test]
    fn params_independent_of_input_and_flops_scale_with_batch() {
        let cfg = preset("hrformer-t");
        let a = count_flops(&cfg, (224, 224), 1).unwrap();
        let b = count_flops(&cfg, (448, 448), 1).unwrap();
        assert_eq!(a.total_params(), b.total_params());
        let tripled = count_flops(&cfg, (224, 224), 3).unwrap();
        assert_eq!(tripled.total_flops(), 3 * a.total_flops());
    }

    #[test]
    fn totals_equal_leaf_sums() {
        let report = count_flops(&preset("hrformer-t"), (224, 224), 1).unwrap();
        let (p, f) = report.root.leaf_sum();
        assert_eq!(p, report.total_params());
        assert_eq!(f, report.total_flops());
    }

    #[test]
    fn attention_flops_linear_in_pixels() {
        // doubling each input side at fixed K multiplies attention FLOPs by 4
        let cfg = preset("hrformer-t");
        let attn_total = |input| -> u64 {
            let report = count_flops(&cfg, input, 1).unwrap();
            let mut total = 0;
            fn walk(n: &ComplexityNode, total: &mut u64) {
                if n.name == "attn" {
                    *total += n.flops;
                }
                for c in &n.children {
                    walk(c, total);
                }
            }
            walk(&report.root, &mut total);
            total
        };
        assert_eq!(attn_total((448, 448)), 4 * attn_total((224, 224)));
    }

    #[test]
    fn unit_window_logits_collapse_to_channels_per_position() {
        let mut cfg = preset("hrformer-t");
        cfg.set_uniform_window(1);
        let report = count_flops(&cfg, (224, 224), 1).unwrap();
        let node = report
            .root
            .find("stage2.module0.stream0.block0.attn.logits")
            .unwrap();
        // N * K^2 * D with K = 1: exactly D per position
        assert_eq!(node.flops, 56 * 56 * 18);
    }

    #[test]
    fn window_sweep_trend() {
        let cfg = preset("hrformer-b");
        let sets: Vec<Vec<usize>> = [7usize, 9, 11, 13, 15]
            .iter()
            .map(|&k| alloc::vec![k; 4])
            .collect();
        let rows = window_sweep(&cfg, &sets, (1024, 1024)).unwrap();
        let p0 = rows[0].params as f64;
        for pair in rows.windows(2) {
            assert!(pair[1].flops > pair[0].flops, "flops must grow with window size");
        }
        for row in &rows {
            let dev = (row.params as f64 - p0).abs() / p0;
            assert!(dev < 0.005, "params moved {dev:.4} at {:?}", row.windows);
        }
    }

    #[test]
    fn stream_shape_law() {
        let cfg = preset("hrformer-t");
        assert_eq!(
            stream_shapes(&cfg, (224, 224)),
            alloc::vec![(18, 56, 56), (36, 28, 28), (72, 14, 14), (144, 7, 7)]
        );
        assert_eq!(
            stream_shapes(&cfg, (256, 192))[0],
            (18, 64, 48)
        );
        // pose input 384x288: highest stream 96x72
        assert_eq!(stream_shapes(&cfg, (384, 288))[0], (18, 96, 72));
    }

    #[test]
    fn report_formats() {
        let report = count_flops(&preset("hrformer-t"), (224, 224), 1).unwrap();
        let table = report.to_table(1);
        assert!(table.contains("model"));
        assert!(table.contains("stem"));
        let kv = report.to_kv();
        assert!(kv.contains("model.params="));
        assert!(kv.contains("model.stem.flops="));
    }
}
