//! Model configuration: per-stage layout, task head, and named presets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Task head selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classification,
    Pose,
    Segmentation,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(HeadKind::Classification),
            "pose" => Ok(HeadKind::Pose),
            "segmentation" => Ok(HeadKind::Segmentation),
            other => Err(Error::Config(format!(
                "unknown head '{other}' (expected classification|pose|segmentation)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Classification => "classification",
            HeadKind::Pose => "pose",
            HeadKind::Segmentation => "segmentation",
        }
    }
}

/// The convolutional first stage: bottleneck blocks of the given internal
/// width (output channels are 4x the width).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage1Config {
    pub modules: usize,
    pub blocks: usize,
    /// Bottleneck internal width; the stage emits `4 * width` channels.
    pub width: usize,
}

/// One transformer stage; stage t (t = 2..4) runs t parallel streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub modules: usize,
    pub blocks: usize,
    /// Stream-0 width C; stream s carries C * 2^s channels.
    pub channels: usize,
    /// Heads per stream.
    pub heads: Vec<usize>,
    /// MLP expansion ratio per stream.
    pub mlp_ratio: Vec<usize>,
    /// Window size per stream.
    pub window: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stage1: Stage1Config,
    /// Transformer stages 2..=N (N up to 4); stage number t has t streams.
    pub stages: Vec<StageConfig>,
    pub head: HeadKind,
    pub num_classes: usize,
    pub num_keypoints: usize,
    pub enable_ffn_dwconv: bool,
    pub seed: u64,
}

impl ModelConfig {
    // ── presets ──────────────────────────────────────────────────────

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "hrformer-t" => Ok(Self::hrformer(&[1, 1, 3, 2], 18, &[1, 2, 4, 8])),
            "hrformer-s" => Ok(Self::hrformer(&[1, 1, 4, 2], 32, &[1, 2, 4, 8])),
            "hrformer-b" => Ok(Self::hrformer(&[1, 1, 4, 2], 78, &[2, 4, 8, 16])),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected hrformer-t|hrformer-s|hrformer-b|micro)"
            ))),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["hrformer-t", "hrformer-s", "hrformer-b", "micro"]
    }

    fn hrformer(modules: &[usize; 4], channels: usize, heads: &[usize; 4]) -> Self {
        let stages = (2..=4usize)
            .map(|t| StageConfig {
                modules: modules[t - 1],
                blocks: 2,
                channels,
                heads: heads[..t].to_vec(),
                mlp_ratio: vec![4; t],
                window: vec![7; t],
            })
            .collect();
        ModelConfig {
            stem_channels: 64,
            stage1: Stage1Config { modules: modules[0], blocks: 2, width: 64 },
            stages,
            head: HeadKind::Classification,
            num_classes: 1000,
            num_keypoints: 17,
            enable_ffn_dwconv: true,
            seed: 42,
        }
    }

    /// Tiny two-stage instance for gradient checking and toy training.
    pub fn micro() -> Self {
        ModelConfig {
            stem_channels: 8,
            stage1: Stage1Config { modules: 1, blocks: 1, width: 4 },
            stages: vec![StageConfig {
                modules: 1,
                blocks: 1,
                channels: 4,
                heads: vec![1, 2],
                mlp_ratio: vec![2, 2],
                window: vec![2, 2],
            }],
            head: HeadKind::Classification,
            num_classes: 2,
            num_keypoints: 1,
            enable_ffn_dwconv: true,
            seed: 42,
        }
    }

    // ── derived quantities ───────────────────────────────────────────

    /// Number of parallel streams after the last stage.
    pub fn stream_count(&self) -> usize {
        self.stages.len() + 1
    }

    /// Stream-0 width C.
    pub fn base_channels(&self) -> usize {
        self.stages.first().map(|s| s.channels).unwrap_or(self.stage1.width)
    }

    /// Channels per stream after the last stage: C * 2^s.
    pub fn stream_channels(&self) -> Vec<usize> {
        (0..self.stream_count()).map(|s| self.base_channels() << s).collect()
    }

    /// Total count of multi-resolution transformer modules.
    pub fn total_modules(&self) -> usize {
        self.stages.iter().map(|s| s.modules).sum()
    }

    pub fn set_uniform_window(&mut self, k: usize) {
        for stage in self.stages.iter_mut() {
            for w in stage.window.iter_mut() {
                *w = k;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be >= 1".into()));
        }
        if self.stage1.modules == 0 || self.stage1.blocks == 0 || self.stage1.width == 0 {
            return Err(Error::Config("stage 1 needs modules, blocks, width >= 1".into()));
        }
        if self.stages.is_empty() || self.stages.len() > 3 {
            return Err(Error::Config(format!(
                "expected 1..=3 transformer stages, got {}",
                self.stages.len()
            )));
        }
        let base = self.base_channels();
        for (i, stage) in self.stages.iter().enumerate() {
            let t = i + 2; // stage number, also its stream count
            let name = format!("stage {t}");
            if stage.modules == 0 || stage.blocks == 0 {
                return Err(Error::Config(format!("{name}: modules and blocks must be >= 1")));
            }
            if stage.channels != base {
                return Err(Error::Config(format!(
                    "{name}: channels {} disagree with stage 2's {base}; streams persist across stages",
                    stage.channels
                )));
            }
            for (list, what) in [
                (&stage.heads, "heads"),
                (&stage.mlp_ratio, "mlp_ratio"),
                (&stage.window, "window"),
            ] {
                if list.len() != t {
                    return Err(Error::Config(format!(
                        "{name}: {what} lists {} entries for {t} streams",
                        list.len()
                    )));
                }
                if list.iter().any(|&v| v == 0) {
                    return Err(Error::Config(format!("{name}: {what} entries must be >= 1")));
                }
            }
            for s in 0..t {
                let d = base << s;
                if d % stage.heads[s] != 0 {
                    return Err(Error::Config(format!(
                        "{name} stream {s}: channels {d} not divisible by {} heads",
                        stage.heads[s]
                    )));
                }
            }
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.num_keypoints == 0 {
            return Err(Error::Config("num_keypoints must be >= 1".into()));
        }
        Ok(())
    }

    /// One-line summary used by the CLI.
    pub fn summary(&self) -> String {
        let ch = self.stream_channels();
        format!(
            "{} streams, channels {:?}, head {}, dw-conv {}",
            self.stream_count(),
            ch,
            self.head.name(),
            if self.enable_ffn_dwconv { "on" } else { "off" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_instances() {
        // tiny: M=(1,1,3,2), B=(2,2,2,2), C=(18,36,72,144), H=(1,2,4,8)
        let t = ModelConfig::preset("hrformer-t").unwrap();
        assert_eq!(t.stage1.modules, 1);
        assert_eq!(t.stage1.blocks, 2);
        assert_eq!(
            t.stages.iter().map(|s| s.modules).collect::<Vec<_>>(),
            vec![1, 3, 2]
        );
        assert!(t.stages.iter().all(|s| s.blocks == 2));
        assert_eq!(t.stream_channels(), vec![18, 36, 72, 144]);
        assert_eq!(t.stages[2].heads, vec![1, 2, 4, 8]);
        assert_eq!(t.stages[2].mlp_ratio, vec![4, 4, 4, 4]);
        assert_eq!(t.stages[2].window, vec![7, 7, 7, 7]);
        assert_eq!(t.total_modules(), 6);

        let s = ModelConfig::preset("hrformer-s").unwrap();
        assert_eq!(
            s.stages.iter().map(|st| st.modules).collect::<Vec<_>>(),
            vec![1, 4, 2]
        );
        assert_eq!(s.stream_channels(), vec![32, 64, 128, 256]);
        assert_eq!(s.stages[2].heads, vec![1, 2, 4, 8]);

        let b = ModelConfig::preset("hrformer-b").unwrap();
        assert_eq!(b.stream_channels(), vec![78, 156, 312, 624]);
        assert_eq!(b.stages[2].heads, vec![2, 4, 8, 16]);

        for name in ["hrformer-t", "hrformer-s", "hrformer-b", "micro"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(ModelConfig::preset("hrformer-xl"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_bad_lists() {
        let mut cfg = ModelConfig::preset("hrformer-t").unwrap();
        cfg.stages[1].heads = vec![1, 2]; // stage 3 has 3 streams
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::preset("hrformer-t").unwrap();
        cfg.stages[0].heads = vec![5, 2]; // 18 % 5 != 0
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::preset("hrformer-t").unwrap();
        cfg.stages[1].channels = 20; // disagrees with stage 2
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn micro_is_small() {
        let m = ModelConfig::micro();
        assert_eq!(m.stream_count(), 2);
        assert_eq!(m.stream_channels(), vec![4, 8]);
        assert!(m.stages[0].window.iter().all(|&k| k <= 2));
    }
}
