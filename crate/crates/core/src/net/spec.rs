use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    count_fusion_params, InitPolicy, NddrConfig, NormPlacement, DEFAULT_SUBSPACES,
};
use crate::layers::PoolSpec;

/// Pooling at the end of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    None,
    /// 2×2 window, stride 2.
    Halving,
    /// 3×3 window, stride 1, padding 1; keeps the resolution.
    Dense,
}

impl PoolKind {
    pub fn spec(self) -> Option<PoolSpec> {
        match self {
            PoolKind::None => None,
            PoolKind::Halving => Some(PoolSpec::halving()),
            PoolKind::Dense => Some(PoolSpec::dense()),
        }
    }

    pub fn factor(self) -> usize {
        match self {
            PoolKind::Halving => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Number of 3×3 conv + ReLU layers.
    pub convs: usize,
    pub out_channels: usize,
    pub pool: PoolKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadSpec {
    /// 1×1 conv at feature resolution, bilinearly resized to the input size.
    Pixel { out_channels: usize },
    /// Global average pool followed by a fully connected layer.
    Vector { classes: usize },
}

impl HeadSpec {
    pub fn outputs(self) -> usize {
        match self {
            HeadSpec::Pixel { out_channels } => out_channels,
            HeadSpec::Vector { classes } => classes,
        }
    }

    pub fn param_count(self, in_channels: usize) -> usize {
        let o = self.outputs();
        in_channels * o + o
    }
}

/// Per-branch backbone plus one head per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub heads: Vec<HeadSpec>,
    /// Width of the shortcut reduction; defaults to the last stage width.
    pub shortcut_channels: Option<usize>,
}

impl BackboneSpec {
    /// Four stages of two 3×3 convs with widths 8, 16, 32, 64. The first
    /// stage halves the resolution; the others pool densely (3×3, stride 1),
    /// so the features sit at half the input size.
    pub fn toy_vgg(in_channels: usize, heads: Vec<HeadSpec>) -> Self {
        let pools = [
            PoolKind::Halving,
            PoolKind::Dense,
            PoolKind::Dense,
            PoolKind::Dense,
        ];
        BackboneSpec {
            in_channels,
            stages: [8, 16, 32, 64]
                .iter()
                .zip(pools)
                .map(|(&c, pool)| StageSpec {
                    convs: 2,
                    out_channels: c,
                    pool,
                })
                .collect(),
            heads,
            shortcut_channels: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.is_empty() || self.heads.is_empty() {
            return Err(Error::Invalid(
                "backbone needs input channels, at least one stage and one head".into(),
            ));
        }
        if self
            .stages
            .iter()
            .any(|s| s.convs == 0 || s.out_channels == 0)
        {
            return Err(Error::Invalid(
                "every stage needs ≥1 conv and ≥1 channel".into(),
            ));
        }
        if self.heads.iter().any(|h| h.outputs() == 0) || self.shortcut_channels == Some(0) {
            return Err(Error::Invalid(
                "heads and shortcut need ≥1 output channel".into(),
            ));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_channels).collect()
    }

    /// Input extents must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        self.stages.iter().map(|s| s.pool.factor()).product()
    }

    pub fn reduce_channels(&self) -> usize {
        self.shortcut_channels
            .unwrap_or_else(|| self.stages.last().map_or(0, |s| s.out_channels))
    }

    /// Conv weights and biases of one branch.
    pub fn branch_params(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for s in &self.stages {
            for _ in 0..s.convs {
                total += 9 * cin * s.out_channels + s.out_channels;
                cin = s.out_channels;
            }
        }
        total
    }
}

/// Network topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One branch, one head.
    Single,
    /// One branch shared by all tasks, split at the heads.
    Shared,
    Nddr,
    CrossStitch,
    Sluice,
}

impl Mode {
    pub fn is_fusion(self) -> bool {
        matches!(self, Mode::Nddr | Mode::CrossStitch | Mode::Sluice)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Shared => "shared",
            Mode::Nddr => "nddr",
            Mode::CrossStitch => "cross-stitch",
            Mode::Sluice => "sluice",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single" => Mode::Single,
            "shared" | "shared-trunk" => Mode::Shared,
            "nddr" => Mode::Nddr,
            "cross-stitch" => Mode::CrossStitch,
            "sluice" => Mode::Sluice,
            _ => {
                return Err(Error::Invalid(format!(
                    "mode `{s}`: expected single, shared, nddr, cross-stitch or sluice"
                )))
            }
        })
    }
}

/// Everything besides the backbone that determines a network's structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub mode: Mode,
    /// Aggregate every level's fusion output before the heads.
    pub shortcut: bool,
    pub init: InitPolicy,
    pub nddr: NddrConfig,
    /// Channel subspaces per task in sluice mode.
    pub subspaces: usize,
    /// Head used in single mode.
    pub task: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            mode: Mode::Nddr,
            shortcut: false,
            init: InitPolicy::RECOMMENDED,
            nddr: NddrConfig::default(),
            subspaces: DEFAULT_SUBSPACES,
            task: 0,
        }
    }
}

impl NetConfig {
    pub fn single(task: usize) -> Self {
        NetConfig {
            mode: Mode::Single,
            task,
            ..Default::default()
        }
    }

    pub fn with_mode(mode: Mode) -> Self {
        NetConfig {
            mode,
            ..Default::default()
        }
    }

    /// Number of task outputs.
    pub fn tasks(&self, spec: &BackboneSpec) -> usize {
        if self.mode == Mode::Single {
            1
        } else {
            spec.heads.len()
        }
    }

    /// Number of independent backbone branches.
    pub fn branches(&self, spec: &BackboneSpec) -> usize {
        match self.mode {
            Mode::Single | Mode::Shared => 1,
            _ => spec.heads.len(),
        }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        spec.validate()?;
        if self.mode == Mode::Single && self.task >= spec.heads.len() {
            return Err(Error::Invalid(format!(
                "task {} out of range for {} heads",
                self.task,
                spec.heads.len()
            )));
        }
        if self.mode.is_fusion() && spec.heads.len() < 2 {
            return Err(Error::Invalid(format!(
                "{} mode needs at least two tasks",
                self.mode
            )));
        }
        if self.shortcut && !self.mode.is_fusion() {
            return Err(Error::Invalid(format!(
                "shortcut requires a fusion mode, not {}",
                self.mode
            )));
        }
        if self.mode == Mode::Sluice {
            if let Some(c) = spec
                .stage_channels()
                .into_iter()
                .find(|&c| self.subspaces == 0 || c % self.subspaces != 0)
            {
                return Err(Error::Invalid(format!(
                    "{c} channels cannot be split into {} subspaces",
                    self.subspaces
                )));
            }
        }
        Ok(())
    }
}

/// Closed-form parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamLedger {
    pub backbone: usize,
    pub heads: usize,
    /// Fusion projections and biases, or mixing matrices.
    pub fusion: usize,
    /// Learned scale and shift of fusion normalization.
    pub fusion_norm: usize,
    pub shortcut: usize,
    pub total: usize,
}

impl ParamLedger {
    pub fn compute(spec: &BackboneSpec, cfg: &NetConfig) -> Result<Self> {
        cfg.validate(spec)?;
        let k = cfg.tasks(spec);
        let chans = spec.stage_channels();
        let last = *chans.last().unwrap();
        let mut l = ParamLedger {
            backbone: cfg.branches(spec) * spec.branch_params(),
            ..Default::default()
        };
        let head_in = if cfg.shortcut {
            spec.reduce_channels()
        } else {
            last
        };
        l.heads = match cfg.mode {
            Mode::Single => spec.heads[cfg.task].param_count(head_in),
            _ => spec.heads.iter().map(|h| h.param_count(head_in)).sum(),
        };
        match cfg.mode {
            Mode::Nddr => {
                let f = count_fusion_params(k, &chans, true);
                l.fusion = f.total;
                if cfg.nddr.affine && cfg.nddr.norm != NormPlacement::None {
                    l.fusion_norm = f.norm_affine;
                }
            }
            Mode::CrossStitch => l.fusion = chans.len() * k * k,
            Mode::Sluice => l.fusion = chans.len() * (k * cfg.subspaces).pow(2),
            _ => {}
        }
        if cfg.shortcut {
            let cr = spec.reduce_channels();
            l.shortcut = k * (chans.iter().sum::<usize>() * cr + cr);
        }
        l.total = l.backbone + l.heads + l.fusion + l.fusion_norm + l.shortcut;
        Ok(l)
    }
}
