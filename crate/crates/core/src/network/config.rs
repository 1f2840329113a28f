use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Downsampling used between consecutive paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    /// Attention-guided index pooling.
    #[default]
    Damip,
    MaxPool,
    AvgPool,
    Stochastic,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Damip => "damip",
            PoolMode::MaxPool => "maxpool",
            PoolMode::AvgPool => "avgpool",
            PoolMode::Stochastic => "stochastic",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "damip" => Ok(PoolMode::Damip),
            "maxpool" => Ok(PoolMode::MaxPool),
            "avgpool" => Ok(PoolMode::AvgPool),
            "stochastic" => Ok(PoolMode::Stochastic),
            other => Err(Error::Config(format!(
                "unknown pool mode {other:?} (expected damip, maxpool, avgpool or stochastic)"
            ))),
        }
    }
}

/// Component substitutions for ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub pool_mode: PoolMode,
    /// When false only the final output is supervised; intermediate maps are
    /// still produced because the attention modules consume them.
    pub deep_supervision: bool,
    pub dilation_enabled: bool,
    pub damsca_enabled: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            pool_mode: PoolMode::Damip,
            deep_supervision: true,
            dilation_enabled: true,
            damsca_enabled: true,
        }
    }
}

impl Ablation {
    /// Named single-component variants: `full`, `maxpool`, `avgpool`,
    /// `stochastic`, `no-deep-supervision`, `no-dilation`, `no-damsca`.
    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "maxpool" | "avgpool" | "stochastic" => a.pool_mode = name.parse()?,
            "no-deep-supervision" => a.deep_supervision = false,
            "no-dilation" => a.dilation_enabled = false,
            "no-damsca" => a.damsca_enabled = false,
            other => {
                return Err(Error::Config(format!("unknown ablation variant {other:?}")));
            }
        }
        Ok(a)
    }

    pub const VARIANTS: [&'static str; 7] = [
        "full",
        "maxpool",
        "avgpool",
        "stochastic",
        "no-deep-supervision",
        "no-dilation",
        "no-damsca",
    ];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width `C` of the first path; path `i` runs at `2^(i−1)·C`.
    pub base_channels: usize,
    pub paths: usize,
    pub blocks_per_path: usize,
    /// Dilation constant `r`; block `j` of path `i` uses dilation `i·j·r`.
    pub dilation_constant: usize,
    /// Input `(height, width)`.
    pub input_size: (usize, usize),
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size profile: C = 64, four paths of four blocks, 512×512 input.
    pub fn paper() -> Self {
        Self {
            base_channels: 64,
            paths: 4,
            blocks_per_path: 4,
            dilation_constant: 1,
            input_size: (512, 512),
            ablation: Ablation::default(),
        }
    }

    /// Laptop-scale profile: C = 8 at 128×128.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            input_size: (128, 128),
            ..Self::paper()
        }
    }

    /// Every spatial extent must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.paths
    }

    pub fn path_channels(&self, path: usize) -> usize {
        self.base_channels << (path - 1)
    }

    /// Channels of the concatenated decoder input: `(2^L − 1)·C`.
    pub fn decoder_channels(&self) -> usize {
        ((1 << self.paths) - 1) * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Config("paths must be at least 1".into()));
        }
        if self.paths > 8 {
            return Err(Error::Config(format!("paths = {} is unreasonably deep", self.paths)));
        }
        if self.blocks_per_path == 0 {
            return Err(Error::Config("blocks_per_path must be at least 1".into()));
        }
        if self.dilation_constant == 0 {
            return Err(Error::Config("dilation constant must be at least 1".into()));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base channels must be even and at least 2, got {}",
                self.base_channels
            )));
        }
        let (h, w) = self.input_size;
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input size {h}×{w} must be a positive multiple of 2^paths = {m}"
            )));
        }
        Ok(())
    }
}
