use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A convolution followed by batch norm, ReLU and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    pub dropout: f64,
}

/// A residual block of `sub_blocks` identical convolution units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kernel: usize,
    pub channels: usize,
    pub sub_blocks: usize,
    pub dropout: f64,
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 4] = ["paper", "desk", "compact", "tiny"];

fn one() -> usize {
    1
}

/// Jasper-style 1D convolutional student. The stem is a stride-2 transposed
/// convolution, so the output has twice as many frames as the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output classes: graphemes plus blank.
    pub num_symbols: usize,
    pub upsample: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub dilated: ConvSpec,
    /// Pointwise layer before the output projection.
    pub head: ConvSpec,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Full-size Jasper-lip 5x3 layout.
    pub fn paper(input_dim: usize, num_symbols: usize) -> Self {
        let block = |kernel, channels, dropout| BlockSpec {
            kernel,
            channels,
            sub_blocks: 3,
            dropout,
        };
        ModelConfig {
            input_dim,
            num_symbols,
            upsample: ConvSpec {
                kernel: 11,
                channels: 256,
                dilation: 1,
                dropout: 0.2,
            },
            blocks: vec![
                block(11, 256, 0.2),
                block(13, 384, 0.2),
                block(17, 512, 0.2),
                block(21, 640, 0.3),
                block(25, 768, 0.3),
            ],
            dilated: ConvSpec {
                kernel: 29,
                channels: 896,
                dilation: 2,
                dropout: 0.4,
            },
            head: ConvSpec {
                kernel: 1,
                channels: 1024,
                dilation: 1,
                dropout: 0.4,
            },
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// Reduced layout for desktop experiments: three blocks of two sub-blocks.
    pub fn desk(input_dim: usize, num_symbols: usize) -> Self {
        let block = |kernel, channels| BlockSpec {
            kernel,
            channels,
            sub_blocks: 2,
            dropout: 0.2,
        };
        ModelConfig {
            input_dim,
            num_symbols,
            upsample: ConvSpec {
                kernel: 11,
                channels: 64,
                dilation: 1,
                dropout: 0.2,
            },
            blocks: vec![block(11, 64), block(13, 96), block(17, 128)],
            dilated: ConvSpec {
                kernel: 29,
                channels: 160,
                dilation: 2,
                dropout: 0.3,
            },
            head: ConvSpec {
                kernel: 1,
                channels: 192,
                dilation: 1,
                dropout: 0.3,
            },
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// Single-block layout that trains in seconds on one core.
    pub fn compact(input_dim: usize, num_symbols: usize) -> Self {
        ModelConfig {
            input_dim,
            num_symbols,
            upsample: ConvSpec {
                kernel: 5,
                channels: 32,
                dilation: 1,
                dropout: 0.0,
            },
            blocks: vec![BlockSpec {
                kernel: 5,
                channels: 32,
                sub_blocks: 2,
                dropout: 0.1,
            }],
            dilated: ConvSpec {
                kernel: 5,
                channels: 32,
                dilation: 2,
                dropout: 0.1,
            },
            head: ConvSpec {
                kernel: 1,
                channels: 64,
                dilation: 1,
                dropout: 0.1,
            },
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// Smallest useful layout, for gradient checks and quick experiments.
    pub fn tiny(input_dim: usize, num_symbols: usize) -> Self {
        ModelConfig {
            input_dim,
            num_symbols,
            upsample: ConvSpec {
                kernel: 3,
                channels: 8,
                dilation: 1,
                dropout: 0.0,
            },
            blocks: vec![BlockSpec {
                kernel: 3,
                channels: 8,
                sub_blocks: 2,
                dropout: 0.0,
            }],
            dilated: ConvSpec {
                kernel: 3,
                channels: 8,
                dilation: 2,
                dropout: 0.0,
            },
            head: ConvSpec {
                kernel: 1,
                channels: 8,
                dilation: 1,
                dropout: 0.0,
            },
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    pub fn preset(name: &str, input_dim: usize, num_symbols: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(input_dim, num_symbols)),
            "desk" => Ok(Self::desk(input_dim, num_symbols)),
            "compact" => Ok(Self::compact(input_dim, num_symbols)),
            "tiny" => Ok(Self::tiny(input_dim, num_symbols)),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    /// Frames spanned by the dilated layer's kernel.
    pub fn dilated_receptive_field(&self) -> usize {
        (self.dilated.kernel - 1) * self.dilated.dilation + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.num_symbols < 2 {
            return fail("need at least one grapheme plus blank".into());
        }
        if self.blocks.is_empty() {
            return fail("model needs at least one residual block".into());
        }
        let check = |name: &str, kernel: usize, channels: usize, dilation: usize, dropout: f64| {
            if kernel.is_multiple_of(2) {
                return Err(Error::Config(format!("{name}: kernel {kernel} must be odd")));
            }
            if channels == 0 || dilation == 0 {
                return Err(Error::Config(format!("{name}: channels and dilation must be positive")));
            }
            if !(0.0..1.0).contains(&dropout) {
                return Err(Error::Config(format!("{name}: dropout {dropout} not in [0, 1)")));
            }
            Ok(())
        };
        let u = &self.upsample;
        check("upsample", u.kernel, u.channels, u.dilation, u.dropout)?;
        if u.dilation != 1 {
            return fail("upsample convolution cannot be dilated".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            check(&format!("block {i}"), b.kernel, b.channels, 1, b.dropout)?;
            if b.sub_blocks == 0 {
                return fail(format!("block {i} has no sub-blocks"));
            }
        }
        let d = &self.dilated;
        check("dilated", d.kernel, d.channels, d.dilation, d.dropout)?;
        let h = &self.head;
        check("head", h.kernel, h.channels, h.dilation, h.dropout)?;
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return fail("batch norm momentum must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}
