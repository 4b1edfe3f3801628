//! Network shape descriptors: blocks, downsampling and auxiliary-head
//! schedules, width propagation, and the named presets.
//!
//! Widths follow one rule: the output width of a block equals its input
//! width, doubled when the block has a downsampling operator in front of it.
//! The first block's output width is `M`. Downsample indices are zero-based
//! block indices; the operator runs before that block's convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleKind {
    /// Lossless 2x2-neighborhood-to-channels rearrangement (the default).
    Invertible,
    /// The block's own 3x3 convolution with stride 2.
    Stride,
    AvgPool,
    MaxPool,
}

impl std::str::FromStr for DownsampleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invertible" => Ok(Self::Invertible),
            "stride" => Ok(Self::Stride),
            "avg" => Ok(Self::AvgPool),
            "max" => Ok(Self::MaxPool),
            other => Err(Error::Config(format!(
                "unknown downsample kind '{other}' (expected invertible|stride|avg|max)"
            ))),
        }
    }
}

/// Shape contract for one block: `x_{j+1} = relu(bn?(conv(P_j x_j)))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub index: usize,
    pub downsample: Option<DownsampleKind>,
    /// Channels entering the downsampling operator.
    pub in_width: usize,
    /// Channels entering the convolution (4x `in_width` for invertible P).
    pub conv_in: usize,
    pub out_width: usize,
    pub batchnorm: bool,
    pub spatial_in: (usize, usize),
    pub spatial_out: (usize, usize),
}

/// Shape contract for one auxiliary head: `k-1` constant-width convolutions,
/// quadrant average, linear map to the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSpec {
    pub k: usize,
    /// Width of the auxiliary convolutions; irrelevant for `k == 1`.
    pub width: usize,
    pub batchnorm: bool,
    pub in_width: usize,
    pub classes: usize,
    /// Halve the spatial resolution (2x2 average) before the aux convolutions.
    pub prepool: bool,
    pub spatial: (usize, usize),
}

impl AuxSpec {
    pub fn conv_count(&self) -> usize {
        self.k - 1
    }

    /// Channel count entering the quadrant average.
    pub fn pooled_width(&self) -> usize {
        if self.k == 1 {
            self.in_width
        } else {
            self.width
        }
    }

    /// Flattened feature dimension entering the linear head.
    pub fn head_dim(&self) -> usize {
        self.pooled_width() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub blocks: Vec<BlockSpec>,
    pub aux: Vec<AuxSpec>,
    pub input_downsample: bool,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub class_count: usize,
}

impl NetworkSpec {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Activation shape (channels, h, w) after block `j` (zero-based), or the
    /// network input shape for `j = None`.
    pub fn shape_after(&self, j: Option<usize>) -> (usize, usize, usize) {
        match j {
            None => {
                let b = &self.blocks[0];
                (b.in_width, b.spatial_in.0, b.spatial_in.1)
            }
            Some(j) => {
                let b = &self.blocks[j];
                (b.out_width, b.spatial_out.0, b.spatial_out.1)
            }
        }
    }
}

/// Architecture half of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Block count J.
    pub layers: usize,
    /// Hidden-layer count of each auxiliary problem.
    pub k: usize,
    /// Output width of the first block (M).
    pub width: usize,
    /// Auxiliary convolution width (M~).
    pub aux_width: usize,
    /// Width of the final layer's auxiliary network (M~_f); defaults to `aux_width`.
    pub aux_width_final: Option<usize>,
    /// Zero-based block indices with a downsampling operator in front.
    pub downsample_at: Vec<usize>,
    pub downsample_kind: DownsampleKind,
    /// Apply invertible downsampling to the raw input image.
    pub input_downsample: bool,
    /// Batch-norm inside auxiliary heads (k > 1 recipes).
    pub batchnorm_aux: bool,
    /// Batch-norm after the main block convolution.
    pub batchnorm_main: bool,
    pub classes: usize,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    /// Explicit per-block output widths; overrides the doubling rule
    /// (used by the VGG-11 configuration).
    pub explicit_widths: Option<Vec<usize>>,
    /// Halve spatial resolution before auxiliary convolutions.
    pub aux_prepool: bool,
}

/// Propagate widths and spatial sizes through the schedule, validating
/// consistency. This is pure shape arithmetic; no parameters are allocated.
pub fn build_network(cfg: &NetConfig) -> Result<NetworkSpec> {
    if cfg.layers == 0 || cfg.width == 0 || cfg.aux_width == 0 || cfg.classes == 0 {
        return Err(Error::Config("layers, widths and class count must be positive".into()));
    }
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if let Some(&bad) = cfg.downsample_at.iter().find(|&&j| j >= cfg.layers) {
        return Err(Error::Config(format!(
            "downsample index {bad} out of range for {} layers",
            cfg.layers
        )));
    }
    if let Some(ws) = &cfg.explicit_widths {
        if ws.len() != cfg.layers {
            return Err(Error::Config("explicit_widths length must equal layer count".into()));
        }
    }

    let (mut h, mut w) = cfg.input_hw;
    let mut width = cfg.input_channels;
    if cfg.input_downsample {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "input downsampling needs even input size, got {h}x{w}"
            )));
        }
        width *= 4;
        h /= 2;
        w /= 2;
    }

    let mut blocks = Vec::with_capacity(cfg.layers);
    let mut aux = Vec::with_capacity(cfg.layers);
    for j in 0..cfg.layers {
        let ds = cfg.downsample_at.contains(&j).then_some(cfg.downsample_kind);
        let spatial_in = (h, w);
        let in_width = width;
        if ds.is_some() {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "downsampling at block {j} needs even size, got {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
        }
        let conv_in = match ds {
            Some(DownsampleKind::Invertible) => in_width * 4,
            _ => in_width,
        };
        let out_width = match &cfg.explicit_widths {
            Some(ws) => ws[j],
            None if j == 0 => cfg.width,
            None if ds.is_some() => in_width * 2,
            None => in_width,
        };
        blocks.push(BlockSpec {
            index: j,
            downsample: ds,
            in_width,
            conv_in,
            out_width,
            batchnorm: cfg.batchnorm_main,
            spatial_in,
            spatial_out: (h, w),
        });
        let aux_width = if j + 1 == cfg.layers {
            cfg.aux_width_final.unwrap_or(cfg.aux_width)
        } else {
            cfg.aux_width
        };
        aux.push(AuxSpec {
            k: cfg.k,
            width: aux_width,
            batchnorm: cfg.batchnorm_aux && cfg.k > 1,
            in_width: out_width,
            classes: cfg.classes,
            prepool: cfg.aux_prepool,
            spatial: (h, w),
        });
        width = out_width;
    }

    Ok(NetworkSpec {
        blocks,
        aux,
        input_downsample: cfg.input_downsample,
        input_channels: cfg.input_channels,
        input_hw: cfg.input_hw,
        class_count: cfg.classes,
    })
}
