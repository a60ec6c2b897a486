use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv_out_size;
use crate::text::EMBEDDING_DIM;

/// Residual-in-residual dense block settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RrdbConfig {
    pub num_rdb: usize,
    pub convs_per_rdb: usize,
    pub growth_channels: usize,
    /// Residual scaling applied to every dense block and to the outer skip.
    pub beta: f64,
}

impl Default for RrdbConfig {
    fn default() -> Self {
        Self {
            num_rdb: 3,
            convs_per_rdb: 5,
            growth_channels: 32,
            beta: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_filters: usize,
    pub kernel: usize,
    /// Number of encoder resolutions; the last one is the fusion resolution.
    pub encoder_levels: usize,
    pub text_dim: usize,
    pub text_fc_sizes: (usize, usize),
    pub fusion_shape: (usize, usize, usize),
    pub rrdb: RrdbConfig,
    /// Filters after each upsampling step, coarse to fine.
    pub decoder_filters: Vec<usize>,
    pub output_channels: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            base_filters: 64,
            kernel: 3,
            encoder_levels: 3,
            text_dim: EMBEDDING_DIM,
            text_fc_sizes: (256, 4096),
            fusion_shape: (1, 64, 64),
            rrdb: RrdbConfig::default(),
            decoder_filters: vec![64, 32],
            output_channels: 2,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    /// Same topology at a different resolution and width; fusion and decoder sizes follow.
    ///
    /// The last decoder level keeps the full-size width of 32 channels. How
    /// fast Adam can pull the head's output toward zero chroma grows with that
    /// width, and narrower heads stall short-budget runs.
    pub fn scaled(image_size: usize, base_filters: usize, growth_channels: usize, text_hidden: usize) -> Self {
        let levels = 3;
        let fusion = image_size >> (levels - 1);
        Self {
            image_size,
            base_filters,
            encoder_levels: levels,
            text_fc_sizes: (text_hidden, fusion * fusion),
            fusion_shape: (1, fusion, fusion),
            rrdb: RrdbConfig {
                growth_channels,
                ..RrdbConfig::default()
            },
            decoder_filters: vec![base_filters, 32],
            ..Self::default()
        }
    }

    pub fn fusion_size(&self) -> usize {
        self.image_size >> (self.encoder_levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("generator: {msg}")));
        if self.encoder_levels < 2 {
            return fail(format!("encoder_levels must be >= 2, got {}", self.encoder_levels));
        }
        let down = 1usize << (self.encoder_levels - 1);
        if self.image_size == 0 || self.image_size % down != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of {down}",
                self.image_size
            ));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if self.base_filters == 0 || self.text_dim == 0 || self.text_fc_sizes.0 == 0 {
            return fail("filter and feature counts must be positive".into());
        }
        let fusion = self.fusion_size();
        if self.fusion_shape != (1, fusion, fusion) {
            return fail(format!(
                "fusion_shape {:?} must be (1, {fusion}, {fusion}) for image_size {} and {} levels",
                self.fusion_shape, self.image_size, self.encoder_levels
            ));
        }
        if self.text_fc_sizes.1 != fusion * fusion {
            return fail(format!(
                "text_fc_sizes.1 = {} must equal fusion area {}",
                self.text_fc_sizes.1,
                fusion * fusion
            ));
        }
        if self.decoder_filters.len() != self.encoder_levels - 1 || self.decoder_filters.contains(&0) {
            return fail(format!(
                "decoder_filters needs {} positive entries, got {:?}",
                self.encoder_levels - 1,
                self.decoder_filters
            ));
        }
        if self.output_channels != 2 {
            return fail(format!("output_channels must be 2 (A and B), got {}", self.output_channels));
        }
        let r = &self.rrdb;
        if r.num_rdb == 0 || r.convs_per_rdb < 2 || r.growth_channels == 0 {
            return fail(format!("rrdb layout {r:?} is degenerate"));
        }
        if !(r.beta > 0.0 && r.beta <= 1.0) {
            return fail(format!("rrdb.beta {} must be in (0, 1]", r.beta));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope {} must be in [0, 1)", self.leaky_slope));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub filters: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            filters: vec![64, 128, 256],
            strides: vec![2, 2, 1],
            kernel: 4,
            padding: 1,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn scaled(image_size: usize, base_filters: usize) -> Self {
        Self {
            image_size,
            filters: vec![base_filters, base_filters * 2, base_filters * 4],
            ..Self::default()
        }
    }

    /// (kernel, stride, padding) of every convolution including the final 1-filter one.
    pub fn layers(&self) -> Vec<(usize, usize, usize)> {
        self.strides
            .iter()
            .chain(std::iter::once(&1))
            .map(|&s| (self.kernel, s, self.padding))
            .collect()
    }

    /// Side of the square patch response map, if the stack fits the input.
    pub fn patch_size(&self) -> Option<usize> {
        self.layers()
            .into_iter()
            .try_fold(self.image_size, |size, (k, s, p)| conv_out_size(size, k, s, p).filter(|&v| v > 0))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("discriminator: {msg}")));
        if self.in_channels != 3 {
            return fail(format!("in_channels must be 3 (L stacked with AB), got {}", self.in_channels));
        }
        if self.filters.is_empty() || self.filters.len() != self.strides.len() {
            return fail(format!(
                "filters {:?} and strides {:?} must be non-empty and of equal length",
                self.filters, self.strides
            ));
        }
        if self.filters.contains(&0) || self.strides.contains(&0) || self.kernel == 0 {
            return fail("filters, strides and kernel must be positive".into());
        }
        if self.patch_size().is_none() {
            return fail(format!(
                "image_size {} is too small for the convolution stack",
                self.image_size
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope {} must be in [0, 1)", self.leaky_slope));
        }
        Ok(())
    }
}
