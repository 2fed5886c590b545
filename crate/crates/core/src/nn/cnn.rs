use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{hwc_to_chw, Conv2d, Linear};
use super::params::{Graph, ParamStore};
use crate::autodiff::{conv_out_size, Tensor, Var};
use crate::error::{Error, Result};

/// Kernel sizes of the three convolutions.
pub const KERNELS: [usize; 3] = [8, 4, 3];
pub const DEFAULT_STRIDES: [usize; 3] = [4, 2, 1];

/// Geometry of a three-convolution encoder followed by a linear projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub strides: [usize; 3],
    pub paddings: [usize; 3],
    pub out_dim: usize,
}

fn stack_output(h: usize, w: usize, strides: &[usize; 3], pads: &[usize; 3]) -> Option<(usize, usize)> {
    let mut dims = (h, w);
    for i in 0..3 {
        dims = (
            conv_out_size(dims.0, KERNELS[i], strides[i], pads[i])?,
            conv_out_size(dims.1, KERNELS[i], strides[i], pads[i])?,
        );
    }
    Some(dims)
}

impl CnnSpec {
    /// Spec with default strides and paddings from [`CnnSpec::auto_padding`].
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        channels: [usize; 3],
        out_dim: usize,
    ) -> Result<Self> {
        let paddings = Self::auto_padding(height, width, &DEFAULT_STRIDES)?;
        let spec = CnnSpec {
            in_channels,
            height,
            width,
            channels,
            strides: DEFAULT_STRIDES,
            paddings,
            out_dim,
        };
        spec.feature_map()?;
        Ok(spec)
    }

    /// Smallest per-layer zero padding (by total, then lexicographically)
    /// that leaves a final feature map of at least 2x2. Each padding is at
    /// most half its kernel.
    pub fn auto_padding(height: usize, width: usize, strides: &[usize; 3]) -> Result<[usize; 3]> {
        let limits = KERNELS.map(|k| k / 2);
        let max_total: usize = limits.iter().sum();
        for total in 0..=max_total {
            for p0 in 0..=limits[0].min(total) {
                for p1 in 0..=limits[1].min(total - p0) {
                    let p2 = total - p0 - p1;
                    if p2 > limits[2] {
                        continue;
                    }
                    let pads = [p0, p1, p2];
                    if let Some((h, w)) = stack_output(height, width, strides, &pads) {
                        if h >= 2 && w >= 2 {
                            return Ok(pads);
                        }
                    }
                }
            }
        }
        Err(Error::Config(format!(
            "no padding gives a 2x2 feature map for a {height}x{width} input"
        )))
    }

    /// Spatial size after the third convolution.
    pub fn feature_map(&self) -> Result<(usize, usize)> {
        stack_output(self.height, self.width, &self.strides, &self.paddings).ok_or_else(|| {
            Error::Config(format!(
                "kernels do not fit a {}x{} input with paddings {:?}",
                self.height, self.width, self.paddings
            ))
        })
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let (h, w) = self.feature_map()?;
        Ok(h * w * self.channels[2])
    }
}

/// Conv8x8 - ReLU - Conv4x4 - ReLU - Conv3x3 - ReLU - Linear.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    pub spec: CnnSpec,
    pub convs: [Conv2d; 3],
    pub proj: Linear,
}

impl CnnEncoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: CnnSpec, rng: &mut impl Rng) -> Result<Self> {
        let flat = spec.flat_dim()?;
        let ins = [spec.in_channels, spec.channels[0], spec.channels[1]];
        let convs = [0, 1, 2].map(|i| {
            Conv2d::new(
                store,
                &format!("{name}.conv{}", i + 1),
                ins[i],
                spec.channels[i],
                KERNELS[i],
                spec.strides[i],
                spec.paddings[i],
                true,
                rng,
            )
        });
        let proj = Linear::new(store, &format!("{name}.proj"), flat, spec.out_dim, true, rng);
        Ok(CnnEncoder { spec, convs, proj })
    }

    /// `(B, C, H, W)` input to the post-ReLU third feature map.
    pub fn conv_stack(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != [self.spec.in_channels, self.spec.height, self.spec.width] {
            return Err(Error::shape(
                "cnn_encoder",
                format!(
                    "expected (B, {}, {}, {}), got {s:?}",
                    self.spec.in_channels, self.spec.height, self.spec.width
                ),
            ));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.relu(h)?;
        }
        Ok(h)
    }

    /// Flatten a feature map and project it to `out_dim`.
    pub fn head(&self, g: &mut Graph, fmap: Var) -> Result<Var> {
        let b = g.shape(fmap)[0];
        let flat = g.reshape(fmap, &[b, self.spec.flat_dim()?])?;
        self.proj.forward(g, flat)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let fmap = self.conv_stack(g, x)?;
        self.head(g, fmap)
    }

    /// Encode one `H x W x C` image into a length-`out_dim` vector.
    pub fn encode_image(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let s = &self.spec;
        if image.shape() != [s.height, s.width, s.in_channels] {
            return Err(Error::shape(
                "cnn_encoder",
                format!(
                    "expected image {}x{}x{}, got {:?}",
                    s.height,
                    s.width,
                    s.in_channels,
                    image.shape()
                ),
            ));
        }
        let chw = hwc_to_chw(image.data(), s.height, s.width, s.in_channels)?;
        let x = g.input(Tensor::new([1, s.in_channels, s.height, s.width], chw)?);
        let y = self.forward(g, x)?;
        g.reshape(y, &[s.out_dim])
    }
}
