use rand::Rng;

use super::params::{uniform_fan_in, Graph, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x W + b` on `(N, in)` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[in_dim, out_dim], in_dim, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Same layout, all weights zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim]));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_ch])));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// 1x1 convolution initialised to zero.
    pub fn zeros_1x1(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([out_ch, in_ch, 1, 1]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_ch])));
        Conv2d {
            weight,
            bias,
            stride: 1,
            padding: 0,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Convert an `H x W x C` image into a `C x H x W` buffer.
pub fn hwc_to_chw(data: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    if data.len() != h * w * c {
        return Err(Error::shape(
            "hwc_to_chw",
            format!("{} values for {h}x{w}x{c}", data.len()),
        ));
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = data[(y * w + x) * c + ch];
            }
        }
    }
    Ok(out)
}
