//! Stereo-aware attention over an audio feature map.
//!
//! The channel axis of a `(B, C, H, W)` map is split into a left and a right
//! half. Each half attends over the other half's spatial positions, the
//! result is projected by a 1x1 convolution and added back residually, and
//! the two halves are concatenated again.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{scaled_dot_product, Conv2d, Graph, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamConfig {
    /// Channel count of the full map; must be even.
    pub channels: usize,
    pub heads: usize,
    /// One set of projections for both directions. Turning this off gives
    /// each direction its own weights (and breaks swap equivariance).
    pub shared: bool,
}

impl SamConfig {
    pub fn new(channels: usize) -> Self {
        SamConfig {
            channels,
            heads: 1,
            shared: true,
        }
    }
}

#[derive(Clone, Debug)]
struct Direction {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    proj: Conv2d,
}

impl Direction {
    fn new(store: &mut ParamStore, name: &str, half: usize, rng: &mut impl Rng) -> Self {
        let conv = |store: &mut ParamStore, part: &str, rng: &mut _| {
            Conv2d::new(store, &format!("{name}.{part}"), half, half, 1, 1, 0, false, rng)
        };
        Direction {
            query: conv(store, "query", rng),
            key: conv(store, "key", rng),
            value: conv(store, "value", rng),
            proj: Conv2d::zeros_1x1(store, &format!("{name}.proj"), half, half),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sam {
    pub config: SamConfig,
    /// Left-attends-right first; a single entry when shared.
    dirs: Vec<Direction>,
}

/// Split `(B, C, H, W)` into the first and last `C / 2` channels.
pub fn channel_split(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("channel_split", format!("expected (B, C, H, W), got {s:?}")));
    }
    if s[1] % 2 != 0 {
        return Err(Error::Config(format!("cannot split {} channels in half", s[1])));
    }
    let parts = g.split(x, 1, &[s[1] / 2, s[1] / 2])?;
    Ok((parts[0], parts[1]))
}

impl Sam {
    pub fn new(store: &mut ParamStore, name: &str, config: SamConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.channels == 0 || config.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "stereo attention needs an even channel count, got {}",
                config.channels
            )));
        }
        let half = config.channels / 2;
        if config.heads == 0 || half % config.heads != 0 {
            return Err(Error::Config(format!(
                "{half} channels per side not divisible by {} heads",
                config.heads
            )));
        }
        let dirs = if config.shared {
            vec![Direction::new(store, name, half, rng)]
        } else {
            vec![
                Direction::new(store, &format!("{name}.left"), half, rng),
                Direction::new(store, &format!("{name}.right"), half, rng),
            ]
        };
        Ok(Sam { config, dirs })
    }

    /// Residual attention of `x_q` over the positions of `x_kv`, using the
    /// projections of direction `dir` (0 = left queries, 1 = right queries).
    pub fn cross_attend(&self, g: &mut Graph, dir: usize, x_q: Var, x_kv: Var) -> Result<Var> {
        let sq = g.shape(x_q).to_vec();
        if sq.len() != 4 || g.shape(x_kv) != sq.as_slice() {
            return Err(Error::shape(
                "cross_attend",
                format!("halves {sq:?} and {:?} differ", g.shape(x_kv)),
            ));
        }
        let (b, c, h, w) = (sq[0], sq[1], sq[2], sq[3]);
        let p = &self.dirs[dir.min(self.dirs.len() - 1)];
        let tokens = |g: &mut Graph, conv: &Conv2d, x: Var| -> Result<Var> {
            let y = conv.forward(g, x)?;
            let y = g.reshape(y, &[b, c, h * w])?;
            g.permute(y, &[0, 2, 1])
        };
        let q = tokens(g, &p.query, x_q)?;
        let k = tokens(g, &p.key, x_kv)?;
        let v = tokens(g, &p.value, x_kv)?;
        let (attn, _) = scaled_dot_product(g, q, k, v, self.config.heads)?;
        let attn = g.permute(attn, &[0, 2, 1])?;
        let attn = g.reshape(attn, &[b, c, h, w])?;
        let out = p.proj.forward(g, attn)?;
        g.add(out, x_q)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.config.channels {
            return Err(Error::Config(format!(
                "stereo attention built for {} channels, got input {s:?}",
                self.config.channels
            )));
        }
        let (left, right) = channel_split(g, x)?;
        let new_left = self.cross_attend(g, 0, left, right)?;
        let new_right = self.cross_attend(g, 1, right, left)?;
        g.concat(&[new_left, new_right], 1)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::{GradCheckConfig, Tensor};
    use crate::nn::{check_store_gradients, module_rng};

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Fill every projection, including Proj, with random values.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = module_rng(seed, "randomize");
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
        }
    }

    fn run(store: &ParamStore, sam: &Sam, x: &Tensor) -> Tensor {
        let mut g = Graph::inference(store);
        let xv = g.input(x.clone());
        let y = sam.forward(&mut g, xv).unwrap();
        g.value(y).clone()
    }

    fn swap_halves(x: &Tensor) -> Tensor {
        let s = x.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let half = c / 2 * hw;
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.data().chunks(c * hw).take(b) {
            out.extend_from_slice(&chunk[half..]);
            out.extend_from_slice(&chunk[..half]);
        }
        Tensor::new(s.to_vec(), out).unwrap()
    }

    #[test]
    fn split_halves_and_concat_restores() {
        let store = ParamStore::new();
        let x = random(&[1, 4, 2, 2], &mut module_rng(0, "x"));
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let (l, r) = channel_split(&mut g, xv).unwrap();
        assert_eq!(g.shape(l), &[1, 2, 2, 2]);
        assert_eq!(g.shape(r), &[1, 2, 2, 2]);
        let back = g.concat(&[l, r], 1).unwrap();
        assert_eq!(g.value(back), &x);

        let wide = g.input(Tensor::zeros([1, 64, 2, 2]));
        let (l, _) = channel_split(&mut g, wide).unwrap();
        assert_eq!(g.shape(l)[1], 32);

        let odd = g.input(Tensor::zeros([1, 3, 2, 2]));
        assert!(matches!(channel_split(&mut g, odd), Err(Error::Config(_))));
    }

    #[test]
    fn odd_channel_count_is_rejected() {
        let mut store = ParamStore::new();
        let r = Sam::new(&mut store, "sam", SamConfig::new(7), &mut module_rng(0, "sam"));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_projection_is_exact_identity() {
        let mut store = ParamStore::new();
        let sam = Sam::new(&mut store, "sam", SamConfig::new(8), &mut module_rng(1, "sam")).unwrap();
        let x = random(&[2, 8, 4, 4], &mut module_rng(2, "x"));
        assert_eq!(run(&store, &sam, &x), x);
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = module_rng(3, "shapes");
        for i in 0..100 {
            let half = rng.gen_range(1..4);
            let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
            let mut store = ParamStore::new();
            let sam = Sam::new(
                &mut store,
                "sam",
                SamConfig::new(2 * half),
                &mut module_rng(i, "sam"),
            )
            .unwrap();
            randomize(&mut store, i);
            let x = random(&[b, 2 * half, h, w], &mut rng);
            assert_eq!(run(&store, &sam, &x).shape(), x.shape());
        }
    }

    #[test]
    fn equal_halves_give_equal_outputs() {
        let mut store = ParamStore::new();
        let sam = Sam::new(&mut store, "sam", SamConfig::new(4), &mut module_rng(4, "sam")).unwrap();
        randomize(&mut store, 4);
        let half = random(&[1, 2, 3, 3], &mut module_rng(5, "x"));
        let mut g = Graph::inference(&store);
        let a = g.input(half.clone());
        let left = sam.cross_attend(&mut g, 0, a, a).unwrap();
        let right = sam.cross_attend(&mut g, 1, a, a).unwrap();
        assert_eq!(g.value(left), g.value(right));
    }

    #[test]
    fn swapping_input_halves_swaps_output_halves() {
        let mut store = ParamStore::new();
        let mut config = SamConfig::new(8);
        config.heads = 2;
        let sam = Sam::new(&mut store, "sam", config, &mut module_rng(6, "sam")).unwrap();
        randomize(&mut store, 6);
        let x = random(&[2, 8, 3, 4], &mut module_rng(7, "x"));
        let direct = run(&store, &sam, &swap_halves(&x));
        let swapped = swap_halves(&run(&store, &sam, &x));
        for (a, b) in direct.data().iter().zip(swapped.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn unshared_directions_have_their_own_weights() {
        let mut shared = ParamStore::new();
        Sam::new(&mut shared, "sam", SamConfig::new(8), &mut module_rng(0, "sam")).unwrap();
        let mut unshared = ParamStore::new();
        let mut config = SamConfig::new(8);
        config.shared = false;
        Sam::new(&mut unshared, "sam", config, &mut module_rng(0, "sam")).unwrap();
        assert_eq!(unshared.num_scalars(), 2 * shared.num_scalars());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for shared in [true, false] {
            let mut store = ParamStore::new();
            let config = SamConfig {
                channels: 4,
                heads: 1,
                shared,
            };
            let sam = Sam::new(&mut store, "sam", config, &mut module_rng(8, "sam")).unwrap();
            randomize(&mut store, 8);
            let x = store.add("x", random(&[1, 4, 2, 3], &mut module_rng(9, "x")));
            let report = check_store_gradients(&store, GradCheckConfig::default(), |g| {
                let xv = g.param(x);
                let y = sam.forward(g, xv)?;
                let y = g.tanh(y)?;
                g.sum(y)
            })
            .unwrap();
            assert!(report.passed(), "shared={shared} worst {}", report.worst());
        }
    }
}
