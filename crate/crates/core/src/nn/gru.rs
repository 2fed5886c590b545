use rand::Rng;

use super::params::{uniform_fan_in, Graph, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Gated recurrent unit.
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W x + U (r * h) + b)
/// h' = (1 - z) * h + z * h~
/// ```
///
/// Input weights of the three gates are stored fused as `(in, 3h)` in the
/// order `[z, r, candidate]`; the update/reset recurrent weights as `(h, 2h)`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_input: ParamId,
    pub u_gates: ParamId,
    pub u_candidate: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let h = hidden_dim;
        Gru {
            w_input: store.add(
                format!("{name}.w_input"),
                uniform_fan_in(&[input_dim, 3 * h], input_dim, rng),
            ),
            u_gates: store.add(
                format!("{name}.u_gates"),
                uniform_fan_in(&[h, 2 * h], h, rng),
            ),
            u_candidate: store.add(
                format!("{name}.u_candidate"),
                uniform_fan_in(&[h, h], h, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([3 * h])),
            input_dim,
            hidden_dim,
        }
    }

    /// One step on a batch: `x (B, in)`, `h (B, hidden)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let (sx, sh) = (g.shape(x).to_vec(), g.shape(h).to_vec());
        if sx.len() != 2 || sx[1] != self.input_dim || sh != [sx[0], self.hidden_dim] {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "input {sx:?} / hidden {sh:?} for a {}->{} cell",
                    self.input_dim, self.hidden_dim
                ),
            ));
        }
        let hd = self.hidden_dim;
        let w = g.param(self.w_input);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        let xw = g.add_bias(xw, b)?;
        let xs = g.split(xw, 1, &[hd, hd, hd])?;

        let u = g.param(self.u_gates);
        let hu = g.matmul(h, u)?;
        let hs = g.split(hu, 1, &[hd, hd])?;

        let z = g.add(xs[0], hs[0])?;
        let z = g.sigmoid(z)?;
        let r = g.add(xs[1], hs[1])?;
        let r = g.sigmoid(r)?;

        let rh = g.mul(r, h)?;
        let uc = g.param(self.u_candidate);
        let rec = g.matmul(rh, uc)?;
        let cand = g.add(xs[2], rec)?;
        let cand = g.tanh(cand)?;

        // h + z * (h~ - h): exact carry-through when z == 0
        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        g.add(h, step)
    }
}
