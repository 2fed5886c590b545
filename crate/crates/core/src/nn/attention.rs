use rand::Rng;

use super::layers::Linear;
use super::params::{Graph, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Multi-head scaled dot-product attention over `(B, n, d)` token tensors.
///
/// Each head sees a contiguous `d / heads` slice of the feature axis and
/// uses `softmax(Q K^T / sqrt(d_head)) V`. Returns the concatenated head
/// outputs `(B, n_q, d)` and the attention weights `(B * heads, n_q, n_k)`.
pub fn scaled_dot_product(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv != sk || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::shape(
            "attention",
            format!("q {sq:?}, k {sk:?}, v {sv:?}"),
        ));
    }
    let (b, nq, d) = (sq[0], sq[1], sq[2]);
    let nk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;

    let to_heads = |g: &mut Graph, x: Var, n: usize| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, n, dh])
    };
    let qh = to_heads(g, q, nq)?;
    let kh = to_heads(g, k, nk)?;
    let vh = to_heads(g, v, nk)?;

    let kt = g.permute(kh, &[0, 2, 1])?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let out = g.bmm(weights, vh)?;

    let out = if heads == 1 {
        out
    } else {
        let o = g.reshape(out, &[b, heads, nq, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        g.reshape(o, &[b, nq, d])?
    };
    Ok((out, weights))
}

/// Multi-head attention with query/key/value projections (fused across
/// heads, no bias) and an output projection with bias.
#[derive(Clone, Debug)]
pub struct Mha {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MhaOutput {
    pub out: Var,
    pub weights: Var,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Mha {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, false, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, true, rng),
            heads,
            d_model,
        })
    }

    fn project(&self, g: &mut Graph, layer: &Linear, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::shape(
                "mha",
                format!("expected (B, n, {}), got {s:?}", self.d_model),
            ));
        }
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = layer.forward(g, flat)?;
        g.reshape(y, &s)
    }

    /// `query (B, n_q, d)` attends over `context (B, n_k, d)`.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Result<MhaOutput> {
        let q = self.project(g, &self.query, query)?;
        let k = self.project(g, &self.key, context)?;
        let v = self.project(g, &self.value, context)?;
        let (attn, weights) = scaled_dot_product(g, q, k, v, self.heads)?;
        let out = self.project(g, &self.out, attn)?;
        Ok(MhaOutput { out, weights })
    }
}
