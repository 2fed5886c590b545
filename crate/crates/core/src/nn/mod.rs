//! Layers built on the autodiff tape: parameter storage, linear and
//! convolutional layers, the CNN encoder, multi-head attention and a GRU.

mod attention;
mod cnn;
mod gru;
mod layers;
mod params;

pub use attention::{scaled_dot_product, Mha, MhaOutput};
pub use cnn::{CnnEncoder, CnnSpec, DEFAULT_STRIDES, KERNELS};
pub use gru::Gru;
pub use layers::{hwc_to_chw, Conv2d, Linear};
pub use params::{module_rng, uniform_fan_in, Gradients, Graph, ParamId, ParamStore};

use crate::autodiff::{check_gradients, GradCheckConfig, GradReport, Tape, Var};
use crate::error::Result;

/// Finite-difference check of every parameter in `store` for the scalar
/// produced by `f`.
pub fn check_store_gradients<F>(store: &ParamStore, cfg: GradCheckConfig, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var> + Sync,
{
    check_gradients(
        |tape, vars| {
            let owned = std::mem::replace(tape, Tape::new());
            let mut g = Graph::with_bound(store, owned, vars);
            let out = f(&mut g);
            *tape = g.into_tape();
            out
        },
        store.tensors(),
        cfg,
    )
}

#[cfg(test)]
mod tests;
