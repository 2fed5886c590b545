//! Audio-visual navigation in a deterministic gridworld.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation over dense `f64` tensors.
//! * [`nn`]: parameter storage, CNN encoder, multi-head attention and a GRU cell.
//! * [`sam`]: stereo-aware cross-attention between the two halves of the audio feature map.
//! * [`agdf`]: audio-guided attention over the joint audio-visual feature plus a sigmoid gate.
//! * [`envsim`]: the gridworld, binaural spectrogram synthesis, depth rendering and metrics.
//! * [`policy`]: recurrent actor-critic, GAE and the clipped PPO update.
//! * [`pipeline`]: full agent assembly with ablation switches.
//! * [`harness`]: training, evaluation, ablation sweeps, baselines and trajectory plots.

pub mod agdf;
pub mod autodiff;
pub mod envsim;
pub mod error;
pub mod exec;
pub mod harness;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod sam;

pub use error::{Error, Result};
