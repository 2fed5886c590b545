//! Recurrent actor-critic and PPO training.

mod buffer;
mod gae;
mod optim;
mod ppo;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{RolloutBuffer, SequenceBatch, Transition};
pub use gae::compute_gae;
pub use optim::{clip_grad_norm, Adam, AdamState};
pub use ppo::{combine_losses, optimize, ppo_loss, ActorCritic, LossBatch, LossStats, UpdateReport};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, Gru, Linear, ParamStore};

pub const NUM_ACTIONS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
    /// Steps each worker collects per update.
    pub rollout_steps: usize,
    /// Length of the recurrent chunks re-unrolled during updates.
    pub seq_len: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 2.5e-4,
            adam_eps: 1e-5,
            epochs: 4,
            minibatch: 64,
            max_grad_norm: 0.5,
            rollout_steps: 128,
            seq_len: 16,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("loss coefficients must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.seq_len == 0 || self.rollout_steps == 0 {
            return bad("epochs, minibatch, seq_len and rollout_steps must be positive");
        }
        if self.rollout_steps % self.seq_len != 0 {
            return bad("rollout_steps must be a multiple of seq_len");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("lr and max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

/// GRU over fused features with actor and critic heads.
#[derive(Clone, Debug)]
pub struct PolicyHead {
    pub gru: Gru,
    pub actor: Linear,
    pub critic: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `(B, 4)`
    pub logits: Var,
    /// `(B)`
    pub value: Var,
    /// `(B, hidden)`
    pub hidden: Var,
}

impl PolicyHead {
    /// `actor_scale` multiplies the actor's initial weights; small values
    /// start the policy close to uniform.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        actor_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let gru = Gru::new(store, &format!("{name}.gru"), input_dim, hidden_dim, rng);
        let actor = Linear::new(store, &format!("{name}.actor"), hidden_dim, NUM_ACTIONS, true, rng);
        store
            .get_mut(actor.weight)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= actor_scale);
        let critic = Linear::new(store, &format!("{name}.critic"), hidden_dim, 1, true, rng);
        PolicyHead { gru, actor, critic }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    pub fn forward(&self, g: &mut Graph, fused: Var, h_prev: Var) -> Result<HeadOutput> {
        let hidden = self.gru.step(g, fused, h_prev)?;
        let logits = self.actor.forward(g, hidden)?;
        let value = self.critic.forward(g, hidden)?;
        let b = g.shape(value)[0];
        let value = g.reshape(value, &[b])?;
        Ok(HeadOutput {
            logits,
            value,
            hidden,
        })
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(logits: &[f64]) -> f64 {
    log_probs(logits).iter().map(|lp| -lp.exp() * lp).sum()
}

/// Pick an action from one row of logits; returns it with its log-probability.
pub fn select_action(logits: &[f64], mode: ActMode, rng: &mut impl Rng) -> (usize, f64) {
    let lp = log_probs(logits);
    let action = match mode {
        ActMode::Greedy => (0..lp.len())
            .fold(0, |best, i| if lp[i] > lp[best] { i } else { best }),
        ActMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (action, lp[action])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub hidden: Vec<f64>,
}

/// One recurrent step and action choice for a single fused feature.
pub fn act(
    store: &ParamStore,
    head: &PolicyHead,
    fused: &[f64],
    h_prev: &[f64],
    mode: ActMode,
    rng: &mut impl Rng,
) -> Result<ActOutput> {
    let mut g = Graph::inference(store);
    let x = g.input(Tensor::new([1, fused.len()], fused.to_vec())?);
    let h = g.input(Tensor::new([1, h_prev.len()], h_prev.to_vec())?);
    let out = head.forward(&mut g, x, h)?;
    let (action, log_prob) = select_action(g.value(out.logits).data(), mode, rng);
    Ok(ActOutput {
        action,
        log_prob,
        value: g.value(out.value).data()[0],
        hidden: g.value(out.hidden).data().to_vec(),
    })
}
