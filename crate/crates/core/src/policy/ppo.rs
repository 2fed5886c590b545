use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{RolloutBuffer, SequenceBatch};
use super::optim::{clip_grad_norm, Adam};
use super::{PpoConfig, NUM_ACTIONS};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore};

/// Per-sample targets of the PPO objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBatch {
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl LossBatch {
    pub fn with_capacity(n: usize) -> Self {
        LossBatch {
            actions: Vec::with_capacity(n),
            old_log_probs: Vec::with_capacity(n),
            advantages: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Shift and scale advantages to mean 0 and std 1 (std floored).
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        self.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// `policy + value_coef * value - entropy_coef * entropy`.
pub fn combine_losses(policy: f64, value: f64, entropy: f64, cfg: &PpoConfig) -> f64 {
    policy + cfg.value_coef * value - cfg.entropy_coef * entropy
}

/// Clipped surrogate plus value regression minus entropy bonus.
///
/// `logits` is `(N, 4)` and `values` is `(N)`, both in batch row order.
pub fn ppo_loss(
    g: &mut Graph,
    logits: Var,
    values: Var,
    batch: &LossBatch,
    cfg: &PpoConfig,
) -> Result<(Var, LossStats)> {
    let n = batch.len();
    if g.shape(logits) != [n, NUM_ACTIONS] || g.shape(values) != [n] {
        return Err(Error::shape(
            "ppo_loss",
            format!(
                "logits {:?} and values {:?} for {n} samples",
                g.shape(logits),
                g.shape(values)
            ),
        ));
    }
    let mut onehot = vec![0.0; n * NUM_ACTIONS];
    for (i, &a) in batch.actions.iter().enumerate() {
        onehot[i * NUM_ACTIONS + a] = 1.0;
    }
    let onehot = g.input(Tensor::new([n, NUM_ACTIONS], onehot)?);
    let old = g.input(Tensor::new([n], batch.old_log_probs.clone())?);
    let adv = g.input(Tensor::new([n], batch.advantages.clone())?);
    let ret = g.input(Tensor::new([n], batch.returns.clone())?);

    let logp_all = g.log_softmax(logits)?;
    let picked = g.mul(logp_all, onehot)?;
    let logp = g.sum_last(picked)?;
    let log_ratio = g.sub(logp, old)?;
    // exp overflows past ~709
    let worst = g
        .value(log_ratio)
        .data()
        .iter()
        .fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    if worst > 700.0 {
        return Err(Error::Instability(format!(
            "probability ratio overflows (largest |log ratio| {worst})"
        )));
    }
    let ratio = g.exp(log_ratio)?;
    let surr1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let surr2 = g.mul(clipped, adv)?;
    let surr = g.minimum(surr1, surr2)?;
    let surr = g.mean(surr)?;
    let policy_loss = g.neg(surr)?;

    let err = g.sub(values, ret)?;
    let sq = g.mul(err, err)?;
    let value_loss = g.mean(sq)?;

    let probs = g.exp(logp_all)?;
    let plogp = g.mul(probs, logp_all)?;
    let neg_h = g.sum_last(plogp)?;
    let neg_h = g.mean(neg_h)?;
    let entropy = g.neg(neg_h)?;

    let v_term = g.scale(value_loss, cfg.value_coef)?;
    let total = g.add(policy_loss, v_term)?;
    let h_term = g.scale(neg_h, cfg.entropy_coef)?;
    let total = g.add(total, h_term)?;

    let ratios = g.value(ratio).data();
    let lr = g.value(log_ratio).data();
    let stats = LossStats {
        policy_loss: g.value(policy_loss).item()?,
        value_loss: g.value(value_loss).item()?,
        entropy: g.value(entropy).item()?,
        total: g.value(total).item()?,
        clip_fraction: ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / n as f64,
        approx_kl: lr.iter().map(|l| l.exp() - 1.0 - l).sum::<f64>() / n as f64,
    };
    if !stats.total.is_finite() {
        return Err(Error::Instability(format!("non-finite loss: {stats:?}")));
    }
    Ok((total, stats))
}

/// A model PPO can update: evaluates time-major chunks of stored
/// observations, re-running the recurrence from each chunk's saved state.
pub trait ActorCritic {
    type Obs;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Returns `(logits (N, 4), values (N))` in batch row order.
    fn evaluate(&self, g: &mut Graph, batch: &SequenceBatch<'_, Self::Obs>) -> Result<(Var, Var)>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Several epochs of shuffled minibatch updates over a finished buffer.
pub fn optimize<M: ActorCritic>(
    model: &mut M,
    buffer: &RolloutBuffer<M::Obs>,
    cfg: &PpoConfig,
    adam: &mut Adam,
    rng: &mut impl Rng,
) -> Result<UpdateReport> {
    if buffer.advantages().is_none() {
        return Err(Error::Contract("optimize called before advantages were computed".into()));
    }
    let mut chunks = buffer.chunks(cfg.seq_len);
    let per_batch = (cfg.minibatch / cfg.seq_len).max(1);
    let mut report = UpdateReport::default();
    for _ in 0..cfg.epochs {
        chunks.shuffle(rng);
        for group in chunks.chunks(per_batch) {
            let mut batch = buffer.batch(group, cfg.seq_len)?;
            if cfg.normalize_advantages {
                batch.loss.normalize_advantages();
            }
            let (mut grads, stats) = {
                let mut g = Graph::new(model.params());
                let (logits, values) = model.evaluate(&mut g, &batch)?;
                let (loss, stats) = ppo_loss(&mut g, logits, values, &batch.loss, cfg)?;
                (g.backward(loss)?, stats)
            };
            if !grads.is_finite() {
                return Err(Error::Instability(format!("non-finite gradient: {stats:?}")));
            }
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.step(model.params_mut(), &grads);
            report.policy_loss += stats.policy_loss;
            report.value_loss += stats.value_loss;
            report.entropy += stats.entropy;
            report.total += stats.total;
            report.clip_fraction += stats.clip_fraction;
            report.approx_kl += stats.approx_kl;
            report.grad_norm += norm;
            report.minibatches += 1;
        }
    }
    let k = report.minibatches.max(1) as f64;
    for v in [
        &mut report.policy_loss,
        &mut report.value_loss,
        &mut report.entropy,
        &mut report.total,
        &mut report.clip_fraction,
        &mut report.approx_kl,
        &mut report.grad_norm,
    ] {
        *v /= k;
    }
    Ok(report)
}
