use super::gae::compute_gae;
use super::ppo::LossBatch;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One environment step as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<O> {
    pub obs: O,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// The episode ended with this step.
    pub done: bool,
    /// Recurrent state fed into this step.
    pub hidden: Vec<f64>,
}

/// Per-worker segments of equal length plus their advantages.
#[derive(Clone, Debug)]
pub struct RolloutBuffer<O> {
    steps: usize,
    workers: Vec<Vec<Transition<O>>>,
    advantages: Option<Vec<Vec<f64>>>,
    returns: Vec<Vec<f64>>,
}

/// A time-major batch of `seqs` recurrent chunks of `steps` transitions;
/// row `t * seqs + m` is step `t` of chunk `m`.
#[derive(Debug)]
pub struct SequenceBatch<'a, O> {
    pub steps: usize,
    pub seqs: usize,
    pub obs: Vec<&'a O>,
    /// `(seqs, hidden)` state entering each chunk.
    pub hidden0: Tensor,
    /// Multiplies the carried state before step `t`: zero right after an
    /// episode ended inside the chunk.
    pub keep: Vec<f64>,
    pub loss: LossBatch,
}

impl<O> RolloutBuffer<O> {
    pub fn new(workers: usize, steps: usize) -> Self {
        RolloutBuffer {
            steps,
            workers: (0..workers).map(|_| Vec::with_capacity(steps)).collect(),
            advantages: None,
            returns: Vec::new(),
        }
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.workers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.workers.iter().all(|w| w.len() == self.steps)
    }

    pub fn push(&mut self, worker: usize, t: Transition<O>) -> Result<()> {
        let seg = &mut self.workers[worker];
        if seg.len() == self.steps {
            return Err(Error::Contract(format!("worker {worker} segment is full")));
        }
        seg.push(t);
        self.advantages = None;
        Ok(())
    }

    pub fn worker(&self, w: usize) -> &[Transition<O>] {
        &self.workers[w]
    }

    /// Fill advantages and returns; `bootstrap[w]` values the state after
    /// worker `w`'s last step.
    pub fn finish(&mut self, bootstrap: &[f64], gamma: f64, lambda: f64) -> Result<()> {
        if !self.is_full() || self.steps == 0 {
            return Err(Error::Contract("advantages need full segments".into()));
        }
        let mut adv = Vec::with_capacity(self.workers.len());
        let mut ret = Vec::with_capacity(self.workers.len());
        for (seg, &b) in self.workers.iter().zip(bootstrap) {
            let r: Vec<f64> = seg.iter().map(|t| t.reward).collect();
            let v: Vec<f64> = seg.iter().map(|t| t.value).collect();
            let d: Vec<bool> = seg.iter().map(|t| t.done).collect();
            let (a, rt) = compute_gae(&r, &v, &d, b, gamma, lambda)?;
            adv.push(a);
            ret.push(rt);
        }
        self.advantages = Some(adv);
        self.returns = ret;
        Ok(())
    }

    pub fn advantages(&self) -> Option<&[Vec<f64>]> {
        self.advantages.as_deref()
    }

    pub fn returns(&self) -> &[Vec<f64>] {
        &self.returns
    }

    pub fn clear(&mut self) {
        self.workers.iter_mut().for_each(Vec::clear);
        self.advantages = None;
        self.returns.clear();
    }

    /// Start of every chunk as `(worker, first step)`, worker-major.
    pub fn chunks(&self, seq_len: usize) -> Vec<(usize, usize)> {
        (0..self.workers.len())
            .flat_map(|w| (0..self.steps).step_by(seq_len).map(move |s| (w, s)))
            .collect()
    }

    pub fn batch(&self, chunks: &[(usize, usize)], seq_len: usize) -> Result<SequenceBatch<'_, O>> {
        let adv = self
            .advantages
            .as_ref()
            .ok_or_else(|| Error::Contract("advantages have not been computed".into()))?;
        let m = chunks.len();
        let hidden = self.workers[chunks[0].0][chunks[0].1].hidden.len();
        let mut hidden0 = Vec::with_capacity(m * hidden);
        for &(w, s) in chunks {
            if s + seq_len > self.steps {
                return Err(Error::Contract("chunk runs past the segment".into()));
            }
            hidden0.extend_from_slice(&self.workers[w][s].hidden);
        }
        let n = m * seq_len;
        let mut obs = Vec::with_capacity(n);
        let mut keep = Vec::with_capacity(n);
        let mut loss = LossBatch::with_capacity(n);
        for t in 0..seq_len {
            for &(w, s) in chunks {
                let tr = &self.workers[w][s + t];
                obs.push(&tr.obs);
                keep.push(if t > 0 && self.workers[w][s + t - 1].done { 0.0 } else { 1.0 });
                loss.actions.push(tr.action);
                loss.old_log_probs.push(tr.log_prob);
                loss.advantages.push(adv[w][s + t]);
                loss.returns.push(self.returns[w][s + t]);
            }
        }
        Ok(SequenceBatch {
            steps: seq_len,
            seqs: m,
            obs,
            hidden0: Tensor::new([m, hidden], hidden0)?,
            keep,
            loss,
        })
    }
}
