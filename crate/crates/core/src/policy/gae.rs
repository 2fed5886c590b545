use crate::error::{Error, Result};

/// Generalised advantage estimation over one worker's segment.
///
/// `done[t]` marks that the episode ended at step `t`, which stops both the
/// bootstrap and the advantage recursion from reaching across it.
/// `bootstrap` is the value estimate of the state after the last step.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Contract("advantage estimation on an empty segment".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::Contract(format!(
            "{n} rewards but {} values and {} done flags",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}
