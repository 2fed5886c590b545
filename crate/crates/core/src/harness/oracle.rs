//! Finite-difference gradient checks of every differentiable module, as run
//! by the `grad-check` command.

use rand::Rng;
use serde::Serialize;

use crate::agdf::{Agdf, AgdfConfig};
use crate::autodiff::{GradCheckConfig, GradReport, Tensor, Var};
use crate::envsim::Observation;
use crate::error::Result;
use crate::exec::Exec;
use crate::nn::{check_store_gradients, module_rng, CnnEncoder, CnnSpec, Graph, Gru, ParamStore};
use crate::pipeline::{AgentModel, ModelConfig};
use crate::policy::{ppo_loss, select_action, ActMode, ActorCritic, PolicyHead, PpoConfig, RolloutBuffer, Transition};
use crate::sam::{Sam, SamConfig};

pub const MODULES: [&str; 6] = ["cnn_encoder", "sam", "agdf", "gru", "actor_critic_head", "ppo_end_to_end"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleLine {
    pub module: &'static str,
    pub seed: u64,
    /// Largest tolerance-adjusted relative error.
    pub worst: f64,
    pub max_abs_diff: f64,
    pub passed: bool,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sizes agree")
}

/// Perturb every weight, and keep convolution biases positive so random
/// inputs stay clear of ReLU kinks.
fn perturb(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let conv_bias = {
            let name = store.name(id);
            name.contains(".conv") && name.ends_with(".bias")
        };
        for x in store.get_mut(id).data_mut() {
            *x = if conv_bias {
                rng.gen_range(0.05..0.2)
            } else {
                *x + rng.gen_range(-0.3..0.3)
            };
        }
    }
}

/// Fixed random weighting of an output, so every component matters.
fn project(g: &mut Graph, y: Var, rng: &mut impl Rng) -> Result<Var> {
    let w = random(g.shape(y), -1.0, 1.0, rng);
    let w = g.input(w);
    let t = g.tanh(y)?;
    let p = g.mul(t, w)?;
    g.sum(p)
}

fn check(store: &ParamStore, exec: Exec, f: impl Fn(&mut Graph) -> Result<Var> + Sync) -> Result<GradReport> {
    let cfg = GradCheckConfig {
        exec,
        ..GradCheckConfig::default()
    };
    check_store_gradients(store, cfg, f)
}

fn cnn(seed: u64, exec: Exec) -> Result<GradReport> {
    let mut rng = module_rng(seed, "oracle.cnn");
    let mut store = ParamStore::new();
    let enc = CnnEncoder::new(&mut store, "enc", CnnSpec::new(2, 16, 16, [2, 3, 2], 3)?, &mut rng)?;
    perturb(&mut store, &mut rng);
    let x = random(&[2, 2, 16, 16], 0.0, 1.0, &mut rng);
    let w = module_rng(seed, "oracle.cnn.w");
    check(&store, exec, |g| {
        let xv = g.input(x.clone());
        let y = enc.forward(g, xv)?;
        project(g, y, &mut w.clone())
    })
}

fn sam(seed: u64, exec: Exec) -> Result<GradReport> {
    let mut rng = module_rng(seed, "oracle.sam");
    let mut store = ParamStore::new();
    let sam = Sam::new(&mut store, "sam", SamConfig::new(4), &mut rng)?;
    perturb(&mut store, &mut rng);
    let x = random(&[2, 4, 2, 3], -1.0, 1.0, &mut rng);
    let w = module_rng(seed, "oracle.sam.w");
    check(&store, exec, |g| {
        let xv = g.input(x.clone());
        let y = sam.forward(g, xv)?;
        project(g, y, &mut w.clone())
    })
}

fn agdf(seed: u64, exec: Exec) -> Result<GradReport> {
    let mut rng = module_rng(seed, "oracle.agdf");
    let mut store = ParamStore::new();
    let agdf = Agdf::new(&mut store, "agdf", AgdfConfig::new(3, 4, 2), &mut rng)?;
    perturb(&mut store, &mut rng);
    let fa = random(&[2, 3], -1.0, 1.0, &mut rng);
    let fv = random(&[2, 3], -1.0, 1.0, &mut rng);
    let w = module_rng(seed, "oracle.agdf.w");
    check(&store, exec, |g| {
        let a = g.input(fa.clone());
        let v = g.input(fv.clone());
        let y = agdf.forward(g, a, v)?.fused;
        project(g, y, &mut w.clone())
    })
}

fn gru(seed: u64, exec: Exec) -> Result<GradReport> {
    let mut rng = module_rng(seed, "oracle.gru");
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng);
    perturb(&mut store, &mut rng);
    let xs: Vec<Tensor> = (0..3).map(|_| random(&[2, 3], -1.0, 1.0, &mut rng)).collect();
    let h0 = random(&[2, 4], -0.5, 0.5, &mut rng);
    let w = module_rng(seed, "oracle.gru.w");
    check(&store, exec, |g| {
        let mut h = g.input(h0.clone());
        for x in &xs {
            let xv = g.input(x.clone());
            h = gru.step(g, xv, h)?;
        }
        project(g, h, &mut w.clone())
    })
}

fn head(seed: u64, exec: Exec) -> Result<GradReport> {
    let mut rng = module_rng(seed, "oracle.head");
    let mut store = ParamStore::new();
    let head = PolicyHead::new(&mut store, "policy", 3, 4, 1.0, &mut rng);
    perturb(&mut store, &mut rng);
    let x = random(&[3, 3], -1.0, 1.0, &mut rng);
    let h0 = random(&[3, 4], -0.5, 0.5, &mut rng);
    let w = module_rng(seed, "oracle.head.w");
    check(&store, exec, |g| {
        let xv = g.input(x.clone());
        let h = g.input(h0.clone());
        let out = head.forward(g, xv, h)?;
        let lp = g.log_softmax(out.logits)?;
        let a = project(g, lp, &mut w.clone())?;
        let b = project(g, out.value, &mut w.clone())?;
        g.add(a, b)
    })
}

/// Smallest full agent: every module present, a few units each.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        model_dim: 4,
        heads: 2,
        visual_channels: [2, 2, 2],
        audio_channels: [2, 2, 2],
        hidden_dim: 3,
        actor_scale: 1.0,
        ..ModelConfig::desk()
    }
}

fn random_obs(cfg: &ModelConfig, rng: &mut impl Rng) -> Observation {
    Observation {
        depth: random(&[cfg.visual_height, cfg.visual_width, cfg.visual.channels()], 0.0, 1.0, rng),
        spectrogram: random(&[cfg.audio_bands, cfg.audio_frames, 2], 0.0, 1.0, rng),
    }
}

/// A three-step rollout of one worker whose episode ends after step two,
/// replayed through the model into the PPO loss.
fn end_to_end(seed: u64, exec: Exec) -> Result<GradReport> {
    let mut model = AgentModel::new(tiny_model_config(), seed)?;
    let mut rng = module_rng(seed, "oracle.e2e");
    perturb(&mut model.store, &mut rng);
    let mut buf = RolloutBuffer::new(1, 3);
    let mut h = model.initial_hidden(1);
    for t in 0..3 {
        let obs = random_obs(&model.config, &mut rng);
        let out = model.step(&[&obs], &h)?;
        let (action, log_prob) = select_action(out.logits_row(0), ActMode::Sample, &mut rng);
        // stale log-probs so the ratio is not exactly one
        let log_prob = log_prob + rng.gen_range(-0.1..0.1);
        let done = t == 1;
        buf.push(
            0,
            Transition {
                obs,
                action,
                log_prob,
                value: out.values[0],
                reward: rng.gen_range(-1.0..1.0),
                done,
                hidden: h.data().to_vec(),
            },
        )?;
        h = if done { model.initial_hidden(1) } else { out.hidden };
    }
    buf.finish(&[0.3], 0.99, 0.95)?;
    let batch = buf.batch(&buf.chunks(3), 3)?;
    let cfg = PpoConfig::default();
    check(&model.store, exec, |g| {
        let (logits, values) = model.evaluate(g, &batch)?;
        Ok(ppo_loss(g, logits, values, &batch.loss, &cfg)?.0)
    })
}

pub fn check_module(module: &str, seed: u64, exec: Exec) -> Result<OracleLine> {
    let (name, report) = match module {
        "cnn_encoder" => ("cnn_encoder", cnn(seed, exec)?),
        "sam" => ("sam", sam(seed, exec)?),
        "agdf" => ("agdf", agdf(seed, exec)?),
        "gru" => ("gru", gru(seed, exec)?),
        "actor_critic_head" => ("actor_critic_head", head(seed, exec)?),
        "ppo_end_to_end" => ("ppo_end_to_end", end_to_end(seed, exec)?),
        other => return Err(crate::Error::Config(format!("unknown module `{other}`"))),
    };
    Ok(OracleLine {
        module: name,
        seed,
        worst: report.worst(),
        max_abs_diff: report.max_abs_diff(),
        passed: report.passed(),
    })
}

/// Every module at every seed.
pub fn gradient_suite(seeds: &[u64], exec: Exec) -> Result<Vec<OracleLine>> {
    let mut out = Vec::with_capacity(MODULES.len() * seeds.len());
    for m in MODULES {
        for &s in seeds {
            out.push(check_module(m, s, exec)?);
        }
    }
    Ok(out)
}
