use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agents::{sample_episode, Agent};
use super::checkpoint::Checkpoint;
use super::config::{load_maps, RunConfig, Setting};
use super::eval::{evaluate, EvalSummary};
use crate::autodiff::Tensor;
use crate::envsim::{Action, EnvProgress, EpisodeConfig, GridMap, NavEnv, Observation, Signature};
use crate::error::{Error, Result};
use crate::exec::map_mut;
use crate::nn::module_rng;
use crate::pipeline::AgentModel;
use crate::policy::{optimize, select_action, ActMode, Adam, RolloutBuffer, Transition, UpdateReport};

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// `u128` as decimal text; JSON numbers stop at 64 bits.
    word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    rng: RngState,
    map: usize,
    sound: usize,
    episode: EpisodeConfig,
    progress: EnvProgress,
    hidden: Vec<f64>,
    episode_return: f64,
}

/// Everything besides weights and optimizer moments needed to continue a
/// run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    rng: RngState,
    workers: Vec<WorkerState>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub env_steps: u64,
    /// Episodes finished during this update's rollout.
    pub episodes: u64,
    pub success_rate: Option<f64>,
    pub mean_return: Option<f64>,
    pub mean_length: Option<f64>,
    #[serde(flatten)]
    pub loss: UpdateReport,
    pub eval: Option<EvalSummary>,
}

#[derive(Serialize)]
struct UpdateLine<'a> {
    record: &'static str,
    #[serde(flatten)]
    inner: &'a UpdateRecord,
}

struct Worker {
    rng: ChaCha8Rng,
    map: usize,
    sound: usize,
    env: NavEnv,
    obs: Observation,
    hidden: Vec<f64>,
    episode_return: f64,
}

struct Finished {
    success: bool,
    ret: f64,
    length: u32,
}

/// Shared read-only inputs for starting episodes.
struct Episodes<'a> {
    cfg: &'a RunConfig,
    maps: &'a [(String, Arc<GridMap>)],
    sounds: &'a [Signature],
}

impl Episodes<'_> {
    fn start(&self, rng: &mut ChaCha8Rng) -> Result<(usize, usize, NavEnv)> {
        let c = self.cfg;
        let draw = sample_episode(self.maps, self.sounds, c.env.source, c.env.step_limit, c.model.blind, rng)?;
        let env = NavEnv::new(self.maps[draw.map].1.clone(), draw.config, c.audio(), c.depth())?;
        Ok((draw.map, draw.sound, env))
    }
}

impl Worker {
    fn new(mut rng: ChaCha8Rng, episodes: &Episodes<'_>, hidden_dim: usize) -> Result<Self> {
        let (map, sound, env) = episodes.start(&mut rng)?;
        Ok(Worker {
            rng,
            map,
            sound,
            obs: episodes.cfg.model.prepare(env.observe()),
            env,
            hidden: vec![0.0; hidden_dim],
            episode_return: 0.0,
        })
    }

    fn reset(&mut self, episodes: &Episodes<'_>) -> Result<()> {
        let (map, sound, env) = episodes.start(&mut self.rng)?;
        self.map = map;
        self.sound = sound;
        self.obs = episodes.cfg.model.prepare(env.observe());
        self.env = env;
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
        self.episode_return = 0.0;
        Ok(())
    }

    /// Sample an action, step, and start a new episode if this one ended.
    fn advance(
        &mut self,
        logits: &[f64],
        value: f64,
        next_hidden: &[f64],
        episodes: &Episodes<'_>,
    ) -> Result<(Transition<Observation>, Option<Finished>)> {
        let (action, log_prob) = select_action(logits, ActMode::Sample, &mut self.rng);
        let r = self.env.step(Action::from_index(action).expect("four actions"))?;
        self.episode_return += r.reward;
        let obs = std::mem::replace(&mut self.obs, episodes.cfg.model.prepare(r.obs));
        let hidden = std::mem::replace(&mut self.hidden, next_hidden.to_vec());
        let t = Transition {
            obs,
            action,
            log_prob,
            value,
            reward: r.reward,
            done: r.done,
            hidden,
        };
        let finished = if r.done {
            let f = Finished {
                success: r.info.success,
                ret: self.episode_return,
                length: self.env.state().steps_taken,
            };
            self.reset(episodes)?;
            Some(f)
        } else {
            None
        };
        Ok((t, finished))
    }

    fn state(&self) -> WorkerState {
        WorkerState {
            rng: RngState::capture(&self.rng),
            map: self.map,
            sound: self.sound,
            episode: self.env.config().clone(),
            progress: self.env.progress().clone(),
            hidden: self.hidden.clone(),
            episode_return: self.episode_return,
        }
    }

    fn restore(s: &WorkerState, episodes: &Episodes<'_>) -> Result<Self> {
        let c = episodes.cfg;
        let map = episodes
            .maps
            .get(s.map)
            .ok_or_else(|| Error::Checkpoint(format!("worker map index {} out of range", s.map)))?;
        let env = NavEnv::restore(map.1.clone(), s.episode.clone(), c.audio(), c.depth(), s.progress.clone())?;
        if s.hidden.len() != c.model.hidden_dim {
            return Err(Error::Checkpoint("worker hidden state has the wrong size".into()));
        }
        Ok(Worker {
            rng: s.rng.restore()?,
            map: s.map,
            sound: s.sound,
            obs: c.model.prepare(env.observe()),
            env,
            hidden: s.hidden.clone(),
            episode_return: s.episode_return,
        })
    }
}

/// Rollout and update loop over a fixed set of parallel environments.
pub struct Trainer {
    pub config: RunConfig,
    pub model: AgentModel,
    pub adam: Adam,
    maps: Vec<(String, Arc<GridMap>)>,
    sounds: Vec<Signature>,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub history: Vec<UpdateRecord>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = AgentModel::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(&model.store, config.ppo.lr, config.ppo.adam_eps);
        let maps = load_maps(&config.env.train_maps, config.env.source)?;
        let sounds = config.sound_pools()?.heard;
        let workers = {
            let eps = Episodes {
                cfg: &config,
                maps: &maps,
                sounds: &sounds,
            };
            (0..config.env.workers)
                .map(|i| Worker::new(module_rng(config.seed, &format!("worker{i}")), &eps, config.model.hidden_dim))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Trainer {
            rng: module_rng(config.seed, "updates"),
            config,
            model,
            adam,
            maps,
            sounds,
            workers,
            env_steps: 0,
            updates: 0,
            episodes: 0,
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            env_steps: self.env_steps,
            updates: self.updates,
            episodes: self.episodes,
            rng: RngState::capture(&self.rng),
            workers: self.workers.iter().map(Worker::state).collect(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            trainer: Some(self.state()),
            params: self.model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: Some(self.adam.state.clone()),
        }
    }

    /// Continue a run; `config` replaces the stored one (for example with a
    /// larger step budget) but must describe the same model.
    pub fn resume(ckpt: &Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let state = ckpt
            .trainer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds weights only; cannot resume training".into()))?;
        let adam_state = ckpt
            .adam
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let config = config.unwrap_or_else(|| ckpt.config.clone());
        if config.model != ckpt.config.model {
            return Err(Error::Config("model settings differ from the checkpoint".into()));
        }
        config.validate()?;
        let model = ckpt.model()?;
        let mut adam = Adam::new(&model.store, config.ppo.lr, config.ppo.adam_eps);
        if adam_state.m.len() != adam.state.m.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        adam.state = adam_state;
        let maps = load_maps(&config.env.train_maps, config.env.source)?;
        let sounds = config.sound_pools()?.heard;
        if state.workers.len() != config.env.workers {
            return Err(Error::Config(format!(
                "checkpoint has {} workers, config {}",
                state.workers.len(),
                config.env.workers
            )));
        }
        let workers = {
            let eps = Episodes {
                cfg: &config,
                maps: &maps,
                sounds: &sounds,
            };
            state
                .workers
                .iter()
                .map(|w| Worker::restore(w, &eps))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Trainer {
            rng: state.rng.restore()?,
            config,
            model,
            adam,
            maps,
            sounds,
            workers,
            env_steps: state.env_steps,
            updates: state.updates,
            episodes: state.episodes,
            history: Vec::new(),
        })
    }

    fn hidden_batch(&self) -> Result<Tensor> {
        let h = self.model.hidden_dim();
        let data = self.workers.iter().flat_map(|w| w.hidden.iter().copied()).collect();
        Tensor::new([self.workers.len(), h], data)
    }

    fn collect(&mut self) -> Result<(RolloutBuffer<Observation>, Vec<Finished>)> {
        let steps = self.config.ppo.rollout_steps;
        let n = self.workers.len();
        let h = self.model.hidden_dim();
        let mut buf = RolloutBuffer::new(n, steps);
        let mut finished = Vec::new();
        let exec = self.config.train.exec;
        for _ in 0..steps {
            let out = {
                let obs: Vec<&Observation> = self.workers.iter().map(|w| &w.obs).collect();
                self.model.step(&obs, &self.hidden_batch()?)?
            };
            let eps = Episodes {
                cfg: &self.config,
                maps: &self.maps,
                sounds: &self.sounds,
            };
            let results = map_mut(exec, &mut self.workers, |i, w| {
                w.advance(
                    out.logits_row(i),
                    out.values[i],
                    &out.hidden.data()[i * h..(i + 1) * h],
                    &eps,
                )
            });
            for (i, r) in results.into_iter().enumerate() {
                let (t, f) = r?;
                buf.push(i, t)?;
                finished.extend(f);
            }
        }
        let bootstrap = {
            let obs: Vec<&Observation> = self.workers.iter().map(|w| &w.obs).collect();
            self.model.step(&obs, &self.hidden_batch()?)?.values
        };
        buf.finish(&bootstrap, self.config.ppo.gamma, self.config.ppo.lambda)?;
        self.env_steps += (n * steps) as u64;
        Ok((buf, finished))
    }

    /// One rollout plus one PPO update.
    pub fn update(&mut self) -> Result<UpdateRecord> {
        let (buf, finished) = self.collect()?;
        let loss = optimize(&mut self.model, &buf, &self.config.ppo, &mut self.adam, &mut self.rng)?;
        self.updates += 1;
        self.episodes += finished.len() as u64;
        let k = finished.len() as f64;
        let mean = |f: &dyn Fn(&Finished) -> f64| (k > 0.0).then(|| finished.iter().map(f).sum::<f64>() / k);
        let interval = self.config.train.eval_interval;
        let eval = if interval > 0 && self.updates % interval == 0 {
            let report = evaluate(
                Agent::Policy(&self.model),
                &self.config,
                Setting::Heard,
                self.config.model.blind,
                self.config.train.eval_episodes,
                self.config.eval.exec,
            )?;
            Some(report.summary)
        } else {
            None
        };
        let record = UpdateRecord {
            update: self.updates,
            env_steps: self.env_steps,
            episodes: finished.len() as u64,
            success_rate: mean(&|f| if f.success { 1.0 } else { 0.0 }),
            mean_return: mean(&|f| f.ret),
            mean_length: mean(&|f| f64::from(f.length)),
            loss,
            eval,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.config.train.total_steps
    }

    /// Train to the step budget, appending to `train.jsonl` and writing
    /// `checkpoint.bin` under `dir`. A failed update leaves the last saved
    /// checkpoint in place.
    pub fn run(&mut self, dir: &Path, mut progress: impl FnMut(&UpdateRecord)) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("train.jsonl"))?;
        let ckpt_path = dir.join("checkpoint.bin");
        let every = self.config.train.checkpoint_interval;
        while !self.is_finished() {
            let rec = self.update()?;
            serde_json::to_writer(
                &mut log,
                &UpdateLine {
                    record: "update",
                    inner: &rec,
                },
            )?;
            log.write_all(b"\n")?;
            progress(&rec);
            if every > 0 && self.updates % every == 0 {
                self.checkpoint().save(&ckpt_path)?;
            }
        }
        self.checkpoint().save(&ckpt_path)?;
        Ok(())
    }
}
