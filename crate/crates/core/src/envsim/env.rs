use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audio::{synth_binaural, AudioConfig, NoiseField, Signature};
use super::geodesic::{min_actions, DistanceField};
use super::map::{Cell, GridMap};
use super::metrics::EpisodeRecord;
use super::render::{render_depth, DepthConfig};
use super::{Action, Heading};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const STOP_REWARD: f64 = 10.0;
pub const TIME_PENALTY: f64 = 0.01;

/// `10 * [successful stop] - 0.01 + (prev_d - new_d)`; the distance term is
/// dropped when either distance is unknown.
pub fn compute_reward(prev_d: Option<u32>, new_d: Option<u32>, success: bool) -> f64 {
    let shaping = match (prev_d, new_d) {
        (Some(a), Some(b)) => f64::from(a) - f64::from(b),
        _ => 0.0,
    };
    let bonus = if success { STOP_REWARD } else { 0.0 };
    bonus - TIME_PENALTY + shaping
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub source: Cell,
    pub start: Cell,
    pub heading: Heading,
    pub signature: Signature,
    pub step_limit: u32,
    pub blind: bool,
    /// Seeds the per-episode audio noise.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Cell,
    pub heading: Heading,
    pub steps_taken: u32,
}

/// What the agent perceives; no pose information.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `H_v x W_v x 1`, all zero when blind.
    pub depth: Tensor,
    /// `F x T x 2`, left then right channel.
    pub spectrogram: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collision: bool,
    pub success: bool,
    /// Geodesic distance after the step.
    pub d_geo: Option<u32>,
    pub shaping: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Mutable progress of one episode, enough to rebuild the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvProgress {
    pub state: AgentState,
    pub done: bool,
    pub success: bool,
    pub path_length: u32,
}

/// One episode on one map.
#[derive(Clone, Debug)]
pub struct NavEnv {
    map: Arc<GridMap>,
    field: DistanceField,
    config: EpisodeConfig,
    audio: AudioConfig,
    depth: DepthConfig,
    noise: NoiseField,
    shortest: Option<u32>,
    min_actions: Option<u32>,
    progress: EnvProgress,
}

impl NavEnv {
    pub fn new(map: Arc<GridMap>, config: EpisodeConfig, audio: AudioConfig, depth: DepthConfig) -> Result<Self> {
        if map.is_wall(config.start) || map.is_wall(config.source) {
            return Err(Error::Config(format!(
                "start {} and source {} must be free cells",
                config.start, config.source
            )));
        }
        if config.signature.0.len() != audio.bands {
            return Err(Error::Config(format!(
                "signature has {} bands, audio config {}",
                config.signature.0.len(),
                audio.bands
            )));
        }
        let field = DistanceField::new(&map, config.source)?;
        let noise = NoiseField::sample(&audio, &mut ChaCha8Rng::seed_from_u64(config.seed));
        let shortest = field.get(config.start);
        let min_actions = min_actions(&map, config.start, config.heading, config.source)?;
        let progress = EnvProgress {
            state: AgentState {
                pos: config.start,
                heading: config.heading,
                steps_taken: 0,
            },
            done: false,
            success: false,
            path_length: 0,
        };
        Ok(NavEnv {
            map,
            field,
            config,
            audio,
            depth,
            noise,
            shortest,
            min_actions,
            progress,
        })
    }

    /// Rebuild an environment mid-episode.
    pub fn restore(
        map: Arc<GridMap>,
        config: EpisodeConfig,
        audio: AudioConfig,
        depth: DepthConfig,
        progress: EnvProgress,
    ) -> Result<Self> {
        let mut env = Self::new(map, config, audio, depth)?;
        if env.map.is_wall(progress.state.pos) {
            return Err(Error::Checkpoint("restored agent stands in a wall".into()));
        }
        env.progress = progress;
        Ok(env)
    }

    pub fn map(&self) -> &Arc<GridMap> {
        &self.map
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn state(&self) -> AgentState {
        self.progress.state
    }

    pub fn progress(&self) -> &EnvProgress {
        &self.progress
    }

    pub fn is_done(&self) -> bool {
        self.progress.done
    }

    pub fn distance_field(&self) -> &DistanceField {
        &self.field
    }

    /// Current geodesic distance to the source.
    pub fn distance(&self) -> Option<u32> {
        self.field.get(self.progress.state.pos)
    }

    pub fn shortest_path(&self) -> Option<u32> {
        self.shortest
    }

    pub fn min_actions(&self) -> Option<u32> {
        self.min_actions
    }

    pub fn observe(&self) -> Observation {
        let s = self.progress.state;
        let depth = if self.config.blind {
            Tensor::zeros([self.depth.height, self.depth.width, 1])
        } else {
            render_depth(&self.map, s.pos, s.heading, &self.depth)
        };
        let spectrogram = synth_binaural(
            &self.map,
            &self.field,
            s.pos,
            s.heading,
            &self.config.signature,
            &self.noise,
            &self.audio,
        );
        Observation { depth, spectrogram }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.progress.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        let prev_d = self.distance();
        let p = &mut self.progress;
        let mut collision = false;
        let mut success = false;
        match action {
            Action::Forward => match p.state.heading.advance(&self.map, p.state.pos) {
                Some(next) => {
                    p.state.pos = next;
                    p.path_length += 1;
                }
                None => collision = true,
            },
            Action::TurnLeft => p.state.heading = p.state.heading.turn_left(),
            Action::TurnRight => p.state.heading = p.state.heading.turn_right(),
            Action::Stop => {
                success = p.state.pos == self.config.source;
                p.done = true;
            }
        }
        p.state.steps_taken += 1;
        if p.state.steps_taken >= self.config.step_limit {
            p.done = true;
        }
        p.success = success;
        let new_d = self.field.get(p.state.pos);
        let reward = compute_reward(prev_d, new_d, success);
        let shaping = match (prev_d, new_d) {
            (Some(a), Some(b)) => f64::from(a) - f64::from(b),
            _ => 0.0,
        };
        let done = p.done;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done,
            info: StepInfo {
                collision,
                success,
                d_geo: new_d,
                shaping,
            },
        })
    }

    /// Metric inputs of a finished episode.
    pub fn record(&self) -> Result<EpisodeRecord> {
        if !self.progress.done {
            return Err(Error::State("episode is still running".into()));
        }
        let (Some(l), Some(n_star)) = (self.shortest, self.min_actions) else {
            return Err(Error::DataIntegrity("source unreachable from the start".into()));
        };
        Ok(EpisodeRecord {
            success: self.progress.success,
            path_length: self.progress.path_length,
            shortest_path: l,
            actions: self.progress.state.steps_taken,
            min_actions: n_star,
        })
    }
}
