use std::sync::Arc;

use rand::Rng;

use super::config::SourcePlacement;
use crate::envsim::{Action, Cell, EpisodeConfig, GridMap, Heading, Observation, Signature};
use crate::error::{Error, Result};
use crate::pipeline::AgentModel;
use crate::policy::{select_action, ActMode};

/// Summed left and right level above which the follower assumes it stands
/// on the source: the loudest band has level `1 / (1 + d)`, so 1 at the
/// source and 0.5 one cell away.
pub const FOLLOWER_STOP_LEVEL: f64 = 0.75;

/// `|sin(bearing)|` above which the follower turns instead of walking.
pub const FOLLOWER_TURN: f64 = 0.5;

/// A sampled episode: map index, sound index and environment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeDraw {
    pub map: usize,
    pub sound: usize,
    pub config: EpisodeConfig,
}

/// Draw map, sound, source, start and heading. The start is a free cell
/// other than the source from which the source can be reached.
pub fn sample_episode(
    maps: &[(String, Arc<GridMap>)],
    sounds: &[Signature],
    source: SourcePlacement,
    step_limit: u32,
    blind: bool,
    rng: &mut impl Rng,
) -> Result<EpisodeDraw> {
    if maps.is_empty() || sounds.is_empty() {
        return Err(Error::Config("episodes need at least one map and one sound".into()));
    }
    let mi = rng.gen_range(0..maps.len());
    let map = &maps[mi].1;
    let free = map.free_cells();
    let src = match source {
        SourcePlacement::Map => map
            .goal
            .ok_or_else(|| Error::Config(format!("map `{}` has no G marker", maps[mi].0)))?,
        SourcePlacement::Random => free[rng.gen_range(0..free.len())],
    };
    let field = crate::envsim::DistanceField::new(map, src)?;
    let starts: Vec<Cell> = free
        .iter()
        .copied()
        .filter(|&c| c != src && field.get(c).is_some())
        .collect();
    if starts.is_empty() {
        return Err(Error::Config(format!("map `{}`: nothing reaches the source", maps[mi].0)));
    }
    let start = starts[rng.gen_range(0..starts.len())];
    let heading = Heading::from_index(rng.gen_range(0..4));
    let sound = rng.gen_range(0..sounds.len());
    Ok(EpisodeDraw {
        map: mi,
        sound,
        config: EpisodeConfig {
            source: src,
            start,
            heading,
            signature: sounds[sound].clone(),
            step_limit,
            blind,
            seed: rng.gen(),
        },
    })
}

pub fn random_action(rng: &mut impl Rng) -> Action {
    Action::ALL[rng.gen_range(0..Action::COUNT)]
}

/// Loudest band level (left plus right, averaged over frames) and the
/// interaural balance `(L - R) / (L + R)` over the whole spectrogram.
pub fn audio_cues(spectrogram: &crate::autodiff::Tensor) -> (f64, f64) {
    let s = spectrogram.shape();
    let (bands, frames) = (s[0], s[1]);
    let data = spectrogram.data();
    let (mut left, mut right, mut loudest) = (0.0, 0.0, 0.0f64);
    for f in 0..bands {
        let mut band = 0.0;
        for t in 0..frames {
            let i = (f * frames + t) * 2;
            left += data[i];
            right += data[i + 1];
            band += data[i] + data[i + 1];
        }
        loudest = loudest.max(band / frames as f64);
    }
    let total = left + right;
    let balance = if total > 0.0 { (left - right) / total } else { 0.0 };
    (loudest, balance)
}

/// Re-estimates the direction of arrival from the gain model every step
/// (`sin t = (L - R) / (L + R)`), turns toward it, otherwise walks; stops
/// once the level says the source is here. Silence means walk.
pub fn direction_follower(obs: &Observation) -> Action {
    let (loudest, balance) = audio_cues(&obs.spectrogram);
    if loudest <= 1e-12 {
        return Action::Forward;
    }
    if loudest > FOLLOWER_STOP_LEVEL {
        Action::Stop
    } else if balance > FOLLOWER_TURN {
        Action::TurnLeft
    } else if balance < -FOLLOWER_TURN {
        Action::TurnRight
    } else {
        Action::Forward
    }
}

/// Anything that can drive an evaluation episode.
#[derive(Clone, Copy, Debug)]
pub enum Agent<'a> {
    /// Greedy actions from a trained model.
    Policy(&'a AgentModel),
    Random,
    DirectionFollower,
}

impl Agent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Policy(_) => "policy",
            Agent::Random => "random",
            Agent::DirectionFollower => "direction_follower",
        }
    }
}

/// Per-episode state of an [`Agent`].
pub struct AgentState<'a> {
    agent: Agent<'a>,
    hidden: Option<crate::autodiff::Tensor>,
}

impl<'a> AgentState<'a> {
    pub fn new(agent: Agent<'a>) -> Self {
        let hidden = match agent {
            Agent::Policy(m) => Some(m.initial_hidden(1)),
            _ => None,
        };
        AgentState { agent, hidden }
    }

    pub fn act(&mut self, obs: Observation, rng: &mut impl Rng) -> Result<Action> {
        let index = match self.agent {
            Agent::Policy(model) => {
                let obs = model.config.prepare(obs);
                let h = self.hidden.as_ref().expect("policy agents carry a state");
                let out = model.step(&[&obs], h)?;
                self.hidden = Some(out.hidden.clone());
                select_action(out.logits_row(0), ActMode::Greedy, rng).0
            }
            Agent::Random => return Ok(random_action(rng)),
            Agent::DirectionFollower => return Ok(direction_follower(&obs)),
        };
        Ok(Action::from_index(index).expect("policy has four actions"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::envsim::{AudioConfig, DistanceField, NavEnv, NoiseField, Signature, synth_binaural, DepthConfig};
    use crate::nn::module_rng;

    fn heard(map: &GridMap, src: Cell, pos: Cell, heading: Heading) -> Observation {
        let cfg = AudioConfig::default();
        let field = DistanceField::new(map, src).unwrap();
        let sig = Signature::random(cfg.bands, 3, &mut module_rng(0, "sig"));
        let noise = NoiseField::sample(&cfg, &mut module_rng(1, "noise"));
        Observation {
            depth: Tensor::zeros([16, 16, 1]),
            spectrogram: synth_binaural(map, &field, pos, heading, &sig, &noise, &cfg),
        }
    }

    #[test]
    fn follower_turns_toward_a_source_on_the_left() {
        let map = GridMap::empty_room(8, 8).unwrap();
        // facing north, west is to the left
        let obs = heard(&map, Cell::new(1, 3), Cell::new(4, 3), Heading::North);
        assert_eq!(direction_follower(&obs), Action::TurnLeft);
        let obs = heard(&map, Cell::new(6, 3), Cell::new(4, 3), Heading::North);
        assert_eq!(direction_follower(&obs), Action::TurnRight);
        let obs = heard(&map, Cell::new(4, 1), Cell::new(4, 3), Heading::North);
        assert_eq!(direction_follower(&obs), Action::Forward);
        let obs = heard(&map, Cell::new(4, 3), Cell::new(4, 3), Heading::North);
        assert_eq!(direction_follower(&obs), Action::Stop);
        let one_away = heard(&map, Cell::new(4, 2), Cell::new(4, 3), Heading::North);
        assert_eq!(direction_follower(&one_away), Action::Forward);
    }

    #[test]
    fn follower_walks_in_silence() {
        let obs = Observation {
            depth: Tensor::zeros([16, 16, 1]),
            spectrogram: Tensor::zeros([16, 16, 2]),
        };
        assert_eq!(direction_follower(&obs), Action::Forward);
    }

    #[test]
    fn random_agent_is_uniform() {
        let mut rng = module_rng(0, "random-agent");
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[random_action(&mut rng).index()] += 1;
        }
        // 0.02 is about three standard deviations of a 4000-draw frequency
        for c in counts {
            assert!((c as f64 / 4000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn follower_solves_open_rooms() {
        let map = Arc::new(GridMap::empty_room(8, 8).unwrap());
        let maps = vec![("room".to_string(), map.clone())];
        let sounds = vec![Signature::random(16, 3, &mut module_rng(2, "sig"))];
        let mut rng = module_rng(3, "episodes");
        let mut wins = 0;
        for _ in 0..50 {
            let draw = sample_episode(&maps, &sounds, SourcePlacement::Random, 100, true, &mut rng).unwrap();
            let mut env = NavEnv::new(map.clone(), draw.config, AudioConfig::default(), DepthConfig::default()).unwrap();
            while !env.is_done() {
                env.step(direction_follower(&env.observe())).unwrap();
            }
            wins += usize::from(env.progress().success);
        }
        assert_eq!(wins, 50);
    }
}
