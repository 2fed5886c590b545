//! Gridworld audio-visual navigation environment.
//!
//! An agent on a closed occupancy grid hears a sound source through a
//! two-channel band spectrogram and sees a raycast depth strip. It can move
//! forward, turn left or right by 90 degrees, or stop; stopping on the source
//! cell is a success.

mod audio;
mod env;
mod geodesic;
mod log;
mod map;
mod metrics;
mod render;

use serde::{Deserialize, Serialize};

pub use audio::{bearing, synth_binaural, AudioConfig, NoiseField, Signature, SignaturePools};
pub use env::{
    compute_reward, AgentState, EnvProgress, EpisodeConfig, NavEnv, Observation, StepInfo,
    StepResult, STOP_REWARD, TIME_PENALTY,
};
pub use geodesic::{geodesic_distance, min_actions, DistanceField};
pub use log::{read_log, write_log, EpisodeHeader, EpisodeLog, EpisodeOutcome, LogRecord, StepRecord};
pub use map::{Cell, GridMap};
pub use metrics::{compute_metrics, EpisodeRecord, Metrics};
pub use render::{render_depth, DepthConfig};

/// Facing direction. `y` grows downward, so North is `-y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    #[serde(rename = "N")]
    North,
    #[serde(rename = "E")]
    East,
    #[serde(rename = "S")]
    South,
    #[serde(rename = "W")]
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    /// Counterclockwise as drawn: N -> W -> S -> E.
    pub fn turn_left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn turn_right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    pub fn reverse(self) -> Self {
        Self::from_index(self.index() + 2)
    }

    /// The neighbouring cell ahead, if it is free.
    pub fn advance(self, map: &GridMap, c: Cell) -> Option<Cell> {
        let (dx, dy) = self.delta();
        let (x, y) = (c.x as i64 + dx, c.y as i64 + dy);
        (!map.is_wall_at(x, y)).then(|| Cell::new(x as usize, y as usize))
    }

    /// Heading after mirroring the map left to right.
    pub fn mirror_x(self) -> Self {
        match self {
            Heading::East => Heading::West,
            Heading::West => Heading::East,
            h => h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}
