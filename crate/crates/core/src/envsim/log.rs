use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::env::NavEnv;
use super::map::Cell;
use super::metrics::EpisodeRecord;
use super::{Action, Heading};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub episode: u64,
    pub map: String,
    pub source: Cell,
    pub start: Cell,
    pub heading: Heading,
    /// Index of the sound class in its pool, if known.
    pub sound: Option<usize>,
    pub shortest_path: u32,
    pub min_actions: u32,
    pub step_limit: u32,
}

/// Pose after step `t`; `t = 0` is the start pose with no action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: u64,
    pub t: u32,
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
    pub action: Option<Action>,
    pub reward: f64,
    pub d_geo: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: u64,
    pub success: bool,
    pub spl: f64,
    pub sna: f64,
}

/// One line of a trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Episode(EpisodeHeader),
    Step(StepRecord),
    End(EpisodeOutcome),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
    pub outcome: Option<EpisodeOutcome>,
}

impl EpisodeLog {
    /// Start a log at the environment's initial pose.
    pub fn begin(episode: u64, map: &str, sound: Option<usize>, env: &NavEnv) -> Result<Self> {
        let cfg = env.config();
        let (Some(l), Some(n_star)) = (env.shortest_path(), env.min_actions()) else {
            return Err(Error::DataIntegrity(format!("episode {episode}: source unreachable")));
        };
        let s = env.state();
        Ok(EpisodeLog {
            header: EpisodeHeader {
                episode,
                map: map.to_string(),
                source: cfg.source,
                start: cfg.start,
                heading: cfg.heading,
                sound,
                shortest_path: l,
                min_actions: n_star,
                step_limit: cfg.step_limit,
            },
            steps: vec![StepRecord {
                episode,
                t: 0,
                x: s.pos.x,
                y: s.pos.y,
                heading: s.heading,
                action: None,
                reward: 0.0,
                d_geo: env.distance(),
            }],
            outcome: None,
        })
    }

    /// Append the pose reached after `action`.
    pub fn push(&mut self, env: &NavEnv, action: Action, reward: f64) {
        let s = env.state();
        self.steps.push(StepRecord {
            episode: self.header.episode,
            t: s.steps_taken,
            x: s.pos.x,
            y: s.pos.y,
            heading: s.heading,
            action: Some(action),
            reward,
            d_geo: env.distance(),
        });
    }

    /// Recompute the metric inputs from the steps alone.
    pub fn to_record(&self) -> EpisodeRecord {
        let last = self.steps.last();
        let success = last.is_some_and(|s| s.action == Some(Action::Stop) && s.d_geo == Some(0));
        let path_length = self
            .steps
            .windows(2)
            .filter(|w| (w[0].x, w[0].y) != (w[1].x, w[1].y))
            .count() as u32;
        EpisodeRecord {
            success,
            path_length,
            shortest_path: self.header.shortest_path,
            actions: self.steps.len().saturating_sub(1) as u32,
            min_actions: self.header.min_actions,
        }
    }

    /// Close the log with an outcome derived from its own steps.
    pub fn finish(&mut self) -> Result<EpisodeRecord> {
        let rec = self.to_record();
        rec.validate()?;
        self.outcome = Some(EpisodeOutcome {
            episode: self.header.episode,
            success: rec.success,
            spl: rec.spl(),
            sna: rec.sna(),
        });
        Ok(rec)
    }

    pub fn records(&self) -> impl Iterator<Item = LogRecord> + '_ {
        std::iter::once(LogRecord::Episode(self.header.clone()))
            .chain(self.steps.iter().cloned().map(LogRecord::Step))
            .chain(self.outcome.clone().map(LogRecord::End))
    }

    /// Agent cells with consecutive repeats removed.
    pub fn path(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for s in &self.steps {
            if out.last() != Some(&(s.x, s.y)) {
                out.push((s.x, s.y));
            }
        }
        out
    }
}

pub fn write_log<'a>(mut w: impl Write, logs: impl IntoIterator<Item = &'a EpisodeLog>) -> Result<()> {
    for log in logs {
        for rec in log.records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Parse a trajectory log back into episodes. Records of other kinds (for
/// example summary lines) are rejected.
pub fn read_log(r: impl BufRead) -> Result<Vec<EpisodeLog>> {
    let mut logs: Vec<EpisodeLog> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)
            .map_err(|e| Error::DataIntegrity(format!("log line {}: {e}", i + 1)))?;
        match rec {
            LogRecord::Episode(header) => logs.push(EpisodeLog {
                header,
                steps: Vec::new(),
                outcome: None,
            }),
            LogRecord::Step(step) => match logs.last_mut() {
                Some(log) if log.header.episode == step.episode => log.steps.push(step),
                _ => {
                    return Err(Error::DataIntegrity(format!(
                        "log line {}: step outside its episode",
                        i + 1
                    )))
                }
            },
            LogRecord::End(outcome) => match logs.last_mut() {
                Some(log) if log.header.episode == outcome.episode => log.outcome = Some(outcome),
                _ => {
                    return Err(Error::DataIntegrity(format!(
                        "log line {}: outcome outside its episode",
                        i + 1
                    )))
                }
            },
        }
    }
    Ok(logs)
}
