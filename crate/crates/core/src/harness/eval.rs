use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agents::{sample_episode, Agent, AgentState};
use super::config::{load_maps, RunConfig, Setting};
use crate::envsim::{compute_metrics, write_log, EpisodeLog, GridMap, Metrics, NavEnv, Signature};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};

/// Generator of evaluation episode `index`; independent of how episodes
/// are spread over workers.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub agent: String,
    pub setting: Setting,
    pub blind: bool,
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub sna: f64,
}

impl EvalSummary {
    pub fn new(agent: &str, setting: Setting, blind: bool, m: &Metrics) -> Self {
        EvalSummary {
            agent: agent.to_string(),
            setting,
            blind,
            episodes: m.episodes,
            sr: m.sr,
            spl: m.spl,
            sna: m.sna,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub logs: Vec<EpisodeLog>,
}

/// Sounds of a setting. Unheard evaluation refuses any signature whose
/// band pattern also occurs in the training pool.
pub fn eval_sounds(cfg: &RunConfig, setting: Setting) -> Result<Vec<Signature>> {
    let pools = cfg.sound_pools()?;
    match setting {
        Setting::Heard => Ok(pools.heard),
        Setting::Unheard => {
            if pools.unheard.is_empty() {
                return Err(Error::Config("unheard evaluation needs env.unheard_sounds > 0".into()));
            }
            let train: BTreeSet<Vec<usize>> = pools.heard.iter().map(|s| s.active_set()).collect();
            if pools.unheard.iter().any(|s| train.contains(&s.active_set())) {
                return Err(Error::DataIntegrity("an unheard sound occurs in the training pool".into()));
            }
            Ok(pools.unheard)
        }
    }
}

fn run_episode(
    agent: Agent<'_>,
    cfg: &RunConfig,
    maps: &[(String, Arc<GridMap>)],
    sounds: &[Signature],
    blind: bool,
    index: u64,
) -> Result<EpisodeLog> {
    let mut rng = episode_rng(cfg.eval.seed, index);
    let draw = sample_episode(maps, sounds, cfg.env.source, cfg.env.step_limit, blind, &mut rng)?;
    let (name, map) = &maps[draw.map];
    let mut env = NavEnv::new(map.clone(), draw.config, cfg.audio(), cfg.depth())?;
    let mut log = EpisodeLog::begin(index, name, Some(draw.sound), &env)?;
    let mut state = AgentState::new(agent);
    let mut obs = env.observe();
    while !env.is_done() {
        let action = state.act(obs, &mut rng)?;
        let r = env.step(action)?;
        log.push(&env, action, r.reward);
        obs = r.obs;
    }
    log.finish()?;
    Ok(log)
}

/// Run `episodes` evaluation episodes; metrics come from the logs alone.
pub fn evaluate(
    agent: Agent<'_>,
    cfg: &RunConfig,
    setting: Setting,
    blind: bool,
    episodes: usize,
    exec: Exec,
) -> Result<EvalReport> {
    let maps = load_maps(&cfg.env.eval_maps, cfg.env.source)?;
    let sounds = eval_sounds(cfg, setting)?;
    let logs = map_indexed(exec, episodes, |i| run_episode(agent, cfg, &maps, &sounds, blind, i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<_> = logs.iter().map(EpisodeLog::to_record).collect();
    let metrics = compute_metrics(&records)?;
    Ok(EvalReport {
        summary: EvalSummary::new(agent.name(), setting, blind, &metrics),
        logs,
    })
}

pub fn table_header() -> String {
    format!(
        "{:<20} {:<8} {:<6} {:>8} {:>7} {:>7} {:>7}",
        "agent", "setting", "blind", "episodes", "SR", "SPL", "SNA"
    )
}

pub fn table_row(s: &EvalSummary, label: &str) -> String {
    let setting = match s.setting {
        Setting::Heard => "heard",
        Setting::Unheard => "unheard",
    };
    format!(
        "{:<20} {:<8} {:<6} {:>8} {:>7.3} {:>7.3} {:>7.3}",
        label,
        setting,
        if s.blind { "yes" } else { "no" },
        s.episodes,
        s.sr,
        s.spl,
        s.sna
    )
}

/// One line-delimited summary record.
#[derive(Serialize)]
struct SummaryLine<'a> {
    record: &'static str,
    label: &'a str,
    #[serde(flatten)]
    summary: &'a EvalSummary,
}

pub fn write_summaries<'a>(mut w: impl Write, rows: impl IntoIterator<Item = (&'a str, &'a EvalSummary)>) -> Result<()> {
    for (label, summary) in rows {
        serde_json::to_writer(
            &mut w,
            &SummaryLine {
                record: "summary",
                label,
                summary,
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Write `metrics.txt`, `metrics.jsonl` (per-episode outcomes, then the
/// summary) and `trajectories.jsonl` under `dir` with the given prefix.
pub fn write_report(dir: &std::path::Path, prefix: &str, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let label = report.summary.agent.clone();
    let text = format!("{}\n{}\n", table_header(), table_row(&report.summary, &label));
    std::fs::write(dir.join(format!("{prefix}metrics.txt")), text)?;
    let mut lines = Vec::new();
    for log in &report.logs {
        if let Some(o) = &log.outcome {
            serde_json::to_writer(&mut lines, &crate::envsim::LogRecord::End(o.clone()))?;
            lines.push(b'\n');
        }
    }
    write_summaries(&mut lines, [(label.as_str(), &report.summary)])?;
    std::fs::write(dir.join(format!("{prefix}metrics.jsonl")), lines)?;
    let mut traj = Vec::new();
    write_log(&mut traj, &report.logs)?;
    std::fs::write(dir.join(format!("{prefix}trajectories.jsonl")), traj)?;
    Ok(())
}
