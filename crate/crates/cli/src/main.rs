use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use avnav::envsim::{read_log, GridMap};
use avnav::exec::Exec;
use avnav::harness::{
    self, evaluate, oracle, render_svg, run_ablation, write_report, Agent, Checkpoint, RunConfig, Setting, Trainer,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "avnav", version, about = "Audio-visual gridworld navigation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Heard,
    Unheard,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Policy,
    Random,
    DirectionFollower,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes config.toml, train.jsonl and checkpoint.bin.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-key override, e.g. `ppo.lr=0.001`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a baseline agent.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heard")]
        setting: SettingArg,
        /// Zero the visual observation.
        #[arg(long)]
        blind: bool,
        #[arg(long, value_enum, default_value = "policy")]
        agent: AgentArg,
        /// Must describe the checkpoint's model when both are given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Directory for metrics and trajectory logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the four module variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one logged episode as SVG.
    Plot {
        #[arg(long)]
        log: PathBuf,
        /// Bundled map name or map file.
        #[arg(long)]
        map: String,
        #[arg(long)]
        out: PathBuf,
        /// Index of the episode within the log.
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Finite-difference gradient checks of every module.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        sequential: bool,
    },
}

fn load_config(path: Option<&PathBuf>, set: &[String]) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p, set).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::from_toml("", set)?,
    })
}

fn train(config: Option<PathBuf>, set: Vec<String>, resume: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let cfg = match config {
                Some(p) => Some(RunConfig::load(&p, &set)?),
                None => Some(RunConfig::from_toml(&ckpt.config.to_toml()?, &set)?),
            };
            Trainer::resume(&ckpt, cfg)?
        }
        None => Trainer::new(load_config(config.as_ref(), &set)?)?,
    };
    let dir = out.unwrap_or_else(|| trainer.config.output_dir.clone());
    let start = std::time::Instant::now();
    trainer.run(&dir, |r| {
        println!(
            "update {:>5}  steps {:>8}  episodes {:>4}  success {}  return {}  entropy {:.3}  [{:.0}s]",
            r.update,
            r.env_steps,
            r.episodes,
            r.success_rate.map_or("  -  ".into(), |v| format!("{v:.3}")),
            r.mean_return.map_or("  -  ".into(), |v| format!("{v:.2}")),
            r.loss.entropy,
            start.elapsed().as_secs_f64()
        );
        if let Some(e) = &r.eval {
            println!("  eval SR {:.3} SPL {:.3} SNA {:.3}", e.sr, e.spl, e.sna);
        }
    })?;
    println!("checkpoint written to {}", dir.join("checkpoint.bin").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: Option<PathBuf>,
    setting: SettingArg,
    blind: bool,
    agent: AgentArg,
    config: Option<PathBuf>,
    set: Vec<String>,
    episodes: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = checkpoint
        .map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let cfg = match (&ckpt, &config) {
        (Some(c), None) => RunConfig::from_toml(&c.config.to_toml()?, &set)?,
        (Some(c), Some(p)) => {
            let cfg = RunConfig::load(p, &set)?;
            if cfg.model.profile != c.config.model.profile {
                bail!(avnav::Error::Config(format!(
                    "config profile {:?} but checkpoint profile {:?}",
                    cfg.model.profile, c.config.model.profile
                )));
            }
            if cfg.model != c.config.model {
                bail!(avnav::Error::Config("config model settings differ from the checkpoint".into()));
            }
            cfg
        }
        (None, _) => load_config(config.as_ref(), &set)?,
    };
    let model = match (&ckpt, agent) {
        (Some(c), AgentArg::Policy) => Some(c.model()?),
        (None, AgentArg::Policy) => bail!("the policy agent needs --checkpoint"),
        _ => None,
    };
    let agent = match agent {
        AgentArg::Policy => Agent::Policy(model.as_ref().expect("loaded above")),
        AgentArg::Random => Agent::Random,
        AgentArg::DirectionFollower => Agent::DirectionFollower,
    };
    let setting = match setting {
        SettingArg::Heard => Setting::Heard,
        SettingArg::Unheard => Setting::Unheard,
    };
    let blind = blind || cfg.model.blind;
    let report = evaluate(
        agent,
        &cfg,
        setting,
        blind,
        episodes.unwrap_or(cfg.eval.episodes),
        cfg.eval.exec,
    )?;
    println!("{}", harness::table_header());
    println!("{}", harness::table_row(&report.summary, agent.name()));
    let mut line = Vec::new();
    harness::write_summaries(&mut line, [(agent.name(), &report.summary)])?;
    print!("{}", String::from_utf8(line)?);
    if let Some(dir) = out {
        let prefix = format!("{}-{}-", agent.name(), if setting == Setting::Heard { "heard" } else { "unheard" });
        write_report(&dir, &prefix, &report)?;
        println!("logs written to {}", dir.display());
    }
    Ok(())
}

fn ablate(config: Option<PathBuf>, set: Vec<String>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_ref(), &set)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("ablation"));
    let rows = run_ablation(&cfg, Some(&dir), |variant, r| {
        if r.update % 10 == 0 {
            println!("{variant}: update {} steps {}", r.update, r.env_steps);
        }
    })?;
    print!("{}", harness::ablation_table(&rows));
    println!("table written to {}", dir.join("ablation.txt").display());
    Ok(())
}

fn plot(log: PathBuf, map: String, out: PathBuf, episode: usize) -> Result<()> {
    let f = std::fs::File::open(&log).with_context(|| format!("opening {}", log.display()))?;
    let logs = read_log(BufReader::new(f))?;
    let ep = logs
        .get(episode)
        .with_context(|| format!("log holds {} episodes", logs.len()))?;
    let map = GridMap::load(&map)?;
    std::fs::write(&out, render_svg(ep, &map)?)?;
    println!("figure written to {}", out.display());
    Ok(())
}

fn grad_check(seeds: u64, sequential: bool) -> Result<bool> {
    let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
    let seeds: Vec<u64> = (0..seeds).collect();
    let lines = oracle::gradient_suite(&seeds, exec)?;
    println!("{:<20} {:>5} {:>12} {:>12}  result", "module", "seed", "worst rel", "max |diff|");
    for l in &lines {
        println!(
            "{:<20} {:>5} {:>12.3e} {:>12.3e}  {}",
            l.module,
            l.seed,
            l.worst,
            l.max_abs_diff,
            if l.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(lines.iter().all(|l| l.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            set,
            resume,
            out,
        } => train(config, set, resume, out).map(|_| true),
        Command::Eval {
            checkpoint,
            setting,
            blind,
            agent,
            config,
            set,
            episodes,
            out,
        } => eval(checkpoint, setting, blind, agent, config, set, episodes, out).map(|_| true),
        Command::Ablate { config, set, out } => ablate(config, set, out).map(|_| true),
        Command::Plot {
            log,
            map,
            out,
            episode,
        } => plot(log, map, out, episode).map(|_| true),
        Command::GradCheck { seeds, sequential } => grad_check(seeds, sequential),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
