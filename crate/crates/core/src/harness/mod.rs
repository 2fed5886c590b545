//! Experiment orchestration: configuration, training, evaluation,
//! baselines, ablation sweeps, gradient checks and trajectory figures.

mod ablate;
mod agents;
mod checkpoint;
mod config;
mod eval;
pub mod oracle;
mod plot;
mod train;

pub use ablate::{ablation_table, check_flags_only, run_ablation, variant_configs, AblationRow, VARIANTS};
pub use agents::{
    audio_cues, direction_follower, random_action, sample_episode, Agent, AgentState, EpisodeDraw,
    FOLLOWER_STOP_LEVEL, FOLLOWER_TURN,
};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{
    apply_override, load_maps, EnvConfig, EvalConfig, RunConfig, Setting, SourcePlacement, TrainConfig,
};
pub use eval::{
    episode_rng, eval_sounds, evaluate, table_header, table_row, write_report, write_summaries, EvalReport,
    EvalSummary,
};
pub use plot::render_svg;
pub use train::{RngState, Trainer, TrainerState, UpdateRecord};
