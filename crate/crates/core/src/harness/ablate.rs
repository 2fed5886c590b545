use std::path::Path;

use serde::Serialize;

use super::agents::Agent;
use super::config::{RunConfig, Setting};
use super::eval::{evaluate, table_header, table_row, write_summaries, EvalSummary};
use super::train::{Trainer, UpdateRecord};
use crate::error::{Error, Result};

/// `(label, directory, use_sam, use_agdf)`
pub const VARIANTS: [(&str, &str, bool, bool); 4] = [
    ("full", "full", true, true),
    ("w/o SAM", "no-sam", false, true),
    ("w/o AGDF", "no-agdf", true, false),
    ("w/o SAM and AGDF", "no-sam-agdf", false, false),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub summary: EvalSummary,
}

/// The four variant configs of `base`.
pub fn variant_configs(base: &RunConfig) -> Vec<(&'static str, &'static str, RunConfig)> {
    VARIANTS
        .iter()
        .map(|&(label, dir, sam, agdf)| {
            let mut c = base.clone();
            c.model.use_sam = sam;
            c.model.use_agdf = agdf;
            (label, dir, c)
        })
        .collect()
}

/// Fails unless the configs agree on everything but the two module flags.
pub fn check_flags_only(configs: &[RunConfig]) -> Result<()> {
    let norm = |c: &RunConfig| {
        let mut c = c.clone();
        c.model.use_sam = true;
        c.model.use_agdf = true;
        c
    };
    let first = configs.first().map(norm);
    if configs.iter().any(|c| Some(norm(c)) != first) {
        return Err(Error::Config("ablation variants differ in more than the module flags".into()));
    }
    Ok(())
}

/// Train and evaluate (heard sounds) each variant. With `out`, every
/// variant writes its run directory there and the table lands in
/// `ablation.txt` / `ablation.jsonl`.
pub fn run_ablation(
    base: &RunConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &UpdateRecord),
) -> Result<Vec<AblationRow>> {
    let variants = variant_configs(base);
    check_flags_only(&variants.iter().map(|v| v.2.clone()).collect::<Vec<_>>())?;
    let mut rows = Vec::with_capacity(variants.len());
    for (label, dir, cfg) in variants {
        let mut trainer = Trainer::new(cfg.clone())?;
        match out {
            Some(root) => trainer.run(&root.join(dir), |r| progress(label, r))?,
            None => {
                while !trainer.is_finished() {
                    let r = trainer.update()?;
                    progress(label, &r);
                }
            }
        }
        let report = evaluate(
            Agent::Policy(&trainer.model),
            &cfg,
            Setting::Heard,
            cfg.model.blind,
            cfg.eval.episodes,
            cfg.eval.exec,
        )?;
        rows.push(AblationRow {
            variant: label.to_string(),
            summary: report.summary,
        });
    }
    if let Some(root) = out {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join("ablation.txt"), ablation_table(&rows))?;
        let mut lines = Vec::new();
        write_summaries(&mut lines, rows.iter().map(|r| (r.variant.as_str(), &r.summary)))?;
        std::fs::write(root.join("ablation.jsonl"), lines)?;
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = table_header();
    s.push('\n');
    for r in rows {
        s.push_str(&table_row(&r.summary, &r.variant));
        s.push('\n');
    }
    s
}
