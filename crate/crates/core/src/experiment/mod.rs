//! Experiment configuration and orchestration.
//!
//! Every verb writes into `output_dir/<name>-s<seed>/`, starting with the
//! resolved config so the directory alone reproduces the run.

mod config;
mod output;
mod run;

use std::fmt::Write as _;
use std::path::PathBuf;

use log::{info, warn};

use crate::boost::select_n;
use crate::error::{Error, Result};
use crate::metrics::{check_proposition1, check_proposition2, density_divergence, fmt_f64, DivergenceReport};

pub use config::{
    default_window, fraction_count, parse_config, DatasetSpec, ExperimentConfig, IdxSpec, MetricWindow, ModelSpec,
    PartitionConfig, SchemeName, SelectNConfig, SweepAxis, SweepConfig, SweepValue,
};
pub use output::{
    amplifier_csv, rounds_csv, run_dir, summary_csv, write_features, write_paired, AMPLIFIER_HEADER, ROUNDS_HEADER,
    SIMILARITY_HEADER, SUMMARY_HEADER,
};
pub use run::{
    execute_paired, malicious_set, median_of, repetition_seed, run_repetition, ArmResult, PairedSummary, Repetition,
    World,
};

use output::{create_dir, write_file};

/// Runs all repetitions, then writes rounds, summary, and boosting artifacts.
pub fn run_paired(cfg: &ExperimentConfig) -> Result<PairedSummary> {
    let summary = execute_paired(cfg)?;
    let (train, test) = cfg.dataset.load()?;
    let dir = run_dir(cfg);
    write_paired(cfg, &summary, &dir, train.num_classes())?;
    if cfg.export_features {
        write_features(&summary, &test, &dir)?;
    }
    info!("results written to {}", dir.display());
    Ok(summary)
}

/// Column order of `sweep.csv`.
pub const SWEEP_HEADER: &str =
    "axis,value,status,median_v_asr,median_b_asr,median_ri_asr,median_v_accuracy,median_b_accuracy,error";

/// One point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: SweepValue,
    pub outcome: std::result::Result<PairedSummary, String>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

fn csv_text(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "'"))
}

/// One paired run per axis value; invalid or failing points are marked and
/// the sweep continues. Writes `sweep.csv` plus per-point subdirectories.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep", "the sweep verb needs a [sweep] section"))?;
    let dir = run_dir(cfg);
    create_dir(&dir)?;
    write_file(&dir.join("resolved_config.toml"), &cfg.to_toml()?)?;
    let axis = sweep.axis;
    let mut points = Vec::new();
    let mut text = format!("{SWEEP_HEADER}\n");
    for value in &sweep.values {
        let outcome = cfg.with_axis(axis, value).and_then(|point_cfg| {
            let summary = execute_paired(&point_cfg)?;
            let (train, _) = point_cfg.dataset.load()?;
            let sub = dir.join(format!("{}={}", axis.name(), value));
            write_paired(&point_cfg, &summary, &sub, train.num_classes())?;
            Ok(summary)
        });
        match &outcome {
            Ok(s) => {
                let _ = writeln!(
                    text,
                    "{},{value},ok,{},{},{},{},{},",
                    axis.name(),
                    opt(s.median_v_asr()),
                    opt(s.median_b_asr()),
                    opt(s.median_ri_asr()),
                    opt(s.median_v_accuracy()),
                    opt(s.median_b_accuracy()),
                );
            }
            Err(e) => {
                warn!("sweep point {}={value} failed: {e}", axis.name());
                let _ = writeln!(text, "{},{value},failed,NA,NA,NA,NA,NA,{}", axis.name(), csv_text(&e.to_string()));
            }
        }
        points.push(SweepPoint {
            value: value.clone(),
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    write_file(&dir.join("sweep.csv"), &text)?;
    Ok(points)
}

/// Result of the N-selection procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectNOutcome {
    pub chosen: usize,
    /// `(N, median B-ASR)` for every evaluated N.
    pub evaluated: Vec<(usize, f64)>,
}

/// Increases N from `select_n.from` while the median boosted ASR keeps
/// rising and keeps the last N before the first decline.
pub fn run_select_n(cfg: &ExperimentConfig) -> Result<SelectNOutcome> {
    if cfg.botpa.is_none() {
        return Err(Error::config("botpa", "select-n needs a [botpa] section"));
    }
    let classes = match cfg.dataset.num_classes() {
        Some(k) => k,
        None => cfg.dataset.load()?.0.num_classes(),
    };
    let sel = cfg.select_n.clone().unwrap_or(SelectNConfig { from: 1, to: None });
    let to = sel.to.unwrap_or(classes.saturating_sub(2));
    if sel.from == 0 || sel.from > to {
        return Err(Error::config("select_n", format!("empty range {}..={to}", sel.from)));
    }
    let (chosen, seen) = crate::boost::select_n_sweep(sel.from..=to, |n| {
        let point = cfg.with_axis(SweepAxis::N, &SweepValue::Number(n as f64))?;
        let summary = execute_paired(&point)?;
        let v = summary.median_b_asr().unwrap_or(f64::NAN);
        info!("N = {n}: median B-ASR {}", fmt_f64(v));
        Ok(v)
    })?;
    debug_assert_eq!(select_n(&seen, sel.from), Some(chosen));
    let evaluated: Vec<(usize, f64)> = seen.iter().enumerate().map(|(i, &v)| (sel.from + i, v)).collect();
    let dir = run_dir(cfg);
    create_dir(&dir)?;
    write_file(&dir.join("resolved_config.toml"), &cfg.to_toml()?)?;
    let mut text = String::from("n,median_b_asr,chosen\n");
    for &(n, v) in &evaluated {
        let _ = writeln!(text, "{n},{},{}", fmt_f64(v), n == chosen);
    }
    write_file(&dir.join("select_n.csv"), &text)?;
    Ok(SelectNOutcome { chosen, evaluated })
}

/// One row of `propositions.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropositionRow {
    pub proposition: u8,
    pub class: usize,
    pub lambda: f64,
    pub report: DivergenceReport,
}

/// Checks both divergence propositions at the initial model of repetition 0
/// on the full training set. Proposition 2 is evaluated for every class other
/// than source and target at each weight in `lambdas`.
pub fn check_propositions(cfg: &ExperimentConfig, lambdas: &[f64], eta: Option<f64>) -> Result<Vec<PropositionRow>> {
    let attack = cfg
        .attack
        .as_ref()
        .ok_or_else(|| Error::config("attack", "check-propositions needs source and target classes"))?;
    let (train, test) = cfg.dataset.load()?;
    let world = World::build(cfg, &train, &test, 0, cfg.exec)?;
    let eta = eta.unwrap_or_else(|| cfg.training.optimizer.learning_rate());
    let mut rows = vec![PropositionRow {
        proposition: 1,
        class: attack.source,
        lambda: 1.0,
        report: check_proposition1(&world.init, &train, attack.source, attack.target, eta)?,
    }];
    for z in (0..train.num_classes()).filter(|&z| z != attack.source && z != attack.target) {
        for &lambda in lambdas {
            rows.push(PropositionRow {
                proposition: 2,
                class: z,
                lambda,
                report: check_proposition2(&world.init, &train, attack.target, z, lambda, eta)?,
            });
        }
    }
    let dir = run_dir(cfg);
    create_dir(&dir)?;
    write_file(&dir.join("resolved_config.toml"), &cfg.to_toml()?)?;
    let mut text = String::from("proposition,class,lambda,max_abs_error,rel_error\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            r.proposition,
            r.class,
            fmt_f64(r.lambda),
            fmt_f64(r.report.max_abs_error),
            fmt_f64(r.report.rel_error)
        );
    }
    write_file(&dir.join("propositions.csv"), &text)?;
    Ok(rows)
}

/// Runs repetition 0 and exports logits features of the final global models
/// on the test set, plus per-class density divergence across the models.
pub fn export_features(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut one = cfg.clone();
    one.runs = 1;
    let summary = execute_paired(&one)?;
    let (_, test) = one.dataset.load()?;
    let dir = run_dir(&one);
    create_dir(&dir)?;
    write_file(&dir.join("resolved_config.toml"), &one.to_toml()?)?;
    let mut written = write_features(&summary, &test, &dir)?;
    let rep = &summary.repetitions[0];
    if let Some(b) = &rep.boosted {
        let scores = density_divergence(&[rep.vanilla.final_model.clone(), b.final_model.clone()], &test)?;
        let mut text = String::from("class,divergence\n");
        for (c, s) in scores.iter().enumerate() {
            let _ = writeln!(text, "{c},{}", opt(*s));
        }
        let path = dir.join("density_divergence.csv");
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}
