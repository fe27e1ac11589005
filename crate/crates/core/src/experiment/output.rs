use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::boost::ClassSimilarityMatrix;
use crate::error::{Error, Result};
use crate::metrics::{export_logits_features, fmt_f64, RoundRecord};

use super::config::ExperimentConfig;
use super::run::{PairedSummary, Repetition};

/// Column order of `summary.csv`.
pub const SUMMARY_HEADER: &str = "run,seed,malicious,v_asr,b_asr,ri_asr,v_accuracy,b_accuracy,\
v_final_asr,b_final_asr,v_final_accuracy,b_final_accuracy,v_malicious_selected,b_malicious_selected,\
intermediate_classes,relabeled,changed,surrogate_accuracy";

/// Fixed leading columns of `rounds_*.csv`; one `acc_class_<c>` column per class follows.
pub const ROUNDS_HEADER: &str = "run,round,aggregator,global_accuracy,asr,selected";

pub const SIMILARITY_HEADER: &str = "run,kind,checkpoint,c1,c2,score";

pub const AMPLIFIER_HEADER: &str = "run,class,cs_ftrs,label_target,label_class,crafted_label";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

fn ids(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `output_dir/<name>-s<seed>`.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(format!("{}-s{}", cfg.name, cfg.seed))
}

pub fn rounds_csv<'a>(arms: impl IntoIterator<Item = (usize, &'a [RoundRecord])>, num_classes: usize) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    for c in 0..num_classes {
        let _ = write!(out, ",acc_class_{c}");
    }
    out.push('\n');
    for (run, records) in arms {
        for r in records {
            let selected = r.selected_update_indices.as_deref().map_or_else(|| "NA".to_string(), ids);
            let _ = write!(
                out,
                "{run},{},{},{},{},{selected}",
                r.round,
                r.aggregator,
                fmt_f64(r.global_accuracy),
                opt(r.asr)
            );
            for &a in &r.per_class_accuracy {
                let _ = write!(out, ",{}", fmt_f64(a));
            }
            out.push('\n');
        }
    }
    out
}

pub fn summary_csv(reps: &[Repetition]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for rep in reps {
        let b = rep.boosted.as_ref();
        let last = |records: &[RoundRecord]| records.last().map(|r| (r.asr, r.global_accuracy));
        let v_last = last(&rep.vanilla.records);
        let b_last = b.and_then(|b| last(&b.records));
        let botpa = rep.botpa.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            rep.run,
            rep.seed,
            ids(&rep.malicious),
            opt(rep.vanilla.asr),
            opt(b.and_then(|b| b.asr)),
            opt(rep.ri_asr()),
            fmt_f64(rep.vanilla.accuracy),
            opt(b.map(|b| b.accuracy)),
            opt(v_last.and_then(|l| l.0)),
            opt(b_last.and_then(|l| l.0)),
            opt(v_last.map(|l| l.1)),
            opt(b_last.map(|l| l.1)),
            opt(rep.vanilla.malicious_selected),
            opt(b.and_then(|b| b.malicious_selected)),
            botpa.map_or_else(|| "NA".to_string(), |a| ids(&a.amplifier.classes)),
            botpa.map_or_else(|| "NA".to_string(), |a| a.report.total().to_string()),
            botpa.map_or_else(|| "NA".to_string(), |a| a.report.changed.to_string()),
            opt(botpa.map(|a| a.surrogate_accuracy)),
        );
    }
    out
}

pub fn similarity_rows(out: &mut String, run: usize, m: &ClassSimilarityMatrix) {
    let k = m.num_classes();
    for c1 in 0..k {
        for c2 in 0..k {
            let _ = writeln!(
                out,
                "{run},{},{},{c1},{c2},{}",
                m.kind.name(),
                m.checkpoint,
                fmt_f64(m.get(c1, c2))
            );
        }
    }
}

pub fn amplifier_csv(reps: &[Repetition], target: usize) -> String {
    let mut out = format!("{AMPLIFIER_HEADER}\n");
    for rep in reps {
        let Some(a) = &rep.botpa else { continue };
        for &c in &a.amplifier.classes {
            let cs = a.amplifier.ftrs_scores.get(&c).copied().unwrap_or(f64::NAN);
            let (label_t, label_c, probs) = match a.amplifier.crafted_labels.get(&c) {
                Some(l) => (
                    fmt_f64(l.probs()[target]),
                    fmt_f64(l.probs()[c]),
                    l.probs().iter().map(|&p| fmt_f64(p)).collect::<Vec<_>>().join(" "),
                ),
                None => ("NA".into(), "NA".into(), "NA".into()),
            };
            let _ = writeln!(out, "{},{c},{},{label_t},{label_c},{probs}", rep.run, fmt_f64(cs));
        }
    }
    out
}

/// Writes every artifact of a paired (or single) run into `dir`.
pub fn write_paired(cfg: &ExperimentConfig, summary: &PairedSummary, dir: &Path, num_classes: usize) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("resolved_config.toml"), &cfg.to_toml()?)?;
    let reps = &summary.repetitions;
    write_file(
        &dir.join("rounds_vanilla.csv"),
        &rounds_csv(reps.iter().map(|r| (r.run, r.vanilla.records.as_slice())), num_classes),
    )?;
    write_file(&dir.join("summary.csv"), &summary_csv(reps))?;
    if cfg.botpa.is_some() {
        write_file(
            &dir.join("rounds_boosted.csv"),
            &rounds_csv(
                reps.iter()
                    .filter_map(|r| r.boosted.as_ref().map(|b| (r.run, b.records.as_slice()))),
                num_classes,
            ),
        )?;
        let mut contrib = format!("{SIMILARITY_HEADER}\n");
        let mut ftrs = contrib.clone();
        for rep in reps {
            if let Some(a) = &rep.botpa {
                similarity_rows(&mut contrib, rep.run, &a.contrib);
                similarity_rows(&mut ftrs, rep.run, &a.ftrs);
            }
        }
        write_file(&dir.join("similarity_contrib.csv"), &contrib)?;
        write_file(&dir.join("similarity_ftrs.csv"), &ftrs)?;
        let target = cfg.attack.as_ref().map_or(0, |a| a.target);
        write_file(&dir.join("amplifier.csv"), &amplifier_csv(reps, target))?;
    }
    Ok(())
}

/// Writes `features_<arm>_run<r>.csv` for the final global models on `probe`.
pub fn write_features(summary: &PairedSummary, probe: &crate::data::Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    for rep in &summary.repetitions {
        let mut arms = vec![("vanilla", &rep.vanilla.final_model)];
        if let Some(b) = &rep.boosted {
            arms.push(("boosted", &b.final_model));
        }
        for (arm, model) in arms {
            let path = dir.join(format!("features_{arm}_run{}.csv", rep.run));
            export_logits_features(model, probe, &path, true)?;
            written.push(path);
        }
    }
    Ok(written)
}
