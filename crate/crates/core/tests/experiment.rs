//! Config parsing, paired runs, sweeps, and result files.

use std::path::Path;

use botpa::aggregators::AggregatorKind;
use botpa::boost::{apply_botpa, build_amplifier, ClassSimilarityMatrix, SimilarityKind};
use botpa::data::Dataset;
use botpa::experiment::{
    execute_paired, run_dir, run_paired, run_sweep, ExperimentConfig, SweepAxis, SweepValue, World, SUMMARY_HEADER,
};
use botpa::{Error, ExecMode};

const TINY: &str = r#"
name = "tiny"
seed = 3
runs = 1

[dataset]
kind = "blobs"
num_classes = 5
per_class = 12
test_per_class = 6
dim = 4
spread = 0.8

[partition]
clients = 5
scheme = "iid"

[model]
hidden = [6]

[training]
rounds = 1
local_epochs = 1

[attack]
kind = "label_flip"
source = 0
target = 1
malicious_clients = [0, 1]

[botpa]
num_intermediate = 1
surrogate_epochs = 2
"#;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg.exec = ExecMode::Serial;
    cfg
}

fn config_error(text: &str) -> (String, String) {
    match ExperimentConfig::from_toml(text) {
        Err(Error::Config { key, message }) => (key, message),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn defaults_are_filled() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    assert_eq!(cfg.training.batch_size, 64);
    assert_eq!(cfg.aggregator.kind, AggregatorKind::FedAvg);
    assert_eq!(cfg.aggregator.flame_lambda, 1e-3);
    let w = cfg.window();
    assert_eq!((w.from_round, w.to_round), (1, 1));
    let echoed = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn invalid_configs_name_the_key() {
    let (key, _) = config_error(&TINY.replace("target = 1", "target = 0"));
    assert!(key.contains("attack"), "{key}");
    let (key, _) = config_error(&TINY.replace("num_intermediate = 1", "num_intermediate = 4"));
    assert!(key.contains("num_intermediate"), "{key}");
    let (_, message) = config_error(&TINY.replace("spread = 0.8", "spread = 0.8\ncolour = 1"));
    assert!(message.contains("colour"), "{message}");
    let (key, _) = config_error(&TINY.replace("[training]\nrounds = 1", "[training]"));
    assert!(!key.is_empty());
    let no_attack = TINY.split("[attack]").next().unwrap().to_string() + "[botpa]\nnum_intermediate = 1\n";
    let (key, _) = config_error(&no_attack);
    assert_eq!(key, "botpa");
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn paired_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let summary = run_paired(&cfg).unwrap();
    assert_eq!(summary.repetitions.len(), 1);
    let out = run_dir(&cfg);
    for f in [
        "resolved_config.toml",
        "rounds_vanilla.csv",
        "rounds_boosted.csv",
        "summary.csv",
        "similarity_contrib.csv",
        "similarity_ftrs.csv",
        "amplifier.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let text = read(&out.join("summary.csv"));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER);
    assert_eq!(lines.len(), 2, "one row per repetition");

    // the echoed config reproduces the run
    let echoed = ExperimentConfig::from_toml(&read(&out.join("resolved_config.toml"))).unwrap();
    let again = execute_paired(&echoed).unwrap();
    assert_eq!(again.repetitions[0].vanilla.records, summary.repetitions[0].vanilla.records);
}

#[test]
fn ri_asr_is_recomputable_from_summary_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.runs = 3;
    cfg.training.rounds = 3;
    cfg.window = None;
    let cfg = cfg.resolved().unwrap();
    run_paired(&cfg).unwrap();
    let text = read(&run_dir(&cfg).join("summary.csv"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut checked = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (v, b, ri) = (f[col("v_asr")], f[col("b_asr")], f[col("ri_asr")]);
        if ri == "NA" {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0);
            continue;
        }
        let v: f64 = v.parse().unwrap();
        let b: f64 = b.parse().unwrap();
        assert_eq!((b - v) / v, ri.parse::<f64>().unwrap());
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn non_positive_feature_similarity_makes_boost_a_no_op() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let (train, test) = cfg.dataset.load().unwrap();
    let world = World::build(&cfg, &train, &test, 0, ExecMode::Serial).unwrap();
    let attack = cfg.attack.as_ref().unwrap();
    let flipped = world.flipped_malicious_shards(attack);
    let mut boosted = flipped.clone();
    let ftrs = ClassSimilarityMatrix {
        kind: SimilarityKind::Ftrs,
        scores: vec![vec![-0.3; 5]; 5],
        checkpoint: 2,
    };
    let parts: Vec<&Dataset> = flipped.iter().collect();
    let amp = build_amplifier(&parts, &[2, 3, 4], &ftrs, 0, 1).unwrap();
    let report = apply_botpa(&mut boosted, &amp).unwrap();
    assert!(report.total() > 0);
    assert_eq!(report.changed, 0);
    let (v, _) = world.simulate(&cfg, &flipped).unwrap();
    let (b, _) = world.simulate(&cfg, &boosted).unwrap();
    assert_eq!(v, b);
}

#[test]
fn sweep_marks_invalid_points_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.aggregator.kind = AggregatorKind::Krum;
    cfg.attack.as_mut().unwrap().malicious_clients.clear();
    cfg.attack.as_mut().unwrap().malicious_fraction = Some(0.2);
    cfg.validate().unwrap();
    cfg.sweep = Some(botpa::experiment::SweepConfig {
        axis: SweepAxis::MaliciousFraction,
        values: vec![SweepValue::Number(0.2), SweepValue::Number(0.6)],
    });
    let points = run_sweep(&cfg).unwrap();
    assert_eq!(points.len(), 2);
    assert!(points[0].outcome.is_ok());
    assert!(points[1].outcome.is_err(), "krum with 3 of 5 malicious violates n >= 2f + 3");
    let text = read(&run_dir(&cfg).join("sweep.csv"));
    assert!(text.lines().nth(1).unwrap().contains(",ok,"));
    assert!(text.lines().nth(2).unwrap().contains(",failed,"));
}

#[test]
fn single_value_sweep_equals_paired_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.sweep = Some(botpa::experiment::SweepConfig {
        axis: SweepAxis::N,
        values: vec![SweepValue::Number(1.0)],
    });
    let points = run_sweep(&cfg).unwrap();
    let swept = points[0].outcome.as_ref().unwrap();
    cfg.sweep = None;
    let direct = execute_paired(&cfg).unwrap();
    assert_eq!(swept.median_v_asr(), direct.median_v_asr());
    assert_eq!(swept.median_b_asr(), direct.median_b_asr());
    assert_eq!(
        swept.repetitions[0].boosted.as_ref().unwrap().records,
        direct.repetitions[0].boosted.as_ref().unwrap().records
    );
}

#[test]
fn more_attackers_do_not_lower_vanilla_asr() {
    let text = include_str!("../../../configs/desk_boost.toml");
    let mut cfg = ExperimentConfig::from_toml(text).unwrap();
    cfg.botpa = None;
    cfg.runs = 3;
    let mut medians = Vec::new();
    for frac in [0.1, 0.3, 0.5] {
        let point = cfg.with_axis(SweepAxis::MaliciousFraction, &SweepValue::Number(frac)).unwrap();
        medians.push(execute_paired(&point).unwrap().median_v_asr().unwrap());
    }
    // directional, with a one-point tolerance for run noise
    assert!(medians.windows(2).all(|w| w[1] >= w[0] - 0.01), "{medians:?}");
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::from_toml(&read(&path)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
