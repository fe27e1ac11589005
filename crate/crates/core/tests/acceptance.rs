//! Acceptance suite: one PASS/FAIL line per criterion, then a single assert.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the report.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use botpa::aggregators::{coordinate_median, flame, krum, multi_krum, trimmed_mean};
use botpa::attacks::flip_labels;
use botpa::boost::{
    checkpoint_epoch, craft_soft_label, select_intermediate_classes, train_surrogate, ClassSampling, ContribGradient,
    SurrogateTraining,
};
use botpa::data::partition::{partition_dirichlet, sample_dirichlet};
use botpa::data::{synth_blobs, Affinity, BlobSpec};
use botpa::experiment::{execute_paired, median_of, ExperimentConfig, PairedSummary};
use botpa::fl::ClientUpdate;
use botpa::metrics::{check_proposition1, check_proposition2};
use botpa::nn::{Architecture, LayerSpec, Mode, Model, OptimizerSpec, ParamVector, SoftLabel, Tensor};
use botpa::ExecMode;

const DESK_BOOST: &str = include_str!("../../../configs/desk_boost.toml");
const DESK_KRUM: &str = include_str!("../../../configs/desk_krum.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

// ---------------------------------------------------------------- 1

fn random_label(r: &mut ChaCha8Rng, k: usize) -> SoftLabel {
    let raw: Vec<f64> = (0..k).map(|_| r.random::<f64>() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    SoftLabel::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

/// Worst per-segment relative error `|g - fd| / max(|g|, |fd|)` (norm-wise).
fn gradient_check(specs: &[LayerSpec], input: &[usize], seed: u64) -> (f64, BTreeSet<&'static str>) {
    let arch = Architecture::new(input, specs).unwrap();
    let model = Model::init(arch.clone(), seed);
    let mut r = rng(seed ^ 0xA5A5);
    let n = 4;
    let len: usize = input.iter().product();
    let data: Vec<f64> = (0..n * len).map(|_| gauss(&mut r)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(input);
    let x = Tensor::new(shape, data).unwrap();
    let labels: Vec<SoftLabel> = (0..n).map(|_| random_label(&mut r, arch.num_classes())).collect();
    let analytic = model.loss_and_gradient(&x, &labels, Mode::Train).unwrap().grad;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seg in arch.layout().segments() {
        if !seg.trainable {
            continue;
        }
        let mut diff = 0.0;
        let mut a_norm = 0.0;
        let mut f_norm = 0.0;
        for j in seg.offset..seg.offset + seg.len {
            let mut plus = model.clone();
            plus.params_mut().values_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut().values_mut()[j] -= h;
            let lp = plus.loss_and_gradient(&x, &labels, Mode::Train).unwrap().loss;
            let lm = minus.loss_and_gradient(&x, &labels, Mode::Train).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let g = analytic.values()[j];
            diff += (g - fd) * (g - fd);
            a_norm += g * g;
            f_norm += fd * fd;
        }
        let scale = a_norm.sqrt().max(f_norm.sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    let kinds = specs.iter().map(LayerSpec::kind).collect();
    (worst, kinds)
}

fn criterion_1() -> Outcome {
    let conv_stack = [
        LayerSpec::Conv2d {
            filters: 3,
            kernel: 3,
            padding: 1,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 6 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Dense { units: 4 },
    ];
    let dense_stack = [
        LayerSpec::Dense { units: 7 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: 3 },
    ];
    let mut worst: f64 = 0.0;
    let mut covered = BTreeSet::new();
    for seed in 0..5 {
        for (specs, input) in [(&conv_stack[..], &[2usize, 6, 6][..]), (&dense_stack[..], &[5usize][..])] {
            let (e, kinds) = gradient_check(specs, input, seed);
            worst = worst.max(e);
            covered.extend(kinds);
        }
    }
    let all = ["batch_norm", "conv2d", "dense", "flatten", "max_pool", "relu"];
    let complete = all.iter().all(|k| covered.contains(k));
    outcome(
        worst < 1e-4 && complete,
        format!("max relative error {worst:.2e} over 5 seeds, layer kinds {covered:?}"),
    )
}

// ---------------------------------------------------------------- 2 and 3

fn softmax_regression(seed: u64) -> (Model, botpa::data::Dataset) {
    let data = synth_blobs(4, 12, 5, 1.0, seed).unwrap();
    let model = Model::init(Architecture::mlp(5, &[], 4).unwrap(), seed + 1000);
    (model, data)
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (model, data) = softmax_regression(seed);
        let rep = check_proposition1(&model, &data, 0, 1, 0.1).unwrap();
        worst = worst.max(rep.max_abs_error);
    }
    outcome(worst < 1e-6, format!("max abs error {worst:.2e} over 20 seeds"))
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut reduction: f64 = 0.0;
    let mut zero_branch: f64 = 0.0;
    for seed in 0..20 {
        let (model, data) = softmax_regression(seed);
        for lambda in [0.0, 0.4, 1.0] {
            let rep = check_proposition2(&model, &data, 1, 2, lambda, 0.1).unwrap();
            worst = worst.max(rep.max_abs_error);
            if lambda == 0.0 {
                zero_branch = zero_branch.max(rep.empirical.norm());
            }
        }
        // z = source with lambda = 1 is the plain label flip
        let p1 = check_proposition1(&model, &data, 0, 1, 0.1).unwrap();
        let p2 = check_proposition2(&model, &data, 1, 0, 1.0, 0.1).unwrap();
        reduction = reduction.max(p1.empirical.max_abs_diff(&p2.empirical));
        reduction = reduction.max(p1.analytic.max_abs_diff(&p2.analytic));
    }
    outcome(
        worst < 1e-6 && reduction < 1e-12 && zero_branch < 1e-12,
        format!(
            "max abs error {worst:.2e}; lambda=1 reduction gap {reduction:.2e}; lambda=0 divergence {zero_branch:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn updates_from(vectors: &[Vec<f64>], weights: &[usize]) -> Vec<ClientUpdate> {
    vectors
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (v, &w))| ClientUpdate::new(i, ParamVector::flat(v.clone()), w))
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Every subset of `items` of size `k`.
fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut with: Vec<Vec<usize>> = subsets(&items[1..], k - 1)
        .into_iter()
        .map(|mut s| {
            s.insert(0, items[0]);
            s
        })
        .collect();
    with.extend(subsets(&items[1..], k));
    with
}

/// Krum score by enumerating neighbour subsets: the minimum over all
/// `(n - f - 2)`-subsets of the summed squared distances.
fn brute_score(v: &[Vec<f64>], i: usize, f: usize) -> f64 {
    let others: Vec<usize> = (0..v.len()).filter(|&j| j != i).collect();
    subsets(&others, v.len() - f - 2)
        .iter()
        .map(|s| {
            let mut d: Vec<f64> = s.iter().map(|&j| sq(&v[i], &v[j])).collect();
            d.sort_by(f64::total_cmp);
            d.iter().sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn weighted_mean(v: &[Vec<f64>], w: &[usize], idx: &[usize]) -> Vec<f64> {
    let total: usize = idx.iter().map(|&i| w[i]).sum();
    let mut out = vec![0.0; v[0].len()];
    for &i in idx {
        let a = w[i] as f64 / total as f64;
        for (o, x) in out.iter_mut().zip(&v[i]) {
            *o += a * x;
        }
    }
    out
}

fn brute_median(col: &[f64]) -> f64 {
    // the value(s) with at most half of the others strictly on each side
    let n = col.len();
    let mut lower = f64::NAN;
    let mut upper = f64::NAN;
    for &x in col {
        let below = col.iter().filter(|&&y| y < x).count();
        let equal = col.iter().filter(|&&y| y == x).count();
        if below <= (n - 1) / 2 && (n - 1) / 2 < below + equal {
            lower = x;
        }
        if below <= n / 2 && n / 2 < below + equal {
            upper = x;
        }
    }
    if n % 2 == 1 {
        lower
    } else {
        0.5 * (lower + upper)
    }
}

fn brute_trimmed(col: &[f64], k: usize) -> f64 {
    let mut s = col.to_vec();
    s.sort_by(f64::total_cmp);
    let kept = &s[k..s.len() - k];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn criterion_4() -> Outcome {
    let mut mismatches = Vec::new();
    for inst in 0..200u64 {
        let mut r = rng(10_000 + inst);
        let n = r.random_range(3..=8);
        let dim = r.random_range(1..=6);
        let f = r.random_range(0..=(n - 3) / 2);
        let v: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| gauss(&mut r)).collect()).collect();
        let w: Vec<usize> = (0..n).map(|_| r.random_range(1..=5)).collect();
        let ups = updates_from(&v, &w);

        let scores: Vec<f64> = (0..n).map(|i| brute_score(&v, i, f)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let (ki, kd) = krum(&ups, f).unwrap();
        if ki != order[0] || kd.values() != v[order[0]].as_slice() {
            mismatches.push(format!("krum #{inst}"));
        }
        let m = r.random_range(1..=n);
        let (mi, md) = multi_krum(&ups, f, m).unwrap();
        let chosen = &order[..m];
        let expect = weighted_mean(&v, &w, chosen);
        let same_set = mi.iter().copied().collect::<BTreeSet<_>>() == chosen.iter().copied().collect();
        let gap = md.values().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !same_set || gap > 1e-12 {
            mismatches.push(format!("multi-krum #{inst} gap {gap:e}"));
        }
        let med = coordinate_median(&ups).unwrap();
        let beta = r.random_range(0.0..0.49);
        let tm = trimmed_mean(&ups, beta).unwrap();
        let k = (beta * n as f64).floor() as usize;
        for j in 0..dim {
            let col: Vec<f64> = v.iter().map(|x| x[j]).collect();
            if med.values()[j] != brute_median(&col) {
                mismatches.push(format!("median #{inst}"));
            }
            if tm.values()[j] != brute_trimmed(&col, k) {
                mismatches.push(format!("trimmed mean #{inst}"));
            }
        }
    }

    let mut flame_ok = 0;
    for trial in 0..100u64 {
        let mut r = rng(50_000 + trial);
        let benign = r.random_range(7..=9);
        let dim = 20;
        let base: Vec<f64> = (0..dim).map(|_| gauss(&mut r)).collect();
        let mut v: Vec<Vec<f64>> = (0..benign)
            .map(|_| base.iter().map(|b| b + 0.1 * gauss(&mut r)).collect())
            .collect();
        let outlier: Vec<f64> = (0..dim).map(|_| 100.0 * gauss(&mut r)).collect();
        let pos = r.random_range(0..=benign);
        v.insert(pos, outlier);
        let ups = updates_from(&v, &vec![1; v.len()]);
        let out = flame(&ups, 1e-3, trial).unwrap();
        if !out.kept_clients.contains(&pos) {
            flame_ok += 1;
        }
    }
    outcome(
        mismatches.is_empty() && flame_ok == 100,
        format!(
            "{} oracle mismatches over 200 instances; flame excluded the x100 outlier in {flame_ok}/100",
            mismatches.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let k = 6;
    let (z, tgt) = (3, 1);
    let mut bad = Vec::new();
    for i in -100..=100 {
        let cs = i as f64 / 100.0;
        let label = craft_soft_label(cs, z, tgt, k).unwrap();
        let p = label.probs();
        let sum: f64 = p.iter().sum();
        let valid = p.len() == k && p.iter().all(|&x| (0.0..=1.0).contains(&x)) && (sum - 1.0).abs() <= 1e-12;
        if !valid || p[tgt] != cs.max(0.0) {
            bad.push(cs);
        }
    }
    outcome(bad.is_empty(), format!("{} of 201 grid points violate the invariants", bad.len()))
}

// ---------------------------------------------------------------- 6, 7, 11

fn desk_summary(text: &str) -> PairedSummary {
    let mut cfg = ExperimentConfig::from_toml(text).unwrap();
    cfg.exec = ExecMode::Parallel;
    execute_paired(&cfg).unwrap()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{:.1}%", 100.0 * x))
}

fn criterion_6(s: &PairedSummary) -> Outcome {
    let (v, b, ri) = (s.median_v_asr(), s.median_b_asr(), s.median_ri_asr());
    let pass = matches!((v, b, ri), (Some(v), Some(b), Some(ri)) if b > v && ri >= 0.10);
    outcome(
        pass,
        format!(
            "median V-ASR {} B-ASR {} RI-ASR {} over {} paired seeds",
            pct(v),
            pct(b),
            pct(ri),
            s.repetitions.len()
        ),
    )
}

fn criterion_7(s: &PairedSummary) -> Outcome {
    let gaps: Vec<f64> = s
        .repetitions
        .iter()
        .map(|r| (r.boosted.as_ref().unwrap().accuracy - r.vanilla.accuracy).abs())
        .collect();
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 0.02,
        format!("largest windowed accuracy gap {:.2} points across runs", 100.0 * worst),
    )
}

fn criterion_11(s: &PairedSummary) -> Outcome {
    let v = s.median_v_asr();
    let b = s.median_b_asr();
    let vsel = median_of(s.repetitions.iter().map(|r| r.vanilla.malicious_selected));
    let bsel = median_of(s.repetitions.iter().map(|r| r.boosted.as_ref().and_then(|b| b.malicious_selected)));
    let pass = matches!((v, b, vsel, bsel), (Some(v), Some(b), Some(vs), Some(bs)) if b >= v && bs >= vs);
    outcome(
        pass,
        format!(
            "median ASR vanilla {} boosted {}; median Krum selection rate vanilla {} boosted {}",
            pct(v),
            pct(b),
            pct(vsel),
            pct(bsel)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let (source, target, z) = (0, 1, 5);
    let mut hits = 0;
    let mut picks = Vec::new();
    for seed in 0..10u64 {
        let mut spec = BlobSpec::new(10, 60, 20, 1.0, 100 + seed);
        spec.affinities.push(Affinity {
            class: z,
            anchor: source,
            fraction: 0.0,
        });
        let mut pooled = spec.generate().unwrap();
        flip_labels(&mut pooled, source, target);
        let arch = Architecture::mlp(20, &[32], 10).unwrap();
        let training = SurrogateTraining {
            epochs: 10,
            checkpoint: checkpoint_epoch(10),
            optimizer: OptimizerSpec::adam(1e-3),
            batch_size: 32,
            seed,
        };
        let (mid, _) = train_surrogate(arch, &pooled, &training).unwrap();
        let sampling = ClassSampling {
            cap: Some(100),
            seed,
            exec: ExecMode::Parallel,
        };
        let (chosen, _) =
            select_intermediate_classes(&mid, &pooled, source, target, 1, &sampling, ContribGradient::default())
                .unwrap();
        picks.push(chosen[0]);
        if chosen[0] == z {
            hits += 1;
        }
    }
    outcome(hits >= 9, format!("co-located class ranked first in {hits}/10 seeds (picks {picks:?})"))
}

// ---------------------------------------------------------------- 9

/// Fourth central moment of Beta(a, b).
fn beta_mu4(a: f64, b: f64) -> f64 {
    let s = a + b;
    let var = a * b / (s * s * (s + 1.0));
    let excess = 6.0 * ((a - b).powi(2) * (s + 1.0) - a * b * (s + 2.0)) / (a * b * (s + 2.0) * (s + 3.0));
    (excess + 3.0) * var * var
}

fn criterion_9() -> Outcome {
    let k = 5;
    let draws = 1000;
    let mut worst_z: f64 = 0.0;
    for beta in [0.5f64, 1.0] {
        let mut r = botpa::seed::rng(77, &[beta.to_bits()]);
        let samples: Vec<Vec<f64>> = (0..draws).map(|_| sample_dirichlet(k, beta, &mut r).unwrap()).collect();
        // each coordinate is Beta(beta, (k - 1) beta)
        let (a, b) = (beta, (k as f64 - 1.0) * beta);
        let mean = a / (a + b);
        let var = a * b / ((a + b).powi(2) * (a + b + 1.0));
        let se_mean = (var / draws as f64).sqrt();
        let se_var = ((beta_mu4(a, b) - var * var) / draws as f64).sqrt();
        for i in 0..k {
            let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let m = xs.iter().sum::<f64>() / draws as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
            worst_z = worst_z.max(((m - mean) / se_mean).abs());
            worst_z = worst_z.max(((v - var) / se_var).abs());
        }
    }
    let ds = synth_blobs(10, 30, 2, 1.0, 3).unwrap();
    let mut broken = 0;
    for seed in 0..100 {
        let beta = if seed % 2 == 0 { 0.5 } else { 1.0 };
        let part = partition_dirichlet(&ds, 10, beta, seed).unwrap();
        let mut all: Vec<usize> = part.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        if part.shards.len() != 10 || all != (0..ds.len()).collect::<Vec<_>>() {
            broken += 1;
        }
    }
    outcome(
        worst_z <= 3.0 && broken == 0,
        format!("largest moment deviation {worst_z:.2} standard errors; {broken}/100 partitions broke invariants"),
    )
}

// ---------------------------------------------------------------- 10

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, std::fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_boost.toml");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_botpa"))
            .args(["run", "--serial", "--config"])
            .arg(&config)
            .arg("--output-dir")
            .arg(dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        outputs.push(csv_files(&dir.path().join("desk-boost-s1")));
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    outcome(
        outputs[0] == outputs[1] && names.len() >= 5,
        format!("{} CSV files compared byte for byte: {names:?}", names.len()),
    )
}

// ----------------------------------------------------------------

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "{} criterion {id:>2} ({name}): {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.pass
}

#[test]
fn acceptance() {
    let mut results = vec![
        run(1, "gradient correctness", criterion_1),
        run(2, "label-flip divergence", criterion_2),
        run(3, "soft-label divergence", criterion_3),
        run(4, "aggregator oracles", criterion_4),
        run(5, "soft-label validity", criterion_5),
    ];
    let start = Instant::now();
    let boost = catch_unwind(|| desk_summary(DESK_BOOST)).ok();
    println!("     desk-scale boosting runs took {:.1}s", start.elapsed().as_secs_f64());
    results.push(run(6, "desk-scale boosting", || criterion_6(boost.as_ref().expect("desk run failed"))));
    results.push(run(7, "stealthiness", || criterion_7(boost.as_ref().expect("desk run failed"))));
    results.push(run(8, "amplifier selection", criterion_8));
    results.push(run(9, "dirichlet partitioner", criterion_9));
    results.push(run(10, "determinism", criterion_10));
    results.push(run(11, "boost under krum", || criterion_11(&desk_summary(DESK_KRUM))));
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}
