//! Acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line straight to stdout so the verdicts show
//! up even when the harness captures output.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;

use latefuse_core::dataio::{
    clean_text, load_features, load_probability_matrix, save_features, save_probability_matrix,
    split_train_val, SplitSpec,
};
use latefuse_core::fusion::{load_ensemble, majority_vote, policy_predict, assemble_fusion_input, EnsemblePrediction, PolicyEnsemble};
use latefuse_core::metrics::macro_f1;
use latefuse_core::nn::{
    finite_diff_check, load_checkpoint, save_checkpoint, Network, NetworkLayout, OptimizerKind,
};
use latefuse_core::noise::{class_thresholds, confident_joint, denoise, rank_label_errors, DenoiseConfig};
use latefuse_core::pipeline::{manifest_for_bundles, prepare, run_pipeline, Prepared, RunReport};
use latefuse_core::synth::{generate, write_bundle, GeneratorConfig};
use latefuse_core::{rng, Matrix, PipelineManifest, ProbabilityMatrix};

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n}: {} {title} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// -- criterion 1 --

#[test]
fn c1_gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for seed in 0..20u64 {
        let mut r = rng::seeded(1_000 + seed);
        let (n, d, c) = (r.random_range(4..16), r.random_range(2..12), r.random_range(2..8));
        let data: Vec<f64> = (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect();
        let x = Matrix::from_vec(n, d, data).unwrap();
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        for layout in [NetworkLayout::linear(d, c), NetworkLayout::with_hidden(d, Some(6), c)] {
            let net = Network::init(layout, seed).unwrap();
            let report = finite_diff_check(&net, &x, &y, 1e-5).unwrap();
            worst = worst.max(report.max_rel_error);
            instances += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient correctness",
        worst < 1e-5 && elapsed < Duration::from_secs(10) && instances == 40,
        &format!("{instances} instances, max relative error {worst:.2e}, {elapsed:.2?}"),
    );
}

// -- criterion 2 --

#[test]
fn c2_metric_oracle() {
    let got = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    // class 0: P=1/2 R=1 F1=2/3; class 1: P=1 R=2/3 F1=4/5
    let oracle = (2.0 / 3.0 + 4.0 / 5.0) / 2.0;
    let perfect = macro_f1(&[2, 0, 1, 1, 0], &[2, 0, 1, 1, 0], 3).unwrap();
    verdict(
        2,
        "metric oracle",
        (got - oracle).abs() < 1e-9 && (got - 0.733333).abs() < 1e-6 && perfect == 1.0,
        &format!("macro-F1 {got:.9} vs {oracle:.9}, perfect {perfect}"),
    );
}

// -- criterion 3 --

#[test]
fn c3_confident_learning_hand_trace() {
    let probs = ProbabilityMatrix::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.3, 0.7]]).unwrap();
    let labels = [0, 0, 1];
    let ids: Vec<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
    let t = class_thresholds(&probs, &labels).unwrap();
    let joint = confident_joint(&probs, &labels, &t).unwrap();
    let counts = [[joint.get(0, 0), joint.get(0, 1)], [joint.get(1, 0), joint.get(1, 1)]];
    let skipped = joint.skipped;
    let report = rank_label_errors(&probs, &labels, &ids, t.clone(), joint).unwrap();
    let cand: Vec<(&str, usize, usize, f64)> = report
        .candidates
        .iter()
        .map(|c| (c.id.as_str(), c.given_label, c.assigned_label, c.self_confidence))
        .collect();
    let pass = t == vec![0.55, 0.7]
        && counts == [[1, 1], [0, 1]]
        && skipped == 0
        && cand == vec![("2", 0, 1, 0.2)];
    verdict(
        3,
        "confident-learning hand trace",
        pass,
        &format!("thresholds {t:?}, joint {counts:?}, candidates {cand:?}"),
    );
}

// -- criterion 4 --

#[test]
fn c4_noise_recovery() {
    let start = Instant::now();
    let data = generate(&GeneratorConfig::noisy_labels(5_000, 10, 0.10, 7)).unwrap();
    let outcome = denoise(&data.dataset, "image", &DenoiseConfig::default(), 11).unwrap();
    let flipped: HashSet<&str> = data.flipped_ids().into_iter().collect();
    let removed = &outcome.prune.removed_ids;
    let hits = removed.iter().filter(|id| flipped.contains(id.as_str())).count();
    let precision = hits as f64 / removed.len().max(1) as f64;
    let elapsed = start.elapsed();
    verdict(
        4,
        "noise recovery",
        !removed.is_empty() && precision >= 0.70 && elapsed < Duration::from_secs(60),
        &format!(
            "{} flips injected, {} candidates, {hits}/{} removals truly flipped = {:.1}%, {elapsed:.2?}",
            flipped.len(),
            outcome.report.candidates.len(),
            removed.len(),
            100.0 * precision
        ),
    );
}

// -- shared preset run for criteria 5, 6 and 8 --

struct PresetRun {
    manifest: PipelineManifest,
    report: RunReport,
    prepared: Prepared,
    ensemble: PolicyEnsemble,
    elapsed: Duration,
}

fn preset_run() -> &'static PresetRun {
    static RUN: OnceLock<PresetRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let dir = scratch_dir("preset");
        let data = generate(&GeneratorConfig::complementary(20_000, 2024)).unwrap();
        let bundle = write_bundle(&data, &dir, "train").unwrap();
        let manifest = manifest_for_bundles(27, &bundle, None, &dir, 2024);
        let report = run_pipeline(&manifest).unwrap();
        let elapsed = start.elapsed();
        let prepared = prepare(&manifest).unwrap();
        let ensemble = load_ensemble(manifest.out_dir().join("policy/base")).unwrap();
        PresetRun {
            manifest,
            report,
            prepared,
            ensemble,
            elapsed,
        }
    })
}

// -- criterion 5 --

#[test]
fn c5_fusion_ordering() {
    let run = preset_run();
    let f1 = |stage: &str| run.report.score(stage).unwrap().macro_f1;
    let (image, text, fused) = (f1("unimodal.image"), f1("unimodal.text"), f1("decision_level"));
    let margin = fused - image.max(text);
    verdict(
        5,
        "unimodal and fusion ordering on the complementary preset",
        image < text && margin >= 0.02 && run.elapsed < Duration::from_secs(300),
        &format!(
            "N=20000 C=27 M=2, scored on {} {} rows: image {image:.4} < text {text:.4}, decision-level {fused:.4} (+{margin:.4}), feature-level {:.4}, {:.2?}",
            run.report.evaluation_set,
            run.report.sizes.evaluation,
            f1("feature_level"),
            run.elapsed
        ),
    );
}

// -- criterion 6 --

#[test]
fn c6_ensemble_properties() {
    // permutation invariance on random members
    let mut r = rng::seeded(6);
    let (n, c, k) = (50, 5, 8);
    let members: Vec<ProbabilityMatrix> = (0..k)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.0..1.0f64).powi(3) + 1e-3).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            ProbabilityMatrix::from_rows(&rows).unwrap()
        })
        .collect();
    let labels: Vec<Vec<usize>> = members.iter().map(ProbabilityMatrix::argmax_rows).collect();
    let vote = |order: &[usize]| {
        let l: Vec<&[usize]> = order.iter().map(|&i| labels[i].as_slice()).collect();
        let p: Vec<&ProbabilityMatrix> = order.iter().map(|&i| &members[i]).collect();
        EnsemblePrediction::from_members(&l, &p).unwrap()
    };
    let mut order: Vec<usize> = (0..k).collect();
    let reference = vote(&order);
    let mut permutation_ok = true;
    for _ in 0..200 {
        order.shuffle(&mut r);
        permutation_ok &= vote(&order) == reference;
    }

    // tie-break example
    let mut mean = vec![0.0; 3];
    mean[1] = 0.48;
    mean[2] = 0.51;
    let tie = majority_vote(&[1, 2], &mean).unwrap();
    let tie_ok = tie.winner == 2 && tie.tie_broken;

    // K=1 and the ensemble-vs-member margin on the preset run
    let run = preset_run();
    let eval = &run.prepared.train;
    let y = eval.labels().unwrap();
    let input = assemble_fusion_input(eval).unwrap();
    let mut single = run.ensemble.clone();
    single.members.truncate(1);
    let single_pred = policy_predict(&single, &input).unwrap();
    let k1_ok = single_pred.labels == single.members[0].best_network.forward(&input.vectors).unwrap().argmax_rows();
    let member_f1: Vec<f64> = run
        .ensemble
        .members
        .iter()
        .map(|m| macro_f1(&m.best_network.forward(&input.vectors).unwrap().argmax_rows(), y, 27).unwrap())
        .collect();
    let best = member_f1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ens_f1 = run.report.score("decision_level").unwrap().macro_f1;
    let margin_ok = run.ensemble.members.len() == 8 && ens_f1 >= best - 0.01;

    verdict(
        6,
        "ensemble properties",
        permutation_ok && tie_ok && k1_ok && margin_ok,
        &format!(
            "permutation invariant {permutation_ok}, tie example -> {} (tie_broken {}), K=1 argmax {k1_ok}, 8-member {ens_f1:.4} vs best member {best:.4}",
            tie.winner, tie.tie_broken
        ),
    );
}

// -- criterion 7 --

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn c7_determinism() {
    let dir = scratch_dir("determinism");
    let bin = env!("CARGO_BIN_EXE_latefuse");
    let synth = Command::new(bin)
        .args(["synth", "--n", "10000", "--test-n", "2000", "--seed", "77", "--out-dir"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(synth.status.success());
    let manifest = dir.join("manifest.toml");
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("\n[[variants]]\nname = \"linear\"\nhidden = 0\n\n[[variants]]\nname = \"h6_b32\"\nbatch_size = 32\n\n[[variants]]\nname = \"raw\"\ndenoised = false\n");
    std::fs::write(&manifest, text).unwrap();

    let run = || {
        let out = Command::new(bin).args(["--jobs", "3", "run"]).arg(&manifest).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        snapshot(&dir.join("out"))
    };
    let first = run();
    let second = run();
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let checkpoints = first.keys().filter(|k| k.extension().is_some_and(|e| e == "json")).count();
    let has = |name: &str| first.contains_key(Path::new(name));
    let complete = checkpoints >= 3 * 8
        && ["predictions.csv", "ensemble_predictions.csv", "report.toml", "evaluation.toml", "noise_report.csv"]
            .iter()
            .all(|n| has(n));
    verdict(
        7,
        "determinism",
        differing.is_empty() && complete,
        &format!("{} files ({checkpoints} checkpoints) compared, {} differ {:?}", first.len(), differing.len(), differing),
    );
}

// -- criterion 8 --

#[test]
fn c8_protocol_defaults() {
    let mut checks: Vec<(&str, bool)> = Vec::new();

    // 9:1 split with floor sizes on a realistic training-set size
    let n = 84_916;
    let spec = SplitSpec { train_fraction: 0.9, seed: 0 };
    checks.push(("split 76424/8492", spec.train_size(n) == 76_424 && n - spec.train_size(n) == 8_492));
    let run = preset_run();
    let m = &run.manifest;
    checks.push(("manifest split 0.9", m.split.train_fraction == 0.9));
    checks.push((
        "preset split sizes",
        run.prepared.train.len() == 18_000 && run.prepared.validation.len() == 2_000,
    ));
    let (tr, va) = split_train_val(&run.prepared.labeled, spec).unwrap();
    checks.push(("split deterministic in seed", tr.len() == 18_000 && va.len() == 2_000));

    // 4-fold out-of-fold noise detection with a 10% prune
    checks.push(("denoise 4-fold", m.denoise_config().folds == 4 && DenoiseConfig::default().folds == 4));
    checks.push(("prune 10%", m.denoise.fraction == 0.10));
    let small = generate(&GeneratorConfig::noisy_labels(400, 3, 0.1, 1)).unwrap();
    let outcome = denoise(&small.dataset, "image", &m.denoise_config(), 3).unwrap();
    checks.push(("OOF uses 4 folds", outcome.out_of_fold.folds.k == 4 && outcome.out_of_fold.models.len() == 4));

    // the policy ensemble as written to disk by the preset run
    let ens = &run.ensemble;
    checks.push(("8-fold policy", ens.folds.k == 8 && ens.members.len() == 8));
    checks.push(("hidden 6", ens.layout.hidden_dim == Some(6) && ens.layout.input_dim == 54));
    let mut history_ok = true;
    for member in &ens.members {
        let cfg = &member.config;
        history_ok &= cfg.optimizer == OptimizerKind::Adam && cfg.learning_rate == 0.01 && cfg.epochs == 40;
        history_ok &= member.history.len() == 40;
        let best = member.history.iter().map(|h| h.val_macro_f1).fold(f64::NEG_INFINITY, f64::max);
        let first_best = member.history.iter().find(|h| h.val_macro_f1 == best).unwrap().epoch;
        history_ok &= member.best_val_score == best && member.best_epoch == first_best;
    }
    checks.push(("Adam lr 0.01, 40 epochs, best-F1 checkpoint", history_ok));
    checks.push(("policy trained on validation", run.report.policy_trained_on == "validation"));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        8,
        "protocol conformance",
        failed.is_empty(),
        &format!("{} checks, failed {failed:?}", checks.len()),
    );
}

// -- criterion 9 --

fn fuzz_string(r: &mut impl rand::Rng) -> String {
    const PIECES: &[&str] = &[
        "<b>", "</b>", "<p class=\"x\">", "<br/>", "<", ">", "&", ";", "&amp;", "&lt;", "&gt;", "&quot;", "&#39;",
        "&#x41;", "&#65", "&nbsp;", "&amp;lt;", "&#38;#60;", "&bogus;", " ", "  ", "\t", "\n", "caf\u{e9}", "\u{fc}ber",
        "Chaise", "bois", "42", "#", "x", "\u{2013}", "&#xZZ;", "<<a>>", "&&",
    ];
    let len = r.random_range(0..24);
    (0..len).map(|_| PIECES[r.random_range(0..PIECES.len())]).collect()
}

#[test]
fn c9_round_trips() {
    let dir = scratch_dir("roundtrip");
    let mut r = rng::seeded(9);

    // probability CSV with awkward values, bit for bit
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let mut raw: Vec<f64> = (0..7).map(|_| r.random_range(0.0..1.0f64).powi(5)).collect();
            if i % 10 == 0 {
                raw[i % 7] = 0.0;
                raw[(i + 1) % 7] = 1e-300;
            }
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let probs = ProbabilityMatrix::from_rows(&rows).unwrap();
    let ids: Vec<String> = (0..rows.len()).map(|i| format!("id{i}")).collect();
    let path = dir.join("probs.csv");
    save_probability_matrix(&path, &ids, &probs).unwrap();
    let back = load_probability_matrix(&path, 7).unwrap();
    let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let probs_ok = back.ids == ids && bits(back.values.as_matrix()) == bits(probs.as_matrix());

    let feats: Vec<f64> = (0..200 * 5).map(|_| r.random_range(-1e6..1e6) * r.random_range(0.0..1e-8)).collect();
    let feats = Matrix::from_vec(200, 5, feats).unwrap();
    let fpath = dir.join("features.csv");
    save_features(&fpath, &ids, &feats).unwrap();
    let feats_ok = bits(&load_features(&fpath).unwrap().values) == bits(&feats);

    // checkpoints: trained model survives save/load exactly and re-saves identically
    let data = generate(&GeneratorConfig::complementary(3_000, 5)).unwrap().dataset;
    let input = assemble_fusion_input(&data).unwrap();
    let y = data.labels().unwrap();
    let net = Network::init(NetworkLayout::two_layer(54, 27), 3).unwrap();
    let config = latefuse_core::nn::TrainConfig { epochs: 3, ..Default::default() };
    let set = latefuse_core::nn::LabeledData::new(&input.vectors, y).unwrap();
    let trained = latefuse_core::nn::train(net, set, set, &config).unwrap();
    let c1 = dir.join("a.json");
    let c2 = dir.join("b.json");
    save_checkpoint(&c1, &trained).unwrap();
    let loaded = load_checkpoint(&c1).unwrap();
    save_checkpoint(&c2, &loaded).unwrap();
    let param_bits = |m: &latefuse_core::nn::TrainedModel| {
        use latefuse_core::nn::Differentiable;
        m.best_network.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let ckpt_ok = loaded == trained
        && param_bits(&loaded) == param_bits(&trained)
        && std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap();

    // clean_text is idempotent
    let mut non_idempotent = 0;
    for _ in 0..1_000 {
        let s = fuzz_string(&mut r);
        let once = clean_text(&s);
        if clean_text(&once) != once {
            non_idempotent += 1;
        }
    }

    verdict(
        9,
        "round trips",
        probs_ok && feats_ok && ckpt_ok && non_idempotent == 0,
        &format!(
            "probability csv {probs_ok}, feature csv {feats_ok}, checkpoint {ckpt_ok}, clean_text fuzz 1000 strings with {non_idempotent} failures"
        ),
    );
}
