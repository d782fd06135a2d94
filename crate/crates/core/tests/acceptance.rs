//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Criteria 6 to 9 share one set of training runs on the desk-scale
//! synthetic benchmark (32×32, splice family, 400/100/100 per class).

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use forgery_core::detector::calibrate_threshold;
use forgery_core::losses::{loss_alignment, loss_cross_entropy, loss_fake_margin, loss_real_invariance};
use forgery_core::metrics::auc;
use forgery_core::model::patch_attention;
use forgery_core::synth::generate_split;
use forgery_core::training::{bias_statistics, evaluate, family_subset, train, Checkpoint, TrainOutcome};
use forgery_core::{
    Arm, FeatureMap, Family, ForgeryNet, ForwardMode, LossConfig, ModelConfig, Split, SyntheticSample, SyntheticSpec,
    TrainConfig,
};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const SEEDS_NEEDED: usize = 2;

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

fn random_biases(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let scale = rng.random_range(0.05..1.5);
            (0..dim)
                .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..scale) })
                .collect()
        })
        .collect()
}

fn loss_oracles() -> Outcome {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(2..=16);
        let dim = r.random_range(4..=64);
        let biases = random_biases(&mut r, n, dim);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let margin = r.random_range(0.3..3.0);
        let t = r.random_range(0.2..2.0);
        let views: Vec<&[f64]> = biases.iter().map(Vec::as_slice).collect();
        let pairs = [
            (loss_real_invariance(&views, &labels).unwrap(), naive_l1(&biases, &labels)),
            (loss_fake_margin(&views, &labels, margin).unwrap(), naive_l2(&biases, &labels, margin)),
            (loss_alignment(&views, &labels, t).unwrap(), naive_l3(&biases, &labels, t)),
            (loss_cross_entropy(&probs, &labels).unwrap(), naive_cross_entropy(&probs, &labels)),
        ];
        for (fast, slow) in pairs {
            worst = worst.max((fast - slow).abs());
        }
    }
    outcome(worst <= 1e-10, format!("max abs diff {worst:.2e} over 100 batches"))
}

fn gradient_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        in_channels: 3,
        num_scales: 2,
        base_channels: 2,
        bottleneck_channels: 4,
        patch_size: 2,
        mlp_hidden: 4,
        seed: 17,
    }
}

/// Batch of `n` images near mid-grey whose fake bias norms stay clear of the
/// margin and whose pixels stay clear of `x = x_o`.
pub fn kink_free_batch(
    net: &ForgeryNet,
    params: &forgery_core::Params,
    r: &mut impl Rng,
    n: usize,
    spread: f64,
    margin: f64,
) -> (Vec<FeatureMap>, Vec<u8>) {
    let cfg = net.config().clone();
    loop {
        let images: Vec<FeatureMap> = (0..n)
            .map(|_| random_map(r, cfg.in_channels, cfg.image_size, cfg.image_size, 0.5 - spread, 0.5 + spread))
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 1)).collect();
        labels.shuffle(r);
        let bundle = net.forward(params, &images, ForwardMode::AttendedBias).unwrap();
        let clear = bundle.samples.iter().zip(&labels).all(|(s, &y)| {
            let norm = s.bias.squared_norm().sqrt();
            let hinge_ok = y == 0 || (norm - margin).abs() > 1e-3;
            hinge_ok && s.bias.data.iter().all(|&b| b > 1e-6)
        });
        if clear {
            return (images, labels);
        }
    }
}

fn gradient_check() -> Outcome {
    let net = ForgeryNet::new(gradient_config()).unwrap();
    let params = net.init_params();
    let cfg = TrainConfig {
        arm: Arm::Full,
        loss: LossConfig {
            lambda: 0.5,
            margin: 1.0,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    let mut hinge_active = 0;
    let mut significant = 0;
    for (b, spread) in [0.05, 0.1, 0.2, 0.3, 0.45].into_iter().enumerate() {
        let (images, labels) = kink_free_batch(&net, &params, &mut r, 6, spread, 1.0);
        let bundle = net.forward(&params, &images, ForwardMode::AttendedBias).unwrap();
        hinge_active += bundle
            .samples
            .iter()
            .zip(&labels)
            .filter(|(s, &y)| y == 1 && s.bias.squared_norm().sqrt() < 1.0)
            .count();
        let check = finite_difference_check(&net, &params, &cfg, &images, &labels, 1e-5, 1e-6);
        worst = worst.max(check.worst_rel);
        significant += check.nonzero;
        if b == 0 && check.nonzero < check.checked / 2 {
            return outcome(false, format!("only {} of {} gradients are non-zero", check.nonzero, check.checked));
        }
    }
    outcome(
        worst <= 1e-4 && net.num_params() <= 5000,
        format!(
            "{} params x 5 batches, worst relative error {worst:.2e}, {significant} entries above 1e-6, \
             {hinge_active} fake samples inside the margin",
            net.num_params()
        ),
    )
}

fn patch_attention_oracle() -> Outcome {
    let mut r = rng(303);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p = r.random_range(1..=4);
        let side = p * r.random_range(1..=4);
        let c = r.random_range(1..=4);
        let q = random_map(&mut r, c, side, side, -3.0, 3.0);
        let kv = random_map(&mut r, c, side, side, -2.0, 2.0);
        let fast = patch_attention(&q, &kv, p).unwrap();
        let slow = naive_patch_attention(&q, &kv, p);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            worst = worst.max((a - b).abs());
        }
    }
    let q = FeatureMap::filled(1, 2, 2, 1.0);
    let z = FeatureMap::from_vec(1, 2, 2, vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
    let hand = patch_attention(&q, &z, 2).unwrap().data[0];
    let hand_err = (hand - 3f64.ln() / 2.0).abs();
    outcome(
        worst <= 1e-12 && hand_err <= 1e-12,
        format!("max diff {worst:.2e}, hand case {hand:.6}"),
    )
}

fn detector_calibration() -> Outcome {
    let mut r = rng(404);
    let mut worst_reject: f64 = 0.0;
    let mut minimal = true;
    for trial in 0..20 {
        let stats: Vec<f64> = (0..1000)
            .map(|_| {
                let v: f64 = r.random_range(0.0..1.0);
                // some trials carry heavy ties
                if trial % 2 == 0 {
                    (v * 50.0).round() / 50.0
                } else {
                    v
                }
            })
            .collect();
        let tau = calibrate_threshold(&stats, 0.95).unwrap();
        let rejected = stats.iter().filter(|&&b| b > tau).count() as f64 / 1000.0;
        worst_reject = worst_reject.max(rejected);
        if let Some(lower) = stats.iter().copied().filter(|&b| b < tau).reduce(f64::max) {
            let kept = stats.iter().filter(|&&b| b <= lower).count() as f64 / 1000.0;
            minimal &= kept < 0.95;
        }
    }
    outcome(
        worst_reject <= 0.05 && minimal,
        format!("worst rejected fraction {worst_reject:.3}, tau minimal: {minimal}"),
    )
}

fn auc_oracle() -> Outcome {
    let mut r = rng(505);
    let mut mismatches = 0;
    for i in 0..100 {
        let n = r.random_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = r.random_range(0.0..1.0);
                if i % 3 == 0 {
                    (s * 10.0).floor() / 10.0
                } else {
                    s
                }
            })
            .collect();
        if auc(&labels, &scores).unwrap() != pairwise_auc(&labels, &scores) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 100 instances"))
}

// ---------------------------------------------------------------------------
// desk-scale training runs

struct Bench {
    train: Vec<SyntheticSample>,
    val: Vec<SyntheticSample>,
    test: Vec<SyntheticSample>,
    test_all_families: Vec<SyntheticSample>,
}

fn bench() -> Bench {
    let spec = SyntheticSpec {
        families: vec![Family::Splice],
        ..SyntheticSpec::default()
    };
    let all = SyntheticSpec {
        families: Family::ALL.to_vec(),
        ..spec.clone()
    };
    Bench {
        train: generate_split(&spec, Split::Train).unwrap(),
        val: generate_split(&spec, Split::Val).unwrap(),
        test: generate_split(&spec, Split::Test).unwrap(),
        test_all_families: generate_split(&all, Split::Test).unwrap(),
    }
}

struct Run {
    net: ForgeryNet,
    outcome: TrainOutcome,
}

fn train_run(bench: &Bench, arm: Arm, seed: u64, lambda: f64) -> Run {
    let net = ForgeryNet::new(ModelConfig {
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        arm,
        seed,
        loss: LossConfig {
            lambda,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let outcome = train(&net, &cfg, &bench.train, &bench.val, |_| {}).unwrap();
    eprintln!(
        "  trained {arm} seed {seed} lambda {lambda} in {:.0?} (best epoch {}, val auc {:.4})",
        started.elapsed(),
        outcome.best_epoch,
        best_val_auc(&outcome)
    );
    Run { net, outcome }
}

fn best_val_auc(o: &TrainOutcome) -> f64 {
    o.history[o.best_epoch].val_auc.unwrap_or(f64::NAN)
}

fn cross_family_auc(run: &Run, arm: Arm, test: &[SyntheticSample]) -> f64 {
    let detector = if arm.uses_detector() {
        run.outcome.detector.clone()
    } else {
        forgery_core::DetectorState::disabled()
    };
    let held_out = [Family::Warp, Family::Colorshift, Family::Texture];
    let aucs: Vec<f64> = held_out
        .iter()
        .map(|&f| {
            evaluate(&run.net, &run.outcome.params, arm, &detector, &family_subset(test, f))
                .unwrap()
                .report
                .auc
        })
        .collect();
    aucs.iter().sum::<f64>() / aucs.len() as f64
}

fn count_line(per_seed: &[bool]) -> (bool, String) {
    let passing = per_seed.iter().filter(|&&p| p).count();
    (passing >= SEEDS_NEEDED, format!("{passing}/{} seeds", per_seed.len()))
}

fn intra_family(bench: &Bench, full: &[Run]) -> Outcome {
    let aucs: Vec<f64> = full
        .iter()
        .map(|run| {
            evaluate(&run.net, &run.outcome.params, Arm::Full, &run.outcome.detector, &bench.test)
                .unwrap()
                .report
                .auc
        })
        .collect();
    let (pass, seeds) = count_line(&aucs.iter().map(|&a| a >= 0.95).collect::<Vec<_>>());
    outcome(pass, format!("{seeds} at test AUC >= 0.95, AUCs {aucs:.4?}"))
}

fn ablation_ordering(bench: &Bench, full: &[Run], rl: &[Run], base: &[Run]) -> Outcome {
    let mut per_seed = Vec::new();
    let mut table = BTreeMap::new();
    for i in 0..SEEDS.len() {
        let f = cross_family_auc(&full[i], Arm::Full, &bench.test_all_families);
        let be = cross_family_auc(&full[i], Arm::AeLsaBe, &bench.test_all_families);
        let r = cross_family_auc(&rl[i], Arm::AeLsaRl, &bench.test_all_families);
        let b = cross_family_auc(&base[i], Arm::AeLsa, &bench.test_all_families);
        per_seed.push(f >= be && be >= r && r >= b && f - b >= 0.03);
        table.insert(SEEDS[i], [f, be, r, b]);
    }
    let (pass, seeds) = count_line(&per_seed);
    let rows: Vec<String> = table
        .iter()
        .map(|(s, v)| format!("seed {s}: full {:.4} be {:.4} rl {:.4} lsa {:.4}", v[0], v[1], v[2], v[3]))
        .collect();
    outcome(pass, format!("{seeds} hold the chain; {}", rows.join("; ")))
}

fn bias_separation(bench: &Bench, full: &[Run]) -> Outcome {
    let mut ratios = Vec::new();
    for run in full {
        let stats = bias_statistics(&run.net, &run.outcome.params, &bench.test).unwrap();
        let mean_of = |label: u8| {
            let v: Vec<f64> = stats
                .iter()
                .zip(&bench.test)
                .filter(|(_, s)| s.label == label)
                .map(|(b, _)| *b)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        ratios.push(mean_of(1) / mean_of(0));
    }
    let (pass, seeds) = count_line(&ratios.iter().map(|&r| r >= 2.0).collect::<Vec<_>>());
    outcome(pass, format!("{seeds} with fake/real ratio >= 2, ratios {ratios:.3?}"))
}

fn lambda_endpoints(mid: &[Run], zero: &[Run], one: &[Run]) -> Outcome {
    let mut per_seed = Vec::new();
    let mut rows = Vec::new();
    for i in 0..SEEDS.len() {
        let (m, z, o) = (
            best_val_auc(&mid[i].outcome),
            best_val_auc(&zero[i].outcome),
            best_val_auc(&one[i].outcome),
        );
        per_seed.push(m >= z && m >= o);
        rows.push(format!("seed {}: 0.5 {m:.4} 0 {z:.4} 1 {o:.4}", SEEDS[i]));
    }
    let (pass, seeds) = count_line(&per_seed);
    outcome(pass, format!("{seeds}; {}", rows.join("; ")))
}

fn determinism_and_persistence() -> Outcome {
    let spec = SyntheticSpec {
        n_train: 24,
        n_val: 8,
        n_test: 8,
        ..SyntheticSpec::default()
    };
    let train_set = generate_split(&spec, Split::Train).unwrap();
    let val_set = generate_split(&spec, Split::Val).unwrap();
    let model = ModelConfig {
        seed: 9,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let net = ForgeryNet::new(model.clone()).unwrap();
    let a = train(&net, &cfg, &train_set, &val_set, |_| {}).unwrap();
    let b = train(&net, &cfg, &train_set, &val_set, |_| {}).unwrap();
    let same_run = a.history == b.history && a.params == b.params && a.detector == b.detector;

    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::from_outcome(model, cfg, a);
    ckpt.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    let probe: Vec<FeatureMap> = val_set.iter().take(4).map(|s| s.image.clone()).collect();
    let before = net.forward(&ckpt.params, &probe, ForwardMode::AttendedBias).unwrap();
    let reloaded_net = ForgeryNet::new(loaded.model.clone()).unwrap();
    let after = reloaded_net
        .forward(&loaded.params, &probe, ForwardMode::AttendedBias)
        .unwrap();
    let bit_exact = before
        .samples
        .iter()
        .zip(&after.samples)
        .all(|(x, y)| x.prob.to_bits() == y.prob.to_bits() && x.reconstruction == y.reconstruction && x.fused == y.fused);
    let same_detector = loaded.detector == ckpt.detector;
    outcome(
        same_run && bit_exact && same_detector,
        format!("repeat run identical: {same_run}, reload bit-exact: {bit_exact}, detector restored: {same_detector}"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2} {:<4} {name} ({}) [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };

    record(1, "loss oracle equivalence", &mut loss_oracles);
    record(2, "gradient verification", &mut gradient_check);
    record(3, "patch attention oracle", &mut patch_attention_oracle);
    record(4, "detector calibration", &mut detector_calibration);
    record(5, "AUC oracle", &mut auc_oracle);

    let t = Instant::now();
    let bench = bench();
    eprintln!("training desk-scale runs ({} seeds)", SEEDS.len());
    let full: Vec<Run> = SEEDS.iter().map(|&s| train_run(&bench, Arm::Full, s, 0.5)).collect();
    let full_secs = t.elapsed().as_secs_f64();
    record(6, "intra-family training", &mut || intra_family(&bench, &full));

    let rl: Vec<Run> = SEEDS.iter().map(|&s| train_run(&bench, Arm::AeLsaRl, s, 0.5)).collect();
    let base: Vec<Run> = SEEDS.iter().map(|&s| train_run(&bench, Arm::AeLsa, s, 0.5)).collect();
    record(7, "ablation ordering", &mut || ablation_ordering(&bench, &full, &rl, &base));
    record(8, "bias separation", &mut || bias_separation(&bench, &full));

    let zero: Vec<Run> = SEEDS.iter().map(|&s| train_run(&bench, Arm::Full, s, 0.0)).collect();
    let one: Vec<Run> = SEEDS.iter().map(|&s| train_run(&bench, Arm::Full, s, 1.0)).collect();
    record(9, "lambda endpoints", &mut || lambda_endpoints(&full, &zero, &one));
    record(10, "determinism and persistence", &mut determinism_and_persistence);
    eprintln!("full-arm training took {full_secs:.0}s for {} seeds", SEEDS.len());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
