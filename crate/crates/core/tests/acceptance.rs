//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so the criteria execute
//! sequentially and their timings are not distorted by parallel tests.

use std::collections::BTreeMap;
use std::time::Instant;

use brandrank::dataset::{ActionType, BrandTable, DatasetOptions, EncodedInstance, EncodedStep, Vocabulary};
use brandrank::eval::{auc, report_from_scores, score_all};
use brandrank::features::{build_brand_feature_vectors, FeatureOptions, FEATURE_DIM};
use brandrank::gradcheck::{modification_grid, random_problem};
use brandrank::models::{Model, ModelConfig, Variant};
use brandrank::nn::{softmax_into, ParamTensors};
use brandrank::pipeline::{prepare, PrepareOptions, Prepared};
use brandrank::synth::{generate, oracle_scores, SynthConfig};
use brandrank::train::{checkpoint_to_string, instance_loss, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const EXPERIMENT_HIDDEN: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn experiment_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        learning_rate: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

fn prepared(config: &SynthConfig, min_brand_actions: usize) -> Prepared {
    let out = generate(config).expect("synthetic data");
    let options = PrepareOptions {
        min_brand_actions,
        dataset: DatasetOptions {
            seed: config.seed,
            ..DatasetOptions::default()
        },
        ..PrepareOptions::default()
    };
    prepare(&out.items, &out.events, &out.actions, options).expect("prepared data")
}

fn test_auc(prep: &Prepared, variant: Variant, seed: u64) -> f64 {
    let config = variant.config(prep.table.vocab.len(), FEATURE_DIM, EXPERIMENT_HIDDEN);
    let out = train(&prep.train, &prep.table, config, experiment_train_config(seed)).expect("training");
    let scores = score_all(&out.checkpoint.model(), &prep.test, &prep.table, 1).expect("scoring");
    let labels: Vec<u8> = prep.test.iter().map(|i| i.label).collect();
    auc(&scores, &labels).expect("auc")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

/// Central differences written out independently of the library's checker.
fn max_relative_error(model: &Model, table: &BrandTable, inst: &EncodedInstance, step: f64) -> f64 {
    let w = 0.5;
    let fwd = model.forward(inst, table).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(inst, table, &fwd, w, &mut grads).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, m)| m.as_slice().to_vec()).collect();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (t, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.params.tensors()[t].1.as_slice()[i];
            probe.params.tensors_mut()[t].1.as_mut_slice()[i] = orig + step;
            let up = probe.loss(inst, table, w).unwrap();
            probe.params.tensors_mut()[t].1.as_mut_slice()[i] = orig - step;
            let down = probe.loss(inst, table, w).unwrap();
            probe.params.tensors_mut()[t].1.as_mut_slice()[i] = orig;
            let n = (up - down) / (2.0 * step);
            worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-6));
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    for (name, config) in modification_grid(5, 6, 8) {
        for instance in 0..5u64 {
            let (model, table, inst) = random_problem(config, 4, 1000 + instance).unwrap();
            let err = max_relative_error(&model, &table, &inst, 1e-5);
            if err > worst.0 {
                worst = (err, name.clone());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst.0 <= 1e-4 && secs < 60.0,
        detail: format!(
            "9 architectures x 5 instances, max relative error {:.2e} ({}), {:.1}s",
            worst.0, worst.1, secs
        ),
    }
}

// ---------------------------------------------------------------------------
// 2. AUC oracle equivalence
// ---------------------------------------------------------------------------

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (s_pos, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (s_neg, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1.0;
            if s_pos > s_neg {
                credit += 1.0;
            } else if s_pos == s_neg {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for set in 0..200 {
        let n = rng.gen_range(2..=2000);
        // half the sets draw from a small grid so ties are frequent
        let levels = if set % 2 == 0 { 10 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        worst = worst.max((auc(&scores, &labels).unwrap() - brute_force_auc(&scores, &labels)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-12 && secs < 30.0,
        detail: format!("200 sets, n <= 2000, max |fast - brute force| {worst:.1e}, {secs:.1}s"),
    }
}

// ---------------------------------------------------------------------------
// 3. Planted learning
// ---------------------------------------------------------------------------

fn criterion_3() -> (Outcome, Outcome) {
    let start = Instant::now();
    let (mut full, mut gru, mut oracle) = (vec![], vec![], vec![]);
    for seed in SEEDS {
        let config = SynthConfig::default().with_seed(seed);
        let out = generate(&config).unwrap();
        let options = PrepareOptions {
            dataset: DatasetOptions {
                seed,
                ..DatasetOptions::default()
            },
            ..PrepareOptions::default()
        };
        let prep = prepare(&out.items, &out.events, &out.actions, options).unwrap();
        let labels: Vec<u8> = prep.test.iter().map(|i| i.label).collect();
        oracle.push(auc(&oracle_scores(&out.truth, &prep.test_raw).unwrap(), &labels).unwrap());
        full.push(test_auc(&prep, Variant::AttentionGru3m, seed));
        gru.push(test_auc(&prep, Variant::Gru, seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let (f, g, o) = (mean(&full), mean(&gru), mean(&oracle));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    (
        Outcome {
            pass: f >= 0.65 && f > g && secs < 900.0,
            detail: format!(
                "mean test AUC Attention-GRU-3M {f:.4} [{}] vs GRU {g:.4} [{}], {secs:.0}s",
                fmt(&full),
                fmt(&gru)
            ),
        },
        Outcome {
            pass: o > f && o > g,
            detail: format!("mean oracle AUC {o:.4} [{}] above every trained model", fmt(&oracle)),
        },
    )
}

// ---------------------------------------------------------------------------
// 4. Ablation direction
// ---------------------------------------------------------------------------

fn criterion_4() -> Vec<(String, Outcome)> {
    let sets = [
        ("time-decay-amplified", SynthConfig::time_decay_amplified(), Variant::NoMod3, 20),
        ("action-amplified", SynthConfig::action_amplified(), Variant::NoMod2, 20),
        ("cold-brand-heavy", SynthConfig::cold_brand_heavy(), Variant::NoMod1, 5),
    ];
    sets.into_iter()
        .map(|(name, base, ablation, min_brand)| {
            let start = Instant::now();
            let (mut full, mut ablated) = (vec![], vec![]);
            for seed in SEEDS {
                let prep = prepared(&base.clone().with_seed(seed), min_brand);
                full.push(test_auc(&prep, Variant::AttentionGru3m, seed));
                ablated.push(test_auc(&prep, ablation, seed));
            }
            let (f, a) = (mean(&full), mean(&ablated));
            (
                format!("4 ({name})"),
                Outcome {
                    pass: f > a,
                    detail: format!(
                        "mean AUC Attention-GRU-3M {f:.4} vs {} {a:.4}, {:.0}s",
                        ablation.name(),
                        start.elapsed().as_secs_f64()
                    ),
                },
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 5. Invariant suites
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures: Vec<String> = vec![];
    let mut check = |ok: bool, what: &str| {
        if !ok && !failures.iter().any(|f| f == what) {
            failures.push(what.to_string());
        }
    };

    // softmax normalization
    for _ in 0..500 {
        let n = rng.gen_range(1..300);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let mut out = vec![0.0; n];
        softmax_into(&v, &mut out);
        check((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "softmax sums to 1");
    }

    // attention normalization, hidden-state bound, loss nonnegativity
    for seed in 0..100u64 {
        let variant = [Variant::AttentionGru3m, Variant::AttentionGru, Variant::NoMod3][seed as usize % 3];
        let config = variant.config(7, 6, 6);
        let (mut model, table, mut inst) = random_problem(config, 10, seed).unwrap();
        inst.history[3].delta_t = 0.0;
        let fwd = model.forward(&inst, &table).unwrap();
        check(
            fwd.cache.encoder_states().all(|s| s.iter().all(|x| x.abs() < 1.0)),
            "hidden state bound |s| < 1",
        );
        // large weights saturate the cell; tanh and sigmoid then round to
        // exactly 1.0 in f64, so only the closed bound can hold
        for (_, m) in model.params.tensors_mut() {
            for v in m.as_mut_slice() {
                *v *= 8.0;
            }
        }
        let fwd = model.forward(&inst, &table).unwrap();
        let alpha = fwd.cache.attention_weights().unwrap();
        check((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "attention weights sum to 1");
        check(alpha.iter().all(|a| *a >= 0.0), "attention weights nonnegative");
        check(
            fwd.cache.encoder_states().all(|s| s.iter().all(|x| x.abs() <= 1.0)),
            "saturated hidden state bound |s| <= 1",
        );
        for label in [0u8, 1] {
            for w in [0.01, 0.5, 1.0] {
                check(instance_loss(fwd.p, label, w) >= 0.0, "loss nonnegative");
            }
        }
    }
    for p in [0.0, 1e-300, 0.5, 1.0 - 1e-16, 1.0] {
        check(instance_loss(p, 0, 1.0) >= 0.0 && instance_loss(p, 1, 1.0) >= 0.0, "loss nonnegative");
    }

    // action encoding
    check(ActionType::Click.one_hot() == [0.0, 1.0], "click encodes as [0, 1]");
    check(ActionType::Purchase.one_hot() == [1.0, 0.0], "purchase encodes as [1, 0]");
    let table = BrandTable::new(
        Vocabulary::new(vec!["a".into()]),
        &BTreeMap::from([("a".to_string(), vec![0.25; 3])]),
        3,
    )
    .unwrap();
    let step = EncodedStep {
        brand: 0,
        action: ActionType::Purchase,
        delta_t: 7.0,
    };
    check(
        brandrank::dataset::concat_step_input(&step, &table) == vec![0.25, 0.25, 0.25, 1.0, 0.0, 7.0],
        "concatenated input layout",
    );

    // feature width
    let synth = generate(&SynthConfig {
        users: 200,
        brands: 30,
        categories: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let brands: Vec<String> = (0..30).map(brandrank::synth::brand_id).collect();
    let feats = build_brand_feature_vectors(&synth.events, &synth.items, &brands, FeatureOptions::default()).unwrap();
    check(
        feats.vectors.iter().all(|v| v.values.len() == 56 && v.values.iter().all(|x| (0.0..=1.0).contains(x))),
        "feature vectors are 56-wide in [0, 1]",
    );

    // AUC invariances
    for _ in 0..200 {
        let n = rng.gen_range(2..400);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 0.5 * s.powi(3)).collect();
        check(auc(&mapped, &labels).unwrap() == base, "AUC invariant under monotone transforms");
        let swapped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        check((auc(&scores, &swapped).unwrap() - (1.0 - base)).abs() <= 1e-12, "label swap gives 1 - AUC");
    }

    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "softmax/attention normalization, |s| < 1 (<= 1 when saturated), loss >= 0, action encoding, 56-wide features, AUC invariances".into()
        } else {
            format!("violated: {}", failures.join("; "))
        },
    }
}

// ---------------------------------------------------------------------------
// 6. Determinism
// ---------------------------------------------------------------------------

fn pipeline_artifacts() -> (String, String) {
    let config = SynthConfig {
        users: 600,
        brands: 40,
        categories: 5,
        seed: 6,
        ..SynthConfig::default()
    };
    let prep = prepared(&config, 20);
    let model_config = Variant::AttentionGru3m.config(prep.table.vocab.len(), FEATURE_DIM, 12);
    let train_config = TrainConfig {
        epochs: 2,
        seed: 6,
        ..TrainConfig::default()
    };
    let out = train(&prep.train, &prep.table, model_config, train_config).unwrap();
    let scores = score_all(&out.checkpoint.model(), &prep.test, &prep.table, 1).unwrap();
    let labels: Vec<u8> = prep.test.iter().map(|i| i.label).collect();
    let report = report_from_scores("Attention-GRU-3M", &scores, &labels, 0.5, "-".into()).unwrap();
    let report_text = format!("{report:?} {:?}", scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>());
    (checkpoint_to_string(&out.checkpoint).unwrap(), report_text)
}

fn criterion_6() -> Outcome {
    let (ckpt_a, report_a) = pipeline_artifacts();
    let (ckpt_b, report_b) = pipeline_artifacts();
    Outcome {
        pass: ckpt_a == ckpt_b && report_a == report_b,
        detail: format!(
            "two runs: checkpoints {} ({} bytes), reports {}",
            if ckpt_a == ckpt_b { "identical" } else { "differ" },
            ckpt_a.len(),
            if report_a == report_b { "identical" } else { "differ" }
        ),
    }
}

// ---------------------------------------------------------------------------
// 7. Throughput
// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let prep = prepared(
        &SynthConfig {
            users: 16_000,
            seed: 7,
            ..SynthConfig::default()
        },
        20,
    );
    let data: Vec<EncodedInstance> = prep.train.iter().take(50_000).cloned().collect();
    let config: ModelConfig = Variant::AttentionGru3m.config(prep.table.vocab.len(), FEATURE_DIM, 256);
    let start = Instant::now();
    let train_config = TrainConfig {
        epochs: 1,
        threads: 1,
        ..TrainConfig::default()
    };
    train(&data, &prep.table, config, train_config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: data.len() == 50_000 && secs < 600.0,
        detail: format!(
            "one epoch, {} instances, Attention-GRU-3M hidden 256, 1 thread: {secs:.0}s",
            data.len()
        ),
    }
}

fn main() {
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: &str| only.as_deref().map_or(true, |o| id.starts_with(o));
    let mut results: Vec<(String, Outcome)> = vec![];
    let mut record = |id: &str, o: Outcome| {
        println!("criterion {id}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id.to_string(), o));
    };
    if wanted("1") {
        record("1 (gradient fidelity)", criterion_1());
    }
    if wanted("2") {
        record("2 (AUC oracle equivalence)", criterion_2());
    }
    if wanted("3") {
        let (learned, oracle) = criterion_3();
        record("3 (planted learning)", learned);
        record("3 (oracle dominance)", oracle);
    }
    if wanted("4") {
        for (id, o) in criterion_4() {
            record(&id, o);
        }
    }
    if wanted("5") {
        record("5 (invariant suites)", criterion_5());
    }
    if wanted("6") {
        record("6 (determinism)", criterion_6());
    }
    if wanted("7") {
        record("7 (throughput)", criterion_7());
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| id.as_str()).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
