//! Acceptance criteria, one PASS/FAIL/SKIP line each.
//!
//! Criterion 7 needs the real PBC2 follow-up table: set `SURVSEQ_PBC2_CSV`
//! to the long CSV and `SURVSEQ_PBC2_SPEC` to its feature spec.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survseq::dataset::{
    assemble_sequences, default_max_visits, fit_schema, load_feature_spec, parse_long_csv, SurvivalDataset,
};
use survseq::encoder::EncoderError;
use survseq::fixtures;
use survseq::metrics::{brier, c_td};
use survseq::model::{combined_loss, SurvModel};
use survseq::numerics::finite_difference_check;
use survseq::survival_head::{SubjectLabel, TaskWeights};
use survseq::synth::{optimism, optimism_from_curves, GeneratorConfig};
use survseq::timegrid::{CensoringDistribution, StepFunction};
use survseq::trainer::{cross_validate, train, Augmentation, CvOptions, CvReport, TrainConfig, TrainedModel};

use common::{
    brute_brier, brute_c_td, check_attention, check_prediction, model_config, perturb, random_instance, random_sequence,
};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed.as_secs_f64() < limit_s as f64
}

/// Settings shared by the training-based criteria.
fn cv_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 60,
        patience: 8,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn c1_metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_c, mut worst_b, mut compared) = (0.0f64, 0.0f64, 0);
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let (risk, t, e) = random_instance(&mut rng, n, 0.3, 2);
        let tau = rng.random_range(1.0..10.0);
        let g = CensoringDistribution::fit(&t, &e);
        let w: Vec<f64> = t.iter().map(|&ti| g.raw_weight(ti)).collect();
        for k in 1..=2 {
            for weights in [None, Some(w.as_slice())] {
                let fast = c_td(&risk, &t, &e, tau, k, weights).ok();
                match (fast, brute_c_td(&risk, &t, &e, tau, k, weights)) {
                    (Some(f), Some((b, pairs))) if f.n_pairs == pairs => {
                        worst_c = worst_c.max((f.value - b).abs());
                        compared += 1;
                    }
                    (None, None) => {}
                    _ => return Outcome::Fail("c_td and the pair oracle disagree on comparability".into()),
                }
            }
            match (brier(&risk, &t, &e, tau, k).ok(), brute_brier(&risk, &t, &e, tau, k)) {
                (Some(f), Some(b)) => worst_b = worst_b.max((f - b).abs()),
                (None, None) => {}
                _ => return Outcome::Fail("brier and direct summation disagree on scoreability".into()),
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst_c <= 1e-12 && worst_b <= 1e-12 && within(elapsed, 10),
        format!("{compared} c_td comparisons, max |diff| c_td {worst_c:.1e}, brier {worst_b:.1e}, {elapsed:.1?}"),
    )
}

fn c2_gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut config = model_config(3, 3, 4, 1, 2);
        config.bins = 3;
        config.num_events = 2;
        let mut m = SurvModel::init(config, seed).unwrap();
        // zero biases sit on ReLU kinks, where the loss is not differentiable
        perturb(&mut m, seed + 100, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<_> = (1..=3).map(|n| random_sequence(&mut rng, 3, 3, n)).collect();
        let labels = [
            SubjectLabel { bin: 0, event: 1, weight: 1.3, duration_normalized: 0.2 },
            SubjectLabel { bin: 2, event: 0, weight: 1.0, duration_normalized: 0.9 },
            SubjectLabel { bin: 1, event: 2, weight: 0.7, duration_normalized: 0.5 },
        ];
        let gammas = TaskWeights { mortality: 0.6, length_of_stay: 0.3 };
        let (encoder, head) = (m.encoder.clone(), m.head.clone());
        let err = finite_difference_check(
            &mut m.store,
            |tape| {
                let refs: Vec<_> = seqs.iter().collect();
                combined_loss(&encoder, &head, tape, &refs, &labels, gammas).map_err(|e| match e {
                    EncoderError::Numerics(n) => n,
                    other => panic!("{other}"),
                })
            },
            1e-4,
        )
        .unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && within(elapsed, 30),
        format!("max relative error {worst:.2e} over 5 seeds, {elapsed:.1?}"),
    )
}

fn c3_padding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let model = SurvModel::init(model_config(3, 6, 8, 2, 2), i).unwrap();
        let n_real = rng.random_range(1..6);
        let seq = random_sequence(&mut rng, 6, 3, n_real);
        let mut noisy = seq.clone();
        for x in &mut noisy.visits.data_mut()[n_real * 3..] {
            *x = rng.random_range(-100.0..100.0);
        }
        let (a, b) = (model.predict(&seq).unwrap(), model.predict(&noisy).unwrap());
        for (x, y) in a.survival.iter().flatten().zip(b.survival.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(worst < 1e-9, format!("100 sequences, max prediction change {worst:.1e}"))
}

fn check_model_on(model: &SurvModel, data: &SurvivalDataset) -> Result<usize, String> {
    for s in &data.sequences {
        check_prediction(&model.predict(s).map_err(|e| e.to_string())?)?;
        check_attention(&model.attention_weights(s).map_err(|e| e.to_string())?)?;
    }
    Ok(data.len())
}

fn c4_structure(trained: &[&TrainedModel], datasets: &[&SurvivalDataset]) -> Outcome {
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..50u64 {
        let mut model = SurvModel::init(model_config(4, 5, 8, [1, 2, 4][i as usize % 3], 2), i).unwrap();
        perturb(&mut model, i, 2.0);
        let n_real = rng.random_range(1..=5);
        let seq = random_sequence(&mut rng, 5, 4, n_real);
        let r = check_prediction(&model.predict(&seq).unwrap())
            .and_then(|_| check_attention(&model.attention_weights(&seq).unwrap()));
        if let Err(e) = r {
            return Outcome::Fail(format!("random model {i}: {e}"));
        }
        checked += 1;
    }
    for (m, d) in trained.iter().zip(datasets) {
        match check_model_on(&m.model, d) {
            Ok(n) => checked += n,
            Err(e) => return Outcome::Fail(e),
        }
    }
    Outcome::Pass(format!("{checked} predictions and their attention maps"))
}

fn c5_toy_recovery() -> Outcome {
    let start = Instant::now();
    let data = fixtures::static_toy(500, 11);
    let report = match cross_validate(&cv_config(), &data, &CvOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let c = report.aggregate_row(1, 0.5).map_or(f64::NAN, |r| r.c_td_mean);
    let elapsed = start.elapsed();
    verdict(
        c >= 0.90 && within(elapsed, 180),
        format!("5-fold mean C_td at the median horizon {c:.4} (need >= 0.90), {elapsed:.1?}"),
    )
}

fn c_td_means(report: &CvReport) -> Vec<f64> {
    [0.25, 0.5, 0.75]
        .iter()
        .map(|&q| report.aggregate_row(1, q).map_or(f64::NAN, |r| r.c_td_mean))
        .collect()
}

fn fmt(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("/")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn c6_time_varying(data: &SurvivalDataset, full: &CvReport, elapsed_full: Duration) -> Outcome {
    let start = Instant::now();
    let last = match cross_validate(&cv_config(), &data.last_visit_only(), &CvOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let elapsed = elapsed_full + start.elapsed();
    let (a, b) = (c_td_means(full), c_td_means(&last));
    let gains: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let ok = gains.iter().all(|&g| g > 0.0) && mean(&gains) >= 0.02 && within(elapsed, 900);
    verdict(
        ok,
        format!(
            "C_td sequence {} vs last visit {} at q=0.25/0.50/0.75, mean gain {:.4} (need >= 0.02, all > 0), {elapsed:.1?}",
            fmt(&a),
            fmt(&b),
            mean(&gains)
        ),
    )
}

fn c7_pbc2() -> Outcome {
    let (Ok(csv), Ok(spec)) = (std::env::var("SURVSEQ_PBC2_CSV"), std::env::var("SURVSEQ_PBC2_SPEC")) else {
        return Outcome::Skip("set SURVSEQ_PBC2_CSV and SURVSEQ_PBC2_SPEC to the PBC2 long CSV and its spec".into());
    };
    let load = || -> Result<SurvivalDataset, String> {
        let spec = load_feature_spec(Path::new(&spec)).map_err(|e| e.to_string())?;
        let table = parse_long_csv(Path::new(&csv), &spec).map_err(|e| e.to_string())?;
        let schema = fit_schema(&table).map_err(|e| e.to_string())?;
        assemble_sequences(&table, &schema, default_max_visits(&table)).map_err(|e| e.to_string())
    };
    let data = match load() {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(e),
    };
    let report = match cross_validate(&cv_config(), &data, &CvOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let row = report.aggregate_row(1, 0.25);
    let c = row.map_or(f64::NAN, |r| r.c_td_mean);
    let b = row.map_or(f64::NAN, |r| r.brier_mean);
    verdict(
        c >= 0.65 && b <= 0.12,
        format!("C_td {c:.4} (need >= 0.65), Brier {b:.4} (need <= 0.12) at q=0.25"),
    )
}

fn c8_augmentation(data: &SurvivalDataset, base: &CvReport) -> Outcome {
    let generator = GeneratorConfig {
        fraction: 0.5,
        ..GeneratorConfig::for_dataset(data, 3)
    };
    let opts = CvOptions {
        augmentation: Some(Augmentation::Generator(generator)),
        ..CvOptions::default()
    };
    let aug = match cross_validate(&cv_config(), data, &opts) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let (a, b) = (c_td_means(&aug), c_td_means(base));
    verdict(
        mean(&a) >= mean(&b) - 0.01,
        format!(
            "mean C_td augmented {:.4} ({}) vs baseline {:.4} ({}), tolerance 0.01",
            mean(&a),
            fmt(&a),
            mean(&b),
            fmt(&b)
        ),
    )
}

fn c9_optimism() -> Outcome {
    let datasets = [fixtures::toy30(), fixtures::static_toy(80, 2), fixtures::longitudinal(50, 3)];
    for d in &datasets {
        for t in [0.5, 3.0, 100.0] {
            let v = optimism(d, d, t).unwrap().value;
            if v != 0.0 {
                return Outcome::Fail(format!("self-comparison gave {v}"));
            }
        }
    }
    let one = StepFunction::constant_one();
    let zero = StepFunction {
        times: vec![0.0],
        values: vec![0.0],
    };
    let mut worst = 0.0f64;
    for t in [0.1, 1.0, 2.5, 8.0, 37.0] {
        worst = worst.max((optimism_from_curves(&one, &zero, t, t) - t / 2.0).abs());
    }
    verdict(worst <= 1e-12, format!("self-comparison exactly 0; max |optimism - T/2| {worst:.1e}"))
}

fn c10_determinism() -> (Outcome, Option<TrainedModel>) {
    let data = fixtures::toy30();
    let config = TrainConfig {
        bins: 8,
        max_epochs: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let (tr, va) = survseq::trainer::early_stopping_split(&data, 0.2, 9);
    let a = train(&config, &tr, &va).unwrap();
    let b = train(&config, &tr, &va).unwrap();
    if a.to_bytes() != b.to_bytes() {
        return (Outcome::Fail("same seed gave different checkpoints".into()), None);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ssq");
    a.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    for s in &data.sequences {
        if a.predict(s).unwrap() != back.predict(s).unwrap() {
            return (Outcome::Fail(format!("prediction for {} changed after reload", s.patient_id)), None);
        }
    }
    let dpath = dir.path().join("data.ssq");
    data.save(&dpath).unwrap();
    let reread = SurvivalDataset::load(&dpath).unwrap();
    if reread != data || reread.sequences.iter().zip(&data.sequences).any(|(x, y)| x.visits.data() != y.visits.data()) {
        return (Outcome::Fail("dataset container round trip changed the matrices".into()), None);
    }
    (
        Outcome::Pass("bit-identical checkpoints, identical predictions after reload, exact dataset round trip".into()),
        Some(a),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::Fail(format!("panicked: {msg}"))
    });
    let (tag, detail, ok) = match outcome {
        Outcome::Pass(d) => ("PASS", d, true),
        Outcome::Fail(d) => ("FAIL", d, false),
        Outcome::Skip(d) => ("SKIP", d, true),
    };
    println!("[{tag}] {name}: {detail}");
    ok
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| id.contains(f.as_str()));
    let mut all_ok = true;

    if wanted("c1") {
        all_ok &= run("c1 metric oracle equivalence", c1_metric_oracle);
    }
    if wanted("c2") {
        all_ok &= run("c2 gradient integrity", c2_gradient_integrity);
    }
    if wanted("c3") {
        all_ok &= run("c3 padding independence", c3_padding);
    }
    let mut toy_model = None;
    if wanted("c10") || wanted("c4") {
        let (outcome, model) = c10_determinism();
        toy_model = model;
        if wanted("c10") {
            all_ok &= run("c10 determinism and persistence", || outcome);
        }
    }
    if wanted("c4") {
        let toy = fixtures::toy30();
        let long = fixtures::longitudinal(120, 8);
        let long_model = train(&TrainConfig { max_epochs: 15, seed: 2, ..TrainConfig::default() }, &long, &long.subset(&[]));
        all_ok &= run("c4 structural invariants", || match (&toy_model, &long_model) {
            (Some(a), Ok(b)) => c4_structure(&[a, b], &[&toy, &long]),
            (None, _) => Outcome::Fail("no trained toy model".into()),
            (_, Err(e)) => Outcome::Fail(e.to_string()),
        });
    }
    if wanted("c5") {
        all_ok &= run("c5 toy recovery", c5_toy_recovery);
    }
    if wanted("c6") || wanted("c8") {
        let data = fixtures::longitudinal(400, 5);
        let start = Instant::now();
        let full = cross_validate(&cv_config(), &data, &CvOptions::default());
        let elapsed = start.elapsed();
        if wanted("c6") {
            all_ok &= run("c6 time-varying advantage", || match &full {
                Ok(r) => c6_time_varying(&data, r, elapsed),
                Err(e) => Outcome::Fail(e.to_string()),
            });
        }
        if wanted("c8") {
            all_ok &= run("c8 augmentation non-degradation", || match &full {
                Ok(r) => c8_augmentation(&data, r),
                Err(e) => Outcome::Fail(e.to_string()),
            });
        }
    }
    if wanted("c7") {
        all_ok &= run("c7 PBC2 band", c7_pbc2);
    }
    if wanted("c9") {
        all_ok &= run("c9 optimism", c9_optimism);
    }

    if !all_ok {
        std::process::exit(1);
    }
}
