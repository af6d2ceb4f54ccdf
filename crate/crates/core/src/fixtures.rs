//! Small in-repo datasets for tests, benchmarks and demos.
//!
//! Everything here is deterministic per seed, so no real clinical data
//! is needed to exercise the pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    assemble_sequences, default_max_visits, fit_schema, parse_feature_spec, parse_long_csv_reader, Cell, FeatureColumn,
    FeatureKind, FeatureSpec, RawRow, RawTable, SurvivalDataset,
};

pub const TOY30_CSV: &str = include_str!("../fixtures/toy30.csv");
pub const TOY30_SPEC: &str = include_str!("../fixtures/toy30_spec.json");

/// Fits a schema on `table` and encodes it with the default `V`.
pub fn encode(table: &RawTable) -> SurvivalDataset {
    let schema = fit_schema(table).expect("fixture schema");
    assemble_sequences(table, &schema, default_max_visits(table)).expect("fixture sequences")
}

pub fn toy30_table() -> RawTable {
    let spec = parse_feature_spec(TOY30_SPEC).expect("fixture spec");
    parse_long_csv_reader(TOY30_CSV.as_bytes(), &spec).expect("fixture csv")
}

/// 30 patients, 1–4 visits, two numerical and two categorical features,
/// censoring plus two competing event types.
pub fn toy30() -> SurvivalDataset {
    encode(&toy30_table())
}

fn weibull_time(rng: &mut ChaCha8Rng, scale: f64, shape: f64, log_hazard: f64) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    scale * ((-u.ln()) * (-log_hazard).exp()).powf(1.0 / shape)
}

/// Marks about `rate` of the subjects censored, uniformly at random, at a
/// uniform fraction of their event time.
fn censor(rng: &mut ChaCha8Rng, time: f64, rate: f64) -> (f64, u32) {
    if rng.random_bool(rate) {
        (time * rng.random_range(0.3..1.0), 0)
    } else {
        (time, 1)
    }
}

pub fn static_toy_spec() -> FeatureSpec {
    [
        ("x".to_string(), FeatureKind::Numerical),
        ("noise".to_string(), FeatureKind::Numerical),
        ("group".to_string(), FeatureKind::Categorical),
    ]
    .into_iter()
    .collect()
}

/// One record per patient. Weibull event times (shape 3) whose log
/// hazard rises by 25 across the range of `x ∈ [0, 1]`; `noise` and
/// `group` carry no signal. About 20% of patients are censored.
pub fn static_toy_table(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|i| {
            let x: f64 = rng.random_range(0.0..1.0);
            let noise: f64 = rng.random_range(0.0..1.0);
            let group = if rng.random_bool(0.5) { "a" } else { "b" };
            let t = weibull_time(&mut rng, 10.0, 3.0, 25.0 * (x - 0.5));
            let (duration, event) = censor(&mut rng, t, 0.2);
            RawRow {
                patient_id: format!("s{i:04}"),
                visit_time: 0.0,
                duration,
                event,
                cells: vec![Cell::Num(Some(x)), Cell::Num(Some(noise)), Cell::Cat(group.into())],
            }
        })
        .collect();
    RawTable {
        features: vec![
            FeatureColumn::new("x", FeatureKind::Numerical),
            FeatureColumn::new("noise", FeatureKind::Numerical),
            FeatureColumn::new("group", FeatureKind::Categorical),
        ],
        rows,
    }
}

pub fn static_toy(n: usize, seed: u64) -> SurvivalDataset {
    encode(&static_toy_table(n, seed))
}

pub fn longitudinal_spec() -> FeatureSpec {
    [
        ("marker".to_string(), FeatureKind::Numerical),
        ("age".to_string(), FeatureKind::Numerical),
        ("sex".to_string(), FeatureKind::Categorical),
    ]
    .into_iter()
    .collect()
}

/// Repeated noisy measurements of a latent level `a` that drifts with a
/// per-patient slope `s`; risk follows `a + 2s`. A single visit is a poor
/// estimate of either, while the full sequence pins both down. Visits are
/// every half year (3–6 of them) before the event or censoring time;
/// about 20% of patients are censored.
pub fn longitudinal_table(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25).unwrap();
    let mut rows = Vec::new();
    for i in 0..n {
        let level: f64 = rng.random_range(0.3..1.3);
        let slope: f64 = rng.random_range(-0.15..0.15);
        let age: f64 = rng.random_range(40.0..80.0);
        let sex = if rng.random_bool(0.5) { "F" } else { "M" };
        let risk = level + 2.0 * slope;
        let t = 1.0 + weibull_time(&mut rng, 8.0, 2.0, 6.0 * (risk - 0.8) + 0.01 * (age - 60.0));
        let (duration, event) = censor(&mut rng, t, 0.2);
        let planned = rng.random_range(3..=6);
        for v in 0..planned {
            let visit_time = 0.5 * v as f64;
            if v > 0 && visit_time >= duration {
                break;
            }
            let marker = (level + slope * visit_time + noise.sample(&mut rng)).max(0.01);
            rows.push(RawRow {
                patient_id: format!("l{i:04}"),
                visit_time,
                duration,
                event,
                cells: vec![
                    Cell::Num(Some(marker)),
                    Cell::Num(Some(age)),
                    Cell::Cat(sex.into()),
                ],
            });
        }
    }
    RawTable {
        features: vec![
            FeatureColumn::new("marker", FeatureKind::Numerical),
            FeatureColumn::new("age", FeatureKind::Numerical),
            FeatureColumn::new("sex", FeatureKind::Categorical),
        ],
        rows,
    }
}

pub fn longitudinal(n: usize, seed: u64) -> SurvivalDataset {
    encode(&longitudinal_table(n, seed))
}

pub fn pbc2_like_spec() -> FeatureSpec {
    let num = ["age", "serBilir", "albumin", "prothrombin", "alkaline", "SGOT", "platelets"];
    let cat = ["sex", "drug", "ascites", "hepatomegaly", "spiders", "edema"];
    num.iter()
        .map(|n| (n.to_string(), FeatureKind::Numerical))
        .chain(cat.iter().map(|c| (c.to_string(), FeatureKind::Categorical)))
        .collect()
}

/// Records in the layout of the PBC2 follow-up data: yearly-ish visits,
/// death (event 1) or transplant (event 2) as competing outcomes, and
/// about 55% censoring. Values are simulated, not real.
pub fn pbc2_like_table(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: Normal<f64> = Normal::new(0.0, 0.1).unwrap();
    let num = ["age", "serBilir", "albumin", "prothrombin", "alkaline", "SGOT", "platelets"];
    let cat = ["sex", "drug", "ascites", "hepatomegaly", "spiders", "edema"];
    let features: Vec<FeatureColumn> = num
        .iter()
        .map(|n| FeatureColumn::new(*n, FeatureKind::Numerical))
        .chain(cat.iter().map(|c| FeatureColumn::new(*c, FeatureKind::Categorical)))
        .collect();
    let mut rows = Vec::new();
    for i in 0..n {
        let age: f64 = rng.random_range(30.0..75.0);
        let bili0: f64 = rng.random_range(0.3..6.0);
        let growth: f64 = rng.random_range(-0.05..0.35);
        let albumin: f64 = rng.random_range(2.5..4.5);
        let sex = if rng.random_bool(0.88) { "female" } else { "male" };
        let drug = if rng.random_bool(0.5) { "D-penicil" } else { "placebo" };
        let log_hazard = 0.6 * bili0.ln() + 3.0 * growth - 1.2 * (albumin - 3.5) + 0.03 * (age - 50.0);
        let t = 0.2 + weibull_time(&mut rng, 9.0, 1.5, log_hazard);
        let (duration, event) = if rng.random_bool(0.5) {
            (t.min(14.0) * rng.random_range(0.4..1.0), 0)
        } else if rng.random_bool(0.12) {
            (t.min(14.0), 2)
        } else {
            (t.min(14.0), 1)
        };
        let visits = rng.random_range(1..=8);
        for v in 0..visits {
            let visit_time = if v == 0 { 0.0 } else { v as f64 + rng.random_range(-0.2..0.2) };
            if v > 0 && visit_time >= duration {
                break;
            }
            let bili = bili0 * (growth * visit_time).exp() * (1.0 + jitter.sample(&mut rng)).max(0.2);
            let severe = bili > 4.0;
            let yes_no = |p: f64, rng: &mut ChaCha8Rng| if rng.random_bool(p) { "Yes" } else { "No" };
            let mut cells = vec![
                Cell::Num(Some(age + visit_time)),
                Cell::Num(Some(bili)),
                Cell::Num(Some((albumin - 0.05 * visit_time).max(1.5))),
                Cell::Num(Some(10.0 + 0.3 * bili + jitter.sample(&mut rng).abs())),
                Cell::Num(Some(rng.random_range(300.0..3000.0))),
                Cell::Num(Some(rng.random_range(40.0..250.0))),
                Cell::Num(Some(rng.random_range(80.0..450.0))),
            ];
            if v == 1 && i % 17 == 0 {
                cells[6] = Cell::Num(None);
            }
            cells.push(Cell::Cat(sex.into()));
            cells.push(Cell::Cat(drug.into()));
            cells.push(Cell::Cat(yes_no(if severe { 0.3 } else { 0.05 }, &mut rng).into()));
            cells.push(Cell::Cat(yes_no(if severe { 0.7 } else { 0.4 }, &mut rng).into()));
            cells.push(Cell::Cat(yes_no(if severe { 0.5 } else { 0.2 }, &mut rng).into()));
            let edema = match rng.random_range(0..10) {
                0 => "edema despite diuretics",
                1 | 2 => "edema no diuretics",
                _ => "No edema",
            };
            cells.push(Cell::Cat(edema.into()));
            rows.push(RawRow {
                patient_id: format!("{}", i + 1),
                visit_time,
                duration,
                event,
                cells,
            });
        }
    }
    RawTable { features, rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy30_is_well_formed() {
        let d = toy30();
        assert_eq!(d.len(), 30);
        assert_eq!(d.num_events, 2);
        d.check_invariants().unwrap();
    }

    #[test]
    fn static_toy_censoring_rate() {
        let d = static_toy(500, 0);
        assert_eq!(d.max_visits, 1);
        let censored = d.events().iter().filter(|&&e| e == 0).count() as f64 / 500.0;
        assert!((0.15..0.25).contains(&censored), "{censored}");
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(longitudinal_table(50, 3).rows, longitudinal_table(50, 3).rows);
        let a = pbc2_like_table(40, 1);
        a.validate().unwrap();
        assert_eq!(a.rows, pbc2_like_table(40, 1).rows);
        let d = encode(&a);
        d.check_invariants().unwrap();
        assert!(d.max_visits > 1);
    }
}
