#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survseq::dataset::PatientSequence;
use survseq::encoder::EncoderConfig;
use survseq::model::{ModelConfig, SurvModel};
use survseq::numerics::Tensor;
use survseq::survival_head::HazardPrediction;

/// Exhaustive pair enumeration for time-dependent concordance.
pub fn brute_c_td(risk: &[f64], t: &[f64], e: &[u32], tau: f64, k: u32, w: Option<&[f64]>) -> Option<(f64, usize)> {
    let (mut num, mut den, mut pairs) = (0.0, 0.0, 0);
    for i in 0..risk.len() {
        if e[i] != k || t[i] > tau {
            continue;
        }
        let wi = w.map_or(1.0, |w| w[i] * w[i]);
        for j in 0..risk.len() {
            if t[i] < t[j] {
                pairs += 1;
                den += wi;
                if risk[i] > risk[j] {
                    num += wi;
                } else if risk[i] == risk[j] {
                    num += 0.5 * wi;
                }
            }
        }
    }
    (pairs > 0 && den > 0.0).then(|| (num / den, pairs))
}

/// Direct Brier sum over subjects whose status at τ is known.
pub fn brute_brier(surv: &[f64], t: &[f64], e: &[u32], tau: f64, k: u32) -> Option<f64> {
    let scored: Vec<f64> = (0..surv.len())
        .filter_map(|i| {
            let o = if t[i] > tau {
                0.0
            } else if e[i] == k {
                1.0
            } else {
                return None;
            };
            Some((1.0 - surv[i] - o).powi(2))
        })
        .collect();
    (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
}

/// `n` subjects with rounded times (so ties occur), about `censoring` of
/// them censored and the rest split over `events` causes.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, censoring: f64, events: u32) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let risk = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 50.0).round() / 50.0).collect();
    let t = (0..n).map(|_| (rng.random_range(0.0..10.0f64) * 10.0).round() / 10.0).collect();
    let e = (0..n)
        .map(|_| if rng.random_bool(censoring) { 0 } else { rng.random_range(1..=events) })
        .collect();
    (risk, t, e)
}

pub fn model_config(width: usize, max_visits: usize, d_model: usize, n_heads: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_width: width,
            max_visits,
            d_model,
            n_layers,
            n_heads,
            d_ff: 2 * d_model,
            n_out: 5,
        },
        bins: 6,
        num_events: 2,
        head_depth: 2,
    }
}

/// Moves every weight by `U(−spread, spread)` so no ReLU sits on its kink
/// and biases are not all zero.
pub fn perturb(model: &mut SurvModel, seed: u64, spread: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store.iter_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|w| *w += rng.random_range(-spread..spread));
    }
}

/// A padded sequence with `n_real` random visits in `[0, 1]`.
pub fn random_sequence(rng: &mut ChaCha8Rng, max_visits: usize, width: usize, n_real: usize) -> PatientSequence {
    let mut data = vec![0.0; max_visits * width];
    for x in &mut data[..n_real * width] {
        *x = rng.random_range(0.0..1.0);
    }
    PatientSequence {
        patient_id: "p".into(),
        visits: Tensor::matrix(max_visits, width, data).unwrap(),
        visit_times: (0..n_real).map(|v| v as f64).collect(),
        n_real,
        duration: 5.0,
        event: 1,
    }
}

/// Survival starts at 1, never increases, stays in `[0, 1]`, and
/// `Σ pmf + S_end = 1`.
pub fn check_prediction(pred: &HazardPrediction) -> Result<(), String> {
    for (k, s) in pred.survival.iter().enumerate() {
        if s[0] != 1.0 {
            return Err(format!("event {k}: S(0) = {}", s[0]));
        }
        if let Some(w) = s.windows(2).find(|w| w[1] > w[0]) {
            return Err(format!("event {k}: survival rises {} -> {}", w[0], w[1]));
        }
        if s.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(format!("event {k}: survival outside [0, 1]"));
        }
        let total: f64 = pred.pmf[k].iter().sum::<f64>() + s[s.len() - 1];
        if (total - 1.0).abs() > 1e-10 {
            return Err(format!("event {k}: pmf + tail = {total}"));
        }
    }
    Ok(())
}

pub fn check_attention(weights: &[Vec<Tensor>]) -> Result<(), String> {
    for (l, layer) in weights.iter().enumerate() {
        for (h, w) in layer.iter().enumerate() {
            let (rows, _) = w.dims2();
            for r in 0..rows {
                let sum: f64 = w.row_slice(r).iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(format!("layer {l} head {h} row {r} sums to {sum}"));
                }
            }
        }
    }
    Ok(())
}
