//! Discrete-time hazard heads and the composite training loss.
//!
//! Each event type gets its own MLP from the encoder features to `B`
//! hazard logits; `λ = σ(logit)` is the conditional probability of the
//! event in a bin given survival to its start. Two task heads (mortality,
//! length of stay) share the same features.

use rand::Rng;

use crate::encoder::{bias, uniform_weight};
use crate::numerics::{log_sigmoid, sigmoid, NumericsError, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub n_in: usize,
    pub bins: usize,
    pub num_events: usize,
    /// 1 = linear map, 2 = one hidden ReLU layer of width `n_in`.
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, n_in: usize, n_out: usize, depth: usize) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut width = n_in;
        for l in 0..depth {
            let out = if l + 1 == depth { n_out } else { n_in };
            let w = store.add(format!("{name}.layer{l}.weight"), uniform_weight(rng, width, out));
            let b = store.add(format!("{name}.layer{l}.bias"), bias(out));
            layers.push((w, b));
            width = out;
        }
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            let wv = tape.param(w);
            let bv = tape.param(b);
            h = tape.matmul(h, wv)?;
            h = tape.add_row(h, bv)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadState {
    pub config: HeadConfig,
    pub event_mlps: Vec<Mlp>,
    pub mortality: Mlp,
    pub length_of_stay: Mlp,
}

/// Raw head outputs recorded on a tape.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// One `[1, B]` logit row per event type.
    pub hazard_logits: Vec<Var>,
    pub mortality_logit: Var,
    pub length_of_stay: Var,
}

impl HeadState {
    pub fn init<R: Rng>(config: HeadConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (n, b, depth) = (config.n_in, config.bins, config.depth.max(1));
        let event_mlps = (1..=config.num_events)
            .map(|k| Mlp::init(store, rng, &format!("head.event{k}"), n, b, depth))
            .collect();
        let mortality = Mlp::init(store, rng, "head.mortality", n, 1, depth);
        let length_of_stay = Mlp::init(store, rng, "head.length_of_stay", n, 1, depth);
        Self {
            config,
            event_mlps,
            mortality,
            length_of_stay,
        }
    }

    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<HeadOutputs, NumericsError> {
        let hazard_logits = self
            .event_mlps
            .iter()
            .map(|m| m.forward(tape, features))
            .collect::<Result<_, _>>()?;
        Ok(HeadOutputs {
            hazard_logits,
            mortality_logit: self.mortality.forward(tape, features)?,
            length_of_stay: self.length_of_stay.forward(tape, features)?,
        })
    }

    /// Hazards, survival and PMF from recorded outputs.
    pub fn prediction(&self, tape: &Tape, out: &HeadOutputs) -> HazardPrediction {
        let hazards = out
            .hazard_logits
            .iter()
            .map(|&z| tape.value(z).data().iter().map(|&x| sigmoid(x)).collect())
            .collect();
        HazardPrediction::from_hazards(hazards)
    }
}

/// Per-event discrete hazards with the derived survival and PMF.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardPrediction {
    /// `K × B`, each in `(0, 1)`.
    pub hazards: Vec<Vec<f64>>,
    /// `K × (B+1)`; `S[k][0] = 1`, `S[k][b+1] = S[k][b]·(1 − λ[k][b])`.
    pub survival: Vec<Vec<f64>>,
    /// `K × B`; `pmf[k][b] = S[k][b]·λ[k][b]`.
    pub pmf: Vec<Vec<f64>>,
}

impl HazardPrediction {
    pub fn from_hazards(hazards: Vec<Vec<f64>>) -> Self {
        let mut survival = Vec::with_capacity(hazards.len());
        let mut pmf = Vec::with_capacity(hazards.len());
        for h in &hazards {
            let mut s = Vec::with_capacity(h.len() + 1);
            let mut p = Vec::with_capacity(h.len());
            let mut cur = 1.0;
            s.push(cur);
            for &l in h {
                p.push(cur * l);
                cur *= 1.0 - l;
                s.push(cur);
            }
            survival.push(s);
            pmf.push(p);
        }
        Self { hazards, survival, pmf }
    }

    pub fn from_logits(logits: &[Vec<f64>]) -> Self {
        Self::from_hazards(logits.iter().map(|z| z.iter().map(|&x| sigmoid(x)).collect()).collect())
    }

    pub fn num_events(&self) -> usize {
        self.hazards.len()
    }

    pub fn n_bins(&self) -> usize {
        self.hazards.first().map_or(0, Vec::len)
    }
}

/// Training target for one subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectLabel {
    /// Bin holding the subject's event or censoring time.
    pub bin: usize,
    /// 0 = censored, otherwise the event type (1-based).
    pub event: u32,
    /// IPCW weight; ignored for censored subjects.
    pub weight: f64,
    /// Duration scaled to `[0, 1]` by the training maximum.
    pub duration_normalized: f64,
}

/// Loss coefficients for one event type: `(Σ a_b ln λ_b, Σ c_b ln(1−λ_b))`
/// enter the loss with weight −1 each.
fn pch_coefficients(k: usize, label: &SubjectLabel, bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pos = vec![0.0; bins];
    let mut neg = vec![0.0; bins];
    let b = label.bin;
    if label.event == 0 {
        neg[..=b].iter_mut().for_each(|c| *c = 1.0);
    } else if label.event as usize == k + 1 {
        pos[b] = label.weight;
        neg[..b].iter_mut().for_each(|c| *c = label.weight);
    } else {
        // a competing event censors this cause at its own time
        neg[..=b].iter_mut().for_each(|c| *c = label.weight);
    }
    (pos, neg)
}

/// Discrete-hazard negative log-likelihood for one subject, cause-specific
/// over `K` events. Event subjects carry `weight`; censored ones weight 1.
pub fn pch_loss(pred: &HazardPrediction, label: &SubjectLabel) -> f64 {
    let bins = pred.n_bins();
    assert!(label.bin < bins, "bin out of range");
    let mut loss = 0.0;
    for (k, h) in pred.hazards.iter().enumerate() {
        let (pos, neg) = pch_coefficients(k, label, bins);
        for b in 0..bins {
            if pos[b] != 0.0 {
                loss -= pos[b] * h[b].ln();
            }
            if neg[b] != 0.0 {
                loss -= neg[b] * (1.0 - h[b]).ln();
            }
        }
    }
    loss
}

/// Same loss recorded on a tape from the hazard logits.
pub fn pch_loss_tape(tape: &mut Tape, out: &HeadOutputs, label: &SubjectLabel) -> Result<Var, NumericsError> {
    let bins = tape.value(out.hazard_logits[0]).len();
    assert!(label.bin < bins, "bin out of range");
    let mut terms = Vec::new();
    for (k, &z) in out.hazard_logits.iter().enumerate() {
        let (pos, neg) = pch_coefficients(k, label, bins);
        if pos.iter().any(|&c| c != 0.0) {
            let lp = tape.log_sigmoid(z);
            let c: Vec<f64> = pos.iter().map(|c| -c).collect();
            terms.push(tape.weighted_sum(lp, &c)?);
        }
        if neg.iter().any(|&c| c != 0.0) {
            let nz = tape.scale(z, -1.0);
            let ln = tape.log_sigmoid(nz);
            let c: Vec<f64> = neg.iter().map(|c| -c).collect();
            terms.push(tape.weighted_sum(ln, &c)?);
        }
    }
    sum_scalars(tape, &terms)
}

/// Binary cross-entropy of `σ(logit)` against `indicator`.
pub fn mortality_loss(logit: f64, indicator: bool) -> f64 {
    if indicator {
        -log_sigmoid(logit)
    } else {
        -log_sigmoid(-logit)
    }
}

pub fn mortality_loss_tape(tape: &mut Tape, logit: Var, indicator: bool) -> Var {
    let z = if indicator { logit } else { tape.scale(logit, -1.0) };
    let l = tape.log_sigmoid(z);
    let s = tape.sum(l);
    tape.scale(s, -1.0)
}

pub fn length_of_stay_loss(pred: f64, target: f64) -> f64 {
    (pred - target).powi(2)
}

pub fn length_of_stay_loss_tape(tape: &mut Tape, pred: Var, target: f64) -> Result<Var, NumericsError> {
    let t = tape.constant(crate::numerics::Tensor::full(tape.value(pred).shape(), -target));
    let d = tape.add(pred, t)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Weights of the two auxiliary task losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskWeights {
    pub mortality: f64,
    pub length_of_stay: f64,
}

impl TaskWeights {
    pub const INITIAL: TaskWeights = TaskWeights {
        mortality: 1.0,
        length_of_stay: 1.0,
    };
}

/// `pch + γ₁·mortality + γ₂·length_of_stay` for one subject.
pub fn subject_loss_tape(
    tape: &mut Tape,
    out: &HeadOutputs,
    label: &SubjectLabel,
    gammas: TaskWeights,
) -> Result<Var, NumericsError> {
    let mut terms = vec![pch_loss_tape(tape, out, label)?];
    if gammas.mortality != 0.0 {
        let mp = mortality_loss_tape(tape, out.mortality_logit, label.event > 0);
        terms.push(tape.scale(mp, gammas.mortality));
    }
    if gammas.length_of_stay != 0.0 {
        let ls = length_of_stay_loss_tape(tape, out.length_of_stay, label.duration_normalized)?;
        terms.push(tape.scale(ls, gammas.length_of_stay));
    }
    sum_scalars(tape, &terms)
}

pub(crate) fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var, NumericsError> {
    match terms {
        [] => Ok(tape.constant(crate::numerics::Tensor::scalar(0.0))),
        [first, rest @ ..] => rest.iter().try_fold(*first, |acc, &t| tape.add(acc, t)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    const LN2: f64 = std::f64::consts::LN_2;

    fn label(bin: usize, event: u32, weight: f64) -> SubjectLabel {
        SubjectLabel {
            bin,
            event,
            weight,
            duration_normalized: 0.5,
        }
    }

    #[test]
    fn zero_logits_halve_survival() {
        let p = HazardPrediction::from_logits(&[vec![0.0; 4]]);
        assert_eq!(p.hazards[0], vec![0.5; 4]);
        assert_eq!(p.survival[0], vec![1.0, 0.5, 0.25, 0.125, 0.0625]);
        let total: f64 = p.pmf[0].iter().sum::<f64>() + p.survival[0][4];
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn very_negative_logits_keep_everyone_alive() {
        let p = HazardPrediction::from_logits(&[vec![-50.0; 5], vec![0.3; 5]]);
        assert!(p.survival[0].iter().all(|&s| s > 1.0 - 1e-15));
        assert_eq!(p.num_events(), 2);
        assert_ne!(p.survival[0], p.survival[1]);
    }

    #[test]
    fn pch_single_terms() {
        let p = HazardPrediction::from_hazards(vec![vec![0.5]]);
        assert!((pch_loss(&p, &label(0, 1, 1.0)) - LN2).abs() < 1e-15);
        assert!((pch_loss(&p, &label(0, 0, 1.0)) - LN2).abs() < 1e-15);
        assert_eq!(pch_loss(&p, &label(0, 1, 0.0)), 0.0);
    }

    #[test]
    fn pch_censored_ignores_weight_and_competing_events_censor() {
        let p = HazardPrediction::from_hazards(vec![vec![0.2, 0.4], vec![0.1, 0.3]]);
        let censored = pch_loss(&p, &label(1, 0, 7.0));
        let expect = -(0.8f64.ln() + 0.6f64.ln() + 0.9f64.ln() + 0.7f64.ln());
        assert!((censored - expect).abs() < 1e-14);
        // event 2 in bin 1 with weight 2
        let ev2 = pch_loss(&p, &label(1, 2, 2.0));
        let expect = -2.0 * (0.3f64.ln() + 0.9f64.ln()) - 2.0 * (0.8f64.ln() + 0.6f64.ln());
        assert!((ev2 - expect).abs() < 1e-14);
    }

    #[test]
    fn tape_pch_matches_value_route() {
        let logits = vec![vec![0.3, -1.2, 2.0], vec![-0.5, 0.1, 0.9]];
        let pred = HazardPrediction::from_logits(&logits);
        let mut tape = Tape::new();
        let out = HeadOutputs {
            hazard_logits: logits.iter().map(|z| tape.constant(Tensor::row(z.clone()))).collect(),
            mortality_logit: tape.constant(Tensor::row(vec![0.0])),
            length_of_stay: tape.constant(Tensor::row(vec![0.0])),
        };
        for l in [label(0, 1, 1.3), label(2, 2, 0.7), label(1, 0, 4.0), label(2, 0, 1.0)] {
            let v = pch_loss_tape(&mut tape, &out, &l).unwrap();
            assert!((tape.value(v).item() - pch_loss(&pred, &l)).abs() < 1e-13);
        }
    }

    #[test]
    fn mortality_examples() {
        assert!((mortality_loss(0.0, true) - LN2).abs() < 1e-15);
        assert!(mortality_loss(50.0, true) < 1e-20);
        assert!((mortality_loss(50.0, false) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn length_of_stay_examples() {
        assert_eq!(length_of_stay_loss(0.3, 0.3), 0.0);
        assert_eq!(length_of_stay_loss(0.0, 1.0), 1.0);
        assert_eq!(length_of_stay_loss(0.5, 0.25), 0.0625);
    }
}
