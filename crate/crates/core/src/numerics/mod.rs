//! Dense tensors with recorded reverse-mode gradients.
//!
//! This is the substrate for the encoder, the survival heads and the
//! trainer. Everything is `f64`; a [`Tape`] lives for one forward/backward
//! pass on one thread.

mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{log_sigmoid, sigmoid, softmax_in_place, Tape, Var};
pub use tensor::Tensor;

/// Variance floor inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Additive score applied to masked attention keys before the softmax.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("every position is masked")]
    AllMasked,
}

/// Gradients smaller than this are compared in absolute rather than
/// relative terms by [`finite_difference_check`].
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Compares recorded gradients against the fourth-order central difference
/// `(−f(w+2h) + 8f(w+h) − 8f(w−h) + f(w−2h)) / 12h`, one coordinate at a time.
///
/// `build` records the loss on a fresh tape and must be deterministic.
/// Returns the largest relative error over all coordinates, with denominator
/// `max(|analytic|, |numeric|, FD_ABS_FLOOR)`. Parameter values are restored.
pub fn finite_difference_check<F>(store: &mut ParamStore, build: F, h: f64) -> Result<f64, NumericsError>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var, NumericsError>,
{
    assert!(h > 0.0, "step must be positive");
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut tape = Tape::with_params(store);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        for i in 0..store.value(id).len() {
            let original = store.value(id).data()[i];
            let mut at = |offset: f64| -> Result<f64, NumericsError> {
                store.value_mut(id).data_mut()[i] = original + offset;
                eval(store)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let exact = analytic.get(id).data()[i];
            let denom = exact.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
