//! Encoder and survival heads sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::PatientSequence;
use crate::encoder::{EncoderConfig, EncoderError, EncoderState};
use crate::numerics::{Gradients, ParamStore, Tape, Tensor, Var};
use crate::survival_head::{
    sum_scalars, subject_loss_tape, HazardPrediction, HeadConfig, HeadOutputs, HeadState, SubjectLabel, TaskWeights,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub bins: usize,
    pub num_events: usize,
    pub head_depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderState,
    pub head: HeadState,
}

impl SurvModel {
    /// Fresh weights drawn from a `ChaCha8` stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderState::init(config.encoder.clone(), &mut store, &mut rng)?;
        let head = HeadState::init(
            HeadConfig {
                n_in: config.encoder.n_out,
                bins: config.bins,
                num_events: config.num_events,
                depth: config.head_depth,
            },
            &mut store,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            encoder,
            head,
        })
    }

    pub fn record(&self, tape: &mut Tape, seq: &PatientSequence) -> Result<HeadOutputs, EncoderError> {
        record(&self.encoder, &self.head, tape, seq)
    }

    pub fn predict(&self, seq: &PatientSequence) -> Result<HazardPrediction, EncoderError> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.record(&mut tape, seq)?;
        Ok(self.head.prediction(&tape, &out))
    }

    /// Encoder output features `[1, N]` for one sequence.
    pub fn features(&self, seq: &PatientSequence) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Tape::with_params(&self.store);
        let f = self.encoder.forward(&mut tape, &seq.visits, &seq.mask())?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Attention weight matrices, indexed `[layer][head]`, each `V × V`.
    pub fn attention_weights(&self, seq: &PatientSequence) -> Result<Vec<Vec<Tensor>>, EncoderError> {
        let mut tape = Tape::with_params(&self.store);
        let (_, attn) = self.encoder.forward_traced(&mut tape, &seq.visits, &seq.mask())?;
        Ok(attn
            .into_iter()
            .map(|layer| layer.into_iter().map(|w| tape.value(w).clone()).collect())
            .collect())
    }

    /// Loss and parameter gradient for one subject.
    pub fn subject_gradient(
        &self,
        seq: &PatientSequence,
        label: &SubjectLabel,
        gammas: TaskWeights,
    ) -> Result<(f64, Gradients), EncoderError> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.record(&mut tape, seq)?;
        let loss = subject_loss_tape(&mut tape, &out, label, gammas)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads))
    }
}

/// Records the encoder and heads for one sequence on `tape`.
pub fn record(
    encoder: &EncoderState,
    head: &HeadState,
    tape: &mut Tape,
    seq: &PatientSequence,
) -> Result<HeadOutputs, EncoderError> {
    let features = encoder.forward(tape, &seq.visits, &seq.mask())?;
    Ok(head.forward(tape, features)?)
}

/// Mean of the per-subject composite losses over a batch, on one tape.
pub fn combined_loss(
    encoder: &EncoderState,
    head: &HeadState,
    tape: &mut Tape,
    batch: &[&PatientSequence],
    labels: &[SubjectLabel],
    gammas: TaskWeights,
) -> Result<Var, EncoderError> {
    assert_eq!(batch.len(), labels.len());
    let mut terms = Vec::with_capacity(batch.len());
    for (seq, label) in batch.iter().zip(labels) {
        let out = record(encoder, head, tape, seq)?;
        terms.push(subject_loss_tape(tape, &out, label, gammas)?);
    }
    let total = sum_scalars(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / batch.len().max(1) as f64))
}
