//! Temporal attention encoder over a patient's visit sequence.
//!
//! Visits are embedded affinely, offset by a fixed sinusoidal position
//! table, passed through post-norm transformer layers whose attention
//! ignores padded keys, averaged over the real visits only, and projected
//! (with ReLU) to an `N`-dimensional feature vector.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var, MASK_FILL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("model dimension {0} must be even for sinusoidal positions")]
    OddModelDim(usize),
    #[error("model dimension {d_model} is not divisible by {n_heads} heads")]
    HeadsDontDivide { d_model: usize, n_heads: usize },
    #[error("every visit is masked")]
    AllMasked,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl EncoderError {
    fn from_numerics(e: NumericsError) -> Self {
        match e {
            NumericsError::AllMasked => EncoderError::AllMasked,
            other => EncoderError::Numerics(other),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_width: usize,
    pub max_visits: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_out: usize,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if !self.d_model.is_multiple_of(2) {
            return Err(EncoderError::OddModelDim(self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::HeadsDontDivide {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }
}

/// `P[pos, 2i] = sin(pos / 10000^(2i/d))`, `P[pos, 2i+1] = cos(…)`.
pub fn positional_encoding(max_visits: usize, d_model: usize) -> Result<Tensor, EncoderError> {
    if !d_model.is_multiple_of(2) {
        return Err(EncoderError::OddModelDim(d_model));
    }
    let mut data = vec![0.0; max_visits * d_model];
    for pos in 0..max_visits {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::matrix(max_visits, d_model, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<AttentionHead>,
    pub attn_out_w: ParamId,
    pub attn_out_b: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    /// Fixed `V × d_model` position table; never trained.
    pub positional: Tensor,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<LayerParams>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// `U(−1/√fan_in, 1/√fan_in)` matrix, rows = fan-in.
pub(crate) fn uniform_weight<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub(crate) fn bias(n: usize) -> Tensor {
    Tensor::zeros(&[1, n])
}

impl EncoderState {
    /// Registers every encoder weight in `store` under `encoder.*` names.
    pub fn init<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        let (d, dk) = (config.d_model, config.head_dim());
        let positional = positional_encoding(config.max_visits, d)?;
        let embed_w = store.add("encoder.embed.weight", uniform_weight(rng, config.input_width, d));
        let embed_b = store.add("encoder.embed.bias", bias(d));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |role: &str| format!("encoder.layer{l}.{role}");
            let heads = (0..config.n_heads)
                .map(|h| AttentionHead {
                    query: store.add(p(&format!("attn.head{h}.query")), uniform_weight(rng, d, dk)),
                    key: store.add(p(&format!("attn.head{h}.key")), uniform_weight(rng, d, dk)),
                    value: store.add(p(&format!("attn.head{h}.value")), uniform_weight(rng, d, dk)),
                })
                .collect();
            layers.push(LayerParams {
                heads,
                attn_out_w: store.add(p("attn.out.weight"), uniform_weight(rng, d, d)),
                attn_out_b: store.add(p("attn.out.bias"), bias(d)),
                norm1_gain: store.add(p("norm1.gain"), Tensor::full(&[1, d], 1.0)),
                norm1_bias: store.add(p("norm1.bias"), bias(d)),
                ffn_w1: store.add(p("ffn.w1"), uniform_weight(rng, d, config.d_ff)),
                ffn_b1: store.add(p("ffn.b1"), bias(config.d_ff)),
                ffn_w2: store.add(p("ffn.w2"), uniform_weight(rng, config.d_ff, d)),
                ffn_b2: store.add(p("ffn.b2"), bias(d)),
                norm2_gain: store.add(p("norm2.gain"), Tensor::full(&[1, d], 1.0)),
                norm2_bias: store.add(p("norm2.bias"), bias(d)),
            });
        }
        let proj_w = store.add("encoder.proj.weight", uniform_weight(rng, d, config.n_out));
        let proj_b = store.add("encoder.proj.bias", bias(config.n_out));
        Ok(Self {
            config,
            positional,
            embed_w,
            embed_b,
            layers,
            proj_w,
            proj_b,
        })
    }

    /// `visits · W_emb + b_emb + P`. Padded rows still receive bias and
    /// position; masking removes them downstream.
    pub fn embed(&self, tape: &mut Tape, visits: Var) -> Result<Var, EncoderError> {
        let w = tape.param(self.embed_w);
        let b = tape.param(self.embed_b);
        let e = tape.matmul(visits, w)?;
        let e = tape.add_row(e, b)?;
        let rows = tape.value(e).dims2().0;
        let pos = if rows == self.config.max_visits {
            self.positional.clone()
        } else {
            positional_encoding(rows, self.config.d_model)?
        };
        let p = tape.constant(pos);
        Ok(tape.add(e, p)?)
    }

    /// Full forward pass for one sequence; returns the `[1, N]` features.
    pub fn forward(&self, tape: &mut Tape, visits: &Tensor, mask: &[f64]) -> Result<Var, EncoderError> {
        Ok(self.forward_traced(tape, visits, mask)?.0)
    }

    /// Forward pass that also returns attention weights per layer and head.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        visits: &Tensor,
        mask: &[f64],
    ) -> Result<(Var, Vec<Vec<Var>>), EncoderError> {
        let x = tape.constant(visits.clone());
        let mut h = self.embed(tape, x)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = encoder_layer_traced(tape, h, mask, layer)?;
            h = next;
            attention.push(w);
        }
        Ok((self.pool_and_project(tape, h, mask)?, attention))
    }

    /// Masked mean over real visits, then `ReLU(· W_p + b_p)`.
    pub fn pool_and_project(&self, tape: &mut Tape, x: Var, mask: &[f64]) -> Result<Var, EncoderError> {
        let pooled = tape.masked_mean(x, mask).map_err(EncoderError::from_numerics)?;
        let w = tape.param(self.proj_w);
        let b = tape.param(self.proj_b);
        let y = tape.matmul(pooled, w)?;
        let y = tape.add_row(y, b)?;
        Ok(tape.relu(y))
    }
}

/// `V × V` additive score bias: `MASK_FILL` in every masked key column.
pub fn key_mask_bias(mask: &[f64]) -> Result<Tensor, EncoderError> {
    if !mask.iter().any(|&m| m != 0.0) {
        return Err(EncoderError::AllMasked);
    }
    let n = mask.len();
    let row: Vec<f64> = mask.iter().map(|&m| if m != 0.0 { 0.0 } else { MASK_FILL }).collect();
    let data = (0..n).flat_map(|_| row.iter().copied()).collect();
    Ok(Tensor::matrix(n, n, data)?)
}

/// Multi-head scaled dot-product self-attention with padded keys masked
/// out. Returns the `V × d_model` output and each head's weight matrix.
pub fn masked_attention(
    tape: &mut Tape,
    x: Var,
    mask: &[f64],
    layer: &LayerParams,
) -> Result<(Var, Vec<Var>), EncoderError> {
    let bias = tape.constant(key_mask_bias(mask)?);
    let mut outputs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let (wq, wk, wv) = (tape.param(head.query), tape.param(head.key), tape.param(head.value));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let dk = tape.value(q).dims2().1 as f64;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / dk.sqrt());
        let scores = tape.add(scores, bias)?;
        let attn = tape.softmax_lastdim(scores);
        outputs.push(tape.matmul(attn, v)?);
        weights.push(attn);
    }
    let cat = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    let wo = tape.param(layer.attn_out_w);
    let bo = tape.param(layer.attn_out_b);
    let out = tape.matmul(cat, wo)?;
    Ok((tape.add_row(out, bo)?, weights))
}

fn layer_norm(tape: &mut Tape, x: Var, gain: ParamId, bias: ParamId) -> Result<Var, NumericsError> {
    let n = tape.layernorm_lastdim(x);
    let g = tape.param(gain);
    let b = tape.param(bias);
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

/// `x₁ = LN(x + Attn(x))`, `x₂ = LN(x₁ + FFN(x₁))` with
/// `FFN(z) = max(0, z W₁ + b₁) W₂ + b₂`.
pub fn encoder_layer(tape: &mut Tape, x: Var, mask: &[f64], layer: &LayerParams) -> Result<Var, EncoderError> {
    Ok(encoder_layer_traced(tape, x, mask, layer)?.0)
}

/// [`encoder_layer`] that also returns the per-head attention weights.
pub fn encoder_layer_traced(
    tape: &mut Tape,
    x: Var,
    mask: &[f64],
    layer: &LayerParams,
) -> Result<(Var, Vec<Var>), EncoderError> {
    let (attn, weights) = masked_attention(tape, x, mask, layer)?;
    let r1 = tape.add(x, attn)?;
    let x1 = layer_norm(tape, r1, layer.norm1_gain, layer.norm1_bias)?;

    let (w1, b1) = (tape.param(layer.ffn_w1), tape.param(layer.ffn_b1));
    let (w2, b2) = (tape.param(layer.ffn_w2), tape.param(layer.ffn_b2));
    let h = tape.matmul(x1, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let f = tape.matmul(h, w2)?;
    let f = tape.add_row(f, b2)?;

    let r2 = tape.add(x1, f)?;
    Ok((layer_norm(tape, r2, layer.norm2_gain, layer.norm2_bias)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(d_model: usize, n_heads: usize, max_visits: usize) -> (ParamStore, EncoderState) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            input_width: 3,
            max_visits,
            d_model,
            n_layers: 2,
            n_heads,
            d_ff: 8,
            n_out: 5,
        };
        let st = EncoderState::init(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, st)
    }

    #[test]
    fn position_table_values() {
        let p = positional_encoding(3, 16).unwrap();
        let row0: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        assert_eq!(p.row_slice(0), row0.as_slice());
        assert!((p.get(1, 0) - 0.841471).abs() < 1e-6);
        assert_eq!(p.get(1, 0), 1f64.sin());
        assert!(p.data().iter().all(|x| x.abs() <= 1.0));
        assert_eq!(positional_encoding(2, 5), Err(EncoderError::OddModelDim(5)));
    }

    #[test]
    fn zero_embedding_gives_positions() {
        let (mut store, st) = tiny(4, 1, 3);
        store.value_mut(st.embed_w).fill(0.0);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::full(&[3, 3], 0.7));
        let e = st.embed(&mut tape, x).unwrap();
        assert_eq!(tape.value(e), &positional_encoding(3, 4).unwrap());
    }

    #[test]
    fn identity_embedding_one_visit() {
        // 2-wide input, d_model 2, W = I, b = [0.5, −0.5], pos 0 = [0, 1]
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            input_width: 2,
            max_visits: 1,
            d_model: 2,
            n_layers: 0,
            n_heads: 1,
            d_ff: 2,
            n_out: 2,
        };
        let st = EncoderState::init(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *store.value_mut(st.embed_w) = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *store.value_mut(st.embed_b) = Tensor::row(vec![0.5, -0.5]);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::row(vec![3.0, 4.0]));
        let e = st.embed(&mut tape, x).unwrap();
        assert_eq!(tape.value(e).data(), &[3.5, 4.5]);
    }

    #[test]
    fn single_real_key_takes_all_weight() {
        let (store, st) = tiny(4, 2, 3);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0, 2.0, 0.1], vec![5.0; 4], vec![-3.0; 4]]).unwrap());
        let (_, weights) = masked_attention(&mut tape, x, &[1.0, 0.0, 0.0], &st.layers[0]).unwrap();
        for w in weights {
            for r in 0..3 {
                assert_eq!(tape.value(w).row_slice(r), &[1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let (mut store, st) = tiny(4, 1, 3);
        store.value_mut(st.layers[0].heads[0].query).fill(0.0);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 1.0], vec![9.0; 4]]).unwrap());
        let (_, weights) = masked_attention(&mut tape, x, &[1.0, 1.0, 0.0], &st.layers[0]).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(weights[0]).row_slice(r), &[0.5, 0.5, 0.0]);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let (store, st) = tiny(4, 1, 2);
        let mut tape = Tape::with_params(&store);
        let r = st.forward(&mut tape, &Tensor::zeros(&[2, 3]), &[0.0, 0.0]);
        assert_eq!(r.unwrap_err(), EncoderError::AllMasked);
    }

    #[test]
    fn zero_sublayers_reduce_to_double_layernorm() {
        let (mut store, st) = tiny(4, 1, 2);
        let layer = st.layers[0].clone();
        for id in [layer.attn_out_w, layer.ffn_w2] {
            store.value_mut(id).fill(0.0);
        }
        let rows = [vec![1.0, 2.0, 4.0, -3.0], vec![0.5, 0.0, 0.25, 1.0]];
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = encoder_layer(&mut tape, x, &[1.0, 1.0], &layer).unwrap();

        let ln = |r: &[f64]| -> Vec<f64> {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64;
            r.iter().map(|x| (x - m) / (v + crate::numerics::LAYERNORM_EPS).sqrt()).collect()
        };
        for (i, r) in rows.iter().enumerate() {
            let expect = ln(&ln(r));
            for (a, b) in tape.value(y).row_slice(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
            let out = tape.value(y).row_slice(i);
            let mean = out.iter().sum::<f64>() / 4.0;
            let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn pooling_ignores_padding_rows() {
        let (store, st) = tiny(4, 1, 4);
        let mut tape = Tape::with_params(&store);
        let common = vec![0.2, -0.4, 1.0, 0.0];
        let x = tape.constant(Tensor::from_rows(&[common.clone(), common.clone(), vec![7.0; 4], vec![-7.0; 4]]).unwrap());
        let mask = [1.0, 1.0, 0.0, 0.0];
        let pooled = tape.masked_mean(x, &mask).unwrap();
        assert_eq!(tape.value(pooled).data(), common.as_slice());
        let plain = tape.masked_mean(x, &[1.0; 4]).unwrap();
        assert_ne!(tape.value(plain).data(), common.as_slice());
        let y = st.pool_and_project(&mut tape, x, &mask).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5]);
    }
}
