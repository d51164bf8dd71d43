//! Reusable layers: linear maps, layer normalization, position-wise
//! feed-forward networks, embeddings, sinusoidal positional encodings,
//! multi-head attention, and the post-norm transformer encoder block.
//!
//! Layer parameters are plain collections of leaf tensors; they are
//! immutable during a forward pass, so concurrent forward passes over
//! frozen parameters are safe (each pass builds its own graph).

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat, Mask, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Glorot-uniform weight draws: `uniform(-sqrt(6/(fan_in+fan_out)), +sqrt)`.
/// Draws are made in f64 and converted, so the stream is identical for
/// every scalar width.
pub fn glorot_uniform<F: Scalar>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
) -> Result<Tensor<F>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<F> = (0..fan_in * fan_out)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::param(data, &[fan_in, fan_out])
}

fn zero_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::param(vec![F::zero(); n], shape).expect("consistent shape")
}

fn one_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::param(vec![F::one(); n], shape).expect("consistent shape")
}

/// Affine map `x W + b` applied to the last axis.
pub struct LinearLayer<F: Scalar = f64> {
    pub weight: Tensor<F>, // [d_in, d_out]
    pub bias: Tensor<F>,   // [d_out]
}

impl<F: Scalar> LinearLayer<F> {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(LinearLayer {
            weight: glorot_uniform(rng, d_in, d_out)?,
            bias: zero_param(&[d_out]),
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Gain and bias of one layer normalization.
pub struct LayerNormParams<F: Scalar = f64> {
    pub gain: Tensor<F>, // [d]
    pub bias: Tensor<F>, // [d]
}

impl<F: Scalar> LayerNormParams<F> {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gain: one_param(&[d]),
            bias: zero_param(&[d]),
        }
    }
}

/// Normalize each row of the last axis to mean 0 / variance 1 (with
/// epsilon 1e-5 inside the square root), then apply the affine gain/bias.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, params: &LayerNormParams<F>) -> Result<Tensor<F>> {
    let shape = x.shape().to_vec();
    let d = *shape.last().ok_or_else(|| Error::InvalidShape {
        op: "layer_norm",
        shape: shape.clone(),
        msg: "needs at least one axis".into(),
    })?;
    let rows = x.numel() / d;
    let x2 = x.reshape(&[rows, d])?;
    let mu = x2.mean(Some(1))?.reshape(&[rows, 1])?;
    let centered = x2.sub(&mu)?;
    let var = centered.mul(&centered)?.mean(Some(1))?.reshape(&[rows, 1])?;
    let inv_std = var.add_scalar(F::from_f64(LAYER_NORM_EPS)).sqrt().recip();
    centered
        .mul(&inv_std)?
        .mul(&params.gain)?
        .add(&params.bias)?
        .reshape(&shape)
}

/// Two-layer perceptron applied independently at every position.
pub struct FfnParams<F: Scalar = f64> {
    pub first: LinearLayer<F>,  // d_in -> d_hidden
    pub second: LinearLayer<F>, // d_hidden -> d_out
}

impl<F: Scalar> FfnParams<F> {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(FfnParams {
            first: LinearLayer::init(rng, d_in, d_hidden)?,
            second: LinearLayer::init(rng, d_hidden, d_out)?,
        })
    }
}

/// `relu(x W1 + b1) W2 + b2`, position by position.
pub fn positionwise_ffn<F: Scalar>(params: &FfnParams<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    params.second.forward(&params.first.forward(x)?.relu())
}

/// Token ids looked up into an embedding table, with padded rows zeroed.
pub struct EmbeddedSequence<F: Scalar = f64> {
    pub tokens: Vec<usize>,
    pub vectors: Tensor<F>, // [L, d_emb]
    pub valid_mask: Mask,   // [L]
}

/// Row lookup into `table`; rows at masked positions become exactly zero
/// and contribute no gradient, so only used rows of the table train.
pub fn embed<F: Scalar>(
    tokens: &[usize],
    table: &Tensor<F>,
    mask: &Mask,
) -> Result<EmbeddedSequence<F>> {
    if mask.shape() != [tokens.len()] {
        return Err(Error::ShapeMismatch {
            op: "embed",
            lhs: vec![tokens.len()],
            rhs: mask.shape().to_vec(),
        });
    }
    let vectors = table.index_rows(tokens)?.mul(&mask.as_column_tensor())?;
    Ok(EmbeddedSequence {
        tokens: tokens.to_vec(),
        vectors,
        valid_mask: mask.clone(),
    })
}

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`. Constant (not learned).
pub fn positional_encoding<F: Scalar>(len: usize, d: usize) -> Result<Tensor<F>> {
    if d % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "positional_encoding",
            shape: vec![len, d],
            msg: "dimension must be even".into(),
        });
    }
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64(v));
        }
    }
    Tensor::from_vec(data, &[len, d])
}

/// Inverted dropout driven by a seeded stream; inactive at rate zero.
pub struct Dropout {
    pub rate: f64,
    pub rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout {
            rate,
            rng: RefCell::new(rng),
        }
    }

    fn apply<F: Scalar>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<F> = (0..x.numel())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    F::from_f64(1.0 / keep)
                } else {
                    F::zero()
                }
            })
            .collect();
        x.mul(&Tensor::from_vec(mask, x.shape())?)
    }
}

fn maybe_dropout<F: Scalar>(x: Tensor<F>, dropout: Option<&Dropout>) -> Result<Tensor<F>> {
    match dropout {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

/// One post-norm transformer encoder block: bias-free per-head
/// query/key/value projection matrices (a bias on the key side would be
/// invisible to the row-shift-invariant softmax), output projection, two
/// layer norms, and a position-wise feed-forward net.
pub struct TransformerBlockParams<F: Scalar = f64> {
    pub query: Vec<Tensor<F>>, // per head, [d_model, d_head]
    pub key: Vec<Tensor<F>>,
    pub value: Vec<Tensor<F>>,
    pub output: LinearLayer<F>, // d_model -> d_model
    pub norm1: LayerNormParams<F>,
    pub norm2: LayerNormParams<F>,
    pub ffn: FfnParams<F>, // d_model -> d_ffn -> d_model
    pub head_count: usize,
    pub d_model: usize,
}

impl<F: Scalar> TransformerBlockParams<F> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        d_model: usize,
        head_count: usize,
        d_ffn: usize,
    ) -> Result<Self> {
        if head_count == 0 || d_model % head_count != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by head_count {head_count}"
            )));
        }
        let d_head = d_model / head_count;
        let proj = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<F>>> {
            (0..head_count)
                .map(|_| glorot_uniform(rng, d_model, d_head))
                .collect()
        };
        Ok(TransformerBlockParams {
            query: proj(rng)?,
            key: proj(rng)?,
            value: proj(rng)?,
            output: LinearLayer::init(rng, d_model, d_model)?,
            norm1: LayerNormParams::init(d_model),
            norm2: LayerNormParams::init(d_model),
            ffn: FfnParams::init(rng, d_model, d_ffn, d_model)?,
            head_count,
            d_model,
        })
    }
}

/// Scaled dot-product attention per head over the key/value sequence,
/// heads concatenated and output-projected. Returns the per-head
/// attention weight matrices alongside the output.
pub fn multi_head_attention_with_weights<F: Scalar>(
    params: &TransformerBlockParams<F>,
    queries: &Tensor<F>,
    keys_values: &Tensor<F>,
    key_mask: &Mask,
) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
    let d_head = params.d_model / params.head_count;
    let scale = F::from_f64(1.0 / (d_head as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(params.head_count);
    let mut head_weights = Vec::with_capacity(params.head_count);
    for h in 0..params.head_count {
        let q = queries.matmul(&params.query[h])?;
        let k = keys_values.matmul(&params.key[h])?;
        let v = keys_values.matmul(&params.value[h])?;
        let scores = q.matmul(&k.transpose()?)?.scale(scale);
        let weights = scores.masked_softmax(key_mask)?;
        head_outputs.push(weights.matmul(&v)?);
        head_weights.push(weights);
    }
    let merged = concat(&head_outputs, 1)?;
    Ok((params.output.forward(&merged)?, head_weights))
}

pub fn multi_head_attention<F: Scalar>(
    params: &TransformerBlockParams<F>,
    queries: &Tensor<F>,
    keys_values: &Tensor<F>,
    key_mask: &Mask,
) -> Result<Tensor<F>> {
    multi_head_attention_with_weights(params, queries, keys_values, key_mask).map(|(out, _)| out)
}

/// `layer_norm(x + MHA(x, x, x))` then `layer_norm(. + FFN(.))`, with
/// rows at masked positions zeroed on the way out.
pub fn transformer_block<F: Scalar>(
    params: &TransformerBlockParams<F>,
    x: &Tensor<F>,
    mask: &Mask,
    dropout: Option<&Dropout>,
) -> Result<Tensor<F>> {
    let attended = multi_head_attention(params, x, x, mask)?;
    let attended = maybe_dropout(attended, dropout)?;
    let h = layer_norm(&x.add(&attended)?, &params.norm1)?;
    let ff = maybe_dropout(positionwise_ffn(&params.ffn, &h)?, dropout)?;
    let out = layer_norm(&h.add(&ff)?, &params.norm2)?;
    out.mul(&mask.as_column_tensor())
}
