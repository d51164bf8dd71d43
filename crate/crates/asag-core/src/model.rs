//! The end-to-end grading network: embed and encode both answers, relate
//! them with multiway attention, fuse per position, re-encode with an
//! aggregation transformer, pool to one vector, and emit a two-class
//! probability.
//!
//! Inference over frozen parameters is safe from multiple threads only if
//! each thread owns its own graph (tensor handles are thread-confined);
//! training mutates parameters from exactly one thread.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multiway_forward, CrossKind, MultiwayOutput, MultiwayParams};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{
    embed, positional_encoding, transformer_block, Dropout, EmbeddedSequence,
    FfnParams, LinearLayer, TransformerBlockParams,
};
use crate::scalar::Scalar;
use crate::tensor::{concat, Mask, Tensor};

/// Architecture and run hyperparameters. `seed` drives initialization and
/// every downstream random draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_model: usize,
    pub head_count: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub encoder_layers: usize,
    pub aggregation_layers: usize,
    pub pooling_dim: usize,
    pub dropout_rate: f64,
    pub share_encoders: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            d_emb: 64,
            d_model: 64,
            head_count: 4,
            d_ffn: 256,
            max_len: 16,
            encoder_layers: 1,
            aggregation_layers: 1,
            pooling_dim: 64,
            dropout_rate: 0.0,
            share_encoders: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail("vocab_size must cover at least PAD and UNK".into());
        }
        for (name, v) in [
            ("d_emb", self.d_emb),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
            ("encoder_layers", self.encoder_layers),
            ("aggregation_layers", self.aggregation_layers),
            ("pooling_dim", self.pooling_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.head_count == 0 || self.d_model % self.head_count != 0 {
            return fail(format!(
                "d_model {} must be divisible by head_count {}",
                self.d_model, self.head_count
            ));
        }
        if self.d_model % 2 != 0 {
            return fail("d_model must be even for the sinusoidal position table".into());
        }
        // Embeddings feed the encoder directly (no input projection), so
        // the widths must agree.
        if self.d_emb != self.d_model {
            return fail(format!(
                "d_emb {} must equal d_model {}",
                self.d_emb, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            ));
        }
        Ok(())
    }
}

/// Weights of the self-attention pooling layer.
pub struct PoolingParams<F: Scalar = f64> {
    pub w1: Tensor<F>, // [1, d_att]
    pub w2: Tensor<F>, // [d_att, d_model]
}

/// Every learnable tensor of the network, uniquely named for
/// checkpointing via [`ModelParams::named_tensors`].
pub struct ModelParams<F: Scalar = f64> {
    pub config: ModelConfig,
    pub embedding: Tensor<F>, // [vocab_size, d_emb]
    pub student_encoder: Vec<TransformerBlockParams<F>>,
    /// Separate reference-side encoder stack; `None` when encoders are shared.
    pub reference_encoder: Option<Vec<TransformerBlockParams<F>>>,
    pub multiway: MultiwayParams<F>,
    pub fuse_student: FfnParams<F>,   // 2d -> d_ffn -> d
    pub fuse_reference: FfnParams<F>, // 2d -> d_ffn -> d
    pub fuse_cross: FfnParams<F>,     // 4d -> d_ffn -> d
    pub fusion_proj: LinearLayer<F>,  // 3d -> d
    pub aggregator: Vec<TransformerBlockParams<F>>,
    pub pooling: PoolingParams<F>,
    pub head_hidden: LinearLayer<F>, // d -> d
    pub head_out: LinearLayer<F>,    // d -> 2
}

/// Glorot weights, zero biases, unit layer-norm gains. The embedding table
/// follows the pre-trained-vector loader instead: rows uniform(-0.1, 0.1)
/// with the PAD row forced to zero.
pub fn init_params<F: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams<F>> {
    config.validate()?;
    let d = config.d_model;

    let mut emb: Vec<F> = (0..config.vocab_size * config.d_emb)
        .map(|_| F::from_f64(rng.gen_range(-0.1..0.1)))
        .collect();
    for v in emb.iter_mut().take(config.d_emb) {
        *v = F::zero(); // PAD row
    }
    let embedding = Tensor::param(emb, &[config.vocab_size, config.d_emb])?;

    let stack = |rng: &mut ChaCha8Rng, layers: usize| -> Result<Vec<TransformerBlockParams<F>>> {
        (0..layers)
            .map(|_| TransformerBlockParams::init(rng, d, config.head_count, config.d_ffn))
            .collect()
    };
    let student_encoder = stack(rng, config.encoder_layers)?;
    let reference_encoder = if config.share_encoders {
        None
    } else {
        Some(stack(rng, config.encoder_layers)?)
    };
    let multiway = MultiwayParams::init(rng, d)?;
    let fuse_student = FfnParams::init(rng, 2 * d, config.d_ffn, d)?;
    let fuse_reference = FfnParams::init(rng, 2 * d, config.d_ffn, d)?;
    let fuse_cross = FfnParams::init(rng, 4 * d, config.d_ffn, d)?;
    let fusion_proj = LinearLayer::init(rng, 3 * d, d)?;
    let aggregator = stack(rng, config.aggregation_layers)?;
    let pooling = PoolingParams {
        w1: crate::nn::glorot_uniform(rng, 1, config.pooling_dim)?,
        w2: crate::nn::glorot_uniform(rng, config.pooling_dim, d)?,
    };
    let head_hidden = LinearLayer::init(rng, d, d)?;
    let head_out = LinearLayer::init(rng, d, 2)?;

    Ok(ModelParams {
        config: config.clone(),
        embedding,
        student_encoder,
        reference_encoder,
        multiway,
        fuse_student,
        fuse_reference,
        fuse_cross,
        fusion_proj,
        aggregator,
        pooling,
        head_hidden,
        head_out,
    })
}

fn push_block<'a, F: Scalar>(
    out: &mut Vec<(String, &'a Tensor<F>)>,
    prefix: &str,
    block: &'a TransformerBlockParams<F>,
) {
    for (role, mats) in [("q", &block.query), ("k", &block.key), ("v", &block.value)] {
        for (h, weight) in mats.iter().enumerate() {
            out.push((format!("{prefix}.{role}{h}"), weight));
        }
    }
    out.push((format!("{prefix}.out.weight"), &block.output.weight));
    out.push((format!("{prefix}.out.bias"), &block.output.bias));
    out.push((format!("{prefix}.norm1.gain"), &block.norm1.gain));
    out.push((format!("{prefix}.norm1.bias"), &block.norm1.bias));
    out.push((format!("{prefix}.norm2.gain"), &block.norm2.gain));
    out.push((format!("{prefix}.norm2.bias"), &block.norm2.bias));
    push_ffn(out, &format!("{prefix}.ffn"), &block.ffn);
}

fn push_ffn<'a, F: Scalar>(
    out: &mut Vec<(String, &'a Tensor<F>)>,
    prefix: &str,
    ffn: &'a FfnParams<F>,
) {
    out.push((format!("{prefix}.w1"), &ffn.first.weight));
    out.push((format!("{prefix}.b1"), &ffn.first.bias));
    out.push((format!("{prefix}.w2"), &ffn.second.weight));
    out.push((format!("{prefix}.b2"), &ffn.second.bias));
}

impl<F: Scalar> ModelParams<F> {
    /// Every learnable tensor with its stable name, in a fixed order. The
    /// order defines the checkpoint layout and the optimizer's state
    /// indexing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        out.push(("embedding.table".to_string(), &self.embedding));
        for (i, b) in self.student_encoder.iter().enumerate() {
            push_block(&mut out, &format!("encoder.student.{i}"), b);
        }
        if let Some(blocks) = &self.reference_encoder {
            for (i, b) in blocks.iter().enumerate() {
                push_block(&mut out, &format!("encoder.reference.{i}"), b);
            }
        }
        let mw = &self.multiway;
        out.push(("multiway.additive.w1".into(), &mw.additive_w1));
        out.push(("multiway.additive.w2".into(), &mw.additive_w2));
        out.push(("multiway.additive.v".into(), &mw.additive_v));
        out.push(("multiway.subtractive.w".into(), &mw.subtractive_w));
        out.push(("multiway.subtractive.v".into(), &mw.subtractive_v));
        out.push(("multiway.multiplicative.w".into(), &mw.multiplicative_w));
        out.push(("multiway.multiplicative.v".into(), &mw.multiplicative_v));
        push_ffn(&mut out, "fuse.student", &self.fuse_student);
        push_ffn(&mut out, "fuse.reference", &self.fuse_reference);
        push_ffn(&mut out, "fuse.cross", &self.fuse_cross);
        out.push(("fusion.proj.weight".into(), &self.fusion_proj.weight));
        out.push(("fusion.proj.bias".into(), &self.fusion_proj.bias));
        for (i, b) in self.aggregator.iter().enumerate() {
            push_block(&mut out, &format!("aggregator.{i}"), b);
        }
        out.push(("pooling.w1".into(), &self.pooling.w1));
        out.push(("pooling.w2".into(), &self.pooling.w2));
        out.push(("head.hidden.weight".into(), &self.head_hidden.weight));
        out.push(("head.hidden.bias".into(), &self.head_hidden.bias));
        out.push(("head.out.weight".into(), &self.head_out.weight));
        out.push(("head.out.bias".into(), &self.head_out.bias));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }
}

/// Contextual encodings of both answers: embeddings plus the sinusoidal
/// position table, run through the encoder stack (shared or per-side).
pub fn encode_answers<F: Scalar>(
    params: &ModelParams<F>,
    student: &EmbeddedSequence<F>,
    reference: &EmbeddedSequence<F>,
    dropout: Option<&Dropout>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let run = |blocks: &[TransformerBlockParams<F>], seq: &EmbeddedSequence<F>| -> Result<Tensor<F>> {
        let len = seq.tokens.len();
        let pe = positional_encoding(len, params.config.d_model)?;
        let mut h = seq.vectors.add(&pe)?;
        for block in blocks {
            h = transformer_block(block, &h, &seq.valid_mask, dropout)?;
        }
        Ok(h)
    };
    let h_q = run(&params.student_encoder, student)?;
    let reference_blocks = params
        .reference_encoder
        .as_deref()
        .unwrap_or(&params.student_encoder);
    let h_p = run(reference_blocks, reference)?;
    Ok((h_q, h_p))
}

/// Per-position fusion of the multiway streams, ready for aggregation.
pub struct FusedSequence<F: Scalar = f64> {
    pub g_student: Tensor<F>,
    pub g_reference: Tensor<F>,
    pub g_cross: Tensor<F>,
}

/// The aggregated sequence `Z` with the mask it is valid under.
pub struct AggregatedSequence<F: Scalar = f64> {
    pub z: Tensor<F>,
    pub mask: Mask,
}

/// Compress each stream with its own position-wise FFN, concatenate the
/// three per position, project back to `d_model`, and re-encode with the
/// aggregation transformer. Positions valid on either side stay active.
pub fn inside_aggregation<F: Scalar>(
    params: &ModelParams<F>,
    mw: &MultiwayOutput<F>,
    h_q: &Tensor<F>,
    h_p: &Tensor<F>,
    q_mask: &Mask,
    p_mask: &Mask,
    dropout: Option<&Dropout>,
) -> Result<AggregatedSequence<F>> {
    let fused = fuse_streams(params, mw, h_q, h_p, q_mask, p_mask)?;
    let stacked = concat(
        &[fused.g_reference, fused.g_student, fused.g_cross],
        1,
    )?;
    let mask = q_mask.union(p_mask)?;
    let mut z = params.fusion_proj.forward(&stacked)?;
    for block in &params.aggregator {
        z = transformer_block(block, &z, &mask, dropout)?;
    }
    Ok(AggregatedSequence { z, mask })
}

pub fn fuse_streams<F: Scalar>(
    params: &ModelParams<F>,
    mw: &MultiwayOutput<F>,
    h_q: &Tensor<F>,
    h_p: &Tensor<F>,
    q_mask: &Mask,
    p_mask: &Mask,
) -> Result<FusedSequence<F>> {
    let q_rows = q_mask.as_column_tensor();
    let p_rows = p_mask.as_column_tensor();
    let g_student = crate::nn::positionwise_ffn(
        &params.fuse_student,
        &concat(&[h_q.clone(), mw.self_student.clone()], 1)?,
    )?
    .mul(&q_rows)?;
    let g_reference = crate::nn::positionwise_ffn(
        &params.fuse_reference,
        &concat(&[h_p.clone(), mw.self_reference.clone()], 1)?,
    )?
    .mul(&p_rows)?;
    let g_cross = crate::nn::positionwise_ffn(
        &params.fuse_cross,
        &concat(
            &[
                mw.cross(CrossKind::Additive).clone(),
                mw.cross(CrossKind::Subtractive).clone(),
                mw.cross(CrossKind::Multiplicative).clone(),
                mw.cross(CrossKind::Dot).clone(),
            ],
            1,
        )?,
    )?
    .mul(&q_rows)?;
    Ok(FusedSequence {
        g_student,
        g_reference,
        g_cross,
    })
}

/// `x = softmax(w1 tanh(W2 Z^T)) Z`, reduced to a single `[d_model]`
/// vector; also exposes the position weights.
pub fn attention_pooling_with_weights<F: Scalar>(
    pooling: &PoolingParams<F>,
    z: &Tensor<F>,
    mask: &Mask,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let scores = pooling.w1.matmul(&pooling.w2.matmul(&z.transpose()?)?.tanh())?;
    let weights = scores.masked_softmax(mask)?;
    let pooled = weights.matmul(z)?.reshape(&[z.shape()[1]])?;
    Ok((pooled, weights))
}

pub fn attention_pooling<F: Scalar>(
    pooling: &PoolingParams<F>,
    z: &Tensor<F>,
    mask: &Mask,
) -> Result<Tensor<F>> {
    attention_pooling_with_weights(pooling, z, mask).map(|(x, _)| x)
}

/// Two-layer head with relu, then softmax over the two classes:
/// `probs[0] = P(wrong)`, `probs[1] = P(right)`.
pub fn predict<F: Scalar>(params: &ModelParams<F>, pooled: &Tensor<F>) -> Result<Tensor<F>> {
    let x = pooled.reshape(&[1, pooled.numel()])?;
    let hidden = params.head_hidden.forward(&x)?.relu();
    let logits = params.head_out.forward(&hidden)?;
    logits.masked_softmax(&Mask::all_true(2))?.reshape(&[2])
}

/// Cross entropy of one prediction: `-log(probs[label])`, with the
/// probability clamped at 1e-12 before the log.
pub fn loss<F: Scalar>(probs: &Tensor<F>, label: u8) -> Result<Tensor<F>> {
    if label > 1 {
        return Err(Error::InvalidLabel(label as i64));
    }
    let picked = probs.slice(0, label as usize, label as usize + 1)?;
    picked
        .max_scalar(F::from_f64(1e-12))
        .ln()
        .neg()
        .sum(None)
}

/// Mean cross entropy over a batch of `[B, 2]` predictions.
pub fn batch_loss<F: Scalar>(probs: &Tensor<F>, labels: &[u8]) -> Result<Tensor<F>> {
    if probs.shape() != [labels.len(), 2] {
        return Err(Error::ShapeMismatch {
            op: "batch_loss",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len(), 2],
        });
    }
    let mut per_example = Vec::with_capacity(labels.len());
    for (b, &label) in labels.iter().enumerate() {
        let row = probs.slice(0, b, b + 1)?.reshape(&[2])?;
        per_example.push(loss(&row, label)?.reshape(&[1])?);
    }
    concat(&per_example, 0)?.mean(None)
}

/// Probability vector for one tokenized answer pair.
pub fn forward_pair<F: Scalar>(
    params: &ModelParams<F>,
    student_ids: &[usize],
    student_mask: &Mask,
    reference_ids: &[usize],
    reference_mask: &Mask,
    dropout: Option<&Dropout>,
) -> Result<Tensor<F>> {
    let student = embed(student_ids, &params.embedding, student_mask)?;
    let reference = embed(reference_ids, &params.embedding, reference_mask)?;
    let (h_q, h_p) = encode_answers(params, &student, &reference, dropout)?;
    let mw = multiway_forward(&params.multiway, &h_q, &h_p, student_mask, reference_mask)?;
    let agg = inside_aggregation(
        params,
        &mw,
        &h_q,
        &h_p,
        student_mask,
        reference_mask,
        dropout,
    )?;
    let pooled = attention_pooling(&params.pooling, &agg.z, &agg.mask)?;
    predict(params, &pooled)
}

/// Batched forward pass: examples run independently and their probability
/// rows are stacked into `[B, 2]`.
pub fn model_forward<F: Scalar>(
    params: &ModelParams<F>,
    batch: &Batch,
    dropout: Option<&Dropout>,
) -> Result<Tensor<F>> {
    let mut rows = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let (sid, smask) = batch.student_row(b);
        let (rid, rmask) = batch.reference_row(b);
        let probs = forward_pair(params, sid, &smask, rid, &rmask, dropout)?;
        rows.push(probs.reshape(&[1, 2])?);
    }
    concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_emb: 8,
            d_model: 8,
            head_count: 2,
            d_ffn: 16,
            max_len: 4,
            encoder_layers: 1,
            aggregation_layers: 1,
            pooling_dim: 6,
            dropout_rate: 0.0,
            share_encoders: true,
            seed: 7,
        }
    }

    fn tiny_params(seed: u64) -> ModelParams {
        init_params(&tiny_config(), &mut rng(seed)).unwrap()
    }

    fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::param(data, shape).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = tiny_config();
        c.head_count = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.d_emb = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn init_same_seed_is_bit_identical() {
        let a = tiny_params(3);
        let b = tiny_params(3);
        for ((name_a, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(ta.to_vec(), tb.to_vec(), "{name_a}");
        }
        let c = tiny_params(4);
        let first: Vec<f64> = c.embedding.to_vec();
        assert_ne!(first, a.embedding.to_vec());
    }

    #[test]
    fn init_biases_zero_and_pad_row_zero() {
        let p = tiny_params(5);
        for (name, t) in p.named_tensors() {
            if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                assert!(t.to_vec().iter().all(|v| *v == 0.0), "{name}");
            }
        }
        assert!(p.embedding.to_vec()[..8].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_weight_mean_is_statistically_centered() {
        let mut r = rng(6);
        // 10k Glorot draws: mean within 3 sigma of zero
        let t: Tensor = crate::nn::glorot_uniform(&mut r, 100, 100).unwrap();
        let v = t.to_vec();
        let limit = (6.0 / 200.0f64).sqrt();
        let sigma = limit / 3.0f64.sqrt(); // stddev of uniform(-limit, limit)
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() <= 3.0 * sigma / (v.len() as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn named_tensors_are_unique() {
        let p = tiny_params(8);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }

    fn embedded(p: &ModelParams, ids: &[usize], valid: usize) -> EmbeddedSequence {
        embed(ids, &p.embedding, &Mask::prefix(valid, ids.len())).unwrap()
    }

    #[test]
    fn encode_shapes_and_shared_determinism() {
        let p = tiny_params(9);
        let s = embedded(&p, &[2, 3, 4, 0], 3);
        let r = embedded(&p, &[2, 3, 4, 0], 3);
        let (h_q, h_p) = encode_answers(&p, &s, &r, None).unwrap();
        assert_eq!(h_q.shape(), &[4, 8]);
        assert_eq!(h_p.shape(), &[4, 8]);
        // shared encoders + identical inputs: bit-identical encodings
        assert_eq!(h_q.to_vec(), h_p.to_vec());
    }

    #[test]
    fn encode_gradients_reach_only_used_embedding_rows() {
        let p = tiny_params(10);
        let s = embedded(&p, &[2, 5, 0, 0], 2);
        let r = embedded(&p, &[7, 0, 0, 0], 1);
        let (h_q, h_p) = encode_answers(&p, &s, &r, None).unwrap();
        // non-linear readout: a plain sum of layer-norm rows is constant
        h_q.add(&h_p)
            .unwrap()
            .tanh()
            .sum(None)
            .unwrap()
            .backward()
            .unwrap();
        let g = p.embedding.grad().unwrap();
        let d = 8;
        let row_nonzero =
            |row: usize| -> bool { g[row * d..(row + 1) * d].iter().any(|v| *v != 0.0) };
        assert!(row_nonzero(2) && row_nonzero(5) && row_nonzero(7));
        for unused in [1usize, 3, 4, 6, 8, 9, 10, 11] {
            assert!(!row_nonzero(unused), "row {unused} should be untouched");
        }
        // PAD row is always masked out
        assert!(!row_nonzero(0));
    }

    fn full_multiway(p: &ModelParams, seed: u64) -> (MultiwayOutput, Tensor, Tensor, Mask, Mask) {
        let mut r = rng(seed);
        let h_q = random_tensor(&mut r, &[4, 8]);
        let h_p = random_tensor(&mut r, &[4, 8]);
        let q_mask = Mask::prefix(3, 4);
        let p_mask = Mask::prefix(4, 4);
        let mw = multiway_forward(&p.multiway, &h_q, &h_p, &q_mask, &p_mask).unwrap();
        (mw, h_q, h_p, q_mask, p_mask)
    }

    #[test]
    fn aggregation_shape_and_cross_sensitivity() {
        let p = tiny_params(11);
        let (mw, h_q, h_p, q_mask, p_mask) = full_multiway(&p, 12);
        let agg = inside_aggregation(&p, &mw, &h_q, &h_p, &q_mask, &p_mask, None).unwrap();
        assert_eq!(agg.z.shape(), &[4, 8]);

        // zeroing the cross streams must change Z
        let zero = Tensor::zeros(&[4, 8]);
        let gutted = MultiwayOutput {
            self_student: mw.self_student.clone(),
            self_reference: mw.self_reference.clone(),
            cross_additive: zero.clone(),
            cross_subtractive: zero.clone(),
            cross_multiplicative: zero.clone(),
            cross_dot: zero,
        };
        let agg2 = inside_aggregation(&p, &gutted, &h_q, &h_p, &q_mask, &p_mask, None).unwrap();
        let delta: f64 = agg
            .z
            .to_vec()
            .iter()
            .zip(agg2.z.to_vec())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn aggregation_passes_grad_check() {
        let p = tiny_params(13);
        let (_, _, h_p, q_mask, p_mask) = full_multiway(&p, 14);
        let mut r = rng(15);
        let h_q = random_tensor(&mut r, &[4, 8]);
        let err = grad_check(
            |v: &Tensor| {
                let mw = multiway_forward(&p.multiway, v, &h_p, &q_mask, &p_mask)?;
                inside_aggregation(&p, &mw, v, &h_p, &q_mask, &p_mask, None)?
                    .z
                    .tanh()
                    .sum(None)
            },
            &h_q,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn pooling_single_position_is_exact_row() {
        let p = tiny_params(16);
        let mut r = rng(17);
        let z = random_tensor(&mut r, &[1, 8]);
        let x = attention_pooling(&p.pooling, &z, &Mask::all_true(1)).unwrap();
        assert_eq!(x.to_vec(), z.to_vec());
        assert_eq!(x.shape(), &[8]);
    }

    #[test]
    fn pooling_identical_rows_fixed_point() {
        let p = tiny_params(18);
        let row: Vec<f64> = (0..8).map(|i| i as f64 / 4.0 - 1.0).collect();
        let z = Tensor::from_vec([row.clone(), row.clone(), row.clone()].concat(), &[3, 8]).unwrap();
        let x = attention_pooling(&p.pooling, &z, &Mask::all_true(3)).unwrap();
        for (a, b) in x.to_vec().iter().zip(&row) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pooling_matches_loop_oracle() {
        let p = tiny_params(19);
        let mut r = rng(20);
        let (l, d, d_att) = (4, 8, 6);
        let z = random_tensor(&mut r, &[l, d]);
        let mask = Mask::prefix(3, l);
        let (x, w) = attention_pooling_with_weights(&p.pooling, &z, &mask).unwrap();

        let w1 = p.pooling.w1.to_vec();
        let w2 = p.pooling.w2.to_vec();
        let zv = z.to_vec();
        // scores[j] = w1 . tanh(W2 z_j)
        let mut scores = vec![0.0; l];
        for j in 0..l {
            for a in 0..d_att {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += w2[a * d + c] * zv[j * d + c];
                }
                scores[j] += w1[a] * acc.tanh();
            }
        }
        let max = scores[..3].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(j, s)| if j < 3 { (s - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
        for (a, b) in w.to_vec().iter().zip(&alpha) {
            assert!((a - b).abs() <= 1e-12);
        }
        let mut expect = vec![0.0; d];
        for j in 0..l {
            for c in 0..d {
                expect[c] += alpha[j] * zv[j * d + c];
            }
        }
        for (a, b) in x.to_vec().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn predict_zero_weights_is_uniform() {
        let mut p = tiny_params(21);
        p.head_out = LinearLayer {
            weight: Tensor::param(vec![0.0; 16], &[8, 2]).unwrap(),
            bias: Tensor::param(vec![0.0; 2], &[2]).unwrap(),
        };
        let x = Tensor::from_vec(vec![0.3; 8], &[8]).unwrap();
        let probs = predict(&p, &x).unwrap();
        assert_eq!(probs.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn predict_probs_in_open_interval_and_swap_flips() {
        let p = tiny_params(22);
        let mut r = rng(23);
        let x = random_tensor(&mut r, &[8]);
        let probs = predict(&p, &x).unwrap();
        for v in probs.to_vec() {
            assert!(v > 0.0 && v < 1.0);
        }
        // swap the output head's logit columns
        let mut swapped = tiny_params(22);
        let w = p.head_out.weight.to_vec();
        let mut sw = vec![0.0; w.len()];
        for i in 0..8 {
            sw[i * 2] = w[i * 2 + 1];
            sw[i * 2 + 1] = w[i * 2];
        }
        let b = p.head_out.bias.to_vec();
        swapped.head_out = LinearLayer {
            weight: Tensor::param(sw, &[8, 2]).unwrap(),
            bias: Tensor::param(vec![b[1], b[0]], &[2]).unwrap(),
        };
        let probs2 = predict(&swapped, &x).unwrap();
        let argmax = |v: &[f64]| if v[0] >= v[1] { 0 } else { 1 };
        assert_ne!(argmax(&probs.to_vec()), argmax(&probs2.to_vec()));
    }

    #[test]
    fn loss_closed_forms() {
        let even: Tensor = Tensor::from_vec(vec![0.5, 0.5], &[2]).unwrap();
        let l = loss(&even, 0).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-12);
        let l = loss(&even, 1).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-12);

        let hard: Tensor = Tensor::from_vec(vec![0.0, 1.0], &[2]).unwrap();
        assert!(loss(&hard, 1).unwrap().item().abs() <= 1e-12);
        // clamped away from log(0)
        assert!(loss(&hard, 0).unwrap().item().is_finite());

        assert!(matches!(loss(&even, 2), Err(Error::InvalidLabel(2))));
    }

    #[test]
    fn loss_gradient_wrt_logits_is_probs_minus_onehot() {
        let logits: Tensor = Tensor::param(vec![0.4, -0.9], &[2]).unwrap();
        let probs = logits
            .reshape(&[1, 2])
            .unwrap()
            .masked_softmax(&Mask::all_true(2))
            .unwrap()
            .reshape(&[2])
            .unwrap();
        let pv = probs.to_vec();
        loss(&probs, 1).unwrap().backward().unwrap();
        let g = logits.grad().unwrap();
        assert!((g[0] - pv[0]).abs() <= 1e-12);
        assert!((g[1] - (pv[1] - 1.0)).abs() <= 1e-12);

        // and against central finite differences
        let err = grad_check(
            |v: &Tensor| {
                let probs = v
                    .reshape(&[1, 2])?
                    .masked_softmax(&Mask::all_true(2))?
                    .reshape(&[2])?;
                loss(&probs, 1)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    fn tiny_batch() -> Batch {
        Batch {
            student_ids: vec![2, 3, 0, 0, 4, 5, 6, 0],
            reference_ids: vec![7, 8, 9, 0, 7, 3, 0, 0],
            student_mask: vec![true, true, false, false, true, true, true, false],
            reference_mask: vec![true, true, true, false, true, true, false, false],
            labels: vec![1, 0],
            max_len: 4,
        }
    }

    #[test]
    fn model_forward_contract() {
        let p = tiny_params(24);
        let batch = tiny_batch();
        let probs = model_forward(&p, &batch, None).unwrap();
        assert_eq!(probs.shape(), &[2, 2]);
        let v = probs.to_vec();
        for row in 0..2 {
            let sum = v[row * 2] + v[row * 2 + 1];
            assert!((sum - 1.0).abs() <= 1e-10);
        }
        // determinism
        let again = model_forward(&p, &batch, None).unwrap();
        assert_eq!(v, again.to_vec());

        // permuting examples permutes outputs
        let b = tiny_batch();
        let swapped = Batch {
            student_ids: [&b.student_ids[4..], &b.student_ids[..4]].concat(),
            reference_ids: [&b.reference_ids[4..], &b.reference_ids[..4]].concat(),
            student_mask: [&b.student_mask[4..], &b.student_mask[..4]].concat(),
            reference_mask: [&b.reference_mask[4..], &b.reference_mask[..4]].concat(),
            labels: vec![0, 1],
            max_len: 4,
        };
        let pv = model_forward(&p, &swapped, None).unwrap().to_vec();
        assert_eq!(&pv[0..2], &v[2..4]);
        assert_eq!(&pv[2..4], &v[0..2]);
    }

    #[test]
    fn padding_extension_leaves_probs_unchanged() {
        let p = tiny_params(25);
        let batch = tiny_batch();
        let probs = model_forward(&p, &batch, None).unwrap().to_vec();

        // same examples padded out to L = 6
        let pad = |ids: &[usize]| -> Vec<usize> {
            let mut out = Vec::new();
            for row in ids.chunks(4) {
                out.extend_from_slice(row);
                out.extend_from_slice(&[0, 0]);
            }
            out
        };
        let pad_mask = |m: &[bool]| -> Vec<bool> {
            let mut out = Vec::new();
            for row in m.chunks(4) {
                out.extend_from_slice(row);
                out.extend_from_slice(&[false, false]);
            }
            out
        };
        let b = tiny_batch();
        let longer = Batch {
            student_ids: pad(&b.student_ids),
            reference_ids: pad(&b.reference_ids),
            student_mask: pad_mask(&b.student_mask),
            reference_mask: pad_mask(&b.reference_mask),
            labels: b.labels.clone(),
            max_len: 6,
        };
        let probs2 = model_forward(&p, &longer, None).unwrap().to_vec();
        for (a, b) in probs.iter().zip(&probs2) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_loss_matches_mean_of_example_losses() {
        let p = tiny_params(26);
        let batch = tiny_batch();
        let probs = model_forward(&p, &batch, None).unwrap();
        let total = batch_loss(&probs, &batch.labels).unwrap().item();
        let v = probs.to_vec();
        let expect = (-(v[1].max(1e-12)).ln() - (v[2].max(1e-12)).ln()) / 2.0;
        assert!((total - expect).abs() <= 1e-12);
    }

    #[test]
    fn full_model_grad_check_on_selected_parameters() {
        let p = tiny_params(27);
        let batch = tiny_batch();
        let run = |p: &ModelParams| -> Result<Tensor> {
            let probs = model_forward(p, &batch, None)?;
            batch_loss(&probs, &batch.labels)
        };
        for (name, tensor) in [
            ("embedding.table", &p.embedding),
            ("pooling.w2", &p.pooling.w2),
            ("fusion.proj.weight", &p.fusion_proj.weight),
        ] {
            let err = grad_check(
                |_v: &Tensor| run(&p),
                tensor,
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }
}
