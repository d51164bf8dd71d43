//! Finite-difference verification of every layer and of the whole model
//! at a tiny configuration. This is the self-check behind the `gradcheck`
//! command; the layer tolerance is 1e-5 and the full model runs at 1e-4.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention, multiway_forward, self_attention_block, CrossKind, MultiwayParams,
};
use crate::data::Batch;
use crate::error::Result;
use crate::model::{
    attention_pooling, batch_loss, inside_aggregation, loss, model_forward, predict, ModelConfig,
    ModelParams,
};
use crate::nn::{
    layer_norm, positionwise_ffn, transformer_block, FfnParams, LayerNormParams, LinearLayer,
    TransformerBlockParams,
};
use crate::tensor::{grad_check, Mask, Tensor};
use crate::train::set_global_seed;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const FULL_MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<28} max_rel_err {:.3e}  tol {:.0e}  {}",
            self.name,
            self.max_relative_error,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::param(data, shape).expect("consistent shape")
}

/// Finite differences with an outlier recheck: when the error at `eps`
/// exceeds `tol`, measure again at `eps / 4` and keep the smaller value.
/// A relu kink sitting inside the probe window vanishes at the smaller
/// step; a wrong backward rule stays large at every step.
fn fd_error(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
    tol: f64,
) -> Result<f64> {
    let err = grad_check(&f, x, eps)?;
    if err <= tol {
        return Ok(err);
    }
    Ok(err.min(grad_check(&f, x, eps / 4.0)?))
}

/// The spec's tiny verification configuration: four positions, eight
/// channels, two examples per batch.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
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
        seed,
    }
}

fn tiny_batch(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Batch {
    let l = config.max_len;
    let mut batch = Batch {
        student_ids: Vec::new(),
        reference_ids: Vec::new(),
        student_mask: Vec::new(),
        reference_mask: Vec::new(),
        labels: vec![1, 0],
        max_len: l,
    };
    for _ in 0..2 {
        for (ids, mask) in [
            (&mut batch.student_ids, &mut batch.student_mask),
            (&mut batch.reference_ids, &mut batch.reference_mask),
        ] {
            let valid = rng.gen_range(2..=l);
            for pos in 0..l {
                if pos < valid {
                    ids.push(rng.gen_range(2..config.vocab_size));
                    mask.push(true);
                } else {
                    ids.push(0);
                    mask.push(false);
                }
            }
        }
    }
    batch
}

/// Run the per-layer checks and the full-model check, in order, and
/// return every result (passing or not).
pub fn run_gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let streams = set_global_seed(seed);
    let mut rng = streams.stream("gradcheck");
    let eps = 1e-4;
    let (l, d) = (4usize, 8usize);
    let mut results = Vec::new();
    let mut layer = |name: &str, err: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_relative_error: err,
            tolerance: LAYER_TOLERANCE,
        });
    };

    let x = random_tensor(&mut rng, &[l, d]);
    let mask = Mask::prefix(3, l);

    let linear = LinearLayer::init(&mut rng, d, 5)?;
    layer(
        "linear",
        fd_error(|v: &Tensor| linear.forward(v)?.tanh().sum(None), &x, eps, LAYER_TOLERANCE)?,
    );

    let ln = LayerNormParams::init(d);
    layer(
        "layer_norm",
        fd_error(|v: &Tensor| layer_norm(v, &ln)?.tanh().sum(None), &x, eps, LAYER_TOLERANCE)?,
    );

    let ffn = FfnParams::init(&mut rng, d, 2 * d, d)?;
    layer(
        "positionwise_ffn",
        fd_error(
            |v: &Tensor| positionwise_ffn(&ffn, &v.add_scalar(0.05))?.tanh().sum(None),
            &x,
            eps,
            LAYER_TOLERANCE,
        )?,
    );

    let table = random_tensor(&mut rng, &[6, d]);
    layer(
        "embedding_lookup",
        fd_error(
            |t: &Tensor| t.index_rows(&[1, 3, 3, 5])?.tanh().sum(None),
            &table,
            eps,
            LAYER_TOLERANCE,
        )?,
    );

    let block = TransformerBlockParams::init(&mut rng, d, 2, 2 * d)?;
    layer(
        "transformer_block",
        fd_error(
            |v: &Tensor| transformer_block(&block, v, &mask, None)?.tanh().sum(None),
            &x,
            eps,
            LAYER_TOLERANCE,
        )?,
    );

    layer(
        "self_attention",
        fd_error(
            |v: &Tensor| self_attention_block(v, &mask)?.tanh().sum(None),
            &x,
            eps,
            LAYER_TOLERANCE,
        )?,
    );

    let multiway = MultiwayParams::init(&mut rng, d)?;
    let h_p = random_tensor(&mut rng, &[l, d]);
    for kind in CrossKind::ALL {
        layer(
            &format!("cross_attention_{}", kind.name()),
            fd_error(
                |v: &Tensor| cross_attention(kind, &multiway, v, &h_p, &mask)?.tanh().sum(None),
                &x,
                eps,
                LAYER_TOLERANCE,
            )?,
        );
    }

    layer(
        "multiway_forward",
        fd_error(
            |v: &Tensor| {
                let mw = multiway_forward(&multiway, v, &h_p, &mask, &mask)?;
                crate::tensor::concat(
                    &[
                        mw.self_student,
                        mw.self_reference,
                        mw.cross_additive,
                        mw.cross_subtractive,
                        mw.cross_multiplicative,
                        mw.cross_dot,
                    ],
                    0,
                )?
                .tanh()
                .sum(None)
            },
            &x,
            eps,
            LAYER_TOLERANCE,
        )?,
    );

    let config = tiny_config(seed);
    let params: ModelParams = crate::model::init_params(&config, &mut streams.stream("init"))?;
    layer(
        "inside_aggregation",
        fd_error(
            |v: &Tensor| {
                let mw = multiway_forward(&params.multiway, v, &h_p, &mask, &mask)?;
                inside_aggregation(&params, &mw, v, &h_p, &mask, &mask, None)?
                    .z
                    .tanh()
                    .sum(None)
            },
            &x,
            eps,
            LAYER_TOLERANCE,
        )?,
    );

    layer(
        "attention_pooling",
        fd_error(
            |v: &Tensor| attention_pooling(&params.pooling, v, &mask)?.tanh().sum(None),
            &x,
            eps,
            LAYER_TOLERANCE,
        )?,
    );

    let pooled = random_tensor(&mut rng, &[d]);
    layer(
        "predict_loss_head",
        fd_error(|v: &Tensor| loss(&predict(&params, v)?, 1), &pooled, eps, LAYER_TOLERANCE)?,
    );

    // Full model: finite differences on every parameter tensor, driven
    // through the shared handles inside `params`.
    let batch = tiny_batch(&mut rng, &config);
    let mut worst = 0.0f64;
    for (_, tensor) in params.named_tensors() {
        let err = fd_error(
            |_: &Tensor| {
                let probs = model_forward(&params, &batch, None)?;
                batch_loss(&probs, &batch.labels)
            },
            tensor,
            eps,
            FULL_MODEL_TOLERANCE,
        )?;
        worst = worst.max(err);
    }
    results.push(CheckResult {
        name: "full_model".to_string(),
        max_relative_error: worst,
        tolerance: FULL_MODEL_TOLERANCE,
    });

    Ok(results)
}
