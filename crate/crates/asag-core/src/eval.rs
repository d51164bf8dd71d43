//! Accuracy and AUC matching the evaluation protocol, plus a
//! logistic-regression baseline over surface-overlap features.

use std::collections::HashSet;
use std::path::Path;

use crate::data::{make_batches, read_dataset, tokenize, AnswerPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelParams};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One scored prediction: `score` is P(right), `label` the gold class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredExample {
    pub score: f64,
    pub label: u8,
}

impl ScoredExample {
    pub fn new(score: f64, label: u8) -> Self {
        ScoredExample { score, label }
    }
}

/// Fraction of examples whose thresholded score matches the label.
pub fn accuracy(scored: &[ScoredExample], threshold: f64) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("accuracy of an empty list".into()));
    }
    let correct = scored
        .iter()
        .filter(|e| (e.score >= threshold) == (e.label == 1))
        .count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney rank statistic, ties
/// credited one half. Computed from average ranks in O(n log n); agrees
/// exactly with exhaustive pair counting.
pub fn auc(scored: &[ScoredExample]) -> Result<f64> {
    let positives = scored.iter().filter(|e| e.label == 1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].score.total_cmp(&scored[b].score));

    // average rank over each tie group; ranks are 1-based
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scored[order[j]].score == scored[order[i]].score {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if scored[idx].label == 1 {
                positive_rank_sum += rank;
            }
        }
        i = j;
    }
    let np = positives as f64;
    let nn = negatives as f64;
    Ok((positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Evaluation summary for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub n: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub positive_fraction: f64,
}

impl MetricsRecord {
    /// Tab-separated machine-readable line: dataset, n, accuracy, auc.
    pub fn machine_line(&self, dataset: &str) -> String {
        format!(
            "{dataset}\t{}\t{:.6}\t{:.6}",
            self.n, self.accuracy, self.auc
        )
    }
}

pub fn metrics_from_scores(scored: &[ScoredExample]) -> Result<MetricsRecord> {
    let positives = scored.iter().filter(|e| e.label == 1).count();
    Ok(MetricsRecord {
        n: scored.len(),
        accuracy: accuracy(scored, 0.5)?,
        auc: auc(scored)?,
        positive_fraction: positives as f64 / scored.len() as f64,
    })
}

/// Run the model over every pair in inference mode and collect P(right)
/// scores in dataset order.
pub fn score_pairs<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    pairs: &[AnswerPair],
) -> Result<Vec<ScoredExample>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset is empty".into()));
    }
    let mut throwaway = ChaCha8Rng::seed_from_u64(0); // unused: no shuffling
    let batches = make_batches(
        pairs,
        vocab,
        params.config.max_len,
        32,
        &mut throwaway,
        false,
    );
    let mut scored = Vec::with_capacity(pairs.len());
    for batch in &batches {
        let probs = model_forward(params, batch, None)?;
        let v = probs.data();
        for (b, &label) in batch.labels.iter().enumerate() {
            scored.push(ScoredExample::new(v[b * 2 + 1].to_f64_lossy(), label));
        }
    }
    Ok(scored)
}

pub fn evaluate_pairs<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    pairs: &[AnswerPair],
) -> Result<MetricsRecord> {
    metrics_from_scores(&score_pairs(params, vocab, pairs)?)
}

/// Load a checkpoint (plus the vocabulary stored next to it) and evaluate
/// on a dataset file.
pub fn evaluate_model(checkpoint: &Path, dataset: &Path) -> Result<MetricsRecord> {
    let params: ModelParams<f64> = crate::train::load_checkpoint(checkpoint)?;
    let vocab = crate::train::load_vocab_sidecar(checkpoint)?;
    let pairs = read_dataset(dataset)?;
    evaluate_pairs(&params, &vocab, &pairs)
}

// ---------------------------------------------------------------------
// Logistic-regression overlap baseline
// ---------------------------------------------------------------------

/// Surface features of one answer pair: token-overlap (Jaccard) ratio,
/// length ratio, unigram precision, unigram recall, and a constant bias.
pub fn overlap_features(pair: &AnswerPair) -> [f64; 5] {
    let student = tokenize(&pair.student_text);
    let reference = tokenize(&pair.reference_text);
    let s_set: HashSet<&String> = student.iter().collect();
    let r_set: HashSet<&String> = reference.iter().collect();
    let intersection = s_set.intersection(&r_set).count() as f64;
    let union = s_set.union(&r_set).count() as f64;
    let jaccard = if union > 0.0 { intersection / union } else { 0.0 };
    let (lo, hi) = (
        student.len().min(reference.len()) as f64,
        student.len().max(reference.len()) as f64,
    );
    let length_ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    let precision = if s_set.is_empty() {
        0.0
    } else {
        intersection / s_set.len() as f64
    };
    let recall = if r_set.is_empty() {
        0.0
    } else {
        intersection / r_set.len() as f64
    };
    [jaccard, length_ratio, precision, recall, 1.0]
}

/// Logistic regression over [`overlap_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct LrBaselineModel {
    pub weights: [f64; 5],
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Full-batch gradient descent on the logistic loss until the gradient
/// norm drops below 1e-6 or 10,000 iterations pass.
pub fn lr_baseline_fit(train: &[AnswerPair]) -> Result<LrBaselineModel> {
    if train.is_empty() {
        return Err(Error::EmptyInput("LR baseline needs training data".into()));
    }
    let features: Vec<[f64; 5]> = train.iter().map(overlap_features).collect();
    let labels: Vec<f64> = train.iter().map(|p| p.label as f64).collect();
    let n = features.len() as f64;
    let mut weights = [0.0f64; 5];
    let step = 1.0;
    for _ in 0..10_000 {
        let mut grad = [0.0f64; 5];
        for (x, y) in features.iter().zip(&labels) {
            let z: f64 = x.iter().zip(&weights).map(|(a, w)| a * w).sum();
            let err = sigmoid(z) - y;
            for (g, a) in grad.iter_mut().zip(x) {
                *g += err * a / n;
            }
        }
        let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-6 {
            break;
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= step * g;
        }
    }
    Ok(LrBaselineModel { weights })
}

pub fn lr_baseline_predict(model: &LrBaselineModel, pair: &AnswerPair) -> f64 {
    let x = overlap_features(pair);
    sigmoid(x.iter().zip(&model.weights).map(|(a, w)| a * w).sum())
}

pub fn lr_baseline_score(model: &LrBaselineModel, pairs: &[AnswerPair]) -> Vec<ScoredExample> {
    pairs
        .iter()
        .map(|p| ScoredExample::new(lr_baseline_predict(model, p), p.label))
        .collect()
}
