//! Multiway attention: a parameter-free self-attention block per sequence
//! plus four cross-attention mechanisms scoring student positions against
//! the reference sequence.
//!
//! The score functions, with `p` rows from the reference and `q` rows from
//! the student sequence:
//!
//! * additive:       `e_ij = v_a . tanh(W1 p_j + W2 q_i)`
//! * subtractive:    `e_ij = v_s . tanh(W_s (p_j - q_i))`
//! * multiplicative: `e_ij = v_m . tanh(W_m (p_j . q_i))` (elementwise product)
//! * dot-product:    `e_ij = (p_j . q_i) / sqrt(d)` (parameter-free)
//!
//! Every mechanism turns its scores into a masked softmax over reference
//! positions and emits convex combinations of reference rows, so each
//! output row lies in the per-coordinate convex hull of the unmasked
//! reference rows. Outputs are bit-identical under any permutation of the
//! reference positions (together with their mask).

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::glorot_uniform;
use crate::scalar::Scalar;
use crate::tensor::{concat, Mask, Tensor};

/// Weights of the three parameterized cross-attention mechanisms. The
/// dot-product branch has no parameters. The mechanisms share nothing.
pub struct MultiwayParams<F: Scalar = f64> {
    pub additive_w1: Tensor<F>, // [d, d], reference side
    pub additive_w2: Tensor<F>, // [d, d], student side
    pub additive_v: Tensor<F>,  // [d, 1]
    pub subtractive_w: Tensor<F>,
    pub subtractive_v: Tensor<F>,
    pub multiplicative_w: Tensor<F>,
    pub multiplicative_v: Tensor<F>,
    pub d: usize,
}

impl<F: Scalar> MultiwayParams<F> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Result<Self> {
        Ok(MultiwayParams {
            additive_w1: glorot_uniform(rng, d, d)?,
            additive_w2: glorot_uniform(rng, d, d)?,
            additive_v: glorot_uniform(rng, d, 1)?,
            subtractive_w: glorot_uniform(rng, d, d)?,
            subtractive_v: glorot_uniform(rng, d, 1)?,
            multiplicative_w: glorot_uniform(rng, d, d)?,
            multiplicative_v: glorot_uniform(rng, d, 1)?,
            d,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossKind {
    Additive,
    Subtractive,
    Multiplicative,
    Dot,
}

impl CrossKind {
    pub const ALL: [CrossKind; 4] = [
        CrossKind::Additive,
        CrossKind::Subtractive,
        CrossKind::Multiplicative,
        CrossKind::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CrossKind::Additive => "additive",
            CrossKind::Subtractive => "subtractive",
            CrossKind::Multiplicative => "multiplicative",
            CrossKind::Dot => "dot",
        }
    }
}

/// Everything the multiway layer produces for one answer pair, all
/// `[L, d]` and indexed by position; rows at masked positions are zero.
pub struct MultiwayOutput<F: Scalar = f64> {
    pub self_student: Tensor<F>,
    pub self_reference: Tensor<F>,
    pub cross_additive: Tensor<F>,
    pub cross_subtractive: Tensor<F>,
    pub cross_multiplicative: Tensor<F>,
    pub cross_dot: Tensor<F>,
}

impl<F: Scalar> MultiwayOutput<F> {
    pub fn cross(&self, kind: CrossKind) -> &Tensor<F> {
        match kind {
            CrossKind::Additive => &self.cross_additive,
            CrossKind::Subtractive => &self.cross_subtractive,
            CrossKind::Multiplicative => &self.cross_multiplicative,
            CrossKind::Dot => &self.cross_dot,
        }
    }
}

/// Parameter-free self-attention: `s_i = sum_j alpha_ij h_j` with
/// `alpha_i = softmax_j((h_i . h_j)/sqrt(d))` over unmasked positions.
/// Also returns the `[L, L]` weight matrix.
pub fn self_attention_block_with_weights<F: Scalar>(
    h: &Tensor<F>,
    mask: &Mask,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = h.shape()[1];
    let scores = h
        .matmul(&h.transpose()?)?
        .scale(F::from_f64(1.0 / (d as f64).sqrt()));
    let weights = scores.masked_softmax(mask)?;
    let out = weights.matmul_orderless(h)?;
    Ok((out, weights))
}

pub fn self_attention_block<F: Scalar>(h: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
    self_attention_block_with_weights(h, mask).map(|(out, _)| out)
}

/// Stack `times` copies of `t` on top of each other.
fn tile_rows<F: Scalar>(t: &Tensor<F>, times: usize) -> Result<Tensor<F>> {
    concat(&vec![t.clone(); times], 0)
}

/// Repeat each row of `t` `times` times in place.
fn repeat_rows<F: Scalar>(t: &Tensor<F>, times: usize) -> Result<Tensor<F>> {
    let ids: Vec<usize> = (0..t.shape()[0])
        .flat_map(|i| std::iter::repeat(i).take(times))
        .collect();
    t.index_rows(&ids)
}

/// Scores of one mechanism for every (student, reference) position pair.
/// All pairs are laid out as one `[Lq * Lp, d]` matrix (reference index
/// fastest) so each mechanism is a handful of large operations.
fn cross_scores<F: Scalar>(
    kind: CrossKind,
    params: &MultiwayParams<F>,
    h_q: &Tensor<F>,
    h_p: &Tensor<F>,
) -> Result<Tensor<F>> {
    let lq = h_q.shape()[0];
    let lp = h_p.shape()[0];
    match kind {
        CrossKind::Dot => {
            let scale = F::from_f64(1.0 / (params.d as f64).sqrt());
            Ok(h_q.matmul(&h_p.transpose()?)?.scale(scale))
        }
        CrossKind::Additive => {
            // tanh(W1 p_j + W2 q_i) . v over all pairs at once
            let p_proj = tile_rows(&h_p.matmul(&params.additive_w1)?, lq)?;
            let q_proj = repeat_rows(&h_q.matmul(&params.additive_w2)?, lp)?;
            p_proj
                .add(&q_proj)?
                .tanh()
                .matmul(&params.additive_v)?
                .reshape(&[lq, lp])
        }
        CrossKind::Subtractive => {
            // W (p_j - q_i) = W p_j - W q_i, so project once per sequence
            let p_proj = tile_rows(&h_p.matmul(&params.subtractive_w)?, lq)?;
            let q_proj = repeat_rows(&h_q.matmul(&params.subtractive_w)?, lp)?;
            p_proj
                .sub(&q_proj)?
                .tanh()
                .matmul(&params.subtractive_v)?
                .reshape(&[lq, lp])
        }
        CrossKind::Multiplicative => {
            // the elementwise product does not distribute over W, so the
            // pairwise products are materialized before projecting
            let p_all = tile_rows(h_p, lq)?;
            let q_all = repeat_rows(h_q, lp)?;
            p_all
                .mul(&q_all)?
                .matmul(&params.multiplicative_w)?
                .tanh()
                .matmul(&params.multiplicative_v)?
                .reshape(&[lq, lp])
        }
    }
}

/// One cross-attention mechanism from student positions onto the
/// reference sequence; returns the `[Lq, d]` output together with the
/// `[Lq, Lp]` attention weights.
pub fn cross_attention_with_weights<F: Scalar>(
    kind: CrossKind,
    params: &MultiwayParams<F>,
    h_q: &Tensor<F>,
    h_p: &Tensor<F>,
    p_mask: &Mask,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let scores = cross_scores(kind, params, h_q, h_p)?;
    let weights = scores.masked_softmax(p_mask)?;
    let out = weights.matmul_orderless(h_p)?;
    Ok((out, weights))
}

pub fn cross_attention<F: Scalar>(
    kind: CrossKind,
    params: &MultiwayParams<F>,
    h_q: &Tensor<F>,
    h_p: &Tensor<F>,
    p_mask: &Mask,
) -> Result<Tensor<F>> {
    cross_attention_with_weights(kind, params, h_q, h_p, p_mask).map(|(out, _)| out)
}

/// Self-attention over both sequences plus all four cross mechanisms.
/// Rows at masked positions of the owning sequence are zeroed (cross
/// outputs are indexed by student positions).
pub fn multiway_forward<F: Scalar>(
    params: &MultiwayParams<F>,
    h_q: &Tensor<F>,
    h_p: &Tensor<F>,
    q_mask: &Mask,
    p_mask: &Mask,
) -> Result<MultiwayOutput<F>> {
    let q_rows = q_mask.as_column_tensor();
    let p_rows = p_mask.as_column_tensor();
    let self_student = self_attention_block(h_q, q_mask)?.mul(&q_rows)?;
    let self_reference = self_attention_block(h_p, p_mask)?.mul(&p_rows)?;
    let mut crossed = Vec::with_capacity(4);
    for kind in CrossKind::ALL {
        crossed.push(cross_attention(kind, params, h_q, h_p, p_mask)?.mul(&q_rows)?);
    }
    let [a, s, m, d2] = crossed.try_into().map_err(|_| unreachable!())?;
    Ok(MultiwayOutput {
        self_student,
        self_reference,
        cross_additive: a,
        cross_subtractive: s,
        cross_multiplicative: m,
        cross_dot: d2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::param(data, shape).unwrap()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "index {i}: {a} vs {e}");
        }
    }

    // ---- independent loop oracles -------------------------------------

    fn mat_vec_oracle(w: &[f64], x: &[f64], d: usize) -> Vec<f64> {
        // x row-vector times [d, d] weight
        (0..d)
            .map(|j| (0..d).map(|t| x[t] * w[t * d + j]).sum())
            .collect()
    }

    fn softmax_oracle(scores: &[f64], mask: &[bool]) -> Vec<f64> {
        let max = scores
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores
            .iter()
            .zip(mask)
            .map(|(s, &m)| if m { (s - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    fn cross_oracle(
        kind: CrossKind,
        params: &MultiwayParams,
        h_q: &[Vec<f64>],
        h_p: &[Vec<f64>],
        mask: &[bool],
        d: usize,
    ) -> Vec<Vec<f64>> {
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let mut out = Vec::new();
        for q in h_q {
            let scores: Vec<f64> = h_p
                .iter()
                .map(|p| match kind {
                    CrossKind::Dot => dot(p, q) / (d as f64).sqrt(),
                    CrossKind::Additive => {
                        let wp = mat_vec_oracle(&params.additive_w1.to_vec(), p, d);
                        let wq = mat_vec_oracle(&params.additive_w2.to_vec(), q, d);
                        let t: Vec<f64> =
                            wp.iter().zip(&wq).map(|(a, b)| (a + b).tanh()).collect();
                        dot(&t, &params.additive_v.to_vec())
                    }
                    CrossKind::Subtractive => {
                        let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
                        let t: Vec<f64> =
                            mat_vec_oracle(&params.subtractive_w.to_vec(), &diff, d)
                                .iter()
                                .map(|v| v.tanh())
                                .collect();
                        dot(&t, &params.subtractive_v.to_vec())
                    }
                    CrossKind::Multiplicative => {
                        let prod: Vec<f64> = p.iter().zip(q).map(|(a, b)| a * b).collect();
                        let t: Vec<f64> =
                            mat_vec_oracle(&params.multiplicative_w.to_vec(), &prod, d)
                                .iter()
                                .map(|v| v.tanh())
                                .collect();
                        dot(&t, &params.multiplicative_v.to_vec())
                    }
                })
                .collect();
            let alpha = softmax_oracle(&scores, mask);
            let mut row = vec![0.0; d];
            for (a, p) in alpha.iter().zip(h_p) {
                for (o, v) in row.iter_mut().zip(p) {
                    *o += a * v;
                }
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn self_attention_single_position_is_identity() {
        let mut r = rng(50);
        let h = random_tensor(&mut r, &[1, 4]);
        let s = self_attention_block(&h, &Mask::all_true(1)).unwrap();
        assert_eq!(s.to_vec(), h.to_vec());
    }

    #[test]
    fn self_attention_identical_rows_fixed_point() {
        let row = [0.3, -0.7, 1.1];
        let h = Tensor::from_vec([row, row, row].concat(), &[3, 3]).unwrap();
        let s = self_attention_block(&h, &Mask::all_true(3)).unwrap();
        for i in 0..3 {
            assert_close(&s.to_vec()[i * 3..(i + 1) * 3], &row, 1e-12);
        }
    }

    #[test]
    fn self_attention_matches_loop_oracle() {
        let mut r = rng(51);
        let d = 3;
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let h = Tensor::from_vec(rows.concat(), &[3, d]).unwrap();
        let (s, w) = self_attention_block_with_weights(&h, &Mask::all_true(3)).unwrap();
        for i in 0..3 {
            let scores: Vec<f64> = rows
                .iter()
                .map(|hj| {
                    rows[i]
                        .iter()
                        .zip(hj)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let alpha = softmax_oracle(&scores, &[true; 3]);
            assert_close(&w.to_vec()[i * 3..(i + 1) * 3], &alpha, 1e-12);
            let mut expect = vec![0.0; d];
            for (a, hj) in alpha.iter().zip(&rows) {
                for (o, v) in expect.iter_mut().zip(hj) {
                    *o += a * v;
                }
            }
            assert_close(&s.to_vec()[i * d..(i + 1) * d], &expect, 1e-12);
        }
    }

    #[test]
    fn self_attention_fully_masked_errors() {
        let h: Tensor = Tensor::zeros(&[2, 2]);
        assert!(self_attention_block(&h, &Mask::prefix(0, 2)).is_err());
    }

    #[test]
    fn cross_single_reference_row_copies_it() {
        let mut r = rng(52);
        let d = 4;
        let params = MultiwayParams::init(&mut r, d).unwrap();
        let h_q = random_tensor(&mut r, &[3, d]);
        let h_p = random_tensor(&mut r, &[1, d]);
        for kind in CrossKind::ALL {
            let out = cross_attention(kind, &params, &h_q, &h_p, &Mask::all_true(1)).unwrap();
            for i in 0..3 {
                assert_eq!(
                    &out.to_vec()[i * d..(i + 1) * d],
                    &h_p.to_vec()[..],
                    "{}",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn dot_scores_concentrate_on_aligned_key() {
        let d = 4;
        let mut r = rng(53);
        let params = MultiwayParams::init(&mut r, d).unwrap();
        // student row aligned with reference row 0, orthogonal to row 1;
        // pre-softmax score gap is 3.2 after 1/sqrt(d) scaling
        let h_q = Tensor::from_vec(vec![2.0, 0.0, 0.0, 0.0], &[1, d]).unwrap();
        let h_p =
            Tensor::from_vec(vec![3.2, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[2, d]).unwrap();
        let (_, w) =
            cross_attention_with_weights(CrossKind::Dot, &params, &h_q, &h_p, &Mask::all_true(2))
                .unwrap();
        let weights = w.to_vec();
        // direct softmax of the two scores
        let gap = 2.0 * 3.2 / (d as f64).sqrt();
        assert!(gap >= 3.0);
        let expect = gap.exp() / (gap.exp() + 1.0);
        assert!((weights[0] - expect).abs() <= 1e-12);
        assert!(weights[0] >= 0.95, "weight {}", weights[0]);
    }

    #[test]
    fn every_kind_matches_loop_oracle() {
        let mut r = rng(54);
        let d = 3;
        let params = MultiwayParams::init(&mut r, d).unwrap();
        let q_rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let p_rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let mask_bits = [true, true, false];
        let h_q = Tensor::from_vec(q_rows.concat(), &[3, d]).unwrap();
        let h_p = Tensor::from_vec(p_rows.concat(), &[3, d]).unwrap();
        let mask = Mask::new(mask_bits.to_vec(), &[3]).unwrap();
        for kind in CrossKind::ALL {
            let out = cross_attention(kind, &params, &h_q, &h_p, &mask).unwrap();
            let oracle = cross_oracle(kind, &params, &q_rows, &p_rows, &mask_bits, d);
            for i in 0..3 {
                assert_close(&out.to_vec()[i * d..(i + 1) * d], &oracle[i], 1e-12);
            }
        }
    }

    #[test]
    fn subtractive_identical_rows_give_uniform_weights() {
        let mut r = rng(55);
        let d = 4;
        let params = MultiwayParams::init(&mut r, d).unwrap();
        let row: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h_q = Tensor::from_vec(row.clone(), &[1, d]).unwrap();
        let h_p = Tensor::from_vec([row.clone(), row.clone(), row].concat(), &[3, d]).unwrap();
        let (_, w) = cross_attention_with_weights(
            CrossKind::Subtractive,
            &params,
            &h_q,
            &h_p,
            &Mask::all_true(3),
        )
        .unwrap();
        assert_close(&w.to_vec(), &[1.0 / 3.0; 3], 1e-12);
    }

    #[test]
    fn cross_weights_are_distributions_and_outputs_in_hull() {
        let mut r = rng(56);
        let d = 5;
        let params = MultiwayParams::init(&mut r, d).unwrap();
        for _ in 0..20 {
            let lq = r.gen_range(1..5);
            let lp = r.gen_range(1..5);
            let h_q = random_tensor(&mut r, &[lq, d]);
            let h_p = random_tensor(&mut r, &[lp, d]);
            let valid = r.gen_range(1..=lp);
            let mask = Mask::prefix(valid, lp);
            for kind in CrossKind::ALL {
                let (out, w) =
                    cross_attention_with_weights(kind, &params, &h_q, &h_p, &mask).unwrap();
                let wv = w.to_vec();
                for i in 0..lq {
                    let row = &wv[i * lp..(i + 1) * lp];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                    for (j, v) in row.iter().enumerate() {
                        assert!(*v >= 0.0);
                        if j >= valid {
                            assert_eq!(*v, 0.0);
                        }
                    }
                }
                // convex hull of unmasked reference rows, per coordinate
                let pv = h_p.to_vec();
                for c in 0..d {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for j in 0..valid {
                        lo = lo.min(pv[j * d + c]);
                        hi = hi.max(pv[j * d + c]);
                    }
                    for i in 0..lq {
                        let v = out.to_vec()[i * d + c];
                        assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} not in [{lo},{hi}]");
                    }
                }
            }
        }
    }

    #[test]
    fn reference_permutation_leaves_outputs_bit_identical() {
        let mut r = rng(57);
        let d = 4;
        let lp = 5;
        let params = MultiwayParams::init(&mut r, d).unwrap();
        let h_q = random_tensor(&mut r, &[3, d]);
        let p_rows: Vec<Vec<f64>> = (0..lp)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let bits = [true, true, false, true, false];
        let perm = [3usize, 0, 4, 2, 1];
        let h_p = Tensor::from_vec(p_rows.concat(), &[lp, d]).unwrap();
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&j| p_rows[j].clone()).collect();
        let permuted_bits: Vec<bool> = perm.iter().map(|&j| bits[j]).collect();
        let h_p2 = Tensor::from_vec(permuted_rows.concat(), &[lp, d]).unwrap();
        for kind in CrossKind::ALL {
            let a = cross_attention(
                kind,
                &params,
                &h_q,
                &h_p,
                &Mask::new(bits.to_vec(), &[lp]).unwrap(),
            )
            .unwrap();
            let b = cross_attention(
                kind,
                &params,
                &h_q,
                &h_p2,
                &Mask::new(permuted_bits.clone(), &[lp]).unwrap(),
            )
            .unwrap();
            assert_eq!(a.to_vec(), b.to_vec(), "{}", kind.name());
        }
    }

    #[test]
    fn dot_mechanism_closed_form_at_d1() {
        let mut r = rng(58);
        let params = MultiwayParams::init(&mut r, 1).unwrap();
        let h_q = Tensor::from_vec(vec![1.0], &[1, 1]).unwrap();
        let xs = [0.3, -1.2, 0.9];
        let h_p = Tensor::from_vec(xs.to_vec(), &[3, 1]).unwrap();
        let (_, w) =
            cross_attention_with_weights(CrossKind::Dot, &params, &h_q, &h_p, &Mask::all_true(3))
                .unwrap();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / total).collect();
        assert_close(&w.to_vec(), &expect, 1e-12);
    }

    #[test]
    fn multiway_forward_shapes_and_masked_rows() {
        let mut r = rng(59);
        let (l, d) = (4, 6);
        let params = MultiwayParams::init(&mut r, d).unwrap();
        let h_q = random_tensor(&mut r, &[l, d]);
        let h_p = random_tensor(&mut r, &[l, d]);
        let q_mask = Mask::prefix(2, l);
        let p_mask = Mask::prefix(3, l);
        let out = multiway_forward(&params, &h_q, &h_p, &q_mask, &p_mask).unwrap();
        let six = [
            &out.self_student,
            &out.self_reference,
            &out.cross_additive,
            &out.cross_subtractive,
            &out.cross_multiplicative,
            &out.cross_dot,
        ];
        for t in six {
            assert_eq!(t.shape(), &[l, d]);
        }
        for t in [&out.self_student, &out.cross_dot, &out.cross_additive] {
            assert_eq!(&t.to_vec()[2 * d..], &vec![0.0; 2 * d][..]);
        }
        assert_eq!(&out.self_reference.to_vec()[3 * d..], &vec![0.0; d][..]);
    }

    #[test]
    fn multiway_forward_swap_symmetry() {
        let mut r = rng(60);
        let (l, d) = (3, 4);
        let params = MultiwayParams::init(&mut r, d).unwrap();
        let h_q = random_tensor(&mut r, &[l, d]);
        let h_p = random_tensor(&mut r, &[l, d]);
        let mask = Mask::all_true(l);
        let fwd = multiway_forward(&params, &h_q, &h_p, &mask, &mask).unwrap();
        let swapped = multiway_forward(&params, &h_p, &h_q, &mask, &mask).unwrap();
        assert_eq!(
            swapped.self_student.to_vec(),
            fwd.self_reference.to_vec()
        );
        assert_ne!(swapped.cross_dot.to_vec(), fwd.cross_dot.to_vec());
    }

    #[test]
    fn multiway_forward_passes_grad_check() {
        let mut r = rng(61);
        let (l, d) = (3, 4);
        let params = MultiwayParams::init(&mut r, d).unwrap();
        let h_p = random_tensor(&mut r, &[l, d]);
        let q_mask = Mask::prefix(2, l);
        let p_mask = Mask::prefix(3, l);
        let h_q = random_tensor(&mut r, &[l, d]);

        let readout = |mw: MultiwayOutput| -> Result<Tensor> {
            concat(
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
        };

        let err = grad_check(
            |v: &Tensor| readout(multiway_forward(&params, v, &h_p, &q_mask, &p_mask)?),
            &h_q,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-5, "wrt student encoding: {err}");

        let err = grad_check(
            |v: &Tensor| readout(multiway_forward(&params, &h_q, v, &q_mask, &p_mask)?),
            &h_p,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-5, "wrt reference encoding: {err}");

        for (name, tensor) in [
            ("additive_w1", &params.additive_w1),
            ("additive_v", &params.additive_v),
            ("subtractive_w", &params.subtractive_w),
            ("multiplicative_w", &params.multiplicative_w),
        ] {
            let err = grad_check(
                |w: &Tensor| {
                    let p = MultiwayParams {
                        additive_w1: if name == "additive_w1" {
                            w.clone()
                        } else {
                            params.additive_w1.clone()
                        },
                        additive_w2: params.additive_w2.clone(),
                        additive_v: if name == "additive_v" {
                            w.clone()
                        } else {
                            params.additive_v.clone()
                        },
                        subtractive_w: if name == "subtractive_w" {
                            w.clone()
                        } else {
                            params.subtractive_w.clone()
                        },
                        subtractive_v: params.subtractive_v.clone(),
                        multiplicative_w: if name == "multiplicative_w" {
                            w.clone()
                        } else {
                            params.multiplicative_w.clone()
                        },
                        multiplicative_v: params.multiplicative_v.clone(),
                        d,
                    };
                    readout(multiway_forward(&p, &h_q, &h_p, &q_mask, &p_mask)?)
                },
                tensor,
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-5, "wrt {name}: {err}");
        }
    }
}
