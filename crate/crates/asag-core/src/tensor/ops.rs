//! Tensor operations and their backward rules.
//!
//! Every operation copies into a fresh output buffer (no views). Binary
//! operations broadcast the right operand over the trailing axes of the
//! left one: an extent of 1 stretches, and gradients sum back over
//! stretched axes.

use super::{check_shape_len, Mask, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Left-pad `shape` with 1s to `rank` axes.
fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let bp = pad_shape(b, a.len());
    for (da, db) in a.iter().zip(&bp) {
        if *db != *da && *db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(())
}

/// Expand `b` to `out_shape` by stretching its 1-extents.
fn expand_to<F: Scalar>(b: &[F], b_shape: &[usize], out_shape: &[usize]) -> Vec<F> {
    if b_shape == out_shape {
        return b.to_vec();
    }
    let rank = out_shape.len();
    let bp = pad_shape(b_shape, rank);
    // Stride 0 on stretched axes makes the index map a plain dot product.
    let mut b_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if bp[d] == 1 { 0 } else { acc };
        acc *= bp[d];
    }
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    for _ in 0..numel {
        let bi: usize = coords.iter().zip(&b_strides).map(|(c, s)| c * s).sum();
        out.push(b[bi]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad` (shaped `out_shape`) down to `target_shape`, collapsing
/// stretched and missing leading axes.
fn reduce_to_shape<F: Scalar>(grad: &[F], out_shape: &[usize], target_shape: &[usize]) -> Vec<F> {
    if out_shape == target_shape {
        return grad.to_vec();
    }
    let rank = out_shape.len();
    let tp = pad_shape(target_shape, rank);
    let mut t_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        t_strides[d] = if tp[d] == 1 { 0 } else { acc };
        acc *= tp[d];
    }
    let mut out = vec![F::zero(); target_shape.iter().product()];
    let mut coords = vec![0usize; rank];
    for g in grad {
        let ti: usize = coords.iter().zip(&t_strides).map(|(c, s)| c * s).sum();
        out[ti] = out[ti] + *g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum with a value-canonical term order, so the result does not depend
/// on the order the terms arrive in. Sorts the scratch buffer in place.
fn orderless_sum<F: Scalar>(values: &mut [F]) -> F {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite summands"));
    values.iter().copied().sum()
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_it * b_tj;
            }
        }
    }
    c
}

impl<F: Scalar> Tensor<F> {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidShape {
                op,
                shape: other.to_vec(),
                msg: "expected a rank-2 tensor".into(),
            }),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = matmul_raw(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |_, g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    // dA = dC . B^T
                    let b_data = b.data();
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for t in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * b_data[t * n + j];
                            }
                            da[i * k + t] = s;
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = A^T . dC
                    let a_data = a.data();
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        let a_row = &a_data[i * k..(i + 1) * k];
                        let g_row = &g[i * n..(i + 1) * n];
                        for (t, &a_it) in a_row.iter().enumerate() {
                            let db_row = &mut db[t * n..(t + 1) * n];
                            for (db_tj, &g_ij) in db_row.iter_mut().zip(g_row) {
                                *db_tj = *db_tj + a_it * g_ij;
                            }
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// `matmul` with value-sorted inner summation: the result is invariant
    /// under a joint permutation of `self`'s columns and `rhs`'s rows.
    /// Used where attention outputs must be bit-identical when key/value
    /// positions are reordered.
    pub(crate) fn matmul_orderless(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![F::zero(); m * n];
        let mut terms = vec![F::zero(); k];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    terms[t] = a[i * k + t] * b[t * n + j];
                }
                out[i * n + j] = orderless_sum(&mut terms);
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |_, g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let b_data = b.data();
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for t in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * b_data[t * n + j];
                            }
                            da[i * k + t] = s;
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let a_data = a.data();
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        for t in 0..k {
                            let a_it = a_data[i * k + t];
                            for j in 0..n {
                                db[t * n + j] = db[t * n + j] + a_it * g[i * n + j];
                            }
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    fn binary(
        &self,
        rhs: &Tensor<F>,
        op: &'static str,
        fwd: fn(F, F) -> F,
        // (grad, a_value, b_expanded_value) -> (da, db) contributions
        bwd: fn(F, F, F) -> (F, F),
    ) -> Result<Tensor<F>> {
        check_broadcast(op, self.shape(), rhs.shape())?;
        let b_exp = expand_to(&rhs.data(), rhs.shape(), self.shape());
        let data: Vec<F> = self
            .data()
            .iter()
            .zip(&b_exp)
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let out_shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            data,
            out_shape.clone(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |_, g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                let a_data = a.to_vec();
                let b_exp = expand_to(&b.data(), b.shape(), &out_shape);
                let mut da = vec![F::zero(); g.len()];
                let mut db_full = vec![F::zero(); g.len()];
                for i in 0..g.len() {
                    let (dai, dbi) = bwd(g[i], a_data[i], b_exp[i]);
                    da[i] = dai;
                    db_full[i] = dbi;
                }
                if a.requires_grad() {
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db = reduce_to_shape(&db_full, &out_shape, b.shape());
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, "add", |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, "sub", |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, "mul", |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    fn unary(
        &self,
        fwd: impl Fn(F) -> F,
        // (grad, input_value, output_value) -> input gradient
        bwd: impl Fn(F, F, F) -> F + 'static,
    ) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| fwd(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |out, g, parents| {
                let p = &parents[0];
                if p.requires_grad() {
                    let x = p.data();
                    let dx: Vec<F> = (0..g.len()).map(|i| bwd(g[i], x[i], out[i])).collect();
                    drop(x);
                    p.accumulate_grad(&dx);
                }
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.unary(|x| x.tanh(), |g, _, y| g * (F::one() - y * y))
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary(|x| x.exp(), |g, _, y| g * y)
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            |x| x.max(F::zero()),
            |g, x, _| if x > F::zero() { g } else { F::zero() },
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary(|x| -x, |g, _, _| -g)
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        self.unary(move |x| x * c, move |g, _, _| g * c)
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        self.unary(move |x| x + c, |g, _, _| g)
    }

    pub fn ln(&self) -> Tensor<F> {
        self.unary(|x| x.ln(), |g, x, _| g / x)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        self.unary(|x| x.sqrt(), |g, _, y| g / (F::from_f64(2.0) * y))
    }

    pub fn recip(&self) -> Tensor<F> {
        self.unary(|x| F::one() / x, |g, _, y| -g * y * y)
    }

    /// `max(x, c)`; gradient passes through only where `x > c`.
    pub fn max_scalar(&self, c: F) -> Tensor<F> {
        self.unary(
            move |x| x.max(c),
            move |g, x, _| if x > c { g } else { F::zero() },
        )
    }

    /// Softmax over the last axis with masked positions forced to exactly
    /// zero. Each row is shifted by its unmasked maximum before
    /// exponentiation. `mask` has the scores' shape, or is a single row
    /// shared by all rows.
    ///
    /// Errors on any fully-masked row: a silent uniform fallback would
    /// hide upstream masking bugs.
    pub fn masked_softmax(&self, mask: &Mask) -> Result<Tensor<F>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::InvalidShape {
            op: "masked_softmax",
            shape: shape.to_vec(),
            msg: "scores must have at least one axis".into(),
        })?;
        let shared_row = match mask.shape() {
            s if s == shape => false,
            [m] if *m == n => true,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: shape.to_vec(),
                    rhs: mask.shape().to_vec(),
                })
            }
        };
        let rows = self.numel() / n;
        let scores = self.data();
        let mbits = mask.as_slice();
        let mut out = vec![F::zero(); self.numel()];
        let mut scratch: Vec<F> = Vec::with_capacity(n);
        for r in 0..rows {
            let row = &scores[r * n..(r + 1) * n];
            let mrow = if shared_row {
                mbits
            } else {
                &mbits[r * n..(r + 1) * n]
            };
            let mut max: Option<F> = None;
            for (x, &keep) in row.iter().zip(mrow) {
                if keep && max.map_or(true, |m| *x > m) {
                    max = Some(*x);
                }
            }
            let max = max.ok_or(Error::FullyMaskedRow { row: r })?;
            let orow = &mut out[r * n..(r + 1) * n];
            for ((o, x), &keep) in orow.iter_mut().zip(row).zip(mrow) {
                if keep {
                    *o = (*x - max).exp();
                }
            }
            // Order-invariant normalization: permuting a row's entries must
            // permute its outputs bit-exactly, so the sum is taken over
            // value-sorted terms.
            scratch.clear();
            scratch.extend_from_slice(orow);
            let sum = orderless_sum(&mut scratch);
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        drop(scores);
        let n_axis = n;
        Ok(Tensor::from_op(
            out,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |y, g, parents| {
                let p = &parents[0];
                if !p.requires_grad() {
                    return;
                }
                // Softmax JVP per row; masked entries have y == 0 so their
                // score gradient vanishes without consulting the mask.
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..g.len() / n_axis {
                    let ys = &y[r * n_axis..(r + 1) * n_axis];
                    let gs = &g[r * n_axis..(r + 1) * n_axis];
                    let dot: F = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..n_axis {
                        dx[r * n_axis + j] = ys[j] * (gs[j] - dot);
                    }
                }
                p.accumulate_grad(&dx);
            }),
        ))
    }

    fn reduce(&self, op: &'static str, axis: Option<usize>, mean: bool) -> Result<Tensor<F>> {
        let shape = self.shape().to_vec();
        match axis {
            None => {
                let total: F = self.data().iter().copied().sum();
                let count = F::from_f64(self.numel() as f64);
                let value = if mean { total / count } else { total };
                Ok(Tensor::from_op(
                    vec![value],
                    Vec::new(),
                    vec![self.clone()],
                    Box::new(move |_, g, parents| {
                        let p = &parents[0];
                        if p.requires_grad() {
                            let scale = if mean { g[0] / count } else { g[0] };
                            p.accumulate_grad(&vec![scale; p.numel()]);
                        }
                    }),
                ))
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::InvalidAxis {
                        op,
                        axis: ax,
                        shape,
                    });
                }
                let outer: usize = shape[..ax].iter().product();
                let mid = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                let denom = F::from_f64(mid as f64);
                let data = self.data();
                let mut out = vec![F::zero(); outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            out[o * inner + i] = out[o * inner + i] + data[base + i];
                        }
                    }
                }
                if mean {
                    for v in &mut out {
                        *v = *v / denom;
                    }
                }
                drop(data);
                Ok(Tensor::from_op(
                    out,
                    out_shape,
                    vec![self.clone()],
                    Box::new(move |_, g, parents| {
                        let p = &parents[0];
                        if !p.requires_grad() {
                            return;
                        }
                        let mut dx = vec![F::zero(); p.numel()];
                        for o in 0..outer {
                            for m in 0..mid {
                                let base = (o * mid + m) * inner;
                                for i in 0..inner {
                                    let gv = g[o * inner + i];
                                    dx[base + i] = if mean { gv / denom } else { gv };
                                }
                            }
                        }
                        p.accumulate_grad(&dx);
                    }),
                ))
            }
        }
    }

    /// Sum over one axis, or over everything (`None` gives a scalar).
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor<F>> {
        self.reduce("sum", axis, false)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor<F>> {
        self.reduce("mean", axis, true)
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<F>> {
        check_shape_len("reshape", &self.data(), new_shape)?;
        Ok(Tensor::from_op(
            self.to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            Box::new(|_, g, parents| {
                let p = &parents[0];
                if p.requires_grad() {
                    p.accumulate_grad(g);
                }
            }),
        ))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = self.dims2("transpose")?;
        let data = self.data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                let p = &parents[0];
                if !p.requires_grad() {
                    return;
                }
                let mut dx = vec![F::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                p.accumulate_grad(&dx);
            }),
        ))
    }

    /// Copy the half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<F>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start >= end || end > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape,
                msg: format!("range {start}..{end} invalid for axis {axis}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let width = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let data = self.data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&data[base..base + width * inner]);
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                let p = &parents[0];
                if !p.requires_grad() {
                    return;
                }
                let mut dx = vec![F::zero(); p.numel()];
                for o in 0..outer {
                    let src = o * width * inner;
                    let dst = (o * mid + start) * inner;
                    dx[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                p.accumulate_grad(&dx);
            }),
        ))
    }

    /// Gather rows of a `[V, d]` table; gradients scatter-add back to the
    /// selected rows only.
    pub fn index_rows(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let (v, d) = self.dims2("index_rows")?;
        for &id in ids {
            if id >= v {
                return Err(Error::TokenIdOutOfRange { id, vocab_size: v });
            }
        }
        let data = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        drop(data);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), d],
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                let p = &parents[0];
                if !p.requires_grad() {
                    return;
                }
                let mut dx = vec![F::zero(); p.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dx[id * d + j] = dx[id * d + j] + g[row * d + j];
                    }
                }
                p.accumulate_grad(&dx);
            }),
        ))
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<F: Scalar>(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::InvalidAxis {
            op: "concat",
            axis,
            shape: first.shape().to_vec(),
        });
    }
    let mut total_mid = 0;
    for p in parts {
        if p.shape().len() != rank
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total_mid += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total_mid;

    let mut out = vec![F::zero(); outer * total_mid * inner];
    let mut offset = 0;
    for p in parts {
        let mid = p.shape()[axis];
        let data = p.data();
        for o in 0..outer {
            let src = o * mid * inner;
            let dst = (o * total_mid + offset) * inner;
            out[dst..dst + mid * inner].copy_from_slice(&data[src..src + mid * inner]);
        }
        offset += mid;
    }
    let mids: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(Tensor::from_op(
        out,
        out_shape,
        parts.to_vec(),
        Box::new(move |_, g, parents| {
            let mut offset = 0;
            for (p, &mid) in parents.iter().zip(&mids) {
                if p.requires_grad() {
                    let mut dx = vec![F::zero(); outer * mid * inner];
                    for o in 0..outer {
                        let src = (o * total_mid + offset) * inner;
                        let dst = o * mid * inner;
                        dx[dst..dst + mid * inner].copy_from_slice(&g[src..src + mid * inner]);
                    }
                    p.accumulate_grad(&dx);
                }
                offset += mid;
            }
        }),
    ))
}
