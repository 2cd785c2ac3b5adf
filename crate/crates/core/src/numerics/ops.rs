//! Forward and backward passes for the layer set used by the models:
//! linear, ReLU, softmax, weighted cross-entropy, embedding lookup and
//! scaled dot-product attention. Backward functions accumulate parameter
//! gradients into caller-provided buffers and return the input gradient.

use crate::error::{Error, Result};
use crate::numerics::tensor::{cst, Scalar, Tensor};

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    if w.dims().len() != 2 {
        return Err(Error::Shape(format!("weight must be 2-D, got {:?}", w.dims())));
    }
    let (c_out, c_in) = (w.dims()[0], w.dims()[1]);
    if x.last_dim() != c_in {
        return Err(Error::Shape(format!(
            "input width {} does not match weight {:?}",
            x.last_dim(),
            w.dims()
        )));
    }
    if b.dims() != [c_out] {
        return Err(Error::Shape(format!("bias {:?} does not match weight {:?}", b.dims(), w.dims())));
    }
    Ok((c_out, c_in))
}

/// `out[..., k] = Σ_j w[k, j] · x[..., j] + b[k]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_out, _) = check_linear(x, w, b)?;
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = c_out;
    let mut out = Tensor::zeros(&dims);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for k in 0..c_out {
            or[k] = dot(w.row(k), xr) + b.data()[k];
        }
    }
    Ok(out)
}

/// Backward of [`linear_forward`]: accumulates into `dw`/`db`, returns `dx`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Tensor<T> {
    let (c_out, c_in) = (w.dims()[0], w.dims()[1]);
    debug_assert_eq!(dy.last_dim(), c_out);
    let mut dx = Tensor::zeros(x.dims());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for k in 0..c_out {
            let g = dyr[k];
            if g == T::zero() {
                continue;
            }
            axpy(g, w.row(k), dxr);
            axpy(g, xr, &mut dw.data_mut()[k * c_in..(k + 1) * c_in]);
            db.data_mut()[k] += g;
        }
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// Gradient of ReLU given the pre-activation input.
pub fn relu_backward<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// Softmax over the last dimension.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Weighted cross-entropy of a single cell. Writes `scale · ∂loss/∂logits`
/// into `grad` and returns the unscaled loss `w[t] · (−log softmax(z)[t])`.
#[inline]
pub fn weighted_ce_cell<T: Scalar>(logits: &[T], target: usize, weights: &[T], scale: T, grad: &mut [T]) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - m).exp();
        s += *g;
    }
    let log_s = s.ln();
    let wt = weights[target];
    let loss = wt * (log_s - (logits[target] - m));
    for (k, g) in grad.iter_mut().enumerate() {
        let p = *g / s;
        let ind = if k == target { T::one() } else { T::zero() };
        *g = scale * wt * (p - ind);
    }
    loss
}

/// Class-weighted softmax cross-entropy over the last dimension, averaged
/// over all cells (`loss = mean_c w[t_c] · −log p_c[t_c]`). Returns the loss
/// and its gradient with respect to `logits`.
pub fn softmax_ce_weighted<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    class_weights: &[T],
) -> Result<(T, Tensor<T>)> {
    let k = logits.last_dim();
    let cells = logits.rows();
    if targets.len() != cells || class_weights.len() != k {
        return Err(Error::Shape(format!(
            "cross-entropy: {cells} cells x {k} classes vs {} targets, {} weights",
            targets.len(),
            class_weights.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Shape(format!("target class {t} out of range for {k} classes")));
    }
    let mut grad = Tensor::zeros(logits.dims());
    if cells == 0 {
        return Ok((T::zero(), grad));
    }
    let scale = T::one() / cst::<T>(cells as f64);
    let mut total = T::zero();
    for c in 0..cells {
        let g = &mut grad.data_mut()[c * k..(c + 1) * k];
        total += weighted_ce_cell(logits.row(c), targets[c], class_weights, scale, g);
    }
    Ok((total * scale, grad))
}

/// Gathers rows of `table` (`[vocab, width]`) for each id.
pub fn embedding_forward<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let width = table.last_dim();
    let vocab = table.rows();
    let mut out = Tensor::zeros(&[ids.len(), width]);
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Shape(format!("embedding id {id} >= table size {vocab}")));
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatters `dy` rows into the table gradient.
pub fn embedding_backward<T: Scalar>(ids: &[usize], dy: &Tensor<T>, dtable: &mut Tensor<T>) {
    let width = dtable.last_dim();
    for (r, &id) in ids.iter().enumerate() {
        let g = dy.row(r);
        axpy(T::one(), g, &mut dtable.data_mut()[id * width..(id + 1) * width]);
    }
}

/// Single-head scaled dot-product attention over `[N, d]` inputs, with an
/// optional additive `[N, N]` logit bias. Returns the output and the
/// attention probabilities `[N, N]`.
pub fn sdpa_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], bias: Option<&[T]>, n: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / cst::<T>(d as f64).sqrt();
    let mut probs = vec![T::zero(); n * n];
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let pi = &mut probs[i * n..(i + 1) * n];
        for j in 0..n {
            pi[j] = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
        if let Some(b) = bias {
            for (p, &bj) in pi.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *p += bj;
            }
        }
        softmax_in_place(pi);
        let oi = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            axpy(pi[j], &v[j * d..(j + 1) * d], oi);
        }
    }
    (out, probs)
}

/// Backward of [`sdpa_forward`]; returns `(dq, dk, dv, dlogits)`, where
/// `dlogits` is also the gradient of the bias.
pub fn sdpa_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / cst::<T>(d as f64).sqrt();
    let mut dlogits = vec![T::zero(); n * n];
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n];
    for i in 0..n {
        let pi = &probs[i * n..(i + 1) * n];
        let doi = &dout[i * d..(i + 1) * d];
        for j in 0..n {
            dp[j] = dot(doi, &v[j * d..(j + 1) * d]);
            axpy(pi[j], doi, &mut dv[j * d..(j + 1) * d]);
        }
        let inner = dot(pi, &dp);
        for j in 0..n {
            let dl = pi[j] * (dp[j] - inner);
            dlogits[i * n + j] = dl;
            let ds = dl * scale;
            if ds == T::zero() {
                continue;
            }
            axpy(ds, &k[j * d..(j + 1) * d], &mut dq[i * d..(i + 1) * d]);
            axpy(ds, &q[i * d..(i + 1) * d], &mut dk[j * d..(j + 1) * d]);
        }
    }
    (dq, dk, dv, dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SplitMix64;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity() {
        let y = linear_forward(&t(&[2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_case() {
        let y = linear_forward(&t(&[2], &[1.0, 1.0]), &t(&[1, 2], &[2.0, 3.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let x = Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[2, 4], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[2], 1.0, &mut rng);
        let y = linear_forward(&x, &w, &b).unwrap();
        for r in 0..3 {
            for k in 0..2 {
                let mut acc = 0.0f32;
                for j in 0..4 {
                    acc += w.data()[k * 4 + j] * x.data()[r * 4 + j];
                }
                acc += b.data()[k];
                assert_eq!(y.data()[r * 2 + k], acc);
            }
        }
    }

    #[test]
    fn linear_dim_mismatch_is_error() {
        let r = linear_forward(&t(&[3], &[1.0, 1.0, 1.0]), &t(&[1, 2], &[2.0, 3.0]), &t(&[1], &[1.0]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn ce_uniform_is_ln2() {
        let (l, _) = softmax_ce_weighted(&t(&[1, 2], &[0.0, 0.0]), &[1], &[1.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_class_weighted() {
        let (l, _) = softmax_ce_weighted(&t(&[1, 2], &[0.0, 0.0]), &[1], &[1.0, 10.0]).unwrap();
        assert!((l - 10.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let (l32, _) = softmax_ce_weighted(
            &Tensor::<f32>::from_vec(&[2], vec![0.0, 0.0]).unwrap(),
            &[1],
            &[1.0, 10.0],
        )
        .unwrap();
        assert!((l32 as f64 - 10.0 * std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_target() {
        assert!(softmax_ce_weighted(&t(&[1, 2], &[0.0, 0.0]), &[2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::new(5);
        let x = Tensor::<f32>::randn(&[7, 5], 3.0, &mut rng);
        let p = softmax(&x);
        for r in 0..7 {
            let s: f32 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = Tensor::<f32>::zeros(&[3, 2]);
        assert!(embedding_forward(&table, &[3]).is_err());
    }
}
