//! Literal pair encoding: materialises `M ∈ R^{N×N×c_d}` in row blocks and
//! runs each head's MLP on every cell. Used to check the factorised path and
//! as the executable form of the definitions.

use crate::error::{Error, Result};
use crate::numerics::mlp::Mlp;
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_BLOCK_ROWS: usize = 64;

/// `M_ij = W_pair (h_i ⊕ h_j) + b_pair`, filled `block_rows` rows of `i` at
/// a time. Every cell is computed by the same expression regardless of the
/// block size.
pub fn pair_encode<T: Scalar>(h: &Tensor<T>, w_pair: &Tensor<T>, b_pair: &Tensor<T>, block_rows: usize) -> Result<Tensor<T>> {
    let n = h.rows();
    let c = h.last_dim();
    if w_pair.dims() != [c, 2 * c] || b_pair.dims() != [c] {
        return Err(Error::Shape(format!("pair weights {:?} / {:?} for width {c}", w_pair.dims(), b_pair.dims())));
    }
    let block = block_rows.max(1);
    let mut m = Tensor::zeros(&[n.max(1), n.max(1), c]);
    if n == 0 {
        return Ok(Tensor::zeros(&[0, 0, c]));
    }
    let mut cat = vec![T::zero(); 2 * c];
    for start in (0..n).step_by(block) {
        for i in start..(start + block).min(n) {
            for j in 0..n {
                cat[..c].copy_from_slice(h.row(i));
                cat[c..].copy_from_slice(h.row(j));
                let out = m.row_mut(i * n + j);
                for k in 0..c {
                    let mut acc = b_pair.data()[k];
                    for (&w, &x) in w_pair.row(k).iter().zip(&cat) {
                        acc += w * x;
                    }
                    out[k] = acc;
                }
            }
        }
    }
    Ok(m)
}

/// `softmax(MLP(M))` over the class dimension, `[N, N, 2]`.
pub fn head_scores<T: Scalar>(m: &Tensor<T>, head: &Mlp<T>) -> Result<Tensor<T>> {
    let (out, _) = head.forward(m)?;
    let mut p = out;
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r));
    }
    Ok(p)
}
