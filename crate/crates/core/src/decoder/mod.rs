//! The pair-extraction decoder.
//!
//! Token features are projected to `c_d` channels (`h_i = W_proj f_i +
//! b_proj`), every ordered token pair is encoded as `M_ij = W_pair (h_i ⊕
//! h_j) + b_pair`, and five independent two-layer MLP heads classify each
//! `M_ij` into {0, 1}.
//!
//! Training and scoring never materialise `M`: splitting `W_pair = [A | B]`
//! gives `M_ij = (A h_i + b_pair) + B h_j`, and since the first layer of each
//! head is linear, its pre-activation is `u_i + v_j` with `u = W1 (A h + b) +
//! b1` and `v = W1 (B h)`. Only the ReLU and the `c_d → 2` layer are per-cell.
//! [`reference`] keeps the literal, materialised computation for checking.

pub mod matrix;
pub mod reference;
pub mod targets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::mlp::Mlp;
use crate::numerics::ops::{linear_backward, linear_forward, softmax_in_place, weighted_ce_cell};
use crate::numerics::{cst, ParamSlot, Params, Scalar, SplitMix64, Tensor};

pub use matrix::{decode, BinaryMatrix, Head, RelationMatrices, RelationScores, RelationTargets};
pub use targets::build_targets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weights of the le, lgh, lgt, elh and elt losses.
    pub lambdas: [f64; 5],
    /// `[negative, positive]` class weights.
    pub class_weights: [f64; 2],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambdas: [1.0; 5], class_weights: [1.0, 10.0] }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) || !self.lambdas.iter().any(|l| *l > 0.0) {
            return Err(Error::Config("loss: lambdas must be non-negative with at least one positive".into()));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("loss: class weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T = f32> {
    pub c_e: usize,
    pub c_d: usize,
    pub w_proj: ParamSlot<T>,
    pub b_proj: ParamSlot<T>,
    pub w_pair: ParamSlot<T>,
    pub b_pair: ParamSlot<T>,
    /// Indexed by [`Head::index`].
    pub heads: Vec<Mlp<T>>,
}

/// Row and column halves of the pair encoding for one document.
pub struct PairHalves<T> {
    pub f: Tensor<T>,
    pub h: Tensor<T>,
    /// `A h_i + b_pair`
    pub row: Tensor<T>,
    /// `B h_j`
    pub col: Tensor<T>,
}

/// Per-document loss breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_head: [f64; 5],
}

impl<T: Scalar> Decoder<T> {
    pub fn new(c_e: usize, c_d: usize, rng: &mut SplitMix64) -> Result<Self> {
        if c_e == 0 || c_d == 0 {
            return Err(Error::Config("decoder: c_e and c_d must be positive".into()));
        }
        let heads = Head::ALL.iter().map(|h| Mlp::new(&format!("dec/head_{}", h.name()), c_d, c_d, 2, rng)).collect();
        Ok(Self {
            c_e,
            c_d,
            w_proj: ParamSlot::new("dec/W_proj", Tensor::randn(&[c_d, c_e], (1.0 / c_e as f64).sqrt(), rng)),
            b_proj: ParamSlot::new("dec/b_proj", Tensor::zeros(&[c_d])),
            w_pair: ParamSlot::new("dec/W_pair", Tensor::randn(&[c_d, 2 * c_d], (1.0 / (2 * c_d) as f64).sqrt(), rng)),
            b_pair: ParamSlot::new("dec/b_pair", Tensor::zeros(&[c_d])),
            heads,
        })
    }

    /// `h_i = W_proj f_i + b_proj`.
    pub fn project(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        linear_forward(f, &self.w_proj.value, &self.b_proj.value)
    }

    /// Left (`A`) and right (`B`) blocks of `W_pair`.
    fn pair_blocks(&self) -> (Tensor<T>, Tensor<T>) {
        let c = self.c_d;
        let mut a = Tensor::zeros(&[c, c]);
        let mut b = Tensor::zeros(&[c, c]);
        for k in 0..c {
            let row = self.w_pair.value.row(k);
            a.row_mut(k).copy_from_slice(&row[..c]);
            b.row_mut(k).copy_from_slice(&row[c..]);
        }
        (a, b)
    }

    pub fn halves(&self, f: &Tensor<T>) -> Result<PairHalves<T>> {
        if f.last_dim() != self.c_e {
            return Err(Error::Shape(format!("features have width {}, decoder expects {}", f.last_dim(), self.c_e)));
        }
        let h = self.project(f)?;
        let (a, b) = self.pair_blocks();
        let row = linear_forward(&h, &a, &self.b_pair.value)?;
        let col = linear_forward(&h, &b, &Tensor::zeros(&[self.c_d]))?;
        Ok(PairHalves { f: f.clone(), h, row, col })
    }

    /// First-layer terms `(u, v)` of a head.
    fn head_terms(&self, head: &Mlp<T>, halves: &PairHalves<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let u = linear_forward(&halves.row, &head.w1.value, &head.b1.value)?;
        let v = linear_forward(&halves.col, &head.w1.value, &Tensor::zeros(&[self.c_d]))?;
        Ok((u, v))
    }

    /// Raw two-class logits `[N, N, 2]` of every head.
    pub fn logits(&self, f: &Tensor<T>) -> Result<[Vec<T>; 5]> {
        let n = f.rows();
        let halves = self.halves(f)?;
        let mut out: [Vec<T>; 5] = std::array::from_fn(|_| vec![T::zero(); n * n * 2]);
        let mut z = vec![T::zero(); self.c_d];
        for (hk, head) in self.heads.iter().enumerate() {
            let (u, v) = self.head_terms(head, &halves)?;
            let w2 = &head.w2.value;
            let b2 = head.b2.value.data();
            for i in 0..n {
                for j in 0..n {
                    for ((zk, &ui), &vj) in z.iter_mut().zip(u.row(i)).zip(v.row(j)) {
                        *zk = (ui + vj).max(T::zero());
                    }
                    let cell = &mut out[hk][(i * n + j) * 2..(i * n + j) * 2 + 2];
                    cell[0] = crate::numerics::ops::dot(w2.row(0), &z) + b2[0];
                    cell[1] = crate::numerics::ops::dot(w2.row(1), &z) + b2[1];
                }
            }
        }
        Ok(out)
    }

    /// Softmax probabilities `P^(*)` of every head.
    pub fn scores(&self, f: &Tensor<T>) -> Result<RelationScores> {
        let n = f.rows();
        let logits = self.logits(f)?;
        let probs = logits.map(|mut l| {
            for cell in l.chunks_mut(2) {
                softmax_in_place(cell);
            }
            l.into_iter().map(|v| v.to_f32().unwrap_or(0.0)).collect()
        });
        Ok(RelationScores { n, probs })
    }

    /// Joint weighted cross-entropy over the five heads (each averaged over
    /// its `N²` cells). Accumulates parameter gradients and returns the loss
    /// together with `∂L/∂f`.
    pub fn loss_and_grads(
        &mut self,
        f: &Tensor<T>,
        targets: &RelationTargets,
        cfg: &LossConfig,
    ) -> Result<(LossBreakdown, Tensor<T>)> {
        let n = f.rows();
        if targets.n() != n {
            return Err(Error::Shape(format!("targets are {}x{}, features have {n} rows", targets.n(), targets.n())));
        }
        let mut out = LossBreakdown::default();
        if n == 0 {
            return Ok((out, Tensor::zeros(f.dims())));
        }
        let halves = self.halves(f)?;
        let c = self.c_d;
        let weights: [T; 2] = [cst(cfg.class_weights[0]), cst(cfg.class_weights[1])];
        let mut d_row = Tensor::zeros(&[n, c]);
        let mut d_col = Tensor::zeros(&[n, c]);
        let inv_cells = 1.0 / (n * n) as f64;

        for hk in 0..Head::ALL.len() {
            let lambda = cfg.lambdas[hk];
            if lambda == 0.0 {
                continue;
            }
            let (u, v) = self.head_terms(&self.heads[hk], &halves)?;
            let head = &mut self.heads[hk];
            let scale: T = cst(lambda * inv_cells);
            let y = targets.get(Head::ALL[hk]);
            let mut du = Tensor::<T>::zeros(&[n, c]);
            let mut dv = Tensor::<T>::zeros(&[n, c]);
            let mut z = vec![T::zero(); c];
            let mut dz = vec![T::zero(); c];
            let mut dlogit = [T::zero(); 2];
            let mut head_loss = T::zero();
            for i in 0..n {
                for j in 0..n {
                    for ((zk, &ui), &vj) in z.iter_mut().zip(u.row(i)).zip(v.row(j)) {
                        *zk = ui + vj;
                    }
                    let w2 = head.w2.value.data();
                    let b2 = head.b2.value.data();
                    let mut logit = [b2[0], b2[1]];
                    for k in 0..c {
                        let r = z[k].max(T::zero());
                        logit[0] += w2[k] * r;
                        logit[1] += w2[c + k] * r;
                    }
                    let target = y.get(i, j) as usize;
                    head_loss += weighted_ce_cell(&logit, target, &weights, scale, &mut dlogit);
                    let gw2 = head.w2.grad.data_mut();
                    for k in 0..c {
                        let r = z[k].max(T::zero());
                        gw2[k] += dlogit[0] * r;
                        gw2[c + k] += dlogit[1] * r;
                        dz[k] = if z[k] > T::zero() { dlogit[0] * w2[k] + dlogit[1] * w2[c + k] } else { T::zero() };
                    }
                    let gb2 = head.b2.grad.data_mut();
                    gb2[0] += dlogit[0];
                    gb2[1] += dlogit[1];
                    for (a, &g) in du.row_mut(i).iter_mut().zip(&dz) {
                        *a += g;
                    }
                    for (a, &g) in dv.row_mut(j).iter_mut().zip(&dz) {
                        *a += g;
                    }
                }
            }
            let head_loss = head_loss.to_f64().unwrap_or(f64::NAN) * inv_cells;
            out.per_head[hk] = head_loss;
            out.total += lambda * head_loss;

            let dr = linear_backward(&halves.row, &head.w1.value, &du, &mut head.w1.grad, &mut head.b1.grad);
            let mut scratch_b = Tensor::zeros(&[c]);
            let dc = linear_backward(&halves.col, &head.w1.value, &dv, &mut head.w1.grad, &mut scratch_b);
            d_row.add_assign(&dr);
            d_col.add_assign(&dc);
        }

        // pair encoding
        let (a, b) = self.pair_blocks();
        let mut ga = Tensor::zeros(&[c, c]);
        let mut gb = Tensor::zeros(&[c, c]);
        let mut dh = linear_backward(&halves.h, &a, &d_row, &mut ga, &mut self.b_pair.grad);
        let mut scratch_b = Tensor::zeros(&[c]);
        dh.add_assign(&linear_backward(&halves.h, &b, &d_col, &mut gb, &mut scratch_b));
        for k in 0..c {
            let g = self.w_pair.grad.row_mut(k);
            for (dst, &src) in g[..c].iter_mut().zip(ga.row(k)) {
                *dst += src;
            }
            for (dst, &src) in g[c..].iter_mut().zip(gb.row(k)) {
                *dst += src;
            }
        }
        // projection
        let df = linear_backward(f, &self.w_proj.value, &dh, &mut self.w_proj.grad, &mut self.b_proj.grad);
        if !out.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite decoder loss {}", out.total)));
        }
        Ok((out, df))
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            c_e: self.c_e,
            c_d: self.c_d,
            w_proj: self.w_proj.cast(),
            b_proj: self.b_proj.cast(),
            w_pair: self.w_pair.cast(),
            b_pair: self.b_pair.cast(),
            heads: self
                .heads
                .iter()
                .map(|h| Mlp { w1: h.w1.cast(), b1: h.b1.cast(), w2: h.w2.cast(), b2: h.b2.cast() })
                .collect(),
        }
    }
}

impl<T: Scalar> Params<T> for Decoder<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        let mut v = vec![&self.w_proj, &self.b_proj, &self.w_pair, &self.b_pair];
        for h in &self.heads {
            v.extend(h.slots());
        }
        v
    }

    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v = vec![&mut self.w_proj, &mut self.b_proj, &mut self.w_pair, &mut self.b_pair];
        for h in &mut self.heads {
            v.extend(h.slots_mut());
        }
        v
    }
}

/// Logits of `±margin` that reproduce `m` exactly under [`decode`].
pub fn injected_scores(m: &RelationMatrices, margin: f32) -> RelationScores {
    let n = m.n();
    let mut s = RelationScores::uniform(n);
    for h in Head::ALL {
        let p = &mut s.probs[h.index()];
        for i in 0..n {
            for j in 0..n {
                let sign = if m.get(h).get(i, j) { 1.0 } else { -1.0 };
                let mut cell = [-sign * margin, sign * margin];
                softmax_in_place(&mut cell);
                p[(i * n + j) * 2] = cell[0];
                p[(i * n + j) * 2 + 1] = cell[1];
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::mini_form;
    use crate::corpus::{tokenize, Vocab, DEFAULT_MAX_TOKENS};

    fn fixture_targets() -> RelationTargets {
        let d = mini_form();
        let t = tokenize(&d, &Vocab::build(std::slice::from_ref(&d)), DEFAULT_MAX_TOKENS);
        build_targets(&t, &d).0
    }

    #[test]
    fn zero_lambdas_give_zero_loss_and_grads() {
        let mut rng = SplitMix64::new(1);
        let mut dec = Decoder::<f64>::new(8, 4, &mut rng).unwrap();
        let f = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let cfg = LossConfig { lambdas: [0.0; 5], ..Default::default() };
        let (loss, df) = dec.loss_and_grads(&f, &fixture_targets(), &cfg).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(df.data().iter().all(|&v| v == 0.0));
        assert!(dec.slots().iter().all(|s| s.grad.data().iter().all(|&g| g == 0.0)));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn injected_scores_decode_to_targets() {
        let y = fixture_targets();
        assert_eq!(decode(&injected_scores(&y, 8.0)), y);
    }

    #[test]
    fn zero_head_weights_give_uniform_scores() {
        let mut rng = SplitMix64::new(2);
        let mut dec = Decoder::<f32>::new(8, 4, &mut rng).unwrap();
        for h in &mut dec.heads {
            for s in h.slots_mut() {
                s.value.fill_zero();
            }
        }
        let s = dec.scores(&Tensor::randn(&[5, 8], 1.0, &mut rng)).unwrap();
        assert!(s.probs.iter().all(|p| p.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn scores_are_distributions() {
        let mut rng = SplitMix64::new(3);
        let dec = Decoder::<f32>::new(8, 4, &mut rng).unwrap();
        let s = dec.scores(&Tensor::randn(&[5, 8], 1.0, &mut rng)).unwrap();
        for p in &s.probs {
            for c in p.chunks(2) {
                assert!((c[0] + c[1] - 1.0).abs() < 1e-6);
            }
        }
    }
}
