//! Per-token feature vectors `f_i`.
//!
//! The toy encoder sums a word embedding with bucketed layout embeddings of
//! the token's line box (x-centre, y-centre, width, height) and of the
//! token's offset from both ends of its line, then applies a stack of
//! residual self-attention blocks. There is no document-level position
//! channel, so the encoder is equivariant to any permutation of tokens.
//!
//! Features from an external backbone can be imported instead through the
//! tensor container (`feat/<doc_id>`).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedDoc;
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::ops::{
    embedding_backward, embedding_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    sdpa_backward, sdpa_forward,
};
use crate::numerics::{cst, ParamSlot, Params, Scalar, SplitMix64, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub c_e: usize,
    pub layers: usize,
    pub heads: usize,
    pub coord_buckets: usize,
    /// Buckets for the in-line offset embeddings; offsets beyond saturate.
    pub rank_buckets: usize,
    /// Buckets of the per-head relative-position attention bias over
    /// line-centre offsets in `[-0.25, 0.25]`; 0 disables the bias.
    #[serde(default)]
    pub rel_buckets: usize,
}

impl EncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self { vocab_size, c_e: 64, layers: 2, heads: 2, coord_buckets: 64, rank_buckets: 8, rel_buckets: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("encoder: vocab_size must include PAD and UNK".into()));
        }
        if self.c_e == 0 || self.heads == 0 || !self.c_e.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("encoder: c_e={} not divisible by heads={}", self.c_e, self.heads)));
        }
        if self.coord_buckets < 2 {
            return Err(Error::Config("encoder: coord_buckets must be >= 2".into()));
        }
        if self.rank_buckets == 0 {
            return Err(Error::Config("encoder: rank_buckets must be positive".into()));
        }
        Ok(())
    }
}

/// Index inputs to the embedding tables, one entry per token.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub ids: Vec<usize>,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub w: Vec<usize>,
    pub h: Vec<usize>,
    pub rank: Vec<usize>,
    pub rank_rev: Vec<usize>,
    /// Normalised line box `[x_center, y_center, width, height]` per token.
    pub boxes: Vec<[f64; 4]>,
}

/// Uniform bucket of a value in [0, 1].
pub fn bucket(v: f64, buckets: usize) -> usize {
    ((v.clamp(0.0, 1.0) * buckets as f64) as usize).min(buckets - 1)
}

impl EncoderInput {
    pub fn from_doc(doc: &TokenizedDoc, cfg: &EncoderConfig) -> Self {
        let b = cfg.coord_buckets;
        let r = cfg.rank_buckets;
        let t = &doc.tokens;
        Self {
            ids: t.iter().map(|t| t.vocab_id.min(cfg.vocab_size - 1)).collect(),
            x: t.iter().map(|t| bucket(t.geom.x_center, b)).collect(),
            y: t.iter().map(|t| bucket(t.geom.y_center, b)).collect(),
            w: t.iter().map(|t| bucket(t.geom.width, b)).collect(),
            h: t.iter().map(|t| bucket(t.geom.height, b)).collect(),
            rank: t.iter().map(|t| t.geom.rank_in_line.min(r - 1)).collect(),
            rank_rev: t.iter().map(|t| t.geom.rank_from_end.min(r - 1)).collect(),
            boxes: t.iter().map(|t| [t.geom.x_center, t.geom.y_center, t.geom.width, t.geom.height]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Training-time augmentation: each token id becomes UNK with
    /// probability `word_dropout`, and the whole page is translated by a
    /// uniform offset in `[-shift, shift]` per axis before re-bucketing.
    pub fn augmented(&self, cfg: &EncoderConfig, word_dropout: f64, shift: f64, rng: &mut SplitMix64) -> Self {
        let mut out = self.clone();
        if word_dropout > 0.0 {
            for id in &mut out.ids {
                if rng.bernoulli(word_dropout) {
                    *id = crate::corpus::tokenize::UNK_ID;
                }
            }
        }
        if shift > 0.0 {
            let (dx, dy) = (rng.uniform(-shift, shift), rng.uniform(-shift, shift));
            for (i, b) in out.boxes.iter_mut().enumerate() {
                b[0] = (b[0] + dx).clamp(0.0, 1.0);
                b[1] = (b[1] + dy).clamp(0.0, 1.0);
                out.x[i] = bucket(b[0], cfg.coord_buckets);
                out.y[i] = bucket(b[1], cfg.coord_buckets);
            }
        }
        out
    }

    /// Reorders tokens: entry `k` of the result is token `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = |v: &Vec<usize>| perm.iter().map(|&i| v[i]).collect();
        Self {
            ids: p(&self.ids),
            x: p(&self.x),
            y: p(&self.y),
            w: p(&self.w),
            h: p(&self.h),
            rank: p(&self.rank),
            rank_rev: p(&self.rank_rev),
            boxes: perm.iter().map(|&i| self.boxes[i]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock<T = f32> {
    pub wq: ParamSlot<T>,
    pub bq: ParamSlot<T>,
    pub wk: ParamSlot<T>,
    pub bk: ParamSlot<T>,
    pub wv: ParamSlot<T>,
    pub bv: ParamSlot<T>,
    pub wo: ParamSlot<T>,
    pub bo: ParamSlot<T>,
    pub w1: ParamSlot<T>,
    pub b1: ParamSlot<T>,
    pub w2: ParamSlot<T>,
    pub b2: ParamSlot<T>,
    /// Relative-position bias tables `[heads, rel_buckets]` for x and y
    /// offsets; absent when the bias is disabled.
    pub rel: Option<(ParamSlot<T>, ParamSlot<T>)>,
}

impl<T: Scalar> AttentionBlock<T> {
    fn new(prefix: &str, c: usize, heads: usize, rel_buckets: usize, rng: &mut SplitMix64) -> Self {
        let std_in = (1.0 / c as f64).sqrt();
        let std_out = 0.5 * std_in;
        let w = |name: &str, std: f64, rng: &mut SplitMix64| {
            ParamSlot::new(format!("{prefix}/{name}"), Tensor::randn(&[c, c], std, rng))
        };
        let b = |name: &str| ParamSlot::new(format!("{prefix}/{name}"), Tensor::zeros(&[c]));
        Self {
            wq: w("wq", std_in, rng),
            bq: b("bq"),
            wk: w("wk", std_in, rng),
            bk: b("bk"),
            wv: w("wv", std_in, rng),
            bv: b("bv"),
            wo: w("wo", std_out, rng),
            bo: b("bo"),
            w1: w("w1", (2.0 / c as f64).sqrt(), rng),
            b1: b("b1"),
            w2: w("w2", std_out, rng),
            b2: b("b2"),
            rel: (rel_buckets > 0).then(|| {
                let t = |name: &str| ParamSlot::new(format!("{prefix}/{name}"), Tensor::zeros(&[heads, rel_buckets]));
                (t("rel_x"), t("rel_y"))
            }),
        }
    }

    fn slots(&self) -> Vec<&ParamSlot<T>> {
        let mut v = vec![
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ];
        if let Some((rx, ry)) = &self.rel {
            v.extend([rx, ry]);
        }
        v
    }

    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v = vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ];
        if let Some((rx, ry)) = &mut self.rel {
            v.extend([rx, ry]);
        }
        v
    }

    /// Per-pair logit bias of head `hd`.
    fn bias(&self, hd: usize, rel: &RelIndex) -> Option<Vec<T>> {
        let (tx, ty) = self.rel.as_ref()?;
        let nb = tx.value.dims()[1];
        let (tx, ty) = (&tx.value.data()[hd * nb..(hd + 1) * nb], &ty.value.data()[hd * nb..(hd + 1) * nb]);
        let k: T = cst(REL_BIAS_SCALE);
        Some(rel.x.iter().zip(&rel.y).map(|(&a, &b)| k * (tx[a] + ty[b])).collect())
    }
}

/// Multiplier on the relative-position bias tables; lets them move at the
/// same pace as the projection weights under a shared learning rate.
const REL_BIAS_SCALE: f64 = 8.0;

/// Offsets beyond this (in normalised page units) share the edge bucket.
const REL_RANGE: f64 = 0.25;

/// Bucketed line-centre offsets `(j − i)` for every token pair.
#[derive(Clone, Debug, Default)]
struct RelIndex {
    x: Vec<usize>,
    y: Vec<usize>,
}

impl RelIndex {
    fn new(boxes: &[[f64; 4]], buckets: usize) -> Self {
        if buckets == 0 {
            return Self::default();
        }
        let mut out = Self { x: Vec::with_capacity(boxes.len().pow(2)), y: Vec::with_capacity(boxes.len().pow(2)) };
        for bi in boxes {
            for bj in boxes {
                out.x.push(bucket((bj[0] - bi[0]) / (2.0 * REL_RANGE) + 0.5, buckets));
                out.y.push(bucket((bj[1] - bi[1]) / (2.0 * REL_RANGE) + 0.5, buckets));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T = f32> {
    pub cfg: EncoderConfig,
    pub tok: ParamSlot<T>,
    pub x: ParamSlot<T>,
    pub y: ParamSlot<T>,
    pub w: ParamSlot<T>,
    pub h: ParamSlot<T>,
    pub rank: ParamSlot<T>,
    pub rank_rev: ParamSlot<T>,
    /// Linear map of the continuous line box, `[c_e, 4]`.
    pub boxes: ParamSlot<T>,
    pub blocks: Vec<AttentionBlock<T>>,
}

struct BlockCache<T> {
    x_in: Tensor<T>,
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    probs: Vec<Vec<T>>,
    attn: Tensor<T>,
    x_mid: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
}

/// Forward activations needed by [`Encoder::backward`].
pub struct EncoderCache<T> {
    input: EncoderInput,
    rel: RelIndex,
    blocks: Vec<BlockCache<T>>,
}

/// Sinusoidal code of each bucket centre, used to initialise coordinate tables.
fn sinusoidal_table<T: Scalar>(buckets: usize, c: usize, scale: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(&[buckets, c]);
    for b in 0..buckets {
        let pos = (b as f64 + 0.5) / buckets as f64;
        for k in 0..c {
            let freq = std::f64::consts::PI * (1u64 << (k / 2).min(12)) as f64 / 2.0;
            let v = if k % 2 == 0 { (freq * pos).sin() } else { (freq * pos).cos() };
            t.data_mut()[b * c + k] = cst(scale * v);
        }
    }
    t
}

fn split_heads<T: Scalar>(m: &Tensor<T>, heads: usize) -> Vec<Vec<T>> {
    let n = m.rows();
    let c = m.last_dim();
    let d = c / heads;
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                out.extend_from_slice(&m.row(i)[h * d..(h + 1) * d]);
            }
            out
        })
        .collect()
}

fn merge_heads<T: Scalar>(parts: &[Vec<T>], n: usize, c: usize) -> Tensor<T> {
    let heads = parts.len();
    let d = c / heads;
    let mut out = Tensor::zeros(&[n, c]);
    for (h, part) in parts.iter().enumerate() {
        for i in 0..n {
            out.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(&part[i * d..(i + 1) * d]);
        }
    }
    out
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_e;
        let emb_std = 0.5;
        let coord = |name: &str| ParamSlot::new(format!("enc/emb_{name}"), sinusoidal_table(cfg.coord_buckets, c, emb_std));
        let tok = ParamSlot::new("enc/emb_tok", Tensor::randn(&[cfg.vocab_size, c], emb_std, rng));
        let rank = ParamSlot::new("enc/emb_rank", Tensor::randn(&[cfg.rank_buckets, c], emb_std, rng));
        let rank_rev = ParamSlot::new("enc/emb_rank_rev", Tensor::randn(&[cfg.rank_buckets, c], emb_std, rng));
        let boxes = ParamSlot::new("enc/box", Tensor::randn(&[c, 4], 1.0, rng));
        let blocks = (0..cfg.layers).map(|l| AttentionBlock::new(&format!("enc/block{l}"), c, cfg.heads, cfg.rel_buckets, rng)).collect();
        Ok(Self { x: coord("x"), y: coord("y"), w: coord("w"), h: coord("h"), tok, rank, rank_rev, boxes, blocks, cfg })
    }

    pub fn encode(&self, input: &EncoderInput) -> Result<Tensor<T>> {
        Ok(self.forward(input)?.0)
    }

    pub fn forward(&self, input: &EncoderInput) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let n = input.len();
        let c = self.cfg.c_e;
        let mut x = embedding_forward(&self.tok.value, &input.ids)?;
        for (table, idx) in [
            (&self.x, &input.x),
            (&self.y, &input.y),
            (&self.w, &input.w),
            (&self.h, &input.h),
            (&self.rank, &input.rank),
            (&self.rank_rev, &input.rank_rev),
        ] {
            x.add_assign(&embedding_forward(&table.value, idx)?);
        }
        if input.boxes.len() != n {
            return Err(Error::Shape(format!("{} boxes for {n} tokens", input.boxes.len())));
        }
        let wb = self.boxes.value.data();
        for (i, b) in input.boxes.iter().enumerate() {
            for (k, out) in x.row_mut(i).iter_mut().enumerate() {
                for (q, &v) in b.iter().enumerate() {
                    *out += wb[k * 4 + q] * cst::<T>(v);
                }
            }
        }
        let heads = self.cfg.heads;
        let d = c / heads;
        let rel = RelIndex::new(&input.boxes, self.cfg.rel_buckets);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let q = split_heads(&linear_forward(&x, &blk.wq.value, &blk.bq.value)?, heads);
            let k = split_heads(&linear_forward(&x, &blk.wk.value, &blk.bk.value)?, heads);
            let v = split_heads(&linear_forward(&x, &blk.wv.value, &blk.bv.value)?, heads);
            let mut outs = Vec::with_capacity(heads);
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let bias = blk.bias(hd, &rel);
                let (o, p) = sdpa_forward(&q[hd], &k[hd], &v[hd], bias.as_deref(), n, d);
                outs.push(o);
                probs.push(p);
            }
            let attn = merge_heads(&outs, n, c);
            let mut x_mid = linear_forward(&attn, &blk.wo.value, &blk.bo.value)?;
            x_mid.add_assign(&x);
            let pre = linear_forward(&x_mid, &blk.w1.value, &blk.b1.value)?;
            let hidden = relu_forward(&pre);
            let mut x_out = linear_forward(&hidden, &blk.w2.value, &blk.b2.value)?;
            x_out.add_assign(&x_mid);
            caches.push(BlockCache { x_in: x, q, k, v, probs, attn, x_mid, pre, hidden });
            x = x_out;
        }
        Ok((x, EncoderCache { input: input.clone(), rel, blocks: caches }))
    }

    /// Accumulates parameter gradients for `d_out = ∂L/∂f`.
    pub fn backward(&mut self, cache: &EncoderCache<T>, d_out: &Tensor<T>) {
        let heads = self.cfg.heads;
        let c = self.cfg.c_e;
        let d = c / heads;
        let mut dx = d_out.clone();
        for (blk, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let n = bc.x_in.rows();
            // feed-forward residual
            let dhidden = linear_backward(&bc.hidden, &blk.w2.value, &dx, &mut blk.w2.grad, &mut blk.b2.grad);
            let dpre = relu_backward(&bc.pre, &dhidden);
            let mut dmid = linear_backward(&bc.x_mid, &blk.w1.value, &dpre, &mut blk.w1.grad, &mut blk.b1.grad);
            dmid.add_assign(&dx);
            // attention residual
            let dattn = linear_backward(&bc.attn, &blk.wo.value, &dmid, &mut blk.wo.grad, &mut blk.bo.grad);
            let dattn_h = split_heads(&dattn, heads);
            let mut dq = Vec::with_capacity(heads);
            let mut dk = Vec::with_capacity(heads);
            let mut dv = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (a, b, v, dl) = sdpa_backward(&bc.q[hd], &bc.k[hd], &bc.v[hd], &bc.probs[hd], &dattn_h[hd], n, d);
                if let Some((tx, ty)) = &mut blk.rel {
                    let nb = tx.value.dims()[1];
                    let (gx, gy) = (tx.grad.data_mut(), ty.grad.data_mut());
                    let k: T = cst(REL_BIAS_SCALE);
                    for ((&g, &ix), &iy) in dl.iter().zip(&cache.rel.x).zip(&cache.rel.y) {
                        let g = g * k;
                        gx[hd * nb + ix] += g;
                        gy[hd * nb + iy] += g;
                    }
                }
                dq.push(a);
                dk.push(b);
                dv.push(v);
            }
            let mut dx_in = dmid;
            let dq = merge_heads(&dq, n, c);
            let dk = merge_heads(&dk, n, c);
            let dv = merge_heads(&dv, n, c);
            dx_in.add_assign(&linear_backward(&bc.x_in, &blk.wq.value, &dq, &mut blk.wq.grad, &mut blk.bq.grad));
            dx_in.add_assign(&linear_backward(&bc.x_in, &blk.wk.value, &dk, &mut blk.wk.grad, &mut blk.bk.grad));
            dx_in.add_assign(&linear_backward(&bc.x_in, &blk.wv.value, &dv, &mut blk.wv.grad, &mut blk.bv.grad));
            dx = dx_in;
        }
        let inp = &cache.input;
        embedding_backward(&inp.ids, &dx, &mut self.tok.grad);
        embedding_backward(&inp.x, &dx, &mut self.x.grad);
        embedding_backward(&inp.y, &dx, &mut self.y.grad);
        embedding_backward(&inp.w, &dx, &mut self.w.grad);
        embedding_backward(&inp.h, &dx, &mut self.h.grad);
        embedding_backward(&inp.rank, &dx, &mut self.rank.grad);
        embedding_backward(&inp.rank_rev, &dx, &mut self.rank_rev.grad);
        let gb = self.boxes.grad.data_mut();
        for (i, b) in inp.boxes.iter().enumerate() {
            for (k, &g) in dx.row(i).iter().enumerate() {
                for (q, &v) in b.iter().enumerate() {
                    gb[k * 4 + q] += g * cst::<T>(v);
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        let mut out = Encoder::<U> {
            cfg: self.cfg.clone(),
            tok: self.tok.cast(),
            x: self.x.cast(),
            y: self.y.cast(),
            w: self.w.cast(),
            h: self.h.cast(),
            rank: self.rank.cast(),
            rank_rev: self.rank_rev.cast(),
            boxes: self.boxes.cast(),
            blocks: Vec::new(),
        };
        for b in &self.blocks {
            out.blocks.push(AttentionBlock {
                wq: b.wq.cast(),
                bq: b.bq.cast(),
                wk: b.wk.cast(),
                bk: b.bk.cast(),
                wv: b.wv.cast(),
                bv: b.bv.cast(),
                wo: b.wo.cast(),
                bo: b.bo.cast(),
                w1: b.w1.cast(),
                b1: b.b1.cast(),
                w2: b.w2.cast(),
                b2: b.b2.cast(),
                rel: b.rel.as_ref().map(|(x, y)| (x.cast(), y.cast())),
            });
        }
        out
    }
}

impl<T: Scalar> Params<T> for Encoder<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        let mut v = vec![&self.tok, &self.x, &self.y, &self.w, &self.h, &self.rank, &self.rank_rev, &self.boxes];
        for b in &self.blocks {
            v.extend(b.slots());
        }
        v
    }

    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v = vec![
            &mut self.tok,
            &mut self.x,
            &mut self.y,
            &mut self.w,
            &mut self.h,
            &mut self.rank,
            &mut self.rank_rev,
            &mut self.boxes,
        ];
        for b in &mut self.blocks {
            v.extend(b.slots_mut());
        }
        v
    }
}

/// Per-document feature matrices read from a tensor container.
#[derive(Clone, Debug, Default)]
pub struct FeatureStore {
    features: HashMap<String, Tensor<f32>>,
}

pub const FEATURE_PREFIX: &str = "feat/";

impl FeatureStore {
    pub fn load(path: &Path) -> Result<Self> {
        let features = checkpoint::load(path)?
            .into_iter()
            .filter_map(|(name, t)| name.strip_prefix(FEATURE_PREFIX).map(|id| (id.to_string(), t)))
            .collect();
        Ok(Self { features })
    }

    pub fn insert(&mut self, doc_id: &str, t: Tensor<f32>) {
        self.features.insert(doc_id.to_string(), t);
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Features of one document, checked against its token count.
    pub fn get(&self, doc_id: &str, n_tokens: usize) -> Result<&Tensor<f32>> {
        let t = self.features.get(doc_id).ok_or_else(|| Error::Features {
            doc_id: doc_id.to_string(),
            reason: "not present in feature file".into(),
        })?;
        if t.dims().len() != 2 || t.dims()[0] != n_tokens {
            return Err(Error::Features {
                doc_id: doc_id.to_string(),
                reason: format!("shape {:?} does not match {n_tokens} tokens", t.dims()),
            });
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut items: Vec<(String, Tensor<f32>)> =
            self.features.iter().map(|(k, v)| (format!("{FEATURE_PREFIX}{k}"), v.clone())).collect();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        checkpoint::save(path, &items)
    }
}

/// Reads the features of a single document from a container file.
pub fn load_external_features(path: &Path, doc_id: &str, n_tokens: usize) -> Result<Tensor<f32>> {
    FeatureStore::load(path)?.get(doc_id, n_tokens).cloned()
}
