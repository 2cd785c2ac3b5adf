//! The serial SER+RE comparison pipeline: lines are put into reading order
//! by a recursive XY cut, tokens are BIO-tagged into entities (SER), and a
//! pair classifier links question entities to answer entities (RE). Both
//! heads share one encoder.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Category, Document, Line, TokenizedDoc, Vocab};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::evalkit::{pair_f1, PairF1Report, StringPair};
use crate::model::{load_named, read_bundle, save_bundle, ModelConfig};
use crate::numerics::mlp::Mlp;
use crate::numerics::ops::softmax_ce_weighted;
use crate::numerics::{ParamSlot, Params, Scalar, SplitMix64, Tensor};
use crate::train::{fit, TrainConfig, TrainOutcome, Trainable};

// ---------------------------------------------------------------- XY cut

/// Groups `items` into maximal runs whose `[lo, hi]` projections overlap or
/// touch; a cut needs a strictly positive gap. `None` if there is one group.
fn split_by<'a>(items: &[&'a Line], proj: impl Fn(&Line) -> (f64, f64)) -> Option<Vec<Vec<&'a Line>>> {
    let mut sorted: Vec<&Line> = items.to_vec();
    sorted.sort_by(|a, b| {
        let (pa, pb) = (proj(a), proj(b));
        pa.0.total_cmp(&pb.0).then(pa.1.total_cmp(&pb.1)).then(a.id.cmp(&b.id))
    });
    let mut groups: Vec<Vec<&Line>> = Vec::new();
    let mut reach = f64::NEG_INFINITY;
    for l in sorted {
        let (lo, hi) = proj(l);
        if groups.is_empty() || lo > reach {
            groups.push(vec![l]);
            reach = hi;
        } else {
            groups.last_mut().unwrap().push(l);
            reach = reach.max(hi);
        }
    }
    (groups.len() > 1).then_some(groups)
}

fn rows(l: &Line) -> (f64, f64) {
    (l.bbox.y0, l.bbox.y1)
}

fn cols(l: &Line) -> (f64, f64) {
    (l.bbox.x0, l.bbox.x1)
}

fn xycut_rec(items: Vec<&Line>, horizontal: bool, out: &mut Vec<u32>) {
    if items.len() > 1 {
        let (first, second): (fn(&Line) -> (f64, f64), fn(&Line) -> (f64, f64)) =
            if horizontal { (rows, cols) } else { (cols, rows) };
        if let Some(groups) = split_by(&items, first) {
            for g in groups {
                xycut_rec(g, !horizontal, out);
            }
            return;
        }
        if let Some(groups) = split_by(&items, second) {
            for g in groups {
                xycut_rec(g, horizontal, out);
            }
            return;
        }
    }
    let mut leaf = items;
    leaf.sort_by(|a, b| a.bbox.y0.total_cmp(&b.bbox.y0).then(a.bbox.x0.total_cmp(&b.bbox.x0)).then(a.id.cmp(&b.id)));
    out.extend(leaf.iter().map(|l| l.id));
}

/// Reading order by recursive XY cut: horizontal cuts are tried first, any
/// positive gap cuts, and uncuttable leaves are read top-to-bottom then
/// left-to-right. Returns line ids.
pub fn xycut_sort(lines: &[Line]) -> Vec<u32> {
    let mut out = Vec::with_capacity(lines.len());
    xycut_rec(lines.iter().collect(), true, &mut out);
    out
}

/// `doc` with its lines in XY-cut order.
pub fn sorted_document(doc: &Document) -> Document {
    let pos: HashMap<u32, usize> = doc.lines.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
    let order: Vec<usize> = xycut_sort(&doc.lines).iter().map(|id| pos[id]).collect();
    doc.with_line_order(&order)
}

// ---------------------------------------------------------------- BIO tags

/// Token tag. `B`/`I` carry header, question or answer, never other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BioTag {
    O,
    B(Category),
    I(Category),
}

pub const NUM_BIO_TAGS: usize = 7;
const TAGGED: [Category; 3] = [Category::Header, Category::Question, Category::Answer];

impl BioTag {
    pub fn index(self) -> usize {
        let c = |cat: Category| TAGGED.iter().position(|&t| t == cat).expect("other is never tagged");
        match self {
            BioTag::O => 0,
            BioTag::B(cat) => 1 + 2 * c(cat),
            BioTag::I(cat) => 2 + 2 * c(cat),
        }
    }

    pub fn from_index(k: usize) -> Self {
        match k {
            0 => BioTag::O,
            k if k < NUM_BIO_TAGS => {
                let cat = TAGGED[(k - 1) / 2];
                if k % 2 == 1 {
                    BioTag::B(cat)
                } else {
                    BioTag::I(cat)
                }
            }
            _ => panic!("BIO tag index {k} out of range"),
        }
    }

    pub fn category(self) -> Option<Category> {
        match self {
            BioTag::O => None,
            BioTag::B(c) | BioTag::I(c) => Some(c),
        }
    }
}

impl std::fmt::Display for BioTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BioTag::O => write!(f, "O"),
            BioTag::B(c) => write!(f, "B-{}", c.as_str()),
            BioTag::I(c) => write!(f, "I-{}", c.as_str()),
        }
    }
}

/// An entity as the baseline sees it: a contiguous run of tokens in the
/// sorted sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictedEntity {
    pub category: Category,
    pub tokens: Vec<usize>,
    pub text: String,
}

impl PredictedEntity {
    pub fn new(category: Category, tokens: Vec<usize>, tok: &TokenizedDoc) -> Self {
        let text = tok.join(&tokens);
        Self { category, tokens, text }
    }

    pub fn first(&self) -> usize {
        self.tokens[0]
    }
}

/// Annotated entities cut into units of sort-adjacent lines, in sorted order.
/// Each unit remembers the annotated entity it came from.
fn entity_units(tok: &TokenizedDoc, doc: &Document) -> Vec<(u32, PredictedEntity)> {
    let pos: HashMap<u32, usize> = tok.spans.iter().enumerate().map(|(i, s)| (s.line_id, i)).collect();
    let mut units = Vec::new();
    for e in &doc.entities {
        let mut idx: Vec<usize> = e.line_ids.iter().filter_map(|l| pos.get(l).copied()).collect();
        idx.sort_unstable();
        let mut run: Vec<usize> = Vec::new();
        for (k, &i) in idx.iter().enumerate() {
            if k > 0 && i != idx[k - 1] + 1 {
                units.push((idx[k - 1], e.id, std::mem::take(&mut run)));
            }
            let s = tok.spans[i];
            run.extend(s.first..=s.last);
        }
        if let Some(&last) = idx.last() {
            units.push((last, e.id, run));
        }
    }
    units.sort_by_key(|(_, _, toks)| toks[0]);
    let cat: HashMap<u32, Category> = doc.entities.iter().map(|e| (e.id, e.category)).collect();
    units.into_iter().map(|(_, id, toks)| (id, PredictedEntity::new(cat[&id], toks, tok))).collect()
}

/// Gold SER entities of a sorted document, "other" included.
pub fn gold_entities(tok: &TokenizedDoc, doc: &Document) -> Vec<PredictedEntity> {
    entity_units(tok, doc).into_iter().map(|(_, e)| e).collect()
}

fn tags_of(entities: &[PredictedEntity], n: usize) -> Vec<BioTag> {
    let mut tags = vec![BioTag::O; n];
    for e in entities.iter().filter(|e| e.category != Category::Other) {
        for (k, &t) in e.tokens.iter().enumerate() {
            tags[t] = if k == 0 { BioTag::B(e.category) } else { BioTag::I(e.category) };
        }
    }
    tags
}

/// Tags for a sorted document: a run of an entity's lines that are
/// neighbours in the sort is one B/I unit, every other line of the entity
/// opens its own unit, and "other" lines are O.
pub fn build_bio_tags(tok: &TokenizedDoc, doc: &Document) -> Vec<BioTag> {
    tags_of(&gold_entities(tok, doc), tok.n())
}

/// Orphan `I` tags (after O or after another category) become `B`.
pub fn repair_bio(tags: &[BioTag]) -> Vec<BioTag> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev = BioTag::O;
    for &t in tags {
        let fixed = match t {
            BioTag::I(c) if prev.category() != Some(c) => BioTag::B(c),
            t => t,
        };
        out.push(fixed);
        prev = fixed;
    }
    out
}

/// Standard BIO span assembly after repair.
pub fn bio_to_entities(tags: &[BioTag], tok: &TokenizedDoc) -> Vec<PredictedEntity> {
    let mut spans: Vec<(Category, Vec<usize>)> = Vec::new();
    for (i, t) in repair_bio(tags).into_iter().enumerate() {
        match t {
            BioTag::O => {}
            BioTag::B(c) => spans.push((c, vec![i])),
            BioTag::I(_) => spans.last_mut().expect("repaired I follows a tag").1.push(i),
        }
    }
    spans.into_iter().map(|(c, t)| PredictedEntity::new(c, t, tok)).collect()
}

// ---------------------------------------------------------------- heads

fn argmax(row: &[f32]) -> usize {
    // first maximum wins
    row.iter().enumerate().fold(0, |b, (k, &v)| if v > row[b] { k } else { b })
}

/// Greedy decoding of `[n, 7]` SER logits.
pub fn ser_decode(logits: &Tensor<f32>, tok: &TokenizedDoc) -> Vec<PredictedEntity> {
    let tags: Vec<BioTag> = (0..logits.rows()).map(|r| BioTag::from_index(argmax(logits.row(r)))).collect();
    bio_to_entities(&tags, tok)
}

pub fn ser_infer(features: &Tensor<f32>, ser: &Mlp<f32>, tok: &TokenizedDoc) -> Result<Vec<PredictedEntity>> {
    Ok(ser_decode(&ser.forward(features)?.0, tok))
}

/// Ordered (question, answer) index pairs: the only relations RE scores.
pub fn re_candidates(entities: &[PredictedEntity]) -> Vec<(usize, usize)> {
    let of = |c: Category| entities.iter().enumerate().filter(move |(_, e)| e.category == c).map(|(i, _)| i);
    of(Category::Question).flat_map(|q| of(Category::Answer).map(move |a| (q, a))).collect()
}

fn one_hot(c: Category) -> [f64; 4] {
    let mut v = [0.0; 4];
    v[Category::ALL.iter().position(|&x| x == c).unwrap()] = 1.0;
    v
}

/// Pair representations: first-token features of key and value, then the
/// two category one-hots.
fn re_inputs<T: Scalar>(f: &Tensor<T>, entities: &[PredictedEntity], cands: &[(usize, usize)]) -> Tensor<T> {
    let c = f.last_dim();
    let width = 2 * c + 8;
    let mut x = Tensor::zeros(&[cands.len(), width]);
    for (r, &(k, v)) in cands.iter().enumerate() {
        let row = x.row_mut(r);
        row[..c].copy_from_slice(f.row(entities[k].first()));
        row[c..2 * c].copy_from_slice(f.row(entities[v].first()));
        for (d, h) in one_hot(entities[k].category).into_iter().chain(one_hot(entities[v].category)).enumerate() {
            row[2 * c + d] = crate::numerics::cst(h);
        }
    }
    x
}

/// Candidates whose `[m, 2]` logits favour the link class (ties: no link).
pub fn re_decode(logits: &Tensor<f32>, cands: &[(usize, usize)]) -> Vec<(usize, usize)> {
    cands.iter().enumerate().filter(|(r, _)| argmax(logits.row(*r)) == 1).map(|(_, &c)| c).collect()
}

pub fn re_infer(features: &Tensor<f32>, entities: &[PredictedEntity], re: &Mlp<f32>) -> Result<Vec<(usize, usize)>> {
    let cands = re_candidates(entities);
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    let logits = re.forward(&re_inputs(features, entities, &cands))?.0;
    Ok(re_decode(&logits, &cands))
}

/// Pair strings of linked entities.
pub fn linked_pairs(entities: &[PredictedEntity], links: &[(usize, usize)]) -> Vec<StringPair> {
    links.iter().map(|&(k, v)| (entities[k].text.clone(), entities[v].text.clone())).collect()
}

// ---------------------------------------------------------------- samples

/// A document prepared for the baseline: tokens in XY-cut order.
#[derive(Clone, Debug)]
pub struct SerSample {
    pub tok: TokenizedDoc,
    pub input: EncoderInput,
    pub tags: Vec<BioTag>,
    /// Gold SER units in sorted order, "other" included.
    pub entities: Vec<PredictedEntity>,
    /// Gold links between the first units of linked entities.
    pub links: BTreeSet<(usize, usize)>,
    pub gold_pairs: Vec<StringPair>,
}

pub fn prepare_serre(doc: &Document, vocab: &Vocab, cfg: &ModelConfig) -> SerSample {
    let tok = tokenize(&sorted_document(doc), vocab, cfg.max_tokens);
    let enc_cfg = cfg.encoder.clone().unwrap_or_else(|| EncoderConfig::toy(vocab.len().max(2)));
    let input = EncoderInput::from_doc(&tok, &enc_cfg);
    let units = entity_units(&tok, doc);
    let mut first_unit: HashMap<u32, usize> = HashMap::new();
    for (i, (id, _)) in units.iter().enumerate() {
        first_unit.entry(*id).or_insert(i);
    }
    let links = doc
        .links
        .iter()
        .filter_map(|(k, v)| Some((*first_unit.get(k)?, *first_unit.get(v)?)))
        .collect();
    let entities: Vec<PredictedEntity> = units.into_iter().map(|(_, e)| e).collect();
    SerSample { tags: tags_of(&entities, tok.n()), tok, input, entities, links, gold_pairs: doc.gold_pairs() }
}

pub fn prepare_serre_all(docs: &[Document], vocab: &Vocab, cfg: &ModelConfig) -> Vec<SerSample> {
    docs.iter().map(|d| prepare_serre(d, vocab, cfg)).collect()
}

// ---------------------------------------------------------------- model

#[derive(Clone, Debug)]
pub struct SerReModel<T = f32> {
    pub cfg: ModelConfig,
    pub encoder: Encoder<T>,
    pub ser: Mlp<T>,
    pub re: Mlp<T>,
}

impl<T: Scalar> SerReModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc_cfg = cfg
            .encoder
            .clone()
            .ok_or_else(|| Error::Config("the SER+RE baseline needs its own encoder".into()))?;
        let c = cfg.c_e;
        let mut rng = SplitMix64::new(seed);
        let encoder = Encoder::new(enc_cfg, &mut rng.fork(1))?;
        let ser = Mlp::new("ser", c, c, NUM_BIO_TAGS, &mut rng.fork(3));
        let re = Mlp::new("re", 2 * c + 8, c, 2, &mut rng.fork(4));
        Ok(Self { cfg, encoder, ser, re })
    }

    /// Joint SER + RE loss on one document with gold entities fed to RE;
    /// gradients accumulate.
    pub fn accumulate_with(&mut self, s: &SerSample, input: &EncoderInput) -> Result<f64> {
        let (f, cache) = self.encoder.forward(input)?;
        let (ser_logits, ser_cache) = self.ser.forward(&f)?;
        let targets: Vec<usize> = s.tags.iter().map(|t| t.index()).collect();
        let ones = vec![T::one(); NUM_BIO_TAGS];
        let (l_ser, d_ser) = softmax_ce_weighted(&ser_logits, &targets, &ones)?;
        let mut df = self.ser.backward(&ser_cache, &d_ser);
        let mut loss = l_ser.to_f64().unwrap_or(f64::NAN);
        let cands = re_candidates(&s.entities);
        if !cands.is_empty() {
            let (re_logits, re_cache) = self.re.forward(&re_inputs(&f, &s.entities, &cands))?;
            let t: Vec<usize> = cands.iter().map(|c| usize::from(s.links.contains(c))).collect();
            let (l_re, d_re) = softmax_ce_weighted(&re_logits, &t, &[T::one(), T::one()])?;
            let dx = self.re.backward(&re_cache, &d_re);
            let c = f.last_dim();
            for (r, &(k, v)) in cands.iter().enumerate() {
                let g = dx.row(r);
                for (dst, src) in [(s.entities[k].first(), &g[..c]), (s.entities[v].first(), &g[c..2 * c])] {
                    df.row_mut(dst).iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
            loss += l_re.to_f64().unwrap_or(f64::NAN);
        }
        self.encoder.backward(&cache, &df);
        Ok(loss)
    }

    pub fn accumulate(&mut self, s: &SerSample) -> Result<f64> {
        self.accumulate_with(s, &s.input)
    }

    pub fn cast<U: Scalar>(&self) -> SerReModel<U> {
        SerReModel { cfg: self.cfg.clone(), encoder: self.encoder.cast(), ser: self.ser.cast(), re: self.re.cast() }
    }
}

impl<T: Scalar> Params<T> for SerReModel<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        let mut v = self.encoder.slots();
        v.extend(self.ser.slots());
        v.extend(self.re.slots());
        v
    }

    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v = self.encoder.slots_mut();
        v.extend(self.ser.slots_mut());
        v.extend(self.re.slots_mut());
        v
    }
}

impl Trainable for SerReModel<f32> {
    fn param_groups(&mut self) -> (Vec<&mut ParamSlot<f32>>, Vec<&mut ParamSlot<f32>>) {
        let mut heads = self.ser.slots_mut();
        heads.extend(self.re.slots_mut());
        (self.encoder.slots_mut(), heads)
    }
}

impl SerReModel<f32> {
    pub fn features(&self, s: &SerSample) -> Result<Tensor<f32>> {
        self.encoder.encode(&s.input)
    }

    /// Serial inference: SER, then RE over the predicted entities.
    pub fn predict(&self, s: &SerSample) -> Result<(Vec<PredictedEntity>, Vec<StringPair>)> {
        let f = self.features(s)?;
        let entities = ser_infer(&f, &self.ser, &s.tok)?;
        let links = re_infer(&f, &entities, &self.re)?;
        let pairs = linked_pairs(&entities, &links);
        Ok((entities, pairs))
    }

    /// RE alone over externally supplied entities (gold or perturbed).
    pub fn predict_with_entities(&self, s: &SerSample, entities: &[PredictedEntity]) -> Result<Vec<StringPair>> {
        let f = self.features(s)?;
        Ok(linked_pairs(entities, &re_infer(&f, entities, &self.re)?))
    }

    pub fn save(&self, dir: &Path, vocab: &Vocab) -> Result<()> {
        save_bundle(dir, self, vocab, &self.cfg)
    }

    pub fn load(dir: &Path) -> Result<(Self, Vocab)> {
        let (cfg, vocab, tensors) = read_bundle(dir)?;
        let mut m = Self::new(cfg, 0)?;
        load_named(&mut m, tensors)?;
        Ok((m, vocab))
    }
}

/// Micro-averaged pair F1 of the full SER→RE pipeline.
pub fn evaluate_serre(model: &SerReModel<f32>, samples: &[SerSample]) -> Result<PairF1Report> {
    let mut total = PairF1Report::from_counts(0, 0, 0);
    for s in samples {
        total = total.merge(&pair_f1(&model.predict(s)?.1, &s.gold_pairs));
    }
    Ok(total)
}

/// Joint training; model selection by pipeline pair F1 on `val_set`.
pub fn train_serre(
    model: SerReModel<f32>,
    train_set: &[SerSample],
    val_set: &[SerSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<SerReModel<f32>>> {
    let usable: Vec<&SerSample> = train_set.iter().filter(|s| s.tok.n() > 0).collect();
    let augment = cfg.word_dropout > 0.0 || cfg.layout_shift > 0.0;
    fit(
        model,
        &usable,
        cfg,
        |m, s, rng| {
            if augment {
                let input = s.input.augmented(&m.encoder.cfg, cfg.word_dropout, cfg.layout_shift, rng);
                m.accumulate_with(s, &input)
            } else {
                m.accumulate(s)
            }
        },
        |m| if val_set.is_empty() { Ok(None) } else { Ok(Some(evaluate_serre(m, val_set)?.f1)) },
    )
}

// ---------------------------------------------------------------- perturbation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SerError {
    /// A key or value entity becomes "other".
    FN,
    /// An "other" entity becomes a question or an answer.
    FP,
    /// Question and answer swap.
    CE,
    /// A multi-token entity splits into two fragments of different categories.
    EF,
}

impl SerError {
    pub const ALL: [SerError; 4] = [SerError::FN, SerError::FP, SerError::CE, SerError::EF];

    pub fn name(self) -> &'static str {
        match self {
            SerError::FN => "FN",
            SerError::FP => "FP",
            SerError::CE => "CE",
            SerError::EF => "EF",
        }
    }

    pub fn applies_to(self, e: &PredictedEntity) -> bool {
        match self {
            SerError::FN | SerError::CE => e.category.is_key_or_value(),
            SerError::FP => e.category == Category::Other,
            SerError::EF => e.tokens.len() >= 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Perturbation {
    pub entities: Vec<PredictedEntity>,
    pub eligible: usize,
    pub perturbed: usize,
}

/// Corrupts each eligible entity independently with probability `p`.
/// Entity `i` draws from its own stream seeded by `(seed, i)` and its first
/// draw decides whether it is hit, so for a fixed seed the hit set at a
/// smaller `p` is contained in the hit set at a larger one.
pub fn inject_ser_errors(
    entities: &[PredictedEntity],
    tok: &TokenizedDoc,
    kind: SerError,
    p: f64,
    seed: u64,
) -> Result<Perturbation> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("perturbation probability {p} is outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(entities.len());
    let (mut eligible, mut perturbed) = (0, 0);
    for (i, e) in entities.iter().enumerate() {
        if !kind.applies_to(e) {
            out.push(e.clone());
            continue;
        }
        eligible += 1;
        let mut rng = SplitMix64::new(seed).fork(i as u64);
        if rng.next_f64() >= p {
            out.push(e.clone());
            continue;
        }
        perturbed += 1;
        let recat = |c: Category| PredictedEntity::new(c, e.tokens.clone(), tok);
        match kind {
            SerError::FN => out.push(recat(Category::Other)),
            SerError::FP => out.push(recat(if rng.bernoulli(0.5) { Category::Question } else { Category::Answer })),
            SerError::CE => out.push(recat(if e.category == Category::Question {
                Category::Answer
            } else {
                Category::Question
            })),
            SerError::EF => {
                let cut = rng.range(1, e.tokens.len() - 1);
                let others: Vec<Category> = Category::ALL.into_iter().filter(|&c| c != e.category).collect();
                let second = *rng.choose(&others);
                out.push(PredictedEntity::new(e.category, e.tokens[..cut].to_vec(), tok));
                out.push(PredictedEntity::new(second, e.tokens[cut..].to_vec(), tok));
            }
        }
    }
    Ok(Perturbation { entities: out, eligible, perturbed })
}

/// One cell of a perturbation sweep, pooled over documents and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub error_type: String,
    pub p: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub eligible: usize,
    pub perturbed: usize,
}

/// Pair F1 of the fixed RE head over gold SER entities corrupted by each
/// error type at each probability. Document `d` under seed `s` uses the
/// perturbation stream `s * 1_000_003 + d`, so every cell sees the same
/// draws and larger `p` only adds corruptions.
pub fn perturbation_sweep(
    model: &SerReModel<f32>,
    samples: &[SerSample],
    kinds: &[SerError],
    ps: &[f64],
    seeds: &[u64],
) -> Result<Vec<PerturbRow>> {
    let features: Vec<Tensor<f32>> = samples.iter().map(|s| model.features(s)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(kinds.len() * ps.len());
    for &kind in kinds {
        for &p in ps {
            let mut total = PairF1Report::from_counts(0, 0, 0);
            let (mut eligible, mut perturbed) = (0, 0);
            for &seed in seeds {
                for (d, (s, f)) in samples.iter().zip(&features).enumerate() {
                    let stream = seed.wrapping_mul(1_000_003).wrapping_add(d as u64);
                    let pert = inject_ser_errors(&s.entities, &s.tok, kind, p, stream)?;
                    eligible += pert.eligible;
                    perturbed += pert.perturbed;
                    let links = re_infer(f, &pert.entities, &model.re)?;
                    total = total.merge(&pair_f1(&linked_pairs(&pert.entities, &links), &s.gold_pairs));
                }
            }
            rows.push(PerturbRow {
                error_type: kind.name().to_string(),
                p,
                precision: total.precision,
                recall: total.recall,
                f1: total.f1,
                eligible,
                perturbed,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------- JSON

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerEntityJson {
    pub category: Category,
    pub token_indices: Vec<usize>,
}

/// SER output of one document, indices into the XY-cut token order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerPrediction {
    pub doc_id: String,
    pub entities: Vec<SerEntityJson>,
}

impl SerPrediction {
    pub fn new(doc_id: &str, entities: &[PredictedEntity]) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            entities: entities
                .iter()
                .map(|e| SerEntityJson { category: e.category, token_indices: e.tokens.clone() })
                .collect(),
        }
    }

    /// Entities over `tok`; indices must be in range, non-empty and contiguous.
    pub fn to_entities(&self, tok: &TokenizedDoc) -> Result<Vec<PredictedEntity>> {
        self.entities
            .iter()
            .map(|e| {
                let t = &e.token_indices;
                let ok = !t.is_empty() && t.iter().all(|&i| i < tok.n()) && t.windows(2).all(|w| w[1] == w[0] + 1);
                if !ok {
                    return Err(Error::Schema(format!(
                        "document {}: SER entity {:?} is not a contiguous token run",
                        self.doc_id, t
                    )));
                }
                Ok(PredictedEntity::new(e.category, t.clone(), tok))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::mini_form;
    use crate::corpus::BBox;

    fn line(id: u32, x0: f64, y0: f64, x1: f64, y1: f64) -> Line {
        Line { id, text: format!("w{id}"), bbox: BBox::new(x0, y0, x1, y1), words: None }
    }

    fn sample() -> SerSample {
        let d = mini_form();
        let vocab = Vocab::build(std::slice::from_ref(&d));
        prepare_serre(&d, &vocab, &ModelConfig::toy(vocab.len(), 40))
    }

    #[test]
    fn single_line_is_identity() {
        assert_eq!(xycut_sort(&[line(7, 0.0, 0.0, 10.0, 10.0)]), vec![7]);
    }

    #[test]
    fn stacked_lines_sort_top_first() {
        let lines = [line(0, 0.0, 50.0, 10.0, 60.0), line(1, 0.0, 10.0, 10.0, 20.0)];
        assert_eq!(xycut_sort(&lines), vec![1, 0]);
    }

    #[test]
    fn offset_columns_read_column_by_column() {
        // rows of the right column sit between rows of the left one, so no
        // horizontal gap spans the page and the vertical gap cuts first
        let mut lines = Vec::new();
        for r in 0..4 {
            let y = 20.0 * r as f64;
            lines.push(line(r, 0.0, y, 100.0, y + 12.0));
            lines.push(line(10 + r, 200.0, y + 10.0, 300.0, y + 22.0));
        }
        assert_eq!(xycut_sort(&lines), vec![0, 1, 2, 3, 10, 11, 12, 13]);
    }

    #[test]
    fn aligned_columns_interleave_by_row() {
        let lines = [
            line(0, 0.0, 0.0, 100.0, 10.0),
            line(1, 200.0, 0.0, 300.0, 10.0),
            line(2, 0.0, 20.0, 100.0, 30.0),
            line(3, 200.0, 20.0, 300.0, 30.0),
        ];
        assert_eq!(xycut_sort(&lines), vec![0, 1, 2, 3]);
    }

    #[test]
    fn tag_round_trip() {
        for k in 0..NUM_BIO_TAGS {
            assert_eq!(BioTag::from_index(k).index(), k);
        }
        assert_eq!(BioTag::I(Category::Answer).to_string(), "I-answer");
    }

    #[test]
    fn mini_form_tags_follow_entities() {
        let s = sample();
        let names: Vec<String> = s.tags.iter().map(|t| t.to_string()).collect();
        // Name: | Alice | Address: | 12 Fox | Road
        assert_eq!(names, ["B-question", "B-answer", "B-question", "B-answer", "I-answer", "I-answer"]);
        let ents = bio_to_entities(&s.tags, &s.tok);
        assert_eq!(ents.iter().map(|e| e.text.as_str()).collect::<Vec<_>>(), ["Name:", "Alice", "Address:", "12 Fox Road"]);
    }

    #[test]
    fn separated_lines_open_two_units() {
        let mut d = mini_form();
        // push the second value line far below a distractor
        let last = d.lines.iter().map(|l| l.id).max().unwrap();
        let road = d.lines.iter().position(|l| l.text == "Road").unwrap();
        d.lines[road].bbox = BBox::new(100.0, 400.0, 160.0, 420.0);
        d.lines.push(Line { id: last + 1, text: "Footer".into(), bbox: BBox::new(100.0, 300.0, 200.0, 320.0), words: None });
        d.entities.push(crate::corpus::EntityAnn { id: 99, category: Category::Other, line_ids: vec![last + 1] });
        let vocab = Vocab::build(&[d.clone()]);
        let s = prepare_serre(&d, &vocab, &ModelConfig::toy(vocab.len(), 40));
        let texts: Vec<&str> = s.entities.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, ["Name:", "Alice", "Address:", "12 Fox", "Footer", "Road"]);
        let b = s.tags.iter().filter(|t| matches!(t, BioTag::B(Category::Answer))).count();
        assert_eq!(b, 3);
    }

    #[test]
    fn all_other_document_is_all_o() {
        let mut d = mini_form();
        for e in &mut d.entities {
            e.category = Category::Other;
        }
        d.links.clear();
        let vocab = Vocab::build(&[d.clone()]);
        let s = prepare_serre(&d, &vocab, &ModelConfig::toy(vocab.len(), 40));
        assert!(s.tags.iter().all(|&t| t == BioTag::O));
    }

    #[test]
    fn orphan_inside_is_repaired() {
        let tags = [BioTag::I(Category::Answer), BioTag::B(Category::Question), BioTag::I(Category::Answer), BioTag::O];
        let fixed = repair_bio(&tags);
        assert_eq!(fixed[0], BioTag::B(Category::Answer));
        assert_eq!(fixed[2], BioTag::B(Category::Answer));
    }

    #[test]
    fn injected_logits_recover_gold_pipeline() {
        let s = sample();
        let mut ser = Tensor::<f32>::zeros(&[s.tok.n(), NUM_BIO_TAGS]);
        for (i, t) in s.tags.iter().enumerate() {
            ser.row_mut(i)[t.index()] = 5.0;
        }
        let ents = ser_decode(&ser, &s.tok);
        let kv: Vec<PredictedEntity> = s.entities.iter().filter(|e| e.category != Category::Other).cloned().collect();
        assert_eq!(ents, kv);
        let cands = re_candidates(&ents);
        let mut re = Tensor::<f32>::zeros(&[cands.len(), 2]);
        for (r, c) in cands.iter().enumerate() {
            re.row_mut(r)[usize::from(s.links.contains(c))] = 5.0;
        }
        let pairs = linked_pairs(&ents, &re_decode(&re, &cands));
        assert_eq!(pair_f1(&pairs, &s.gold_pairs).f1, 1.0);
    }

    #[test]
    fn all_o_logits_give_no_entities() {
        let s = sample();
        let mut ser = Tensor::<f32>::zeros(&[s.tok.n(), NUM_BIO_TAGS]);
        for i in 0..s.tok.n() {
            ser.row_mut(i)[0] = 1.0;
        }
        assert!(ser_decode(&ser, &s.tok).is_empty());
    }

    #[test]
    fn candidates_are_question_to_answer() {
        let s = sample();
        let cands = re_candidates(&s.entities);
        assert_eq!(cands.len(), 4);
        for (k, v) in cands {
            assert_eq!(s.entities[k].category, Category::Question);
            assert_eq!(s.entities[v].category, Category::Answer);
        }
        let m = SerReModel::<f32>::new(s_cfg(), 0).unwrap();
        assert!(re_infer(&Tensor::zeros(&[s.tok.n(), 64]), &[], &m.re).unwrap().is_empty());
    }

    fn s_cfg() -> ModelConfig {
        let vocab = Vocab::build(&[mini_form()]);
        ModelConfig::toy(vocab.len(), 40)
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = sample();
        for kind in SerError::ALL {
            let p = inject_ser_errors(&s.entities, &s.tok, kind, 0.0, 3).unwrap();
            assert_eq!(p.entities, s.entities);
            assert_eq!(p.perturbed, 0);
        }
    }

    #[test]
    fn full_false_negatives_erase_every_pair() {
        let s = sample();
        let p = inject_ser_errors(&s.entities, &s.tok, SerError::FN, 1.0, 3).unwrap();
        assert_eq!(p.perturbed, 4);
        assert!(p.entities.iter().all(|e| e.category == Category::Other));
        assert!(re_candidates(&p.entities).is_empty());
        assert_eq!(pair_f1(&[], &s.gold_pairs).f1, 0.0);
    }

    #[test]
    fn fragmentation_splits_into_different_categories() {
        let s = sample();
        let p = inject_ser_errors(&s.entities, &s.tok, SerError::EF, 1.0, 5).unwrap();
        assert_eq!(p.eligible, 1);
        let parts: Vec<&PredictedEntity> = p.entities.iter().filter(|e| e.tokens.iter().all(|t| (3..=5).contains(t))).collect();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].category, Category::Answer);
        assert_ne!(parts[1].category, Category::Answer);
        assert_eq!(parts[0].tokens.len() + parts[1].tokens.len(), 3);
    }

    #[test]
    fn bad_probability_is_rejected() {
        let s = sample();
        assert!(inject_ser_errors(&s.entities, &s.tok, SerError::CE, 1.5, 0).is_err());
    }

    #[test]
    fn prediction_json_round_trip() {
        let s = sample();
        let pred = SerPrediction::new(&s.tok.doc_id, &s.entities);
        let json = serde_json::to_string(&pred).unwrap();
        assert!(json.contains("\"category\":\"answer\""));
        let back: SerPrediction = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_entities(&s.tok).unwrap(), s.entities);
        let bad = SerPrediction { doc_id: "x".into(), entities: vec![SerEntityJson { category: Category::Answer, token_indices: vec![3, 5] }] };
        assert!(bad.to_entities(&s.tok).is_err());
    }
}
