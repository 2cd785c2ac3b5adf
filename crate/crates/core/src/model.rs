//! The full PEneo model (token features → decoder), prepared training
//! samples, inference and on-disk persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Document, TokenizedDoc, Vocab};
use crate::decoder::{build_targets, decode, Decoder, LossBreakdown, LossConfig, RelationScores, RelationTargets};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput, FeatureStore};
use crate::error::{Error, Result};
use crate::evalkit::{EvalDoc, StringPair};
use crate::link_parser::{parse_document, ParsedPair};
use crate::numerics::{checkpoint, ParamSlot, Params, Scalar, SplitMix64, Tensor};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "model.json";

/// Architecture of a PEneo model. Without an encoder, features are read from
/// an external feature file of width `c_e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: Option<EncoderConfig>,
    pub c_e: usize,
    pub c_d: usize,
    pub max_tokens: usize,
}

impl ModelConfig {
    /// Toy encoder with `c_d = c_e / 2`.
    pub fn toy(vocab_size: usize, max_tokens: usize) -> Self {
        let enc = EncoderConfig::toy(vocab_size);
        Self { c_e: enc.c_e, c_d: enc.c_e / 2, encoder: Some(enc), max_tokens }
    }

    pub fn external(c_e: usize, max_tokens: usize) -> Self {
        Self { encoder: None, c_e, c_d: c_e / 2, max_tokens }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = &self.encoder {
            e.validate()?;
            if e.c_e != self.c_e {
                return Err(Error::Config(format!("model: c_e={} but encoder c_e={}", self.c_e, e.c_e)));
            }
        }
        if self.c_e == 0 || self.c_d == 0 {
            return Err(Error::Config("model: c_e and c_d must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("model: max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A document with everything training and evaluation need, computed once.
#[derive(Clone, Debug)]
pub struct Sample {
    pub doc: Document,
    pub tok: TokenizedDoc,
    pub input: EncoderInput,
    pub targets: RelationTargets,
    pub gold_pairs: Vec<StringPair>,
}

impl Sample {
    pub fn eval_doc(&self) -> EvalDoc {
        EvalDoc { tok: self.tok.clone(), targets: self.targets.clone(), gold_pairs: self.gold_pairs.clone() }
    }
}

pub fn prepare(doc: &Document, vocab: &Vocab, cfg: &ModelConfig) -> Sample {
    let tok = tokenize(doc, vocab, cfg.max_tokens);
    let (targets, _) = build_targets(&tok, doc);
    let enc_cfg = cfg.encoder.clone().unwrap_or_else(|| EncoderConfig::toy(vocab.len().max(2)));
    let input = EncoderInput::from_doc(&tok, &enc_cfg);
    Sample { gold_pairs: doc.gold_pairs(), doc: doc.clone(), tok, input, targets }
}

pub fn prepare_all(docs: &[Document], vocab: &Vocab, cfg: &ModelConfig) -> Vec<Sample> {
    docs.iter().map(|d| prepare(d, vocab, cfg)).collect()
}

#[derive(Clone, Debug)]
pub struct PeneoModel<T = f32> {
    pub cfg: ModelConfig,
    pub encoder: Option<Encoder<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> PeneoModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let encoder = match &cfg.encoder {
            Some(e) => Some(Encoder::new(e.clone(), &mut rng.fork(1))?),
            None => None,
        };
        let decoder = Decoder::new(cfg.c_e, cfg.c_d, &mut rng.fork(2))?;
        Ok(Self { cfg, encoder, decoder })
    }

    /// Token features, from the encoder or the external store.
    pub fn features(&self, sample: &Sample, store: Option<&FeatureStore>) -> Result<Tensor<T>> {
        match (&self.encoder, store) {
            (Some(enc), _) => enc.encode(&sample.input),
            (None, Some(s)) => {
                let f = s.get(&sample.tok.doc_id, sample.tok.n())?;
                if f.last_dim() != self.cfg.c_e {
                    return Err(Error::Features {
                        doc_id: sample.tok.doc_id.clone(),
                        reason: format!("feature width {} != c_e {}", f.last_dim(), self.cfg.c_e),
                    });
                }
                Ok(f.cast())
            }
            (None, None) => Err(Error::Config("model has no encoder and no feature file was given".into())),
        }
    }

    /// Forward, loss and backward for one document; gradients accumulate.
    pub fn accumulate(
        &mut self,
        sample: &Sample,
        store: Option<&FeatureStore>,
        loss: &LossConfig,
    ) -> Result<LossBreakdown> {
        self.accumulate_with(sample, &sample.input, store, loss)
    }

    /// As [`Self::accumulate`], with encoder input `input` in place of the
    /// sample's own (used for augmentation).
    pub fn accumulate_with(
        &mut self,
        sample: &Sample,
        input: &EncoderInput,
        store: Option<&FeatureStore>,
        loss: &LossConfig,
    ) -> Result<LossBreakdown> {
        if sample.tok.n() == 0 {
            return Ok(LossBreakdown::default());
        }
        match &self.encoder {
            Some(enc) => {
                let (f, cache) = enc.forward(input)?;
                let (out, df) = self.decoder.loss_and_grads(&f, &sample.targets, loss)?;
                self.encoder.as_mut().expect("checked above").backward(&cache, &df);
                Ok(out)
            }
            None => {
                let f = self.features(sample, store)?;
                Ok(self.decoder.loss_and_grads(&f, &sample.targets, loss)?.0)
            }
        }
    }

    pub fn scores(&self, sample: &Sample, store: Option<&FeatureStore>) -> Result<RelationScores> {
        if sample.tok.n() == 0 {
            return Ok(RelationScores::uniform(0));
        }
        self.decoder.scores(&self.features(sample, store)?)
    }

    pub fn parse(&self, sample: &Sample, store: Option<&FeatureStore>) -> Result<Vec<ParsedPair>> {
        let s = self.scores(sample, store)?;
        Ok(parse_document(&decode(&s), &s, &sample.tok))
    }

    pub fn cast<U: Scalar>(&self) -> PeneoModel<U> {
        PeneoModel {
            cfg: self.cfg.clone(),
            encoder: self.encoder.as_ref().map(|e| e.cast()),
            decoder: self.decoder.cast(),
        }
    }

    /// Encoder slots and decoder slots, separately, for per-group learning
    /// rates.
    pub fn slot_groups_mut(&mut self) -> (Vec<&mut ParamSlot<T>>, Vec<&mut ParamSlot<T>>) {
        let enc = self.encoder.as_mut().map(|e| e.slots_mut()).unwrap_or_default();
        (enc, self.decoder.slots_mut())
    }
}

impl<T: Scalar> Params<T> for PeneoModel<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        let mut v = self.encoder.as_ref().map(|e| e.slots()).unwrap_or_default();
        v.extend(self.decoder.slots());
        v
    }

    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let (mut e, d) = self.slot_groups_mut();
        e.extend(d);
        e
    }
}

impl PeneoModel<f32> {
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        named_tensors(self)
    }

    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
        load_named(self, tensors)
    }

    /// Writes `model.ckpt`, `vocab.json` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path, vocab: &Vocab) -> Result<()> {
        save_bundle(dir, self, vocab, &self.cfg)
    }

    pub fn load(dir: &Path) -> Result<(Self, Vocab)> {
        let (cfg, vocab, tensors) = read_bundle(dir)?;
        let mut model = Self::new(cfg, 0)?;
        model.load_tensors(tensors)?;
        Ok((model, vocab))
    }
}

pub fn named_tensors<P: Params<f32>>(p: &P) -> Vec<(String, Tensor<f32>)> {
    p.slots().into_iter().map(|s| (s.name.clone(), s.value.clone())).collect()
}

/// Overwrites parameter values by name; every slot must be present with
/// matching shape and no tensor may be left over.
pub fn load_named<P: Params<f32>>(p: &mut P, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    for slot in p.slots_mut() {
        let t = by_name
            .remove(&slot.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", slot.name)))?;
        if t.dims() != slot.value.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                slot.name,
                t.dims(),
                slot.value.dims()
            )));
        }
        slot.value = t;
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

pub(crate) fn save_bundle<P: Params<f32>>(dir: &Path, p: &P, vocab: &Vocab, cfg: &ModelConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &named_tensors(p))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let cfg_path = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))
}

pub(crate) fn read_bundle(dir: &Path) -> Result<(ModelConfig, Vocab, Vec<(String, Tensor<f32>)>)> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    Ok((cfg, vocab, checkpoint::load(&dir.join(CHECKPOINT_FILE))?))
}
