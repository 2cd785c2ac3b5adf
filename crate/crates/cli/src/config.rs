//! Run configuration: a flat UTF-8 `key = value` file. Blank lines and
//! lines starting with `#` are ignored; list values are comma-separated.
//! `preset = paper` switches the optimiser defaults to the full-size
//! fine-tuning values before the remaining keys are applied, whatever their
//! order in the file.

use std::path::{Path, PathBuf};

use serde::Serialize;

use peneo_core::corpus::SynthSpec;
use peneo_core::decoder::LossConfig;
use peneo_core::encoder::EncoderConfig;
use peneo_core::model::ModelConfig;
use peneo_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Pre-computed token features; when set the model has no encoder.
    pub features: Option<PathBuf>,
    pub c_e: usize,
    pub c_d: usize,
    pub layers: usize,
    pub heads: usize,
    pub coord_buckets: usize,
    pub rank_buckets: usize,
    pub rel_buckets: usize,
    pub max_tokens: usize,
    pub lambdas: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub clip_norm: Option<f64>,
    pub word_dropout: f64,
    pub layout_shift: f64,
    pub seed: u64,
    pub synth_docs: usize,
    pub synth_max_tokens: usize,
    pub synth_vocab: usize,
    pub synth_multi_line_frac: f64,
    pub synth_two_column_frac: f64,
    pub synth_stamp_prob: f64,
    pub synth_shuffle: bool,
    pub perturb_probs: Vec<f64>,
    pub perturb_seeds: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthSpec::default();
        Self {
            preset: "desk".into(),
            train_data: None,
            val_data: None,
            test_data: None,
            features: None,
            c_e: 64,
            c_d: 32,
            layers: 2,
            heads: 2,
            coord_buckets: 64,
            rank_buckets: 8,
            rel_buckets: 64,
            max_tokens: 512,
            lambdas: vec![1.0; 5],
            class_weights: vec![1.0, 10.0],
            epochs: t.epochs,
            batch_size: t.batch_size,
            encoder_lr: t.encoder_lr,
            decoder_lr: t.decoder_lr,
            weight_decay: t.weight_decay,
            warmup_ratio: t.warmup_ratio,
            clip_norm: t.clip_norm,
            word_dropout: t.word_dropout,
            layout_shift: t.layout_shift,
            seed: 0,
            synth_docs: s.num_docs,
            synth_max_tokens: s.max_tokens,
            synth_vocab: s.vocab_size,
            synth_multi_line_frac: s.multi_line_frac,
            synth_two_column_frac: s.two_column_frac,
            synth_stamp_prob: s.stamp_prob,
            synth_shuffle: s.shuffle_lines,
            perturb_probs: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            perturb_seeds: 5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("config key `{key}`: cannot parse `{v}`"))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

impl RunConfig {
    /// Reads a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            cfg.apply_text(&text)?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some((_, v)) = entries.iter().find(|(k, _)| k == "preset") {
            self.set("preset", v)?;
        }
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Sets one key, e.g. from the file or a `--set key=value` flag.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let path = || if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "preset" => match v {
                "desk" => self.preset = v.into(),
                "paper" => {
                    let p = TrainConfig::paper_preset();
                    self.preset = v.into();
                    self.epochs = p.epochs;
                    self.encoder_lr = p.encoder_lr;
                    self.decoder_lr = p.decoder_lr;
                    self.word_dropout = p.word_dropout;
                    self.layout_shift = p.layout_shift;
                }
                _ => return Err(format!("config key `preset`: expected `desk` or `paper`, got `{v}`")),
            },
            "train_data" => self.train_data = path(),
            "val_data" => self.val_data = path(),
            "test_data" => self.test_data = path(),
            "features" => self.features = path(),
            "c_e" => {
                self.c_e = parse_num(key, v)?;
                self.c_d = self.c_e / 2;
            }
            "c_d" => self.c_d = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "coord_buckets" => self.coord_buckets = parse_num(key, v)?,
            "rank_buckets" => self.rank_buckets = parse_num(key, v)?,
            "rel_buckets" => self.rel_buckets = parse_num(key, v)?,
            "max_tokens" => self.max_tokens = parse_num(key, v)?,
            "lambdas" => self.lambdas = parse_list(key, v)?,
            "class_weights" => self.class_weights = parse_list(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "encoder_lr" => self.encoder_lr = parse_num(key, v)?,
            "decoder_lr" => self.decoder_lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "warmup_ratio" => self.warmup_ratio = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "word_dropout" => self.word_dropout = parse_num(key, v)?,
            "layout_shift" => self.layout_shift = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "synth_docs" => self.synth_docs = parse_num(key, v)?,
            "synth_max_tokens" => self.synth_max_tokens = parse_num(key, v)?,
            "synth_vocab" => self.synth_vocab = parse_num(key, v)?,
            "synth_multi_line_frac" => self.synth_multi_line_frac = parse_num(key, v)?,
            "synth_two_column_frac" => self.synth_two_column_frac = parse_num(key, v)?,
            "synth_stamp_prob" => self.synth_stamp_prob = parse_num(key, v)?,
            "synth_shuffle" => self.synth_shuffle = parse_num(key, v)?,
            "perturb_probs" => self.perturb_probs = parse_list(key, v)?,
            "perturb_seeds" => self.perturb_seeds = parse_num(key, v)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// The resolved configuration in the file format, so a run can be
    /// repeated from its output directory.
    pub fn to_text(&self) -> String {
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let l = |x: &[f64]| x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("preset", self.preset.clone());
        kv("train_data", p(&self.train_data));
        kv("val_data", p(&self.val_data));
        kv("test_data", p(&self.test_data));
        kv("features", p(&self.features));
        kv("c_e", self.c_e.to_string());
        kv("c_d", self.c_d.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("coord_buckets", self.coord_buckets.to_string());
        kv("rank_buckets", self.rank_buckets.to_string());
        kv("rel_buckets", self.rel_buckets.to_string());
        kv("max_tokens", self.max_tokens.to_string());
        kv("lambdas", l(&self.lambdas));
        kv("class_weights", l(&self.class_weights));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("encoder_lr", self.encoder_lr.to_string());
        kv("decoder_lr", self.decoder_lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("warmup_ratio", self.warmup_ratio.to_string());
        kv("clip_norm", self.clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("word_dropout", self.word_dropout.to_string());
        kv("layout_shift", self.layout_shift.to_string());
        kv("seed", self.seed.to_string());
        kv("synth_docs", self.synth_docs.to_string());
        kv("synth_max_tokens", self.synth_max_tokens.to_string());
        kv("synth_vocab", self.synth_vocab.to_string());
        kv("synth_multi_line_frac", self.synth_multi_line_frac.to_string());
        kv("synth_two_column_frac", self.synth_two_column_frac.to_string());
        kv("synth_stamp_prob", self.synth_stamp_prob.to_string());
        kv("synth_shuffle", self.synth_shuffle.to_string());
        kv("perturb_probs", l(&self.perturb_probs));
        kv("perturb_seeds", self.perturb_seeds.to_string());
        out
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        if self.features.is_some() {
            let mut m = ModelConfig::external(self.c_e, self.max_tokens);
            m.c_d = self.c_d;
            return m;
        }
        ModelConfig {
            encoder: Some(EncoderConfig {
                vocab_size,
                c_e: self.c_e,
                layers: self.layers,
                heads: self.heads,
                coord_buckets: self.coord_buckets,
                rank_buckets: self.rank_buckets,
                rel_buckets: self.rel_buckets,
            }),
            c_e: self.c_e,
            c_d: self.c_d,
            max_tokens: self.max_tokens,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let lambdas: [f64; 5] = self
            .lambdas
            .clone()
            .try_into()
            .map_err(|_| "config key `lambdas`: expected 5 values".to_string())?;
        let class_weights: [f64; 2] = self
            .class_weights
            .clone()
            .try_into()
            .map_err(|_| "config key `class_weights`: expected 2 values".to_string())?;
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            encoder_lr: self.encoder_lr,
            decoder_lr: self.decoder_lr,
            weight_decay: self.weight_decay,
            warmup_ratio: self.warmup_ratio,
            clip_norm: self.clip_norm,
            loss: LossConfig { lambdas, class_weights },
            word_dropout: self.word_dropout,
            layout_shift: self.layout_shift,
            seed: self.seed,
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_docs: self.synth_docs,
            max_tokens: self.synth_max_tokens,
            vocab_size: self.synth_vocab,
            multi_line_frac: self.synth_multi_line_frac,
            two_column_frac: self.synth_two_column_frac,
            stamp_prob: self.synth_stamp_prob,
            shuffle_lines: self.synth_shuffle,
            ..SynthSpec::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.lambdas, vec![1.0; 5]);
        assert_eq!(c.class_weights, vec![1.0, 10.0]);
        assert_eq!(c.c_d, c.c_e / 2);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.warmup_ratio, 0.1);
    }

    #[test]
    fn file_values_and_comments() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\nepochs = 3\nlambdas = 1,2,3,4,5\nc_e=32\nclip_norm = none\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lambdas, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((c.c_e, c.c_d), (32, 16));
        assert_eq!(c.clip_norm, None);
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let mut c = RunConfig::default();
        c.apply_text("epochs = 7\npreset = paper\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.encoder_lr, 2e-6);
    }

    #[test]
    fn field_level_errors() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("epochs = many").unwrap_err().contains("`epochs`"));
        assert!(c.apply_text("colour = blue").unwrap_err().contains("unknown config key `colour`"));
        assert!(c.apply_text("no equals sign").unwrap_err().contains("line 1"));
        c.lambdas = vec![1.0];
        assert!(c.train_config().unwrap_err().contains("lambdas"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("train_data = a.json\nseed = 9\nperturb_probs = 0,0.25\nclip_norm = none").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }
}
