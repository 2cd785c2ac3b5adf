//! Subcommand bodies. Each returns the files it wrote; `run` adds the
//! manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use peneo_core::baseline_serre::{
    perturbation_sweep, prepare_serre, prepare_serre_all, train_serre, SerError, SerPrediction, SerReModel, SerSample,
};
use peneo_core::corpus::fixtures::mini_form;
use peneo_core::corpus::{
    corpus_stats, generate_synthetic_corpus, load_dataset, relabel_document, save_dataset, Document, Vocab,
};
use peneo_core::decoder::RelationScores;
use peneo_core::encoder::{EncoderConfig, FeatureStore};
use peneo_core::evalkit::{config_hash, pair_f1, run_report, substitution_table, EvalDoc, PairF1Report};
use peneo_core::link_parser::ParseOutput;
use peneo_core::model::{prepare, prepare_all, ModelConfig, PeneoModel};
use peneo_core::numerics::{grad_check, GradCheckOptions};
use peneo_core::train::train;
use peneo_core::Error;

use crate::config::RunConfig;
use crate::manifest::{hash_path, Manifest};
use crate::{Cli, Command, Failure, Pipeline};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_LIMIT: f64 = 1e-3;

const PIPELINE_FILE: &str = "pipeline";

struct Run {
    cfg: RunConfig,
    pipeline: Option<Pipeline>,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn input(&mut self, role: &str, path: &Path) -> Result<(), Failure> {
        self.inputs.insert(role.to_string(), hash_path(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
        let p = self.out.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        self.write(name, text + "\n")
    }

    /// Pipeline of a saved model: the flag, else what `train` recorded.
    fn model_pipeline(&self, dir: &Path) -> Pipeline {
        self.pipeline.unwrap_or_else(|| match fs::read_to_string(dir.join(PIPELINE_FILE)).as_deref().map(str::trim) {
            Ok("serre") => Pipeline::Serre,
            _ => Pipeline::Peneo,
        })
    }

    fn dataset(&mut self, role: &str, path: &Path) -> Result<Vec<Document>, Failure> {
        self.input(role, path)?;
        let loaded = load_dataset(path)?;
        if loaded.skipped > 0 {
            log::warn!("{}: skipped {} invalid records", path.display(), loaded.skipped);
        }
        log::info!("{}: {} documents", path.display(), loaded.documents.len());
        Ok(loaded.documents)
    }

    fn features(&mut self) -> Result<Option<FeatureStore>, Failure> {
        match self.cfg.features.clone() {
            Some(p) => {
                self.input("features", &p)?;
                Ok(Some(FeatureStore::load(&p)?))
            }
            None => Ok(None),
        }
    }
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| Failure::Usage(format!("no {what} given (flag or config key)")))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let start = Instant::now();
    let common = cli.common;
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(Failure::Usage)?;
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(Failure::Usage)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let name = cli.command.name();
    let out = common.out.unwrap_or_else(|| PathBuf::from("peneo-out").join(name));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = Run { cfg, pipeline: common.pipeline, out, inputs: BTreeMap::new(), outputs: Vec::new() };
    if let Some(p) = &common.config {
        run.input("config", p)?;
    }

    let pipeline = match cli.command {
        Command::Train { train, val } => cmd_train(&mut run, train, val)?,
        Command::Eval { model, data, gold, ser } => cmd_eval(&mut run, model, data, gold, ser)?,
        Command::Parse { model, data } => cmd_parse(&mut run, &model, data)?,
        Command::Perturb { model, data } => cmd_perturb(&mut run, &model, data)?,
        Command::Relabel { data } => cmd_relabel(&mut run, &data)?,
        Command::Synth { docs } => cmd_synth(&mut run, docs)?,
        Command::Gradcheck => cmd_gradcheck(&mut run)?,
    };

    let manifest = Manifest {
        command: name,
        argv: std::env::args().collect(),
        pipeline: pipeline.name(),
        seed: run.cfg.seed,
        config: &run.cfg,
        config_text: run.cfg.to_text(),
        config_hash: config_hash(&run.cfg),
        versions: Manifest::versions(),
        inputs: &run.inputs,
        outputs: &run.outputs,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    let p = run.out.join("manifest.json");
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    log::info!("wrote {} in {:.1}s", run.out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

// ------------------------------------------------------------------ train

fn cmd_train(run: &mut Run, train_flag: Option<PathBuf>, val_flag: Option<PathBuf>) -> Result<Pipeline, Failure> {
    if train_flag.is_some() {
        run.cfg.train_data = train_flag;
    }
    if val_flag.is_some() {
        run.cfg.val_data = val_flag;
    }
    let pipeline = run.pipeline.unwrap_or(Pipeline::Peneo);
    let tc = run.cfg.train_config().map_err(Failure::Usage)?;
    let train_docs = run.dataset("train_data", &required(run.cfg.train_data.clone(), "training data")?)?;
    let val_docs = match run.cfg.val_data.clone() {
        Some(p) => run.dataset("val_data", &p)?,
        None => Vec::new(),
    };
    let vocab = Vocab::build(&train_docs);
    let mcfg = run.cfg.model_config(vocab.len());
    mcfg.validate()?;
    let seed = run.cfg.seed;

    let (log, best_epoch, best_val_f1) = match pipeline {
        Pipeline::Peneo => {
            let store = run.features()?;
            let tr = prepare_all(&train_docs, &vocab, &mcfg);
            let va = prepare_all(&val_docs, &vocab, &mcfg);
            let outcome = train(PeneoModel::new(mcfg, seed)?, &tr, &va, store.as_ref(), &tc)?;
            outcome.model.save(&run.out, &vocab)?;
            (outcome.log, outcome.best_epoch, outcome.best_val_f1)
        }
        Pipeline::Serre => {
            if mcfg.encoder.is_none() {
                return Err(Failure::Usage("the serre pipeline needs the built-in encoder; unset `features`".into()));
            }
            let tr = prepare_serre_all(&train_docs, &vocab, &mcfg);
            let va = prepare_serre_all(&val_docs, &vocab, &mcfg);
            let outcome = train_serre(SerReModel::new(mcfg, seed)?, &tr, &va, &tc)?;
            outcome.model.save(&run.out, &vocab)?;
            (outcome.log, outcome.best_epoch, outcome.best_val_f1)
        }
    };
    if log.iter().any(|e| !e.mean_loss.is_finite()) {
        return Err(Failure::Numeric("training loss is not finite".into()));
    }
    run.outputs.extend(["model.ckpt", "model.json", "vocab.json"].map(String::from));
    run.write(PIPELINE_FILE, format!("{}\n", pipeline.name()))?;
    run.write_json("train_log.json", &log)?;
    log::info!("best epoch {best_epoch}, validation F1 {best_val_f1:?}");
    Ok(pipeline)
}

// ------------------------------------------------------------------- eval

#[derive(Serialize)]
struct SubstitutionRow {
    setting: &'static str,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize)]
struct SerreDocMetrics {
    doc_id: String,
    pair: PairF1Report,
}

#[derive(Serialize)]
struct SerreReport {
    aggregate: PairF1Report,
    per_doc: Vec<SerreDocMetrics>,
    config_hash: String,
    seed: u64,
}

fn eval_data(run: &mut Run, data: Option<PathBuf>) -> Result<Vec<Document>, Failure> {
    if data.is_some() {
        run.cfg.test_data = data;
    }
    let p = required(run.cfg.test_data.clone(), "evaluation data")?;
    run.dataset("test_data", &p)
}

fn load_model(run: &mut Run, dir: &Path) -> Result<(PeneoModel, Vocab), Failure> {
    run.input("model", dir)?;
    Ok(PeneoModel::load(dir)?)
}

fn load_serre(run: &mut Run, dir: &Path) -> Result<(SerReModel, Vocab), Failure> {
    run.input("model", dir)?;
    Ok(SerReModel::load(dir)?)
}

/// Relation scores per document, in input order.
fn peneo_scores(
    model: &PeneoModel,
    samples: &[peneo_core::model::Sample],
    store: Option<&FeatureStore>,
) -> Vec<peneo_core::Result<RelationScores>> {
    samples.par_iter().map(|s| model.scores(s, store)).collect()
}

fn cmd_eval(
    run: &mut Run,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    gold: bool,
    ser: Option<PathBuf>,
) -> Result<Pipeline, Failure> {
    let docs = eval_data(run, data)?;
    let seed = run.cfg.seed;
    if gold {
        let vocab = Vocab::build(&docs);
        let mcfg = run.cfg.model_config(vocab.len());
        let evals: Vec<EvalDoc> = prepare_all(&docs, &vocab, &mcfg).iter().map(|s| s.eval_doc()).collect();
        let report = run_report(&run.cfg, seed, &evals, |d| Ok(RelationScores::from_matrices(&d.targets)));
        run.write("report.json", report.to_json_pretty() + "\n")?;
        return Ok(Pipeline::Peneo);
    }
    let dir = required(model, "model directory (--model)")?;
    match run.model_pipeline(&dir) {
        Pipeline::Peneo => {
            if ser.is_some() {
                return Err(Failure::Usage("--ser applies to the serre pipeline only".into()));
            }
            let (model, vocab) = load_model(run, &dir)?;
            let store = run.features()?;
            let samples = prepare_all(&docs, &vocab, &model.cfg);
            let evals: Vec<EvalDoc> = samples.iter().map(|s| s.eval_doc()).collect();
            let scores = peneo_scores(&model, &samples, store.as_ref());
            let report = run_report(&run.cfg, seed, &evals, |d| {
                let i = evals.iter().position(|e| std::ptr::eq(e, d)).expect("document from this batch");
                match &scores[i] {
                    Ok(s) => Ok(s.clone()),
                    Err(e) => Err(Error::Features { doc_id: d.tok.doc_id.clone(), reason: e.to_string() }),
                }
            });
            run.write("report.json", report.to_json_pretty() + "\n")?;
            let scored: Vec<(EvalDoc, RelationScores)> =
                evals.into_iter().zip(scores).filter_map(|(d, s)| s.ok().map(|s| (d, s))).collect();
            let (ds, ss): (Vec<EvalDoc>, Vec<RelationScores>) = scored.into_iter().unzip();
            let table: Vec<SubstitutionRow> = substitution_table(&ds, &ss)
                .into_iter()
                .map(|(s, r)| SubstitutionRow { setting: s.name(), precision: r.precision, recall: r.recall, f1: r.f1 })
                .collect();
            run.write_json("substitution.json", &table)?;
            Ok(Pipeline::Peneo)
        }
        Pipeline::Serre => {
            let (model, vocab) = load_serre(run, &dir)?;
            let samples = prepare_serre_all(&docs, &vocab, &model.cfg);
            let imported: Option<HashMap<String, SerPrediction>> = match &ser {
                Some(p) => {
                    run.input("ser", p)?;
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let preds: Vec<SerPrediction> = serde_json::from_str(&text).map_err(Error::from)?;
                    Some(preds.into_iter().map(|p| (p.doc_id.clone(), p)).collect())
                }
                None => None,
            };
            let per_doc = samples
                .par_iter()
                .map(|s| {
                    let pairs = match &imported {
                        Some(m) => {
                            let e = match m.get(&s.tok.doc_id) {
                                Some(p) => p.to_entities(&s.tok)?,
                                None => Vec::new(),
                            };
                            model.predict_with_entities(s, &e)?
                        }
                        None => model.predict(s)?.1,
                    };
                    Ok(SerreDocMetrics { doc_id: s.tok.doc_id.clone(), pair: pair_f1(&pairs, &s.gold_pairs) })
                })
                .collect::<peneo_core::Result<Vec<_>>>()?;
            let report = SerreReport {
                aggregate: PairF1Report::sum(per_doc.iter().map(|m| &m.pair)),
                per_doc,
                config_hash: config_hash(&run.cfg),
                seed,
            };
            run.write_json("report.json", &report)?;
            Ok(Pipeline::Serre)
        }
    }
}

// ------------------------------------------------------------------ parse

#[derive(Serialize)]
struct KeyValue<'a> {
    key: &'a str,
    value: &'a str,
}

#[derive(Serialize)]
struct SerrePairs<'a> {
    doc_id: &'a str,
    pairs: Vec<KeyValue<'a>>,
}

fn cmd_parse(run: &mut Run, dir: &Path, data: Option<PathBuf>) -> Result<Pipeline, Failure> {
    let docs = eval_data(run, data)?;
    match run.model_pipeline(dir) {
        Pipeline::Peneo => {
            let (model, vocab) = load_model(run, dir)?;
            let store = run.features()?;
            let out = docs
                .par_iter()
                .map(|d| {
                    let s = prepare(d, &vocab, &model.cfg);
                    Ok(ParseOutput::new(&s.tok.doc_id, &model.parse(&s, store.as_ref())?))
                })
                .collect::<peneo_core::Result<Vec<_>>>()?;
            run.write_json("pairs.json", &out)?;
            Ok(Pipeline::Peneo)
        }
        Pipeline::Serre => {
            let (model, vocab) = load_serre(run, dir)?;
            let samples: Vec<SerSample> = docs.iter().map(|d| prepare_serre(d, &vocab, &model.cfg)).collect();
            let preds = samples.par_iter().map(|s| model.predict(s)).collect::<peneo_core::Result<Vec<_>>>()?;
            let ser: Vec<SerPrediction> =
                samples.iter().zip(&preds).map(|(s, (e, _))| SerPrediction::new(&s.tok.doc_id, e)).collect();
            let pairs: Vec<SerrePairs> = samples
                .iter()
                .zip(&preds)
                .map(|(s, (_, p))| SerrePairs {
                    doc_id: &s.tok.doc_id,
                    pairs: p.iter().map(|(k, v)| KeyValue { key: k, value: v }).collect(),
                })
                .collect();
            run.write_json("pairs.json", &pairs)?;
            run.write_json("ser.json", &ser)?;
            Ok(Pipeline::Serre)
        }
    }
}

// ---------------------------------------------------------------- perturb

fn cmd_perturb(run: &mut Run, dir: &Path, data: Option<PathBuf>) -> Result<Pipeline, Failure> {
    if run.model_pipeline(dir) != Pipeline::Serre {
        return Err(Failure::Usage("perturb needs a model trained with --pipeline serre".into()));
    }
    let docs = eval_data(run, data)?;
    let (model, vocab) = load_serre(run, dir)?;
    let samples = prepare_serre_all(&docs, &vocab, &model.cfg);
    let seeds: Vec<u64> = (0..run.cfg.perturb_seeds).map(|k| run.cfg.seed + k).collect();
    let rows = perturbation_sweep(&model, &samples, &SerError::ALL, &run.cfg.perturb_probs, &seeds)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::Usage(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Usage(format!("csv: {e}")))?;
    run.write("perturb.csv", bytes)?;
    Ok(Pipeline::Serre)
}

// ---------------------------------------------------------------- relabel

fn cmd_relabel(run: &mut Run, data: &Path) -> Result<Pipeline, Failure> {
    let docs = run.dataset("data", data)?;
    let mut lines = Vec::with_capacity(docs.len());
    let mut review = Vec::new();
    for d in &docs {
        let (ld, r) = relabel_document(d);
        lines.push(ld);
        review.extend(r);
    }
    let p = run.out.join("lines.json");
    save_dataset(&p, &lines)?;
    run.outputs.push("lines.json".into());
    run.write_json("lines.review.json", &review)?;
    log::info!("{} documents, {} borderline splits for review", lines.len(), review.len());
    Ok(run.pipeline.unwrap_or(Pipeline::Peneo))
}

// ------------------------------------------------------------------ synth

fn cmd_synth(run: &mut Run, docs: Option<usize>) -> Result<Pipeline, Failure> {
    if let Some(n) = docs {
        run.cfg.synth_docs = n;
    }
    let corpus = generate_synthetic_corpus(&run.cfg.synth_spec(), run.cfg.seed)?;
    let p = run.out.join("corpus.json");
    save_dataset(&p, &corpus)?;
    run.outputs.push("corpus.json".into());
    run.write_json("stats.json", &corpus_stats(&corpus))?;
    Ok(run.pipeline.unwrap_or(Pipeline::Peneo))
}

// -------------------------------------------------------------- gradcheck

#[derive(Serialize)]
struct GradcheckSummary {
    max_rel_error: f64,
    worst_slot: String,
    worst_index: usize,
    analytic: f64,
    numeric: f64,
    coords_checked: usize,
    limit: f64,
}

fn cmd_gradcheck(run: &mut Run) -> Result<Pipeline, Failure> {
    let pipeline = run.pipeline.unwrap_or(Pipeline::Peneo);
    let d = mini_form();
    let vocab = Vocab::build(std::slice::from_ref(&d));
    let enc = EncoderConfig { vocab_size: vocab.len(), c_e: 8, layers: 2, heads: 2, coord_buckets: 16, rank_buckets: 4, rel_buckets: 8 };
    let mcfg = ModelConfig { c_e: 8, c_d: 4, encoder: Some(enc), max_tokens: 12 };
    let opts = GradCheckOptions { coords_per_slot: 16, seed: run.cfg.seed, ..Default::default() };
    let report = match pipeline {
        Pipeline::Peneo => {
            let loss = run.cfg.train_config().map_err(Failure::Usage)?.loss;
            let s = prepare(&d, &vocab, &mcfg);
            let mut m = PeneoModel::<f32>::new(mcfg, run.cfg.seed)?.cast::<f64>();
            grad_check(&mut m, |m: &mut PeneoModel<f64>| m.accumulate(&s, None, &loss).map_or(f64::NAN, |b| b.total), &opts)
        }
        Pipeline::Serre => {
            let s = prepare_serre(&d, &vocab, &mcfg);
            let mut m = SerReModel::<f32>::new(mcfg, run.cfg.seed)?.cast::<f64>();
            grad_check(&mut m, |m: &mut SerReModel<f64>| m.accumulate(&s).unwrap_or(f64::NAN), &opts)
        }
    };
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
        report.max_rel_error, report.coords_checked, report.worst_slot, report.worst_index
    );
    run.write_json(
        "gradcheck.json",
        &GradcheckSummary {
            max_rel_error: report.max_rel_error,
            worst_slot: report.worst_slot.clone(),
            worst_index: report.worst_index,
            analytic: report.analytic,
            numeric: report.numeric,
            coords_checked: report.coords_checked,
            limit: GRADCHECK_LIMIT,
        },
    )?;
    if !(report.max_rel_error <= GRADCHECK_LIMIT) {
        return Err(Failure::Numeric(format!(
            "gradient check failed: {:.3e} exceeds {GRADCHECK_LIMIT:.0e}",
            report.max_rel_error
        )));
    }
    Ok(pipeline)
}
