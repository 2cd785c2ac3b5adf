//! Pair-level F1, cell-level sub-task F1, gold-substitution evaluation and
//! JSON metric reports.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::TokenizedDoc;
use crate::decoder::{decode, Head, RelationMatrices, RelationScores, RelationTargets};
use crate::error::Result;
use crate::link_parser::{parse_document, ParsedPair};

pub type StringPair = (String, String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairF1Report {
    pub true_positives: usize,
    pub num_predicted: usize,
    pub num_gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PairF1Report {
    /// Zero denominators give 0, except that two empty sets score F1 = 1.
    pub fn from_counts(tp: usize, num_predicted: usize, num_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, num_predicted);
        let recall = ratio(tp, num_gold);
        let f1 = if num_predicted == 0 && num_gold == 0 {
            1.0
        } else if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { true_positives: tp, num_predicted, num_gold, precision, recall, f1 }
    }

    /// Micro-average: counts are summed, ratios recomputed.
    pub fn merge(&self, other: &Self) -> Self {
        Self::from_counts(
            self.true_positives + other.true_positives,
            self.num_predicted + other.num_predicted,
            self.num_gold + other.num_gold,
        )
    }

    pub fn sum<'a>(items: impl IntoIterator<Item = &'a Self>) -> Self {
        items.into_iter().fold(Self::from_counts(0, 0, 0), |acc, r| acc.merge(r))
    }
}

/// Exact-match multiset F1: every gold pair can be consumed by at most one
/// identical prediction.
pub fn pair_f1(pred: &[StringPair], gold: &[StringPair]) -> PairF1Report {
    let mut remaining: HashMap<&StringPair, usize> = HashMap::new();
    for g in gold {
        *remaining.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(c) = remaining.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    PairF1Report::from_counts(tp, pred.len(), gold.len())
}

pub fn pairs_as_strings(pairs: &[ParsedPair]) -> Vec<StringPair> {
    pairs.iter().map(|p| (p.key.clone(), p.value.clone())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubTask {
    /// Line extraction.
    Le,
    /// Line grouping: head and tail cells pooled.
    Lg,
}

impl SubTask {
    pub fn heads(self) -> &'static [Head] {
        match self {
            SubTask::Le => &[Head::Le],
            SubTask::Lg => &[Head::Lgh, Head::Lgt],
        }
    }
}

/// F1 over positive cells of the selected heads.
pub fn subtask_f1(pred: &RelationMatrices, gold: &RelationTargets, task: SubTask) -> PairF1Report {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for &h in task.heads() {
        let (p, g) = (pred.get(h), gold.get(h));
        for (i, j) in p.positives() {
            np += 1;
            tp += g.get(i, j) as usize;
        }
        ng += g.count();
    }
    PairF1Report::from_counts(tp, np, ng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Substitution {
    None,
    Le,
    Lg,
    Both,
}

impl Substitution {
    pub const ALL: [Substitution; 4] = [Substitution::None, Substitution::Le, Substitution::Lg, Substitution::Both];

    pub fn heads(self) -> &'static [Head] {
        match self {
            Substitution::None => &[],
            Substitution::Le => &[Head::Le],
            Substitution::Lg => &[Head::Lgh, Head::Lgt],
            Substitution::Both => &[Head::Le, Head::Lgh, Head::Lgt],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Substitution::None => "none",
            Substitution::Le => "le",
            Substitution::Lg => "lg",
            Substitution::Both => "both",
        }
    }
}

/// Replaces the chosen heads with gold (score 1.0), parses, and returns the
/// parsed pairs.
pub fn substituted_parse(
    doc: &TokenizedDoc,
    scores: &RelationScores,
    gold: &RelationTargets,
    sub: Substitution,
) -> Vec<ParsedPair> {
    let mut scores = scores.clone();
    for &h in sub.heads() {
        scores.substitute(h, gold.get(h));
    }
    parse_document(&decode(&scores), &scores, doc)
}

pub fn gt_substitution_eval(
    doc: &TokenizedDoc,
    scores: &RelationScores,
    gold: &RelationTargets,
    gold_pairs: &[StringPair],
    sub: Substitution,
) -> PairF1Report {
    pair_f1(&pairs_as_strings(&substituted_parse(doc, scores, gold, sub)), gold_pairs)
}

/// Pooled pair F1 for each ground-truth substitution, `scores[i]` being the
/// model output on `docs[i]`.
pub fn substitution_table(docs: &[EvalDoc], scores: &[RelationScores]) -> Vec<(Substitution, PairF1Report)> {
    Substitution::ALL
        .iter()
        .map(|&sub| {
            let reports: Vec<PairF1Report> = docs
                .iter()
                .zip(scores)
                .map(|(d, s)| gt_substitution_eval(&d.tok, s, &d.targets, &d.gold_pairs, sub))
                .collect();
            (sub, PairF1Report::sum(&reports))
        })
        .collect()
}

/// What the report needs from one document.
#[derive(Clone, Debug)]
pub struct EvalDoc {
    pub tok: TokenizedDoc,
    pub targets: RelationTargets,
    pub gold_pairs: Vec<StringPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocMetrics {
    pub doc_id: String,
    pub pair: PairF1Report,
    pub line_extraction: PairF1Report,
    pub line_grouping: PairF1Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub num_docs: usize,
    pub pair_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub num_predicted: usize,
    pub num_gold: usize,
    pub line_extraction_f1: f64,
    pub line_grouping_f1: f64,
    /// Documents that could not be scored (e.g. missing features).
    pub failed_docs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregate: AggregateMetrics,
    pub per_doc: Vec<DocMetrics>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// SHA-256 over the canonical JSON serialisation of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("config serialises");
    hex::encode(Sha256::digest(&bytes))
}

pub fn score_document(doc: &EvalDoc, scores: &RelationScores) -> DocMetrics {
    let matrices = decode(scores);
    let pairs = parse_document(&matrices, scores, &doc.tok);
    DocMetrics {
        doc_id: doc.tok.doc_id.clone(),
        pair: pair_f1(&pairs_as_strings(&pairs), &doc.gold_pairs),
        line_extraction: subtask_f1(&matrices, &doc.targets, SubTask::Le),
        line_grouping: subtask_f1(&matrices, &doc.targets, SubTask::Lg),
    }
}

/// Scores every document in parallel; the reduction runs in input order so
/// the report does not depend on the thread count.
pub fn run_report<C, F>(config: &C, seed: u64, docs: &[EvalDoc], predict: F) -> MetricsReport
where
    C: Serialize,
    F: Fn(&EvalDoc) -> Result<RelationScores> + Sync,
{
    let results: Vec<std::result::Result<DocMetrics, String>> = docs
        .par_iter()
        .map(|d| match predict(d) {
            Ok(s) => Ok(score_document(d, &s)),
            Err(e) => {
                log::warn!("{}: {e}", d.tok.doc_id);
                Err(d.tok.doc_id.clone())
            }
        })
        .collect();
    let mut per_doc = Vec::with_capacity(results.len());
    let mut failed_docs = Vec::new();
    for r in results {
        match r {
            Ok(m) => per_doc.push(m),
            Err(id) => failed_docs.push(id),
        }
    }
    let pair = PairF1Report::sum(per_doc.iter().map(|m| &m.pair));
    let le = PairF1Report::sum(per_doc.iter().map(|m| &m.line_extraction));
    let lg = PairF1Report::sum(per_doc.iter().map(|m| &m.line_grouping));
    MetricsReport {
        aggregate: AggregateMetrics {
            num_docs: per_doc.len(),
            pair_f1: pair.f1,
            precision: pair.precision,
            recall: pair.recall,
            true_positives: pair.true_positives,
            num_predicted: pair.num_predicted,
            num_gold: pair.num_gold,
            line_extraction_f1: le.f1,
            line_grouping_f1: lg.f1,
            failed_docs,
        },
        per_doc,
        config_hash: config_hash(config),
        seed,
    }
}
