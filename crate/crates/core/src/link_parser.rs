//! Linking parsing: assembles key-value pairs from the five relation
//! matrices, discarding any candidate on which the matrices disagree.
//!
//! Each matrix is first reduced to a per-row best link (the positive cell
//! with the highest positive-class score). Then, for every entity-head link
//! `key head → value head`, both entities are expanded line by line: the line
//! extraction map gives the tail of the current line, the two grouping maps
//! give the head and tail of the next line, and the proposed next line must
//! itself be an extracted line. The pair is kept only if the entity-tail map
//! sends the key's last token to the value's last token.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedDoc;
use crate::decoder::{Head, RelationMatrices, RelationScores};

/// Row → (best column, its positive-class score).
pub type BestLinkMap = BTreeMap<usize, (usize, f32)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedPair {
    pub key_tokens: Vec<usize>,
    pub value_tokens: Vec<usize>,
    pub key: String,
    pub value: String,
}

/// Reduces each head's matrix to its per-row argmax over positive cells.
/// Ties keep the smallest column.
pub fn build_best_maps(matrices: &RelationMatrices, scores: &RelationScores) -> [BestLinkMap; 5] {
    std::array::from_fn(|k| {
        let h = Head::ALL[k];
        let m = matrices.get(h);
        let mut map = BestLinkMap::new();
        for (i, j) in m.positives() {
            let s = scores.positive(h, i, j);
            match map.get(&i) {
                Some(&(_, best)) if !(s > best) => {}
                _ => {
                    map.insert(i, (j, s));
                }
            }
        }
        map
    })
}

struct Links<'a> {
    le: &'a BestLinkMap,
    lgh: &'a BestLinkMap,
    lgt: &'a BestLinkMap,
}

impl Links<'_> {
    fn target(map: &BestLinkMap, i: usize) -> Option<usize> {
        map.get(&i).map(|&(j, _)| j)
    }

    /// Tokens of the entity whose first line starts at `head`, or `None` if
    /// the first line is not extracted or the grouping chain loops.
    fn entity_tokens(&self, head: usize) -> Option<Vec<usize>> {
        let mut cur_tail = Self::target(self.le, head)?;
        if cur_tail < head {
            return None;
        }
        let mut tokens: Vec<usize> = (head..=cur_tail).collect();
        let mut cur_head = head;
        let mut visited = HashSet::from([head]);
        // each step consumes a distinct extracted line
        let mut budget = self.le.len();
        while let Some(next_head) = Self::target(self.lgh, cur_head) {
            if budget == 0 {
                return None;
            }
            budget -= 1;
            let Some(next_tail) = Self::target(self.lgt, cur_tail) else { break };
            if Self::target(self.le, next_head) != Some(next_tail) || next_tail < next_head {
                break;
            }
            if !visited.insert(next_head) {
                return None;
            }
            tokens.extend(next_head..=next_tail);
            cur_head = next_head;
            cur_tail = next_tail;
        }
        Some(tokens)
    }
}

/// Runs the parse over maps built from one document.
pub fn parse_links(maps: &[BestLinkMap; 5], doc: &TokenizedDoc) -> Vec<ParsedPair> {
    let links = Links { le: &maps[Head::Le.index()], lgh: &maps[Head::Lgh.index()], lgt: &maps[Head::Lgt.index()] };
    let elt = &maps[Head::Elt.index()];
    let n = doc.n();
    let mut out = Vec::new();
    for (&key_head, &(value_head, _)) in &maps[Head::Elh.index()] {
        let Some(key) = links.entity_tokens(key_head) else { continue };
        let Some(value) = links.entity_tokens(value_head) else { continue };
        let (key_tail, value_tail) = (*key.last().unwrap(), *value.last().unwrap());
        if Links::target(elt, key_tail) != Some(value_tail) {
            continue;
        }
        if key.iter().chain(&value).any(|&t| t >= n) {
            continue;
        }
        out.push(ParsedPair { key: doc.join(&key), value: doc.join(&value), key_tokens: key, value_tokens: value });
    }
    out
}

/// `decode` → best maps → parse, in one call.
pub fn parse_document(matrices: &RelationMatrices, scores: &RelationScores, doc: &TokenizedDoc) -> Vec<ParsedPair> {
    parse_links(&build_best_maps(matrices, scores), doc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseOutputPair {
    pub key: String,
    pub value: String,
    pub key_token_indices: Vec<usize>,
    pub value_token_indices: Vec<usize>,
}

/// One document of the parse output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseOutput {
    pub doc_id: String,
    pub pairs: Vec<ParseOutputPair>,
}

impl ParseOutput {
    pub fn new(doc_id: &str, pairs: &[ParsedPair]) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            pairs: pairs
                .iter()
                .map(|p| ParseOutputPair {
                    key: p.key.clone(),
                    value: p.value.clone(),
                    key_token_indices: p.key_tokens.clone(),
                    value_token_indices: p.value_tokens.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::mini_form;
    use crate::corpus::{tokenize, Vocab, DEFAULT_MAX_TOKENS};
    use crate::decoder::{build_targets, BinaryMatrix};

    fn fixture() -> (TokenizedDoc, RelationMatrices) {
        let d = mini_form();
        let t = tokenize(&d, &Vocab::build(std::slice::from_ref(&d)), DEFAULT_MAX_TOKENS);
        let y = build_targets(&t, &d).0;
        (t, y)
    }

    fn strings(p: &[ParsedPair]) -> Vec<(&str, &str)> {
        p.iter().map(|p| (p.key.as_str(), p.value.as_str())).collect()
    }

    #[test]
    fn empty_matrix_gives_empty_map() {
        let m = RelationMatrices::zeros(4);
        let maps = build_best_maps(&m, &RelationScores::uniform(4));
        assert!(maps.iter().all(|m| m.is_empty()));
    }

    #[test]
    fn best_map_keeps_highest_score() {
        let mut m = RelationMatrices::zeros(6);
        m.get_mut(Head::Le).set(1, 2, true);
        m.get_mut(Head::Le).set(1, 5, true);
        let mut s = RelationScores::uniform(6);
        s.probs[0][(6 + 2) * 2 + 1] = 0.7;
        s.probs[0][(6 + 5) * 2 + 1] = 0.9;
        let maps = build_best_maps(&m, &s);
        assert_eq!(maps[0].get(&1), Some(&(5, 0.9)));
        assert_eq!(maps[0].len(), 1);
    }

    #[test]
    fn mini_form_parses_both_pairs() {
        let (t, y) = fixture();
        let pairs = parse_document(&y, &RelationScores::from_matrices(&y), &t);
        assert_eq!(strings(&pairs), vec![("Name:", "Alice"), ("Address:", "12 Fox Road")]);
        assert_eq!(pairs[1].value_tokens, vec![3, 4, 5]);
    }

    #[test]
    fn empty_maps_parse_to_nothing() {
        let (t, _) = fixture();
        let maps: [BestLinkMap; 5] = Default::default();
        assert!(parse_links(&maps, &t).is_empty());
    }

    #[test]
    fn missing_tail_link_drops_multi_line_pair() {
        let (t, mut y) = fixture();
        y.get_mut(Head::Elt).set(2, 5, false);
        let pairs = parse_document(&y, &RelationScores::from_matrices(&y), &t);
        assert_eq!(strings(&pairs), vec![("Name:", "Alice")]);
    }

    #[test]
    fn cyclic_grouping_terminates_and_drops() {
        let (t, mut y) = fixture();
        // value lines (3,4) and (5,5) group into each other
        y.get_mut(Head::Lgh).set(5, 3, true);
        y.get_mut(Head::Lgt).set(5, 4, true);
        let pairs = parse_document(&y, &RelationScores::from_matrices(&y), &t);
        assert_eq!(strings(&pairs), vec![("Name:", "Alice")]);
    }

    #[test]
    fn self_loop_terminates() {
        let (t, mut y) = fixture();
        y.get_mut(Head::Lgh).set(0, 0, true);
        y.get_mut(Head::Lgt).set(0, 0, true);
        let pairs = parse_document(&y, &RelationScores::from_matrices(&y), &t);
        assert_eq!(strings(&pairs), vec![("Address:", "12 Fox Road")]);
    }

    #[test]
    fn reversed_span_is_rejected() {
        let (t, mut y) = fixture();
        let mut le = BinaryMatrix::zeros(6);
        for (i, j) in y.get(Head::Le).positives() {
            le.set(i, j, true);
        }
        le.set(3, 4, false);
        le.set(3, 2, true);
        y.mats[Head::Le.index()] = le;
        let pairs = parse_document(&y, &RelationScores::from_matrices(&y), &t);
        assert_eq!(strings(&pairs), vec![("Name:", "Alice")]);
    }

    #[test]
    fn parse_output_shape() {
        let (t, y) = fixture();
        let pairs = parse_document(&y, &RelationScores::from_matrices(&y), &t);
        let json = serde_json::to_value(ParseOutput::new(&t.doc_id, &pairs)).unwrap();
        assert_eq!(json["doc_id"], "mini-form");
        assert_eq!(json["pairs"][1]["value"], "12 Fox Road");
        assert_eq!(json["pairs"][1]["value_token_indices"], serde_json::json!([3, 4, 5]));
    }
}
