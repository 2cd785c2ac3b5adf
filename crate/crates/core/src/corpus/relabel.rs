//! Splits entity-level word sequences into OCR lines.
//!
//! A new line starts whenever the vertical distance between the y-centres of
//! two adjacent words exceeds the mean word height of the entity. Gaps within
//! ±20% of that threshold are reported for manual review.

use serde::{Deserialize, Serialize};

use crate::corpus::schema::{BBox, Document, EntityAnn, Line, Word};

/// Relative band around the threshold that flags a split decision for review.
pub const REVIEW_BAND: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledLine {
    pub text: String,
    pub bbox: BBox,
    pub words: Vec<Word>,
}

/// A split decision whose gap sat close to the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub doc_id: String,
    pub entity_id: Option<u32>,
    /// Index of the later word of the adjacent pair within the entity.
    pub word_index: usize,
    pub gap: f64,
    pub threshold: f64,
    pub split: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RelabelOutcome {
    pub lines: Vec<RelabeledLine>,
    /// `(word_index, gap, threshold, split)` for borderline decisions.
    pub borderline: Vec<(usize, f64, f64, bool)>,
}

fn make_line(words: Vec<Word>) -> RelabeledLine {
    let bbox = words.iter().skip(1).fold(words[0].bbox, |b, w| b.union(&w.bbox));
    let text = words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
    RelabeledLine { text, bbox, words }
}

/// Partitions an entity's ordered words into lines.
pub fn relabel_entities_to_lines(words: &[Word]) -> RelabelOutcome {
    let mut out = RelabelOutcome::default();
    if words.is_empty() {
        return out;
    }
    let threshold = words.iter().map(|w| w.bbox.height()).sum::<f64>() / words.len() as f64;
    let mut current = vec![words[0].clone()];
    for (i, pair) in words.windows(2).enumerate() {
        let gap = (pair[1].bbox.y_center() - pair[0].bbox.y_center()).abs();
        let split = gap > threshold;
        if (gap - threshold).abs() <= REVIEW_BAND * threshold {
            out.borderline.push((i + 1, gap, threshold, split));
        }
        if split {
            out.lines.push(make_line(std::mem::take(&mut current)));
        }
        current.push(pair[1].clone());
    }
    out.lines.push(make_line(current));
    out
}

fn block_words(block: &Line) -> Vec<Word> {
    match &block.words {
        Some(w) if !w.is_empty() => w.clone(),
        _ => vec![Word { text: block.text.clone(), bbox: block.bbox }],
    }
}

/// Converts an entity-level document (each `line` is a whole entity block
/// with its words) into a line-level document. Entity `line_ids` are
/// rewritten to the new line ids; blocks outside any entity are split too.
pub fn relabel_document(doc: &Document) -> (Document, Vec<ReviewItem>) {
    let mut lines = Vec::new();
    let mut review = Vec::new();
    let mut entities = Vec::with_capacity(doc.entities.len());
    let mut next_id = 0u32;
    let mut consumed = std::collections::HashSet::new();

    let mut emit = |words: Vec<Word>, entity_id: Option<u32>, lines: &mut Vec<Line>, review: &mut Vec<ReviewItem>| {
        let res = relabel_entities_to_lines(&words);
        for (word_index, gap, threshold, split) in res.borderline {
            review.push(ReviewItem { doc_id: doc.id.clone(), entity_id, word_index, gap, threshold, split });
        }
        let mut ids = Vec::new();
        for l in res.lines {
            lines.push(Line { id: next_id, text: l.text, bbox: l.bbox, words: Some(l.words) });
            ids.push(next_id);
            next_id += 1;
        }
        ids
    };

    // Blocks are emitted in document order; an entity is emitted at its first block.
    for block in &doc.lines {
        if consumed.contains(&block.id) {
            continue;
        }
        match doc.entities.iter().find(|e| e.line_ids.contains(&block.id)) {
            Some(e) => {
                let words: Vec<Word> = e
                    .line_ids
                    .iter()
                    .filter_map(|id| doc.line(*id))
                    .flat_map(block_words)
                    .collect();
                consumed.extend(e.line_ids.iter().copied());
                let ids = emit(words, Some(e.id), &mut lines, &mut review);
                entities.push(EntityAnn { id: e.id, category: e.category, line_ids: ids });
            }
            None => {
                consumed.insert(block.id);
                emit(block_words(block), None, &mut lines, &mut review);
            }
        }
    }
    // keep the original entity order
    entities.sort_by_key(|e| doc.entities.iter().position(|o| o.id == e.id));
    let out = Document {
        id: doc.id.clone(),
        width: doc.width,
        height: doc.height,
        lines,
        entities,
        links: doc.links.clone(),
    };
    (out, review)
}
