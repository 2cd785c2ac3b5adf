use crate::corpus::{Document, EntityAnn, LineSpan, TokenizedDoc};
use crate::decoder::matrix::{Head, RelationTargets};

/// Gold relation matrices for a tokenised document.
///
/// * `le`: (first, last) token of every line of a question or answer entity.
/// * `lgh` / `lgt`: head→head and tail→tail of consecutive lines inside a
///   question or answer entity.
/// * `elh` / `elt`: for each link, key first-line head → value first-line
///   head, and key last-line tail → value last-line tail.
///
/// Links touching lines lost to truncation are dropped and reported.
pub fn build_targets(tok: &TokenizedDoc, ann: &Document) -> (RelationTargets, Vec<String>) {
    let n = tok.n();
    let mut y = RelationTargets::zeros(n);
    let mut warnings = Vec::new();
    let spans: std::collections::HashMap<u32, LineSpan> = tok.spans.iter().map(|s| (s.line_id, *s)).collect();

    for e in ann.entities.iter().filter(|e| e.category.is_key_or_value()) {
        let lines: Vec<Option<LineSpan>> = e.line_ids.iter().map(|l| spans.get(l).copied()).collect();
        for s in lines.iter().flatten() {
            y.get_mut(Head::Le).set(s.first, s.last, true);
        }
        for w in lines.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                y.get_mut(Head::Lgh).set(a.first, b.first, true);
                y.get_mut(Head::Lgt).set(a.last, b.last, true);
            }
        }
    }

    let full_spans = |e: &EntityAnn| -> Option<(LineSpan, LineSpan)> {
        let all: Option<Vec<LineSpan>> = e.line_ids.iter().map(|l| spans.get(l).copied()).collect();
        let all = all?;
        Some((*all.first()?, *all.last()?))
    };
    for &(k, v) in &ann.links {
        let (Some(ke), Some(ve)) = (ann.entity(k), ann.entity(v)) else {
            warnings.push(format!("{}: link ({k}, {v}) references a missing entity", ann.id));
            continue;
        };
        match (full_spans(ke), full_spans(ve)) {
            (Some((kf, kl)), Some((vf, vl))) => {
                y.get_mut(Head::Elh).set(kf.first, vf.first, true);
                y.get_mut(Head::Elt).set(kl.last, vl.last, true);
            }
            _ => {
                log::warn!("{}: link ({k}, {v}) dropped, lines truncated away", ann.id);
                warnings.push(format!("{}: link ({k}, {v}) dropped, lines truncated away", ann.id));
            }
        }
    }
    (y, warnings)
}
