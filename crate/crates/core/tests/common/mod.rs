//! Fuzzing helpers and the independent support oracle for the linking
//! parser, shared by the property and acceptance suites.
#![allow(dead_code)]

use std::collections::HashSet;

use peneo_core::corpus::fixtures::mini_form;
use peneo_core::corpus::{tokenize, TokenizedDoc, Vocab};
use peneo_core::decoder::{Head, RelationMatrices, RelationScores};
use peneo_core::link_parser::{build_best_maps, parse_links, BestLinkMap, ParsedPair};
use peneo_core::numerics::SplitMix64;

/// Random matrix set over `n` tokens with random scores; `density` is the
/// probability of a positive cell.
pub fn random_set(n: usize, density: f64, rng: &mut SplitMix64) -> (RelationMatrices, RelationScores) {
    let mut m = RelationMatrices::zeros(n);
    let mut s = RelationScores::uniform(n);
    for h in Head::ALL {
        for i in 0..n {
            for j in 0..n {
                if rng.bernoulli(density) {
                    m.get_mut(h).set(i, j, true);
                    let p = rng.uniform(0.5, 1.0) as f32;
                    let k = h.index();
                    s.probs[k][(i * n + j) * 2 + 1] = p;
                    s.probs[k][(i * n + j) * 2] = 1.0 - p;
                }
            }
        }
    }
    (m, s)
}

pub fn token_doc(n: usize) -> TokenizedDoc {
    let words: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    let mut d = mini_form();
    d.id = format!("fuzz-{n}");
    d.lines = vec![peneo_core::corpus::Line {
        id: 0,
        text: words.join(" "),
        bbox: peneo_core::corpus::BBox::new(0.0, 0.0, 100.0, 10.0),
        words: None,
    }];
    d.entities.clear();
    d.links.clear();
    tokenize(&d, &Vocab::build(&[d.clone()]), n)
}

fn link(map: &BestLinkMap, i: usize) -> Option<usize> {
    map.get(&i).map(|&(j, _)| j)
}

/// Independent check that an emitted entity is spelled out by the maps: the
/// token list must split into extracted line spans, each grouped to the
/// next, with no line used twice.
pub fn entity_is_supported(maps: &[BestLinkMap; 5], tokens: &[usize]) -> bool {
    let mut lines: Vec<(usize, usize)> = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let head = tokens[pos];
        let Some(tail) = link(&maps[Head::Le.index()], head) else { return false };
        if tail < head || tokens.len() < pos + tail - head + 1 || !(head..=tail).eq(tokens[pos..=pos + tail - head].iter().copied()) {
            return false;
        }
        lines.push((head, tail));
        pos += tail - head + 1;
    }
    let heads: HashSet<usize> = lines.iter().map(|l| l.0).collect();
    heads.len() == lines.len()
        && lines.windows(2).all(|w| {
            link(&maps[Head::Lgh.index()], w[0].0) == Some(w[1].0) && link(&maps[Head::Lgt.index()], w[0].1) == Some(w[1].1)
        })
}

pub fn pair_is_supported(maps: &[BestLinkMap; 5], p: &ParsedPair) -> bool {
    entity_is_supported(maps, &p.key_tokens)
        && entity_is_supported(maps, &p.value_tokens)
        && link(&maps[Head::Elh.index()], p.key_tokens[0]) == Some(p.value_tokens[0])
        && link(&maps[Head::Elt.index()], *p.key_tokens.last().unwrap()) == Some(*p.value_tokens.last().unwrap())
}

/// Determinism, one pair per anchor, and support of every emitted pair.
pub fn check_safety(maps: &[BestLinkMap; 5], tok: &TokenizedDoc) -> usize {
    let a = parse_links(maps, tok);
    assert_eq!(a, parse_links(maps, tok), "parse is not deterministic");
    let anchors: HashSet<usize> = a.iter().map(|p| p.key_tokens[0]).collect();
    assert_eq!(anchors.len(), a.len(), "an anchor produced two pairs");
    for p in &a {
        assert!(pair_is_supported(maps, p), "unsupported pair {p:?}");
    }
    a.len()
}

/// Parses `sets` random matrix sets, every third with an injected grouping
/// cycle, checking each with [`check_safety`]. Returns the number of pairs
/// emitted.
pub fn fuzz_parser(sets: usize, seed: u64) -> usize {
    let mut rng = SplitMix64::new(seed);
    let mut emitted = 0;
    for case in 0..sets {
        let n = 1 + rng.below(12);
        let density = [0.02, 0.1, 0.3, 0.8][case % 4];
        let (m, s) = random_set(n, density, &mut rng);
        let tok = token_doc(n);
        let mut maps = build_best_maps(&m, &s);
        if case % 3 == 0 {
            // close the grouping chain into a cycle over random heads
            let len = 1 + rng.below(n);
            let cyc: Vec<usize> = (0..len).map(|_| rng.below(n)).collect();
            for k in 0..len {
                let (a, b) = (cyc[k], cyc[(k + 1) % len]);
                maps[Head::Le.index()].insert(a, (a, 1.0));
                maps[Head::Lgh.index()].insert(a, (b, 1.0));
                maps[Head::Lgt.index()].insert(a, (b, 1.0));
            }
            maps[Head::Elh.index()].insert(cyc[0], (cyc[0], 1.0));
        }
        emitted += check_safety(&maps, &tok);
    }
    emitted
}
