use std::fmt;

use serde::{Deserialize, Serialize};

/// The five relation heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Line extraction: (first, last) token of a key/value line.
    Le,
    /// Line head grouping: head token of a line → head token of the next line.
    Lgh,
    /// Line tail grouping: tail token of a line → tail token of the next line.
    Lgt,
    /// Entity head linking: key first-line head → value first-line head.
    Elh,
    /// Entity tail linking: key last-line tail → value last-line tail.
    Elt,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Le, Head::Lgh, Head::Lgt, Head::Elh, Head::Elt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Le => "le",
            Head::Lgh => "lgh",
            Head::Lgt => "lgt",
            Head::Elh => "elh",
            Head::Elt => "elt",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Square 0/1 matrix over token indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMatrix {
    n: usize,
    cells: Vec<u8>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, cells: vec![0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[i * self.n + j] = v as u8;
    }

    /// Positive cells in row-major order.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(k, _)| (k / self.n, k % self.n))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    /// Class index (0 or 1) of every cell, row-major.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().map(|&c| c as usize)
    }

    /// `P · self · Pᵀ` where `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.n);
        for a in 0..self.n {
            for b in 0..self.n {
                out.set(a, b, self.get(perm[a], perm[b]));
            }
        }
        out
    }
}

/// One binary matrix per head, indexed by [`Head::index`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMatrices {
    pub mats: [BinaryMatrix; 5],
}

/// Gold matrices built from annotations.
pub type RelationTargets = RelationMatrices;

impl RelationMatrices {
    pub fn zeros(n: usize) -> Self {
        Self { mats: std::array::from_fn(|_| BinaryMatrix::zeros(n)) }
    }

    pub fn n(&self) -> usize {
        self.mats[0].n()
    }

    pub fn get(&self, h: Head) -> &BinaryMatrix {
        &self.mats[h.index()]
    }

    pub fn get_mut(&mut self, h: Head) -> &mut BinaryMatrix {
        &mut self.mats[h.index()]
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { mats: std::array::from_fn(|k| self.mats[k].permuted(perm)) }
    }
}

/// Post-softmax probabilities `[N, N, 2]` per head, stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationScores {
    pub n: usize,
    pub probs: [Vec<f32>; 5],
}

impl RelationScores {
    pub fn uniform(n: usize) -> Self {
        Self { n, probs: std::array::from_fn(|_| vec![0.5; n * n * 2]) }
    }

    /// Positive-class probability `P[i][j][1]`.
    pub fn positive(&self, h: Head, i: usize, j: usize) -> f32 {
        self.probs[h.index()][(i * self.n + j) * 2 + 1]
    }

    pub fn negative(&self, h: Head, i: usize, j: usize) -> f32 {
        self.probs[h.index()][(i * self.n + j) * 2]
    }

    /// Scores of exactly 1.0 on the positives of `m` and 0.0 elsewhere.
    pub fn from_matrices(m: &RelationMatrices) -> Self {
        let n = m.n();
        let mut probs: [Vec<f32>; 5] = std::array::from_fn(|_| vec![0.0; n * n * 2]);
        for h in Head::ALL {
            let p = &mut probs[h.index()];
            for i in 0..n {
                for j in 0..n {
                    let pos = m.get(h).get(i, j);
                    p[(i * n + j) * 2] = if pos { 0.0 } else { 1.0 };
                    p[(i * n + j) * 2 + 1] = if pos { 1.0 } else { 0.0 };
                }
            }
        }
        Self { n, probs }
    }

    /// Replaces one head with gold matrices at score 1.0.
    pub fn substitute(&mut self, h: Head, gold: &BinaryMatrix) {
        let n = self.n;
        let p = &mut self.probs[h.index()];
        for i in 0..n {
            for j in 0..n {
                let pos = gold.get(i, j);
                p[(i * n + j) * 2] = if pos { 0.0 } else { 1.0 };
                p[(i * n + j) * 2 + 1] = if pos { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Per-cell argmax; an exact tie goes to the negative class.
pub fn decode(scores: &RelationScores) -> RelationMatrices {
    let n = scores.n;
    let mut out = RelationMatrices::zeros(n);
    for h in Head::ALL {
        let m = out.get_mut(h);
        for i in 0..n {
            for j in 0..n {
                if scores.positive(h, i, j) > scores.negative(h, i, j) {
                    m.set(i, j, true);
                }
            }
        }
    }
    out
}
