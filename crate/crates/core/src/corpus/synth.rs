//! Templated key-value forms with exact ground truth.
//!
//! Pages are laid out on a row grid in one or two columns. Keys sit at the
//! left of a column, values to their right; multi-line entities continue on
//! the following rows at the same x. Two-column pages share the row grid, so
//! a multi-line value in one column interleaves with the other column's rows.

use serde::{Deserialize, Serialize};

use crate::corpus::schema::{BBox, Category, Document, EntityAnn, Line};
use crate::error::{Error, Result};
use crate::numerics::SplitMix64;

const KEY_LABELS: &[&str] = &[
    "Name:", "Date:", "Address:", "Phone:", "Fax:", "Email:", "City:", "State:", "Zip:", "Country:", "Company:",
    "Title:", "Department:", "Account:", "Invoice:", "Total:", "Amount:", "Tax:", "Due Date:", "Ship To:",
    "Bill To:", "Order No:", "Reference:", "Contact:", "Subject:", "Remarks:", "Signature:", "Approved By:",
    "Client:", "Project:",
];

const VALUE_WORDS: &[&str] = &[
    "Alice", "Bob", "Carol", "David", "Erin", "Frank", "Grace", "Heidi", "Ivan", "Judy", "Mallory", "Oscar",
    "Peggy", "Trent", "Victor", "Walter", "Smith", "Jones", "Brown", "Miller", "Davis", "Garcia", "Wilson",
    "Taylor", "Moore", "Clark", "12", "34", "56", "78", "90", "101", "202", "350", "417", "528", "613", "742",
    "819", "925", "Fox", "Oak", "Pine", "Maple", "Cedar", "Elm", "Lake", "Hill", "Park", "River", "Road",
    "Street", "Avenue", "Lane", "Drive", "Court", "Suite", "Floor", "Boston", "Denver", "Austin", "Seattle",
    "Chicago", "Dallas", "Miami", "Portland", "Phoenix", "Atlanta", "Acme", "Globex", "Initech", "Umbrella",
    "Stark", "Wayne", "Corp", "Inc", "Ltd", "Group", "Labs", "Sales", "Finance", "Research", "Legal", "Support",
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec", "USD", "EUR", "net",
    "paid", "pending", "urgent",
];

const OTHER_WORDS: &[&str] = &[
    "CONFIDENTIAL", "Page", "of", "1", "2", "Revised", "Internal", "Use", "Only", "Draft", "Copy", "Form",
    "Rev", "See", "reverse", "Printed", "Notes",
];

/// Marks printed in the value slot of a field left unfilled.
const STAMP_WORDS: &[&str] = &["N/A", "VOID", "DRAFT", "COPY"];

const HEADER_WORDS: &[&str] = &["REQUEST", "ORDER", "REPORT", "APPLICATION", "RECORD", "SUMMARY", "PURCHASE", "EXPENSE"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_docs: usize,
    /// Upper bound on distinct words in the corpus.
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub min_pairs: usize,
    pub max_pairs: usize,
    /// Probability that an answer entity spans two or three lines.
    pub multi_line_frac: f64,
    /// Probability that a question entity spans two lines.
    pub multi_line_key_frac: f64,
    pub two_column_frac: f64,
    pub max_distractors: usize,
    /// Probability that an unlinked key carries a stamp such as `N/A` in its
    /// value slot.
    #[serde(default)]
    pub stamp_prob: f64,
    pub header_prob: f64,
    /// Probability of adding a key without a value.
    pub unlinked_key_prob: f64,
    pub shuffle_lines: bool,
    pub jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_docs: 200,
            vocab_size: 200,
            max_tokens: 40,
            min_pairs: 3,
            max_pairs: 6,
            multi_line_frac: 0.35,
            multi_line_key_frac: 0.1,
            two_column_frac: 0.5,
            max_distractors: 2,
            stamp_prob: 0.7,
            header_prob: 0.7,
            unlinked_key_prob: 0.2,
            shuffle_lines: true,
            jitter: 2.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64, f: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("synth: {f} must be in [0, 1]")))
            }
        };
        prob(self.multi_line_frac, "multi_line_frac")?;
        prob(self.multi_line_key_frac, "multi_line_key_frac")?;
        prob(self.two_column_frac, "two_column_frac")?;
        prob(self.header_prob, "header_prob")?;
        prob(self.stamp_prob, "stamp_prob")?;
        prob(self.unlinked_key_prob, "unlinked_key_prob")?;
        if self.min_pairs == 0 || self.min_pairs > self.max_pairs {
            return Err(Error::Config("synth: need 1 <= min_pairs <= max_pairs".into()));
        }
        if self.max_tokens < 8 {
            return Err(Error::Config("synth: max_tokens must be at least 8".into()));
        }
        if self.vocab_size < KEY_LABELS.len() + 40 {
            return Err(Error::Config(format!("synth: vocab_size must be at least {}", KEY_LABELS.len() + 40)));
        }
        Ok(())
    }
}

const ROW_PITCH: f64 = 32.0;
const LINE_HEIGHT: f64 = 20.0;
const CHAR_WIDTH: f64 = 9.0;
const TOP_MARGIN: f64 = 40.0;
const PAGE_WIDTH: f64 = 1000.0;
/// Letter proportions; taller only if the content would not fit.
const PAGE_HEIGHT: f64 = 1294.0;

/// Column geometry: key x and value x.
const SINGLE: [(f64, f64); 1] = [(60.0, 330.0)];
const DOUBLE: [(f64, f64); 2] = [(40.0, 220.0), (520.0, 700.0)];

struct Builder<'a> {
    rng: &'a mut SplitMix64,
    jitter: f64,
    lines: Vec<Line>,
    entities: Vec<EntityAnn>,
    links: Vec<(u32, u32)>,
}

impl Builder<'_> {
    fn place(&mut self, text: String, x: f64, row: usize) -> u32 {
        let id = self.lines.len() as u32;
        let jx = self.rng.uniform(-self.jitter, self.jitter);
        let jy = self.rng.uniform(-self.jitter, self.jitter) * 0.5;
        let x0 = (x + jx).max(1.0);
        let y0 = TOP_MARGIN + row as f64 * ROW_PITCH + jy;
        let w = CHAR_WIDTH * text.chars().count() as f64;
        self.lines.push(Line { id, text, bbox: BBox::new(x0, y0, x0 + w, y0 + LINE_HEIGHT), words: None });
        id
    }

    fn entity(&mut self, category: Category, line_ids: Vec<u32>) -> u32 {
        let id = self.entities.len() as u32;
        self.entities.push(EntityAnn { id, category, line_ids });
        id
    }
}

struct PairPlan {
    key_lines: Vec<String>,
    value_lines: Vec<String>,
}

impl PairPlan {
    fn tokens(&self) -> usize {
        self.key_lines.iter().chain(&self.value_lines).map(|l| l.split_whitespace().count()).sum()
    }

    fn rows(&self) -> usize {
        self.key_lines.len().max(self.value_lines.len())
    }
}

fn words(rng: &mut SplitMix64, pool: &[&str], lo: usize, hi: usize) -> String {
    let k = rng.range(lo, hi);
    (0..k).map(|_| *rng.choose(pool)).collect::<Vec<_>>().join(" ")
}

fn plan_pair(rng: &mut SplitMix64, spec: &SynthSpec, values: &[&str]) -> PairPlan {
    let label = *rng.choose(KEY_LABELS);
    let key_lines = if rng.bernoulli(spec.multi_line_key_frac) {
        // a wrapped key: a leading qualifier line, the label below it
        vec![(*rng.choose(HEADER_WORDS)).to_string(), label.to_string()]
    } else {
        vec![label.to_string()]
    };
    let value_lines = if rng.bernoulli(spec.multi_line_frac) {
        let n = rng.range(2, 3);
        (0..n).map(|_| words(rng, values, 1, 2)).collect()
    } else {
        vec![words(rng, values, 1, 3)]
    };
    PairPlan { key_lines, value_lines }
}

fn generate_doc(spec: &SynthSpec, rng: &mut SplitMix64, doc_id: String) -> Document {
    let value_pool_len = (spec.vocab_size - KEY_LABELS.len() - OTHER_WORDS.len() - HEADER_WORDS.len() - STAMP_WORDS.len() - 8)
        .min(VALUE_WORDS.len());
    let values = &VALUE_WORDS[..value_pool_len];
    let mut b = Builder { rng, jitter: spec.jitter, lines: Vec::new(), entities: Vec::new(), links: Vec::new() };
    let mut budget = spec.max_tokens;
    let mut row = 0usize;

    if b.rng.bernoulli(spec.header_prob) {
        let text = format!("{} {}", b.rng.choose(HEADER_WORDS), b.rng.choose(&["FORM", "SHEET", "DETAILS"]));
        let x = PAGE_WIDTH / 2.0 - CHAR_WIDTH * text.len() as f64 / 2.0;
        let id = b.place(text, x, row);
        b.entity(Category::Header, vec![id]);
        budget -= 2;
        row += 2;
    }

    let n_distractors = b.rng.range(0, spec.max_distractors);
    let distractors: Vec<String> = (0..n_distractors).map(|_| words(b.rng, OTHER_WORDS, 1, 2)).collect();
    budget = budget.saturating_sub(distractors.iter().map(|d| d.split_whitespace().count()).sum());

    let columns: &[(f64, f64)] = if b.rng.bernoulli(spec.two_column_frac) { &DOUBLE } else { &SINGLE };
    let mut cursor = vec![row; columns.len()];
    let n_pairs = b.rng.range(spec.min_pairs, spec.max_pairs);
    for _ in 0..n_pairs {
        let plan = plan_pair(b.rng, spec, values);
        if plan.tokens() > budget {
            break;
        }
        budget -= plan.tokens();
        let col = (0..columns.len()).min_by_key(|&c| (cursor[c], c)).unwrap();
        let (kx, vx) = columns[col];
        let r0 = cursor[col];
        let key_ids: Vec<u32> = plan.key_lines.iter().enumerate().map(|(i, t)| b.place(t.clone(), kx, r0 + i)).collect();
        // value starts on the row of the key's last line
        let v0 = r0 + plan.key_lines.len() - 1;
        let val_ids: Vec<u32> =
            plan.value_lines.iter().enumerate().map(|(i, t)| b.place(t.clone(), vx, v0 + i)).collect();
        let k = b.entity(Category::Question, key_ids);
        let v = b.entity(Category::Answer, val_ids);
        b.links.push((k, v));
        cursor[col] = r0 + plan.rows().max(v0 - r0 + plan.value_lines.len()) + 1;
    }

    if b.rng.bernoulli(spec.unlinked_key_prob) && budget >= 2 {
        let col = (0..columns.len()).min_by_key(|&c| (cursor[c], c)).unwrap();
        let (kx, vx) = columns[col];
        let label = *b.rng.choose(KEY_LABELS);
        let words = label.split_whitespace().count();
        if words <= budget {
            budget -= words;
            let id = b.place(label.to_string(), kx, cursor[col]);
            b.entity(Category::Question, vec![id]);
            if budget >= 1 && b.rng.bernoulli(spec.stamp_prob) {
                let stamp = (*b.rng.choose(STAMP_WORDS)).to_string();
                let sid = b.place(stamp, vx, cursor[col]);
                b.entity(Category::Other, vec![sid]);
            }
            cursor[col] += 2;
        }
    }

    let mut bottom = cursor.iter().copied().max().unwrap_or(row) + 1;
    for text in distractors {
        let x = b.rng.uniform(40.0, 600.0);
        let id = b.place(text, x, bottom);
        bottom += 1;
        b.entity(Category::Other, vec![id]);
    }

    let height = PAGE_HEIGHT.max(TOP_MARGIN * 2.0 + bottom as f64 * ROW_PITCH);
    let mut lines = b.lines;
    if spec.shuffle_lines {
        rng_shuffle(b.rng, &mut lines);
    }
    Document { id: doc_id, width: PAGE_WIDTH, height, lines, entities: b.entities, links: b.links }
}

fn rng_shuffle(rng: &mut SplitMix64, lines: &mut [Line]) {
    rng.shuffle(lines);
}

/// Generates `spec.num_docs` documents; identical `(spec, seed)` give
/// identical corpora.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut root = SplitMix64::new(seed);
    Ok((0..spec.num_docs)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            generate_doc(spec, &mut rng, format!("synth-{seed}-{i:05}"))
        })
        .collect())
}
