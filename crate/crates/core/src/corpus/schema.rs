use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in page pixels, serialised as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite()) && self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn x_center(&self) -> f64 {
        0.5 * (self.x0 + self.x1)
    }

    pub fn y_center(&self) -> f64 {
        0.5 * (self.y0 + self.y1)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: u32,
    pub text: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<Word>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Header,
    Question,
    Answer,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Header, Category::Question, Category::Answer, Category::Other];

    /// Keys and values are the only categories that take part in pairs.
    pub fn is_key_or_value(self) -> bool {
        matches!(self, Category::Question | Category::Answer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Header => "header",
            Category::Question => "question",
            Category::Answer => "answer",
            Category::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityAnn {
    pub id: u32,
    pub category: Category,
    pub line_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub lines: Vec<Line>,
    #[serde(default)]
    pub entities: Vec<EntityAnn>,
    /// `(key_entity_id, value_entity_id)`.
    #[serde(default)]
    pub links: Vec<(u32, u32)>,
}

#[derive(Debug, Deserialize)]
struct DatasetFile<D> {
    documents: Vec<D>,
}

#[derive(Serialize)]
struct DatasetFileRef<'a> {
    documents: &'a [Document],
}

/// Joins whitespace-separated pieces with single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Document {
    pub fn line(&self, id: u32) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    pub fn entity(&self, id: u32) -> Option<&EntityAnn> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// Text of an entity: its lines in annotated order, single-space joined.
    pub fn entity_text(&self, e: &EntityAnn) -> String {
        let parts: Vec<String> = e
            .line_ids
            .iter()
            .filter_map(|id| self.line(*id))
            .map(|l| normalize_text(&l.text))
            .filter(|t| !t.is_empty())
            .collect();
        parts.join(" ")
    }

    /// Gold `(key, value)` strings for every link, in link order.
    pub fn gold_pairs(&self) -> Vec<(String, String)> {
        self.links
            .iter()
            .filter_map(|(k, v)| {
                let (k, v) = (self.entity(*k)?, self.entity(*v)?);
                Some((self.entity_text(k), self.entity_text(v)))
            })
            .collect()
    }

    /// Entity owning each line.
    pub fn line_owner(&self) -> HashMap<u32, &EntityAnn> {
        let mut m = HashMap::new();
        for e in &self.entities {
            for &l in &e.line_ids {
                m.insert(l, e);
            }
        }
        m
    }

    /// Checks the document invariants. Exact-duplicate links are collapsed
    /// and reported through `warnings`; everything else is an error.
    pub fn validate(&mut self, warnings: &mut Vec<String>) -> Result<()> {
        let fail = |msg: String| Err(Error::Schema(format!("document {}: {msg}", self.id)));
        if !(self.width > 0.0 && self.height > 0.0) {
            return fail(format!("page size {}x{} must be positive", self.width, self.height));
        }
        let mut line_ids = HashSet::new();
        for l in &self.lines {
            if !line_ids.insert(l.id) {
                return fail(format!("duplicate line id {}", l.id));
            }
            if !l.bbox.is_valid() {
                return fail(format!("line {} has an invalid bbox", l.id));
            }
            if let Some(words) = &l.words {
                if words.iter().any(|w| w.text.is_empty() || !w.bbox.is_valid()) {
                    return fail(format!("line {} has an empty word or invalid word bbox", l.id));
                }
                let joined = words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
                if joined != l.text {
                    return fail(format!("line {} text does not match its words", l.id));
                }
            }
        }
        let mut owned = HashSet::new();
        let mut entity_ids = HashMap::new();
        for e in &self.entities {
            if entity_ids.insert(e.id, e.category).is_some() {
                return fail(format!("duplicate entity id {}", e.id));
            }
            if e.line_ids.is_empty() {
                return fail(format!("entity {} has no lines", e.id));
            }
            for l in &e.line_ids {
                if !line_ids.contains(l) {
                    return fail(format!("entity {} references missing line {l}", e.id));
                }
                if !owned.insert(*l) {
                    return fail(format!("line {l} belongs to more than one entity"));
                }
            }
        }
        for (k, v) in &self.links {
            match (entity_ids.get(k), entity_ids.get(v)) {
                (Some(Category::Question), Some(Category::Answer)) => {}
                (Some(_), Some(_)) => return fail(format!("link ({k}, {v}) is not question -> answer")),
                _ => return fail(format!("link ({k}, {v}) references a missing entity")),
            }
        }
        let before = self.links.len();
        let mut seen = HashSet::new();
        self.links.retain(|l| seen.insert(*l));
        if self.links.len() != before {
            warnings.push(format!("document {}: collapsed {} duplicate link(s)", self.id, before - self.links.len()));
        }
        Ok(())
    }

    /// Returns a copy with lines in the given order (a permutation of
    /// positions into `self.lines`).
    pub fn with_line_order(&self, order: &[usize]) -> Document {
        let mut d = self.clone();
        d.lines = order.iter().map(|&i| self.lines[i].clone()).collect();
        d
    }
}

/// Result of reading a dataset: accepted documents plus per-record diagnostics.
#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub documents: Vec<Document>,
    pub warnings: Vec<String>,
    pub skipped: usize,
}

fn dataset_files(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".review.json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Parses one dataset file body, validating each document independently.
pub fn parse_dataset(text: &str, origin: &str, out: &mut LoadedDataset) -> Result<()> {
    if text.trim().is_empty() {
        return Ok(());
    }
    let raw: DatasetFile<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| Error::Schema(format!("{origin}: top level must be {{\"documents\": [...]}}: {e}")))?;
    for (i, value) in raw.documents.into_iter().enumerate() {
        let parsed: std::result::Result<Document, _> = serde_json::from_value(value);
        let outcome = parsed.map_err(Error::from).and_then(|mut d| {
            let mut w = Vec::new();
            d.validate(&mut w).map(|_| (d, w))
        });
        match outcome {
            Ok((d, w)) => {
                out.warnings.extend(w);
                out.documents.push(d);
            }
            Err(e) => {
                log::warn!("{origin}: skipping record {i}: {e}");
                out.warnings.push(format!("{origin}: record {i} skipped: {e}"));
                out.skipped += 1;
            }
        }
    }
    Ok(())
}

/// Loads every document under `path` (a file or a directory of `.json` files).
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    for file in dataset_files(path)? {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        parse_dataset(&text, &file.display().to_string(), &mut out)?;
    }
    Ok(out)
}

pub fn to_json(docs: &[Document]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&DatasetFileRef { documents: docs })?)
}

pub fn save_dataset(path: &Path, docs: &[Document]) -> Result<()> {
    fs::write(path, to_json(docs)?).map_err(|e| Error::io(path, e))
}

/// Corpus statistics in the shape of a dataset summary table.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub lines: usize,
    pub entities: usize,
    pub multi_line_entities: usize,
    pub pairs: usize,
    pub categories: BTreeMap<String, usize>,
}

pub fn corpus_stats(docs: &[Document]) -> CorpusStats {
    let mut s = CorpusStats { documents: docs.len(), ..Default::default() };
    for d in docs {
        s.lines += d.lines.len();
        s.entities += d.entities.len();
        s.multi_line_entities += d.entities.iter().filter(|e| e.line_ids.len() > 1).count();
        s.pairs += d.links.len();
        for e in &d.entities {
            *s.categories.entry(e.category.as_str().to_string()).or_default() += 1;
        }
    }
    s
}
