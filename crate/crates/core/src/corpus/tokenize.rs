use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::schema::{BBox, Document};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const DEFAULT_MAX_TOKENS: usize = 512;

/// Whitespace-word vocabulary with reserved PAD and UNK entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
        let uniq: BTreeSet<String> = words.into_iter().collect();
        all.extend(uniq.into_iter().filter(|w| w != "<pad>" && w != "<unk>"));
        Self::with_index(all)
    }

    fn with_index(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    /// Every whitespace-separated word of the given documents.
    pub fn build(docs: &[Document]) -> Self {
        Self::from_words(docs.iter().flat_map(|d| d.lines.iter()).flat_map(|l| {
            l.text.split_whitespace().map(str::to_string).collect::<Vec<_>>()
        }))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.words)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = serde_json::from_str(&text)?;
        if words.len() < 2 {
            return Err(Error::Schema(format!("{}: vocabulary lacks reserved entries", path.display())));
        }
        Ok(Self::with_index(words))
    }
}

/// Layout carried by a token: its line box normalised by page size, plus the
/// token's offset from the start and from the end of its line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenGeometry {
    pub x_center: f64,
    pub y_center: f64,
    pub width: f64,
    pub height: f64,
    pub rank_in_line: usize,
    pub rank_from_end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub index: usize,
    pub vocab_id: usize,
    pub surface: String,
    pub line_id: u32,
    pub geom: TokenGeometry,
}

/// Inclusive token span of one line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineSpan {
    pub line_id: u32,
    pub first: usize,
    pub last: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub tokens: Vec<Token>,
    /// Spans in sequence order.
    pub spans: Vec<LineSpan>,
    /// Lines dropped because the token budget ran out.
    pub truncated_lines: Vec<u32>,
}

impl TokenizedDoc {
    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn span_of(&self, line_id: u32) -> Option<LineSpan> {
        self.spans.iter().find(|s| s.line_id == line_id).copied()
    }

    pub fn span_map(&self) -> BTreeMap<u32, (usize, usize)> {
        self.spans.iter().map(|s| (s.line_id, (s.first, s.last))).collect()
    }

    /// Surfaces of `tokens` joined by single spaces.
    pub fn join(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&i| self.tokens[i].surface.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn vocab_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.vocab_id).collect()
    }
}

fn normalized(b: &BBox, width: f64, height: f64) -> (f64, f64, f64, f64) {
    let c = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    (c(b.x_center() / width), c(b.y_center() / height), c(b.width() / width), c(b.height() / height))
}

/// Word-level tokenisation in input line order. Lines that would push the
/// sequence past `max_tokens` are dropped whole, together with every later line.
pub fn tokenize(doc: &Document, vocab: &Vocab, max_tokens: usize) -> TokenizedDoc {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut truncated = Vec::new();
    for line in &doc.lines {
        let words: Vec<&str> = line.text.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        if !truncated.is_empty() || tokens.len() + words.len() > max_tokens {
            truncated.push(line.id);
            continue;
        }
        let (xc, yc, w, h) = normalized(&line.bbox, doc.width, doc.height);
        let first = tokens.len();
        let k = words.len();
        for (r, word) in words.iter().enumerate() {
            tokens.push(Token {
                index: tokens.len(),
                vocab_id: vocab.id(word),
                surface: word.to_string(),
                line_id: line.id,
                geom: TokenGeometry {
                    x_center: xc,
                    y_center: yc,
                    width: w,
                    height: h,
                    rank_in_line: r,
                    rank_from_end: k - 1 - r,
                },
            });
        }
        spans.push(LineSpan { line_id: line.id, first, last: tokens.len() - 1 });
    }
    if !truncated.is_empty() {
        log::warn!(
            "document {}: {} line(s) dropped at the {max_tokens}-token limit",
            doc.id,
            truncated.len()
        );
    }
    TokenizedDoc { doc_id: doc.id.clone(), tokens, spans, truncated_lines: truncated }
}
