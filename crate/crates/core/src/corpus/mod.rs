//! Dataset schema and I/O, the entity-to-line relabeler, the synthetic form
//! generator and word-level tokenisation.

pub mod fixtures;
pub mod relabel;
pub mod schema;
pub mod synth;
pub mod tokenize;

pub use relabel::{relabel_document, relabel_entities_to_lines, ReviewItem};
pub use schema::{
    corpus_stats, load_dataset, normalize_text, parse_dataset, save_dataset, to_json, BBox, Category, CorpusStats,
    Document, EntityAnn, LoadedDataset, Line, Word,
};
pub use synth::{generate_synthetic_corpus, SynthSpec};
pub use tokenize::{tokenize, LineSpan, Token, TokenGeometry, TokenizedDoc, Vocab, DEFAULT_MAX_TOKENS};
