//! Small hand-built documents shared by tests, benches and the CLI.

use crate::corpus::schema::{BBox, Category, Document, EntityAnn, Line};

fn line(id: u32, text: &str, bbox: [f64; 4]) -> Line {
    Line { id, text: text.into(), bbox: bbox.into(), words: None }
}

/// Five lines, four entities, two links; the address value spans two lines.
///
/// Tokens: `0:Name: 1:Alice 2:Address: 3:12 4:Fox 5:Road`.
pub fn mini_form() -> Document {
    Document {
        id: "mini-form".into(),
        width: 400.0,
        height: 200.0,
        lines: vec![
            line(0, "Name:", [40.0, 40.0, 95.0, 60.0]),
            line(1, "Alice", [200.0, 40.0, 245.0, 60.0]),
            line(2, "Address:", [40.0, 80.0, 112.0, 100.0]),
            line(3, "12 Fox", [200.0, 80.0, 254.0, 100.0]),
            line(4, "Road", [200.0, 110.0, 236.0, 130.0]),
        ],
        entities: vec![
            EntityAnn { id: 0, category: Category::Question, line_ids: vec![0] },
            EntityAnn { id: 1, category: Category::Answer, line_ids: vec![1] },
            EntityAnn { id: 2, category: Category::Question, line_ids: vec![2] },
            EntityAnn { id: 3, category: Category::Answer, line_ids: vec![3, 4] },
        ],
        links: vec![(0, 1), (2, 3)],
    }
}

/// An entity-level page in the relabeler's input shape: one block per
/// entity, each carrying its words.
pub fn entity_level_form() -> Document {
    use crate::corpus::schema::Word;
    let w = |t: &str, x0: f64, y0: f64| Word { text: t.into(), bbox: BBox::new(x0, y0, x0 + 9.0 * t.len() as f64, y0 + 10.0) };
    let block = |id: u32, words: Vec<Word>| {
        let bbox = words.iter().skip(1).fold(words[0].bbox, |b, w| b.union(&w.bbox));
        let text = words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
        Line { id, text, bbox, words: Some(words) }
    };
    Document {
        id: "entity-level".into(),
        width: 400.0,
        height: 200.0,
        lines: vec![
            block(0, vec![w("Name:", 40.0, 45.0)]),
            block(1, vec![w("Alice", 200.0, 45.0)]),
            block(2, vec![w("Address:", 40.0, 85.0)]),
            block(3, vec![w("12", 200.0, 85.0), w("Fox", 225.0, 85.0), w("Road", 200.0, 115.0)]),
        ],
        entities: vec![
            EntityAnn { id: 0, category: Category::Question, line_ids: vec![0] },
            EntityAnn { id: 1, category: Category::Answer, line_ids: vec![1] },
            EntityAnn { id: 2, category: Category::Question, line_ids: vec![2] },
            EntityAnn { id: 3, category: Category::Answer, line_ids: vec![3] },
        ],
        links: vec![(0, 1), (2, 3)],
    }
}
