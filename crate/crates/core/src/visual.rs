//! Per-word visual features from a layout-annotated DOM tree.
//!
//! Each word gets nine features describing the DOM node that carries its
//! text, and the same nine for that node's parent block:
//!
//! | offset | feature                        |
//! |--------|--------------------------------|
//! | 0      | font size / page max font      |
//! | 1, 2   | block width, height / page dims |
//! | 3, 4   | x, y / page dims               |
//! | 5      | bold                           |
//! | 6      | inside an inline tag           |
//! | 7      | inside a block tag             |
//! | 8      | DOM leaf                       |
//!
//! Offsets 9..18 repeat the layout for the parent block.

use serde::Deserialize;

use crate::doc::tokenize;
use crate::error::{Error, Result};

pub const NODE_FEATURES: usize = 9;
pub const VISUAL_DIM: usize = 2 * NODE_FEATURES;

pub type VisualVector = [f64; VISUAL_DIM];

const INLINE_TAGS: &[&str] = &["a", "span", "b", "i", "em", "strong", "u", "small", "sup", "sub"];
const BLOCK_TAGS: &[&str] = &[
    "div", "p", "h1", "h2", "h3", "h4", "h5", "h6", "li", "ul", "ol", "table", "tr", "td",
    "section", "article", "header", "footer",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagClass {
    Inline,
    Block,
    Other,
}

pub fn classify_tag(tag: &str) -> TagClass {
    let tag = tag.to_ascii_lowercase();
    if INLINE_TAGS.contains(&tag.as_str()) {
        TagClass::Inline
    } else if BLOCK_TAGS.contains(&tag.as_str()) {
        TagClass::Block
    } else {
        TagClass::Other
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(from = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, width, height]: [f64; 4]) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct DomNode {
    pub tag: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "font")]
    pub font_size: f64,
    #[serde(default)]
    pub bold: bool,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub children: Vec<DomNode>,
}

impl DomNode {
    fn info(&self) -> NodeInfo {
        NodeInfo {
            tag: self.tag.clone(),
            bbox: self.bbox,
            font_size: self.font_size,
            bold: self.bold,
            is_leaf: self.children.is_empty(),
        }
    }
}

/// The attributes of a DOM node that feed the features.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInfo {
    pub tag: String,
    pub bbox: BoundingBox,
    pub font_size: f64,
    pub bold: bool,
    pub is_leaf: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PageGeometry {
    pub width: f64,
    pub height: f64,
    pub max_font: f64,
}

#[derive(Debug, Deserialize)]
struct LayoutFile {
    page: [f64; 2],
    root: DomNode,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    keyphrases: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordPlacement {
    pub token: String,
    pub node: NodeInfo,
    pub parent_block: NodeInfo,
}

#[derive(Clone, Debug)]
pub struct ParsedLayout {
    pub id: Option<String>,
    pub keyphrases: Option<Vec<String>>,
    pub page: PageGeometry,
    pub root: DomNode,
    /// Words in depth-first text order.
    pub words: Vec<WordPlacement>,
}

impl ParsedLayout {
    pub fn tokens(&self) -> Vec<String> {
        self.words.iter().map(|w| w.token.clone()).collect()
    }

    pub fn features(&self) -> Vec<VisualVector> {
        self.words
            .iter()
            .map(|w| compute_word_features(&w.node, &w.parent_block, self.page))
            .collect()
    }
}

/// Parses a layout file and assigns every text token to the node carrying it.
pub fn parse_layout(source: &str) -> Result<ParsedLayout> {
    let file: LayoutFile = serde_json::from_str(source).map_err(|e| Error::LayoutParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let [width, height] = file.page;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidLayout(format!("page size {width}×{height}")));
    }
    validate(&file.root, "root")?;
    let max_font = max_font(&file.root);
    if max_font <= 0.0 {
        return Err(Error::InvalidLayout("no node has a positive font size".into()));
    }

    let mut words = Vec::new();
    let mut ancestors = Vec::new();
    collect_words(&file.root, &mut ancestors, &mut words);

    if let Some(text) = &file.text {
        let expected = tokenize(text);
        let got: Vec<&str> = words.iter().map(|w| w.token.as_str()).collect();
        if expected != got {
            let at = expected
                .iter()
                .zip(&got)
                .position(|(a, b)| a != b)
                .unwrap_or(expected.len().min(got.len()));
            return Err(Error::Alignment(format!(
                "text has {} tokens, layout has {}; first difference at token {at}",
                expected.len(),
                got.len()
            )));
        }
    }

    Ok(ParsedLayout {
        id: file.id,
        keyphrases: file.keyphrases,
        page: PageGeometry {
            width,
            height,
            max_font,
        },
        root: file.root,
        words,
    })
}

fn validate(node: &DomNode, path: &str) -> Result<()> {
    let b = node.bbox;
    if !(b.width >= 0.0 && b.height >= 0.0) {
        return Err(Error::InvalidLayout(format!(
            "{path} <{}> has negative size {}×{}",
            node.tag, b.width, b.height
        )));
    }
    if !(b.x.is_finite() && b.y.is_finite() && node.font_size >= 0.0) {
        return Err(Error::InvalidLayout(format!("{path} <{}> has invalid geometry", node.tag)));
    }
    for (i, child) in node.children.iter().enumerate() {
        validate(child, &format!("{path}.{i}"))?;
    }
    Ok(())
}

fn max_font(node: &DomNode) -> f64 {
    node.children
        .iter()
        .map(max_font)
        .fold(node.font_size, f64::max)
}

fn collect_words<'a>(node: &'a DomNode, ancestors: &mut Vec<&'a DomNode>, out: &mut Vec<WordPlacement>) {
    if let Some(text) = &node.text {
        let tokens = tokenize(text);
        if !tokens.is_empty() {
            let parent = ancestors
                .iter()
                .rev()
                .find(|a| classify_tag(&a.tag) == TagClass::Block)
                .or(ancestors.last())
                .copied()
                .unwrap_or(node);
            let node_info = node.info();
            let parent_info = parent.info();
            out.extend(tokens.into_iter().map(|token| WordPlacement {
                token,
                node: node_info.clone(),
                parent_block: parent_info.clone(),
            }));
        }
    }
    ancestors.push(node);
    for child in &node.children {
        collect_words(child, ancestors, out);
    }
    ancestors.pop();
}

fn node_features(node: &NodeInfo, page: PageGeometry) -> [f64; NODE_FEATURES] {
    let class = classify_tag(&node.tag);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    [
        node.font_size / page.max_font,
        node.bbox.width / page.width,
        node.bbox.height / page.height,
        node.bbox.x / page.width,
        node.bbox.y / page.height,
        flag(node.bold),
        flag(class == TagClass::Inline),
        flag(class == TagClass::Block),
        flag(node.is_leaf),
    ]
    .map(|v| v.clamp(0.0, 1.0))
}

pub fn compute_word_features(word: &NodeInfo, parent_block: &NodeInfo, page: PageGeometry) -> VisualVector {
    let mut out = [0.0; VISUAL_DIM];
    out[..NODE_FEATURES].copy_from_slice(&node_features(word, page));
    out[NODE_FEATURES..].copy_from_slice(&node_features(parent_block, page));
    out
}

/// Outcome of validating precomputed visual arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Passthrough {
    pub visual: Vec<VisualVector>,
    /// True when the record had no visual arrays and zeros were substituted.
    pub substituted: bool,
}

/// Validates precomputed per-token features: width 18, one row per token,
/// values clamped to `[0, 1]`. Absent features become zero rows.
pub fn passthrough_features(id: &str, num_tokens: usize, visual: Option<&[Vec<f64>]>) -> Result<Passthrough> {
    let Some(rows) = visual else {
        return Ok(Passthrough {
            visual: vec![[0.0; VISUAL_DIM]; num_tokens],
            substituted: true,
        });
    };
    if rows.len() != num_tokens {
        return Err(Error::Visual {
            id: id.to_string(),
            reason: format!("{} visual rows for {num_tokens} tokens", rows.len()),
        });
    }
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != VISUAL_DIM {
            return Err(Error::Visual {
                id: id.to_string(),
                reason: format!("row {i} has width {}, expected {VISUAL_DIM}", row.len()),
            });
        }
        let mut v = [0.0; VISUAL_DIM];
        for (dst, &src) in v.iter_mut().zip(row) {
            if !src.is_finite() {
                return Err(Error::Visual {
                    id: id.to_string(),
                    reason: format!("row {i} has non-finite value"),
                });
            }
            *dst = src.clamp(0.0, 1.0);
        }
        out.push(v);
    }
    Ok(Passthrough {
        visual: out,
        substituted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(tag: &str, bbox: [f64; 4], font: f64, bold: bool, leaf: bool) -> NodeInfo {
        NodeInfo {
            tag: tag.into(),
            bbox: bbox.into(),
            font_size: font,
            bold,
            is_leaf: leaf,
        }
    }

    #[test]
    fn single_block_node() {
        let src = r#"{"page": [800, 600], "root": {"tag": "p", "box": [0, 0, 800, 40], "font": 16, "text": "hello world"}}"#;
        let layout = parse_layout(src).unwrap();
        assert_eq!(layout.tokens(), ["hello", "world"]);
        assert!(layout.words.iter().all(|w| w.node.tag == "p"));
        assert!(layout.features().iter().all(|f| f.len() == VISUAL_DIM));
    }

    #[test]
    fn nested_inline_inside_block() {
        let src = r#"{"page": [1000, 2000], "root": {"tag": "div", "box": [0,0,1000,2000], "font": 12, "children": [
            {"tag": "span", "box": [100, 200, 50, 20], "font": 24, "bold": true, "text": "Stapler"}
        ]}}"#;
        let layout = parse_layout(src).unwrap();
        let w = &layout.words[0];
        assert_eq!(w.node.tag, "span");
        assert_eq!(w.parent_block.tag, "div");
        let f = layout.features()[0];
        assert_eq!(f[3], 0.1);
        assert_eq!(f[4], 0.1);
        assert_eq!(f[0], 1.0);
        assert_eq!(&f[5..9], &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(&f[14..18], &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn negative_width_is_rejected() {
        let src = r#"{"page": [10, 10], "root": {"tag": "p", "box": [0, 0, -1, 5], "font": 1, "text": "x"}}"#;
        assert!(matches!(parse_layout(src), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn malformed_json_reports_position() {
        let src = "{\"page\": [10, 10],\n \"root\": {\"tag\": }";
        match parse_layout(src) {
            Err(Error::LayoutParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn text_mismatch_is_an_alignment_error() {
        let src = r#"{"page": [10, 10], "text": "hello there", "root": {"tag": "p", "box": [0, 0, 1, 1], "font": 1, "text": "hello world"}}"#;
        assert!(matches!(parse_layout(src), Err(Error::Alignment(_))));
    }

    #[test]
    fn location_and_font_normalization() {
        let page = PageGeometry {
            width: 1000.0,
            height: 2000.0,
            max_font: 32.0,
        };
        let w = node("span", [100.0, 200.0, 10.0, 10.0], 24.0, false, true);
        let f = compute_word_features(&w, &w, page);
        assert_eq!((f[3], f[4]), (0.1, 0.1));
        assert_eq!(f[0], 0.75);
        let huge = node("div", [5000.0, -3.0, 1e6, 1.0], 64.0, false, false);
        let f = compute_word_features(&huge, &huge, page);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tag_classes_are_exclusive() {
        for tag in INLINE_TAGS.iter().chain(BLOCK_TAGS) {
            let inline = INLINE_TAGS.contains(tag);
            let block = BLOCK_TAGS.contains(tag);
            assert!(inline ^ block, "{tag}");
        }
        assert_eq!(classify_tag("img"), TagClass::Other);
        assert_eq!(classify_tag("H2"), TagClass::Block);
    }

    #[test]
    fn passthrough_rules() {
        let good = vec![vec![0.5; 18]; 3];
        let p = passthrough_features("d", 3, Some(&good)).unwrap();
        assert!(!p.substituted);
        assert_eq!(p.visual[2][17], 0.5);
        let narrow = vec![vec![0.5; 17]; 3];
        assert!(matches!(passthrough_features("d", 3, Some(&narrow)), Err(Error::Visual { .. })));
        assert!(passthrough_features("d", 4, Some(&good)).is_err());
        let p = passthrough_features("d", 2, None).unwrap();
        assert!(p.substituted);
        assert_eq!(p.visual, vec![[0.0; 18]; 2]);
    }

    proptest! {
        #[test]
        fn translation_moves_only_location(x in 0.0..400.0f64, y in 0.0..400.0f64, dx in 0.0..400.0f64, dy in 0.0..400.0f64,
                                            w in 0.0..100.0f64, h in 0.0..100.0f64) {
            let page = PageGeometry { width: 1000.0, height: 1000.0, max_font: 20.0 };
            let a = node("span", [x, y, w, h], 12.0, true, true);
            let pa = node("div", [x / 2.0, y / 2.0, 2.0 * w, 2.0 * h], 10.0, false, false);
            let mut b = a.clone();
            b.bbox.x += dx;
            b.bbox.y += dy;
            let mut pb = pa.clone();
            pb.bbox.x += dx;
            pb.bbox.y += dy;
            let fa = compute_word_features(&a, &pa, page);
            let fb = compute_word_features(&b, &pb, page);
            for i in 0..VISUAL_DIM {
                let off = i % NODE_FEATURES;
                let expected = match off { 3 => dx / 1000.0, 4 => dy / 1000.0, _ => 0.0 };
                prop_assert!((fb[i] - fa[i] - expected).abs() < 1e-12);
            }
        }

        #[test]
        fn uniform_scaling_is_invisible(x in 0.0..500.0f64, y in 0.0..500.0f64, w in 0.0..400.0f64, h in 0.0..400.0f64, s in 0.1..10.0f64) {
            let page = PageGeometry { width: 1000.0, height: 1000.0, max_font: 20.0 };
            let a = node("b", [x, y, w, h], 12.0, false, true);
            let scaled = node("b", [x * s, y * s, w * s, h * s], 12.0 * s, false, true);
            let spage = PageGeometry { width: 1000.0 * s, height: 1000.0 * s, max_font: 20.0 * s };
            let fa = compute_word_features(&a, &a, page);
            let fb = compute_word_features(&scaled, &scaled, spage);
            for (u, v) in fa.iter().zip(&fb) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
