//! Knowledge injection: turns a (query, response, regions) triple into an
//! enriched token sequence with segments, relative positions, and the
//! visible matrix that confines injected entities to their anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, Stoplist};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const IMG: &str = "[IMG]";

/// Lowercases, deletes punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// `[x_lt, y_lt, x_rb, y_rb]` in pixels.
    pub bbox: [f64; 4],
    pub appearance: Vec<f64>,
    #[serde(default)]
    pub label: Option<String>,
}

/// An image with its regions of interest. One region must cover the whole
/// image; its appearance vector stands in for the whole-image feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub regions: Vec<Region>,
}

impl Scene {
    pub fn validate(&self, d_app: usize) -> std::result::Result<(), String> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(format!("image size {}x{} is not positive", self.width, self.height));
        }
        for (i, r) in self.regions.iter().enumerate() {
            let [x0, y0, x1, y1] = r.bbox;
            let ok = 0.0 <= x0 && x0 < x1 && x1 <= self.width && 0.0 <= y0 && y0 < y1 && y1 <= self.height;
            if !ok {
                return Err(format!("region {i}: bbox {:?} outside {}x{} image", r.bbox, self.width, self.height));
            }
            if r.appearance.len() != d_app {
                return Err(format!(
                    "region {i}: appearance has {} dims, expected {d_app}",
                    r.appearance.len()
                ));
            }
            if r.appearance.iter().any(|v| !v.is_finite()) {
                return Err(format!("region {i}: non-finite appearance value"));
            }
        }
        if self.whole_image_region().is_none() {
            return Err("no region covers the full image".into());
        }
        Ok(())
    }

    pub fn whole_image_region(&self) -> Option<&Region> {
        self.regions
            .iter()
            .find(|r| r.bbox == [0.0, 0.0, self.width, self.height])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Text,
    Img,
    Cls,
    Sep,
}

/// Source class of an element: query (A), response (B), or regions (C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Query = 0,
    Response = 1,
    Regions = 2,
}

impl Segment {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Origin {
    Original,
    Injected { anchor: usize },
}

impl Origin {
    pub fn anchor(self) -> Option<usize> {
        match self {
            Origin::Original => None,
            Origin::Injected { anchor } => Some(anchor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqToken {
    pub surface: String,
    pub kind: TokenKind,
    pub segment: Segment,
    pub rel_pos: usize,
    pub origin: Origin,
}

impl SeqToken {
    pub fn is_injected(&self) -> bool {
        matches!(self.origin, Origin::Injected { .. })
    }
}

/// `bits[i*n + j]` is true when token j is visible to token i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl VisibleMatrix {
    pub fn all_visible(n: usize) -> Self {
        VisibleMatrix {
            n,
            bits: vec![true; n * n],
        }
    }

    /// Visibility induced by injection origins: original tokens see each
    /// other; an injected token sees only itself, its anchor, and siblings
    /// sharing that anchor.
    pub fn from_origins(origins: &[Origin]) -> Self {
        let n = origins.len();
        let mut bits = vec![false; n * n];
        for (i, oi) in origins.iter().enumerate() {
            for (j, oj) in origins.iter().enumerate() {
                bits[i * n + j] = match (oi.anchor(), oj.anchor()) {
                    _ if i == j => true,
                    (None, None) => true,
                    (Some(a), None) => a == j,
                    (None, Some(b)) => b == i,
                    (Some(a), Some(b)) => a == b,
                };
            }
        }
        VisibleMatrix { n, bits }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let n = rows.len();
        let mut bits = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::Dimension {
                    context: "visible matrix row",
                    expected: n,
                    actual: row.len(),
                });
            }
            bits.extend(row);
        }
        Ok(VisibleMatrix { n, bits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn is_all_visible(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn row_bitstring(&self, i: usize) -> String {
        (0..self.n).map(|j| if self.get(i, j) { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    /// Original tokens keep their un-injected positions; injected runs count up from the anchor.
    #[default]
    Relative,
    /// Every non-image token is numbered by its index in the enriched sequence.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionOptions {
    pub k: usize,
    pub positions: PositionMode,
    /// Replace the visible matrix with the all-true matrix.
    pub mask_off: bool,
}

impl InjectionOptions {
    pub fn with_k(k: usize) -> Self {
        InjectionOptions {
            k,
            positions: PositionMode::Relative,
            mask_off: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedSequence {
    pub tokens: Vec<SeqToken>,
    pub visible: VisibleMatrix,
    /// One region per `[IMG]` token, in sequence order.
    pub regions: Vec<Region>,
    pub image_width: f64,
    pub image_height: f64,
    pub whole_image: Vec<f64>,
}

impl EnrichedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position_of_img(&self, region_idx: usize) -> Option<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind == TokenKind::Img)
            .nth(region_idx)
            .map(|(i, _)| i)
    }

    /// Original tokens that never anchor an injection.
    pub fn non_anchor_originals(&self) -> Vec<usize> {
        let mut anchors = vec![false; self.tokens.len()];
        for t in &self.tokens {
            if let Some(a) = t.origin.anchor() {
                anchors[a] = true;
            }
        }
        (0..self.tokens.len())
            .filter(|&i| !self.tokens[i].is_injected() && !anchors[i])
            .collect()
    }

    pub fn to_json(&self) -> EnrichedSequenceJson<'_> {
        EnrichedSequenceJson {
            tokens: &self.tokens,
            visible: (0..self.visible.n()).map(|i| self.visible.row_bitstring(i)).collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EnrichedSequenceJson<'a> {
    pub tokens: &'a [SeqToken],
    pub visible: Vec<String>,
}

/// Builds `[CLS] query [SEP] response [SEP] img.. [SEP]`, injecting the top-k
/// entities after each eligible text token of query and response.
pub fn assemble(
    query: &[String],
    response: &[String],
    scene: &Scene,
    d_app: usize,
    kb: &KnowledgeBase,
    stoplist: &Stoplist,
    opts: InjectionOptions,
) -> Result<EnrichedSequence> {
    scene
        .validate(d_app)
        .map_err(|reason| Error::rejected("", reason))?;
    let whole_image = scene
        .whole_image_region()
        .map(|r| r.appearance.clone())
        .unwrap_or_default();

    let mut tokens: Vec<SeqToken> = Vec::new();
    let mut next_pos = 0usize;
    let push_special = |tokens: &mut Vec<SeqToken>, surface: &str, kind, segment, pos: &mut usize| {
        tokens.push(SeqToken {
            surface: surface.to_string(),
            kind,
            segment,
            rel_pos: *pos,
            origin: Origin::Original,
        });
        *pos += 1;
    };

    push_special(&mut tokens, CLS, TokenKind::Cls, Segment::Query, &mut next_pos);
    for (segment, words) in [(Segment::Query, query), (Segment::Response, response)] {
        for word in words {
            let anchor = tokens.len();
            let anchor_pos = next_pos;
            tokens.push(SeqToken {
                surface: word.clone(),
                kind: TokenKind::Text,
                segment,
                rel_pos: anchor_pos,
                origin: Origin::Original,
            });
            next_pos += 1;
            for (entity, _) in kb.query_entities(word, opts.k, stoplist) {
                for (offset, piece) in tokenize(&entity).into_iter().enumerate() {
                    tokens.push(SeqToken {
                        surface: piece,
                        kind: TokenKind::Text,
                        segment,
                        rel_pos: anchor_pos + 1 + offset,
                        origin: Origin::Injected { anchor },
                    });
                }
            }
        }
        push_special(&mut tokens, SEP, TokenKind::Sep, segment, &mut next_pos);
    }
    let img_start = tokens.len();
    for _ in &scene.regions {
        tokens.push(SeqToken {
            surface: IMG.to_string(),
            kind: TokenKind::Img,
            segment: Segment::Regions,
            rel_pos: 0,
            origin: Origin::Original,
        });
    }
    push_special(&mut tokens, SEP, TokenKind::Sep, Segment::Regions, &mut next_pos);

    if opts.positions == PositionMode::Absolute {
        for (p, t) in tokens.iter_mut().filter(|t| t.kind != TokenKind::Img).enumerate() {
            t.rel_pos = p;
        }
    }
    let img_pos = tokens
        .iter()
        .filter(|t| t.kind != TokenKind::Img && !t.is_injected())
        .map(|t| t.rel_pos)
        .max()
        .unwrap_or(0)
        + 1;
    for t in &mut tokens[img_start..img_start + scene.regions.len()] {
        t.rel_pos = img_pos;
    }

    let visible = if opts.mask_off {
        VisibleMatrix::all_visible(tokens.len())
    } else {
        VisibleMatrix::from_origins(&tokens.iter().map(|t| t.origin).collect::<Vec<_>>())
    };
    Ok(EnrichedSequence {
        tokens,
        visible,
        regions: scene.regions.clone(),
        image_width: scene.width,
        image_height: scene.height,
        whole_image,
    })
}

/// Drops injected tokens, keeping positions of the rest; the visible matrix
/// becomes all-true over the survivors.
pub fn strip_injected(seq: &EnrichedSequence) -> EnrichedSequence {
    let tokens: Vec<SeqToken> = seq.tokens.iter().filter(|t| !t.is_injected()).cloned().collect();
    let visible = VisibleMatrix::all_visible(tokens.len());
    EnrichedSequence {
        tokens,
        visible,
        regions: seq.regions.clone(),
        image_width: seq.image_width,
        image_height: seq.image_height,
        whole_image: seq.whole_image.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        Scene {
            width: 100.0,
            height: 50.0,
            regions: vec![Region {
                bbox: [0.0, 0.0, 100.0, 50.0],
                appearance: vec![0.5; 4],
                label: None,
            }],
        }
    }

    fn church_kb() -> KnowledgeBase {
        KnowledgeBase::ingest(
            "bride\tRelatedTo\tchurch\t3.2\nchurch\tUsedFor\tget married\t2.8\nchurch\tIsA\tbuilding\t1.1\n"
                .as_bytes(),
        )
        .unwrap()
        .0
    }

    fn words(s: &[&str]) -> Vec<String> {
        s.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Why is the bride here?"), words(&["why", "is", "the", "bride", "here"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("get   married"), words(&["get", "married"]));
        assert_eq!(tokenize("[person1] is... here"), words(&["person1", "is", "here"]));
    }

    #[test]
    fn church_layout_and_positions() {
        let seq = assemble(
            &words(&["church"]),
            &[],
            &scene(),
            4,
            &church_kb(),
            &Stoplist::empty(),
            InjectionOptions::with_k(2),
        )
        .unwrap();
        let surf: Vec<&str> = seq.tokens.iter().map(|t| t.surface.as_str()).collect();
        assert_eq!(surf[..6], ["[CLS]", "church", "bride", "get", "married", "[SEP]"]);
        let pos: Vec<usize> = seq.tokens.iter().map(|t| t.rel_pos).collect();
        assert_eq!(pos[..6], [0, 1, 2, 2, 3, 2]);

        let v = &seq.visible;
        assert!(v.get(1, 2));
        assert!(!v.get(0, 2));
        assert!(!v.get(5, 2));
        assert!(v.get(2, 3));
        assert!(v.get(3, 4));
        assert!(!v.get(2, 6), "injected token must not see image tokens");
    }

    #[test]
    fn k_zero_all_original_and_visible() {
        let seq = assemble(
            &words(&["why", "church"]),
            &words(&["bride"]),
            &scene(),
            4,
            &church_kb(),
            &Stoplist::empty(),
            InjectionOptions::with_k(0),
        )
        .unwrap();
        assert!(seq.tokens.iter().all(|t| !t.is_injected()));
        assert!(seq.visible.is_all_visible());
        let text_pos: Vec<usize> = seq
            .tokens
            .iter()
            .filter(|t| t.kind != TokenKind::Img)
            .map(|t| t.rel_pos)
            .collect();
        assert_eq!(text_pos, (0..text_pos.len()).collect::<Vec<_>>());
        assert_eq!(strip_injected(&seq), seq);
    }

    #[test]
    fn strip_church_example() {
        let seq = assemble(
            &words(&["church"]),
            &[],
            &scene(),
            4,
            &church_kb(),
            &Stoplist::empty(),
            InjectionOptions::with_k(2),
        )
        .unwrap();
        let s = strip_injected(&seq);
        let got: Vec<(&str, usize)> = s.tokens.iter().take(3).map(|t| (t.surface.as_str(), t.rel_pos)).collect();
        assert_eq!(got, vec![("[CLS]", 0), ("church", 1), ("[SEP]", 2)]);
        assert!(s.visible.is_all_visible());
    }

    #[test]
    fn injected_tokens_inherit_anchor_segment() {
        let seq = assemble(
            &words(&["why"]),
            &words(&["church"]),
            &scene(),
            4,
            &church_kb(),
            &Stoplist::default(),
            InjectionOptions::with_k(1),
        )
        .unwrap();
        let inj: Vec<&SeqToken> = seq.tokens.iter().filter(|t| t.is_injected()).collect();
        assert_eq!(inj.len(), 1);
        assert_eq!(inj[0].surface, "bride");
        assert_eq!(inj[0].segment, Segment::Response);
    }

    #[test]
    fn bad_regions_are_rejected() {
        let mut s = scene();
        s.regions[0].appearance.pop();
        let err = assemble(&[], &[], &s, 4, &KnowledgeBase::empty(), &Stoplist::empty(), InjectionOptions::with_k(0));
        assert!(matches!(err, Err(Error::Rejected { .. })));

        let mut s = scene();
        s.regions.push(Region {
            bbox: [10.0, 10.0, 5.0, 20.0],
            appearance: vec![0.0; 4],
            label: None,
        });
        assert!(s.validate(4).is_err());

        let mut s = scene();
        s.regions[0].bbox = [1.0, 0.0, 100.0, 50.0];
        assert!(s.validate(4).unwrap_err().contains("full image"));
    }

    #[test]
    fn ablation_modes_coincide_at_k0() {
        let make = |positions, mask_off| {
            assemble(
                &words(&["church", "here"]),
                &words(&["bride"]),
                &scene(),
                4,
                &church_kb(),
                &Stoplist::empty(),
                InjectionOptions { k: 0, positions, mask_off },
            )
            .unwrap()
        };
        let base = make(PositionMode::Relative, false);
        assert_eq!(make(PositionMode::Absolute, false), base);
        assert_eq!(make(PositionMode::Relative, true), base);
    }

    #[test]
    fn absolute_mode_numbers_by_index() {
        let seq = assemble(
            &words(&["church"]),
            &[],
            &scene(),
            4,
            &church_kb(),
            &Stoplist::empty(),
            InjectionOptions {
                k: 2,
                positions: PositionMode::Absolute,
                mask_off: false,
            },
        )
        .unwrap();
        let pos: Vec<usize> = seq.tokens.iter().take(6).map(|t| t.rel_pos).collect();
        assert_eq!(pos, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn json_rows_are_bitstrings() {
        let seq = assemble(
            &words(&["church"]),
            &[],
            &scene(),
            4,
            &church_kb(),
            &Stoplist::empty(),
            InjectionOptions::with_k(1),
        )
        .unwrap();
        let js = serde_json::to_value(seq.to_json()).unwrap();
        assert_eq!(js["visible"][2], "0110000");
        assert_eq!(js["tokens"][2]["origin"]["anchor"], 1);
    }
}
