//! Input embeddings: token + segment + position + visual feature, summed per row.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::pipeline::{EnrichedSequence, TokenKind, CLS, SEP};

/// Row 0 of the token table is reserved for out-of-vocabulary surfaces.
pub const OOV_ROW: usize = 0;

/// Frequency base of the bounding-box lift.
pub const GEO_WAVE_BASE: f64 = 1000.0;
/// Coordinates are multiplied by this before the lift, as in the relation-network
/// box encoding; without it a [0,1] coordinate barely moves the low frequencies.
pub const GEO_COORD_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// `[CLS]` and `[SEP]` first, then every distinct surface in first-seen order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(surfaces: I) -> Self {
        let mut v = Vocab::default();
        v.push(CLS);
        v.push(SEP);
        for s in surfaces {
            v.push(s);
        }
        v
    }

    fn push(&mut self, s: &str) {
        if !self.index.contains_key(s) {
            self.index.insert(s.to_string(), self.surfaces.len());
            self.surfaces.push(s.to_string());
        }
    }

    /// One surface per line; line `i` (0-based) becomes row `i + 1`.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut v = Vocab::default();
        for line in reader.lines() {
            let line = line?;
            let s = line.trim_end_matches(['\r', '\n']);
            if s.is_empty() {
                continue;
            }
            v.push(s);
        }
        Ok(v)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.surfaces {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn row(&self, surface: &str) -> usize {
        self.index.get(surface).map_or(OOV_ROW, |i| i + 1)
    }

    /// Token-table rows needed, including the OOV row.
    pub fn rows(&self) -> usize {
        self.surfaces.len() + 1
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }
}

/// Sinusoidal lift of a box's normalized corners to `d` dimensions.
///
/// Each of the four coordinates contributes `d/8` sines followed by `d/8`
/// cosines at wavelengths `GEO_WAVE_BASE^(f / (d/8))`.
pub fn geo_embed(bbox: [f64; 4], width: f64, height: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(8) {
        return Err(Error::Config(format!("geometry dimension {d} must be a positive multiple of 8")));
    }
    let coords = normalized_box(bbox, width, height);
    let per = d / 8;
    let inv_freq: Vec<f64> = (0..per)
        .map(|f| GEO_WAVE_BASE.powf(-(f as f64) / per as f64))
        .collect();
    let mut out = Vec::with_capacity(d);
    for c in coords {
        let angles = inv_freq.iter().map(|w| GEO_COORD_SCALE * c * w);
        out.extend(angles.clone().map(f64::sin));
        out.extend(angles.map(f64::cos));
    }
    Ok(out)
}

pub fn normalized_box(bbox: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    [bbox[0] / width, bbox[1] / height, bbox[2] / width, bbox[3] / height]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedTables {
    pub token: Mat,
    pub segment: Mat,
    pub position: Mat,
    /// Shared `[IMG]` token embedding, 1×d.
    pub img_token: Mat,
    /// d_app×d.
    pub appearance_proj: Mat,
}

impl EmbedTables {
    pub fn zeros(vocab_rows: usize, max_pos: usize, d: usize, d_app: usize) -> Self {
        EmbedTables {
            token: Mat::zeros(vocab_rows, d),
            segment: Mat::zeros(3, d),
            position: Mat::zeros(max_pos, d),
            img_token: Mat::zeros(1, d),
            appearance_proj: Mat::zeros(d_app, d),
        }
    }

    pub fn d(&self) -> usize {
        self.token.cols
    }

    pub fn max_pos(&self) -> usize {
        self.position.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Visual {
    WholeImage,
    Region(usize),
}

/// Table lookups for one sequence, resolved once so that repeated forward
/// passes only touch the tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedPlan {
    /// Token-table row, or `None` for `[IMG]`.
    token_rows: Vec<Option<usize>>,
    segments: Vec<usize>,
    positions: Vec<usize>,
    visual: Vec<Visual>,
    appearances: Vec<Vec<f64>>,
    geo: Vec<Vec<f64>>,
    whole_image: Vec<f64>,
}

impl EmbedPlan {
    pub fn new(seq: &EnrichedSequence, vocab: &Vocab, max_pos: usize, d: usize, d_app: usize) -> Result<Self> {
        if seq.whole_image.len() != d_app {
            return Err(Error::rejected(
                "",
                format!("whole-image appearance has {} dims, expected {d_app}", seq.whole_image.len()),
            ));
        }
        let mut plan = EmbedPlan {
            token_rows: Vec::with_capacity(seq.len()),
            segments: Vec::with_capacity(seq.len()),
            positions: Vec::with_capacity(seq.len()),
            visual: Vec::with_capacity(seq.len()),
            appearances: Vec::new(),
            geo: Vec::new(),
            whole_image: seq.whole_image.clone(),
        };
        let mut next_region = 0;
        for (i, t) in seq.tokens.iter().enumerate() {
            if t.rel_pos >= max_pos {
                return Err(Error::rejected(
                    "",
                    format!("token {i} has position {} beyond table size {max_pos}", t.rel_pos),
                ));
            }
            plan.segments.push(t.segment.index());
            plan.positions.push(t.rel_pos);
            if t.kind == TokenKind::Img {
                let region = seq
                    .regions
                    .get(next_region)
                    .ok_or_else(|| Error::rejected("", "more [IMG] tokens than regions"))?;
                if region.appearance.len() != d_app {
                    return Err(Error::rejected(
                        "",
                        format!("region appearance has {} dims, expected {d_app}", region.appearance.len()),
                    ));
                }
                plan.token_rows.push(None);
                plan.visual.push(Visual::Region(next_region));
                plan.appearances.push(region.appearance.clone());
                plan.geo.push(geo_embed(region.bbox, seq.image_width, seq.image_height, d)?);
                next_region += 1;
            } else {
                plan.token_rows.push(Some(vocab.row(&t.surface)));
                plan.visual.push(Visual::WholeImage);
            }
        }
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.token_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_rows.is_empty()
    }

    pub fn embed(&self, tables: &EmbedTables) -> Mat {
        let d = tables.d();
        let whole = project(&self.whole_image, &tables.appearance_proj);
        let regions: Vec<Vec<f64>> = self
            .appearances
            .iter()
            .map(|a| project(a, &tables.appearance_proj))
            .collect();
        let mut out = Mat::zeros(self.len(), d);
        for i in 0..self.len() {
            let row = out.row_mut(i);
            let tok = match self.token_rows[i] {
                Some(r) => tables.token.row(r),
                None => tables.img_token.row(0),
            };
            let seg = tables.segment.row(self.segments[i]);
            let pos = tables.position.row(self.positions[i]);
            match self.visual[i] {
                Visual::WholeImage => {
                    for c in 0..d {
                        row[c] = tok[c] + seg[c] + pos[c] + whole[c];
                    }
                }
                Visual::Region(r) => {
                    let (app, geo) = (&regions[r], &self.geo[r]);
                    for c in 0..d {
                        row[c] = tok[c] + seg[c] + pos[c] + app[c] + geo[c];
                    }
                }
            }
        }
        out
    }

    /// Accumulates `d(loss)/d(tables)` given `d(loss)/d(embedded rows)`.
    pub fn backward(&self, grad: &Mat, tables_grad: &mut EmbedTables) {
        let d = grad.cols;
        let mut whole_grad = vec![0.0; d];
        for i in 0..self.len() {
            let g = grad.row(i);
            let tok = match self.token_rows[i] {
                Some(r) => tables_grad.token.row_mut(r),
                None => tables_grad.img_token.row_mut(0),
            };
            axpy(tok, g);
            axpy(tables_grad.segment.row_mut(self.segments[i]), g);
            axpy(tables_grad.position.row_mut(self.positions[i]), g);
            match self.visual[i] {
                Visual::WholeImage => axpy(&mut whole_grad, g),
                Visual::Region(r) => outer_acc(&self.appearances[r], g, &mut tables_grad.appearance_proj),
            }
        }
        outer_acc(&self.whole_image, &whole_grad, &mut tables_grad.appearance_proj);
    }
}

/// Embeds one sequence; `[IMG]` rows use the region appearance plus box
/// geometry, every other row uses the whole-image appearance.
pub fn embed(seq: &EnrichedSequence, tables: &EmbedTables, vocab: &Vocab) -> Result<Mat> {
    let plan = EmbedPlan::new(
        seq,
        vocab,
        tables.max_pos(),
        tables.d(),
        tables.appearance_proj.rows,
    )?;
    Ok(plan.embed(tables))
}

fn project(v: &[f64], proj: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; proj.cols];
    for (k, &x) in v.iter().enumerate() {
        if x != 0.0 {
            axpy_scaled(&mut out, proj.row(k), x);
        }
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += b;
    }
}

#[inline]
fn axpy_scaled(y: &mut [f64], x: &[f64], s: f64) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += s * b;
    }
}

fn outer_acc(u: &[f64], v: &[f64], out: &mut Mat) {
    for (k, &x) in u.iter().enumerate() {
        if x != 0.0 {
            axpy_scaled(out.row_mut(k), v, x);
        }
    }
}
