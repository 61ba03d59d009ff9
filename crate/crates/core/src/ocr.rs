//! OCR ingest: the segment/document model, JSON parsing with validation, and
//! reading order.
//!
//! Bounding boxes travel on the wire as `[x0, x1, y0, y1]`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Axis-aligned text box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

/// Minimum extent used in downstream math for degenerate boxes.
pub const DEGENERATE_EXTENT: f64 = 1.0;

impl BBox {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self, String> {
        let b = BBox { x0, x1, y0, y1 };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<(), String> {
        for (name, v) in [("x0", self.x0), ("x1", self.x1), ("y0", self.y0), ("y1", self.y1)] {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
            if v < 0.0 {
                return Err(format!("{name} < 0"));
            }
        }
        if self.x0 > self.x1 {
            return Err("x0 > x1".into());
        }
        if self.y0 > self.y1 {
            return Err("y0 > y1".into());
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Height with degenerate boxes clamped to [`DEGENERATE_EXTENT`].
    pub fn effective_height(&self) -> f64 {
        self.height().max(DEGENERATE_EXTENT)
    }

    pub fn mid_y(&self) -> f64 {
        (self.y0 + self.y1) / 2.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.x0 == self.x1 || self.y0 == self.y1
    }

    pub fn to_wire(self) -> [f64; 4] {
        [self.x0, self.x1, self.y0, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextSegment {
    pub text: String,
    pub bbox: BBox,
}

impl TextSegment {
    pub fn new(text: impl Into<String>, bbox: BBox) -> Self {
        TextSegment { text: text.into(), bbox }
    }

    pub fn char_count(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageType {
    Photo,
    ScannedPdf,
    Screenshot,
}

impl ImageType {
    /// Scanned PDFs and screenshots count as electronic renderings.
    pub fn is_electronic(self) -> bool {
        !matches!(self, ImageType::Photo)
    }
}

impl fmt::Display for ImageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageType::Photo => "photo",
            ImageType::ScannedPdf => "scanned_pdf",
            ImageType::Screenshot => "screenshot",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcrDocument {
    pub image_id: String,
    pub image_type: ImageType,
    pub page_width: Option<f64>,
    pub page_height: Option<f64>,
    pub segments: Vec<TextSegment>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OcrError {
    #[error("malformed OCR JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("{0}")]
    Validation(String),
}

#[derive(Serialize, Deserialize)]
struct WireSegment {
    text: String,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct WireDocument {
    image_id: String,
    image_type: ImageType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    page_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    page_height: Option<f64>,
    segments: Vec<WireSegment>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Reject files whose boxes look like `[x0, y0, x1, y1]` order.
    pub strict_bbox_order: bool,
}

/// Fraction of segments with `x1 < y0` above which strict mode assumes the
/// file uses `[x0, y0, x1, y1]` ordering.
pub const SWAPPED_ORDER_FRACTION: f64 = 0.9;

pub fn parse_ocr_json(bytes: &[u8]) -> Result<OcrDocument, OcrError> {
    parse_ocr_json_with(bytes, ParseOptions::default())
}

pub fn parse_ocr_json_with(bytes: &[u8], opts: ParseOptions) -> Result<OcrDocument, OcrError> {
    let wire: WireDocument = serde_json::from_slice(bytes).map_err(|e| OcrError::Json {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if wire.image_id.trim().is_empty() {
        return Err(OcrError::Validation("empty image_id".into()));
    }
    if wire.segments.is_empty() {
        return Err(OcrError::Validation("no segments".into()));
    }
    for (name, v) in [("page_width", wire.page_width), ("page_height", wire.page_height)] {
        if let Some(v) = v {
            if !v.is_finite() || v < 0.0 {
                return Err(OcrError::Validation(format!("invalid {name}")));
            }
        }
    }

    let mut segments = Vec::with_capacity(wire.segments.len());
    for (i, seg) in wire.segments.into_iter().enumerate() {
        if seg.text.trim().is_empty() {
            return Err(OcrError::Validation(format!("empty text at segment {i}")));
        }
        let [x0, x1, y0, y1] = seg.bbox;
        let bbox = BBox::new(x0, x1, y0, y1)
            .map_err(|m| OcrError::Validation(format!("{m} at segment {i}")))?;
        if bbox.is_degenerate() {
            log::warn!("segment {i} of {} has a zero-area bbox", wire.image_id);
        }
        segments.push(TextSegment { text: seg.text, bbox });
    }

    if opts.strict_bbox_order {
        let suspicious = segments.iter().filter(|s| s.bbox.x1 < s.bbox.y0).count();
        if suspicious as f64 > SWAPPED_ORDER_FRACTION * segments.len() as f64 {
            return Err(OcrError::Validation(format!(
                "bbox order looks like [x0, y0, x1, y1] ({suspicious} of {} segments have x1 < y0)",
                segments.len()
            )));
        }
    }

    Ok(OcrDocument {
        image_id: wire.image_id,
        image_type: wire.image_type,
        page_width: wire.page_width,
        page_height: wire.page_height,
        segments,
    })
}

pub fn to_ocr_json(doc: &OcrDocument) -> String {
    let wire = WireDocument {
        image_id: doc.image_id.clone(),
        image_type: doc.image_type,
        page_width: doc.page_width,
        page_height: doc.page_height,
        segments: doc
            .segments
            .iter()
            .map(|s| WireSegment { text: s.text.clone(), bbox: s.bbox.to_wire() })
            .collect(),
    };
    serde_json::to_string_pretty(&wire).expect("OCR document serializes")
}

// serde_json reports 1-based line and column (column counts bytes).
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (n, chunk) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        if n + 1 == line {
            return (offset + column.saturating_sub(1)).min(bytes.len());
        }
        offset += chunk.len();
    }
    bytes.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadingOrder {
    /// Ascending `y0`, then ascending `x0`.
    #[default]
    TopToBottom,
    /// Ascending `x0`, then ascending `y0`.
    LeftToRight,
}

pub fn sort_reading_order(segments: &[TextSegment]) -> Vec<TextSegment> {
    sort_reading_order_with(segments, ReadingOrder::TopToBottom)
}

pub fn sort_reading_order_with(segments: &[TextSegment], order: ReadingOrder) -> Vec<TextSegment> {
    let mut out = segments.to_vec();
    out.sort_by(|a, b| reading_cmp(&a.bbox, &b.bbox, order));
    out
}

/// Permutation that puts `segments` in reading order (stable).
pub fn reading_permutation(segments: &[TextSegment], order: ReadingOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..segments.len()).collect();
    idx.sort_by(|&a, &b| reading_cmp(&segments[a].bbox, &segments[b].bbox, order));
    idx
}

fn reading_cmp(a: &BBox, b: &BBox, order: ReadingOrder) -> Ordering {
    match order {
        ReadingOrder::TopToBottom => a.y0.total_cmp(&b.y0).then(a.x0.total_cmp(&b.x0)),
        ReadingOrder::LeftToRight => a.x0.total_cmp(&b.x0).then(a.y0.total_cmp(&b.y0)),
    }
}
