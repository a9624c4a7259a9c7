//! Shared domain types: boxes, quads, document rasters, regions, questions and
//! predictions.
//!
//! Boxes use integer pixel coordinates with `width = x2 - x1`; the right and
//! bottom edges are exclusive.

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB pixel buffer.
pub type Raster = RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 > x2 || y1 > y2 {
            return Err(Error::Validation(format!("inverted box [{x1},{y1},{x2},{y2}]")));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Rounds fractional coordinates outward (floor the near edge, ceil the far
    /// edge) so that no covered pixel is lost. Negative values clamp to zero.
    pub fn from_f64_outward(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite box coordinate".into()));
        }
        let lo = |v: f64| v.floor().max(0.0) as u32;
        let hi = |v: f64| v.ceil().max(0.0) as u32;
        BBox::new(lo(x1), lo(y1), hi(x2), hi(y2))
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn center_y2(&self) -> u64 {
        self.y1 as u64 + self.y2 as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(BBox { x1, y1, x2, y2 })
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Result<BBox> {
        let shift = |v: u32, d: i64| -> Result<u32> {
            u32::try_from(v as i64 + d).map_err(|_| Error::Validation("translated box leaves the plane".into()))
        };
        BBox::new(
            shift(self.x1, dx)?,
            shift(self.y1, dy)?,
            shift(self.x2, dx)?,
            shift(self.y2, dy)?,
        )
    }

    /// Clips the box to a `width` x `height` canvas. Returns `None` when nothing
    /// of positive area remains.
    pub fn clip_to(&self, width: u32, height: u32) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.min(width),
            y1: self.y1.min(height),
            x2: self.x2.min(width),
            y2: self.y2.min(height),
        };
        (b.area() > 0).then_some(b)
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Minimal axis-aligned box containing every input box.
pub fn envelope(boxes: &[BBox]) -> Result<BBox> {
    let (first, rest) = boxes
        .split_first()
        .ok_or_else(|| Error::Usage("envelope of an empty box list".into()))?;
    Ok(rest.iter().fold(*first, |acc, b| BBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Quadrilateral given clockwise from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub points: [Point; 4],
}

impl Quad {
    pub fn new(points: [(f64, f64); 4]) -> Self {
        Quad {
            points: points.map(|(x, y)| Point { x, y }),
        }
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 8 {
            return Err(Error::Validation(format!("quad needs 8 numbers, got {}", v.len())));
        }
        Ok(Quad::new([(v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7])]))
    }

    /// Shoelace area (absolute value).
    pub fn area(&self) -> f64 {
        let p = &self.points;
        let twice: f64 = (0..4)
            .map(|i| {
                let (a, b) = (p[i], p[(i + 1) % 4]);
                a.x * b.y - b.x * a.y
            })
            .sum();
        twice.abs() / 2.0
    }

    fn is_self_intersecting(&self) -> bool {
        let p = &self.points;
        segments_cross(p[0], p[1], p[2], p[3]) || segments_cross(p[1], p[2], p[3], p[0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Validation("non-finite quad corner".into()));
        }
        if self.area() <= 0.0 {
            return Err(Error::Validation("degenerate quad (zero area)".into()));
        }
        if self.is_self_intersecting() {
            return Err(Error::Validation("self-intersecting quad".into()));
        }
        Ok(())
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// Axis-aligned envelope of a quad, rounded outward.
pub fn quad_to_bbox(q: &Quad) -> Result<BBox> {
    q.validate()?;
    let xs = q.points.map(|p| p.x);
    let ys = q.points.map(|p| p.y);
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    BBox::from_f64_outward(min(xs), min(ys), max(xs), max(ys))
}

/// A document page image. Cloning shares the pixel buffer.
#[derive(Debug, Clone)]
pub struct DocumentImage {
    pub doc_id: String,
    pixels: Arc<Raster>,
}

impl DocumentImage {
    pub fn new(doc_id: impl Into<String>, pixels: Raster) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::Validation("document image has zero extent".into()));
        }
        Ok(DocumentImage {
            doc_id: doc_id.into(),
            pixels: Arc::new(pixels),
        })
    }

    pub fn from_raw(doc_id: impl Into<String>, width: u32, height: u32, buf: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if buf.len() != expected {
            return Err(Error::Validation(format!(
                "raster buffer has {} bytes, expected {expected}",
                buf.len()
            )));
        }
        let raster =
            Raster::from_raw(width, height, buf).ok_or_else(|| Error::Validation("raster buffer rejected".into()))?;
        DocumentImage::new(doc_id, raster)
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn pixels(&self) -> &Raster {
        &self.pixels
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x1: 0,
            y1: 0,
            x2: self.width(),
            y2: self.height(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(&self.pixels)
    }
}

pub fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    raster.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Pixels of `bbox` within `image`. Out-of-bounds boxes are rejected, never
/// clamped.
pub fn crop(image: &DocumentImage, bbox: &BBox) -> Result<Raster> {
    if !bbox.fits_within(image.width(), image.height()) {
        return Err(Error::Validation(format!(
            "box {bbox} exceeds image {}x{}",
            image.width(),
            image.height()
        )));
    }
    Ok(image::imageops::crop_imm(image.pixels(), bbox.x1, bbox.y1, bbox.width(), bbox.height()).to_image())
}

#[derive(Debug, Clone)]
pub struct DetectedRegion {
    pub region_id: u32,
    pub bbox: BBox,
    pub crop: Raster,
}

#[derive(Debug, Clone)]
pub struct RecognizedRegion {
    pub region: DetectedRegion,
    pub text: String,
}

/// A word with its exact box, as emitted by the synthetic generator or an OCR
/// annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordBox {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub doc_id: String,
    pub question_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub gold_box: Option<BBox>,
    pub source_field_key: Option<String>,
}

impl QaRecord {
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.gold_answers.is_empty() {
            return Err(Error::Validation(format!(
                "question {} has no gold answers",
                self.question_id
            )));
        }
        if let Some(b) = &self.gold_box {
            if !b.fits_within(width, height) {
                return Err(Error::Validation(format!(
                    "question {}: gold box {b} exceeds image {width}x{height}",
                    self.question_id
                )));
            }
        }
        Ok(())
    }
}

/// One answered question. This is also the predictions-file row schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
    pub answer_box: Option<BBox>,
    pub matched_region_ids: Vec<u32>,
    pub raw_model_output: String,
    pub wall_time_ms: u64,
    pub error: Option<String>,
}

impl Prediction {
    pub fn empty(question_id: impl Into<String>) -> Self {
        Prediction {
            question_id: question_id.into(),
            answer: String::new(),
            answer_box: None,
            matched_region_ids: Vec::new(),
            raw_model_output: String::new(),
            wall_time_ms: 0,
            error: None,
        }
    }
}
