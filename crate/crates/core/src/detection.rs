//! Text detection: pluggable backends that return word boxes, plus the shared
//! post-processing that orders regions for reading and cuts their crops.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::geometry::{crop, quad_to_bbox, BBox, DetectedRegion, DocumentImage, Quad};

pub trait DetectorBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn needs_network(&self) -> bool {
        false
    }

    /// Backends that cannot take concurrent calls return true; callers
    /// serialize access.
    fn single_flight(&self) -> bool {
        false
    }

    /// Raw boxes in any order.
    fn detect_boxes(&self, image: &DocumentImage) -> Result<Vec<BBox>>;
}

/// Sorts boxes top-to-bottom by band, then left-to-right. Boxes share a band
/// when their vertical centers differ from the band's first box by less than
/// half the median box height.
pub fn reading_order(mut boxes: Vec<BBox>) -> Vec<BBox> {
    if boxes.len() < 2 {
        return boxes;
    }
    let mut heights: Vec<u32> = boxes.iter().map(BBox::height).collect();
    heights.sort_unstable();
    let median = heights[heights.len() / 2] as u64;
    // centers and thresholds carried doubled to stay in integers
    boxes.sort_by_key(|b| (b.center_y2(), b.x1, b.y1, b.x2, b.y2));
    let mut bands: Vec<Vec<BBox>> = Vec::new();
    let mut anchor = 0u64;
    for b in boxes {
        match bands.last_mut() {
            Some(band) if b.center_y2() - anchor < median => band.push(b),
            _ => {
                anchor = b.center_y2();
                bands.push(vec![b]);
            }
        }
    }
    bands
        .into_iter()
        .flat_map(|mut band| {
            band.sort_by_key(|b| (b.x1, b.y1, b.x2, b.y2));
            band
        })
        .collect()
}

/// Runs the backend and turns its boxes into regions: boxes are clipped to
/// the image, empty ones dropped, the rest put in reading order with dense ids.
pub fn detect(backend: &dyn DetectorBackend, image: &DocumentImage) -> Result<Vec<DetectedRegion>> {
    let raw = backend.detect_boxes(image).map_err(|e| match e {
        e @ Error::Detection { .. } => e,
        other => Error::Detection {
            backend_id: backend.backend_id().to_string(),
            cause: other.to_string(),
        },
    })?;
    let boxes: Vec<BBox> = raw
        .iter()
        .filter_map(|b| b.clip_to(image.width(), image.height()))
        .collect();
    reading_order(boxes)
        .into_iter()
        .enumerate()
        .map(|(i, bbox)| {
            Ok(DetectedRegion {
                region_id: i as u32,
                bbox,
                crop: crop(image, &bbox)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    pub binarize_threshold: u8,
    pub min_area: u64,
    pub merge_gap: u32,
}

impl Default for ReferenceParams {
    /// `merge_gap` is 0.6 x the median glyph width (5 columns at the default
    /// 2x synthetic scale).
    fn default() -> Self {
        ReferenceParams {
            binarize_threshold: 128,
            min_area: 9,
            merge_gap: 6,
        }
    }
}

/// Connected-component word detector for clean rendered documents.
#[derive(Debug, Clone, Default)]
pub struct ReferenceDetector {
    pub params: ReferenceParams,
}

impl DetectorBackend for ReferenceDetector {
    fn backend_id(&self) -> &str {
        "reference-cc"
    }

    fn detect_boxes(&self, image: &DocumentImage) -> Result<Vec<BBox>> {
        Ok(reference_boxes(image, &self.params))
    }
}

/// Reference detection with explicit parameters, returning ordered regions.
pub fn reference_detect(image: &DocumentImage, params: &ReferenceParams) -> Result<Vec<DetectedRegion>> {
    detect(&ReferenceDetector { params: *params }, image)
}

fn ink_mask(image: &DocumentImage, threshold: u8) -> Vec<bool> {
    image
        .pixels()
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            // ITU-R BT.601 luma, integer form
            let y = (299 * r as u32 + 587 * g as u32 + 114 * b as u32) / 1000;
            y < threshold as u32
        })
        .collect()
}

fn components(mask: &[bool], w: usize, h: usize) -> Vec<BBox> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(BBox {
            x1: x1 as u32,
            y1: y1 as u32,
            x2: x2 as u32,
            y2: y2 as u32,
        });
    }
    out
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Merges boxes whose vertical extents overlap and whose horizontal gap is
/// below `gap`, repeating until stable.
fn merge_words(mut boxes: Vec<BBox>, gap: u32) -> Vec<BBox> {
    loop {
        boxes.sort_by_key(|b| (b.x1, b.y1, b.x2, b.y2));
        let n = boxes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        let mut merged = false;
        for i in 0..n {
            let reach = boxes[i].x2.saturating_add(gap);
            for j in i + 1..n {
                if boxes[j].x1 >= reach {
                    break;
                }
                let (a, b) = (boxes[i], boxes[j]);
                if a.y1 < b.y2 && b.y1 < a.y2 {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[rj] = ri;
                        merged = true;
                    }
                }
            }
        }
        if !merged {
            return boxes;
        }
        let mut groups: BTreeMap<usize, BBox> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            let b = boxes[i];
            groups
                .entry(r)
                .and_modify(|g| {
                    g.x1 = g.x1.min(b.x1);
                    g.y1 = g.y1.min(b.y1);
                    g.x2 = g.x2.max(b.x2);
                    g.y2 = g.y2.max(b.y2);
                })
                .or_insert(b);
        }
        boxes = groups.into_values().collect();
    }
}

fn reference_boxes(image: &DocumentImage, params: &ReferenceParams) -> Vec<BBox> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mask = ink_mask(image, params.binarize_threshold);
    let comps = components(&mask, w, h);
    merge_words(comps, params.merge_gap)
        .into_iter()
        .filter(|b| b.area() >= params.min_area)
        .collect()
}

/// Replays detections from a file with one JSON object per line:
/// `{"doc_id": ..., "regions": [[x1,y1,x2,y2] | [8-number quad], ...]}`.
#[derive(Debug, Clone)]
pub struct PrecomputedDetector {
    id: String,
    boxes: HashMap<String, Vec<BBox>>,
}

#[derive(Serialize, Deserialize)]
pub struct DetectionLine {
    pub doc_id: String,
    pub regions: Vec<Vec<f64>>,
}

impl PrecomputedDetector {
    pub fn new(id: impl Into<String>, boxes: HashMap<String, Vec<BBox>>) -> Self {
        PrecomputedDetector { id: id.into(), boxes }
    }

    /// Detector answering with a corpus's exact word boxes.
    pub fn from_ground_truth(corpus: &Corpus) -> Self {
        let boxes = corpus
            .words
            .iter()
            .map(|(doc, words)| (doc.clone(), words.iter().map(|w| w.bbox).collect()))
            .collect();
        PrecomputedDetector::new("precomputed:ground-truth", boxes)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut boxes = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Validation(format!("{origin}:{}: {msg}", i + 1));
            let row: DetectionLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let regions = row
                .regions
                .iter()
                .map(|r| match r.len() {
                    4 => BBox::from_f64_outward(r[0], r[1], r[2], r[3]),
                    8 => quad_to_bbox(&Quad::from_flat(r)?),
                    n => Err(Error::Validation(format!("region with {n} numbers"))),
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| bad(e.to_string()))?;
            boxes.insert(row.doc_id, regions);
        }
        Ok(PrecomputedDetector::new(format!("precomputed:{origin}"), boxes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Serializes in the file format accepted by [`PrecomputedDetector::load`],
    /// documents sorted by id.
    pub fn to_jsonl(&self) -> String {
        let mut docs: Vec<&String> = self.boxes.keys().collect();
        docs.sort();
        let mut out = String::new();
        for d in docs {
            let row = DetectionLine {
                doc_id: d.clone(),
                regions: self.boxes[d]
                    .iter()
                    .map(|b| vec![b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64])
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

impl DetectorBackend for PrecomputedDetector {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn detect_boxes(&self, image: &DocumentImage) -> Result<Vec<BBox>> {
        self.boxes.get(&image.doc_id).cloned().ok_or_else(|| Error::Detection {
            backend_id: self.id.clone(),
            cause: format!("no detections for document {}", image.doc_id),
        })
    }
}
