//! The constructed image: every detected crop on its own row, followed by its
//! rendered region label, e.g. `(B3)`. Rows are split into pages when the
//! canvas would exceed `max_canvas_height`.

use image::Rgb;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{envelope, BBox, DetectedRegion, DocumentImage, Raster};
use crate::glyphs::{draw_text, text_width, GLYPH_ROWS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub row_padding: u32,
    pub label_gap: u32,
    pub max_crop_height: u32,
    /// `{i}` is replaced by the region id.
    pub label_template: String,
    pub label_scale: u32,
    pub canvas_width: u32,
    pub max_canvas_height: u32,
    pub background: [u8; 3],
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            row_padding: 8,
            label_gap: 12,
            max_crop_height: 48,
            label_template: "(B{i})".into(),
            label_scale: 2,
            canvas_width: 1024,
            max_canvas_height: 8192,
            background: [255, 255, 255],
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("row_padding", self.row_padding),
            ("label_gap", self.label_gap),
            ("max_crop_height", self.max_crop_height),
            ("label_scale", self.label_scale),
            ("canvas_width", self.canvas_width),
            ("max_canvas_height", self.max_canvas_height),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Usage(format!("layout {name} must be positive")));
        }
        if !self.label_template.contains("{i}") {
            return Err(Error::Usage("label template needs an {i} placeholder".into()));
        }
        Ok(())
    }

    pub fn label(&self, region_id: u32) -> String {
        self.label_template.replace("{i}", &region_id.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructedRow {
    pub region_id: u32,
    /// Box in the original document.
    pub source_box: BBox,
    /// Where the (possibly scaled) crop sits on its page.
    pub row_box: BBox,
    pub page: usize,
}

#[derive(Debug, Clone)]
pub struct ConstructedPage {
    pub index: usize,
    pub image: DocumentImage,
    pub rows: Vec<ConstructedRow>,
}

#[derive(Debug, Clone)]
pub struct ConstructedImageMap {
    pub pages: Vec<ConstructedPage>,
    pub layout: LayoutConfig,
}

impl ConstructedImageMap {
    pub fn rows(&self) -> impl Iterator<Item = &ConstructedRow> {
        self.pages.iter().flat_map(|p| &p.rows)
    }

    pub fn region_ids(&self) -> Vec<u32> {
        self.rows().map(|r| r.region_id).collect()
    }
}

fn scaled_crop(crop: &Raster, max_h: u32) -> Raster {
    if crop.height() <= max_h {
        return crop.clone();
    }
    let w = ((crop.width() as u64 * max_h as u64) / crop.height() as u64).max(1) as u32;
    image::imageops::resize(crop, w, max_h, image::imageops::FilterType::Triangle)
}

/// Lays regions out one per row in id order.
pub fn build_constructed_image(
    doc_id: &str,
    regions: &[DetectedRegion],
    cfg: &LayoutConfig,
) -> Result<ConstructedImageMap> {
    cfg.validate()?;
    if regions.is_empty() {
        return Err(Error::Usage("constructed image needs at least one region".into()));
    }
    let mut ordered: Vec<&DetectedRegion> = regions.iter().collect();
    ordered.sort_by_key(|r| r.region_id);
    if ordered.iter().enumerate().any(|(i, r)| r.region_id != i as u32) {
        return Err(Error::Usage("region ids must be dense from 0".into()));
    }

    let label_h = GLYPH_ROWS * cfg.label_scale;
    struct Prepared<'a> {
        region: &'a DetectedRegion,
        crop: Raster,
        label: String,
        height: u32,
    }
    let prepared: Vec<Prepared> = ordered
        .into_iter()
        .map(|region| {
            let crop = scaled_crop(&region.crop, cfg.max_crop_height);
            let label = cfg.label(region.region_id);
            let need =
                cfg.row_padding + crop.width() + cfg.label_gap + text_width(&label, cfg.label_scale) + cfg.row_padding;
            if need > cfg.canvas_width {
                return Err(Error::Layout(format!(
                    "region {} needs {need} px, canvas is {} px wide",
                    region.region_id, cfg.canvas_width
                )));
            }
            let height = crop.height().max(label_h);
            if height + cfg.row_padding > cfg.max_canvas_height {
                return Err(Error::Layout(format!("region {} taller than a page", region.region_id)));
            }
            Ok(Prepared {
                region,
                crop,
                label,
                height,
            })
        })
        .collect::<Result<_>>()?;

    // split rows into pages
    let mut page_slices: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    let mut used = 0;
    for (i, p) in prepared.iter().enumerate() {
        let h = p.height + cfg.row_padding;
        if used + h > cfg.max_canvas_height && i > start {
            page_slices.push(start..i);
            start = i;
            used = 0;
        }
        used += h;
    }
    page_slices.push(start..prepared.len());

    let bg = Rgb(cfg.background);
    let pages = page_slices
        .into_iter()
        .enumerate()
        .map(|(page, range)| {
            let rows = &prepared[range];
            let height: u32 = rows.iter().map(|r| r.height + cfg.row_padding).sum();
            let mut canvas = Raster::from_pixel(cfg.canvas_width, height, bg);
            let mut y = 0;
            let mut out_rows = Vec::with_capacity(rows.len());
            for r in rows {
                let cx = cfg.row_padding;
                let cy = y + (r.height - r.crop.height()) / 2;
                image::imageops::replace(&mut canvas, &r.crop, cx as i64, cy as i64);
                let lx = cx + r.crop.width() + cfg.label_gap;
                let ly = y + (r.height - label_h) / 2;
                draw_text(&mut canvas, lx, ly, &r.label, cfg.label_scale, Rgb([0, 0, 0]), |_| 0);
                out_rows.push(ConstructedRow {
                    region_id: r.region.region_id,
                    source_box: r.region.bbox,
                    row_box: BBox {
                        x1: cx,
                        y1: cy,
                        x2: cx + r.crop.width(),
                        y2: cy + r.crop.height(),
                    },
                    page,
                });
                y += r.height + cfg.row_padding;
            }
            Ok(ConstructedPage {
                index: page,
                image: DocumentImage::new(format!("{doc_id}#constructed{page}"), canvas)?,
                rows: out_rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConstructedImageMap {
        pages,
        layout: cfg.clone(),
    })
}

/// Envelope, in original-document coordinates, of the referenced regions.
pub fn resolve_region_ids(ids: &[u32], cim: &ConstructedImageMap) -> Result<BBox> {
    if ids.is_empty() {
        return Err(Error::Usage("no region ids to resolve".into()));
    }
    let mut boxes = Vec::with_capacity(ids.len());
    let mut unknown = Vec::new();
    for id in ids {
        match cim.rows().find(|r| r.region_id == *id) {
            Some(r) => boxes.push(r.source_box),
            None => unknown.push(*id),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Grounding(unknown));
    }
    envelope(&boxes)
}

/// Writes each page as `<stem>_page<k>.png` and a `<stem>_map.jsonl` sidecar.
pub fn dump(cim: &ConstructedImageMap, dir: &std::path::Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sidecar = String::new();
    for page in &cim.pages {
        let p = dir.join(format!("{stem}_page{}.png", page.index));
        std::fs::write(&p, page.image.to_png()?).map_err(|e| Error::io(&p, e))?;
        for r in &page.rows {
            sidecar.push_str(&serde_json::to_string(r).expect("row serializes"));
            sidecar.push('\n');
        }
    }
    let p = dir.join(format!("{stem}_map.jsonl"));
    std::fs::write(&p, sidecar).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{reference_detect, ReferenceParams};
    use crate::geometry::crop;
    use crate::glyphs::space_advance;

    fn four_words() -> (DocumentImage, Vec<DetectedRegion>) {
        let mut r = Raster::from_pixel(400, 40, Rgb([255, 255, 255]));
        let mut x = 10;
        for w in ["THE", "STATE", "OF", "TEXAS"] {
            draw_text(&mut r, x, 10, w, 2, Rgb([0, 0, 0]), |_| 0);
            x += text_width(w, 2) + 2 * space_advance(2);
        }
        let img = DocumentImage::new("texas", r).unwrap();
        let regions = reference_detect(&img, &ReferenceParams::default()).unwrap();
        (img, regions)
    }

    #[test]
    fn one_labeled_row_per_word() {
        let (_, regions) = four_words();
        assert_eq!(regions.len(), 4);
        let cim = build_constructed_image("texas", &regions, &LayoutConfig::default()).unwrap();
        assert_eq!(cim.pages.len(), 1);
        assert_eq!(cim.region_ids(), vec![0, 1, 2, 3]);
        let page = &cim.pages[0];
        // first row holds the THE crop
        let first = crop(&page.image, &page.rows[0].row_box).unwrap();
        assert_eq!(first, regions[0].crop);
        // rows are vertically disjoint and ordered
        for w in page.rows.windows(2) {
            assert!(w[0].row_box.y2 <= w[1].row_box.y1);
        }
        // the label "(B0)" sits to the right of the crop: ink exists there
        let r0 = page.rows[0].row_box;
        let lx = r0.x2 + cim.layout.label_gap;
        let label = crop(
            &page.image,
            &BBox::new(lx, r0.y1.saturating_sub(4), lx + 40, r0.y2 + 4).unwrap(),
        )
        .unwrap();
        assert!(label.pixels().any(|p| p.0[0] < 128));
    }

    #[test]
    fn canvas_height_sums_rows() {
        let (_, regions) = four_words();
        let cfg = LayoutConfig::default();
        let one = build_constructed_image("t", &regions[..1], &cfg).unwrap();
        let row_h = regions[0].crop.height().max(14);
        assert_eq!(one.pages[0].image.height(), row_h + cfg.row_padding);
        let all = build_constructed_image("t", &regions, &cfg).unwrap();
        let want: u32 = regions.iter().map(|r| r.crop.height().max(14) + cfg.row_padding).sum();
        assert_eq!(all.pages[0].image.height(), want);
    }

    #[test]
    fn deterministic_output() {
        let (_, regions) = four_words();
        let a = build_constructed_image("t", &regions, &LayoutConfig::default()).unwrap();
        let b = build_constructed_image("t", &regions, &LayoutConfig::default()).unwrap();
        assert_eq!(a.pages[0].image.to_png().unwrap(), b.pages[0].image.to_png().unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            build_constructed_image("t", &[], &LayoutConfig::default()),
            Err(Error::Usage(_))
        ));
        let (_, regions) = four_words();
        let narrow = LayoutConfig {
            canvas_width: 40,
            ..LayoutConfig::default()
        };
        assert!(matches!(
            build_constructed_image("t", &regions, &narrow),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn resolves_ids_to_source_boxes() {
        let (_, regions) = four_words();
        let cim = build_constructed_image("t", &regions, &LayoutConfig::default()).unwrap();
        assert_eq!(resolve_region_ids(&[2], &cim).unwrap(), regions[2].bbox);
        let both = envelope(&[regions[0].bbox, regions[1].bbox]).unwrap();
        assert_eq!(resolve_region_ids(&[0, 1], &cim).unwrap(), both);
        let all = envelope(&regions.iter().map(|r| r.bbox).collect::<Vec<_>>()).unwrap();
        assert_eq!(resolve_region_ids(&[0, 1, 2, 3], &cim).unwrap(), all);
        match resolve_region_ids(&[99, 1], &cim) {
            Err(Error::Grounding(bad)) => assert_eq!(bad, vec![99]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tall_crops_scale_and_long_documents_page() {
        let tall = DetectedRegion {
            region_id: 0,
            bbox: BBox::new(0, 0, 20, 100).unwrap(),
            crop: Raster::from_pixel(20, 100, Rgb([0, 0, 0])),
        };
        let cim = build_constructed_image("t", &[tall], &LayoutConfig::default()).unwrap();
        assert_eq!(cim.pages[0].rows[0].row_box.height(), 48);
        assert_eq!(cim.pages[0].rows[0].row_box.width(), 9);

        let regions: Vec<DetectedRegion> = (0..10)
            .map(|i| DetectedRegion {
                region_id: i,
                bbox: BBox::new(0, i * 20, 30, i * 20 + 20).unwrap(),
                crop: Raster::from_pixel(30, 20, Rgb([0, 0, 0])),
            })
            .collect();
        let cfg = LayoutConfig {
            max_canvas_height: 90,
            ..LayoutConfig::default()
        };
        let cim = build_constructed_image("t", &regions, &cfg).unwrap();
        // rows are 28 px each, so three fit per 90 px page
        assert_eq!(cim.pages.len(), 4);
        assert!(cim.pages.iter().all(|p| p.image.height() <= 90));
        assert_eq!(cim.region_ids(), (0..10).collect::<Vec<_>>());
        assert!(cim.pages.iter().all(|p| p.rows.iter().all(|r| r.page == p.index)));
    }
}
