use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use super::funsd::dataset_name;
use super::{file_stem, find_image, kv_to_question, sorted_files, Corpus, LazyImage, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{envelope, quad_to_bbox, BBox, QaRecord, Quad};

#[derive(Deserialize)]
struct Receipt {
    #[serde(default)]
    valid_line: Vec<Line>,
}

#[derive(Deserialize)]
struct Line {
    #[serde(default)]
    words: Vec<Word>,
    category: String,
}

#[derive(Deserialize)]
struct Word {
    quad: QuadCorners,
    text: String,
    #[serde(default)]
    is_key: u8,
}

#[derive(Deserialize)]
struct QuadCorners {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    x3: f64,
    y3: f64,
    x4: f64,
    y4: f64,
}

impl QuadCorners {
    fn to_box(&self) -> Result<BBox> {
        quad_to_bbox(&Quad::new([
            (self.x1, self.y1),
            (self.x2, self.y2),
            (self.x3, self.y3),
            (self.x4, self.y4),
        ]))
    }
}

/// Readable key for a CORD category such as `total.total_price`.
pub(crate) fn category_key(category: &str) -> String {
    let known = match category {
        "menu.nm" => Some("menu name"),
        "menu.cnt" => Some("menu count"),
        "menu.price" => Some("menu price"),
        "menu.unitprice" => Some("menu unit price"),
        "menu.sub_nm" => Some("sub menu name"),
        "menu.sub_price" => Some("sub menu price"),
        "sub_total.subtotal_price" => Some("subtotal price"),
        "sub_total.tax_price" => Some("tax price"),
        "sub_total.service_price" => Some("service price"),
        "sub_total.discount_price" => Some("discount price"),
        "total.total_price" => Some("total price"),
        "total.cashprice" => Some("cash price"),
        "total.changeprice" => Some("change price"),
        "total.creditcardprice" => Some("credit card price"),
        "total.menuqty_cnt" => Some("menu quantity count"),
        "total.menutype_cnt" => Some("menu type count"),
        _ => None,
    };
    known
        .map(str::to_string)
        .unwrap_or_else(|| category.replace(['.', '_'], " "))
}

/// Loads `<root>/json/*.json` receipts with images in `<root>/image/`.
/// Each category becomes one record; when a category labels several lines,
/// each distinct line text is a gold variant and the box spans all of them.
pub fn load_cord(root: &Path) -> Result<Corpus> {
    let ann_dir = root.join("json");
    let img_dir = root.join("image");
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    for path in sorted_files(&ann_dir, "json")? {
        let doc_id = file_stem(&path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let receipt: Receipt = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("malformed annotation {}: {e}", path.display())))?;
        let img = find_image(&img_dir, &doc_id)
            .ok_or_else(|| Error::Validation(format!("no image for annotation {}", path.display())))?;
        images.insert(doc_id.clone(), Arc::new(LazyImage::from_file(doc_id.clone(), img)));

        // category -> (distinct line texts, value word boxes), in first-seen order
        let mut fields: Vec<(String, Vec<String>, Vec<BBox>)> = Vec::new();
        for line in &receipt.valid_line {
            let values: Vec<&Word> = line
                .words
                .iter()
                .filter(|w| w.is_key == 0 && !w.text.trim().is_empty())
                .collect();
            if values.is_empty() {
                continue;
            }
            let text = values.iter().map(|w| w.text.trim()).collect::<Vec<_>>().join(" ");
            let boxes = values.iter().map(|w| w.quad.to_box()).collect::<Result<Vec<_>>>()?;
            match fields.iter_mut().find(|f| f.0 == line.category) {
                Some(f) => {
                    if !f.1.contains(&text) {
                        f.1.push(text);
                    }
                    f.2.extend(boxes);
                }
                None => fields.push((line.category.clone(), vec![text], boxes)),
            }
        }
        for (category, golds, boxes) in fields {
            let key = category_key(&category);
            records.push(QaRecord {
                doc_id: doc_id.clone(),
                question_id: format!("{doc_id}-{category}"),
                question: kv_to_question(&key)?,
                gold_answers: golds,
                gold_box: Some(envelope(&boxes)?),
                source_field_key: Some(key),
            });
        }
    }
    Corpus::new(
        dataset_name(root, "cord"),
        Provenance::Cord,
        records,
        images,
        BTreeMap::new(),
    )
}
