use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use super::{file_stem, find_image, kv_to_question, sorted_files, Corpus, LazyImage, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{envelope, BBox, QaRecord};

#[derive(Deserialize)]
struct Annotation {
    form: Vec<Entity>,
}

#[derive(Deserialize)]
struct Entity {
    id: u32,
    #[serde(default)]
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
    #[serde(default)]
    words: Vec<Word>,
    #[serde(default)]
    linking: Vec<[u32; 2]>,
}

#[derive(Deserialize)]
struct Word {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn to_box(b: &[f64; 4]) -> Result<BBox> {
    BBox::from_f64_outward(b[0], b[1], b[2], b[3])
}

fn entity_text_and_boxes(e: &Entity) -> Result<(String, Vec<BBox>)> {
    let words: Vec<&Word> = e.words.iter().filter(|w| !w.text.trim().is_empty()).collect();
    if words.is_empty() {
        return Ok((e.text.trim().to_string(), vec![to_box(&e.bbox)?]));
    }
    let text = words.iter().map(|w| w.text.trim()).collect::<Vec<_>>().join(" ");
    let boxes = words.iter().map(|w| to_box(&w.bbox)).collect::<Result<_>>()?;
    Ok((text, boxes))
}

/// Loads `<root>/annotations/*.json` with images in `<root>/images/`.
/// Each question entity linked to answer entities becomes one record.
pub fn load_funsd(root: &Path) -> Result<Corpus> {
    let ann_dir = root.join("annotations");
    let img_dir = root.join("images");
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    let mut warnings = Vec::new();
    for path in sorted_files(&ann_dir, "json")? {
        let doc_id = file_stem(&path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ann: Annotation = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("malformed annotation {}: {e}", path.display())))?;
        let img = find_image(&img_dir, &doc_id)
            .ok_or_else(|| Error::Validation(format!("no image for annotation {}", path.display())))?;
        images.insert(doc_id.clone(), Arc::new(LazyImage::from_file(doc_id.clone(), img)));

        let by_id: HashMap<u32, &Entity> = ann.form.iter().map(|e| (e.id, e)).collect();
        for q in ann.form.iter().filter(|e| e.label == "question") {
            let mut answer_ids: Vec<u32> = q
                .linking
                .iter()
                .filter_map(|&[a, b]| {
                    if a == q.id {
                        Some(b)
                    } else if b == q.id {
                        Some(a)
                    } else {
                        None
                    }
                })
                .filter(|id| by_id.get(id).is_some_and(|e| e.label == "answer"))
                .collect();
            answer_ids.sort_unstable();
            answer_ids.dedup();
            if answer_ids.is_empty() {
                let msg = format!("{doc_id}: question entity {} has no linked answer; skipped", q.id);
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            let (key, _) = entity_text_and_boxes(q)?;
            let key = key
                .trim_end_matches(|c: char| c == ':' || c.is_whitespace())
                .to_string();
            let Ok(question) = kv_to_question(&key) else {
                let msg = format!("{doc_id}: question entity {} has empty text; skipped", q.id);
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            };
            let mut golds = Vec::new();
            let mut boxes = Vec::new();
            for id in answer_ids {
                let (t, b) = entity_text_and_boxes(by_id[&id])?;
                if !t.is_empty() && !golds.contains(&t) {
                    golds.push(t);
                }
                boxes.extend(b);
            }
            if golds.is_empty() {
                let msg = format!(
                    "{doc_id}: question entity {} links only to empty answers; skipped",
                    q.id
                );
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            records.push(QaRecord {
                doc_id: doc_id.clone(),
                question_id: format!("{doc_id}-{}", q.id),
                question,
                gold_answers: golds,
                gold_box: Some(envelope(&boxes)?),
                source_field_key: Some(key),
            });
        }
    }
    Ok(Corpus::new(
        dataset_name(root, "funsd"),
        Provenance::Funsd,
        records,
        images,
        BTreeMap::new(),
    )?
    .with_warnings(warnings))
}

pub(super) fn dataset_name(root: &Path, fallback: &str) -> String {
    root.file_name()
        .map(|n| format!("{fallback}:{}", n.to_string_lossy()))
        .unwrap_or_else(|| fallback.to_string())
}
