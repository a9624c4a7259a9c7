use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use super::funsd::dataset_name;
use super::{derive_gold_box, file_stem, Corpus, LazyImage, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{quad_to_bbox, BBox, QaRecord, Quad, WordBox};

#[derive(Deserialize)]
struct QuestionFile {
    data: Vec<Entry>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct Entry {
    question_id: serde_json::Value,
    question: String,
    image: String,
    #[serde(default)]
    answers: Vec<String>,
}

/// OCR token files: either the Microsoft Read layout shipped with DocVQA
/// (`recognitionResults[].lines[].words[]` with 8-number boxes) or a flat
/// `{"words": [{"text", "box": [x1,y1,x2,y2]}]}`.
#[derive(Deserialize)]
#[serde(untagged)]
enum OcrFile {
    Read {
        #[serde(rename = "recognitionResults")]
        recognition_results: Vec<ReadPage>,
    },
    Flat {
        words: Vec<WordBox>,
    },
}

#[derive(Deserialize)]
struct ReadPage {
    #[serde(default)]
    lines: Vec<ReadLine>,
}

#[derive(Deserialize)]
struct ReadLine {
    #[serde(default)]
    words: Vec<ReadWord>,
}

#[derive(Deserialize)]
struct ReadWord {
    #[serde(rename = "boundingBox")]
    bounding_box: Vec<f64>,
    text: String,
}

fn read_ocr(path: &Path) -> Result<Vec<WordBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ocr: OcrFile = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("malformed OCR file {}: {e}", path.display())))?;
    match ocr {
        OcrFile::Flat { words } => Ok(words),
        OcrFile::Read { recognition_results } => recognition_results
            .iter()
            .flat_map(|p| &p.lines)
            .flat_map(|l| &l.words)
            .map(|w| {
                let bbox: BBox = match w.bounding_box.len() {
                    4 => BBox::from_f64_outward(
                        w.bounding_box[0],
                        w.bounding_box[1],
                        w.bounding_box[2],
                        w.bounding_box[3],
                    )?,
                    _ => quad_to_bbox(&Quad::from_flat(&w.bounding_box)?)?,
                };
                Ok(WordBox {
                    text: w.text.clone(),
                    bbox,
                })
            })
            .collect(),
    }
}

fn question_file(root: &Path) -> Result<PathBuf> {
    let direct = root.join("questions.json");
    if direct.exists() {
        return Ok(direct);
    }
    let mut candidates: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .is_some_and(|n| n.to_string_lossy().ends_with("_v1.0.json"))
        })
        .collect();
    candidates.sort();
    candidates
        .into_iter()
        .next()
        .ok_or_else(|| Error::Validation(format!("no questions.json under {}", root.display())))
}

/// Loads a DocVQA question file (`questions.json` or `*_v1.0.json`) with
/// images addressed relative to `root`. Gold boxes are derived from optional
/// OCR token files at `<root>/ocr/<doc_id>.json`.
pub fn load_docvqa(root: &Path) -> Result<Corpus> {
    let qpath = question_file(root)?;
    let text = fs::read_to_string(&qpath).map_err(|e| Error::io(&qpath, e))?;
    let qf: QuestionFile = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("malformed question file {}: {e}", qpath.display())))?;
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    let mut words: BTreeMap<String, Vec<WordBox>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for e in qf.data {
        let img_path = root.join(&e.image);
        let doc_id = file_stem(&img_path);
        if !img_path.exists() {
            return Err(Error::Validation(format!("missing image {}", img_path.display())));
        }
        images
            .entry(doc_id.clone())
            .or_insert_with(|| Arc::new(LazyImage::from_file(doc_id.clone(), img_path.clone())));
        if !words.contains_key(&doc_id) {
            let ocr_path = root.join("ocr").join(format!("{doc_id}.json"));
            if ocr_path.exists() {
                words.insert(doc_id.clone(), read_ocr(&ocr_path)?);
            }
        }
        let question_id = match &e.question_id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let golds: Vec<String> = e
            .answers
            .iter()
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty())
            .collect();
        if golds.is_empty() {
            let msg = format!("question {question_id} has no answers; skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let gold_box = words
            .get(&doc_id)
            .and_then(|tokens| golds.iter().find_map(|g| derive_gold_box(g, tokens)));
        records.push(QaRecord {
            doc_id,
            question_id,
            question: e.question,
            gold_answers: golds,
            gold_box,
            source_field_key: None,
        });
    }
    Ok(Corpus::new(dataset_name(root, "docvqa"), Provenance::Docvqa, records, images, words)?.with_warnings(warnings))
}
