use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::funsd::dataset_name;
use super::{derive_gold_box, file_stem, find_image, kv_to_question, sorted_files, Corpus, LazyImage, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{quad_to_bbox, QaRecord, Quad, WordBox};

/// Standard SROIE keys, in record order. Extra keys follow alphabetically.
pub const SROIE_KEYS: [&str; 4] = ["company", "date", "address", "total"];

#[derive(Debug, Clone, Copy, Default)]
pub struct SroieOptions {
    /// Derive gold boxes by matching values against the transcript lines.
    /// Off by default: SROIE ships no answer boxes.
    pub localize: bool,
}

pub fn load_sroie(root: &Path) -> Result<Corpus> {
    load_sroie_with(root, SroieOptions::default())
}

fn parse_box_file(path: &Path) -> Result<Vec<WordBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_start_matches('\u{feff}');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(9, ',');
        let nums: Vec<f64> = parts
            .by_ref()
            .take(8)
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let transcript = parts.next().unwrap_or("").trim().to_string();
        let bbox = quad_to_bbox(&Quad::from_flat(&nums)?)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(WordBox { text: transcript, bbox });
    }
    Ok(out)
}

/// Loads `<root>/entities/<id>.txt` key-value files with transcripts in
/// `<root>/box/<id>.txt` and images in `<root>/img/`.
pub fn load_sroie_with(root: &Path, opts: SroieOptions) -> Result<Corpus> {
    let ent_dir = root.join("entities");
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    let mut words = BTreeMap::new();
    for path in sorted_files(&ent_dir, "txt")? {
        let doc_id = file_stem(&path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv: BTreeMap<String, serde_json::Value> = serde_json::from_str(text.trim_start_matches('\u{feff}'))
            .map_err(|e| Error::Validation(format!("malformed annotation {}: {e}", path.display())))?;
        let img = find_image(&root.join("img"), &doc_id)
            .ok_or_else(|| Error::Validation(format!("no image for annotation {}", path.display())))?;
        images.insert(doc_id.clone(), Arc::new(LazyImage::from_file(doc_id.clone(), img)));
        let box_path = root.join("box").join(format!("{doc_id}.txt"));
        let lines = if box_path.exists() {
            let l = parse_box_file(&box_path)?;
            words.insert(doc_id.clone(), l.clone());
            l
        } else {
            Vec::new()
        };

        let mut keys: Vec<&String> = kv.keys().collect();
        keys.sort_by_key(|k| {
            (
                SROIE_KEYS.iter().position(|s| s == k).unwrap_or(usize::MAX),
                k.to_string(),
            )
        });
        for key in keys {
            let value = match &kv[key] {
                serde_json::Value::String(s) => s.trim().to_string(),
                serde_json::Value::Number(n) => n.to_string(),
                _ => continue,
            };
            if value.is_empty() {
                continue;
            }
            let gold_box = if opts.localize {
                derive_gold_box(&value, &lines)
            } else {
                None
            };
            records.push(QaRecord {
                doc_id: doc_id.clone(),
                question_id: format!("{doc_id}-{key}"),
                question: kv_to_question(key)?,
                gold_answers: vec![value],
                gold_box,
                source_field_key: Some(key.clone()),
            });
        }
    }
    Corpus::new(dataset_name(root, "sroie"), Provenance::Sroie, records, images, words)
}
