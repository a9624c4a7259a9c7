//! Corpus ingestion. Every dataset-native format is converted once into
//! [`QaRecord`]s; the unified on-disk format is a `manifest.jsonl` plus an
//! `images/` directory of `<doc_id>.png` files.

mod cord;
mod docvqa;
mod funsd;
mod sroie;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{envelope, BBox, DocumentImage, QaRecord, WordBox};
use crate::metrics::{normalize_answer, normalized_similarity, AnlsConfig};

pub use cord::load_cord;
pub use docvqa::load_docvqa;
pub use funsd::load_funsd;
pub use sroie::{load_sroie, load_sroie_with, SroieOptions};
pub use synthetic::{generate_synthetic, Span, SynthConfig, SynthNoise};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Docvqa,
    Funsd,
    Cord,
    Sroie,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Docvqa => "DocVQA",
            Provenance::Funsd => "FUNSD",
            Provenance::Cord => "CORD",
            Provenance::Sroie => "SROIE",
            Provenance::Synthetic => "Synthetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Funsd,
    Cord,
    Sroie,
    Docvqa,
    Unified,
    /// A unified-format directory written by the synthetic generator.
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "funsd" => DatasetFormat::Funsd,
            "cord" => DatasetFormat::Cord,
            "sroie" => DatasetFormat::Sroie,
            "docvqa" => DatasetFormat::Docvqa,
            "unified" => DatasetFormat::Unified,
            "synthetic" => DatasetFormat::Synthetic,
            other => return Err(Error::Usage(format!("unknown dataset format {other:?}"))),
        })
    }
}

enum ImageSource {
    Memory(DocumentImage),
    File(PathBuf),
}

/// Document image that is decoded on first access. Concurrent first accesses
/// decode once.
pub struct LazyImage {
    doc_id: String,
    source: ImageSource,
    cell: OnceLock<std::result::Result<DocumentImage, String>>,
}

impl LazyImage {
    pub fn from_file(doc_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        LazyImage {
            doc_id: doc_id.into(),
            source: ImageSource::File(path.into()),
            cell: OnceLock::new(),
        }
    }

    pub fn in_memory(image: DocumentImage) -> Self {
        LazyImage {
            doc_id: image.doc_id.clone(),
            source: ImageSource::Memory(image),
            cell: OnceLock::new(),
        }
    }

    pub fn get(&self) -> Result<DocumentImage> {
        let loaded = self.cell.get_or_init(|| match &self.source {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File(path) => read_image(&self.doc_id, path).map_err(|e| e.to_string()),
        });
        loaded.clone().map_err(Error::Validation)
    }

    /// Image dimensions without decoding the full raster when possible.
    pub fn dimensions(&self) -> Result<(u32, u32)> {
        match &self.source {
            ImageSource::Memory(img) => Ok((img.width(), img.height())),
            ImageSource::File(path) => {
                image::image_dimensions(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
            }
        }
    }
}

impl fmt::Debug for LazyImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = match &self.source {
            ImageSource::Memory(_) => "memory".to_string(),
            ImageSource::File(p) => p.display().to_string(),
        };
        f.debug_struct("LazyImage")
            .field("doc_id", &self.doc_id)
            .field("source", &src)
            .finish()
    }
}

pub fn read_image(doc_id: &str, path: &Path) -> Result<DocumentImage> {
    let img = image::open(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    DocumentImage::new(doc_id, img.to_rgb8())
}

#[derive(Debug)]
pub struct Corpus {
    pub name: String,
    pub provenance: Provenance,
    pub records: Vec<QaRecord>,
    images: BTreeMap<String, Arc<LazyImage>>,
    /// Exact word boxes per document, when the source provides them.
    pub words: BTreeMap<String, Vec<WordBox>>,
    /// Non-fatal problems met while loading.
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        provenance: Provenance,
        records: Vec<QaRecord>,
        images: BTreeMap<String, Arc<LazyImage>>,
        words: BTreeMap<String, Vec<WordBox>>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.question_id.as_str()) {
                return Err(Error::Validation(format!("duplicate question_id {}", r.question_id)));
            }
            let img = images.get(&r.doc_id).ok_or_else(|| {
                Error::Validation(format!(
                    "question {}: no image for document {}",
                    r.question_id, r.doc_id
                ))
            })?;
            let (w, h) = img.dimensions()?;
            r.validate(w, h)?;
        }
        Ok(Corpus {
            name: name.into(),
            provenance,
            records,
            images,
            words,
            warnings: Vec::new(),
        })
    }

    pub fn image(&self, doc_id: &str) -> Result<DocumentImage> {
        self.images
            .get(doc_id)
            .ok_or_else(|| Error::Validation(format!("no image for document {doc_id}")))?
            .get()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn record(&self, question_id: &str) -> Option<&QaRecord> {
        self.records.iter().find(|r| r.question_id == question_id)
    }

    /// Hex SHA-256 over the manifest lines and word tables.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("record serializes"));
            h.update(b"\n");
        }
        for (doc, words) in &self.words {
            h.update(doc.as_bytes());
            h.update(serde_json::to_vec(words).expect("words serialize"));
        }
        hex::encode(h.finalize())
    }

    fn with_warnings(mut self, warnings: Vec<String>) -> Self {
        self.warnings = warnings;
        self
    }
}

/// Question text for a key-value field.
pub fn kv_to_question(field_key: &str) -> Result<String> {
    let key = field_key.split_whitespace().collect::<Vec<_>>().join(" ");
    if key.is_empty() {
        return Err(Error::Usage("empty field key".into()));
    }
    Ok(format!("What is the content in the {} field?", key.to_uppercase()))
}

/// Similarity an OCR token run must reach to serve as an answer's gold box.
pub const GOLD_BOX_FLOOR: f64 = 0.8;

/// Box of the contiguous token run whose space-joined text best matches the
/// answer, if that match reaches [`GOLD_BOX_FLOOR`]. Ties go to the earliest
/// start, then the shorter run.
pub fn derive_gold_box(answer: &str, tokens: &[WordBox]) -> Option<BBox> {
    let cfg = AnlsConfig::default();
    let target = normalize_answer(answer, &cfg);
    let target_len = target.chars().count();
    if target_len == 0 {
        return None;
    }
    // similarity <= target_len / run_len, so longer runs cannot reach the floor
    let max_len = target_len as f64 / GOLD_BOX_FLOOR;
    let normalized: Vec<String> = tokens.iter().map(|t| normalize_answer(&t.text, &cfg)).collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for start in 0..tokens.len() {
        let mut run = String::new();
        for end in start..tokens.len() {
            if normalized[end].is_empty() {
                continue;
            }
            if !run.is_empty() {
                run.push(' ');
            }
            run.push_str(&normalized[end]);
            if run.chars().count() as f64 > max_len {
                break;
            }
            let sim = normalized_similarity(&run, &target);
            if best.is_none_or(|(s, _, _)| sim > s) {
                best = Some((sim, start, end));
            }
        }
    }
    let (sim, start, end) = best?;
    if sim < GOLD_BOX_FLOOR {
        return None;
    }
    let boxes: Vec<BBox> = tokens[start..=end].iter().map(|t| t.bbox).collect();
    envelope(&boxes).ok()
}

pub fn load(format: DatasetFormat, root: &Path, split: Option<&str>) -> Result<Corpus> {
    let root = match split {
        Some(s) if root.join(s).is_dir() => root.join(s),
        _ => root.to_path_buf(),
    };
    match format {
        DatasetFormat::Funsd => load_funsd(&root),
        DatasetFormat::Cord => load_cord(&root),
        DatasetFormat::Sroie => load_sroie(&root),
        DatasetFormat::Docvqa => load_docvqa(&root),
        DatasetFormat::Unified | DatasetFormat::Synthetic => load_unified(&root),
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    name: String,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct WordsLine {
    doc_id: String,
    words: Vec<WordBox>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const WORDS_FILE: &str = "words.jsonl";
pub const META_FILE: &str = "corpus.json";
pub const IMAGES_DIR: &str = "images";

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, &row).expect("row serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes the corpus in the unified on-disk format.
pub fn save_unified(corpus: &Corpus, dir: &Path) -> Result<()> {
    let images_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let meta = CorpusMeta {
        name: corpus.name.clone(),
        provenance: corpus.provenance,
    };
    let meta_path = dir.join(META_FILE);
    let mut f = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::to_writer_pretty(&mut f, &meta).expect("meta serializes");
    f.write_all(b"\n").map_err(|e| Error::io(&meta_path, e))?;

    write_lines(&dir.join(MANIFEST_FILE), &corpus.records)?;
    if !corpus.words.is_empty() {
        write_lines(
            &dir.join(WORDS_FILE),
            corpus.words.iter().map(|(doc_id, words)| WordsLine {
                doc_id: doc_id.clone(),
                words: words.clone(),
            }),
        )?;
    }
    for doc_id in corpus.doc_ids() {
        let png = corpus.image(doc_id)?.to_png()?;
        let p = images_dir.join(format!("{doc_id}.png"));
        fs::write(&p, png).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_unified(dir: &Path) -> Result<Corpus> {
    let manifest = dir.join(MANIFEST_FILE);
    let records: Vec<QaRecord> = read_jsonl(&manifest)?;
    let (name, provenance) = match fs::read_to_string(dir.join(META_FILE)) {
        Ok(text) => {
            let m: CorpusMeta = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("{}: {e}", dir.join(META_FILE).display())))?;
            (m.name, m.provenance)
        }
        Err(_) => (
            dir.file_name()
                .map_or_else(|| "corpus".into(), |n| n.to_string_lossy().into_owned()),
            Provenance::Synthetic,
        ),
    };
    let words: BTreeMap<String, Vec<WordBox>> = if dir.join(WORDS_FILE).exists() {
        read_jsonl::<WordsLine>(&dir.join(WORDS_FILE))?
            .into_iter()
            .map(|l| (l.doc_id, l.words))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut images = BTreeMap::new();
    let doc_ids = records.iter().map(|r| &r.doc_id).chain(words.keys());
    for doc_id in doc_ids {
        if images.contains_key(doc_id) {
            continue;
        }
        let p = dir.join(IMAGES_DIR).join(format!("{doc_id}.png"));
        if !p.exists() {
            return Err(Error::Validation(format!("missing image {}", p.display())));
        }
        images.insert(doc_id.clone(), Arc::new(LazyImage::from_file(doc_id.clone(), p)));
    }
    Corpus::new(name, provenance, records, images, words)
}

/// Finds `<dir>/<stem>.<ext>` for the first extension present.
pub(crate) fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "PNG", "JPG"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
}

pub(crate) fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

pub(crate) fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
