//! Text recognition backends. The word-table recognizer answers from known
//! word boxes (synthetic ground truth or replayed OCR output) and can corrupt
//! its output with seeded character noise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::geometry::{BBox, DetectedRegion, Raster, RecognizedRegion, WordBox};
use crate::metrics::iou;

/// Identifies the crop being recognized.
#[derive(Debug, Clone, Copy)]
pub struct CropContext<'a> {
    pub doc_id: &'a str,
    pub region_id: u32,
    pub bbox: BBox,
}

pub trait RecognizerBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn recognize(&self, ctx: &CropContext<'_>, crop: &Raster) -> Result<String>;
}

/// Recognizes each region in order; errors carry the failing region id.
pub fn recognize_all(
    backend: &dyn RecognizerBackend,
    doc_id: &str,
    regions: &[DetectedRegion],
) -> Result<Vec<RecognizedRegion>> {
    regions
        .iter()
        .map(|r| {
            let ctx = CropContext {
                doc_id,
                region_id: r.region_id,
                bbox: r.bbox,
            };
            let text = backend.recognize(&ctx, &r.crop).map_err(|e| match e {
                Error::Recognition { cause, .. } => Error::Recognition {
                    region_id: Some(r.region_id),
                    cause,
                },
                other => Error::Recognition {
                    region_id: Some(r.region_id),
                    cause: other.to_string(),
                },
            })?;
            Ok(RecognizedRegion {
                region: r.clone(),
                text,
            })
        })
        .collect()
}

/// Characters used for substitutions.
pub const NOISE_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub substitution_rate: f64,
    pub deletion_rate: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        substitution_rate: 0.0,
        deletion_rate: 0.0,
        seed: 0,
    };

    pub fn new(substitution_rate: f64, deletion_rate: f64, seed: u64) -> Result<Self> {
        let m = NoiseModel {
            substitution_rate,
            deletion_rate,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.substitution_rate)
            || !unit.contains(&self.deletion_rate)
            || self.substitution_rate + self.deletion_rate > 1.0
        {
            return Err(Error::Validation(format!(
                "noise rates ({}, {}) must lie in [0,1] and sum to at most 1",
                self.substitution_rate, self.deletion_rate
            )));
        }
        Ok(())
    }

    pub fn is_silent(&self) -> bool {
        self.substitution_rate == 0.0 && self.deletion_rate == 0.0
    }

    /// Independent stream per (seed, document, region).
    pub fn stream(&self, doc_id: &str, region_id: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(doc_id.as_bytes());
        h.update([0]);
        h.update(region_id.to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// One uniform draw per character: below `p_s` substitutes, below
    /// `p_s + p_d` deletes. A replacement draw is always consumed so that
    /// streams stay aligned across rates; with a fixed seed the corrupted
    /// positions at a lower rate are a subset of those at a higher one.
    pub fn apply(&self, text: &str, rng: &mut impl Rng) -> String {
        let mut out = String::with_capacity(text.len());
        for c in text.chars() {
            let u: f64 = rng.random();
            let pick = rng.random_range(0..NOISE_ALPHABET.len() - 1);
            if u < self.substitution_rate {
                let upper = c.to_ascii_uppercase();
                let candidates: Vec<u8> = NOISE_ALPHABET.iter().copied().filter(|&a| a as char != upper).collect();
                out.push(candidates[pick % candidates.len()] as char);
            } else if u < self.substitution_rate + self.deletion_rate {
                continue;
            } else {
                out.push(c);
            }
        }
        out
    }
}

/// Recognizer that looks up the word whose box best overlaps the crop's box
/// (IoU >= 0.5). Blank crops read as the empty string.
#[derive(Debug, Clone)]
pub struct WordTableRecognizer {
    id: String,
    words: HashMap<String, Vec<WordBox>>,
    noise: NoiseModel,
}

/// Minimum IoU between a crop box and a table word to accept the word.
pub const WORD_MATCH_IOU: f64 = 0.5;

impl WordTableRecognizer {
    pub fn new(id: impl Into<String>, words: HashMap<String, Vec<WordBox>>, noise: NoiseModel) -> Result<Self> {
        noise.validate()?;
        let mut id = id.into();
        if !noise.is_silent() {
            id = format!(
                "{id}+noise(s={},d={},seed={})",
                noise.substitution_rate, noise.deletion_rate, noise.seed
            );
        }
        Ok(WordTableRecognizer { id, words, noise })
    }

    /// Reads `{"doc_id", "words": [{"text", "box"}]}` lines, e.g. replayed
    /// recognizer output.
    pub fn load(path: &Path, noise: NoiseModel) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            doc_id: String,
            words: Vec<WordBox>,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut words = HashMap::new();
        for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Line =
                serde_json::from_str(l).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
            words.insert(row.doc_id, row.words);
        }
        Self::new(format!("word-table:{}", path.display()), words, noise)
    }
}

/// Recognizer answering from a corpus's ground-truth words.
pub fn fixture_recognizer(corpus: &Corpus, noise: NoiseModel) -> Result<WordTableRecognizer> {
    if corpus.words.is_empty() {
        return Err(Error::Usage(format!(
            "corpus {} carries no word ground truth for a fixture recognizer",
            corpus.name
        )));
    }
    let words = corpus.words.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    WordTableRecognizer::new("fixture", words, noise)
}

fn is_blank(crop: &Raster) -> bool {
    crop.pixels().all(|p| p.0.iter().all(|&v| v >= 128))
}

impl RecognizerBackend for WordTableRecognizer {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn recognize(&self, ctx: &CropContext<'_>, crop: &Raster) -> Result<String> {
        if crop.width() == 0 || crop.height() == 0 {
            return Err(Error::Recognition {
                region_id: Some(ctx.region_id),
                cause: "empty crop".into(),
            });
        }
        if is_blank(crop) {
            return Ok(String::new());
        }
        let best = self
            .words
            .get(ctx.doc_id)
            .into_iter()
            .flatten()
            .map(|w| (iou(&w.bbox, &ctx.bbox), w))
            .filter(|(v, _)| *v >= WORD_MATCH_IOU)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        let Some((_, word)) = best else {
            return Err(Error::Recognition {
                region_id: Some(ctx.region_id),
                cause: format!("no ground-truth word matches box {} in {}", ctx.bbox, ctx.doc_id),
            });
        };
        if self.noise.is_silent() {
            return Ok(word.text.clone());
        }
        let mut rng = self.noise.stream(ctx.doc_id, ctx.region_id);
        Ok(self.noise.apply(&word.text, &mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn b(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn inked(w: u32, h: u32) -> Raster {
        Raster::from_pixel(w, h, Rgb([0, 0, 0]))
    }

    fn table(noise: NoiseModel) -> WordTableRecognizer {
        let words = HashMap::from([(
            "d".to_string(),
            vec![
                WordBox {
                    text: "THE".into(),
                    bbox: b(0, 0, 30, 10),
                },
                WordBox {
                    text: "TEXAS".into(),
                    bbox: b(40, 0, 90, 10),
                },
                WordBox {
                    text: "STATE".into(),
                    bbox: b(0, 20, 50, 30),
                },
            ],
        )]);
        WordTableRecognizer::new("t", words, noise).unwrap()
    }

    fn ctx(region_id: u32, bbox: BBox) -> CropContext<'static> {
        CropContext {
            doc_id: "d",
            region_id,
            bbox,
        }
    }

    #[test]
    fn exact_lookup_without_noise() {
        let r = table(NoiseModel::NONE);
        assert_eq!(r.recognize(&ctx(1, b(41, 0, 90, 11)), &inked(49, 11)).unwrap(), "TEXAS");
    }

    #[test]
    fn full_substitution_changes_every_character() {
        let r = table(NoiseModel::new(1.0, 0.0, 1).unwrap());
        let out = r.recognize(&ctx(1, b(40, 0, 90, 10)), &inked(50, 10)).unwrap();
        assert_eq!(out.chars().count(), 5);
        let hamming = out.chars().zip("TEXAS".chars()).filter(|(a, b)| a != b).count();
        assert_eq!(hamming, 5);
    }

    #[test]
    fn blank_crop_reads_empty_and_unknown_box_errors() {
        let r = table(NoiseModel::NONE);
        let white = Raster::from_pixel(10, 10, Rgb([255, 255, 255]));
        assert_eq!(r.recognize(&ctx(0, b(200, 200, 210, 210)), &white).unwrap(), "");
        assert!(matches!(
            r.recognize(&ctx(7, b(200, 200, 210, 210)), &inked(10, 10)),
            Err(Error::Recognition { region_id: Some(7), .. })
        ));
    }

    #[test]
    fn recognize_all_keeps_order_and_labels_failures() {
        let r = table(NoiseModel::NONE);
        let region = |id: u32, bbox: BBox| DetectedRegion {
            region_id: id,
            bbox,
            crop: inked(bbox.width(), bbox.height()),
        };
        let regs = vec![
            region(0, b(0, 0, 30, 10)),
            region(1, b(40, 0, 90, 10)),
            region(2, b(0, 20, 50, 30)),
        ];
        let out = recognize_all(&r, "d", &regs).unwrap();
        let texts: Vec<&str> = out.iter().map(|o| o.text.as_str()).collect();
        assert_eq!(texts, ["THE", "TEXAS", "STATE"]);
        assert!(out.iter().zip(&regs).all(|(o, i)| o.region.region_id == i.region_id));
        assert!(recognize_all(&r, "d", &[]).unwrap().is_empty());

        let bad = vec![regs[0].clone(), region(1, b(300, 300, 310, 310)), regs[2].clone()];
        let err = recognize_all(&r, "d", &bad).unwrap_err();
        assert!(matches!(err, Error::Recognition { region_id: Some(1), .. }), "{err}");
    }

    #[test]
    fn seeded_noise_is_repeatable() {
        let r = table(NoiseModel::new(0.5, 0.0, 42).unwrap());
        let c = ctx(2, b(0, 20, 50, 30));
        let first = r.recognize(&c, &inked(50, 10)).unwrap();
        assert_eq!(first, r.recognize(&c, &inked(50, 10)).unwrap());
    }

    #[test]
    fn corruption_fraction_concentrates() {
        let m = NoiseModel::new(0.3, 0.0, 9).unwrap();
        let text: String = std::iter::repeat_n('A', 10_000).collect();
        let mut rng = m.stream("doc", 0);
        let out = m.apply(&text, &mut rng);
        let corrupted = out.chars().filter(|&c| c != 'A').count() as f64 / 10_000.0;
        assert!((0.27..=0.33).contains(&corrupted), "{corrupted}");
    }

    #[test]
    fn corrupted_positions_nest_across_rates() {
        let text = "SCIENCE AND TECHNOLOGY 11,000";
        let outs: Vec<String> = [0.0, 0.2, 0.4]
            .iter()
            .map(|&p| {
                let m = NoiseModel::new(p, 0.0, 3).unwrap();
                m.apply(text, &mut m.stream("d", 4))
            })
            .collect();
        let diff = |s: &str| -> Vec<usize> {
            s.chars()
                .zip(text.chars())
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| i)
                .collect()
        };
        let (d0, d1, d2) = (diff(&outs[0]), diff(&outs[1]), diff(&outs[2]));
        assert!(d0.is_empty());
        assert!(d1.iter().all(|i| d2.contains(i)));
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(NoiseModel::new(0.7, 0.4, 0).is_err());
        assert!(NoiseModel::new(-0.1, 0.0, 0).is_err());
    }
}
