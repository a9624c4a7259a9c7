//! Model replies derived from ground truth, for tests, benchmarks and the
//! synthetic demo. The echo variant answers OCR-dependent requests with the
//! recognized text it was shown, so recognition errors reach the answer.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde_json::json;

use crate::dataset::Corpus;
use crate::detection::DetectorBackend;
use crate::error::{Error, Result};
use crate::geometry::{BBox, DetectedRegion};
use crate::model::{CallRecord, ModelBackend, ModelRequest, ModelResponse, ScriptEntry};
use crate::pipeline::request_tag;

/// Regions lying at least half inside `gold`.
pub fn answer_region_ids(gold: &BBox, regions: &[DetectedRegion]) -> Vec<u32> {
    regions
        .iter()
        .filter(|r| {
            r.bbox.area() > 0
                && gold
                    .intersection(&r.bbox)
                    .is_some_and(|i| 2 * i.area() >= r.bbox.area())
        })
        .map(|r| r.region_id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleAnswer {
    pub answer: String,
    pub gold_box: Option<BBox>,
    pub region_ids: Vec<u32>,
}

impl OracleAnswer {
    fn reply(&self, step: &str, answer: &str) -> String {
        let mut v = json!({ "answer": answer, "region_ids": self.region_ids });
        match step {
            "extract" => v = json!({ "answer": answer }),
            "ground" => v = json!({ "region_ids": self.region_ids }),
            "ocr-dep" => {
                if let Some(b) = self.gold_box {
                    v["box"] = json!(b);
                }
            }
            _ => {}
        }
        v.to_string()
    }
}

/// Ground-truth answers keyed by `doc_id/question_id`, with region ids taken
/// from what `detector` finds on each document.
pub fn oracle_answers(corpus: &Corpus, detector: &dyn DetectorBackend) -> Result<BTreeMap<String, OracleAnswer>> {
    let mut out = BTreeMap::new();
    for doc_id in corpus.doc_ids() {
        let image = corpus.image(doc_id)?;
        let regions = crate::detection::detect(detector, &image)?;
        for rec in corpus.records.iter().filter(|r| r.doc_id == doc_id) {
            let region_ids = rec
                .gold_box
                .map(|g| answer_region_ids(&g, &regions))
                .unwrap_or_default();
            out.insert(
                format!("{}/{}", rec.doc_id, rec.question_id),
                OracleAnswer {
                    answer: rec.gold_answers[0].clone(),
                    gold_box: rec.gold_box,
                    region_ids,
                },
            );
        }
    }
    Ok(out)
}

/// The same replies as a mock script, one entry per request tag.
pub fn oracle_script(corpus: &Corpus, detector: &dyn DetectorBackend) -> Result<Vec<ScriptEntry>> {
    let answers = oracle_answers(corpus, detector)?;
    let mut script = Vec::with_capacity(answers.len() * 4);
    for rec in &corpus.records {
        let a = &answers[&format!("{}/{}", rec.doc_id, rec.question_id)];
        for step in ["ocr-dep", "extract", "ground", "combined"] {
            script.push(ScriptEntry {
                pattern: request_tag(&rec.doc_id, &rec.question_id, step),
                reply: a.reply(step, &a.answer),
            });
        }
    }
    Ok(script)
}

pub struct OracleBackend {
    answers: BTreeMap<String, OracleAnswer>,
    echo: bool,
    log: Mutex<Vec<CallRecord>>,
}

impl OracleBackend {
    pub fn new(corpus: &Corpus, detector: &dyn DetectorBackend) -> Result<Self> {
        Ok(OracleBackend {
            answers: oracle_answers(corpus, detector)?,
            echo: false,
            log: Mutex::new(Vec::new()),
        })
    }

    /// OCR-dependent replies repeat the prompt's text for the answer regions.
    pub fn echoing(mut self) -> Self {
        self.echo = true;
        self
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("oracle log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("oracle log poisoned").len()
    }
}

/// Text after `B<id> [..]: ` on the prompt line for each id.
fn echoed_text(prompt: &str, ids: &[u32]) -> String {
    let mut words = Vec::with_capacity(ids.len());
    for id in ids {
        let prefix = format!("B{id} [");
        let text = prompt
            .lines()
            .find(|l| l.starts_with(&prefix))
            .and_then(|l| l.split_once("]: ").map(|(_, t)| t))
            .unwrap_or("");
        if !text.is_empty() {
            words.push(text);
        }
    }
    words.join(" ")
}

impl ModelBackend for OracleBackend {
    fn backend_id(&self) -> String {
        if self.echo { "oracle:echo" } else { "oracle" }.to_string()
    }

    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        let record = CallRecord::of(req);
        let tag = req.request_tag.split(';').next().unwrap_or("");
        let (key, step) = tag.rsplit_once('/').unwrap_or((tag, ""));
        let reply = self.answers.get(key).map(|a| {
            if self.echo && step == "ocr-dep" {
                a.reply(step, &echoed_text(&record.text, &a.region_ids))
            } else {
                a.reply(step, &a.answer)
            }
        });
        self.log.lock().expect("oracle log poisoned").push(record);
        match reply {
            Some(raw_text) => Ok(ModelResponse {
                raw_text,
                latency_ms: 0,
                token_usage: None,
                backend_id: self.backend_id(),
            }),
            None => Err(Error::Protocol {
                message: format!("no ground truth for request {tag:?}"),
                excerpt: String::new(),
            }),
        }
    }
}
