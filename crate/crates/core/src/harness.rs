//! Batch evaluation: runs a pipeline over every question of a corpus, appends
//! predictions as they finish, caches model responses, resumes interrupted
//! runs and writes reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, OnceLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{DetectedRegion, Prediction, QaRecord};
use crate::metrics::{score_run, EvalReport, Gating, ScoreConfig};
use crate::model::{CachingBackend, CountingBackend, ModelBackend};
use crate::pipeline::{answer_with_regions, Ablation, ConfigSnapshot, Mode, PipelineConfig};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: bool,
    /// Stop after this many new predictions, leaving the run unfinished.
    pub stop_after: Option<usize>,
    pub score: ScoreConfig,
    pub split: Option<String>,
}

impl EvalOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        EvalOptions {
            workers: 4,
            cache_dir: None,
            out_dir: out_dir.into(),
            resume: false,
            stop_after: None,
            score: ScoreConfig::default(),
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub corpus_name: String,
    pub corpus_hash: String,
    pub provenance: Provenance,
    pub split: Option<String>,
    pub config: ConfigSnapshot,
    pub prompt_set: String,
    pub workers: usize,
    pub started_at_unix_ms: u64,
    pub finished_at_unix_ms: Option<u64>,
    pub questions: usize,
    pub completed: usize,
    pub failures: usize,
    pub degraded: bool,
    pub model_requests: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// `None` when the run stopped early.
    pub report: Option<EvalReport>,
    pub manifest: RunManifest,
    /// Requests issued by the pipeline during this invocation, cache hits
    /// included.
    pub model_requests: usize,
    pub degraded: bool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Parses a predictions file, requiring every line to match the row schema.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Prediction>(l)
                .map_err(|e| Error::Validation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads what an interrupted run left behind, dropping a torn final line.
fn recover_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut preds = Vec::new();
    let mut good_len = 0;
    let mut start = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b != b'\n' {
            continue;
        }
        let line = &bytes[start..i];
        start = i + 1;
        match serde_json::from_slice::<Prediction>(line) {
            Ok(p) => {
                preds.push(p);
                good_len = start;
            }
            Err(e) => {
                log::warn!(
                    "{}: discarding unreadable line {}: {e}",
                    path.display(),
                    preds.len() + 1
                );
                break;
            }
        }
    }
    if good_len < bytes.len() {
        log::warn!("{}: truncating partial tail", path.display());
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(good_len as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(preds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The structured report exactly as written to `report.json`.
pub fn report_json(report: &EvalReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

fn is_failure(p: &Prediction) -> bool {
    p.error.is_some() && p.answer.is_empty()
}

fn question_failed(rec: &QaRecord, e: &Error) -> Prediction {
    log::warn!("{}: {e}", rec.question_id);
    Prediction {
        error: Some(e.to_string()),
        ..Prediction::empty(rec.question_id.clone())
    }
}

/// Evaluates every question of `corpus`; see [`EvalOptions`].
pub fn evaluate(corpus: &Corpus, cfg: &PipelineConfig, opts: &EvalOptions) -> Result<EvalOutcome> {
    cfg.validate()?;
    opts.score.anls.validate()?;
    if opts.workers == 0 {
        return Err(Error::Usage("workers must be positive".into()));
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;

    let counting = Arc::new(CountingBackend::new(cfg.model.clone()));
    let model: Arc<dyn ModelBackend> = match &opts.cache_dir {
        Some(dir) => Arc::new(CachingBackend::new(
            counting.clone(),
            dir,
            &cfg.prompts.prompts.version,
        )?),
        None => counting.clone(),
    };
    let cfg = cfg.clone().with_model(model);
    let snapshot = cfg.snapshot();
    let corpus_hash = corpus.content_hash();

    let pred_path = opts.out_dir.join(PREDICTIONS_FILE);
    let manifest_path = opts.out_dir.join(MANIFEST_FILE);
    let done: Vec<Prediction> = if opts.resume {
        if let Ok(text) = fs::read_to_string(&manifest_path) {
            if let Ok(prev) = serde_json::from_str::<RunManifest>(&text) {
                if prev.corpus_hash != corpus_hash || prev.config != snapshot {
                    return Err(Error::Validation(format!(
                        "{} was produced by a different corpus or configuration; refusing to resume",
                        opts.out_dir.display()
                    )));
                }
            }
        }
        recover_predictions(&pred_path)?
    } else {
        File::create(&pred_path).map_err(|e| Error::io(&pred_path, e))?;
        Vec::new()
    };
    let known: HashSet<&str> = corpus.records.iter().map(|r| r.question_id.as_str()).collect();
    if let Some(p) = done.iter().find(|p| !known.contains(p.question_id.as_str())) {
        return Err(Error::Validation(format!(
            "{} holds a prediction for unknown question {}",
            pred_path.display(),
            p.question_id
        )));
    }
    let done_ids: HashSet<&str> = done.iter().map(|p| p.question_id.as_str()).collect();
    let mut pending: Vec<&QaRecord> = corpus
        .records
        .iter()
        .filter(|r| !done_ids.contains(r.question_id.as_str()))
        .collect();
    if let Some(k) = opts.stop_after {
        pending.truncate(k);
    }

    let started = now_ms();
    let mut manifest = RunManifest {
        run_id: format!("{}-{started}", &corpus_hash[..12]),
        corpus_name: corpus.name.clone(),
        corpus_hash,
        provenance: corpus.provenance,
        split: opts.split.clone(),
        prompt_set: snapshot.prompt_set.clone(),
        config: snapshot,
        workers: opts.workers,
        started_at_unix_ms: started,
        finished_at_unix_ms: None,
        questions: corpus.records.len(),
        completed: done.len(),
        failures: done.iter().filter(|p| is_failure(p)).count(),
        degraded: false,
        model_requests: 0,
    };
    write_json(&manifest_path, &manifest)?;

    let new_preds = run_pending(corpus, &cfg, &pending, opts.workers, &pred_path)?;
    manifest.completed += new_preds.len();
    manifest.failures += new_preds.iter().filter(|p| is_failure(p)).count();
    manifest.model_requests = counting.calls();
    let finished = manifest.completed == corpus.records.len();
    manifest.degraded = finished && 2 * manifest.failures > manifest.questions;

    let report = if finished {
        let report = score_offline(&pred_path, corpus, &opts.score)?;
        fs::write(opts.out_dir.join(REPORT_JSON), report_json(&report))
            .map_err(|e| Error::io(opts.out_dir.join(REPORT_JSON), e))?;
        let table = render_table(&[(corpus.provenance, &report)], &manifest.run_id);
        fs::write(opts.out_dir.join(REPORT_TXT), table).map_err(|e| Error::io(opts.out_dir.join(REPORT_TXT), e))?;
        manifest.finished_at_unix_ms = Some(now_ms());
        Some(report)
    } else {
        None
    };
    write_json(&manifest_path, &manifest)?;
    if manifest.degraded {
        log::warn!(
            "run degraded: {} of {} questions failed",
            manifest.failures,
            manifest.questions
        );
    }
    Ok(EvalOutcome {
        report,
        model_requests: manifest.model_requests,
        degraded: manifest.degraded,
        manifest,
    })
}

type DetectionMemo = HashMap<String, OnceLock<std::result::Result<Arc<Vec<DetectedRegion>>, Error>>>;

/// Answers `pending` on a bounded pool; a single writer appends results in
/// corpus order so the file does not depend on scheduling.
fn run_pending(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    pending: &[&QaRecord],
    workers: usize,
    path: &Path,
) -> Result<Vec<Prediction>> {
    let memo: DetectionMemo = pending.iter().map(|r| (r.doc_id.clone(), OnceLock::new())).collect();
    let next = AtomicUsize::new(0);
    let mut file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut written = Vec::with_capacity(pending.len());

    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = mpsc::channel::<(usize, Prediction)>();
        for _ in 0..workers.min(pending.len().max(1)) {
            let tx = tx.clone();
            let (memo, next) = (&memo, &next);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(rec) = pending.get(i) else { break };
                let pred = answer_one(corpus, cfg, memo, rec);
                if tx.send((i, pred)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut buffered: BTreeMap<usize, Prediction> = BTreeMap::new();
        for (i, pred) in rx {
            buffered.insert(i, pred);
            while let Some(p) = buffered.remove(&written.len()) {
                let mut line = serde_json::to_string(&p).expect("prediction serializes");
                line.push('\n');
                file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
                file.flush().map_err(|e| Error::io(path, e))?;
                written.push(p);
            }
        }
        Ok(())
    })?;
    Ok(written)
}

fn answer_one(corpus: &Corpus, cfg: &PipelineConfig, memo: &DetectionMemo, rec: &QaRecord) -> Prediction {
    let image = match corpus.image(&rec.doc_id) {
        Ok(i) => i,
        Err(e) => return question_failed(rec, &e),
    };
    let regions = memo[&rec.doc_id].get_or_init(|| cfg.detect(&image).map(Arc::new));
    let regions = match regions {
        Ok(r) => r.clone(),
        Err(e) => return question_failed(rec, e),
    };
    match answer_with_regions(&image, &regions, &rec.question_id, &rec.question, cfg) {
        Ok(p) => p,
        Err(e) => question_failed(rec, &e),
    }
}

/// Scores a predictions file against the corpus gold.
pub fn score_offline(predictions: &Path, corpus: &Corpus, cfg: &ScoreConfig) -> Result<EvalReport> {
    let preds = read_predictions(predictions)?;
    score_run(&preds, &corpus.records, cfg)
}

const TABLE_COLUMNS: [Provenance; 5] = [
    Provenance::Docvqa,
    Provenance::Funsd,
    Provenance::Cord,
    Provenance::Sroie,
    Provenance::Synthetic,
];

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "-".into())
}

/// Plain-text table with one column per dataset in the usual order.
pub fn render_table(reports: &[(Provenance, &EvalReport)], title: &str) -> String {
    let cell = |p: Provenance, f: &dyn Fn(&EvalReport) -> Option<f64>| {
        reports
            .iter()
            .find(|(rp, _)| *rp == p)
            .map(|(_, r)| pct(f(r)))
            .unwrap_or_else(|| "-".into())
    };
    let gating = reports.first().map(|(_, r)| r.gating).unwrap_or_default();
    let alt_label = match gating {
        Gating::Ungated => "mAP text-gated",
        Gating::TextGated => "mAP ungated",
    };
    let rows: [(&str, Box<dyn Fn(&EvalReport) -> Option<f64>>); 3] = [
        ("ANLS", Box::new(|r| Some(r.aggregate_anls))),
        ("mAP@IoU[0.50:0.95]", Box::new(|r| r.map_iou)),
        (alt_label, Box::new(|r| r.map_iou_alternate)),
    ];
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<20}", "metric");
    for p in TABLE_COLUMNS {
        let _ = write!(out, "{:>10}", p.to_string());
    }
    out.push('\n');
    for (label, f) in &rows {
        let _ = write!(out, "{label:<20}");
        for p in TABLE_COLUMNS {
            let _ = write!(out, "{:>10}", cell(p, f.as_ref()));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<20}", "questions");
    for p in TABLE_COLUMNS {
        let n = reports
            .iter()
            .find(|(rp, _)| *rp == p)
            .map(|(_, r)| r.counts.total.to_string());
        let _ = write!(out, "{:>10}", n.unwrap_or_else(|| "-".into()));
    }
    out.push('\n');
    out
}

pub const ABLATION_VARIANTS: [Ablation; 3] = [Ablation::None, Ablation::Ablation1, Ablation::Ablation2];
pub const ABLATION_TABLE: &str = "ablation.txt";

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub variants: BTreeMap<String, EvalOutcome>,
    pub table: String,
}

fn variant_name(a: Ablation) -> &'static str {
    match a {
        Ablation::None => "default",
        Ablation::Ablation1 => "ablation1",
        Ablation::Ablation2 => "ablation2",
    }
}

/// Runs the OCR-free default and both ablations into `<out_dir>/<variant>/`
/// and writes a side-by-side table.
pub fn ablation_suite(corpus: &Corpus, base: &PipelineConfig, opts: &EvalOptions) -> Result<AblationOutcome> {
    if base.mode != Mode::OcrFree {
        return Err(Error::Usage("ablations apply to the ocr-free mode".into()));
    }
    let mut variants = BTreeMap::new();
    for a in ABLATION_VARIANTS {
        let cfg = base.clone().with_ablation(a);
        let vopts = EvalOptions {
            out_dir: opts.out_dir.join(variant_name(a)),
            stop_after: None,
            ..opts.clone()
        };
        variants.insert(variant_name(a).to_string(), evaluate(corpus, &cfg, &vopts)?);
    }
    let table = render_ablation_table(&variants);
    let path = opts.out_dir.join(ABLATION_TABLE);
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(AblationOutcome { variants, table })
}

fn render_ablation_table(variants: &BTreeMap<String, EvalOutcome>) -> String {
    let order = ABLATION_VARIANTS.map(variant_name);
    let mut out = String::new();
    let _ = write!(out, "{:<20}", "metric");
    for v in order {
        let _ = write!(out, "{v:>12}");
    }
    out.push('\n');
    let rows: [(&str, fn(&EvalOutcome) -> String); 3] = [
        ("ANLS", |o| pct(o.report.as_ref().map(|r| r.aggregate_anls))),
        ("mAP@IoU[0.50:0.95]", |o| pct(o.report.as_ref().and_then(|r| r.map_iou))),
        ("model calls", |o| o.model_requests.to_string()),
    ];
    for (label, f) in rows {
        let _ = write!(out, "{label:<20}");
        for v in order {
            let _ = write!(out, "{:>12}", variants.get(v).map(f).unwrap_or_else(|| "-".into()));
        }
        out.push('\n');
    }
    out
}
