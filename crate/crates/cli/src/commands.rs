use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use docloc_core::dataset::{self, generate_synthetic, save_unified, SynthConfig, SynthNoise};
use docloc_core::detection::reference_detect;
use docloc_core::harness::{read_predictions, render_table, report_json, REPORT_JSON};
use docloc_core::model::{HttpBackend, HttpConfig, MockBackend};
use docloc_core::oracle::{oracle_script, OracleBackend};
use docloc_core::recognition::fixture_recognizer;
use docloc_core::{
    ablation_suite, annotate, evaluate, run, score_run, Ablation, AnnotationStyle, Corpus, DatasetFormat,
    DetectorBackend, DocumentImage, Error, EvalOptions, Gating, Mode, ModelBackend, NoiseModel, PipelineConfig,
    PrecomputedDetector, PromptSet, RecognizerBackend, ReferenceDetector, ReferenceParams, ScoreConfig,
    WordTableRecognizer,
};
use serde_json::json;

use crate::config::CliConfig;
use crate::{AskArgs, ScoreArgs, SynthArgs};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const MOCK_SCRIPT_FILE: &str = "mock_script.json";

/// 2 for configuration or validation problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
    if validation {
        2
    } else {
        1
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("{flag} is required")))
}

fn mode_and_ablation(cfg: &CliConfig) -> anyhow::Result<(Mode, Ablation)> {
    let mode: Mode = required(&cfg.mode, "--mode")?.parse()?;
    let ablation: Ablation = required(&cfg.ablation, "--ablation")?.parse()?;
    if mode == Mode::OcrDependent && ablation != Ablation::None {
        return Err(usage("ablations apply to the ocr-free mode only"));
    }
    Ok((mode, ablation))
}

fn gating(cfg: &CliConfig) -> anyhow::Result<Gating> {
    match cfg.gating.as_deref().unwrap_or("ungated").replace('_', "-").as_str() {
        "ungated" => Ok(Gating::Ungated),
        "text-gated" | "gated" => Ok(Gating::TextGated),
        other => Err(usage(format!("unknown gating {other:?}"))),
    }
}

fn load_corpus(cfg: &CliConfig) -> anyhow::Result<Corpus> {
    let root = required(&cfg.dataset_root, "--dataset-root")?;
    if !root.is_dir() {
        return Err(usage(format!("dataset root {} is not a directory", root.display())));
    }
    let format: DatasetFormat = required(&cfg.format, "--format")?.parse()?;
    let corpus = dataset::load(format, root, cfg.split.as_deref())?;
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    Ok(corpus)
}

fn detector(cfg: &CliConfig, corpus: Option<&Corpus>) -> anyhow::Result<Arc<dyn DetectorBackend>> {
    Ok(match required(&cfg.detector, "--detector")?.as_str() {
        "reference" => Arc::new(ReferenceDetector::default()),
        "ground-truth" => {
            let corpus = corpus.ok_or_else(|| usage("the ground-truth detector needs a corpus"))?;
            Arc::new(PrecomputedDetector::from_ground_truth(corpus))
        }
        path => Arc::new(PrecomputedDetector::load(Path::new(path))?),
    })
}

fn recognizer(
    cfg: &CliConfig,
    mode: Mode,
    corpus: Option<&Corpus>,
) -> anyhow::Result<Option<Arc<dyn RecognizerBackend>>> {
    if mode != Mode::OcrDependent {
        return Ok(None);
    }
    let noise = NoiseModel::new(
        cfg.noise_substitution.unwrap_or(0.0),
        cfg.noise_deletion.unwrap_or(0.0),
        cfg.noise_seed.unwrap_or(0),
    )?;
    let rec = match (&cfg.words, corpus) {
        (Some(path), _) => WordTableRecognizer::load(path, noise)?,
        (None, Some(c)) => fixture_recognizer(c, noise)?,
        (None, None) => return Err(usage("ocr-dep mode needs --words")),
    };
    Ok(Some(Arc::new(rec)))
}

fn model(cfg: &CliConfig, corpus: Option<&Corpus>, det: &dyn DetectorBackend) -> anyhow::Result<Arc<dyn ModelBackend>> {
    let backend = match (&cfg.backend, &cfg.mock_script, &cfg.endpoint) {
        (Some(b), _, _) => b.as_str(),
        (None, Some(_), _) => "mock",
        (None, None, Some(_)) => "http",
        (None, None, None) => {
            return Err(usage(
                "no model backend: pass --mock-script, set MODEL_ENDPOINT, or choose --backend oracle",
            ))
        }
    };
    Ok(match backend {
        "mock" => Arc::new(MockBackend::load(required(&cfg.mock_script, "--mock-script")?)?),
        "http" => {
            let mut http = HttpConfig::new(required(&cfg.endpoint, "--endpoint")?.clone());
            http.api_key = std::env::var("MODEL_API_KEY").ok().filter(|k| !k.is_empty());
            http.timeout = Duration::from_secs(cfg.timeout_secs.unwrap_or(120));
            http.max_in_flight = cfg.max_in_flight.unwrap_or(4);
            http.per_minute = cfg.per_minute;
            Arc::new(HttpBackend::new(http)?)
        }
        "oracle" => {
            let corpus = corpus.ok_or_else(|| usage("the oracle backend needs a corpus"))?;
            Arc::new(OracleBackend::new(corpus, det)?)
        }
        other => return Err(usage(format!("unknown model backend {other:?}"))),
    })
}

fn pipeline(cfg: &CliConfig, corpus: Option<&Corpus>) -> anyhow::Result<PipelineConfig> {
    let (mode, ablation) = mode_and_ablation(cfg)?;
    let det = detector(cfg, corpus)?;
    let rec = recognizer(cfg, mode, corpus)?;
    let model = model(cfg, corpus, det.as_ref())?;
    let mut p = PipelineConfig::new(mode, det, rec, model).with_ablation(ablation);
    if let Some(path) = &cfg.prompts {
        p.prompts.prompts = Arc::new(PromptSet::load(path)?);
    }
    if let Some(id) = &cfg.model_id {
        p.prompts.model_id = id.clone();
    }
    p.validate()?;
    Ok(p)
}

fn eval_options(cfg: &CliConfig) -> anyhow::Result<EvalOptions> {
    let mut opts = EvalOptions::new(required(&cfg.out_dir, "--out-dir")?.clone());
    opts.workers = cfg.workers.unwrap_or(4);
    opts.cache_dir = cfg.cache_dir.clone();
    opts.resume = cfg.resume.unwrap_or(false);
    opts.split = cfg.split.clone();
    opts.score = ScoreConfig {
        gating: gating(cfg)?,
        ..ScoreConfig::default()
    };
    Ok(opts)
}

/// Writes the corpus plus a replay of the reference detector and an oracle
/// mock script keyed to that detector's region ids.
pub fn synth(args: &SynthArgs) -> anyhow::Result<ExitCode> {
    let noise = match args.noise.as_str() {
        "none" => SynthNoise::None,
        "jitter" => SynthNoise::Jitter,
        other => return Err(usage(format!("unknown synthetic noise {other:?}"))),
    };
    let corpus = generate_synthetic(&SynthConfig {
        n_documents: args.n,
        seed: args.seed,
        noise,
        ..SynthConfig::default()
    })?;
    save_unified(&corpus, &args.out)?;

    let params = ReferenceParams::default();
    let mut boxes = HashMap::new();
    for doc_id in corpus.doc_ids() {
        let regions = reference_detect(&corpus.image(doc_id)?, &params)?;
        boxes.insert(doc_id.to_string(), regions.iter().map(|r| r.bbox).collect());
    }
    let replay = PrecomputedDetector::new("reference-cc", boxes);
    write(&args.out.join(DETECTIONS_FILE), replay.to_jsonl())?;
    let script = oracle_script(&corpus, &replay)?;
    let mut text = serde_json::to_string_pretty(&script)?;
    text.push('\n');
    write(&args.out.join(MOCK_SCRIPT_FILE), text)?;

    println!(
        "{}",
        json!({
            "out": args.out,
            "documents": corpus.doc_ids().count(),
            "questions": corpus.records.len(),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn ask(args: &AskArgs, cfg: &CliConfig) -> anyhow::Result<ExitCode> {
    if args.question.trim().is_empty() {
        return Err(usage("--question is empty"));
    }
    let p = pipeline(cfg, None)?;
    let doc_id = match &args.doc_id {
        Some(id) => id.clone(),
        None => args
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| usage("--image has no file name"))?,
    };
    if !args.image.is_file() {
        return Err(usage(format!("image {} does not exist", args.image.display())));
    }
    let image = dataset::read_image(&doc_id, &args.image)?;
    let pred = run(&image, &args.question_id, &args.question, &p)?;
    if let Some(e) = &pred.error {
        log::warn!("{e}");
    }
    if let Some(out) = &args.annotate_out {
        match &pred.answer_box {
            Some(b) => save_png(&annotate(&image, b, &AnnotationStyle::default())?, out)?,
            None => log::warn!("no answer box; {} not written", out.display()),
        }
    }
    println!(
        "{}",
        json!({
            "answer": pred.answer,
            "box": pred.answer_box.map(<[u32; 4]>::from),
            "mode": p.mode.to_string(),
            "ablation": p.ablation.to_string(),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn save_png(image: &DocumentImage, path: &Path) -> anyhow::Result<()> {
    write(path, image.to_png()?)
}

pub fn eval(cfg: &CliConfig) -> anyhow::Result<ExitCode> {
    let corpus = load_corpus(cfg)?;
    let p = pipeline(cfg, Some(&corpus))?;
    let opts = eval_options(cfg)?;
    let out = evaluate(&corpus, &p, &opts)?;
    let m = &out.manifest;
    println!(
        "{}",
        json!({
            "run_id": m.run_id,
            "out_dir": opts.out_dir,
            "questions": m.questions,
            "completed": m.completed,
            "failures": m.failures,
            "model_requests": out.model_requests,
            "degraded": out.degraded,
            "anls": out.report.as_ref().map(|r| r.aggregate_anls),
            "map_iou": out.report.as_ref().and_then(|r| r.map_iou),
        })
    );
    Ok(status(out.degraded))
}

fn status(degraded: bool) -> ExitCode {
    if degraded {
        eprintln!("run degraded: more than half of the questions failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

pub fn score(args: &ScoreArgs, cfg: &CliConfig) -> anyhow::Result<ExitCode> {
    let corpus = load_corpus(cfg)?;
    let preds = read_predictions(&args.pred)?;
    let report = score_run(
        &preds,
        &corpus.records,
        &ScoreConfig {
            gating: gating(cfg)?,
            ..ScoreConfig::default()
        },
    )?;
    let text = report_json(&report);
    match &args.report {
        Some(path) => {
            write(path, &text)?;
            print!("{}", render_table(&[(corpus.provenance, &report)], &corpus.name));
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(cfg: &CliConfig) -> anyhow::Result<ExitCode> {
    let corpus = load_corpus(cfg)?;
    let mut cfg = cfg.clone();
    cfg.ablation = Some("none".into());
    let p = pipeline(&cfg, Some(&corpus))?;
    let opts = eval_options(&cfg)?;
    let out = ablation_suite(&corpus, &p, &opts)?;
    print!("{}", out.table);
    let reports: Vec<PathBuf> = out
        .variants
        .keys()
        .map(|v| opts.out_dir.join(v).join(REPORT_JSON))
        .collect();
    log::info!("reports: {reports:?}");
    Ok(status(out.variants.values().any(|o| o.degraded)))
}
