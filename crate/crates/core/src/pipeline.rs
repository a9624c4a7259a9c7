//! The two answer-localization flows and the annotation renderer.
//!
//! OCR-dependent: detect, recognize, one text-only model call over
//! `(text, box)` lines. OCR-free: detect, lay the crops out as a constructed
//! image, extract the answer from the raw image, then ground it to region ids.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use image::Rgb;
use serde::{Deserialize, Serialize};

use crate::constructed::{build_constructed_image, resolve_region_ids, ConstructedImageMap, LayoutConfig};
use crate::detection::{detect, DetectorBackend};
use crate::error::{Error, Result, Stage};
use crate::geometry::{envelope, BBox, DetectedRegion, DocumentImage, Prediction};
use crate::metrics::iou;
use crate::model::{
    complete, parse_grounded_answer, prompt_answer_extraction, prompt_grounding, prompt_ocr_dependent, GroundedAnswer,
    ModelBackend, ModelResponse, ParseContext, PromptContext,
};
use crate::recognition::{recognize_all, RecognizerBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OcrDependent,
    OcrFree,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::OcrDependent => "ocr_dependent",
            Mode::OcrFree => "ocr_free",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ocr_dependent" | "ocr_dep" => Ok(Mode::OcrDependent),
            "ocr_free" => Ok(Mode::OcrFree),
            other => Err(Error::Usage(format!("unknown mode {other:?} (ocr-dep or ocr-free)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Original image sent along with the constructed image for grounding.
    Ablation1,
    /// No separate extraction call; answer and ids come from one request.
    Ablation2,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Ablation1 => "ablation1",
            Ablation::Ablation2 => "ablation2",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "0" | "default" => Ok(Ablation::None),
            "1" | "ablation1" => Ok(Ablation::Ablation1),
            "2" | "ablation2" => Ok(Ablation::Ablation2),
            other => Err(Error::Usage(format!("unknown ablation {other:?} (none, 1 or 2)"))),
        }
    }
}

#[derive(Clone)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub ablation: Ablation,
    pub detector: Arc<dyn DetectorBackend>,
    pub recognizer: Option<Arc<dyn RecognizerBackend>>,
    pub model: Arc<dyn ModelBackend>,
    pub layout: LayoutConfig,
    pub prompts: PromptContext,
    /// Returned coordinates snap to detected regions at this IoU or above.
    pub snap_iou: f64,
    detector_gate: Arc<Mutex<()>>,
}

/// Serializable view of a [`PipelineConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub mode: Mode,
    pub ablation: Ablation,
    pub detector: String,
    pub recognizer: Option<String>,
    pub model_backend: String,
    pub model_id: String,
    pub prompt_set: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_image_dim: u32,
    pub layout: LayoutConfig,
    pub snap_iou: f64,
}

impl PipelineConfig {
    pub fn new(
        mode: Mode,
        detector: Arc<dyn DetectorBackend>,
        recognizer: Option<Arc<dyn RecognizerBackend>>,
        model: Arc<dyn ModelBackend>,
    ) -> Self {
        PipelineConfig {
            mode,
            ablation: Ablation::None,
            detector,
            recognizer,
            model,
            layout: LayoutConfig::default(),
            prompts: PromptContext::default(),
            snap_iou: 0.5,
            detector_gate: Arc::new(Mutex::new(())),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_model(mut self, model: Arc<dyn ModelBackend>) -> Self {
        self.model = model;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::OcrDependent {
            if self.recognizer.is_none() {
                return Err(Error::Usage("ocr-dependent mode needs a recognizer".into()));
            }
            if self.ablation != Ablation::None {
                return Err(Error::Usage(format!(
                    "{} applies to the ocr-free mode only",
                    self.ablation
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.snap_iou) {
            return Err(Error::Usage("snap_iou must lie in [0, 1]".into()));
        }
        self.layout.validate()
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            mode: self.mode,
            ablation: self.ablation,
            detector: self.detector.backend_id().to_string(),
            recognizer: self.recognizer.as_ref().map(|r| r.backend_id().to_string()),
            model_backend: self.model.backend_id(),
            model_id: self.prompts.model_id.clone(),
            prompt_set: self.prompts.prompts.version.clone(),
            temperature: self.prompts.temperature,
            max_output_tokens: self.prompts.max_output_tokens,
            max_image_dim: self.prompts.max_image_dim,
            layout: self.layout.clone(),
            snap_iou: self.snap_iou,
        }
    }

    /// Runs the detector, serializing calls for single-flight backends.
    pub fn detect(&self, image: &DocumentImage) -> Result<Vec<DetectedRegion>> {
        let _guard = self
            .detector
            .single_flight()
            .then(|| self.detector_gate.lock().unwrap_or_else(|p| p.into_inner()));
        detect(self.detector.as_ref(), image).map_err(|e| e.at(Stage::Detection))
    }
}

pub fn request_tag(doc_id: &str, question_id: &str, step: &str) -> String {
    format!("{doc_id}/{question_id}/{step}")
}

/// Detects and answers with the configured mode.
pub fn run(image: &DocumentImage, question_id: &str, q: &str, cfg: &PipelineConfig) -> Result<Prediction> {
    cfg.validate()?;
    let regions = cfg.detect(image)?;
    answer_with_regions(image, &regions, question_id, q, cfg)
}

pub fn run_ocr_dependent(
    image: &DocumentImage,
    question_id: &str,
    q: &str,
    cfg: &PipelineConfig,
) -> Result<Prediction> {
    if cfg.mode != Mode::OcrDependent {
        return Err(Error::Usage("configuration is not in ocr-dependent mode".into()));
    }
    run(image, question_id, q, cfg)
}

pub fn run_ocr_free(image: &DocumentImage, question_id: &str, q: &str, cfg: &PipelineConfig) -> Result<Prediction> {
    if cfg.mode != Mode::OcrFree {
        return Err(Error::Usage("configuration is not in ocr-free mode".into()));
    }
    run(image, question_id, q, cfg)
}

/// Answers with regions that were already detected on `image`.
pub fn answer_with_regions(
    image: &DocumentImage,
    regions: &[DetectedRegion],
    question_id: &str,
    q: &str,
    cfg: &PipelineConfig,
) -> Result<Prediction> {
    match cfg.mode {
        Mode::OcrDependent => ocr_dependent(image, regions, question_id, q, cfg),
        Mode::OcrFree => ocr_free(image, regions, question_id, q, cfg),
    }
}

fn call(cfg: &PipelineConfig, req: &crate::model::ModelRequest, stage: Stage) -> Result<ModelResponse> {
    complete(req, cfg.model.as_ref()).map_err(|e| e.at(stage))
}

fn valid_ids(regions: &[DetectedRegion]) -> ParseContext {
    ParseContext {
        expects_box: true,
        valid_ids: Some(regions.iter().map(|r| r.region_id).collect()),
    }
}

/// Snaps a returned box to the envelope of the detected regions it mostly
/// covers when that envelope overlaps it by `snap_iou`; otherwise clips it to
/// the image.
fn snap(b: &BBox, regions: &[DetectedRegion], image: &DocumentImage, snap_iou: f64) -> (Option<BBox>, Vec<u32>) {
    let covered: Vec<&DetectedRegion> = regions
        .iter()
        .filter(|r| r.bbox.area() > 0)
        .filter(|r| b.intersection(&r.bbox).is_some_and(|i| 2 * i.area() >= r.bbox.area()))
        .collect();
    if !covered.is_empty() {
        let env = envelope(&covered.iter().map(|r| r.bbox).collect::<Vec<_>>()).expect("non-empty");
        if iou(&env, b) >= snap_iou {
            return (Some(env), covered.iter().map(|r| r.region_id).collect());
        }
    }
    (b.clip_to(image.width(), image.height()), Vec::new())
}

fn ids_to_box(ids: &[u32], regions: &[DetectedRegion]) -> Result<BBox> {
    let boxes: Vec<BBox> = ids
        .iter()
        .map(|id| {
            regions
                .iter()
                .find(|r| r.region_id == *id)
                .map(|r| r.bbox)
                .ok_or(Error::Grounding(vec![*id]))
        })
        .collect::<Result<_>>()?;
    envelope(&boxes)
}

fn ocr_dependent(
    image: &DocumentImage,
    regions: &[DetectedRegion],
    question_id: &str,
    q: &str,
    cfg: &PipelineConfig,
) -> Result<Prediction> {
    let recognizer = cfg
        .recognizer
        .as_ref()
        .ok_or_else(|| Error::Usage("ocr-dependent mode needs a recognizer".into()))?;
    let mut pred = Prediction::empty(question_id);
    if regions.is_empty() {
        pred.error = Some("no text regions detected".into());
        return Ok(pred);
    }
    let recognized =
        recognize_all(recognizer.as_ref(), &image.doc_id, regions).map_err(|e| e.at(Stage::Recognition))?;
    let req = prompt_ocr_dependent(
        &recognized,
        q,
        &cfg.prompts,
        &request_tag(&image.doc_id, question_id, "ocr-dep"),
    )?;
    let resp = call(cfg, &req, Stage::Model)?;
    pred.wall_time_ms = resp.latency_ms;
    pred.raw_model_output = resp.raw_text.clone();
    let parsed = match parse_grounded_answer(&resp.raw_text, &valid_ids(regions)) {
        Ok(g) => g,
        Err(e) => {
            pred.error = Some(e.at(Stage::Parse).to_string());
            return Ok(pred);
        }
    };
    if parsed.not_found {
        return Ok(pred);
    }
    pred.answer = parsed.answer.clone();
    localize(&mut pred, &parsed, regions, image, cfg, true);
    Ok(pred)
}

/// Fills the prediction box from returned coordinates or ids.
fn localize(
    pred: &mut Prediction,
    parsed: &GroundedAnswer,
    regions: &[DetectedRegion],
    image: &DocumentImage,
    cfg: &PipelineConfig,
    coordinates_first: bool,
) {
    let from_box = |pred: &mut Prediction| match parsed.bbox {
        Some(b) => {
            let (snapped, ids) = snap(&b, regions, image, cfg.snap_iou);
            pred.answer_box = snapped;
            pred.matched_region_ids = ids;
            snapped.is_some()
        }
        None => false,
    };
    let from_ids = |pred: &mut Prediction| match parsed.region_ids.as_deref() {
        Some(ids) => match ids_to_box(ids, regions) {
            Ok(b) => {
                pred.answer_box = Some(b);
                pred.matched_region_ids = ids.to_vec();
                true
            }
            Err(e) => {
                log::warn!("{}: {e}", pred.question_id);
                false
            }
        },
        None => false,
    };
    #[allow(clippy::if_same_then_else)]
    let found = if coordinates_first {
        from_box(pred) || from_ids(pred)
    } else {
        from_ids(pred) || from_box(pred)
    };
    if !found {
        log::warn!("{}: model output carries no usable location", pred.question_id);
    }
}

fn join_raw(a: &str, b: &str) -> String {
    if a.is_empty() {
        return b.to_string();
    }
    format!("{a}\n{b}")
}

fn ocr_free(
    image: &DocumentImage,
    regions: &[DetectedRegion],
    question_id: &str,
    q: &str,
    cfg: &PipelineConfig,
) -> Result<Prediction> {
    let doc = &image.doc_id;
    let mut pred = Prediction::empty(question_id);
    if cfg.ablation == Ablation::Ablation2 {
        if regions.is_empty() {
            pred.error = Some("no text regions detected".into());
            return Ok(pred);
        }
        let cim = build_constructed_image(doc, regions, &cfg.layout).map_err(|e| e.at(Stage::Construction))?;
        let boxes: Vec<(u32, BBox)> = regions.iter().map(|r| (r.region_id, r.bbox)).collect();
        let req = prompt_grounding(
            &cim,
            &boxes,
            q,
            None,
            None,
            &cfg.prompts,
            &request_tag(doc, question_id, "combined"),
        )?;
        let resp = call(cfg, &req, Stage::Grounding)?;
        pred.wall_time_ms = resp.latency_ms;
        pred.raw_model_output = resp.raw_text.clone();
        match parse_grounded_answer(&resp.raw_text, &valid_ids(regions)) {
            Ok(g) if g.not_found => {}
            Ok(g) => {
                pred.answer = g.answer.clone();
                ground(&mut pred, &g, &cim, regions, image, cfg);
            }
            Err(e) => pred.error = Some(e.at(Stage::Parse).to_string()),
        }
        return Ok(pred);
    }

    // the constructed image does not depend on the answer, so build it while
    // the extraction call is in flight
    let (cim, extraction) = std::thread::scope(|s| {
        let builder = s.spawn(|| {
            if regions.is_empty() {
                return None;
            }
            Some(build_constructed_image(doc, regions, &cfg.layout).map_err(|e| e.at(Stage::Construction)))
        });
        let extraction = (|| {
            let req = prompt_answer_extraction(image, q, &cfg.prompts, &request_tag(doc, question_id, "extract"))?;
            call(cfg, &req, Stage::Extraction)
        })();
        (builder.join().expect("constructed image builder panicked"), extraction)
    });
    let resp = extraction?;
    pred.wall_time_ms = resp.latency_ms;
    pred.raw_model_output = resp.raw_text.clone();
    let extracted = match parse_grounded_answer(&resp.raw_text, &ParseContext::default()) {
        Ok(g) => g,
        Err(e) => {
            pred.error = Some(e.at(Stage::Parse).to_string());
            return Ok(pred);
        }
    };
    if extracted.not_found {
        return Ok(pred);
    }
    pred.answer = extracted.answer.clone();

    let cim = match cim {
        None => {
            pred.error = Some("no text regions detected; answer not grounded".into());
            return Ok(pred);
        }
        Some(Err(e)) => {
            pred.error = Some(e.to_string());
            return Ok(pred);
        }
        Some(Ok(cim)) => cim,
    };
    let boxes: Vec<(u32, BBox)> = regions.iter().map(|r| (r.region_id, r.bbox)).collect();
    let original = (cfg.ablation == Ablation::Ablation1).then_some(image);
    let req = prompt_grounding(
        &cim,
        &boxes,
        q,
        Some(&pred.answer),
        original,
        &cfg.prompts,
        &request_tag(doc, question_id, "ground"),
    )?;
    let resp = match call(cfg, &req, Stage::Grounding) {
        Ok(r) => r,
        Err(e) => {
            pred.error = Some(e.to_string());
            return Ok(pred);
        }
    };
    pred.wall_time_ms += resp.latency_ms;
    pred.raw_model_output = join_raw(&pred.raw_model_output, &resp.raw_text);
    match parse_grounded_answer(&resp.raw_text, &valid_ids(regions)) {
        Ok(g) => ground(&mut pred, &g, &cim, regions, image, cfg),
        Err(e) => pred.error = Some(e.at(Stage::Grounding).to_string()),
    }
    Ok(pred)
}

fn ground(
    pred: &mut Prediction,
    g: &GroundedAnswer,
    cim: &ConstructedImageMap,
    regions: &[DetectedRegion],
    image: &DocumentImage,
    cfg: &PipelineConfig,
) {
    if let Some(ids) = g.region_ids.as_deref() {
        match resolve_region_ids(ids, cim) {
            Ok(b) => {
                pred.answer_box = Some(b);
                pred.matched_region_ids = ids.to_vec();
                return;
            }
            Err(e) => log::warn!("{}: {e}", pred.question_id),
        }
    }
    if g.bbox.is_some() {
        localize(pred, g, regions, image, cfg, true);
        return;
    }
    log::warn!("{}: grounding returned no known region ids", pred.question_id);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationStyle {
    pub color: [u8; 3],
    pub thickness: u32,
}

impl Default for AnnotationStyle {
    fn default() -> Self {
        AnnotationStyle {
            color: [255, 0, 0],
            thickness: 3,
        }
    }
}

/// Copy of `image` with an outline drawn just outside `bbox`, clipped to the
/// canvas.
pub fn annotate(image: &DocumentImage, bbox: &BBox, style: &AnnotationStyle) -> Result<DocumentImage> {
    if style.thickness == 0 {
        return Err(Error::Usage("annotation thickness must be positive".into()));
    }
    if !bbox.fits_within(image.width(), image.height()) {
        return Err(Error::Validation(format!(
            "box {bbox} outside image {}x{}",
            image.width(),
            image.height()
        )));
    }
    let mut canvas = image.pixels().clone();
    let t = style.thickness;
    let outer = BBox {
        x1: bbox.x1.saturating_sub(t),
        y1: bbox.y1.saturating_sub(t),
        x2: (bbox.x2 + t).min(image.width()),
        y2: (bbox.y2 + t).min(image.height()),
    };
    let color = Rgb(style.color);
    for y in outer.y1..outer.y2 {
        for x in outer.x1..outer.x2 {
            let inside = x >= bbox.x1 && x < bbox.x2 && y >= bbox.y1 && y < bbox.y2;
            if !inside {
                canvas.put_pixel(x, y, color);
            }
        }
    }
    DocumentImage::new(image.doc_id.clone(), canvas)
}
