//! Document question answering with answer localization.
//!
//! Two pipelines share text detection: an OCR-dependent flow that recognizes
//! each detected region and asks a language model over `(text, box)` pairs,
//! and an OCR-free flow that lays the region crops out as a labeled
//! "constructed image" and asks a multimodal model to point at region ids.
//! Both return an answer string plus its box in the source image.

pub mod constructed;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod glyphs;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod recognition;

pub use constructed::{build_constructed_image, resolve_region_ids, ConstructedImageMap, LayoutConfig};
pub use dataset::{Corpus, DatasetFormat, Provenance};
pub use detection::{detect, DetectorBackend, PrecomputedDetector, ReferenceDetector, ReferenceParams};
pub use error::{Error, Result, Stage};
pub use geometry::{
    crop, envelope, quad_to_bbox, BBox, DetectedRegion, DocumentImage, Prediction, QaRecord, Quad, Raster,
    RecognizedRegion, WordBox,
};
pub use harness::{ablation_suite, evaluate, score_offline, EvalOptions, EvalOutcome, RunManifest};
pub use metrics::{anls_score, iou, map_at_iou, score_run, AnlsConfig, EvalReport, Gating, ScoreConfig};
pub use model::{GroundedAnswer, ModelBackend, ModelRequest, ModelResponse, PromptContext, PromptSet};
pub use pipeline::{annotate, run, run_ocr_dependent, run_ocr_free, Ablation, AnnotationStyle, Mode, PipelineConfig};
pub use recognition::{NoiseModel, RecognizerBackend, WordTableRecognizer};
