//! Shared fixtures for the criterion benches in `benches/`.

use std::sync::Arc;

use docloc_core::dataset::{generate_synthetic, SynthConfig};
use docloc_core::oracle::OracleBackend;
use docloc_core::{Corpus, Mode, PipelineConfig, PrecomputedDetector};

/// A small deterministic synthetic corpus.
pub fn corpus(n_documents: u32) -> Corpus {
    generate_synthetic(&SynthConfig {
        n_documents,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus")
}

/// Ground-truth detection and an oracle model, so timings measure the
/// pipeline itself.
pub fn oracle_pipeline(corpus: &Corpus, mode: Mode) -> PipelineConfig {
    let det = Arc::new(PrecomputedDetector::from_ground_truth(corpus));
    let model = Arc::new(OracleBackend::new(corpus, det.as_ref()).expect("oracle"));
    let rec = match mode {
        Mode::OcrDependent => Some(Arc::new(
            docloc_core::recognition::fixture_recognizer(corpus, docloc_core::NoiseModel::NONE).expect("recognizer"),
        ) as Arc<dyn docloc_core::RecognizerBackend>),
        Mode::OcrFree => None,
    };
    PipelineConfig::new(mode, det, rec, model)
}
