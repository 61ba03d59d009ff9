//! Layout-faithful text restoration from OCR segments, medical report
//! annotation modelling, QA bank generation and scoring.
//!
//! The pipeline runs: [`synth`] or real OCR JSON → [`esra::restore`] →
//! [`qa::generate_bank`] over curated [`annotation`]s → [`baseline::run_batch`]
//! against a text-model endpoint → [`eval::score_run`].

pub mod annotation;
pub mod baseline;
pub mod esra;
pub mod eval;
pub mod kmeans;
pub mod normalize;
pub mod ocr;
pub mod parallel;
pub mod qa;
pub mod quality;
pub mod seeding;
pub mod synth;

pub use esra::{restore, EsraParams, RestoredText};
pub use ocr::{parse_ocr_json, OcrDocument, TextSegment};
pub use parallel::Execution;
