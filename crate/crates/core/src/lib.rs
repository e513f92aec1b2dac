//! Desk-scale ECG deep-learning toolkit: waveform ingestion and filtering,
//! rasterization to fixed-size images, discrete patch tokenization, masked
//! image modeling pre-training of a small vision transformer, fraction-sweep
//! fine-tuning with patient-grouped splits, threshold-free evaluation with
//! bootstrap intervals, cohort Wasserstein distances, and gradient-based
//! saliency overlays.

pub mod config;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod raster;
pub mod signal;
pub mod tokenizer;
pub mod training;
pub mod util;
