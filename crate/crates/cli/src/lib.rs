//! Batch front end: dataset generation, tokenizer fitting, training, flow
//! extraction, evaluation, ablation sweeps and figures.

pub mod app;
pub mod commands;
pub mod config;
pub mod log;
pub mod plot;
