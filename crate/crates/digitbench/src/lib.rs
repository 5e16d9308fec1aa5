//! A self-contained benchmark engine for 28x28 grayscale handwritten digit
//! classification.
//!
//! Everything runs on a small reverse-mode autodiff core written from
//! scratch: eleven model families (MLP, CNN, LSTM, GRU, Transformer, JEM,
//! FastKAN, EfficientKAN and three PETNN variants), a unified AdamW +
//! one-cycle training protocol with gradient clipping and early stopping,
//! MNIST IDX data handling, and macro-averaged classification metrics.

pub mod config;
pub mod data;
pub mod eval;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

/// Mixes a base seed with a salt so independent consumers (per-epoch
/// shuffles, per-step dropout, per-model init) get decorrelated but fully
/// reproducible streams.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
