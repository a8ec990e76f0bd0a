//! Training and certification of relaxed robustness guarantees for small
//! feedforward classifiers.
//!
//! The crate provides:
//! - `net`: network representation, forward evaluation, model file I/O
//! - `tape`: reverse-mode autodiff used by training and attacks
//! - `lipschitz`: spectral-norm power iteration and per-class-pair bounds
//! - `certify`: standard, relaxed-top-K (RTK) and affinity certification heads
//! - `train`: gradient-based training of the certified heads
//! - `eval`: VRA and related metrics
//! - `data`: synthetic dataset generators and affinity-set configs
//! - `falsify`: attack-based oracles that try to break issued certificates

pub mod certify;
pub mod data;
pub mod error;
pub mod eval;
pub mod falsify;
pub mod lipschitz;
pub mod net;
pub mod tape;
pub mod train;

pub use error::{GloroError, Result};
