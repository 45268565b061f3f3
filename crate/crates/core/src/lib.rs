//! Membership inference against image-captioning models.
//!
//! The crate contains everything needed to run the attacks end to end on
//! synthetic data: n-gram similarity metrics ([`textsim`]), corpus
//! generation ([`synthdata`]), a small encoder-decoder captioner
//! ([`captioner`]), the image/text feature extractor ([`mfe`]), the
//! metric-based and feature-based attacks ([`mb_attack`], [`fb_attack`]),
//! training-time defenses ([`defenses`]), evaluation ([`evalkit`]) and the
//! experiment pipeline ([`pipeline`]).

pub mod captioner;
pub mod checkpoint;
pub mod defenses;
pub mod error;
pub mod evalkit;
pub mod fb_attack;
pub mod mb_attack;
pub mod mfe;
pub mod nn;
mod optim;
pub mod pipeline;
pub mod scenario;
pub mod seed;
pub mod synthdata;
pub mod textsim;
pub mod vocab;

pub use error::{Error, Result};
