//! Multimodal dialogue-context interaction modules for conversational
//! prosody prediction.
//!
//! Four contrastive interaction modules relate the text and speech history of
//! a dialogue to the text and speech of the next utterance. Their prefix
//! features are added to a phoneme encoding of the target utterance, from
//! which a variance adapter predicts pitch, energy and duration.
//!
//! Everything runs on a small reverse-mode differentiation core
//! ([`numerics`]). Per-dialogue work is fanned out through [`par`], which uses
//! rayon when the `parallel` feature is on.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod gradsuite;
mod init;
pub mod interaction;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod synthesizer;

pub use error::{Error, Result};
