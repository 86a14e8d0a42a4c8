//! Core library for knob-conditioned neural amp modeling with
//! ensemble-disagreement data acquisition.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`graph`]) that the conditional models ([`models`]), spectral losses
//! ([`mel`]), trainer ([`train`]) and acquisition objective ([`acquire`])
//! all share. [`amp`] provides a deterministic synthetic amp used as a
//! ground-truth labeler, plus the file-exchange manifest for capturing a
//! real device instead.

pub mod acquire;
pub mod amp;
pub mod audio;
pub mod graph;
pub mod knob;
pub mod mel;
pub mod models;
pub mod numcheck;
pub mod train;
