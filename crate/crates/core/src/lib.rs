//! Keyword-driven document question answering.
//!
//! The pipeline has three stages: select keyword-bearing sentences from a
//! document corpus, fine-tune a compact encoder on them with masked language
//! modeling, then train a cross-attention decoder that scores every region
//! of interest in a document against a natural-language question.

pub mod numerics;
