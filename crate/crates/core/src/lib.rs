//! Perceptual-faithfulness evaluation for multimodal reasoning traces.
//!
//! A reasoning chain is segmented into steps, each step's claimed objects are
//! verified against the image by existence polling and grounding, and the
//! fused confidences become step- and chain-level faithfulness scores. The
//! [`planner`] uses the same evidence to gate and refine reasoning before it
//! is accepted.

pub mod backends;
pub mod dominance;
pub mod evidence;
pub mod extraction;
pub mod harness;
pub mod planner;
pub mod scoring;
