//! Reference-free performance monitoring for attention-based speech
//! recognizers: utterance-level scores over attention weights, decoder
//! posteriors and pre-softmax activations, linearly calibrated to
//! character error rate.

pub mod autoencoder;
pub mod calibration;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod measures;
pub mod neural;
pub mod rnn;
pub mod synthcorpus;

pub use error::{Error, Result};
