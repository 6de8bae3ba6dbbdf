//! Shape-gain vector quantization for autoencoder-based CSI feedback.
//!
//! The encoder's bounded latent vector is split into `D`-dimensional
//! sub-vectors. Each sub-vector's magnitude is quantized by a clipped μ-law
//! scalar quantizer ([`gain_quant`]) and its direction by a trainable
//! Grassmannian line codebook ([`shape_quant`]). [`trainer`] runs the joint
//! training loop, including nested multi-rate codebooks, and [`flat_vq`]
//! provides the flat VQ-VAE baseline used for complexity comparisons.

pub mod complexity;
pub mod config;
pub mod csi_data;
pub mod error;
pub mod flat_vq;
pub mod formats;
pub mod gain_quant;
pub mod nested;
pub mod nnet;
pub mod scalar;
pub mod shape_quant;
pub mod trainer;

pub use error::{Error, Result};
