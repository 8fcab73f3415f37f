//! The frozen transformer backbone: patch embedding, prompt-aware attention
//! blocks, masked-autoencoder decoder and the growable classifier head.

pub mod attention;
pub mod block;
pub mod classifier;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod params;

pub use attention::msa_prompted;
pub use classifier::{argmax_class, classify, mean_pool};
pub use config::ModelConfig;
pub use decoder::decoder_forward;
pub use encoder::{encoder_forward, patch_pixels, patchify, unpatchify, TokenSequence};
pub use params::{ClassifierParams, Model, NamedTensor};
