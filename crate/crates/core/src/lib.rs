//! Unpaired image dehazing through contrastive factor disentanglement.
//!
//! The library treats a hazy photograph as an entanglement of a task-relevant
//! factor (the clear scene) and a task-irrelevant factor (the haze
//! distribution) and learns to separate the two from *unpaired* hazy/clear
//! image sets. A bidirectional translation backbone (hazy->clear generator `G`
//! and clear->hazy generator `F`, each with patch discriminators) is trained
//! jointly with per-layer projection heads and a set of *negative generators*:
//! small networks that synthesize hard contrastive negatives and are updated
//! by gradient ascent on the contrastive objective while the backbone descends
//! it. The crates are organised as:
//!
//! - [`imaging`]: image type, atmospheric-scattering haze synthesis, dark
//!   channel operator, unpaired dataset sampling, PNG/JPEG I/O.
//! - [`tape`]: a small reverse-mode autodiff engine over `f64` tensors that
//!   powers training; every op's backward pass is finite-difference checked.
//! - [`networks`]: generators, discriminators, projection heads and negative
//!   generators built on the tape.
//! - [`losses`]: similarity kernel, adversarial contrastive loss, diversity,
//!   total-variation, dark-channel, GAN and cycle losses plus the two
//!   composite objectives.
//! - [`trainer`]: the alternating minimax loop, Adam, LR schedule,
//!   checkpointing.
//! - [`evalkit`]: PSNR/SSIM, folder evaluation, embedding export with 2D
//!   projection (PCA / t-SNE) and silhouette scoring.
//! - [`config`]: flat TOML run configuration with strict key validation and
//!   value provenance.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod imaging;
pub mod losses;
pub mod networks;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
