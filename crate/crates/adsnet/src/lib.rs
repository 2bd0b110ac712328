//! Cross-domain lifetime-value prediction with guarded knowledge transfer.
//!
//! Two networks with one backbone architecture train side by side: a vanilla
//! network that only ever sees internal-domain batches, and a gain network
//! that additionally ingests external-domain batches through a domain
//! adapter. Before each update the gain network's edge over the vanilla
//! network is measured on the same internal batch; external knowledge is
//! accepted only when that edge is strictly positive, and the two networks
//! are re-synchronized on a fixed period so the comparison stays honest.
//!
//! The crate is organized bottom-up:
//! - [`diffcore`]: tape-based reverse-mode autodiff over f64 tensors
//! - [`encoding`]: feature embeddings with weighted pairwise interactions
//! - [`backbone`]: mixture-of-experts backbone, ordinal value heads, LTV
//!   segmentation
//! - [`siamese`]: the paired-network step, gain gate, and transfer losses
//! - [`trainer`]: optimizers, sync schedule, and the full training loop
//! - [`metrics`]: ranking metrics (AUC, normalized Gini) and evaluation
//!   reports
//! - [`datagen`]: synthetic two-domain purchase log generator
//! - [`config`], [`checkpoint`], [`cli`]: run configuration, model
//!   serialization, command-line entry points

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod encoding;
pub mod metrics;
pub mod siamese;
pub mod trainer;
