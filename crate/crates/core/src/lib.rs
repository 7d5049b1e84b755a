//! Self-supervised biomarker proposal pipeline for retinal OCT B-scans.
//!
//! The crate covers the whole automated path: a synthetic cohort generator
//! with ground-truth latent factors ([`synth`]), the contrastive view
//! family ([`augment`]), a small convolutional encoder trained with the
//! BYOL objective ([`nn`], [`ssl`]), the feature store ([`features`]),
//! clustering and cluster statistics ([`cluster`]), linear-probe GradCAM
//! attribution ([`attribution`]), the prognostic benchmark ([`prognosis`]),
//! the cluster-review interview protocol ([`review`]) and the run-directory
//! orchestration used by the command line tool ([`pipeline`]).

pub mod attribution;
pub mod augment;
pub mod cluster;
pub mod digest;
pub mod error;
pub mod exec;
pub mod features;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod prognosis;
pub mod review;
pub mod rng;
pub mod ssl;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Exec;
pub use image::GrayImage;
