//! Multimodal emotion recognition in conversations.
//!
//! The crate is organised bottom-up: a small dense [`tensor`] type and a
//! tape-based [`autograd`] engine, reusable layers ([`nn`], [`attention`],
//! [`context`]), objectives ([`losses`]) and [`metrics`], then the three
//! training pipelines ([`hcam`], [`mister`], [`care_head`]), the [`ensemble`]
//! combiner and the experiment [`runner`].

pub mod attention;
pub mod autograd;
pub mod care_head;
pub mod checkpoint;
pub mod context;
pub mod datamodel;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod hcam;
pub mod losses;
pub mod metrics;
pub mod mister;
pub mod nn;
pub mod optim;
pub mod params;
pub mod runner;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
