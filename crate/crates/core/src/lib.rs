//! SAR-to-optical image translation with a dual-branch generator, a
//! dual-branch discriminator, and tools for judging how much a translation
//! can be trusted.

pub mod config;
pub mod dataio;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod imageops;
pub mod losses;
pub mod nn;
pub mod preprocess;
pub mod interpretability;
pub mod synth;
pub mod tile;
pub mod training;

pub use error::{Error, Result};
pub use tile::{ImageTile, ValueRange};
