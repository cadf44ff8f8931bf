//! Discover semantic parts inside the hidden layers of a style-based generator
//! and transfer the appearance of one part between generated images by
//! conditioned interpolation of per-layer styles.
//!
//! * [`ndio`]: tensors, `.npy`/`.npz` I/O, standardization, membership resampling
//! * [`minigen`]: a small deterministic style-based generator
//! * [`semantics`]: spherical k-means, channel attribution, the semantic catalog
//! * [`editor`]: query vectors and style interpolation
//! * [`metrics`]: CIELAB diff maps, In/Out-MSE, Fréchet distance

pub mod editor;
pub mod image;
pub mod metrics;
pub mod minigen;
pub mod ndio;
pub mod semantics;

pub use image::RgbImage;
