//! Similarity models of the form `y(x, x') = <phi(x), phi(x')>` built on layered
//! feature maps, together with explanations of the predicted similarity in terms
//! of *pairs* of input features.
//!
//! The crate is organized around six pieces:
//!
//! * [`tensor`] — dense row-major tensors and a seeded, reproducible RNG,
//! * [`network`] — the typed layer chain (forward, reverse-mode gradients,
//!   SGD training, model files),
//! * [`lrp`] — first-order relevance propagation producing per-output-unit
//!   factor matrices,
//! * [`explain`] — second-order pairwise explanations: the factored product of
//!   relevance factors, a direct propagation oracle, the Hessian-product,
//!   saliency and curvature baselines, coarse-graining and the ACS metric,
//! * [`benchmark`] — the digit-matching ground-truth benchmark, the invariance
//!   ratio, and the bigram graph builder,
//! * [`render`] — deterministic SVG rendering of pairwise explanations.

pub mod benchmark;
pub mod codec;
pub mod error;
pub mod explain;
pub mod lrp;
pub mod network;
pub mod render;
pub mod tensor;

pub use error::{Error, Result};
pub use explain::{PairwiseExplanation, Partition};
pub use lrp::{GammaSchedule, RelevanceFactors};
pub use network::{Layer, NetworkGraph, SimilarityModel, TrainConfig};
pub use render::{ConnectionList, RenderParams};
pub use tensor::{Rng, Tensor};
