//! Dense cross-domain correspondence with hierarchical, GRU-assisted
//! PatchMatch.
//!
//! Two images are encoded into feature pyramids ([`pyramid`]). The coarsest
//! level is matched exhaustively; every finer level starts from the
//! upsampled coarser field and alternates neighbourhood propagation with a
//! convolutional-GRU refinement of the top-K candidates ([`matcher`]). The
//! resulting fields drive a differentiable soft warp of the exemplar, which
//! is what the refiner is trained through ([`warp`]).
//!
//! All hand-written backward passes live next to their forward ops and are
//! checked against central finite differences ([`gradcheck`]).

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod matcher;
pub mod ops;
pub mod pyramid;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result, Shape};
pub use tensor::{Real, Tensor};
