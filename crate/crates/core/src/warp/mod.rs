//! Soft warping of the exemplar through correspondence fields, the losses
//! that train the refiner, pseudo-exemplar synthesis and SPADE modulation.

pub mod distort;
pub mod soft;
pub mod spade;
pub mod train;

pub use distort::{
    field_from_flow, make_pseudo_exemplar, psnr, random_distortion, Distortion, DistortionRange, DistortionSpec,
    ThinPlate, MAX_DISPLACEMENT_FRACTION,
};
pub use soft::{corr_loss, corr_loss_backward, soft_warp, soft_warp_backward, WarpGrads, WarpResult};
pub use spade::{
    positional_norm, spade_modulate, spade_modulate_backward, stack_warps, SpadeGrads, SpadeProjection, SPADE_EPS,
};
pub use train::{
    evaluate_corr, objective, train_refiner, warp_levels, Extractor, LossRecord, Objective, PseudoPairs, TrainConfig, TrainOutput,
    LOSS_CSV_HEADER,
};
