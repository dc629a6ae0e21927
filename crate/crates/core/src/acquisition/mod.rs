//! Undersampling masks, k-space orderings and the motion-aware multi-coil
//! forward model.

mod mask;
mod operator;
mod plan;

pub use mask::{acl_region, make_cartesian_mask, make_poisson_disc_mask, Mask2D, PoissonDiscMask};
pub use operator::{
    adjoint_full, data_fidelity, evaluate, forward_at_t, forward_full, grad_data_fidelity_c,
    grad_data_fidelity_v, grad_data_fidelity_x, noise_sigma_for_snr, simulate_kspace,
    zero_filled_coil_images, zero_filled_rss, Evaluation, NoiseModel, Wanted,
};
pub use plan::{make_ordering, Geometry, OrderingScheme, ReadoutAxis, SamplingPlan};
