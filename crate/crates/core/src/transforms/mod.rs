//! Shifting transformations, non-shifting augmentation, dissolving and view
//! composition.

mod blur;
mod nonshift;
mod resize;
mod shift;
mod views;

pub use blur::{gaussian_blur, gaussian_kernel, gaussian_sigma, median_blur};
pub use nonshift::{apply_nonshift, Crop, Jitter, NonShiftConfig, NonShiftSpec};
pub use resize::{at_resolution, at_resolution_batch, resize_bilinear};
pub use shift::{make_shift_set, Shift, ShiftKind, ShiftSet, PERM_COUNT};
pub use views::{
    dissolve_images, Branch, DiffusionDissolver, DissolveConfig, DissolveMethod, Dissolver,
    HeuristicDissolver, ViewBatch, ViewComposer,
};

/// Heuristic dissolving with Gaussian or median blur (`method` must be one of those).
pub fn heuristic_dissolve(
    x: &crate::image::Image,
    method: DissolveMethod,
    kernel_size: usize,
) -> crate::error::Result<crate::image::Image> {
    match method {
        DissolveMethod::Gaussian => gaussian_blur(x, kernel_size),
        DissolveMethod::Median => median_blur(x, kernel_size),
        other => Err(crate::error::validation(format!(
            "{other:?} is not a heuristic blur"
        ))),
    }
}
