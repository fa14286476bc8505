//! Core data model: SDE systems, time grids, seeded Wiener paths and the
//! second-order to statespace conversion.

mod statespace;
mod system;
mod variation;
mod wiener;

pub use statespace::{second_order_to_statespace, SecondOrderSystem, CONDITION_LIMIT};
pub(crate) use statespace::condition_number;
pub use system::{jacobian_fd_step, JacobianField, MatrixField, SdeSystem, VectorField};
pub(crate) use system::column_sums;
pub use variation::{variation_statistics, verify_separability, SeparabilityReport, VariationStatistics};
pub use wiener::{
    coarsen, generate_increments, path_increments, standard_normal_from_uniform, standard_normals, SeedInfo,
    TimeGrid, WienerIncrements,
};
