//! Barycentric mapping between two mesh topologies.
//!
//! Every vertex of the target topology is expressed as a convex combination
//! of the three corners of its closest source triangle. Applying the map to
//! any geometry of the source topology (a deformation, a whole face)
//! resamples it onto the target topology with a single sparse product.

mod closest;
mod grid;
mod map;

pub use closest::{closest_point_on_triangle, ClosestPoint};
pub use grid::TriangleGrid;
pub use map::{apply_map, build_map, build_map_exhaustive, BarycentricMap, MapEntry, MapOptions};
