//! Triangle meshes, ASCII mesh IO, rigid alignment and symmetry augmentation.

mod io;
mod mesh;
mod procrustes;
mod symmetry;

pub use io::{load_landmarks, load_mesh, save_landmarks, save_mesh, MeshFormat};
pub use mesh::{Mesh, Vec3};
pub use procrustes::{generalized_procrustes, procrustes_align, procrustes_points, RigidTransform};
pub use symmetry::{mirror, symmetrize, Plane, SymmetryMap};
