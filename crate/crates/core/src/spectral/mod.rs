//! Landmark-patch spectral descriptors and linear SVM action-unit detection.
//!
//! Each landmark owns a patch of the template topology (a k-ring grown until
//! it holds at least `tau + 5` vertices). The patch's combinatorial graph
//! Laplacian is eigendecomposed once per topology; the `tau` lowest-frequency
//! eigenvectors form a basis onto which the x, y and z coordinate signals
//! of the patch are projected.
//!
//! Feature layout (`FEATURE_LAYOUT`): landmark-major, then channel
//! (x, y, z), then spectral index, i.e. entry
//! `(k * 3 + channel) * tau + j` holds `phi_j . coord_channel(patch_k)`.

mod detect;
mod laplacian;
mod svm;

pub use detect::{detect_aus, mesh_features, AuClassifier, ClassifierBank, FEATURE_LAYOUT};
pub use laplacian::{
    grow_patch, patch_laplacian, patch_vertices, project_patch, spectral_embedding, PatchSpectrum,
    SpectralBasis,
};
pub use svm::{train_au_svm, train_linear_svm, LinearSvm, SvmOptions};
