//! Identity × expression tensor factorization.
//!
//! A [`ShapeTensor`] has modes `(vertex, identity, expression)` with sizes
//! `(3N, I, E)`. The vertex mode is the flattened mesh `(x1, y1, z1, x2, ...)`.
//! Storage is column-major: entry `(v, i, e)` lives at `v + 3N * (i + I * e)`.
//!
//! The mode-`k` unfolding puts mode `k` on the rows and lists the remaining
//! modes as columns in the same column-major order. For a 2×2×2 tensor with
//! `t[v,i,e] = 100v + 10i + e`:
//!
//! ```text
//! mode-1 (vertex):      [  0   10    1   11 ]   columns (i,e) = (0,0) (1,0) (0,1) (1,1)
//!                       [100  110  101  111 ]
//! mode-2 (identity):    [  0  100    1  101 ]   columns (v,e) = (0,0) (1,0) (0,1) (1,1)
//!                       [ 10  110   11  111 ]
//! mode-3 (expression):  [  0  100   10  110 ]   columns (v,i) = (0,0) (1,0) (0,1) (1,1)
//!                       [  1  101   11  111 ]
//! ```

mod analysis;
mod model;
mod tensor;

pub use analysis::{parallel_analysis, variance_truncation};
pub use model::{hosvd, BilinearModel, EncodeMode, Encoding, ModelMeta};
pub use tensor::{assemble_tensor, IdentityKind, IdentityLabel, MeshGrid, ShapeTensor};
