//! Dense linear algebra, reverse-mode differentiation, PCA and seeded
//! randomness shared by the model modules.

pub mod gradcheck;
pub mod linalg;
mod matrix;
pub mod pca;
pub mod rng;
pub mod tape;

pub use gradcheck::grad_check;
pub use linalg::{lu_logdet_inverse, LogDetInverse};
pub use matrix::{dot, Matrix};
pub use pca::{pca_2d, Pca2d};
pub use rng::{seeded, ModelRng};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("singular matrix (pivot {pivot} below tolerance)")]
    Singular { pivot: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
