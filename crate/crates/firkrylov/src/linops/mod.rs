//! Matrix-free linear operators.
//!
//! The model `y = Phi theta + e` is accessed exclusively through the action of
//! the strictly lower triangular Toeplitz matrix `Phi` (FFT convolution, see
//! [`ToeplitzOperator`]), the structured kernel Cholesky factor `L(beta)` with
//! `K = L L'` (see [`KernelFactor`]), and their composition
//! `A = Phi K Phi'` (see [`CompositeOperator`]). All operators are immutable
//! after construction except for atomic application counters, so they can be
//! shared freely across threads.

mod composite;
mod kernel;
mod system;
mod toeplitz;

pub use composite::{dense_materialize, CompositeOperator, LinearOp, DENSE_CAP};
pub use kernel::{KernelFactor, KernelKind, KernelParams};
pub use system::SystemData;
pub use toeplitz::ToeplitzOperator;
