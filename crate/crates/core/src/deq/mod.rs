//! The weight-tied layer, fixed-point solvers, and unrolled gradients.

mod model;
mod phantom;
mod solver;

pub use model::{spectral_norm, DeqModel, ModelGrads, ModelNodes, Nonlinearity, ParamName};
pub use phantom::{phantom_grad, phantom_grad_from, PhantomGrad, TailLoss};
pub use solver::{
    rel_error, solve, solve_anderson, solve_naive, solve_states, Anderson, DynamicsTrace,
    Residual, SolverConfig, SolverMethod, Stepper,
};
pub(crate) use solver::run_dynamics;
