//! Synthetic bilevel problems with known ground truth.

pub mod hyperrep;
pub mod partition;
pub mod quadratic;

pub use hyperrep::{make_hyperrep, HyperRepProblem, HyperRepSpec};
pub use partition::{partition, PartitionMode};
pub use quadratic::{
    closed_form_hypergradient, closed_form_lower_opt, make_quadratic, upper_objective, NoiseSpec,
    QuadraticClient, QuadraticInstance, QuadraticSpec,
};
