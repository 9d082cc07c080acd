//! Age-of-information scheduling workbench.

pub mod error;
pub mod experiments;
pub mod lagrange;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod sampling;
pub mod sim;
pub mod steady;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/value-iteration.md")]
    mod value_iteration {}
    #[doc = include_str!("../../../book/src/steady-state.md")]
    mod steady_state {}
    #[doc = include_str!("../../../book/src/lagrangian.md")]
    mod lagrangian {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
