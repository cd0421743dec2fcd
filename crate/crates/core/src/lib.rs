//! Approximate Bayesian inference for latent Gaussian models.
//!
//! The latent field holds model parameters only; linear predictors are
//! recovered afterwards from selected inverses. See [`fit::fit`] for the
//! end-to-end entry point and the book under `book/` for the methods.

pub mod benchmark;
pub mod coxph;
pub mod data;
pub mod fit;
pub mod inner;
pub mod lgm;
pub mod likelihood;
pub mod model_spec;
pub mod oracle;
pub mod outer;
pub mod posterior;
pub mod simulate;
pub mod sparse;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model-files.md")]
    mod model_files {}
    #[doc = include_str!("../../../book/src/sparse.md")]
    mod sparse {}
    #[doc = include_str!("../../../book/src/gaussian-approximation.md")]
    mod gaussian_approximation {}
    #[doc = include_str!("../../../book/src/hyperparameters.md")]
    mod hyperparameters {}
    #[doc = include_str!("../../../book/src/marginals.md")]
    mod marginals {}
    #[doc = include_str!("../../../book/src/survival.md")]
    mod survival {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
