//! Principal causal effects for a continuous mediator in closed-cohort
//! stepped-wedge cluster randomized trials.
//!
//! The pipeline runs in four steps: [`simulate`] or load a [`data`] set,
//! [`sampler::fit`] the joint [`model`], run [`calibration::calibrate`] on the
//! sensitivity parameters, then call [`pce::pce_posterior`]. The [`cli`]
//! module drives these steps from the `swpce` binary. The guide in `book/`
//! walks through each step; its code blocks run as doctests.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod model;
pub mod numerics;
pub mod pce;
pub mod sampler;
pub mod simulate;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/sampler.md")]
    struct Sampler;
    #[doc = include_str!("../../../book/src/calibration.md")]
    struct Calibration;
    #[doc = include_str!("../../../book/src/pce.md")]
    struct Pce;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
