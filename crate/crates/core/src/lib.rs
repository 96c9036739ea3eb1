pub mod affiner;
pub mod autodiff;
pub mod backbone;
pub mod diffusion;
mod error;
pub mod nn;
pub mod registry;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};

// The guide's snippets run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/affiner.md")]
    mod affiner {}
    #[doc = include_str!("../../../book/src/backbones.md")]
    mod backbones {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/registry.md")]
    mod registry {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
