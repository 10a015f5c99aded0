//! Spectral-mapping speech enhancement trained with a mimic loss: a tape
//! autodiff core, STFT features, mapper and classifier models, the training
//! protocol and a synthetic parallel corpus.
//!
//! The guide in `book/` walks through each part; its snippets are compiled
//! as doctests of the modules below.

pub mod dsp;
pub mod io;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
