//! Pair-matching convolutional network engine for person re-identification.
//!
//! The crate is `no_std` (with `alloc`) and holds everything numerical:
//! dense tensor kernels with forward/backward passes and naive reference
//! oracles, a small layer-graph runtime with shared parameters and a
//! finite-difference gradient checker, the pyramid matching model itself,
//! dataset splitting / pair sampling / augmentation, an SGD trainer with
//! hard negative mining, and single-shot CMC evaluation.
//!
//! File formats, directory IO and the command line live in the companion
//! `ppmn` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tensor};

pub(crate) mod mathf {
    //! Float helpers routed through `libm` so the crate stays `no_std`.

    #[inline]
    pub fn exp(x: f32) -> f32 {
        libm::expf(x)
    }

    #[inline]
    pub fn ln(x: f32) -> f32 {
        libm::logf(x)
    }

    #[inline]
    pub fn powf(x: f32, y: f32) -> f32 {
        libm::powf(x, y)
    }

    #[inline]
    pub fn sqrt(x: f32) -> f32 {
        libm::sqrtf(x)
    }

    #[inline]
    pub fn floor(x: f32) -> f32 {
        libm::floorf(x)
    }

    #[inline]
    pub fn round(x: f32) -> f32 {
        libm::roundf(x)
    }

    #[inline]
    pub fn abs(x: f32) -> f32 {
        libm::fabsf(x)
    }
}

/// splitmix64 step, used to derive independent RNG streams from one seed.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
