//! Deep networks trained one dictionary layer at a time.
//!
//! Every representation layer is a dictionary `D` with codes `Z` such that the
//! layer input is approximately `D Z`. Layers are chained through an invertible
//! element-wise activation: the codes of layer `k` are passed through the
//! inverse activation and become the data of layer `k + 1`. The deepest layer
//! is trained jointly with a linear classifier (label-consistent dictionary
//! learning), which turns the stack into a classifier.
//!
//! The crate is `no_std` (it needs `alloc`). The default `std` feature only
//! enables runtime CPU feature detection in the matrix kernels and `std`
//! error impls.
//!
//! Modules:
//! - [`numerics`]: dense matrices, least squares, seeded Gaussian draws.
//! - [`activation`]: activations, their inverses and the inversion guard.
//! - [`dict_layer`]: unsupervised single-layer dictionary learning.
//! - [`supervised`]: logistic supervised layer and class-specific dictionaries.
//! - [`lcksvd`]: the joint dictionary/classifier final layer.
//! - [`deep_net`]: greedy training, encoding, prediction and metrics.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(a > b)` comparisons deliberately treat NaN as failing.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod activation;
pub mod deep_net;
pub mod dict_layer;
mod error;
pub mod lcksvd;
pub mod numerics;
pub mod supervised;

pub use activation::{ActivationKind, InversionGuard};
pub use deep_net::{
    encode, evaluate, predict, train_ddnn, DdnnFit, Metrics, NetworkLayer, NetworkSpec,
    Prediction, TestCoder, TrainedNetwork, Variant,
};
pub use dict_layer::{Coder, DictionarySolver, LayerSpec, TrainedLayer};
pub use error::{Error, Result};
pub use lcksvd::{AtomAllocation, DiscriminativeCode, FinalLayerModel, TargetMatrix};
pub use numerics::{Matrix, RngSeed};
