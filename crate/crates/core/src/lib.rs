//! Federated averaging with user-level differential privacy and adaptive
//! quantile clipping.
//!
//! The clip bound follows a chosen quantile of the client update norms. It
//! is estimated online from a noisy count of unclipped updates, under the
//! same privacy guarantee as the model updates.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod calibration;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod models;
pub mod quantile;
pub mod rng;

pub use accountant::{
    compose_and_convert, default_orders, epsilon_for, rdp_per_step, solve_noise_for_epsilon,
    AccountantState, Conversion, PrivacySpent,
};
pub use calibration::{default_sigma_b, derive_update_noise, update_noise_stddev, PrivacyParams};
pub use data::{ClientDataset, SyntheticKind, SyntheticTaskSpec, TaskData};
pub use error::{Error, Result};
pub use federation::{
    aggregate_round, clip_delta, local_fedavg, poisson_sample, server_step, train, ClientUpdate,
    ClipMode, RoundRecord, ServerState, TrainOptions, TrainOutput,
};
pub use models::{loss_and_gradient, Example, LossKind, ModelKind, ModelSpec, ParamVector};
pub use quantile::{
    batch_fraction_below, quantile_loss, quantile_loss_derivative, update_clip, ClipState,
    QuantileConfig, UpdateRule,
};
pub use rng::{RngStream, StreamLabel};
