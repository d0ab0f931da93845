//! Federated averaging with server momentum, user-level DP noise, and an
//! adaptive clipping bound that tracks a quantile of the update norms.
//!
//! One round:
//! 1. Poisson-sample clients with probability `q`.
//! 2. Each sampled client runs local SGD from the current model, clips its
//!    delta to `C`, and reports the shifted bit (-0.5 unclipped, +0.5
//!    clipped).
//! 3. The server sums deltas and bits in user-id order, adds Gaussian noise
//!    to each sum, and divides by the expected cohort size `qn`.
//! 4. Momentum and model step use the noisy average; the clip moves by a
//!    geometric step on the noisy unclipped fraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{update_noise_stddev, PrivacyParams};
use crate::data::{ClientDataset, TaskData};
use crate::error::{Error, Result};
use crate::models::{evaluate, init_params, loss_and_gradient, ModelSpec, ParamVector};
use crate::quantile::{update_clip, ClipState, QuantileConfig};
use crate::rng::{RngStream, StreamLabel};

/// A clipped client delta and its shifted clip indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub delta: ParamVector,
    /// -0.5 when the pre-clip norm was within the bound, +0.5 otherwise.
    pub bit_shifted: f64,
    pub preclip_norm: f64,
}

impl ClientUpdate {
    pub fn unclipped(&self) -> bool {
        self.bit_shifted < 0.0
    }
}

/// Scales `delta` down to L2 norm `c` if it is longer. A norm exactly equal
/// to `c` counts as unclipped.
pub fn clip_delta(mut delta: ParamVector, c: f64) -> ClientUpdate {
    let norm = delta.l2_norm();
    if norm <= c {
        ClientUpdate {
            delta,
            bit_shifted: -0.5,
            preclip_norm: norm,
        }
    } else {
        delta.scale(c / norm);
        ClientUpdate {
            delta,
            bit_shifted: 0.5,
            preclip_norm: norm,
        }
    }
}

/// Local training on one client: `epochs` passes of minibatch SGD from
/// `theta0`, then clipping of the resulting delta.
pub fn local_fedavg(
    client: &ClientDataset,
    theta0: &ParamVector,
    learning_rate: f64,
    c: f64,
    spec: &ModelSpec,
    epochs: usize,
    round: u64,
) -> Result<ClientUpdate> {
    if !(learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "client learning rate must be positive, got {learning_rate}"
        )));
    }
    let mut theta = theta0.clone();
    for _ in 0..epochs {
        for batch in client.batches() {
            let (loss, grad) = loss_and_gradient(spec, &theta, batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence {
                    round,
                    client: Some(client.user_id.clone()),
                    message: format!("non-finite local loss {loss}"),
                });
            }
            theta.axpy(-learning_rate, &grad);
        }
    }
    let delta = theta.sub(theta0);
    if !delta.is_finite() {
        return Err(Error::Divergence {
            round,
            client: Some(client.user_id.clone()),
            message: "non-finite local update".into(),
        });
    }
    Ok(clip_delta(delta, c))
}

/// Indices of clients included by independent coin flips with probability
/// `q`, in ascending order.
pub fn poisson_sample(population: usize, q: f64, rng: &mut RngStream) -> Vec<usize> {
    (0..population).filter(|_| rng.bernoulli(q)).collect()
}

/// Noisy averages produced by the server from one round of updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub delta_tilde: ParamVector,
    /// Noisy unclipped fraction, `0.5 - (sum of shifted bits + noise) / qn`.
    pub b_tilde: f64,
}

/// Sums updates in the given order, adds Gaussian noise to both sums and
/// divides by the expected cohort size. The count sum has sensitivity 0.5
/// because each client contributes +-0.5.
pub fn aggregate_round(
    updates: &[ClientUpdate],
    params: &PrivacyParams,
    c: f64,
    dim: usize,
    update_noise: &mut RngStream,
    count_noise: &mut RngStream,
) -> Aggregate {
    let qn = params.expected_clients();
    let mut sum = ParamVector::zeros(dim);
    let mut bits = 0.0;
    for u in updates {
        sum.axpy(1.0, &u.delta);
        bits += u.bit_shifted;
    }
    let sigma_delta = update_noise_stddev(params.z_delta, c);
    sum.axpy(1.0, &update_noise.gaussian_vector(dim, sigma_delta));
    sum.scale(1.0 / qn);
    let noisy_bits = bits + count_noise.gaussian(params.sigma_b);
    Aggregate {
        delta_tilde: sum,
        // unclipped clients send -0.5, so the unclipped fraction is
        // 0.5 minus the noisy average
        b_tilde: 0.5 - noisy_bits / qn,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Constant bound. `f64::INFINITY` disables clipping.
    Fixed(f64),
    Adaptive(QuantileConfig),
}

impl ClipMode {
    pub fn initial_clip(&self) -> f64 {
        match self {
            ClipMode::Fixed(c) => *c,
            ClipMode::Adaptive(cfg) => cfg.c0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: ParamVector,
    pub momentum: ParamVector,
    pub clip: ClipState,
    pub round: u64,
    pub eta_s: f64,
    pub beta: f64,
}

impl ServerState {
    pub fn new(theta: ParamVector, clip: f64, eta_s: f64, beta: f64) -> Self {
        let dim = theta.dim();
        Self {
            theta,
            momentum: ParamVector::zeros(dim),
            clip: ClipState { c: clip, round: 0 },
            round: 0,
            eta_s,
            beta,
        }
    }
}

/// Server update from privatized quantities only.
pub fn server_step(
    state: &ServerState,
    delta_tilde: &ParamVector,
    b_tilde: f64,
    mode: &ClipMode,
) -> Result<ServerState> {
    let mut momentum = state.momentum.clone();
    momentum.scale(state.beta);
    momentum.axpy(1.0 - state.beta, delta_tilde);
    let mut theta = state.theta.clone();
    theta.axpy(state.eta_s, &momentum);
    if !theta.is_finite() {
        return Err(Error::Divergence {
            round: state.round,
            client: None,
            message: "non-finite model parameters after server step".into(),
        });
    }
    let clip = match mode {
        ClipMode::Fixed(_) => ClipState {
            c: state.clip.c,
            round: state.clip.round + 1,
        },
        ClipMode::Adaptive(cfg) => update_clip(state.clip, b_tilde, cfg),
    };
    if !(clip.c > 0.0) || clip.c.is_nan() {
        return Err(Error::Divergence {
            round: state.round,
            client: None,
            message: format!("clip bound became {}", clip.c),
        });
    }
    Ok(ServerState {
        theta,
        momentum,
        clip,
        round: state.round + 1,
        eta_s: state.eta_s,
        beta: state.beta,
    })
}

/// Per-round metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub clip_before: f64,
    pub clip_after: f64,
    /// Fraction of sampled clients left unclipped; `None` on empty rounds.
    pub frac_below_exact: Option<f64>,
    pub frac_below_noisy: f64,
    pub mean_preclip_norm: Option<f64>,
    pub eval_loss: Option<f64>,
    pub eval_metric: Option<f64>,
    pub sampled_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub model: ModelSpec,
    pub rounds: u64,
    pub client_lr: f64,
    pub local_epochs: usize,
    pub eta_s: f64,
    pub beta: f64,
    pub clip: ClipMode,
    pub privacy: PrivacyParams,
    pub master_seed: u64,
    pub eval_period: u64,
    /// Threads for client fan-out; 1 runs inline.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ParamVector,
    pub records: Vec<RoundRecord>,
}

fn run_clients(
    task: &TaskData,
    sampled: &[usize],
    theta: &ParamVector,
    opts: &TrainOptions,
    clip: f64,
    round: u64,
) -> Result<Vec<ClientUpdate>> {
    let work = |&i: &usize| {
        local_fedavg(
            &task.clients[i],
            theta,
            opts.client_lr,
            clip,
            &opts.model,
            opts.local_epochs,
            round,
        )
    };
    if opts.workers > 1 {
        sampled.par_iter().map(work).collect()
    } else {
        sampled.iter().map(work).collect()
    }
}

/// Runs one round and returns the next server state with its record.
pub fn run_round(
    task: &TaskData,
    state: &ServerState,
    opts: &TrainOptions,
) -> Result<(ServerState, RoundRecord)> {
    let t = state.round;
    let mut sampling = RngStream::new(opts.master_seed, StreamLabel::Sampling, t);
    let mut update_noise = RngStream::new(opts.master_seed, StreamLabel::UpdateNoise, t);
    let mut count_noise = RngStream::new(opts.master_seed, StreamLabel::CountNoise, t);

    let sampled = poisson_sample(task.clients.len(), opts.privacy.q, &mut sampling);
    if sampled.is_empty() {
        log::warn!("round {t}: no clients sampled, applying a noise-only update");
    }
    let clip = state.clip.c;
    let updates = run_clients(task, &sampled, &state.theta, opts, clip, t)?;
    let agg = aggregate_round(
        &updates,
        &opts.privacy,
        clip,
        state.theta.dim(),
        &mut update_noise,
        &mut count_noise,
    );
    let next = server_step(state, &agg.delta_tilde, agg.b_tilde, &opts.clip)?;

    let count = updates.len();
    let (frac, mean_norm) = if count == 0 {
        (None, None)
    } else {
        let unclipped = updates.iter().filter(|u| u.unclipped()).count();
        let norm_sum: f64 = updates.iter().map(|u| u.preclip_norm).sum();
        (
            Some(unclipped as f64 / count as f64),
            Some(norm_sum / count as f64),
        )
    };
    let record = RoundRecord {
        round: t,
        clip_before: clip,
        clip_after: next.clip.c,
        frac_below_exact: frac,
        frac_below_noisy: agg.b_tilde,
        mean_preclip_norm: mean_norm,
        eval_loss: None,
        eval_metric: None,
        sampled_count: count as u64,
    };
    Ok((next, record))
}

pub fn initial_server_state(opts: &TrainOptions) -> ServerState {
    let mut init_rng = RngStream::new(opts.master_seed, StreamLabel::ModelInit, 0);
    let theta = init_params(&opts.model, &mut init_rng);
    ServerState::new(theta, opts.clip.initial_clip(), opts.eta_s, opts.beta)
}

pub fn validate_options(opts: &TrainOptions, task: &TaskData) -> Result<()> {
    opts.model.validate()?;
    if task.feature_dim() != opts.model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: opts.model.input_dim,
            actual: task.feature_dim(),
            context: "task features vs model input_dim",
        });
    }
    if opts.eval_period == 0 {
        return Err(Error::InvalidArgument("eval_period must be >= 1".into()));
    }
    if opts.local_epochs == 0 {
        return Err(Error::InvalidArgument("local_epochs must be >= 1".into()));
    }
    if !(opts.beta >= 0.0 && opts.beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1), got {}", opts.beta)));
    }
    if !(opts.eta_s > 0.0) || !(opts.client_lr > 0.0) {
        return Err(Error::InvalidArgument("learning rates must be positive".into()));
    }
    match &opts.clip {
        ClipMode::Fixed(c) if !(*c > 0.0) => {
            return Err(Error::InvalidArgument(format!("fixed clip must be positive, got {c}")))
        }
        ClipMode::Adaptive(cfg) => cfg.validate()?,
        _ => {}
    }
    Ok(())
}

/// Runs `opts.rounds` rounds of training. Evaluation on the held-out
/// examples happens every `eval_period` rounds and after the last round.
pub fn train(opts: &TrainOptions, task: &TaskData) -> Result<TrainOutput> {
    validate_options(opts, task)?;
    let mut state = initial_server_state(opts);
    let mut records = Vec::with_capacity(opts.rounds as usize);
    let pool = if opts.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.workers)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    for t in 0..opts.rounds {
        let (next, mut record) = match &pool {
            Some(pool) => pool.install(|| run_round(task, &state, opts))?,
            None => run_round(task, &state, opts)?,
        };
        state = next;
        if (t + 1) % opts.eval_period == 0 || t + 1 == opts.rounds {
            let eval = evaluate(&opts.model, &state.theta, &task.eval)?;
            if !eval.loss.is_finite() {
                return Err(Error::Divergence {
                    round: t,
                    client: None,
                    message: format!("non-finite evaluation loss {}", eval.loss),
                });
            }
            record.eval_loss = Some(eval.loss);
            record.eval_metric = Some(eval.metric);
        }
        records.push(record);
    }
    Ok(TrainOutput {
        params: state.theta,
        records,
    })
}
