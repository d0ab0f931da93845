mod common;

use adaclip_core::data::{synthetic_task_data, ClientDataset, SyntheticKind, SyntheticTaskSpec, TaskData};
use adaclip_core::experiment::{metrics_csv_string, run};
use adaclip_core::federation::{
    initial_server_state, local_fedavg, poisson_sample, train, ClipMode, TrainOptions,
};
use adaclip_core::models::{loss_and_gradient, Example, ModelSpec, ParamVector};
use adaclip_core::quantile::QuantileConfig;
use adaclip_core::rng::{RngStream, StreamLabel};
use adaclip_core::PrivacyParams;
use common::{golden_config, golden_config_names};

#[test]
fn runs_are_deterministic_across_worker_counts() {
    for name in golden_config_names() {
        let cfg = golden_config(name);
        let task = adaclip_core::experiment::load_task(&cfg).unwrap();
        let a = run(&cfg, &task).unwrap();
        let b = run(&cfg, &task).unwrap();
        let mut parallel = cfg.clone();
        parallel.workers = 4;
        let c = run(&parallel, &task).unwrap();
        assert_eq!(metrics_csv_string(&a.records), metrics_csv_string(&b.records), "{name}");
        assert_eq!(metrics_csv_string(&a.records), metrics_csv_string(&c.records), "{name}");
        assert_eq!(a.params, c.params);
    }
}

fn small_task(kind: SyntheticKind, seed: u64) -> TaskData {
    synthetic_task_data(&SyntheticTaskSpec {
        seed,
        num_users: 60,
        eval_users: 10,
        input_dim: 4,
        kind,
        ..SyntheticTaskSpec::default()
    })
    .unwrap()
}

/// Plain federated averaging with server momentum, written out longhand.
fn reference_fedavg_m(opts: &TrainOptions, task: &TaskData) -> ParamVector {
    let dim = opts.model.param_count();
    let qn = opts.privacy.q * opts.privacy.n as f64;
    let mut theta = initial_server_state(opts).theta.to_vec();
    let mut momentum = vec![0.0; dim];
    for t in 0..opts.rounds {
        let mut rng = RngStream::new(opts.master_seed, StreamLabel::Sampling, t);
        let mut sum = vec![0.0; dim];
        for i in 0..task.clients.len() {
            if !rng.bernoulli(opts.privacy.q) {
                continue;
            }
            let mut local = theta.clone();
            for batch in task.clients[i].batches() {
                let (_, g) = loss_and_gradient(&opts.model, &ParamVector::from(local.clone()), batch).unwrap();
                for k in 0..dim {
                    local[k] += -opts.client_lr * g[k];
                }
            }
            for k in 0..dim {
                sum[k] += local[k] - theta[k];
            }
        }
        for k in 0..dim {
            let avg = sum[k] * (1.0 / qn);
            momentum[k] *= opts.beta;
            momentum[k] += (1.0 - opts.beta) * avg;
            theta[k] += opts.eta_s * momentum[k];
        }
    }
    ParamVector::from(theta)
}

fn options(model: ModelSpec, clip: ClipMode, privacy: PrivacyParams, rounds: u64) -> TrainOptions {
    TrainOptions {
        model,
        rounds,
        client_lr: 0.05,
        local_epochs: 1,
        eta_s: 1.0,
        beta: 0.9,
        clip,
        privacy,
        master_seed: 17,
        eval_period: 5,
        workers: 1,
    }
}

#[test]
fn unclipped_noiseless_run_is_plain_fedavg_m() {
    let task = small_task(SyntheticKind::Classification, 2);
    let privacy = PrivacyParams::fixed(0.25, 60, 0.0).unwrap();
    let opts = options(
        ModelSpec::logistic_regression(4, 1),
        ClipMode::Fixed(f64::INFINITY),
        privacy,
        20,
    );
    let out = train(&opts, &task).unwrap();
    assert_eq!(out.params, reference_fedavg_m(&opts, &task));
}

fn scale_targets(task: &TaskData, s: f64) -> TaskData {
    let scale = |e: &Example| Example::new(e.features.clone(), e.target * s);
    let clients = task
        .clients
        .iter()
        .map(|c| {
            ClientDataset::new(c.user_id.clone(), c.examples.iter().map(scale).collect(), c.batch_size)
                .unwrap()
        })
        .collect();
    TaskData::new(clients, task.eval.iter().map(scale).collect()).unwrap()
}

#[test]
fn linear_regression_training_is_scale_equivariant() {
    let task = small_task(SyntheticKind::Regression, 4);
    let privacy = PrivacyParams::adaptive(0.25, 60, 1.0, 0.75, true).unwrap();
    let clip = QuantileConfig {
        c0: 0.05,
        ..QuantileConfig::new(0.5)
    };
    let base = options(ModelSpec::linear_regression(4), ClipMode::Adaptive(clip), privacy, 25);
    let reference = train(&base, &task).unwrap();
    for s in [0.25, 4.0, 1024.0] {
        let mut scaled = base.clone();
        scaled.clip = ClipMode::Adaptive(QuantileConfig { c0: clip.c0 * s, ..clip });
        let out = train(&scaled, &scale_targets(&task, s)).unwrap();
        let mut expected = reference.params.clone();
        expected.scale(s);
        assert_eq!(out.params, expected, "scale {s}");
        for (r, q) in reference.records.iter().zip(&out.records) {
            assert_eq!(q.clip_after, r.clip_after * s);
            assert_eq!(q.frac_below_exact, r.frac_below_exact);
            assert_eq!(q.frac_below_noisy, r.frac_below_noisy);
        }
    }
}

#[test]
fn synthetic_users_have_widely_spread_update_norms() {
    let spec = SyntheticTaskSpec::default();
    let task = synthetic_task_data(&spec).unwrap();
    let model = ModelSpec::logistic_regression(spec.input_dim, 1);
    let theta = ParamVector::zeros(model.param_count());
    let mut norms: Vec<f64> = task
        .clients
        .iter()
        .map(|c| local_fedavg(c, &theta, 0.05, f64::INFINITY, &model, 1, 0).unwrap().preclip_norm)
        .collect();
    norms.sort_by(f64::total_cmp);
    let ratio = norms[899] / norms[99];
    assert!(ratio >= 5.0, "p90/p10 = {ratio}");
}

#[test]
fn empty_rounds_still_advance() {
    let task = small_task(SyntheticKind::Classification, 6);
    let privacy = PrivacyParams::adaptive(0.001, 60, 0.0, 0.003, true).unwrap();
    let opts = options(
        ModelSpec::logistic_regression(4, 1),
        ClipMode::Adaptive(QuantileConfig::new(0.5)),
        privacy,
        10,
    );
    let out = train(&opts, &task).unwrap();
    assert_eq!(out.records.len(), 10);
    let empty = out.records.iter().filter(|r| r.sampled_count == 0).count();
    assert!(empty > 0);
    for r in out.records.iter().filter(|r| r.sampled_count == 0) {
        assert_eq!(r.frac_below_exact, None);
        assert_eq!(r.mean_preclip_norm, None);
    }
    let mut rng = RngStream::new(17, StreamLabel::Sampling, 0);
    assert_eq!(poisson_sample(60, 0.001, &mut rng).len() as u64, out.records[0].sampled_count);
}
