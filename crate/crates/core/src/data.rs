//! Client datasets: synthetic heterogeneous tasks and CSV ingestion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Example;
use crate::rng::{RngStream, StreamLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub user_id: String,
    pub examples: Vec<Example>,
    pub batch_size: usize,
}

impl ClientDataset {
    pub fn new(user_id: impl Into<String>, examples: Vec<Example>, batch_size: usize) -> Result<Self> {
        let user_id = user_id.into();
        if examples.is_empty() {
            return Err(Error::InvalidArgument(format!("client {user_id} has no examples")));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let dim = examples[0].features.len();
        if examples.iter().any(|e| e.features.len() != dim) {
            return Err(Error::InvalidArgument(format!(
                "client {user_id} has ragged feature vectors"
            )));
        }
        Ok(Self {
            user_id,
            examples,
            batch_size,
        })
    }

    /// Contiguous batches in example order; the last one may be short.
    pub fn batches(&self) -> std::slice::Chunks<'_, Example> {
        self.examples.chunks(self.batch_size)
    }

    pub fn feature_dim(&self) -> usize {
        self.examples[0].features.len()
    }
}

/// Training clients (sorted by user id) plus pooled held-out examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub clients: Vec<ClientDataset>,
    pub eval: Vec<Example>,
}

impl TaskData {
    pub fn new(mut clients: Vec<ClientDataset>, eval: Vec<Example>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::InvalidArgument("task has no training clients".into()));
        }
        if eval.is_empty() {
            return Err(Error::InvalidArgument("task has no held-out examples".into()));
        }
        clients.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        if clients.windows(2).any(|w| w[0].user_id == w[1].user_id) {
            return Err(Error::InvalidArgument("duplicate user ids".into()));
        }
        let dim = clients[0].feature_dim();
        if clients.iter().any(|c| c.feature_dim() != dim)
            || eval.iter().any(|e| e.features.len() != dim)
        {
            return Err(Error::InvalidArgument(
                "feature dimension differs across clients".into(),
            ));
        }
        Ok(Self { clients, eval })
    }

    pub fn feature_dim(&self) -> usize {
        self.clients[0].feature_dim()
    }

    /// Splits ingested clients into training clients and a pooled held-out
    /// set: every tenth client in id order (positions 9, 19, ...) is held
    /// out. At least one client is kept for each side.
    pub fn holdout_every_tenth(mut clients: Vec<ClientDataset>) -> Result<Self> {
        if clients.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least two users to hold one out".into(),
            ));
        }
        clients.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for (pos, c) in clients.into_iter().enumerate() {
            if pos % 10 == 9 {
                eval.extend(c.examples);
            } else {
                train.push(c);
            }
        }
        if eval.is_empty() {
            // fewer than ten users: hold out the last one
            eval = train.pop().map(|c| c.examples).unwrap_or_default();
        }
        Self::new(train, eval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Linear target plus Gaussian noise.
    Regression,
    /// Binary labels drawn from a logistic model.
    Classification,
}

/// Generator settings for a synthetic federated task.
///
/// A single global weight vector defines the task. Each user draws a scale
/// factor log-uniform in `[1/spread, spread]` that multiplies its features,
/// so update norms vary across users by orders of magnitude while the
/// optimum is shared. `param_jitter > 0` additionally perturbs each user's
/// weights around the global ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub num_users: usize,
    pub eval_users: usize,
    pub min_examples: usize,
    pub max_examples: usize,
    pub input_dim: usize,
    pub kind: SyntheticKind,
    pub spread: f64,
    pub param_jitter: f64,
    pub noise_std: f64,
    pub batch_size: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_users: 1000,
            eval_users: 100,
            min_examples: 10,
            max_examples: 40,
            input_dim: 10,
            kind: SyntheticKind::Classification,
            spread: 10.0,
            param_jitter: 0.0,
            noise_std: 0.1,
            batch_size: 10,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::InvalidArgument("num_users must be >= 1".into()));
        }
        if self.eval_users == 0 {
            return Err(Error::InvalidArgument("eval_users must be >= 1".into()));
        }
        if self.min_examples == 0 || self.min_examples > self.max_examples {
            return Err(Error::InvalidArgument(
                "need 1 <= min_examples <= max_examples".into(),
            ));
        }
        if self.input_dim == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "input_dim and batch_size must be positive".into(),
            ));
        }
        if !(self.spread >= 1.0 && self.spread.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spread must be >= 1, got {}",
                self.spread
            )));
        }
        if !(self.param_jitter >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "param_jitter and noise_std must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Index of the DataGen stream that produces the global weights. User `u`
/// draws from index `u`.
const GLOBAL_STREAM_INDEX: u64 = u64::MAX;

fn global_weights(spec: &SyntheticTaskSpec) -> Vec<f64> {
    let mut rng = RngStream::new(spec.seed, StreamLabel::DataGen, GLOBAL_STREAM_INDEX);
    let scale = match spec.kind {
        SyntheticKind::Regression => 1.0,
        SyntheticKind::Classification => 3.0,
    } / (spec.input_dim as f64).sqrt();
    // last entry is the bias
    (0..=spec.input_dim).map(|_| scale * rng.standard_normal()).collect()
}

fn generate_user(spec: &SyntheticTaskSpec, global: &[f64], index: u64) -> Vec<Example> {
    let mut rng = RngStream::new(spec.seed, StreamLabel::DataGen, index);
    let log_spread = spec.spread.ln();
    let scale = libm::exp(rng.uniform_range(-log_spread, log_spread));
    let jitter = spec.param_jitter / (spec.input_dim as f64).sqrt();
    let weights: Vec<f64> = global
        .iter()
        .map(|w| w + jitter * rng.standard_normal())
        .collect();
    let count = rng.uniform_int(spec.min_examples as u64, spec.max_examples as u64) as usize;
    let d = spec.input_dim;
    (0..count)
        .map(|_| {
            let features: Vec<f64> = (0..d).map(|_| scale * rng.standard_normal()).collect();
            let signal = weights[d]
                + features
                    .iter()
                    .zip(&weights[..d])
                    .map(|(x, w)| x * w)
                    .sum::<f64>();
            let target = match spec.kind {
                SyntheticKind::Regression => signal + spec.noise_std * rng.standard_normal(),
                SyntheticKind::Classification => {
                    let p = 1.0 / (1.0 + libm::exp(-signal));
                    if rng.bernoulli(p) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            Example::new(features, target)
        })
        .collect()
}

pub fn synthetic_user_id(index: usize) -> String {
    format!("u{index:07}")
}

/// Training clients for a synthetic task, deterministic in `spec.seed`.
pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let global = global_weights(spec);
    (0..spec.num_users)
        .map(|u| {
            ClientDataset::new(
                synthetic_user_id(u),
                generate_user(spec, &global, u as u64),
                spec.batch_size,
            )
        })
        .collect()
}

/// Held-out users, generated from indices after the training users.
pub fn generate_synthetic_eval(spec: &SyntheticTaskSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let global = global_weights(spec);
    (spec.num_users..spec.num_users + spec.eval_users)
        .map(|u| {
            ClientDataset::new(
                synthetic_user_id(u),
                generate_user(spec, &global, u as u64),
                spec.batch_size,
            )
        })
        .collect()
}

pub fn synthetic_task_data(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    let clients = generate_synthetic_task(spec)?;
    let eval = generate_synthetic_eval(spec)?
        .into_iter()
        .flat_map(|c| c.examples)
        .collect();
    TaskData::new(clients, eval)
}

/// Reads a user-partitioned CSV. Every column other than the user and
/// target columns is a numeric feature, in header order. Clients come back
/// sorted by user id; examples keep file order within a user.
pub fn ingest_csv(
    path: &Path,
    user_column: &str,
    target_column: &str,
    batch_size: usize,
) -> Result<Vec<ClientDataset>> {
    let ingest_err = |row: usize, message: String| Error::Ingest {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ingest_err(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| ingest_err(1, e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingest_err(1, format!("missing column `{name}`")))
    };
    let user_idx = find(user_column)?;
    let target_idx = find(target_column)?;
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != user_idx && i != target_idx)
        .collect();

    let mut users: BTreeMap<String, Vec<Example>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        // line 1 is the header
        let row = i + 2;
        let record = record.map_err(|e| ingest_err(row, e.to_string()))?;
        let parse = |col: usize| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            cell.trim().parse::<f64>().map_err(|_| {
                ingest_err(
                    row,
                    format!("non-numeric value {cell:?} in column `{}`", &headers[col]),
                )
            })
        };
        let target = parse(target_idx)?;
        let features = feature_idx.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?;
        if features.iter().any(|v| !v.is_finite()) || !target.is_finite() {
            return Err(ingest_err(row, "non-finite value".into()));
        }
        let user = record.get(user_idx).unwrap_or("").to_string();
        users.entry(user).or_default().push(Example::new(features, target));
    }
    if users.is_empty() {
        return Err(ingest_err(1, "file has no data rows".into()));
    }
    users
        .into_iter()
        .map(|(user, examples)| ClientDataset::new(user, examples, batch_size))
        .collect()
}

/// Writes clients as CSV with columns `user_id, x0..x{d-1}, target`.
/// Floats use the shortest representation that parses back exactly.
pub fn write_csv<W: Write>(writer: W, clients: &[ClientDataset]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let dim = clients.first().map(|c| c.feature_dim()).unwrap_or(0);
    let mut header = vec!["user_id".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.push("target".into());
    out.write_record(&header)?;
    for client in clients {
        for ex in &client.examples {
            let mut row = Vec::with_capacity(dim + 2);
            row.push(client.user_id.clone());
            row.extend(ex.features.iter().map(|v| v.to_string()));
            row.push(ex.target.to_string());
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_users_three_rows() {
        let f = write_tmp("uid,a,b,y\nalice,1,2,0\nbob,3,4,1\nalice,5,6,1\nbob,7,8,0\nalice,9,10,1\nbob,1,1,1\n");
        let clients = ingest_csv(f.path(), "uid", "y", 2).unwrap();
        assert_eq!(clients.len(), 2);
        assert_eq!(clients[0].user_id, "alice");
        assert_eq!(clients[0].examples.len(), 3);
        assert_eq!(clients[0].examples[1].features, vec![5.0, 6.0]);
        assert_eq!(clients[1].examples.len(), 3);
        let sizes: Vec<usize> = clients[0].batches().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn header_only_is_empty_error() {
        let f = write_tmp("uid,a,y\n");
        let err = ingest_csv(f.path(), "uid", "y", 2).unwrap_err();
        assert!(err.to_string().contains("no data rows"), "{err}");
    }

    #[test]
    fn missing_column_and_bad_cell() {
        let f = write_tmp("uid,a,y\nu,1,2\n");
        let err = ingest_csv(f.path(), "user", "y", 2).unwrap_err();
        assert!(err.to_string().contains("missing column `user`"));
        let f = write_tmp("uid,a,y\nu,1,2\nu,abc,3\n");
        let err = ingest_csv(f.path(), "uid", "y", 2).unwrap_err();
        match err {
            Error::Ingest { row, message, .. } => {
                assert_eq!(row, 3);
                assert!(message.contains("`a`"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticTaskSpec {
            num_users: 20,
            ..SyntheticTaskSpec::default()
        };
        assert_eq!(generate_synthetic_task(&spec).unwrap(), generate_synthetic_task(&spec).unwrap());
        let other = SyntheticTaskSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synthetic_task(&spec).unwrap(), generate_synthetic_task(&other).unwrap());
    }

    #[test]
    fn spread_one_is_homogeneous() {
        // with no scale spread and no jitter every user's feature scale is 1
        let spec = SyntheticTaskSpec {
            num_users: 200,
            spread: 1.0,
            min_examples: 30,
            max_examples: 30,
            ..SyntheticTaskSpec::default()
        };
        let clients = generate_synthetic_task(&spec).unwrap();
        let rms: Vec<f64> = clients
            .iter()
            .map(|c| {
                let s: f64 = c.examples.iter().flat_map(|e| &e.features).map(|x| x * x).sum();
                (s / (30.0 * 10.0)).sqrt()
            })
            .collect();
        let mean = rms.iter().sum::<f64>() / rms.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(rms.iter().all(|r| (r - 1.0).abs() < 0.3));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = SyntheticTaskSpec {
            num_users: 15,
            kind: SyntheticKind::Regression,
            ..SyntheticTaskSpec::default()
        };
        let clients = generate_synthetic_task(&spec).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&mut f, &clients).unwrap();
        let back = ingest_csv(f.path(), "user_id", "target", spec.batch_size).unwrap();
        assert_eq!(back, clients);
    }

    #[test]
    fn holdout_split() {
        let spec = SyntheticTaskSpec {
            num_users: 25,
            ..SyntheticTaskSpec::default()
        };
        let clients = generate_synthetic_task(&spec).unwrap();
        let task = TaskData::holdout_every_tenth(clients).unwrap();
        assert_eq!(task.clients.len(), 23);
    }

    #[test]
    fn invalid_specs() {
        let bad = SyntheticTaskSpec { spread: 0.5, ..SyntheticTaskSpec::default() };
        assert!(bad.validate().is_err());
        let bad = SyntheticTaskSpec { min_examples: 5, max_examples: 2, ..SyntheticTaskSpec::default() };
        assert!(bad.validate().is_err());
    }
}
