//! Run configuration: a single JSON document, validated and fully
//! defaulted. The resolved config serializes back to the same schema, so an
//! echoed config replays its run exactly.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::calibration::{default_sigma_b, PrivacyParams};
use crate::data::{ingest_csv, synthetic_task_data, SyntheticKind, SyntheticTaskSpec, TaskData};
use crate::error::{Error, Result};
use crate::federation::{train, ClipMode, TrainOptions, TrainOutput};
use crate::models::{LossKind, ModelKind, ModelSpec, DEFAULT_HIDDEN_DIM};
use crate::quantile::{QuantileConfig, UpdateRule, DEFAULT_CLIP_LEARNING_RATE, DEFAULT_INITIAL_CLIP};

pub const DEFAULT_CLIENTS_PER_ROUND: f64 = 100.0;
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_CLIENT_LR: f64 = 0.1;
pub const DEFAULT_EVAL_PERIOD: u64 = 10;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    task: RawTask,
    model: RawModel,
    rounds: u64,
    q: Option<f64>,
    n: Option<u64>,
    eta_c_client: Option<f64>,
    local_epochs: Option<usize>,
    eta_s: Option<f64>,
    beta: Option<f64>,
    clip: Option<RawClip>,
    z: Option<f64>,
    sigma_b: Option<f64>,
    shifted_bits: Option<bool>,
    master_seed: Option<u64>,
    eval_period: Option<u64>,
    workers: Option<usize>,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum RawTask {
    Synthetic(RawSynthetic),
    Csv(RawCsv),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    seed: Option<u64>,
    num_users: Option<usize>,
    eval_users: Option<usize>,
    min_examples: Option<usize>,
    max_examples: Option<usize>,
    input_dim: Option<usize>,
    kind: Option<SyntheticKind>,
    spread: Option<f64>,
    param_jitter: Option<f64>,
    noise_std: Option<f64>,
    batch_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCsv {
    path: PathBuf,
    eval_path: Option<PathBuf>,
    user_column: Option<String>,
    target_column: Option<String>,
    batch_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: ModelKind,
    input_dim: Option<usize>,
    output_dim: Option<usize>,
    hidden_dim: Option<usize>,
    loss: Option<LossKind>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum RawClip {
    Fixed { c: f64 },
    Adaptive(RawAdaptive),
    Unclipped,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdaptive {
    gamma: Option<f64>,
    eta_c: Option<f64>,
    c0: Option<f64>,
    rule: Option<UpdateRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTaskConfig {
    pub path: PathBuf,
    pub eval_path: Option<PathBuf>,
    pub user_column: String,
    pub target_column: String,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskConfig {
    Synthetic(SyntheticTaskSpec),
    Csv(CsvTaskConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipConfig {
    Fixed(f64),
    Unclipped,
    Adaptive(QuantileConfig),
}

impl ClipConfig {
    pub fn mode(&self) -> ClipMode {
        match *self {
            ClipConfig::Fixed(c) => ClipMode::Fixed(c),
            ClipConfig::Unclipped => ClipMode::Fixed(f64::INFINITY),
            ClipConfig::Adaptive(q) => ClipMode::Adaptive(q),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ClipConfig::Fixed(c) => format!("fixed:{c}"),
            ClipConfig::Unclipped => "unclipped".into(),
            ClipConfig::Adaptive(q) => format!("adaptive:{}", q.gamma),
        }
    }

    fn to_value(self) -> Value {
        match self {
            ClipConfig::Fixed(c) => json!({ "fixed": { "c": c } }),
            ClipConfig::Unclipped => json!("unclipped"),
            ClipConfig::Adaptive(q) => json!({
                "adaptive": { "gamma": q.gamma, "eta_c": q.eta_c, "c0": q.c0, "rule": q.rule }
            }),
        }
    }
}

/// A validated, fully defaulted run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelSpec,
    pub rounds: u64,
    pub q: f64,
    pub n: u64,
    pub eta_c_client: f64,
    pub local_epochs: usize,
    pub eta_s: f64,
    pub beta: f64,
    pub clip: ClipConfig,
    pub z: f64,
    pub sigma_b: f64,
    pub shifted_bits: bool,
    pub master_seed: u64,
    pub eval_period: u64,
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    /// Resolved noise split; derived, not part of the input schema.
    pub privacy: PrivacyParams,
}

/// Validation result: the config plus the dotted paths that were filled
/// with defaults.
#[derive(Debug, Clone)]
pub struct Validated {
    pub config: RunConfig,
    pub defaulted: Vec<String>,
}

struct Defaults(Vec<String>);

impl Defaults {
    fn take<T>(&mut self, value: Option<T>, path: &str, default: impl FnOnce() -> T) -> T {
        value.unwrap_or_else(|| {
            self.0.push(path.to_string());
            default()
        })
    }
}

fn positive(value: f64, path: &str) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::config(path, format!("must be positive and finite, got {value}")))
    }
}

/// Parses and validates a JSON config document.
pub fn validate_config(text: &str) -> Result<Validated> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawRunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    resolve(raw)
}

pub fn validate_value(value: &Value) -> Result<Validated> {
    validate_config(&value.to_string())
}

fn resolve(raw: RawRunConfig) -> Result<Validated> {
    let mut d = Defaults(Vec::new());

    let task = match raw.task {
        RawTask::Synthetic(s) => {
            let base = SyntheticTaskSpec::default();
            let spec = SyntheticTaskSpec {
                seed: d.take(s.seed, "task.synthetic.seed", || base.seed),
                num_users: d.take(s.num_users, "task.synthetic.num_users", || base.num_users),
                eval_users: d.take(s.eval_users, "task.synthetic.eval_users", || base.eval_users),
                min_examples: d.take(s.min_examples, "task.synthetic.min_examples", || base.min_examples),
                max_examples: d.take(s.max_examples, "task.synthetic.max_examples", || base.max_examples),
                input_dim: d.take(s.input_dim, "task.synthetic.input_dim", || base.input_dim),
                kind: d.take(s.kind, "task.synthetic.kind", || base.kind),
                spread: d.take(s.spread, "task.synthetic.spread", || base.spread),
                param_jitter: d.take(s.param_jitter, "task.synthetic.param_jitter", || base.param_jitter),
                noise_std: d.take(s.noise_std, "task.synthetic.noise_std", || base.noise_std),
                batch_size: d.take(s.batch_size, "task.synthetic.batch_size", || base.batch_size),
            };
            spec.validate()
                .map_err(|e| Error::config("task.synthetic", e.to_string()))?;
            TaskConfig::Synthetic(spec)
        }
        RawTask::Csv(c) => {
            let batch_size = d.take(c.batch_size, "task.csv.batch_size", || 10);
            if batch_size == 0 {
                return Err(Error::config("task.csv.batch_size", "must be positive"));
            }
            TaskConfig::Csv(CsvTaskConfig {
                path: c.path,
                eval_path: c.eval_path,
                user_column: d.take(c.user_column, "task.csv.user_column", || "user_id".into()),
                target_column: d.take(c.target_column, "task.csv.target_column", || "target".into()),
                batch_size,
            })
        }
    };

    let model = {
        let m = raw.model;
        let input_dim = match (&task, m.input_dim) {
            (_, Some(dim)) => dim,
            (TaskConfig::Synthetic(s), None) => {
                d.0.push("model.input_dim".into());
                s.input_dim
            }
            (TaskConfig::Csv(_), None) => {
                return Err(Error::config("model.input_dim", "required for csv tasks"))
            }
        };
        let output_dim = d.take(m.output_dim, "model.output_dim", || 1);
        let hidden_dim = d.take(m.hidden_dim, "model.hidden_dim", || {
            if m.kind == ModelKind::Mlp1Hidden {
                DEFAULT_HIDDEN_DIM
            } else {
                0
            }
        });
        let loss = d.take(m.loss, "model.loss", || match m.kind {
            ModelKind::LinearRegression => LossKind::SquaredError,
            ModelKind::LogisticRegression => LossKind::CrossEntropy,
            ModelKind::Mlp1Hidden => match &task {
                TaskConfig::Synthetic(s) if s.kind == SyntheticKind::Classification => {
                    LossKind::CrossEntropy
                }
                _ => LossKind::SquaredError,
            },
        });
        let spec = ModelSpec {
            kind: m.kind,
            input_dim,
            output_dim,
            hidden_dim,
            loss,
        };
        spec.validate().map_err(|e| Error::config("model", e.to_string()))?;
        if let TaskConfig::Synthetic(s) = &task {
            if s.input_dim != input_dim {
                return Err(Error::config(
                    "model.input_dim",
                    format!("{input_dim} does not match task input_dim {}", s.input_dim),
                ));
            }
        }
        spec
    };

    let n = match (raw.n, &task) {
        (Some(n), _) => n,
        (None, TaskConfig::Synthetic(s)) => {
            d.0.push("n".into());
            s.num_users as u64
        }
        (None, TaskConfig::Csv(_)) => {
            return Err(Error::config("n", "population size is required for csv tasks"))
        }
    };
    if n == 0 {
        return Err(Error::config("n", "must be >= 1"));
    }
    let q = d.take(raw.q, "q", || (DEFAULT_CLIENTS_PER_ROUND / n as f64).min(1.0));
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config("q", format!("must lie in (0, 1], got {q}")));
    }
    let eta_c_client = positive(d.take(raw.eta_c_client, "eta_c_client", || DEFAULT_CLIENT_LR), "eta_c_client")?;
    let local_epochs = d.take(raw.local_epochs, "local_epochs", || 1);
    if local_epochs == 0 {
        return Err(Error::config("local_epochs", "must be >= 1"));
    }
    let eta_s = positive(d.take(raw.eta_s, "eta_s", || 1.0), "eta_s")?;
    let beta = d.take(raw.beta, "beta", || DEFAULT_BETA);
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::config("beta", format!("must lie in [0, 1), got {beta}")));
    }

    let clip = match raw.clip {
        None => {
            d.0.push("clip".into());
            ClipConfig::Adaptive(QuantileConfig::default())
        }
        Some(RawClip::Unclipped) => ClipConfig::Unclipped,
        Some(RawClip::Fixed { c }) => ClipConfig::Fixed(positive(c, "clip.fixed.c")?),
        Some(RawClip::Adaptive(a)) => {
            let cfg = QuantileConfig {
                gamma: d.take(a.gamma, "clip.adaptive.gamma", || 0.5),
                eta_c: d.take(a.eta_c, "clip.adaptive.eta_c", || DEFAULT_CLIP_LEARNING_RATE),
                c0: d.take(a.c0, "clip.adaptive.c0", || DEFAULT_INITIAL_CLIP),
                rule: d.take(a.rule, "clip.adaptive.rule", UpdateRule::default),
            };
            cfg.validate().map_err(|e| Error::config("clip.adaptive", e.to_string()))?;
            ClipConfig::Adaptive(cfg)
        }
    };

    let z = d.take(raw.z, "z", || 0.0);
    if !(z >= 0.0 && z.is_finite()) {
        return Err(Error::config("z", format!("must be finite and >= 0, got {z}")));
    }
    let sigma_b = d.take(raw.sigma_b, "sigma_b", || default_sigma_b(q, n));
    if !(sigma_b >= 0.0 && sigma_b.is_finite()) {
        return Err(Error::config("sigma_b", format!("must be finite and >= 0, got {sigma_b}")));
    }
    let shifted_bits = d.take(raw.shifted_bits, "shifted_bits", || true);
    let privacy = match clip {
        ClipConfig::Adaptive(_) => PrivacyParams::adaptive(q, n, z, sigma_b, shifted_bits)
            .map_err(|e| Error::config("z", e.to_string()))?,
        ClipConfig::Unclipped if z > 0.0 => {
            return Err(Error::config("z", "noise requires a finite clip"))
        }
        ClipConfig::Fixed(_) | ClipConfig::Unclipped => {
            let mut p = PrivacyParams::fixed(q, n, z).map_err(|e| Error::config("z", e.to_string()))?;
            p.shifted_bits = shifted_bits;
            p
        }
    };

    let master_seed = d.take(raw.master_seed, "master_seed", || 0);
    let eval_period = d.take(raw.eval_period, "eval_period", || DEFAULT_EVAL_PERIOD);
    if eval_period == 0 {
        return Err(Error::config("eval_period", "must be >= 1"));
    }
    let workers = d.take(raw.workers, "workers", || 1).max(1);
    let output_dir = raw.output.and_then(|o| o.dir);

    Ok(Validated {
        config: RunConfig {
            task,
            model,
            rounds: raw.rounds,
            q,
            n,
            eta_c_client,
            local_epochs,
            eta_s,
            beta,
            clip,
            z,
            sigma_b,
            shifted_bits,
            master_seed,
            eval_period,
            workers,
            output_dir,
            privacy,
        },
        defaulted: d.0,
    })
}

impl RunConfig {
    /// Serializes every trajectory-relevant value in the input schema.
    pub fn to_document(&self) -> Value {
        let task = match &self.task {
            TaskConfig::Synthetic(s) => json!({ "synthetic": s }),
            TaskConfig::Csv(c) => {
                let mut m = Map::new();
                m.insert("path".into(), json!(c.path));
                if let Some(p) = &c.eval_path {
                    m.insert("eval_path".into(), json!(p));
                }
                m.insert("user_column".into(), json!(c.user_column));
                m.insert("target_column".into(), json!(c.target_column));
                m.insert("batch_size".into(), json!(c.batch_size));
                json!({ "csv": m })
            }
        };
        let mut doc = json!({
            "task": task,
            "model": {
                "kind": self.model.kind,
                "input_dim": self.model.input_dim,
                "output_dim": self.model.output_dim,
                "hidden_dim": self.model.hidden_dim,
                "loss": self.model.loss,
            },
            "rounds": self.rounds,
            "q": self.q,
            "n": self.n,
            "eta_c_client": self.eta_c_client,
            "local_epochs": self.local_epochs,
            "eta_s": self.eta_s,
            "beta": self.beta,
            "clip": self.clip.to_value(),
            "z": self.z,
            "sigma_b": self.sigma_b,
            "shifted_bits": self.shifted_bits,
            "master_seed": self.master_seed,
            "eval_period": self.eval_period,
            "workers": self.workers,
        });
        if let Some(dir) = &self.output_dir {
            doc["output"] = json!({ "dir": dir });
        }
        doc
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            model: self.model,
            rounds: self.rounds,
            client_lr: self.eta_c_client,
            local_epochs: self.local_epochs,
            eta_s: self.eta_s,
            beta: self.beta,
            clip: self.clip.mode(),
            privacy: self.privacy,
            master_seed: self.master_seed,
            eval_period: self.eval_period,
            workers: self.workers,
        }
    }

    /// Re-validates after editing fields such as `z` or `clip` so derived
    /// values stay consistent.
    pub fn revalidated(&self) -> Result<RunConfig> {
        Ok(validate_value(&self.to_document())?.config)
    }
}

/// Loads the task's data. CSV tasks without `eval_path` hold out every
/// tenth user.
pub fn load_task(cfg: &RunConfig) -> Result<TaskData> {
    match &cfg.task {
        TaskConfig::Synthetic(spec) => synthetic_task_data(spec),
        TaskConfig::Csv(c) => {
            let clients = ingest_csv(&c.path, &c.user_column, &c.target_column, c.batch_size)?;
            match &c.eval_path {
                Some(p) => {
                    let eval = ingest_csv(p, &c.user_column, &c.target_column, c.batch_size)?
                        .into_iter()
                        .flat_map(|d| d.examples)
                        .collect();
                    TaskData::new(clients, eval)
                }
                None => TaskData::holdout_every_tenth(clients),
            }
        }
    }
}

pub fn run(cfg: &RunConfig, task: &TaskData) -> Result<TrainOutput> {
    train(&cfg.train_options(), task)
}

/// Sets `value` at a dotted key path, creating objects along the way.
pub fn apply_override(doc: &mut Value, dotted: &str, value: Value) -> Result<()> {
    let mut cursor = doc;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(dotted, "empty path segment"));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::config(dotted, format!("`{part}` is not inside an object")))?;
        cursor = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| Error::config(dotted, "parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::config(arg, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Reads a config document from disk. A metrics JSON written by a previous
/// run is accepted too; its `config` echo is used.
pub fn read_config_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::config("", format!("{}: {e}", path.display())))?;
    if value.get("records").is_some() {
        if let Some(cfg) = value.get("config") {
            return Ok(cfg.clone());
        }
    }
    Ok(value)
}
