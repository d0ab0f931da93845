use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaclip_core::accountant::{
    compose_and_convert, solve_noise_for_epsilon, AccountantState, Conversion,
};
use adaclip_core::data::{generate_synthetic_eval, generate_synthetic_task, write_csv, SyntheticTaskSpec};
use adaclip_core::experiment::config::{
    apply_override, load_task, parse_override, read_config_document, validate_value,
};
use adaclip_core::experiment::metrics::write_run_outputs;
use adaclip_core::experiment::sweep::{run_sweep, summary_csv_string, SweepSpec};
use adaclip_core::quantile::{quantile_demo, QuantileConfig, UpdateRule};
use adaclip_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "adaclip", version, about = "DP federated averaging with adaptive quantile clipping")]
struct Cli {
    /// JSON config document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (client fan-out for `train`, cells for `sweep`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the master seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress and defaulted settings to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one training job.
    Train(OverrideArgs),
    /// Run a server-LR x clip x noise grid.
    Sweep(OverrideArgs),
    /// Privacy accounting for the subsampled Gaussian mechanism.
    Account(AccountArgs),
    /// Track a quantile of a synthetic lognormal stream.
    QuantileDemo(DemoArgs),
    /// Write a synthetic task as CSV (train.csv and eval.csv).
    GenData,
}

#[derive(Args, Debug)]
struct OverrideArgs {
    /// Dotted-key override, e.g. `--set clip.adaptive.gamma=0.3`.
    /// For `sweep`, keys apply to the base config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConversionArg {
    Tight,
    Classic,
}

impl From<ConversionArg> for Conversion {
    fn from(c: ConversionArg) -> Self {
        match c {
            ConversionArg::Tight => Conversion::Tight,
            ConversionArg::Classic => Conversion::Classic,
        }
    }
}

#[derive(Args, Debug)]
struct AccountArgs {
    /// Sampling probability (or give --qn and --n).
    #[arg(long)]
    q: Option<f64>,
    /// Expected clients per round.
    #[arg(long)]
    qn: Option<f64>,
    /// Population size.
    #[arg(long)]
    n: Option<f64>,
    /// Effective noise multiplier.
    #[arg(long)]
    z: Option<f64>,
    /// Number of rounds.
    #[arg(long = "rounds", short = 't')]
    rounds: u64,
    #[arg(long, default_value_t = 1e-9)]
    delta: f64,
    /// Solve for the smallest z that reaches --target-eps.
    #[arg(long)]
    solve_z: bool,
    #[arg(long)]
    target_eps: Option<f64>,
    #[arg(long, value_enum, default_value_t = ConversionArg::Tight)]
    conversion: ConversionArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 200)]
    rounds: u64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1.5)]
    sigma_log: f64,
    #[arg(long, default_value_t = 0.2)]
    eta_c: f64,
    #[arg(long, default_value_t = 0.1)]
    c0: f64,
    #[arg(long, default_value_t = false)]
    linear: bool,
    /// Count noise standard deviation (0 disables).
    #[arg(long, default_value_t = 0.0)]
    sigma_b: f64,
    #[arg(long)]
    json: bool,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config_error() { 1 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn load_document(cli: &Cli, overrides: &[String]) -> Result<Value, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| config_failure("--config <path> is required"))?;
    let mut doc = read_config_document(path)?;
    for arg in overrides {
        let (key, value) = parse_override(arg)?;
        apply_override(&mut doc, &key, value)?;
    }
    Ok(doc)
}

fn cmd_train(cli: &Cli, args: &OverrideArgs) -> Result<(), Failure> {
    let mut doc = load_document(cli, &args.overrides)?;
    if let Some(seed) = cli.seed {
        doc["master_seed"] = json!(seed);
    }
    if let Some(w) = cli.workers {
        doc["workers"] = json!(w);
    }
    let validated = validate_value(&doc)?;
    for key in &validated.defaulted {
        log::info!("defaulted {key}");
    }
    let cfg = validated.config;
    log::info!(
        "z = {}, z_delta = {}, sigma_b = {}, qn = {}",
        cfg.privacy.z,
        cfg.privacy.z_delta,
        cfg.privacy.sigma_b,
        cfg.privacy.expected_clients()
    );
    let task = load_task(&cfg)?;
    let output = adaclip_core::experiment::run(&cfg, &task)?;
    let out_dir = cli.out.clone().or_else(|| cfg.output_dir.clone());
    match out_dir {
        Some(dir) => {
            write_run_outputs(&dir, &cfg, &validated.defaulted, &output)?;
            println!("wrote {}", dir.join("metrics.csv").display());
        }
        None => print!("{}", adaclip_core::experiment::metrics_csv_string(&output.records)),
    }
    if let Some(last) = output.records.last() {
        eprintln!(
            "final: round {} clip {:.6} eval_loss {} eval_metric {}",
            last.round,
            last.clip_after,
            last.eval_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            last.eval_metric.map(|v| format!("{v:.6}")).unwrap_or_default(),
        );
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &OverrideArgs) -> Result<(), Failure> {
    let mut doc = load_document(cli, &[])?;
    for arg in &args.overrides {
        let (key, value) = parse_override(arg)?;
        apply_override(&mut doc, &format!("base.{key}"), value)?;
    }
    if let Some(seed) = cli.seed {
        apply_override(&mut doc, "base.master_seed", json!(seed))?;
    }
    let spec = SweepSpec::from_json(&doc.to_string())?;
    let task = load_task(&spec.base)?;
    let workers = cli.workers.unwrap_or(spec.base.workers);
    let out_dir = cli.out.clone().or_else(|| spec.base.output_dir.clone());
    let summary = run_sweep(&spec, &task, workers, out_dir.as_deref())?;
    print!("{}", summary_csv_string(&summary.rows));
    Ok(())
}

fn cmd_account(args: &AccountArgs) -> Result<(), Failure> {
    let q = match (args.q, args.qn, args.n) {
        (Some(q), None, None) => q,
        (None, Some(qn), Some(n)) if n > 0.0 => qn / n,
        _ => return Err(config_failure("give either --q or both --qn and --n")),
    };
    let conversion = Conversion::from(args.conversion);
    if args.solve_z {
        let target = args
            .target_eps
            .ok_or_else(|| config_failure("--solve-z needs --target-eps"))?;
        let z = solve_noise_for_epsilon(q, args.rounds, args.delta, target, conversion)?;
        let spent = compose_and_convert(&AccountantState::new(q, z)?, args.rounds, args.delta, conversion)?;
        if args.json {
            println!(
                "{}",
                json!({ "q": q, "rounds": args.rounds, "delta": args.delta, "target_eps": target,
                        "z": z, "epsilon": spent.epsilon, "order": spent.order })
            );
        } else {
            println!("z = {z:.6} (epsilon = {:.6} at order {})", spent.epsilon, spent.order);
        }
        return Ok(());
    }
    let z = args.z.ok_or_else(|| config_failure("--z is required unless --solve-z"))?;
    let spent = compose_and_convert(&AccountantState::new(q, z)?, args.rounds, args.delta, conversion)?;
    if args.json {
        println!(
            "{}",
            json!({ "q": q, "z": z, "rounds": args.rounds, "delta": args.delta,
                    "epsilon": spent.epsilon, "order": spent.order })
        );
    } else {
        println!("epsilon = {:.6} (delta = {:e}, order {})", spent.epsilon, args.delta, spent.order);
    }
    Ok(())
}

fn cmd_demo(cli: &Cli, args: &DemoArgs) -> Result<(), Failure> {
    let cfg = QuantileConfig {
        gamma: args.gamma,
        eta_c: args.eta_c,
        c0: args.c0,
        rule: if args.linear { UpdateRule::Linear } else { UpdateRule::Geometric },
    };
    let rows = quantile_demo(
        &cfg,
        args.rounds,
        args.samples,
        args.sigma_log,
        args.sigma_b,
        cli.seed.unwrap_or(0),
    )?;
    if args.json {
        println!("{}", serde_json::to_string(&rows).map_err(Error::from)?);
    } else {
        println!("round,estimate,frac_below,frac_noisy");
        for r in rows {
            println!("{},{:.16e},{:.16e},{:.16e}", r.round, r.estimate, r.frac_below, r.frac_noisy);
        }
    }
    Ok(())
}

fn synthetic_spec(doc: &Value) -> Result<SyntheticTaskSpec, Failure> {
    if let Some(s) = doc.get("synthetic") {
        return serde_json::from_value(s.clone())
            .map_err(|e| config_failure(format!("synthetic: {e}")));
    }
    let cfg = validate_value(doc)?.config;
    match cfg.task {
        adaclip_core::experiment::TaskConfig::Synthetic(s) => Ok(s),
        _ => Err(config_failure("gen-data needs a synthetic task")),
    }
}

fn cmd_gen_data(cli: &Cli) -> Result<(), Failure> {
    let doc = load_document(cli, &[])?;
    let mut spec = synthetic_spec(&doc)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let out: &Path = cli
        .out
        .as_deref()
        .ok_or_else(|| config_failure("--out <dir> is required"))?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let train = generate_synthetic_task(&spec)?;
    let eval = generate_synthetic_eval(&spec)?;
    let open = |name: &str| std::fs::File::create(out.join(name)).map(std::io::BufWriter::new);
    write_csv(open("train.csv").map_err(Error::from)?, &train)?;
    write_csv(open("eval.csv").map_err(Error::from)?, &eval)?;
    println!(
        "wrote {} training users and {} held-out users to {}",
        train.len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(&cli, a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Account(a) => cmd_account(a),
        Command::QuantileDemo(a) => cmd_demo(&cli, a),
        Command::GenData => cmd_gen_data(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
