//! `bqn`: train, evaluate, verify and inspect binarized Q-networks.

mod batch;
mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use bqn_core::error::RlError;
use bqn_core::network::presets::Preset;
use bqn_core::network::{decode, BinarizedNetwork};
use bqn_core::rl::{evaluate, train, EnvSpec, EvalOptions};
use bqn_core::tensorfile::write_tensors;
use bqn_core::verifier::{encode, export_lp, verify_robustness, EncodeOptions, Verdict, VerifyOptions};
use bqn_core::error::VerifyError;
use clap::{Parser, Subcommand};

use batch::{parse_property_spec, PropertyBatch, Query};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "bqn", version, about = "Binarized Q-networks: training, evaluation and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a binarized Q-network from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ε-greedy episodes and report the mean raw return.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// `catch`, `gridworld`, optionally with `:HxW`; size defaults to the model input.
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        frame_skip: usize,
        /// Write every visited state to this tensor file.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Write per-episode returns as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Verify a batch of argmax-robustness properties.
    Verify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        batch: PathBuf,
        /// Per-property time limit in seconds; overrides the batch file.
        #[arg(long)]
        timeout_s: Option<f64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Directory for the verdict CSV and counterexample tensors.
        #[arg(long, default_value = "verify-out")]
        out: PathBuf,
    },
    /// Write the mixed-integer encoding of one property in LP format.
    ExportLp {
        #[arg(long)]
        model: PathBuf,
        /// e.g. `states=frames.bqnx,index=3,epsilon=0.01,norm=l1`
        #[arg(long)]
        property: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print architecture, parameter counts and storage sizes.
    Inspect {
        #[arg(long, required_unless_present = "preset")]
        model: Option<PathBuf>,
        /// Inspect a freshly initialized preset instead of a model file.
        #[arg(long, conflicts_with = "model")]
        preset: Option<String>,
        #[arg(long, default_value_t = 4)]
        actions: usize,
    },
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
struct Diverged(String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Diverged {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Evaluate { model, env, episodes, epsilon, seed, frame_skip, record, csv } => {
            let opts = EvalOptions { episodes, epsilon, seed, frame_skip, record: record.is_some() };
            cmd_evaluate(&model, &env, &opts, record.as_deref(), csv.as_deref())
        }
        Command::Verify { model, batch, timeout_s, workers, out } => {
            cmd_verify(model.as_deref(), &batch, timeout_s, workers, &out)
        }
        Command::ExportLp { model, property, out } => cmd_export_lp(&model, &property, &out),
        Command::Inspect { model, preset, actions } => cmd_inspect(model.as_deref(), preset.as_deref(), actions),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Diverged>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_model(path: &Path) -> Result<BinarizedNetwork> {
    let bytes = fs::read(path).with_context(|| format!("cannot read model {}", path.display()))?;
    let file = decode(&bytes).with_context(|| format!("cannot decode model {}", path.display()))?;
    Ok(file.network)
}

fn cmd_train(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let run = RunConfig::load(path)?;
    let mut config = run.to_train_config().map_err(|e| anyhow::anyhow!("{}: {}", path.display(), e.message))?;
    if let Ok(seed) = std::env::var("BQN_SEED") {
        config.seed = seed.trim().parse().with_context(|| format!("BQN_SEED must be an integer, got `{seed}`"))?;
    }
    let dir = out.or(config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut effective = run.clone();
    effective.seed = config.seed;
    effective.output.dir = Some(dir.clone());
    fs::write(dir.join("config.toml"), effective.canonical())?;
    config.out_dir = Some(dir.clone());
    let started = Instant::now();
    let outcome = match train(&config) {
        Ok(o) => o,
        Err(RlError::Diverged { episode, step, checkpoint }) => {
            let at = checkpoint.map_or(String::new(), |p| format!("; state saved to {}", p.display()));
            return Err(Diverged(format!("loss diverged at episode {episode}, step {step}{at}")).into());
        }
        Err(e) => return Err(e.into()),
    };
    let tail = &outcome.metrics[outcome.metrics.len().saturating_sub(100)..];
    let recent = tail.iter().map(|m| m.return_raw).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "trained {} episodes, {} steps in {:.1}s; mean return over the last {} episodes {:.3}",
        outcome.metrics.len(),
        outcome.steps,
        started.elapsed().as_secs_f64(),
        tail.len(),
        recent
    );
    println!("model written to {}", dir.join("model.bqn").display());
    Ok(())
}

fn env_for_model(name: &str, net: &BinarizedNetwork) -> Result<EnvSpec> {
    let shape = net.input_shape();
    let spec = if name.contains(':') { name.to_string() } else { format!("{name}:{}x{}", shape.h, shape.w) };
    Ok(EnvSpec::parse(&spec)?)
}

fn cmd_evaluate(model: &Path, env: &str, opts: &EvalOptions, record: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let net = load_model(model)?;
    let spec = env_for_model(env, &net)?;
    let report = evaluate(&net, &spec, opts)?;
    println!("{}: mean return {:.4} ± {:.4} over {} episodes (epsilon {})", spec.name(), report.mean, report.std, report.returns.len(), opts.epsilon);
    if let EnvSpec::Catch { .. } = spec {
        println!("catch rate {:.4}", report.success_rate());
    }
    if let Some(path) = csv {
        let mut text = String::from("episode,return\n");
        for (i, r) in report.returns.iter().enumerate() {
            let _ = writeln!(text, "{},{}", i + 1, r);
        }
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = record {
        write_tensors(path, net.input_shape(), &report.recorded).with_context(|| format!("cannot write {}", path.display()))?;
        println!("recorded {} states to {}", report.recorded.len(), path.display());
    }
    Ok(())
}

struct Outcome {
    id: String,
    verdict: String,
    epsilon: f64,
    norm: &'static str,
    nodes: u64,
    lp_calls: u64,
    wall_ms: u128,
    cex: Option<PathBuf>,
}

fn run_query(net: &BinarizedNetwork, q: &Query, timeout: Duration, out: &Path) -> Result<Outcome> {
    let mut outcome = Outcome {
        id: q.id.clone(),
        verdict: "skipped".into(),
        epsilon: q.set.epsilon,
        norm: q.set.norm.name(),
        nodes: 0,
        lp_calls: 0,
        wall_ms: 0,
        cex: None,
    };
    let property = q.property(net)?;
    let opts = VerifyOptions { timeout: Some(timeout), ..VerifyOptions::default() };
    let started = Instant::now();
    let solution = match verify_robustness(net, &q.set, &property, &opts) {
        Ok(s) => s,
        Err(VerifyError::PremiseMismatch { expected, found }) => {
            eprintln!("{}: skipped, network picks {found} at the center, not {expected}", q.id);
            return Ok(outcome);
        }
        Err(e) => return Err(e.into()),
    };
    outcome.wall_ms = started.elapsed().as_millis();
    outcome.nodes = solution.stats.nodes;
    outcome.lp_calls = solution.stats.lp_calls;
    outcome.verdict = solution.verdict.name().into();
    if let Verdict::Counterexample(c) = &solution.verdict {
        let path = out.join(format!("cex_{}.bqnx", q.id));
        write_tensors(&path, net.input_shape(), std::slice::from_ref(&c.x))?;
        outcome.cex = Some(path);
    }
    Ok(outcome)
}

fn cmd_verify(model: Option<&Path>, batch_path: &Path, timeout_s: Option<f64>, workers: usize, out: &Path) -> Result<()> {
    let batch = PropertyBatch::load(batch_path)?;
    let base = batch_path.parent().unwrap_or(Path::new("."));
    let model = match (model, &batch.model) {
        (Some(m), _) => m.to_path_buf(),
        (None, Some(m)) if m.is_absolute() => m.clone(),
        (None, Some(m)) => base.join(m),
        (None, None) => bail!("no model given on the command line or in the batch"),
    };
    let timeout = timeout_s.or(batch.timeout_s).unwrap_or(60.0);
    if !(timeout > 0.0 && timeout.is_finite()) {
        bail!("timeout must be positive");
    }
    if workers == 0 {
        bail!("workers must be positive");
    }
    let net = load_model(&model)?;
    let queries = batch.queries(base, net.input_shape().c)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let timeout = Duration::from_secs_f64(timeout);

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Outcome>>>> = Mutex::new((0..queries.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(queries.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(q) = queries.get(i) else { break };
                let r = run_query(&net, q, timeout, out);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut csv = String::from("property_id,verdict,epsilon,norm,nodes,lp_calls,wall_ms,counterexample_path\n");
    let (mut verified, mut cex, mut timeouts, mut skipped) = (0, 0, 0, 0);
    for r in results.into_inner().unwrap() {
        let o = r.expect("every query ran")?;
        match o.verdict.as_str() {
            "verified" => verified += 1,
            "counterexample" => cex += 1,
            "timeout" => timeouts += 1,
            _ => skipped += 1,
        }
        let path = o.cex.as_ref().map_or(String::new(), |p| p.display().to_string());
        let _ = writeln!(csv, "{},{},{},{},{},{},{},{}", o.id, o.verdict, o.epsilon, o.norm, o.nodes, o.lp_calls, o.wall_ms, path);
    }
    let csv_path = out.join("verdicts.csv");
    fs::write(&csv_path, csv).with_context(|| format!("cannot write {}", csv_path.display()))?;
    let name = model.file_name().map_or("model".into(), |n| n.to_string_lossy().into_owned());
    println!("{:<20} {:>9} {:>28} {:>21} {:>8}", "Network", "Verified", "Unverified (counterexample)", "Unverified (timeout)", "Skipped");
    println!("{name:<20} {verified:>9} {cex:>28} {timeouts:>21} {skipped:>8}");
    println!("verdicts written to {}", csv_path.display());
    Ok(())
}

fn cmd_export_lp(model: &Path, spec: &str, out: &Path) -> Result<()> {
    let net = load_model(model)?;
    let q = parse_property_spec(spec, net.input_shape().c)?;
    let property = q.property(&net)?;
    let system = encode(&net, &q.set, &property, &EncodeOptions::default())?;
    export_lp(&system, out).with_context(|| format!("cannot write {}", out.display()))?;
    println!(
        "{} variables ({} binary), {} constraints written to {}",
        system.variables.len(),
        system.binary_count(),
        system.constraints.len(),
        out.display()
    );
    Ok(())
}

fn cmd_inspect(model: Option<&Path>, preset: Option<&str>, actions: usize) -> Result<()> {
    let net = match (model, preset) {
        (Some(path), _) => load_model(path)?,
        (None, Some(name)) => {
            let preset = Preset::from_name(name).with_context(|| format!("unknown preset `{name}`"))?;
            let input = preset.default_input();
            let specs = preset.layers(input, actions)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            BinarizedNetwork::random(input, &specs, Default::default(), &mut rng)?
        }
        (None, None) => bail!("give --model or --preset"),
    };
    println!("input {}", net.input_shape());
    for (spec, shape) in net.specs().iter().zip(&net.shapes()[1..]) {
        println!("  {:<14} -> {}", spec.kind_name(), shape);
    }
    let r = net.memory_report();
    println!("binary weights        {}", r.weights);
    println!("real channel params   {}", r.channel_params);
    println!("binary payload bytes  {}", r.binary_bytes());
    println!("binary32 bytes        {}", r.float_bytes());
    println!("ratio                 {:.2}", r.ratio());
    println!("weight-only ratio     {:.2}", r.weight_ratio());
    Ok(())
}
