use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::Serialize;

use racer_core::envs::{CliffCar, OBS_DIM};
use racer_core::gradnet::Checkpoint;
use racer_core::riskmeasures::{run_gap_experiment, write_gap_csv, GapExperimentConfig};
use racer_core::trainer::{
    evaluate_policy, restore, train, Ablation, DeterministicActor, TrainerConfig,
};
use racer_core::{cvar, cvar_gap, mixture, var, Error, RiskLevel};

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "racer", version, about = "Risk-averse distributional actor-critic with adaptive action limits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run on cliffcar.
    Train(TrainArgs),
    /// Evaluate the deterministic policy stored in a checkpoint.
    Eval(EvalArgs),
    /// Train one run per (alpha, seed) pair and tabulate failures and speed.
    SweepAlpha(SweepArgs),
    /// Random Gaussian-mixture ensembles: tail-EMD against CVaR gap.
    GapExperiment(GapArgs),
    /// Print the return distributions of a checkpointed critic at one (s, a).
    InspectCvar(InspectArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file of trainer settings; missing fields take library defaults.
    /// Without it the desk preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// May be repeated.
    #[arg(long, value_parser = ["no_epistemic", "no_limits", "risk_neutral"])]
    ablation: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated risk levels.
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["no_epistemic", "no_limits", "risk_neutral"])]
    ablation: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Debug, Args)]
struct GapArgs {
    #[arg(long, default_value_t = 1000)]
    n_trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Members per ensemble.
    #[arg(long, default_value_t = 3)]
    members: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Observation, comma-separated (speed, cos, sin, distance, roughness).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    state: Option<Vec<f64>>,
    /// Applied action, comma-separated (steer, speed).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    action: Option<Vec<f64>>,
    /// Defaults to the checkpoint's training alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Write atom/probability pairs for every member and the mixture.
    #[arg(long)]
    csv: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::InvalidRiskLevel(_)
            | Error::CheckpointVersion { .. }
            | Error::Checkpoint(_)
            | Error::DegenerateLimits { .. } => EXIT_CONFIG,
            Error::NonFinite(_) => EXIT_ABORTED,
            _ => EXIT_ERROR,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_ERROR,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let level = std::env::var("RACER_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepAlpha(a) => cmd_sweep_alpha(a),
        Command::GapExperiment(a) => cmd_gap_experiment(a),
        Command::InspectCvar(a) => cmd_inspect_cvar(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.message);
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainerConfig, Failure> {
    match path {
        None => Ok(TrainerConfig::desk()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| Failure::config(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn parse_ablations(names: &[String]) -> Result<Ablation, Failure> {
    names.iter().try_fold(Ablation::default(), |acc, n| {
        Ok(acc.union(Ablation::parse(n)?))
    })
}

fn build_config(a: &RunArgs) -> Result<TrainerConfig, Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.total_steps = n;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = RiskLevel::new(alpha)?;
    }
    cfg.ablation = cfg.ablation.union(parse_ablations(&a.ablation)?);
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure {
        code: EXIT_ERROR,
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = build_config(&a.run)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    info!(
        "training {} steps, alpha {}, seed {}",
        cfg.total_steps,
        cfg.alpha.alpha(),
        cfg.seed
    );
    let (summary, _) = train(cfg, Some(&a.out))?;
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let r = restore(&ck)?;
    let report = evaluate_policy(
        &DeterministicActor {
            actor: &r.actor,
            params: &r.actor_params,
        },
        &r.limits,
        &r.env,
        a.episodes,
        a.seed,
    )?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    if let Some(p) = a.out {
        write_json(&p, &report)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    alpha: f64,
    seed: u64,
    cum_failures: u64,
    avg_speed: f64,
}

fn cmd_sweep_alpha(a: SweepArgs) -> CmdResult {
    let base = build_config(&RunArgs {
        config: a.config.clone(),
        seed: None,
        steps: a.steps,
        alpha: None,
        ablation: a.ablation.clone(),
    })?;
    if a.seeds.is_empty() {
        return Err(Failure::config("at least one seed is required"));
    }
    let mut jobs = Vec::new();
    for &alpha in &a.alphas {
        let level = RiskLevel::new(alpha)?;
        for &seed in &a.seeds {
            let mut cfg = base.clone();
            cfg.alpha = level;
            cfg.seed = seed;
            jobs.push(cfg);
        }
    }
    fs::create_dir_all(&a.out)?;
    let workers = a.parallel.clamp(1, jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(cfg) = jobs.get(i) else { break };
                let dir = a
                    .out
                    .join(format!("alpha_{}_seed_{}", cfg.alpha.alpha(), cfg.seed));
                let outcome = train(cfg.clone(), Some(&dir)).map(|(s, _)| SweepRow {
                    alpha: cfg.alpha.alpha(),
                    seed: cfg.seed,
                    cum_failures: s.cum_failures,
                    avg_speed: s.avg_speed,
                });
                match &outcome {
                    Ok(r) => info!("alpha {} seed {}: {} failures", r.alpha, r.seed, r.cum_failures),
                    Err(e) => warn!("alpha {} seed {} failed: {e}", cfg.alpha.alpha(), cfg.seed),
                }
                results.lock().expect("lock").push(outcome.ok());
            });
        }
    });
    let results = results.into_inner().expect("lock");
    let failed = results.iter().filter(|r| r.is_none()).count();
    let mut rows: Vec<SweepRow> = results.into_iter().flatten().collect();
    rows.sort_by(|x, y| x.alpha.total_cmp(&y.alpha).then(x.seed.cmp(&y.seed)));
    let mut csv = String::from("alpha,seed,cum_failures,avg_speed\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{}", r.alpha, r.seed, r.cum_failures, r.avg_speed)
            .expect("string write");
    }
    fs::write(a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    if failed > 0 {
        return Err(Failure {
            code: EXIT_ABORTED,
            message: format!("{failed} of {} runs failed", jobs.len()),
        });
    }
    Ok(())
}

fn cmd_gap_experiment(a: GapArgs) -> CmdResult {
    if a.n_trials == 0 {
        return Err(Failure::config("--n-trials must be at least 1"));
    }
    let cfg = GapExperimentConfig {
        n_trials: a.n_trials,
        seed: a.seed,
        alpha: RiskLevel::new(a.alpha)?,
        n: a.members,
        ..GapExperimentConfig::default()
    };
    let rows = run_gap_experiment(&cfg)?;
    let mut buf = Vec::new();
    write_gap_csv(&mut buf, &rows)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, buf)?;
    info!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn fmt_probs(p: &[f64]) -> String {
    p.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn cmd_inspect_cvar(a: InspectArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let r = restore(&ck)?;
    let state = match a.state {
        Some(s) if s.len() == OBS_DIM => s,
        Some(s) => {
            return Err(Failure::config(format!(
                "--state needs {OBS_DIM} values, got {}",
                s.len()
            )))
        }
        None => {
            let env = CliffCar::new(r.config.env.clone())?;
            env.observe(&env.reset(r.config.seed)).to_vec()
        }
    };
    let action = match a.action {
        Some(v) if v.len() == 2 => v,
        Some(v) => {
            return Err(Failure::config(format!(
                "--action needs 2 values, got {}",
                v.len()
            )))
        }
        None => vec![0.0, r.limits.v_plus.first().copied().unwrap_or(1.0)],
    };
    let alpha = match a.alpha {
        Some(x) => RiskLevel::new(x)?,
        None => r.config.alpha,
    };
    let members = r.critics.distributions(&state, &action)?;
    let mix = mixture(&members, None)?;
    let mut out = String::new();
    let _ = writeln!(out, "state   {state:?}");
    let _ = writeln!(out, "action  {action:?}");
    let _ = writeln!(out, "alpha   {}", alpha.alpha());
    let _ = writeln!(out, "atoms   {}", fmt_probs(mix.atoms()));
    let _ = writeln!(out, "{:<10}{:>12}{:>12}{:>12}", "", "mean", "var", "cvar");
    for (i, d) in members.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<10}{:>12.5}{:>12.5}{:>12.5}",
            format!("member {i}"),
            d.mean(),
            var(d, alpha),
            cvar(d, alpha)
        );
    }
    let _ = writeln!(
        out,
        "{:<10}{:>12.5}{:>12.5}{:>12.5}",
        "mixture",
        mix.mean(),
        var(&mix, alpha),
        cvar(&mix, alpha)
    );
    let _ = writeln!(out, "cvar gap  {:.6}", cvar_gap(&members, alpha)?);
    for (i, d) in members.iter().enumerate() {
        let _ = writeln!(out, "probs {i}   {}", fmt_probs(d.probs()));
    }
    let _ = writeln!(out, "probs mix {}", fmt_probs(mix.probs()));
    print!("{out}");
    if let Some(path) = a.csv {
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        writeln!(f, "distribution,atom,prob")?;
        for (i, d) in members.iter().enumerate() {
            for (z, p) in d.atoms().iter().zip(d.probs()) {
                writeln!(f, "member_{i},{z},{p}")?;
            }
        }
        for (z, p) in mix.atoms().iter().zip(mix.probs()) {
            writeln!(f, "mixture,{z},{p}")?;
        }
        f.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_desk_toml_matches_preset() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let cfg = load_config(Some(&p)).unwrap_or_else(|f| panic!("{}", f.message));
        assert_eq!(cfg, TrainerConfig::desk());
    }
}
