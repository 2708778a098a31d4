//! Command surface behind the `gpril` binary: `gen-demos`, `train`, `eval`,
//! `oracle-check` and `plot`.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 a failed check,
//! 3 training divergence. `GPRIL_SEED` overrides the seed from a config
//! file; an explicit `--seed` flag overrides both.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::demos::{scripted_expert, sparsify, DemoSet, Sparsify};
use crate::env::{PointMassConfig, TabularFixture};
use crate::error::{Error, Result};
use crate::gpril::{evaluate, load_policy, read_metrics, train, ActorMode, EvalReport, GprilConfig, MetricsRow, RunOutput};
use crate::oracle::TabularOracle;
use crate::policy::SoftmaxPolicy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const SEED_ENV: &str = "GPRIL_SEED";

#[derive(Debug, Parser)]
#[command(name = "gpril", version, about = "Imitation learning with generative predecessor models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scripted-expert demonstrations for the point-mass task.
    GenDemos(GenDemosArgs),
    /// Train a policy from a demonstration file.
    Train(TrainArgs),
    /// Roll out a trained policy and report success statistics.
    Eval(EvalArgs),
    /// Run the exact tabular checks on a fixture MDP.
    OracleCheck(OracleArgs),
    /// Draw SVG learning curves from a metrics file.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDemosArgs {
    /// Number of successful expert episodes.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// full, stride:K or final.
    #[arg(long, default_value = "full")]
    pub sparsify: String,
    /// Drop actions even when the regime keeps them.
    #[arg(long)]
    pub states_only: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output `.jsonl` path; `meta.json` is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Gpril,
    /// Behavioral cloning: forces `beta_d = 0`.
    Bc,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<TrainMode>,
    /// Start from the desk-scale defaults instead of the full-scale ones.
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta_pi: Option<f64>,
    #[arg(long)]
    pub beta_d: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_b: Option<usize>,
    #[arg(long)]
    pub n_pi: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub total_iterations: Option<usize>,
    #[arg(long)]
    pub lr_model: Option<f64>,
    #[arg(long)]
    pub lr_policy: Option<f64>,
    #[arg(long, value_enum)]
    pub actor_mode: Option<ActorModeArg>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub eval_rollouts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActorModeArg {
    Sync,
    Async,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Policy checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics file to plot; defaults to the run directory's `metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Directory for SVG plots; defaults to the run directory.
    #[arg(long)]
    pub plot_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Fixture JSON; the shipped 4-state fixture when omitted.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.99, 0.999])]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed per-coordinate bound for the discounted-vs-finite-difference
    /// check, replacing the default `5·(1−γ)`.
    #[arg(long)]
    pub disc_tolerance: Option<f64>,
    /// CSV report path.
    #[arg(long, default_value = "oracle_report.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    match dispatch(cli.command, seed_env.as_deref()) {
        Ok(Outcome::Done(msg)) => {
            println!("{msg}");
            EXIT_OK
        }
        Ok(Outcome::ChecksFailed(msg)) => {
            eprintln!("{msg}");
            EXIT_CHECK_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done(String),
    ChecksFailed(String),
}

pub fn dispatch(cmd: Command, seed_env: Option<&str>) -> Result<Outcome> {
    match cmd {
        Command::GenDemos(a) => cmd_gen_demos(&a, seed_env),
        Command::Train(a) => cmd_train(&a, seed_env),
        Command::Eval(a) => cmd_eval(&a),
        Command::OracleCheck(a) => cmd_oracle_check(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

fn parse_seed_env(seed_env: Option<&str>) -> Result<Option<u64>> {
    seed_env
        .map(|s| s.trim().parse().map_err(|_| Error::Config(vec![format!("{SEED_ENV}='{s}' is not an unsigned integer")])))
        .transpose()
}

// ---------------------------------------------------------------------------
// gen-demos
// ---------------------------------------------------------------------------

pub fn cmd_gen_demos(a: &GenDemosArgs, seed_env: Option<&str>) -> Result<Outcome> {
    let regime: Sparsify = a.sparsify.parse().map_err(|e: Error| Error::Config(vec![e.to_string()]))?;
    let seed = a.seed.or(parse_seed_env(seed_env)?).unwrap_or(0);
    if a.n == 0 {
        return Err(Error::Config(vec!["--n must be positive".into()]));
    }
    let trajs = scripted_expert(&PointMassConfig::default(), a.n, seed)?;
    let mut set = sparsify(&trajs, regime)?;
    if a.states_only {
        set = set.into_states_only();
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    set.save(&a.out)?;
    Ok(Outcome::Done(format!(
        "wrote {} samples from {} episodes ({}, {:?}) to {}",
        set.len(),
        trajs.len(),
        regime,
        set.mode,
        a.out.display()
    )))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Flat run configuration: run-level keys plus every [`GprilConfig`] field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// `pointmass` for training; `tabular` is only meaningful for the oracles.
    pub env: String,
    pub demo_file: Option<PathBuf>,
    pub mode: TrainMode,
    pub out_dir: PathBuf,
    #[serde(flatten)]
    pub gpril: GprilConfig,
}

impl RunConfig {
    pub fn with_gpril(gpril: GprilConfig) -> Self {
        RunConfig { env: "pointmass".into(), demo_file: None, mode: TrainMode::Gpril, out_dir: PathBuf::from("runs/latest"), gpril }
    }

    /// Build from a flat JSON object layered over `base`. Collects every
    /// unknown key and malformed value before failing.
    pub fn from_value(v: &Value, base: &RunConfig) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Config(vec!["config must be a JSON object".into()]))?;
        let mut errors = Vec::new();
        let mut out = base.clone();
        let mut gpril_map = match serde_json::to_value(&base.gpril)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let defaults = gpril_map.clone();
        for (k, val) in obj {
            match k.as_str() {
                "env" => match val.as_str() {
                    Some(s) => out.env = s.to_string(),
                    None => errors.push("env: expected a string".into()),
                },
                "demo_file" => match val {
                    Value::Null => out.demo_file = None,
                    Value::String(s) => out.demo_file = Some(s.into()),
                    _ => errors.push("demo_file: expected a path string".into()),
                },
                "mode" => match serde_json::from_value::<TrainMode>(val.clone()) {
                    Ok(m) => out.mode = m,
                    Err(_) => errors.push(format!("mode: expected \"gpril\" or \"bc\", got {val}")),
                },
                "out_dir" => match val.as_str() {
                    Some(s) => out.out_dir = s.into(),
                    None => errors.push("out_dir: expected a path string".into()),
                },
                key if defaults.contains_key(key) => {
                    // Check each field alone so every bad value is reported.
                    let mut probe = defaults.clone();
                    probe.insert(key.to_string(), val.clone());
                    match serde_json::from_value::<GprilConfig>(Value::Object(probe)) {
                        Ok(_) => {
                            gpril_map.insert(key.to_string(), val.clone());
                        }
                        Err(e) => errors.push(format!("{key}: {e}")),
                    }
                }
                key => errors.push(format!("unknown key '{key}'")),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        out.gpril = serde_json::from_value(Value::Object(gpril_map))?;
        Ok(out)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Semantic problems of the whole configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.gpril.problems();
        match self.env.as_str() {
            "pointmass" => {}
            "tabular" => p.push("training runs on env = \"pointmass\"; tabular fixtures are used by oracle-check".into()),
            other => p.push(format!("env must be \"pointmass\" or \"tabular\", got \"{other}\"")),
        }
        if self.demo_file.is_none() {
            p.push("demo_file is required (config key or --demos)".into());
        }
        if self.mode == TrainMode::Bc && self.gpril.beta_pi <= 0.0 {
            p.push("bc mode needs beta_pi > 0".into());
        }
        p
    }
}

/// Resolve the run configuration for `train`: defaults, then the config
/// file, then `GPRIL_SEED`, then flags.
pub fn resolve_train_config(a: &TrainArgs, seed_env: Option<&str>) -> Result<RunConfig> {
    let base = RunConfig::with_gpril(if a.desk_scale { GprilConfig::desk_scale() } else { GprilConfig::default() });
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("config {}: {e}", path.display())]))?;
            RunConfig::from_value(&v, &base)?
        }
        None => base,
    };
    if let Some(seed) = parse_seed_env(seed_env)? {
        cfg.gpril.seed = seed;
    }
    let g = &mut cfg.gpril;
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = a.$field {
                g.$field = v;
            }
        };
    }
    flag!(gamma);
    flag!(beta_pi);
    flag!(beta_d);
    flag!(batch_size);
    flag!(n_b);
    flag!(n_pi);
    flag!(burnin);
    flag!(total_iterations);
    flag!(lr_model);
    flag!(lr_policy);
    flag!(eval_interval);
    flag!(eval_rollouts);
    flag!(seed);
    if let Some(m) = a.actor_mode {
        g.actor_mode = match m {
            ActorModeArg::Sync => ActorMode::Sync,
            ActorModeArg::Async => ActorMode::Async,
        };
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if cfg.mode == TrainMode::Bc {
        cfg.gpril.beta_d = 0.0;
    }
    if let Some(d) = &a.demos {
        cfg.demo_file = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs, seed_env: Option<&str>) -> Result<Outcome> {
    let cfg = resolve_train_config(a, seed_env)?;
    let mut problems = cfg.problems();
    let demos = match &cfg.demo_file {
        Some(path) => match DemoSet::load(path) {
            Ok(d) => Some(d),
            Err(e) => {
                problems.push(format!("cannot load demos {}: {e}", path.display()));
                None
            }
        },
        None => None,
    };
    if let Some(d) = &demos {
        problems.extend(cfg.gpril.problems_with_demos(d));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let demos = demos.expect("checked above");
    std::fs::create_dir_all(&cfg.out_dir)?;
    let env_cfg = PointMassConfig::default();
    let snapshot = serde_json::json!({
        "run": cfg.to_json(),
        "pointmass": env_cfg,
        "crate_version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(cfg.out_dir.join("config.json"), serde_json::to_vec_pretty(&snapshot)?)?;
    let out = train(&cfg.gpril, &env_cfg, &demos, &RunOutput { dir: Some(cfg.out_dir.clone()) })?;
    write_plots(&out.metrics, &cfg.out_dir)?;
    let last = out.metrics.last().expect("at least the initial row");
    Ok(Outcome::Done(format!(
        "trained {} iterations ({:?} mode): success_rate {} demo_loglik {} -> {}",
        cfg.gpril.total_iterations,
        cfg.mode,
        last.success_rate,
        last.demo_loglik,
        cfg.out_dir.display()
    )))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    if !a.checkpoint.exists() {
        return Err(Error::Config(vec![format!("checkpoint {} does not exist", a.checkpoint.display())]));
    }
    let (policy, normalizer) = load_policy(&a.checkpoint)?;
    let report = evaluate(&policy, &normalizer, &PointMassConfig::default(), a.rollouts, a.seed)?;
    // Checkpoints live in <run>/checkpoints/.
    let run_dir = a.checkpoint.parent().and_then(Path::parent).map(Path::to_path_buf);
    let metrics = a.metrics.clone().or_else(|| run_dir.as_ref().map(|d| d.join("metrics.csv")));
    let mut msg = serde_json::to_string(&report)?;
    if let Some(m) = metrics.filter(|m| m.exists()) {
        let dir = a.plot_dir.clone().or(run_dir).unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        write_plots(&read_metrics(&m)?, &dir)?;
        let _ = write!(msg, "\nplots written to {}", dir.display());
    }
    if let Some(dir) = a.checkpoint.parent().and_then(Path::parent) {
        std::fs::write(dir.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(Outcome::Done(msg))
}

/// Evaluation report for a checkpoint, without touching the filesystem
/// beyond reading it.
pub fn eval_checkpoint(path: &Path, rollouts: usize, seed: u64) -> Result<EvalReport> {
    let (policy, normalizer) = load_policy(path)?;
    evaluate(&policy, &normalizer, &PointMassConfig::default(), rollouts, seed)
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

/// One row of the oracle report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    /// Discount of the row, when the check depends on one.
    pub gamma: Option<f64>,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(check: &str, gamma: Option<f64>, measured: f64, tolerance: f64) -> Self {
        CheckRow { check: check.into(), gamma, measured, tolerance, pass: measured <= tolerance }
    }
}

/// Largest per-coordinate relative error of `est` against `reference`.
pub fn max_rel_error(est: &nalgebra::DMatrix<f64>, reference: &nalgebra::DMatrix<f64>) -> f64 {
    est.iter().zip(reference.iter()).map(|(e, r)| (e - r).abs() / r.abs().max(1e-12)).fold(0.0, f64::max)
}

/// Per-coordinate tolerance of the discounted gradient against finite
/// differences; the discount bias shrinks linearly in `1 − γ`.
pub fn disc_tolerance(gamma: f64) -> f64 {
    5.0 * (1.0 - gamma)
}

/// Run every tabular check. The fixture must carry policy logits.
pub fn oracle_checks(fixture: &TabularFixture, gammas: &[f64], mc_samples: usize, seed: u64) -> Result<Vec<CheckRow>> {
    oracle_checks_with(fixture, gammas, mc_samples, seed, disc_tolerance)
}

/// As [`oracle_checks`], with the discounted-gradient bound chosen by `disc_tol`.
pub fn oracle_checks_with(
    fixture: &TabularFixture,
    gammas: &[f64],
    mc_samples: usize,
    seed: u64,
    disc_tol: impl Fn(f64) -> f64,
) -> Result<Vec<CheckRow>> {
    let mdp = fixture.mdp()?;
    if !mdp.is_irreducible() {
        return Err(Error::NotErgodic("fixture MDP is not irreducible".into()));
    }
    let logits = fixture.policy_logits.clone().unwrap_or_else(|| vec![vec![0.0; mdp.n_actions]; mdp.n_states]);
    let policy = SoftmaxPolicy::new(logits)?;
    let o = TabularOracle::new(mdp, policy)?;
    let mut rows = Vec::new();
    let kernel = crate::oracle::state_kernel(&o.mdp, &o.policy);
    rows.push(CheckRow::new("stationary_residual", None, (kernel.tr_mul(&o.d) - &o.d).amax(), 1e-12));
    rows.push(CheckRow::new("stationary_sum", None, (o.d.sum() - 1.0).abs(), 1e-12));
    let q_norm = (0..o.n_states()).map(|r| (o.q.row(r).sum() - 1.0).abs()).fold(0.0, f64::max);
    rows.push(CheckRow::new("reversed_kernel_normalization", None, q_norm, 1e-12));
    let fd = o.grad_log_stationary_fd(1e-5)?;
    rows.push(CheckRow::new("recursion_identity", None, o.recursion_residual(&fd).amax(), 1e-8));
    let mut prev_err: Option<f64> = None;
    let mut sorted = gammas.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &g in &sorted {
        let b = o.predecessor_dist(g)?;
        let b_norm = (0..o.n_states()).map(|r| (b.row(r).sum() - 1.0).abs()).fold(0.0, f64::max);
        rows.push(CheckRow::new("predecessor_normalization", Some(g), b_norm, 1e-10));
        let (t, tail) = o.predecessor_dist_truncated(g, 20_000)?;
        rows.push(CheckRow::new("predecessor_series_agreement", Some(g), (&b - &t).amax(), 1e-10 + tail));
        let disc = o.grad_log_stationary_disc(g)?;
        rows.push(CheckRow::new("disc_vs_finite_difference", Some(g), max_rel_error(&disc, &fd), disc_tol(g)));
        let l2 = (&disc - &fd).norm();
        if let Some(p) = prev_err {
            // The bias must shrink as γ grows.
            rows.push(CheckRow::new("bias_shrinks_with_gamma", Some(g), l2 - p, -f64::EPSILON));
        }
        prev_err = Some(l2);
        let mut worst = 0.0f64;
        for s in 0..o.n_states() {
            for a in 0..o.n_actions() {
                if o.rho[(s, a)] <= 0.0 {
                    continue;
                }
                let (lhs, rhs) = o.policy_gradient_equiv(g, s, a)?;
                worst = worst.max((lhs - &rhs).norm() / rhs.norm().max(1e-300));
            }
        }
        rows.push(CheckRow::new("policy_gradient_equivalence", Some(g), worst, 1e-6));
        if mc_samples > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst_z = 0.0f64;
            for s_bar in 0..o.n_states() {
                let (mean, se) = o.monte_carlo_grad(g, s_bar, mc_samples, &mut rng)?;
                for k in 0..mean.len() {
                    let diff = (mean[k] - disc[(s_bar, k)]).abs();
                    let z = if se[k] > 0.0 { diff / se[k] } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
                    worst_z = worst_z.max(z);
                }
            }
            let m = o.n_states() * o.policy.num_params();
            rows.push(CheckRow::new("monte_carlo_bridge_max_z", Some(g), worst_z, max_z_bound(m)));
        }
    }
    Ok(rows)
}

/// Bound on the largest of `m` standard-normal deviations with the same
/// false-alarm rate as a single three-sigma test.
pub fn max_z_bound(m: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let single = 2.0 * Normal::standard().sf(3.0);
    Normal::standard().inverse_cdf(1.0 - single / (2.0 * m.max(1) as f64))
}

pub fn report_csv(rows: &[CheckRow]) -> String {
    let mut s = String::from("check,gamma,measured,tolerance,pass\n");
    for r in rows {
        let g = r.gamma.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:e},{:e},{}", r.check, g, r.measured, r.tolerance, r.pass);
    }
    s
}

pub fn cmd_oracle_check(a: &OracleArgs) -> Result<Outcome> {
    let fixture = match &a.fixture {
        Some(p) => TabularFixture::from_json_file(p)?,
        None => serde_json::from_str(include_str!("../fixtures/mdp4.json"))?,
    };
    if let Some(bad) = a.gammas.iter().find(|g| !(0.0..1.0).contains(*g)) {
        return Err(Error::Config(vec![format!("gamma {bad} is outside [0, 1)")]));
    }
    let rows = match a.disc_tolerance {
        Some(t) => oracle_checks_with(&fixture, &a.gammas, a.mc_samples, a.seed, |_| t)?,
        None => oracle_checks(&fixture, &a.gammas, a.mc_samples, a.seed)?,
    };
    let csv = report_csv(&rows);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, &csv)?;
    let failed: Vec<&CheckRow> = rows.iter().filter(|r| !r.pass).collect();
    if failed.is_empty() {
        Ok(Outcome::Done(format!("{} checks passed; report at {}", rows.len(), a.out.display())))
    } else {
        let names: Vec<String> = failed.iter().map(|r| format!("{} (gamma {:?}): {:e} > {:e}", r.check, r.gamma, r.measured, r.tolerance)).collect();
        Ok(Outcome::ChecksFailed(format!("{} of {} checks failed:\n{}", failed.len(), rows.len(), names.join("\n"))))
    }
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

pub fn cmd_plot(a: &PlotArgs) -> Result<Outcome> {
    let rows = read_metrics(&a.metrics)?;
    std::fs::create_dir_all(&a.out)?;
    let files = write_plots(&rows, &a.out)?;
    Ok(Outcome::Done(format!("wrote {}", files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))))
}

/// Learning curves as standalone SVG files in `dir`.
pub fn write_plots(rows: &[MetricsRow], dir: &Path) -> Result<Vec<PathBuf>> {
    let series = |f: fn(&MetricsRow) -> f64| -> Vec<(f64, f64)> { rows.iter().map(|r| (r.iter as f64, f(r))).collect() };
    let charts = [
        ("success_rate.svg", "success rate", vec![("success_rate", series(|r| r.success_rate))]),
        ("demo_loglik.svg", "demo log-likelihood", vec![("demo_loglik", series(|r| r.demo_loglik))]),
        (
            "model_loglik.svg",
            "predecessor model log-likelihood",
            vec![("B^s", series(|r| r.model_loglik_s)), ("B^a", series(|r| r.model_loglik_a))],
        ),
        ("episode_len.svg", "mean episode length", vec![("mean_episode_len", series(|r| r.mean_episode_len))]),
    ];
    let mut out = Vec::new();
    for (file, title, s) in charts {
        let path = dir.join(file);
        let named: Vec<(&str, &[(f64, f64)])> = s.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        std::fs::write(&path, svg_line_chart(title, "iteration", &named))?;
        out.push(path);
    }
    Ok(out)
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Minimal SVG line chart. Non-finite points are skipped.
pub fn svg_line_chart(title: &str, x_label: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    let (w, h, m) = (640.0, 400.0, 56.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    if !pts.is_empty() {
        x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), h - m + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, m - 6.0, sy(fy) + 4.0, tick(fy));
        let _ = writeln!(s, r##"<line x1="{m}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/>"##, sy(fy), w - m);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, xml_escape(x_label));
    for (i, (name, data)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = data
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, w - m - 120.0, m + 14.0 * i as f64, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Object map of a serializable value; used by tests and examples that
/// tweak configs.
pub fn object_of<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("serializable") {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}
