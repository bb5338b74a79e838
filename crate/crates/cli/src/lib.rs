//! Configuration ingestion, experiment orchestration, artifact persistence,
//! and the reproducibility layer over the qsdlab library.
//!
//! One experiment per invocation; composition happens in the shell. Every
//! artifact embeds the hash of the effective config, and a rerun with the
//! same config and seed writes byte-identical CSVs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use qsdlab_core::conditioned::{self, Law};
use qsdlab_core::experiment::{self, config_hash, format_float, ExperimentReport};
use qsdlab_core::lyapunov;
use qsdlab_core::model::{
    self, builtin_competition_model, check_hypotheses, find_fixed_point, AuditGrid, Model,
};
use qsdlab_core::ode;
use qsdlab_core::reversibility::{self, LatticeRates};
use qsdlab_core::sim::{self, scaled_point, State};
use qsdlab_core::spectral::{self, BoundaryPolicy};

pub const EXPERIMENTS: &[&str] = &[
    "simulate",
    "ode",
    "kurtz",
    "qsd-exact",
    "qsd-mc",
    "fleming-viot",
    "tv-curve",
    "mixture",
    "extinction-law",
    "lambda0-scaling",
    "descent-time",
    "drift-check",
    "four-domains",
    "hypotheses",
    "reversibility",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinSpec {
    pub name: String,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub d: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Builtin { builtin: BuiltinSpec },
    File { file: PathBuf },
    Inline { inline: Model },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Case2Params {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub c11: f64,
    pub c12: f64,
    pub c21: f64,
    pub c22: f64,
}

/// The experiment configuration file: model selection plus the knobs the
/// individual experiments read. Unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must match the invoked subcommand when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<Vec<u32>>,
    /// Start rule for descent runs: `floor(n0_factor * K * x*)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_hi: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_ball: Option<f64>,
    /// Nested-domain radii `[r_1, r_0, r_{-1}, r_{-2}]` around `n*`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_radii: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Closed-form competition-chain parameters for reversibility checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case2: Option<Case2Params>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum RunError {
    /// Config or input validation problems (exit code 1 before any work).
    Invalid(Vec<String>),
    /// The hypothesis audit failed and `--skip-audit` was not given
    /// (exit code 2); carries the report JSON.
    AuditFailed(String),
    /// An operation failed mid-run (exit code 1).
    Operation(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Invalid(diags) => {
                writeln!(f, "configuration invalid:")?;
                for d in diags {
                    writeln!(f, "  - {d}")?;
                }
                Ok(())
            }
            RunError::AuditFailed(report) => {
                writeln!(f, "hypothesis audit failed (rerun with --skip-audit to force):")?;
                write!(f, "{report}")
            }
            RunError::Operation(msg) => write!(f, "operation failed: {msg}"),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::AuditFailed(_) => 2,
            _ => 1,
        }
    }
}

fn op_err(e: impl std::fmt::Display) -> RunError {
    RunError::Operation(e.to_string())
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Invalid(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config(&text).map_err(|e| RunError::Invalid(vec![e]))
}

/// Closest experiment names by a crude distance, for typo diagnostics.
fn suggest(unknown: &str) -> Vec<&'static str> {
    let mut scored: Vec<(usize, &&str)> = EXPERIMENTS
        .iter()
        .map(|e| {
            let shared = e
                .chars()
                .zip(unknown.chars())
                .take_while(|(a, b)| a == b)
                .count();
            (e.len().abs_diff(unknown.len()) + (8 - shared.min(8)), e)
        })
        .collect();
    scored.sort();
    scored.iter().take(3).map(|(_, e)| **e).collect()
}

/// Schema, range, and referenced-file checks; no computation.
pub fn validate_config(experiment: &str, config: &ExperimentConfig) -> Vec<String> {
    let mut diags = Vec::new();
    if !EXPERIMENTS.contains(&experiment) {
        diags.push(format!(
            "unknown experiment {experiment:?}; closest matches: {:?}",
            suggest(experiment)
        ));
        return diags;
    }
    if let Some(declared) = &config.experiment {
        if declared != experiment {
            diags.push(format!(
                "config declares experiment {declared:?} but {experiment:?} was invoked"
            ));
        }
    }
    let needs_model = experiment != "reversibility" || config.case2.is_none();
    match &config.model {
        None if needs_model => diags.push("a model (builtin, file, or inline) is required".into()),
        Some(ModelSpec::File { file }) => {
            if !file.exists() {
                diags.push(format!("model file {} does not exist", file.display()));
            }
        }
        _ => {}
    }
    if let Some(k) = config.k {
        if !(k > 0.0) {
            diags.push(format!("k must be positive, got {k}"));
        }
    }
    if let Some(ks) = &config.ks {
        if ks.is_empty() {
            diags.push("ks must be non-empty".into());
        }
        for &k in ks {
            if !(k > 0.0) {
                diags.push(format!("every K must be positive, got {k}"));
            }
        }
    }
    let needs_k = matches!(
        experiment,
        "simulate"
            | "qsd-exact"
            | "qsd-mc"
            | "fleming-viot"
            | "tv-curve"
            | "mixture"
            | "extinction-law"
            | "four-domains"
            | "drift-check"
    );
    if needs_k && config.k.is_none() {
        diags.push(format!("experiment {experiment:?} requires k"));
    }
    let needs_ks = matches!(experiment, "kurtz" | "lambda0-scaling" | "descent-time");
    if needs_ks && config.ks.is_none() && config.k.is_none() {
        diags.push(format!("experiment {experiment:?} requires ks (or k)"));
    }
    let monte_carlo = matches!(
        experiment,
        "simulate" | "kurtz" | "qsd-mc" | "tv-curve" | "mixture" | "extinction-law" | "descent-time" | "four-domains"
    );
    if monte_carlo {
        match config.replicas {
            None => diags.push(format!("experiment {experiment:?} requires a replica count")),
            Some(0) => diags.push("replicas must be at least 1".into()),
            _ => {}
        }
    }
    if experiment == "fleming-viot" {
        match config.particles {
            None => diags.push("fleming-viot requires a particle count".into()),
            Some(p) if p < 2 => diags.push("fleming-viot needs at least 2 particles".into()),
            _ => {}
        }
    }
    if let Some(a) = config.alpha {
        if !(a > 0.0 && a < 0.5) {
            diags.push(format!("alpha must lie in (0, 1/2), got {a}"));
        }
    }
    if let Some(r) = &config.domain_radii {
        if !(r[0] < r[1] && r[1] < r[2] && r[2] < r[3]) {
            diags.push(format!("domain_radii must be strictly increasing, got {r:?}"));
        }
    }
    if let Some(g) = &config.t_grid {
        if g.windows(2).any(|w| w[0] >= w[1]) {
            diags.push("t_grid must be strictly increasing".into());
        }
    }
    diags
}

pub fn resolve_model(config: &ExperimentConfig) -> Result<Model, RunError> {
    let spec = config
        .model
        .as_ref()
        .ok_or_else(|| RunError::Invalid(vec!["missing model".into()]))?;
    match spec {
        ModelSpec::Builtin { builtin } => match builtin.name.as_str() {
            "competition" => builtin_competition_model(
                builtin.lambda.unwrap_or(2.0),
                builtin.mu.unwrap_or(1.0),
                builtin.kappa.unwrap_or(1.0),
                builtin.d.unwrap_or(2),
            )
            .map_err(op_err),
            "logistic" => model::builtin_logistic_model(
                builtin.lambda.unwrap_or(2.0),
                builtin.mu.unwrap_or(1.0),
                builtin.kappa.unwrap_or(1.0),
            )
            .map_err(op_err),
            "two-state" => Ok(spectral::two_state_fixture_model()),
            other => Err(RunError::Invalid(vec![format!(
                "unknown builtin model {other:?}; available: competition, logistic, two-state"
            )])),
        },
        ModelSpec::File { file } => {
            let text = std::fs::read_to_string(file).map_err(|e| {
                RunError::Invalid(vec![format!("cannot read {}: {e}", file.display())])
            })?;
            model::model_from_json(&text).map_err(|e| RunError::Invalid(vec![e]))
        }
        ModelSpec::Inline { inline } => Ok(inline.clone()),
    }
}

/// CLI-level options merged over the config before hashing.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub skip_audit: bool,
    pub threads: Option<usize>,
}

struct Ctx {
    config: ExperimentConfig,
    hash: u64,
    out_dir: PathBuf,
    results: serde_json::Value,
    artifacts: Vec<String>,
    provenance: Vec<String>,
    passed: bool,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(0)
    }
    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out_dir.join(name)
    }
    fn merge(&mut self, key: &str, value: serde_json::Value) {
        self.results[key] = value;
    }
}

fn audit_grid(config: &ExperimentConfig, model: &Model) -> Result<AuditGrid, RunError> {
    let mut grid = AuditGrid::for_model(model).map_err(op_err)?;
    if let Some(r) = config.audit_r {
        grid.r = r;
    }
    if let Some(l) = config.audit_l {
        grid.l = l;
    }
    if let Some(p) = config.audit_points {
        grid.points_per_axis = p;
    }
    Ok(grid)
}

/// Dispatches one experiment: validates, audits (unless skipped), runs the
/// library operations, writes artifacts, and returns the report. The exit
/// code contract: Ok(report) with `passed = false` still exits nonzero at
/// the binary level.
pub fn run(
    experiment: &str,
    mut config: ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentReport, RunError> {
    if let Some(seed) = options.seed {
        config.seed = Some(seed);
    }
    if let Some(dir) = &options.out_dir {
        config.out_dir = Some(dir.clone());
    }
    let diags = validate_config(experiment, &config);
    if !diags.is_empty() {
        return Err(RunError::Invalid(diags));
    }
    // the hash identifies the logical experiment: the output location does
    // not influence any computed byte
    let canonical = {
        let mut for_hash = config.clone();
        for_hash.out_dir = None;
        serde_json::to_string(&for_hash).expect("config serializes")
    };
    let hash = config_hash(&canonical);
    let out_dir = config
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("QSDLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qsdlab-out"));

    let started = Instant::now();
    let mut ctx = Ctx {
        config,
        hash,
        out_dir,
        results: json!({}),
        artifacts: Vec::new(),
        provenance: Vec::new(),
        passed: true,
    };

    // hypothesis audit gate for model-driven experiments
    let audited_experiments = experiment != "hypotheses" && experiment != "reversibility";
    if audited_experiments && !options.skip_audit {
        let model = resolve_model(&ctx.config)?;
        let grid = audit_grid(&ctx.config, &model)?;
        let horizon = ctx.config.horizon.unwrap_or(grid.l * 25.0);
        let report = check_hypotheses(&model, &grid, horizon).map_err(op_err)?;
        if !report.all_pass() {
            let doc = serde_json::to_string_pretty(&report).expect("report serializes");
            return Err(RunError::AuditFailed(doc));
        }
    }

    match experiment {
        "simulate" => run_simulate(&mut ctx)?,
        "ode" => run_ode(&mut ctx)?,
        "kurtz" => run_kurtz(&mut ctx)?,
        "qsd-exact" => run_qsd_exact(&mut ctx)?,
        "qsd-mc" => run_qsd_mc(&mut ctx)?,
        "fleming-viot" => run_fleming_viot(&mut ctx)?,
        "tv-curve" => run_tv_curve(&mut ctx)?,
        "mixture" => run_mixture(&mut ctx)?,
        "extinction-law" => run_extinction_law(&mut ctx)?,
        "lambda0-scaling" => run_lambda0_scaling(&mut ctx)?,
        "descent-time" => run_descent_time(&mut ctx)?,
        "drift-check" => run_drift_check(&mut ctx)?,
        "four-domains" => run_four_domains(&mut ctx)?,
        "hypotheses" => run_hypotheses(&mut ctx)?,
        "reversibility" => run_reversibility(&mut ctx)?,
        other => {
            return Err(RunError::Invalid(vec![format!(
                "unknown experiment {other:?}; closest matches: {:?}",
                suggest(other)
            )]))
        }
    }

    let report = ExperimentReport {
        experiment: experiment.to_string(),
        config_hash: format!("{hash:016x}"),
        wall_time_s: started.elapsed().as_secs_f64(),
        results: ctx.results,
        artifacts: ctx.artifacts,
        provenance: ctx.provenance,
        passed: ctx.passed,
    };
    report
        .write(&ctx.out_dir.join("report.json"))
        .map_err(op_err)?;
    Ok(report)
}

fn require_k(ctx: &Ctx) -> Result<f64, RunError> {
    ctx.config
        .k
        .ok_or_else(|| RunError::Invalid(vec!["k is required".into()]))
}

fn require_replicas(ctx: &Ctx) -> Result<usize, RunError> {
    ctx.config
        .replicas
        .ok_or_else(|| RunError::Invalid(vec!["replicas is required".into()]))
}

fn default_n0(ctx: &Ctx, model: &Model, k: f64) -> Result<State, RunError> {
    if let Some(n0) = &ctx.config.n0 {
        return Ok(State::new(n0.clone()));
    }
    let fp = find_fixed_point(model, &vec![1.0; model.d]).map_err(op_err)?;
    Ok(scaled_point(&fp.x_star, k))
}

fn run_simulate(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let replicas = require_replicas(ctx)?;
    let t_max = ctx.config.t_max.unwrap_or(10.0);
    let seed = ctx.seed();
    let n0 = default_n0(ctx, &model, k)?;

    let trajectories = sim::run_replicas(replicas, |r| {
        sim::simulate_with(&model, k, None, &n0, t_max, &mut sim::replica_rng(seed, r))
    })
    .map_err(op_err)?;

    let batch_path = ctx.path("batch.csv");
    experiment::write_batch(
        &batch_path,
        ctx.hash,
        seed,
        k,
        trajectories.iter().enumerate().map(|(r, traj)| {
            let event = match traj.terminal_reason {
                sim::TerminalReason::Absorbed => "absorbed",
                sim::TerminalReason::TMaxReached => "tmax",
                sim::TerminalReason::TargetHit => "target",
            };
            (
                r as u64,
                event.to_string(),
                *traj.times.last().unwrap(),
                traj.terminal_reason == sim::TerminalReason::TMaxReached,
            )
        }),
    )
    .map_err(op_err)?;

    let traj_path = ctx.path("trajectory.csv");
    experiment::write_trajectory(&traj_path, ctx.hash, &trajectories[0]).map_err(op_err)?;
    let absorbed = trajectories
        .iter()
        .filter(|t| t.terminal_reason == sim::TerminalReason::Absorbed)
        .count();
    ctx.merge(
        "simulate",
        json!({
            "operation": "sim.simulate",
            "replicas": replicas,
            "absorbed": absorbed,
            "mean_events": trajectories.iter().map(|t| t.times.len()).sum::<usize>() as f64
                / replicas as f64,
        }),
    );
    Ok(())
}

fn run_ode(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let x0 = ctx
        .config
        .x0
        .clone()
        .ok_or_else(|| RunError::Invalid(vec!["ode requires x0".into()]))?;
    let t_max = ctx.config.t_max.unwrap_or(50.0);
    let flow = ode::integrate(
        &model,
        &x0,
        t_max,
        ctx.config.rel_tol.unwrap_or(1e-8),
        ctx.config.abs_tol.unwrap_or(1e-10),
    )
    .map_err(op_err)?;
    let path = ctx.path("flow.csv");
    experiment::write_flow(&path, ctx.hash, &flow).map_err(op_err)?;
    ctx.merge(
        "ode",
        json!({
            "operation": "ode.integrate",
            "steps_accepted": flow.stats.accepted,
            "steps_rejected": flow.stats.rejected,
            "clips": flow.stats.clips,
            "final": flow.final_point(),
        }),
    );
    Ok(())
}

fn run_kurtz(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let ks = ctx
        .config
        .ks
        .clone()
        .or_else(|| ctx.config.k.map(|k| vec![k]))
        .expect("validated");
    let x0 = ctx
        .config
        .x0
        .clone()
        .ok_or_else(|| RunError::Invalid(vec!["kurtz requires x0".into()]))?;
    let t_bar = ctx.config.t.unwrap_or(5.0);
    let eps = ctx.config.epsilon.unwrap_or(0.2);
    let replicas = require_replicas(ctx)?;
    let seed = ctx.seed();
    let mut reports = Vec::new();
    for &k in &ks {
        let rep = ode::kurtz_deviation(&model, k, &x0, t_bar, eps, replicas, seed)
            .map_err(op_err)?;
        reports.push(rep);
    }
    let path = ctx.path("deviation.json");
    experiment::write_json(&path, ctx.hash, &json!({ "reports": reports })).map_err(op_err)?;
    // deviation frequencies should not increase with K (2σ slack)
    let mut monotone = true;
    for w in reports.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if let (Some(fa), Some(fb)) = (a.freq, b.freq) {
            let slack = (a.ci_high - a.ci_low) / 2.0 + (b.ci_high - b.ci_low) / 2.0;
            if fb > fa + slack {
                monotone = false;
            }
        }
    }
    ctx.passed &= monotone;
    ctx.merge(
        "kurtz",
        json!({
            "operation": "ode.kurtz_deviation",
            "freqs": reports.iter().map(|r| r.freq).collect::<Vec<_>>(),
            "monotone_in_k": monotone,
        }),
    );
    Ok(())
}

fn solve_for(ctx: &Ctx, model: &Model, k: f64) -> Result<(spectral::KilledGenerator, spectral::QsdSolution), RunError> {
    let box_hi = match &ctx.config.box_hi {
        Some(b) => b.clone(),
        None => spectral::default_box(model, k).map_err(op_err)?,
    };
    let policy = match ctx.config.boundary_policy.as_deref() {
        Some("kill") => BoundaryPolicy::Kill,
        Some("reflect") | None => BoundaryPolicy::Reflect,
        Some(other) => {
            return Err(RunError::Invalid(vec![format!(
                "unknown boundary policy {other:?} (reflect | kill)"
            )]))
        }
    };
    let gen = spectral::build_killed_generator(model, k, &box_hi, policy).map_err(op_err)?;
    let sol = spectral::solve_qsd(
        &gen,
        ctx.config.tol.unwrap_or(1e-10),
        ctx.config.max_iter.unwrap_or(400_000),
    )
    .map_err(op_err)?;
    Ok((gen, sol))
}

fn run_qsd_exact(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let (gen, sol) = solve_for(ctx, &model, k)?;
    let path = ctx.path("qsd.csv");
    experiment::write_qsd(&path, ctx.hash, &gen, &sol).map_err(op_err)?;
    let gap = if gen.n_states() <= spectral::DENSE_BUDGET {
        spectral::spectral_gap_estimate(&gen, 2).ok().and_then(|e| e.gap)
    } else {
        None
    };
    ctx.merge(
        "qsd_exact",
        json!({
            "operation": "spectral.solve_qsd",
            "lambda0": sol.lambda0,
            "mean_extinction_time": spectral::mean_extinction_from_qsd(&sol),
            "residual_left": sol.residual_left,
            "residual_right": sol.residual_right,
            "iterations": sol.iterations,
            "states": gen.n_states(),
            "spectral_gap": gap,
        }),
    );
    Ok(())
}

fn run_qsd_mc(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let replicas = require_replicas(ctx)?;
    let t = ctx.config.t.unwrap_or(1.0);
    let n0 = default_n0(ctx, &model, k)?;
    let out = conditioned::conditioned_law_mc(
        &model,
        k,
        &Law::dirac(n0),
        t,
        replicas,
        ctx.seed(),
    )
    .map_err(op_err)?;
    let path = ctx.path("law.csv");
    experiment::write_law(&path, ctx.hash, &out.law).map_err(op_err)?;
    ctx.merge(
        "qsd_mc",
        json!({
            "operation": "conditioned.conditioned_law_mc",
            "survivor_fraction": out.survivor_fraction,
            "survivors": out.survivors,
            "support_size": out.law.support.len(),
        }),
    );
    Ok(())
}

fn run_fleming_viot(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let particles = ctx.config.particles.expect("validated");
    let t_max = ctx.config.t_max.unwrap_or(100.0);
    let n0 = default_n0(ctx, &model, k)?;
    let fv = conditioned::fleming_viot_qsd(&model, k, particles, t_max, ctx.seed(), &n0)
        .map_err(op_err)?;
    let path = ctx.path("law.csv");
    experiment::write_law(&path, ctx.hash, &fv.law).map_err(op_err)?;
    ctx.merge(
        "fleming_viot",
        json!({
            "operation": "conditioned.fleming_viot_qsd",
            "respawns": fv.respawns,
            "restarts": fv.restarts,
            "support_size": fv.law.support.len(),
        }),
    );
    Ok(())
}

fn run_tv_curve(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let replicas = require_replicas(ctx)?;
    let t_grid = ctx
        .config
        .t_grid
        .clone()
        .unwrap_or_else(|| vec![1.0, 2.0, 4.0, 8.0]);
    let (gen, sol) = solve_for(ctx, &model, k)?;
    let nu = Law::from_qsd(&gen, &sol);
    let n0 = default_n0(ctx, &model, k)?;
    let curve = conditioned::tv_convergence_curve(
        &model,
        k,
        &Law::dirac(n0),
        &t_grid,
        replicas,
        ctx.seed(),
        &nu,
    )
    .map_err(op_err)?;
    let path = ctx.path("curve.csv");
    experiment::write_curve(
        &path,
        ctx.hash,
        curve.points.iter().map(|p| (p.t, p.tv, p.stderr)),
    )
    .map_err(op_err)?;
    ctx.passed &= curve.decreasing;
    ctx.merge(
        "tv_curve",
        json!({
            "operation": "conditioned.tv_convergence_curve",
            "decreasing": curve.decreasing,
            "fit": curve.fit,
            "points": curve.points,
        }),
    );
    Ok(())
}

fn run_mixture(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let replicas = require_replicas(ctx)?;
    let (gen, sol) = solve_for(ctx, &model, k)?;
    let n0 = default_n0(ctx, &model, k)?;
    let t = ctx.config.t.unwrap_or(3.0 * k.ln());
    let rep = conditioned::mixture_residual(&model, k, &n0, t, &gen, &sol, replicas, ctx.seed())
        .map_err(op_err)?;
    let path = ctx.path("mixture.json");
    experiment::write_json(&path, ctx.hash, &rep).map_err(op_err)?;
    ctx.merge(
        "mixture",
        json!({
            "operation": "conditioned.mixture_residual",
            "residual_tv": rep.residual_tv,
            "p_weight": rep.p_weight,
            "t": t,
        }),
    );
    Ok(())
}

fn run_extinction_law(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let replicas = require_replicas(ctx)?;
    let (gen, sol) = solve_for(ctx, &model, k)?;
    let t_max = ctx.config.t_max.unwrap_or(50.0 / sol.lambda0);
    let rep = conditioned::extinction_law_test(&model, k, &gen, &sol, replicas, t_max, ctx.seed())
        .map_err(op_err)?;
    let path = ctx.path("extinction.json");
    experiment::write_json(&path, ctx.hash, &rep).map_err(op_err)?;
    ctx.passed &= rep.ks_statistic < rep.ks_critical_1pct && rep.mean_z <= 3.0;
    ctx.merge(
        "extinction_law",
        json!({
            "operation": "conditioned.extinction_law_test",
            "mean_t0": rep.mean_t0,
            "expected_mean": rep.expected_mean,
            "mean_z": rep.mean_z,
            "ks_statistic": rep.ks_statistic,
            "ks_critical_1pct": rep.ks_critical_1pct,
            "censoring_notice": rep.censoring_notice,
        }),
    );
    Ok(())
}

fn run_lambda0_scaling(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let ks = ctx
        .config
        .ks
        .clone()
        .or_else(|| ctx.config.k.map(|k| vec![k]))
        .expect("validated");
    let table = spectral::lambda0_scaling(
        &model,
        &ks,
        ctx.config.box_factor.unwrap_or(4.0),
        ctx.config.tol.unwrap_or(1e-10),
        ctx.config.max_iter.unwrap_or(400_000),
    )
    .map_err(op_err)?;
    let path = ctx.path("scaling.csv");
    experiment::write_scaling(&path, ctx.hash, &table).map_err(op_err)?;
    if ks.len() >= 2 {
        ctx.passed &= table.slope_negative;
    }
    ctx.provenance
        .push("lambda0 per K from spectral.solve_qsd on the default box rule".into());
    ctx.merge(
        "lambda0_scaling",
        json!({
            "operation": "spectral.lambda0_scaling",
            "fit": table.fit,
            "slope_negative": table.slope_negative,
            "dropped": table.dropped,
        }),
    );
    Ok(())
}

fn run_descent_time(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let ks = ctx
        .config
        .ks
        .clone()
        .or_else(|| ctx.config.k.map(|k| vec![k]))
        .expect("validated");
    let replicas = require_replicas(ctx)?;
    let rule = match (&ctx.config.n0, ctx.config.n0_factor) {
        (Some(n0), _) => sim::StartRule::Fixed(n0.clone()),
        (None, Some(f)) => sim::StartRule::ScaledFixedPoint(f),
        (None, None) => sim::StartRule::ScaledFixedPoint(3.0),
    };
    let result = sim::descent_time_experiment(
        &model,
        &ks,
        &rule,
        ctx.config.rho.unwrap_or(2.0),
        replicas,
        ctx.config.t_max.unwrap_or(100.0),
        ctx.seed(),
    )
    .map_err(op_err)?;

    let path = ctx.path("descent.csv");
    experiment::write_batch(
        &path,
        ctx.hash,
        ctx.seed(),
        0.0,
        result.samples.iter().flat_map(|s| {
            let k = s.k;
            s.times
                .iter()
                .zip(&s.censor_flags)
                .enumerate()
                .map(move |(r, (t, c))| (r as u64, format!("k={k}"), *t, *c))
                .collect::<Vec<_>>()
        }),
    )
    .map_err(op_err)?;
    if ks.len() >= 2 {
        ctx.passed &= result.fit.map(|f| f.slope > 0.0).unwrap_or(false);
    }
    ctx.merge(
        "descent_time",
        json!({
            "operation": "sim.descent_time_experiment",
            "fit": result.fit,
            "means": result.samples.iter().map(|s| (s.k, s.mean_time)).collect::<Vec<_>>(),
            "flagged": result.samples.iter().any(|s| s.flagged),
        }),
    );
    Ok(())
}

fn run_drift_check(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let grid = audit_grid(&ctx.config, &model)?;
    let beta = match ctx.config.beta {
        Some(b) => b,
        None => {
            let horizon = ctx.config.horizon.unwrap_or(grid.l * 25.0);
            check_hypotheses(&model, &grid, horizon)
                .map_err(op_err)?
                .beta()
                .ok_or_else(|| RunError::Operation("H3 audit produced no positive beta".into()))?
        }
    };
    let r_ball = ctx.config.r_ball.unwrap_or(grid.r);
    let (alpha, report) = match (ctx.config.alpha, ctx.config.rho) {
        (Some(alpha), Some(rho)) => {
            let rep = lyapunov::verify_drift_bound(
                &model,
                k,
                alpha,
                beta,
                r_ball,
                rho,
                ctx.config.c_floor.unwrap_or(5.0),
            )
            .map_err(op_err)?;
            (alpha, rep)
        }
        _ => lyapunov::calibrate_drift(&model, k, beta, r_ball).map_err(op_err)?,
    };
    let path = ctx.path("drift.json");
    experiment::write_json(&path, ctx.hash, &report).map_err(op_err)?;
    // subsampled per-state ratios for inspection
    let stride = ((r_ball * k / 64.0).ceil() as u32).max(1);
    let rows = lyapunov::drift_scan_rows(&model, k, alpha, r_ball, stride).map_err(op_err)?;
    let scan_path = ctx.path("scan.csv");
    experiment::write_csv(
        &scan_path,
        ctx.hash,
        &format!(
            "{},ratio",
            (1..=model.d).map(|j| format!("n_{j}")).collect::<Vec<_>>().join(",")
        ),
        rows.iter().map(|(n, r)| {
            format!(
                "{},{}",
                n.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
                experiment::format_float(*r)
            )
        }),
    )
    .map_err(op_err)?;
    ctx.passed &= report.pass;
    ctx.provenance.push(format!(
        "alpha={alpha} selected by line search; beta={beta} from the H3 grid audit"
    ));
    ctx.merge(
        "drift_check",
        json!({
            "operation": "lyapunov.verify_drift_bound",
            "alpha": alpha,
            "beta": beta,
            "fitted_c": report.fitted_c,
            "pass": report.pass,
            "exhaustive": report.exhaustive,
            "states_scanned": report.states_scanned,
        }),
    );
    Ok(())
}

fn run_four_domains(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let k = require_k(ctx)?;
    let replicas = require_replicas(ctx)?;
    let alpha = ctx.config.alpha.unwrap_or(0.05);
    let fp = find_fixed_point(&model, &vec![1.0; model.d]).map_err(op_err)?;
    let n_star = scaled_point(&fp.x_star, k);
    let radii = ctx.config.domain_radii.unwrap_or_else(|| {
        let s = k.sqrt();
        [2.5 * s, 3.0 * s, 5.0 * s, 6.2 * s]
    });
    let domains = sim::NestedBalls {
        center: n_star.coords().to_vec(),
        radii,
    };
    let center = n_star.coords().to_vec();
    let psi = move |n: &[u32]| {
        let mut d2 = 0.0;
        for (a, b) in n.iter().zip(&center) {
            let v = f64::from(*a) - f64::from(*b);
            d2 += v * v;
        }
        (alpha / k * d2).exp()
    };
    let t = ctx.config.t.unwrap_or(10.0);
    let validation =
        sim::four_domains_validation(&model, k, &domains, &psi, t, replicas, ctx.seed())
            .map_err(op_err)?;
    let constants = lyapunov::four_domains_constants(
        validation.a0,
        validation.a1_prime,
        validation.a2_dprime,
        validation.lambda,
    );
    let path = ctx.path("four_domains.json");
    experiment::write_json(
        &path,
        ctx.hash,
        &json!({ "validation": validation, "constants": constants.as_ref().ok() }),
    )
    .map_err(op_err)?;
    if let Some(bound) = validation.analytic_bound {
        ctx.passed &= validation.empirical >= bound - 3.0 * validation.stderr;
    }
    ctx.merge(
        "four_domains",
        json!({
            "operation": "sim.four_domains_validation + lyapunov.four_domains_constants",
            "empirical": validation.empirical,
            "analytic_bound": validation.analytic_bound,
            "lambda": validation.lambda,
            "applicable": validation.analytic_bound.is_some(),
        }),
    );
    Ok(())
}

fn run_hypotheses(ctx: &mut Ctx) -> Result<(), RunError> {
    let model = resolve_model(&ctx.config)?;
    let grid = audit_grid(&ctx.config, &model)?;
    let horizon = ctx.config.horizon.unwrap_or(grid.l * 25.0);
    let report = check_hypotheses(&model, &grid, horizon).map_err(op_err)?;
    let path = ctx.path("hypotheses.json");
    experiment::write_json(&path, ctx.hash, &report).map_err(op_err)?;
    ctx.passed &= report.all_pass();
    ctx.merge(
        "hypotheses",
        json!({
            "operation": "model.check_hypotheses",
            "all_pass": report.all_pass(),
            "checks": report.checks.iter().map(|c| json!({
                "id": c.id, "verdict": c.verdict, "margin": c.margin,
            })).collect::<Vec<_>>(),
        }),
    );
    Ok(())
}

fn run_reversibility(ctx: &mut Ctx) -> Result<(), RunError> {
    let (rates, closed_form) = if let Some(p) = &ctx.config.case2 {
        let rates = LatticeRates::competition_2d(
            [p.lambda1, p.lambda2],
            [p.mu1, p.mu2],
            [[p.c11, p.c12], [p.c21, p.c22]],
        );
        let closed = reversibility::case2_closed_form_check(
            p.lambda1,
            p.lambda2,
            p.mu1,
            p.mu2,
            [[p.c11, p.c12], [p.c21, p.c22]],
        )
        .map_err(op_err)?;
        (rates, Some(closed))
    } else {
        let model = resolve_model(&ctx.config)?;
        let k = require_k(ctx)?;
        (LatticeRates::from_scaled_model(&model, k), None)
    };
    let box_hi = ctx.config.box_hi.clone().unwrap_or_else(|| vec![12; rates.d]);
    let tol = ctx.config.tol.unwrap_or(1e-9);
    let report = reversibility::circuit_criterion(&rates, &box_hi, tol).map_err(op_err)?;
    if let Some(closed) = &closed_form {
        // the audit and the closed form must agree on case2 instances
        ctx.passed &= closed.reversible == report.reversible;
    }
    if report.reversible && rates.d >= 1 {
        let lo = vec![1u32; rates.d];
        if box_hi.iter().all(|&h| h >= 1) {
            match reversibility::construct_reversible_measure(&rates, &lo, &box_hi, &lo) {
                Ok(measure) => {
                    let path = ctx.path("pi.csv");
                    experiment::write_log_weights(&path, ctx.hash, &measure).map_err(op_err)?;
                }
                Err(e) => ctx
                    .provenance
                    .push(format!("pi construction skipped: {e}")),
            }
        }
    }
    let path = ctx.path("reversibility.json");
    experiment::write_json(
        &path,
        ctx.hash,
        &json!({ "circuit": report, "closed_form": closed_form }),
    )
    .map_err(op_err)?;
    ctx.merge(
        "reversibility",
        json!({
            "operation": "reversibility.circuit_criterion",
            "reversible": report.reversible,
            "worst_log_deviation": report.worst_log_deviation,
            "audited": report.audited,
            "skipped": report.skipped,
        }),
    );
    Ok(())
}

/// Formats a float exactly like the artifact writers (17 significant
/// digits), re-exported for the binary's summary output.
pub fn display_float(x: f64) -> String {
    format_float(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_config() -> ExperimentConfig {
        parse_config(
            r#"{
                "model": {"builtin": {"name": "two-state"}},
                "k": 1.0,
                "box_hi": [2],
                "seed": 7
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn validate_flags_missing_pieces() {
        let config = two_state_config();
        let diags = validate_config("qsd-mc", &config);
        assert!(diags.iter().any(|d| d.contains("replica")), "{diags:?}");
        assert!(validate_config("qsd-exact", &config).is_empty());
    }

    #[test]
    fn validate_rejects_bad_k() {
        let mut config = two_state_config();
        config.k = Some(0.0);
        let diags = validate_config("qsd-exact", &config);
        assert!(diags.iter().any(|d| d.contains("k must be positive")));
    }

    #[test]
    fn unknown_experiment_suggests_names() {
        let config = two_state_config();
        let diags = validate_config("qsd-exactt", &config);
        assert!(diags[0].contains("qsd-exact"), "{diags:?}");
    }

    #[test]
    fn qsd_exact_on_the_fixture_reports_lambda0() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = two_state_config();
        config.out_dir = Some(dir.path().to_path_buf());
        let opts = RunOptions {
            skip_audit: true,
            ..RunOptions::default()
        };
        let report = run("qsd-exact", config, &opts).unwrap();
        let lambda0 = report.results["qsd_exact"]["lambda0"].as_f64().unwrap();
        assert!((lambda0 - (2.0 - 2f64.sqrt())).abs() < 1e-9);
        assert!(dir.path().join("qsd.csv").exists());
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn audit_gate_blocks_without_skip() {
        // the two-state fixture violates H1 away from the origin
        let dir = tempfile::tempdir().unwrap();
        let mut config = two_state_config();
        config.out_dir = Some(dir.path().to_path_buf());
        let err = run("qsd-exact", config, &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn competition_passes_the_audit_gate() {
        let dir = tempfile::tempdir().unwrap();
        let config = parse_config(&format!(
            r#"{{
                "model": {{"builtin": {{"name": "competition", "lambda": 2.0, "mu": 1.0, "kappa": 1.0, "d": 2}}}},
                "k": 4.0,
                "audit_r": 12.0,
                "audit_l": 8.0,
                "seed": 3,
                "out_dir": {:?}
            }}"#,
            dir.path()
        ))
        .unwrap();
        let report = run("qsd-exact", config, &RunOptions::default()).unwrap();
        assert!(report.passed);
    }
}
