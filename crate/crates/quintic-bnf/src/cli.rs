//! Experiment orchestration behind the `qbnf` binary.
//!
//! A run resolves a JSON configuration (or a previous run's manifest) plus command-line
//! overrides, executes one subcommand, writes its artifacts and a `manifest.json`, and maps
//! the outcome to an exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::budget::Budget;
use crate::dynamics::{
    action_drift, integrate, plan_gamma, plan_parameters, random_state, strichartz_scan, DriftConfig, IntegrateOptions,
    PlanInputs,
};
use crate::nf::{birkhoff, check_krgamma, transform_state, Direction, NormalFormConfig};
use crate::plot::{line_plot, Axes, Series};
use crate::poly::{build_p6, build_z2, ModeSet};
use crate::resonance::{certify_strong, certify_weak, sample_conv_potential, sample_mult_potential, CosineSeries, NRBounds, NRKind};
use crate::spectral::{freqs_conv, small_divisor, strichartz_identity_check, FrequencySet, SupNormOptions};
use crate::sturm::{dirichlet_eig, refinement_gap, sobolev_equivalence, verify_ef_decay, verify_ev_asymptotics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_ASSERTION: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Budget(String),
    #[error(transparent)]
    Runtime(crate::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Budget(_) => EXIT_BUDGET,
            CliError::Runtime(_) | CliError::Io { .. } => EXIT_RUNTIME,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        match e {
            e @ crate::Error::BudgetExceeded(_) => CliError::Budget(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: crate::Error) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "qbnf", version, about = "Birkhoff normal forms and stability experiments for truncated quintic NLS")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// JSON configuration or a previous run's manifest.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of ascent starts for sup-norm lower bounds.
    #[arg(long, global = true)]
    pub multistart: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Birkhoff normal form of Z2 + P6 with conjugation and tail checks.
    NormalForm {
        /// Half-width M of the window [-M, M].
        #[arg(long)]
        modes: Option<u32>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        /// JSON array with one real potential coefficient per mode.
        #[arg(long)]
        potential: Option<PathBuf>,
    },
    /// Integrate the truncated system and stream the trajectory to CSV.
    Simulate,
    /// Action-drift scaling over an eps sweep.
    Drift,
    /// Small-divisor certification of a frequency set.
    Certify {
        #[arg(long, value_enum)]
        kind: Option<CertifyKind>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        qmax: Option<usize>,
        #[arg(long)]
        m1max: Option<u32>,
        #[arg(long)]
        hmax: Option<u32>,
        /// Switches to a seeded Gaussian potential with this decay.
        #[arg(long)]
        s_star: Option<f64>,
    },
    /// Dirichlet Sturm-Liouville eigenbasis checks.
    Sturm,
    /// Growth of the sextic interaction norm over windows.
    Strichartz,
    /// Parameter planner.
    Plan {
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Exit with status 2 when the plan is infeasible.
        #[arg(long)]
        require_feasible: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    NormalForm,
    Simulate,
    Drift,
    Certify,
    Sturm,
    Strichartz,
    Plan,
}

impl Command {
    fn name(&self) -> CommandName {
        match self {
            Command::NormalForm { .. } => CommandName::NormalForm,
            Command::Simulate => CommandName::Simulate,
            Command::Drift => CommandName::Drift,
            Command::Certify { .. } => CommandName::Certify,
            Command::Sturm => CommandName::Sturm,
            Command::Strichartz => CommandName::Strichartz,
            Command::Plan { .. } => CommandName::Plan,
        }
    }
}

/// Either a window half-width or an explicit mode list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModeSpec {
    Window(u32),
    List(Vec<i32>),
}

impl ModeSpec {
    fn resolve(&self) -> CliResult<ModeSet> {
        match self {
            ModeSpec::Window(m) => Ok(ModeSet::window(*m)),
            ModeSpec::List(v) => {
                let m = v.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
                ModeSet::new(v.clone(), m).map_err(config_err)
            }
        }
    }
}

/// Convolution potential defining the frequencies `k^2 + sqrt(2 pi) V_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Potential {
    Free,
    /// `V_k = X_k <k>^{-s_star}` drawn from the run seed.
    Gaussian { s_star: f64 },
    /// One real coefficient per mode.
    Values { v: Vec<f64> },
    /// JSON file holding an array of coefficients.
    File { path: PathBuf },
}

impl Potential {
    fn frequencies(&self, ms: &ModeSet, seed: u64) -> CliResult<FrequencySet> {
        let v: Vec<Complex64> = match self {
            Potential::Free => return FrequencySet::free(ms).map_err(config_err),
            Potential::Gaussian { s_star } => sample_conv_potential(*s_star, ms, seed).map_err(config_err)?,
            Potential::Values { v } => v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            Potential::File { path } => {
                let text = read(path)?;
                let v: Vec<f64> = parse_json(&text, path)?;
                v.into_iter().map(|x| Complex64::new(x, 0.0)).collect()
            }
        };
        freqs_conv(&v, ms).map_err(config_err)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub max_keys: usize,
    pub max_enumeration: u64,
    pub wall_clock_secs: Option<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { max_keys: 5_000_000, max_enumeration: 10_000_000_000, wall_clock_secs: None }
    }
}

impl BudgetConfig {
    fn build(&self) -> CliResult<Budget> {
        let wall = match self.wall_clock_secs {
            Some(s) if !(s > 0.0 && s.is_finite()) => return Err(CliError::Config(format!("wall_clock_secs = {s} must be positive"))),
            Some(s) => Some(Duration::from_secs_f64(s)),
            None => None,
        };
        Ok(Budget::new(self.max_keys, self.max_enumeration, wall))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupNormConfig {
    pub starts: usize,
    pub steps: usize,
    pub work_budget: f64,
}

impl Default for SupNormConfig {
    fn default() -> Self {
        let d = SupNormOptions::default();
        Self { starts: d.starts, steps: d.steps, work_budget: d.work_budget }
    }
}

impl SupNormConfig {
    fn options(&self, seed: u64) -> SupNormOptions {
        SupNormOptions { starts: self.starts, steps: self.steps, seed, work_budget: self.work_budget }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalFormTask {
    pub modes: ModeSpec,
    pub potential: Potential,
    pub sigma: f64,
    pub c6: f64,
    pub p: usize,
    pub r: usize,
    pub gamma: f64,
    /// Defaults to `2 r`.
    pub j_max: Option<usize>,
    pub a_const: f64,
    pub b_p: f64,
    pub flow_dt: f64,
    /// Random states at `|u| = eps_r / 4` used for the conjugation check.
    pub conjugation_samples: usize,
}

impl Default for NormalFormTask {
    fn default() -> Self {
        Self {
            modes: ModeSpec::Window(2),
            potential: Potential::Gaussian { s_star: 1.0 },
            sigma: 1.0,
            c6: 1.0,
            p: 3,
            r: 4,
            gamma: 1e-3,
            j_max: None,
            a_const: 2.0,
            b_p: 100.0,
            flow_dt: 0.1,
            conjugation_samples: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateTask {
    pub modes: ModeSpec,
    pub potential: Potential,
    pub sigma: f64,
    pub c6: f64,
    pub eps: f64,
    pub t_final: f64,
    pub dt: f64,
    pub sample_every: usize,
    /// Largest accepted relative drift of `||u||^2`.
    pub norm_tol: f64,
}

impl Default for SimulateTask {
    fn default() -> Self {
        Self {
            modes: ModeSpec::Window(3),
            potential: Potential::Gaussian { s_star: 1.0 },
            sigma: 1.0,
            c6: 1.0,
            eps: 0.3,
            t_final: 100.0,
            dt: 0.01,
            sample_every: 10,
            norm_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftTask {
    pub modes: ModeSpec,
    pub potential: Potential,
    pub sigma: f64,
    pub c6: f64,
    pub mode: i32,
    pub eps: Vec<f64>,
    pub t_final: f64,
    pub dt: f64,
    /// Normal form order used for the transformed actions and the resonance check.
    pub r: usize,
    pub j_max: usize,
    /// Strong non-resonance exponent; `gamma = rho (2 <k>)^{-exp(alpha r)}`.
    pub alpha: f64,
    pub bounds: NRBounds,
    pub transform_every: usize,
    pub min_exponent: Option<f64>,
    pub plan: Option<PlanInputs>,
}

impl Default for DriftTask {
    fn default() -> Self {
        Self {
            modes: ModeSpec::Window(5),
            potential: Potential::Gaussian { s_star: 1.0 },
            sigma: 1.0,
            c6: 1.0,
            mode: 1,
            eps: vec![0.1, 0.07, 0.05],
            t_final: 1e3,
            dt: 0.003,
            r: 3,
            j_max: 4,
            alpha: 1.0,
            bounds: NRBounds { q_max: 6, m1_max: 6, h_max: 5, a_max: 100 },
            transform_every: 100,
            min_exponent: Some(5.5),
            plan: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CertifyKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyTask {
    pub potential: Potential,
    pub kind: CertifyKind,
    pub alpha: f64,
    pub s_star: f64,
    pub bounds: NRBounds,
}

impl Default for CertifyTask {
    fn default() -> Self {
        Self {
            potential: Potential::Free,
            kind: CertifyKind::Strong,
            alpha: 1.0,
            s_star: 1.0,
            bounds: NRBounds { q_max: 3, m1_max: 4, h_max: 7, a_max: 100 },
        }
    }
}

/// Even potential for the Dirichlet problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SturmPotential {
    /// `sum X_k <k>^{-s_star} cos(k x)` drawn from the run seed.
    Random { s_star: f64, order: usize },
    Cosine { mean: f64, coeffs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SturmTask {
    pub potential: SturmPotential,
    pub n_max: usize,
    pub n_basis: usize,
    /// Exponent in the eigenfunction decay weight.
    pub decay_sigma: f64,
    pub sobolev_s: Vec<f64>,
    pub sobolev_samples: usize,
    /// Accepted relative change of the eigenvalue constant under basis doubling.
    pub stability_tol: f64,
    pub sobolev_max_constant: f64,
}

impl Default for SturmTask {
    fn default() -> Self {
        Self {
            potential: SturmPotential::Random { s_star: 2.0, order: 64 },
            n_max: 50,
            n_basis: 200,
            decay_sigma: 0.5,
            sobolev_s: vec![0.0, 1.0],
            sobolev_samples: 200,
            stability_tol: 0.05,
            sobolev_max_constant: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrichartzTask {
    pub m_list: Vec<u32>,
    pub sigma: f64,
    pub c6: f64,
    pub identity_checks: usize,
    /// Largest window used by the quadrature identity checks.
    pub identity_max_m: u32,
    pub identity_tol: f64,
}

impl Default for StrichartzTask {
    fn default() -> Self {
        Self { m_list: vec![1, 2, 4, 8, 16], sigma: 1.0, c6: 1.0, identity_checks: 20, identity_max_m: 4, identity_tol: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanTask {
    pub eps: f64,
    pub nu: f64,
    pub alpha: f64,
    pub s: f64,
    pub beta_s: f64,
    pub rho: f64,
    pub kappa: f64,
    pub c: f64,
    pub k: i32,
    pub require_feasible: bool,
}

impl Default for PlanTask {
    fn default() -> Self {
        Self { eps: 1e-2, nu: 1.0, alpha: 1.0, s: 1.0, beta_s: 1.0, rho: 0.5, kappa: 1.0, c: 1.0, k: 1, require_feasible: false }
    }
}

impl PlanTask {
    fn inputs(&self) -> PlanInputs {
        PlanInputs {
            eps: self.eps,
            nu: self.nu,
            alpha: self.alpha,
            s: self.s,
            beta_s: self.beta_s,
            rho: self.rho,
            kappa: self.kappa,
            c: self.c,
            k: self.k,
        }
    }
}

/// Full run description. Only the section of the selected command is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandName>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub sup_norm: SupNormConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_form: Option<NormalFormTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifyTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sturm: Option<SturmTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strichartz: Option<StrichartzTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanTask>,
}

fn default_threads() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("qbnf-out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            threads: default_threads(),
            out: default_out(),
            budget: BudgetConfig::default(),
            sup_norm: SupNormConfig::default(),
            normal_form: None,
            simulate: None,
            drift: None,
            certify: None,
            sturm: None,
            strichartz: None,
            plan: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// Written next to the artifacts; accepted back by `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub package_version: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub exit_code: i32,
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> CliResult<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!(
            "{}: line {}, column {}, field `{}`: {}",
            origin.display(),
            inner.line(),
            inner.column(),
            path,
            inner
        ))
    })
}

/// Reads a configuration file or a manifest.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = read(path)?;
    let is_manifest = serde_json::from_str::<serde_json::Value>(&text)
        .map(|v| v.get("manifest_version").is_some())
        .unwrap_or(false);
    if is_manifest {
        Ok(parse_json::<Manifest>(&text, path)?.config)
    } else {
        parse_json(&text, path)
    }
}

/// Applies command-line overrides and fills the selected section with defaults.
pub fn resolve(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = cli.multistart {
        cfg.sup_norm.starts = m;
    }
    let name = match (&cli.command, cfg.command) {
        (Some(c), Some(n)) if c.name() != n => {
            return Err(CliError::Config(format!("subcommand {:?} conflicts with config command {:?}", c.name(), n)))
        }
        (Some(c), _) => c.name(),
        (None, Some(n)) => n,
        (None, None) => return Err(CliError::Config("no subcommand given and the config names none".into())),
    };
    cfg.command = Some(name);
    match name {
        CommandName::NormalForm => {
            let t = cfg.normal_form.get_or_insert_with(Default::default);
            if let Some(Command::NormalForm { modes, order, gamma, potential }) = &cli.command {
                if let Some(m) = modes {
                    t.modes = ModeSpec::Window(*m);
                }
                if let Some(r) = order {
                    t.r = *r;
                }
                if let Some(g) = gamma {
                    t.gamma = *g;
                }
                if let Some(p) = potential {
                    t.potential = Potential::File { path: p.clone() };
                }
            }
        }
        CommandName::Simulate => {
            cfg.simulate.get_or_insert_with(Default::default);
        }
        CommandName::Drift => {
            cfg.drift.get_or_insert_with(Default::default);
        }
        CommandName::Certify => {
            let t = cfg.certify.get_or_insert_with(Default::default);
            if let Some(Command::Certify { kind, alpha, qmax, m1max, hmax, s_star }) = &cli.command {
                if let Some(k) = kind {
                    t.kind = *k;
                }
                if let Some(a) = alpha {
                    t.alpha = *a;
                }
                if let Some(q) = qmax {
                    t.bounds.q_max = *q;
                }
                if let Some(m) = m1max {
                    t.bounds.m1_max = *m;
                }
                if let Some(h) = hmax {
                    t.bounds.h_max = *h;
                }
                if let Some(s) = s_star {
                    t.s_star = *s;
                    t.potential = Potential::Gaussian { s_star: *s };
                }
            }
        }
        CommandName::Sturm => {
            cfg.sturm.get_or_insert_with(Default::default);
        }
        CommandName::Strichartz => {
            cfg.strichartz.get_or_insert_with(Default::default);
        }
        CommandName::Plan => {
            let t = cfg.plan.get_or_insert_with(Default::default);
            if let Some(Command::Plan { eps, nu, alpha, require_feasible }) = &cli.command {
                if let Some(e) = eps {
                    t.eps = *e;
                }
                if let Some(n) = nu {
                    t.nu = *n;
                }
                if let Some(a) = alpha {
                    t.alpha = *a;
                }
                t.require_feasible |= require_feasible;
            }
        }
    }
    Ok(cfg)
}

/// Structural checks done before anything is written.
pub fn validate(cfg: &ExperimentConfig) -> CliResult<()> {
    let bad = |m: String| Err(CliError::Config(m));
    if cfg.threads == 0 {
        return bad("threads must be at least 1".into());
    }
    if cfg.sup_norm.starts == 0 || cfg.sup_norm.steps == 0 {
        return bad("sup_norm starts and steps must be positive".into());
    }
    cfg.budget.build()?;
    match cfg.command {
        Some(CommandName::NormalForm) => {
            let t = cfg.normal_form.as_ref().expect("resolved");
            let ms = t.modes.resolve()?;
            t.potential.frequencies(&ms, cfg.seed)?;
            nf_config(t).validate().map_err(config_err)?;
            if t.c6 <= 0.0 || t.sigma.abs() != 1.0 {
                return bad("need c6 > 0 and sigma = +-1".into());
            }
        }
        Some(CommandName::Simulate) => {
            let t = cfg.simulate.as_ref().expect("resolved");
            let ms = t.modes.resolve()?;
            t.potential.frequencies(&ms, cfg.seed)?;
            if !(t.eps > 0.0 && t.dt > 0.0 && t.t_final >= 0.0 && t.sample_every > 0) {
                return bad("simulate needs eps > 0, dt > 0, t_final >= 0, sample_every >= 1".into());
            }
        }
        Some(CommandName::Drift) => {
            let t = cfg.drift.as_ref().expect("resolved");
            let ms = t.modes.resolve()?;
            t.potential.frequencies(&ms, cfg.seed)?;
            t.bounds.validate().map_err(config_err)?;
            if ms.position(t.mode).is_none() {
                return bad(format!("watched mode {} is not in the mode set", t.mode));
            }
            if t.eps.is_empty() || t.eps.iter().any(|e| !(*e > 0.0)) || !(t.dt > 0.0) || t.transform_every == 0 {
                return bad("drift needs positive eps values, dt > 0 and transform_every >= 1".into());
            }
            if let Some(p) = &t.plan {
                plan_parameters(p).map_err(config_err)?;
            }
        }
        Some(CommandName::Certify) => {
            let t = cfg.certify.as_ref().expect("resolved");
            t.bounds.validate().map_err(config_err)?;
            t.potential.frequencies(&ModeSet::window(t.bounds.h_max), cfg.seed)?;
        }
        Some(CommandName::Sturm) => {
            let t = cfg.sturm.as_ref().expect("resolved");
            if t.n_max == 0 || t.n_basis < 4 * t.n_max {
                return bad("sturm needs n_max >= 1 and n_basis >= 4 n_max".into());
            }
            if let SturmPotential::Random { s_star, .. } = t.potential {
                if !(s_star > 1.5) {
                    return bad(format!("s_star = {s_star} must exceed 3/2"));
                }
            }
        }
        Some(CommandName::Strichartz) => {
            let t = cfg.strichartz.as_ref().expect("resolved");
            if t.m_list.is_empty() || t.m_list.windows(2).any(|w| w[1] <= w[0]) || t.m_list[0] == 0 {
                return bad("m_list must be nonempty, positive and increasing".into());
            }
        }
        Some(CommandName::Plan) => {
            plan_parameters(&cfg.plan.as_ref().expect("resolved").inputs()).map_err(config_err)?;
        }
        None => return bad("no command selected".into()),
    }
    Ok(())
}

fn nf_config(t: &NormalFormTask) -> NormalFormConfig {
    let mut c = NormalFormConfig::new(t.p, t.r, t.gamma);
    c.j_max = t.j_max.unwrap_or(2 * t.r);
    c.a_const = t.a_const;
    c.b_p = t.b_p;
    c.flow_dt = t.flow_dt;
    c
}

struct Sink {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Sink {
    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

/// Executes a resolved, validated configuration.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunOutcome> {
    validate(cfg)?;
    let budget = cfg.budget.build()?;
    fs::create_dir_all(&cfg.out).map_err(|source| CliError::Io { path: cfg.out.clone(), source })?;
    let mut sink = Sink { dir: cfg.out.clone(), artifacts: Vec::new() };
    let checks = match cfg.command.expect("validated") {
        CommandName::NormalForm => run_normal_form(cfg, cfg.normal_form.as_ref().expect("resolved"), &budget, &mut sink)?,
        CommandName::Simulate => run_simulate(cfg, cfg.simulate.as_ref().expect("resolved"), &mut sink)?,
        CommandName::Drift => run_drift(cfg, cfg.drift.as_ref().expect("resolved"), &budget, &mut sink)?,
        CommandName::Certify => run_certify(cfg, cfg.certify.as_ref().expect("resolved"), &budget, &mut sink)?,
        CommandName::Sturm => run_sturm(cfg, cfg.sturm.as_ref().expect("resolved"), &mut sink)?,
        CommandName::Strichartz => run_strichartz(cfg, cfg.strichartz.as_ref().expect("resolved"), &budget, &mut sink)?,
        CommandName::Plan => run_plan(cfg.plan.as_ref().expect("resolved"), &mut sink)?,
    };
    let mut artifacts = sink.artifacts.clone();
    artifacts.push("manifest.json".into());
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        artifacts,
        checks,
    };
    sink.json("manifest.json", &manifest)?;
    let exit_code = if manifest.checks.iter().all(|c| c.passed) { EXIT_OK } else { EXIT_ASSERTION };
    Ok(RunOutcome { manifest, exit_code })
}

fn run_normal_form(cfg: &ExperimentConfig, t: &NormalFormTask, budget: &Budget, sink: &mut Sink) -> CliResult<Vec<Check>> {
    let ms = t.modes.resolve()?;
    let omega = t.potential.frequencies(&ms, cfg.seed)?;
    let z2 = build_z2(&omega);
    let p6 = build_p6(&ms, t.sigma, t.c6);
    let nfc = nf_config(t);
    let res = birkhoff(&z2, &p6, &omega, &nfc, &cfg.sup_norm.options(cfg.seed), budget)?;
    sink.json("normal_form.json", &res.to_json())?;

    let mut checks = Vec::new();
    let w = omega.omega();
    let bad_keys: usize = res
        .resonant
        .iter()
        .filter(|(j, _)| **j <= t.r)
        .map(|(_, q)| q.terms().iter().filter(|term| small_divisor(w, &term.key).abs() > t.gamma).count())
        .sum();
    checks.push(Check::new("gamma_resonant", bad_keys == 0, format!("{bad_keys} keys above gamma in Q^(2j), j <= r")));
    let viol = res.tail_report.violations();
    checks.push(Check::new("tail_bounds", viol == 0, format!("{viol} tail violations")));

    let flow = nfc.flow_options();
    let scale = 10.0 * 0.25f64.powi(2 * nfc.j_max as i32) * res.p_norm.upper;
    let mut worst: f64 = 0.0;
    for i in 0..t.conjugation_samples as u64 {
        let u = random_state(ms.len(), res.eps_r / 4.0, cfg.seed.wrapping_add(i));
        let h = z2.eval(&u)?.re + p6.eval(&u)?.re;
        let v = transform_state(&u, &res.generators, Direction::Forward, &flow)?;
        worst = worst.max((h - res.eval_normal_form(&v)?).abs());
    }
    checks.push(Check::new(
        "conjugation",
        worst <= scale,
        format!("max |H(u) - N(tau(u))| = {worst:.3e}, bound {scale:.3e}"),
    ));
    Ok(checks)
}

fn run_simulate(cfg: &ExperimentConfig, t: &SimulateTask, sink: &mut Sink) -> CliResult<Vec<Check>> {
    let ms = t.modes.resolve()?;
    let omega = t.potential.frequencies(&ms, cfg.seed)?;
    let z2 = build_z2(&omega);
    let p6 = build_p6(&ms, t.sigma, t.c6);
    let u0 = random_state(ms.len(), t.eps, cfg.seed);
    let opts = IntegrateOptions { dt: t.dt, sample_every: t.sample_every, tol: 1e-14 };
    let tr = integrate(&z2, &p6, &u0, t.t_final, &opts)?;
    let mut csv = Vec::new();
    tr.write_csv(&mut csv)?;
    sink.write("trajectory.csv", &csv)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        modes: &'a [i32],
        omega: &'a [f64],
        samples: usize,
        norm_drift: f64,
        energy_drift: f64,
        initial_actions: &'a [f64],
        final_actions: &'a [f64],
    }
    let summary = Summary {
        modes: ms.modes(),
        omega: omega.omega(),
        samples: tr.times.len(),
        norm_drift: tr.norm_drift(),
        energy_drift: tr.energy_drift(),
        initial_actions: &tr.actions[0],
        final_actions: tr.actions.last().expect("nonempty"),
    };
    sink.json("simulate.json", &summary)?;
    let series: Vec<Series> = ms
        .modes()
        .iter()
        .enumerate()
        .map(|(j, k)| Series { name: format!("|u_{k}|^2"), points: tr.times.iter().zip(&tr.actions).map(|(t, a)| (*t, a[j])).collect() })
        .take(6)
        .collect();
    sink.write("actions.svg", line_plot("actions", "t", "|u_k|^2", &series, Axes::default()).as_bytes())?;
    let nd = tr.norm_drift();
    Ok(vec![Check::new("norm_conservation", nd <= t.norm_tol, format!("relative drift {nd:.3e}"))])
}

fn run_drift(cfg: &ExperimentConfig, t: &DriftTask, budget: &Budget, sink: &mut Sink) -> CliResult<Vec<Check>> {
    let ms = t.modes.resolve()?;
    let omega = t.potential.frequencies(&ms, cfg.seed)?;
    let cert = certify_strong(&omega, &t.bounds, t.alpha, budget)?;
    let gamma = plan_gamma(cert.constant.min(1e12), t.alpha, t.r, t.mode);
    let kr = check_krgamma(&ms, &omega, t.mode, t.r, gamma)?;
    let z2 = build_z2(&omega);
    let p6 = build_p6(&ms, t.sigma, t.c6);
    let mut nfc = NormalFormConfig::new(3, t.r, gamma.min(1.0));
    nfc.j_max = t.j_max;
    let res = birkhoff(&z2, &p6, &omega, &nfc, &cfg.sup_norm.options(cfg.seed), budget)?;
    let plan = t.plan.as_ref().map(plan_parameters).transpose()?;
    let dc = DriftConfig {
        mode: t.mode,
        eps: t.eps.clone(),
        t_final: t.t_final,
        dt: t.dt,
        seed: cfg.seed,
        transform_every: t.transform_every,
    };
    let rep = action_drift(&z2, &p6, &res.generators, &nfc.flow_options(), &dc, plan.as_ref())?;

    #[derive(Serialize)]
    struct Out<'a> {
        omega: &'a [f64],
        rho: f64,
        gamma: f64,
        krgamma_offending: usize,
        eps_r: f64,
        report: &'a crate::dynamics::DriftReport,
    }
    sink.json(
        "drift.json",
        &Out { omega: omega.omega(), rho: cert.constant, gamma, krgamma_offending: kr.offending.len(), eps_r: res.eps_r, report: &rep },
    )?;
    let raw = Series { name: "raw |u_k|^2".into(), points: rep.rows.iter().map(|r| (r.eps, r.raw_drift)).collect() };
    let mut series = vec![raw];
    if rep.rows.iter().all(|r| r.transformed_drift.is_some()) {
        series.push(Series {
            name: "transformed |v_k|^2".into(),
            points: rep.rows.iter().map(|r| (r.eps, r.transformed_drift.unwrap_or(0.0))).collect(),
        });
    }
    sink.write("drift.svg", line_plot("action drift", "eps", "max drift", &series, Axes { log_x: true, log_y: true }).as_bytes())?;

    let mut checks = vec![
        Check::new("certificate", cert.passed(), format!("rho = {:.3e}, {} violations", cert.constant, cert.violations.len())),
        Check::new("krgamma", kr.passed(), format!("{} offending keys at gamma = {gamma:.3e}", kr.offending.len())),
        Check::new("transformed_not_worse", rep.transformed_not_worse(), "transformed drift <= raw drift at sampled times"),
    ];
    if let Some(min) = t.min_exponent {
        let ok = rep.exponent.is_some_and(|e| e >= min);
        checks.push(Check::new("exponent", ok, format!("fitted {:?}, required >= {min}", rep.exponent)));
    }
    Ok(checks)
}

fn run_certify(cfg: &ExperimentConfig, t: &CertifyTask, budget: &Budget, sink: &mut Sink) -> CliResult<Vec<Check>> {
    let ms = ModeSet::window(t.bounds.h_max);
    let omega = t.potential.frequencies(&ms, cfg.seed)?;
    let cert = match t.kind {
        CertifyKind::Strong => certify_strong(&omega, &t.bounds, t.alpha, budget)?,
        CertifyKind::Weak => certify_weak(&omega, &t.bounds, t.s_star, budget)?,
    };
    sink.json("certificate.json", &cert)?;
    let label = match cert.kind {
        NRKind::Strong => "rho",
        NRKind::Weak => "gamma",
    };
    let mut detail = format!(
        "{label} = {:.6e} over {} combinations, {} exact zeros",
        cert.constant,
        cert.enumerated,
        cert.violations.len()
    );
    // zeros from the symmetry w[-h] = w[h] are listed after the others
    let mirrored = |h: &[i32]| {
        let mut a: Vec<u32> = h.iter().map(|x| x.unsigned_abs()).collect();
        a.sort_unstable();
        a.windows(2).any(|w| w[0] == w[1])
    };
    let mut shown: Vec<_> = cert.violations.iter().collect();
    shown.sort_by_key(|v| mirrored(&v.h));
    for v in shown.into_iter().take(10) {
        let terms: Vec<String> = v.m.iter().zip(&v.h).map(|(m, h)| format!("{m:+}*w[{h}]")).collect();
        detail.push_str(&format!("; violation {} {:+} = 0", terms.join(" "), v.a));
    }
    Ok(vec![Check::new("non_resonance", cert.passed(), detail)])
}

fn run_sturm(cfg: &ExperimentConfig, t: &SturmTask, sink: &mut Sink) -> CliResult<Vec<Check>> {
    let w = match &t.potential {
        SturmPotential::Random { s_star, order } => sample_mult_potential(*s_star, *order, cfg.seed)?,
        SturmPotential::Cosine { mean, coeffs } => CosineSeries::new(*mean, coeffs.clone()),
    };
    let basis = dirichlet_eig(&w, t.n_max, t.n_basis)?;
    let doubled = dirichlet_eig(&w, t.n_max, 2 * t.n_basis)?;
    let c1 = verify_ev_asymptotics(&basis);
    let c2 = verify_ev_asymptotics(&doubled);
    let change = (c2 - c1).abs() / c1.abs().max(f64::MIN_POSITIVE);
    let gap = refinement_gap(&w, t.n_max, t.n_basis)?;
    let decay = verify_ef_decay(&basis, t.decay_sigma);
    let sob: Vec<_> = t.sobolev_s.iter().map(|&s| sobolev_equivalence(&basis, s, t.sobolev_samples, cfg.seed)).collect();

    #[derive(Serialize)]
    struct Out<'a> {
        potential: &'a CosineSeries,
        lambdas: &'a [f64],
        avg_w: f64,
        residual: f64,
        gram_error: f64,
        ev_constant: f64,
        ev_constant_doubled: f64,
        ev_relative_change: f64,
        refinement_gap: f64,
        decay: &'a crate::sturm::DecayReport,
        sobolev: &'a [crate::sturm::SobolevCheck],
    }
    sink.json(
        "sturm.json",
        &Out {
            potential: &w,
            lambdas: &basis.lambdas,
            avg_w: basis.avg_w,
            residual: basis.residual,
            gram_error: basis.gram_error,
            ev_constant: c1,
            ev_constant_doubled: c2,
            ev_relative_change: change,
            refinement_gap: gap,
            decay: &decay,
            sobolev: &sob,
        },
    )?;
    let dev = Series {
        name: "n |lambda_n - n^2 - avg W|".into(),
        points: basis
            .lambdas
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let n = (i + 1) as f64;
                (n, n * (l - n * n - basis.avg_w).abs())
            })
            .collect(),
    };
    sink.write("eigenvalues.svg", line_plot("eigenvalue asymptotics", "n", "deviation", &[dev], Axes::default()).as_bytes())?;

    let mut checks = vec![
        Check::new(
            "eigenvalue_constant",
            c1.is_finite() && c2.is_finite() && change <= t.stability_tol,
            format!("{c1:.6e} -> {c2:.6e} under basis doubling (change {change:.3e})"),
        ),
        Check::new("eigenfunction_decay", decay.fitted_c.is_finite(), format!("fitted C = {:.4e}", decay.fitted_c)),
    ];
    for s in &sob {
        checks.push(Check::new(
            &format!("sobolev_{}", s.s),
            s.constant.is_finite() && s.constant < t.sobolev_max_constant,
            format!("ratios in [{:.4}, {:.4}], C = {:.4}", s.min_ratio, s.max_ratio, s.constant),
        ));
    }
    Ok(checks)
}

fn run_strichartz(cfg: &ExperimentConfig, t: &StrichartzTask, budget: &Budget, sink: &mut Sink) -> CliResult<Vec<Check>> {
    let scan = strichartz_scan(&t.m_list, t.sigma, t.c6, &cfg.sup_norm.options(cfg.seed), budget)?;
    let small: Vec<u32> = t.m_list.iter().copied().filter(|m| *m <= t.identity_max_m).collect();
    let mut identity = Vec::new();
    if !small.is_empty() {
        for i in 0..t.identity_checks {
            let m = small[i % small.len()];
            let ms = ModeSet::window(m);
            let u = random_state(ms.len(), 1.0, cfg.seed.wrapping_add(i as u64));
            // levels are even; odd ones are empty
            let half = 3 * (m as i64) * (m as i64) / 2;
            let a = 2 * ((cfg.seed.wrapping_add(31 * i as u64) % (2 * half as u64 + 1)) as i64 - half);
            let (d, q) = strichartz_identity_check(&ms, a, &u, t.c6, None)?;
            let scale = t.c6 / 6.0 * u.norm2().powi(3);
            identity.push((m, a, d, q, (d - q).abs() / scale));
        }
    }
    let worst = identity.iter().map(|r| r.4).fold(0.0, |w, x| if x.is_nan() || x > w { x } else { w });

    #[derive(Serialize)]
    struct Out<'a> {
        scan: &'a crate::dynamics::StrichartzScan,
        identity: &'a [(u32, i64, f64, f64, f64)],
        identity_worst_relative: f64,
    }
    sink.json("strichartz.json", &Out { scan: &scan, identity: &identity, identity_worst_relative: worst })?;
    let series = vec![
        Series { name: "S(M) lower".into(), points: scan.rows.iter().map(|r| (r.m as f64, r.lower)).collect() },
        Series { name: "S(M) upper".into(), points: scan.rows.iter().map(|r| (r.m as f64, r.upper)).collect() },
    ];
    sink.write("strichartz.svg", line_plot("sextic interaction norm", "M", "S(M)", &series, Axes { log_x: true, log_y: true }).as_bytes())?;

    let tail: Vec<f64> = scan.exponents.iter().rev().take(3).rev().copied().collect();
    let decreasing = tail.len() == 3 && tail.windows(2).all(|w| w[1] < w[0]);
    Ok(vec![
        Check::new("monotone", scan.monotone(), "S(M) non-decreasing"),
        Check::new("exponents_decreasing", decreasing, format!("last three effective exponents {tail:?}")),
        Check::new("identity", worst <= t.identity_tol, format!("worst gap {worst:.3e} relative to c6 ||u||^6 / 6 over {} checks", identity.len())),
    ])
}

fn run_plan(t: &PlanTask, sink: &mut Sink) -> CliResult<Vec<Check>> {
    let plan = plan_parameters(&t.inputs())?;
    sink.json("plan.json", &plan)?;
    if t.require_feasible {
        Ok(vec![Check::new("feasible", plan.feasible, plan.notes.join("; "))])
    } else {
        Ok(Vec::new())
    }
}

/// Parses arguments, runs, reports, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = resolve(&cli).and_then(|cfg| {
        validate(&cfg)?;
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
        run(&cfg)
    });
    match outcome {
        Ok(o) => {
            for c in &o.manifest.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("wrote {} artifacts to {}", o.manifest.artifacts.len(), o.manifest.config.out.display());
            o.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("qbnf-cli-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn plan_writes_upsilon() {
        let out = tmp("plan");
        let code = main_with_args(["qbnf", "plan", "--eps", "1e-2", "--nu", "1", "--alpha", "1", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
        assert!((v["upsilon"].as_f64().unwrap() - 3.112e-3).abs() < 1e-6);
        let code = main_with_args(["qbnf", "plan", "--require-feasible", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_ASSERTION);
    }

    #[test]
    fn empty_modes_is_a_config_error() {
        let out = tmp("empty");
        let cfg = out.with_extension("json");
        fs::write(&cfg, r#"{"simulate": {"modes": []}}"#).unwrap();
        let code = main_with_args(["qbnf", "simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(!out.exists());
    }

    #[test]
    fn parse_errors_name_the_field() {
        let p = tmp("bad").with_extension("json");
        fs::write(&p, "{\n  \"plan\": {\n    \"eps\": \"x\"\n  }\n}").unwrap();
        let msg = load_config(&p).unwrap_err().to_string();
        assert!(msg.contains("plan.eps") && msg.contains("line 3"), "{msg}");
        fs::write(&p, r#"{"plan": {"epsilon": 0.1}}"#).unwrap();
        assert!(load_config(&p).unwrap_err().to_string().contains("epsilon"));
    }

    #[test]
    fn certify_free_frequencies_lists_violation() {
        let out = tmp("certify");
        let code = main_with_args(["qbnf", "certify", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_ASSERTION);
        let m: Manifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert!(m.checks[0].detail.contains("-1*w[1] +2*w[5] -1*w[7]"), "{}", m.checks[0].detail);
    }

    #[test]
    fn manifest_rerun_is_identical() {
        let a = tmp("rerun-a");
        let b = tmp("rerun-b");
        let cfg = a.with_extension("json");
        fs::write(&cfg, r#"{"seed": 5, "simulate": {"modes": 2, "t_final": 2.0, "dt": 0.05, "sample_every": 4}}"#).unwrap();
        assert_eq!(main_with_args(["qbnf", "simulate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]), EXIT_OK);
        let manifest = a.join("manifest.json");
        assert_eq!(main_with_args(["qbnf", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]), EXIT_OK);
        for f in ["trajectory.csv", "simulate.json", "actions.svg"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        let ma: Manifest = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
        let mb: Manifest = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(ma.config.simulate, mb.config.simulate);
        assert_eq!(ma.checks, mb.checks);
    }
}
