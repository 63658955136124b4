//! Batch experiment runner behind the `liftperc` binary.
//!
//! A run is described by an [`ExperimentConfig`], read from `--config` JSON
//! and overridden by flags. Every run writes its CSV/JSON artifacts plus a
//! `manifest.json` into the output directory; the artifacts depend only on
//! the resolved configuration and the seed, never on the worker count.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, ValueEnum};
use num_rational::BigRational;
use num_traits::One;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enhancement::{audit_monotonicity_coupling, build_cycle_partition, estimate_enhanced_pc};
use crate::error::Error;
use crate::estimators::{continuity_report, estimate_pc, estimate_theta, fit_decay, monotonicity_test, FitOptions, Z95};
use crate::graph::{build_cycle, parse_graph, BaseGraph, Host};
use crate::holder::{downward_domination_check, holder_constant, sample_edge_law, HolderParams};
use crate::lift::{build_lift, sample_switch_config};
use crate::oracle::{disconnection_formula, exact_disconnection_probability, exact_holder_joint, OracleRecord};
use crate::perco::components;
use crate::rng::MasterSeed;
use crate::sharpness::{quenched_decay, remaining_law_check, tail_psi, verify_exp_inequality};
use crate::stats::{bernoulli_sigma, chi_square, wilson_interval};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    OracleDisconnect,
    OracleJoint,
    LiftSample,
    Theta,
    PcCurve,
    PcMono,
    HolderVerify,
    HolderCurveCheck,
    EnhancePc,
    MonoCouplingAudit,
    SharpnessVerify,
    QuenchedTails,
    DecayFit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::OracleDisconnect => "oracle-disconnect",
            Command::OracleJoint => "oracle-joint",
            Command::LiftSample => "lift-sample",
            Command::Theta => "theta",
            Command::PcCurve => "pc-curve",
            Command::PcMono => "pc-mono",
            Command::HolderVerify => "holder-verify",
            Command::HolderCurveCheck => "holder-curve-check",
            Command::EnhancePc => "enhance-pc",
            Command::MonoCouplingAudit => "mono-coupling-audit",
            Command::SharpnessVerify => "sharpness-verify",
            Command::QuenchedTails => "quenched-tails",
            Command::DecayFit => "decay-fit",
        }
    }
}

/// Experiment description. Every field is optional so that a JSON file and
/// flags can be layered; [`ExperimentConfig::resolve`] checks what each
/// command needs.
#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    /// Base graph: box:d:L, cycle:N, tree:b:depth, complete:n or file:PATH.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    /// Switching parameter: a value, a comma list or lo:hi:step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
    /// Edge-retention parameter grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<String>,
    /// Ghost-field parameter.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Enhancement parameter grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<String>,
    /// Width of the middle interval of the Hölder coupling.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// Switching parameter of the bar graph in the Hölder coupling.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// Enhancement radius (defaults to the one derived from the cycle partition).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<usize>,
    /// Comma-separated box sides for pc-curve; each side L runs on box:d:L.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    /// Runs of the remaining-graph law check on cycle:4 (sharpness-verify).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub law_runs: Option<u64>,
    /// Master seed (mandatory).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; does not affect any output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        ExperimentConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ExperimentConfig {
    /// Fields set in `top` win.
    pub fn overlay(self, top: ExperimentConfig) -> ExperimentConfig {
        overlay!(self, top, command, graph, q, p, h, s, r, a, radius, schedule, trials, runs, draws, n_max, law_runs, seed, out, workers)
    }

    /// Fills command defaults and validates what the command needs.
    pub fn resolve(mut self) -> Result<ExperimentConfig, CliError> {
        let command = self.command.ok_or_else(|| CliError::config("no command given"))?;
        if self.seed.is_none() {
            return Err(CliError::config("--seed is mandatory"));
        }
        let needs_graph = !matches!(command, Command::OracleJoint) && !(command == Command::HolderVerify && self.p.is_none()) && !(command == Command::PcCurve && self.schedule.is_some());
        if needs_graph && self.graph.is_none() {
            return Err(CliError::config(format!("{} needs --graph", command.name())));
        }
        let (trials, n_max) = match command {
            Command::HolderVerify => (100_000, 0),
            Command::SharpnessVerify => (10_000, 30),
            Command::DecayFit | Command::QuenchedTails => (10_000, 200),
            _ => (1000, 0),
        };
        self.trials.get_or_insert(trials);
        if n_max > 0 {
            self.n_max.get_or_insert(n_max);
        }
        match command {
            Command::MonoCouplingAudit => {
                self.runs.get_or_insert(1000);
            }
            Command::QuenchedTails => {
                self.draws.get_or_insert(20);
            }
            _ => {}
        }
        let default_q = matches!(
            command,
            Command::LiftSample | Command::Theta | Command::PcMono | Command::MonoCouplingAudit | Command::QuenchedTails | Command::DecayFit | Command::SharpnessVerify
        );
        if default_q {
            self.q.get_or_insert_with(|| "0.5".into());
        }
        let required: &[(&str, bool)] = match command {
            Command::OracleJoint => &[("q", self.q.is_some()), ("r", self.r.is_some()), ("a", self.a.is_some())],
            Command::HolderVerify => &[("q", self.q.is_some()), ("r", self.r.is_some()), ("a", self.a.is_some())],
            Command::Theta | Command::MonoCouplingAudit | Command::QuenchedTails | Command::DecayFit => &[("p", self.p.is_some())],
            Command::PcCurve | Command::HolderCurveCheck => &[("q", self.q.is_some())],
            Command::EnhancePc => &[("s", self.s.is_some())],
            Command::SharpnessVerify => &[("p", self.p.is_some()), ("h", self.h.is_some())],
            _ => &[],
        };
        if let Some((name, _)) = required.iter().find(|(_, ok)| !ok) {
            return Err(CliError::config(format!("{} needs --{name}", command.name())));
        }
        for (name, v) in [("trials", self.trials), ("runs", self.runs), ("draws", self.draws)] {
            if v == Some(0) {
                return Err(CliError::config(format!("--{name} must be positive")));
            }
        }
        if self.n_max == Some(0) || self.workers == Some(0) {
            return Err(CliError::config("--n-max and --workers must be positive"));
        }
        for grid in [&self.q, &self.p, &self.s] {
            if let Some(text) = grid {
                for x in parse_grid(text)? {
                    if !(0.0..=1.0).contains(&x) {
                        return Err(CliError::config(format!("probability {x} outside [0, 1]")));
                    }
                }
            }
        }
        for (name, v) in [("r", self.r), ("a", self.a)] {
            if v.is_some_and(|x| !(0.0..=1.0).contains(&x)) {
                return Err(CliError::config(format!("--{name} must lie in [0, 1]")));
            }
        }
        if self.h.is_some_and(|h| !(h > 0.0)) {
            return Err(CliError::config("--h must be positive"));
        }
        Ok(self)
    }

    /// Echo written to the manifest: everything except `out` and `workers`.
    pub fn echo(&self) -> ExperimentConfig {
        ExperimentConfig {
            out: None,
            workers: None,
            ..self.clone()
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "liftperc", version, about = "Percolation experiments on random 2-lifts")]
pub struct Cli {
    /// Command to run (may also come from the config file).
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// JSON experiment description; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ExperimentConfig,
}

/// Exit code, machine-readable kind and message of a failed run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliError {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "config".into(),
            message: message.into(),
        }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "invariant".into(),
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Invariant(_) => (3, "invariant"),
            Error::SizeGuard { .. } => (4, "size-guard"),
            Error::Io(_) => (2, "io"),
            _ => (2, "config"),
        };
        Self {
            code,
            kind: kind.into(),
            message: e.to_string(),
        }
    }
}

/// Parses `x`, `x,y,...` or `lo:hi:step` (inclusive, values rounded to 12 decimals).
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| CliError::config(format!("bad number {t:?} in {text:?}: {e}")));
    let round = |x: f64| (x * 1e12).round() / 1e12;
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if !(step > 0.0) || hi < lo {
                return Err(CliError::config(format!("grid {text:?} needs lo <= hi and step > 0")));
            }
            let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
            Ok((0..count).map(|i| round(lo + i as f64 * step)).collect())
        }
        [_] => text.split(',').map(num).collect(),
        _ => Err(CliError::config(format!("grid {text:?} must be a value, a list or lo:hi:step"))),
    }
}

/// Files produced by a run, kept in memory until the manifest is written.
#[derive(Default)]
struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
    stdout: String,
    failure: Option<CliError>,
}

impl Artifacts {
    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row).map_err(|e| CliError::config(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::config(format!("csv: {e}")))?;
        self.files.push((name.into(), bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::config(format!("json: {e}")))?;
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
        Ok(())
    }

    fn fail_if(&mut self, violated: bool, message: impl Into<String>) {
        if violated && self.failure.is_none() {
            self.failure = Some(CliError::invariant(message));
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Git-style content hash: `sha256("blob <len>\0" ++ content)`.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    input_hash: String,
    outputs: Vec<OutputEntry>,
    status: &'static str,
}

fn graph_of(cfg: &ExperimentConfig) -> Result<BaseGraph, CliError> {
    let desc = cfg.graph.as_deref().ok_or_else(|| CliError::config("missing --graph"))?;
    Ok(parse_graph(desc)?)
}

fn single(text: &Option<String>, name: &str) -> Result<f64, CliError> {
    let grid = parse_grid(text.as_deref().ok_or_else(|| CliError::config(format!("missing --{name}")))?)?;
    match grid.as_slice() {
        [x] => Ok(*x),
        _ => Err(CliError::config(format!("--{name} must be a single value here"))),
    }
}

fn grid(text: &Option<String>, name: &str) -> Result<Vec<f64>, CliError> {
    parse_grid(text.as_deref().ok_or_else(|| CliError::config(format!("missing --{name}")))?)
}

#[derive(Serialize)]
struct ThetaRow {
    graph: String,
    q: f64,
    p: f64,
    trials: u64,
    reach_count: u64,
    theta_hat: f64,
    stderr: f64,
    ci_low: f64,
    ci_high: f64,
}

#[derive(Serialize)]
struct PcRow {
    graph: String,
    q: f64,
    pc_hat: f64,
    ci_low: f64,
    ci_high: f64,
    stderr: f64,
    trials: u64,
}

#[derive(Serialize)]
struct TailRow {
    n: usize,
    psi_hat: f64,
    stderr: f64,
    count: u64,
    touching: u64,
}

#[derive(Serialize)]
struct CellRow {
    omega_plus: bool,
    omega_minus: bool,
    eta_hat: bool,
    eta_bar: bool,
    exact: f64,
    observed: u64,
}

fn dispatch(cfg: &ExperimentConfig, seed: MasterSeed, art: &mut Artifacts) -> Result<(), CliError> {
    let command = cfg.command.expect("resolved");
    let trials = cfg.trials.unwrap_or(1000);
    match command {
        Command::OracleDisconnect => {
            let g = graph_of(cfg)?;
            let value = exact_disconnection_probability(&g)?;
            let formula = disconnection_formula(&g);
            let half = BigRational::new(1.into(), 2.into());
            let record = OracleRecord::new(&g, &half, &BigRational::one(), "P(lift disconnected)", &value);
            art.stdout = format!("{value}\n");
            art.fail_if(value != formula, format!("enumeration gives {value}, formula gives {formula}"));
            art.json(
                "oracle_disconnect.json",
                &serde_json::json!({ "record": record, "formula": formula.to_string(), "matches": value == formula }),
            )?;
        }
        Command::OracleJoint => {
            let (q, r, a) = (single(&cfg.q, "q")?, cfg.r.unwrap_or_default(), cfg.a.unwrap_or_default());
            let joint = exact_holder_joint(q, r, a)?;
            let rows: Vec<CellRow> = (0..16)
                .map(|c| CellRow {
                    omega_plus: c & 8 != 0,
                    omega_minus: c & 4 != 0,
                    eta_hat: c & 2 != 0,
                    eta_bar: c & 1 != 0,
                    exact: joint.cells[c],
                    observed: 0,
                })
                .collect();
            art.csv("holder_joint.csv", &rows)?;
            let both = joint.prob(|wp, wm, _, _| wp && wm);
            let hat_open = joint.prob(|wp, _, eh, _| eh && wp);
            art.json(
                "holder_joint.json",
                &serde_json::json!({
                    "q": q, "r": r, "a": a,
                    "p_both_open": both,
                    "p_both_open_closed_form": (1.0 - r.sqrt()).powi(2),
                    "p_eta_hat_and_plus_open": hat_open,
                    "p_eta_hat_and_plus_open_closed_form": q / (1.0 - r) * (1.0 - r.sqrt()),
                }),
            )?;
            art.stdout = format!("P(omega+ = omega- = 1) = {both}\n");
        }
        Command::LiftSample => {
            let g = graph_of(cfg)?;
            let q = single(&cfg.q, "q")?;
            let eta = sample_switch_config(&g, q, &mut seed.stream("lift-sample", 0))?;
            let lift = build_lift(&g, eta.clone())?;
            let comp = components(&lift, &vec![true; lift.edge_count()]);
            let mut roots = comp.clone();
            roots.sort_unstable();
            roots.dedup();
            #[derive(Serialize)]
            struct EdgeRow {
                lifted_edge: usize,
                base_edge: usize,
                level: u8,
                u: usize,
                v: usize,
            }
            let rows: Vec<EdgeRow> = (0..lift.edge_count())
                .map(|le| {
                    let (u, v) = lift.endpoints(le);
                    EdgeRow {
                        lifted_edge: le,
                        base_edge: le >> 1,
                        level: (le & 1) as u8,
                        u,
                        v,
                    }
                })
                .collect();
            art.csv("lift_edges.csv", &rows)?;
            art.json(
                "lift.json",
                &serde_json::json!({
                    "graph": g.kind().to_string(), "q": q, "eta_hex": eta.to_hex(),
                    "switching_edges": eta.switching_count(), "lift_components": roots.len(),
                }),
            )?;
            art.stdout = format!("{} {}\n", g.kind(), eta.to_hex());
        }
        Command::Theta => {
            let g = graph_of(cfg)?;
            let mut rows = Vec::new();
            for q in grid(&cfg.q, "q")? {
                for p in grid(&cfg.p, "p")? {
                    let t = estimate_theta(&g, q, p, trials, seed)?;
                    let (ci_low, ci_high) = wilson_interval(t.reach_count, t.trials, Z95);
                    rows.push(ThetaRow {
                        graph: t.graph,
                        q,
                        p,
                        trials,
                        reach_count: t.reach_count,
                        theta_hat: t.theta_hat,
                        stderr: t.stderr,
                        ci_low,
                        ci_high,
                    });
                }
            }
            art.csv("theta.csv", &rows)?;
        }
        Command::PcCurve | Command::HolderCurveCheck => {
            let graphs: Vec<BaseGraph> = match (&cfg.schedule, command) {
                (Some(sched), Command::PcCurve) => {
                    let dim = match cfg.graph.as_deref().map(parse_graph).transpose()? {
                        Some(g) => match g.kind() {
                            crate::graph::GraphKind::Box { dim, .. } => *dim,
                            _ => return Err(CliError::config("--schedule needs a box graph")),
                        },
                        None => 2,
                    };
                    sched
                        .split(',')
                        .map(|t| {
                            let side = t.trim().parse::<usize>().map_err(|e| CliError::config(format!("schedule entry {t:?}: {e}")))?;
                            Ok(crate::graph::build_box(dim, side)?)
                        })
                        .collect::<Result<_, CliError>>()?
                }
                _ => vec![graph_of(cfg)?],
            };
            let qs = grid(&cfg.q, "q")?;
            let mut rows = Vec::new();
            let mut estimates = Vec::new();
            for g in &graphs {
                for &q in &qs {
                    let e = estimate_pc(g, q, trials, seed)?;
                    rows.push(PcRow {
                        graph: e.graph.clone(),
                        q,
                        pc_hat: e.pc_hat,
                        ci_low: e.ci_low,
                        ci_high: e.ci_high,
                        stderr: e.stderr,
                        trials,
                    });
                    estimates.push(e);
                }
            }
            if command == Command::PcCurve {
                art.csv("pc_curve.csv", &rows)?;
                art.json("pc_curve.json", &estimates)?;
            } else {
                let lo = qs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let constant = holder_constant(lo, hi)?;
                let check = continuity_report(&estimates, constant, 2.0);
                art.csv("holder_curve.csv", &rows)?;
                art.json("holder_check.json", &serde_json::json!({ "check": check, "passes": check.passes() }))?;
                art.stdout = format!("max violation {} (passes: {})\n", check.max_violation, check.passes());
            }
        }
        Command::PcMono => {
            let g = graph_of(cfg)?;
            let rep = monotonicity_test(&g, single(&cfg.q, "q")?, trials, seed)?;
            art.json("pc_mono.json", &rep)?;
            art.stdout = format!("pc(base) - pc(lift) = {} (z = {})\n", rep.difference, rep.z);
        }
        Command::HolderVerify => {
            let params = HolderParams::new(single(&cfg.q, "q")?, cfg.r.unwrap_or_default(), cfg.a.unwrap_or_default())?;
            let joint = exact_holder_joint(params.q, params.r, params.a)?;
            let mc = sample_edge_law(&params, trials, seed)?;
            let rows: Vec<CellRow> = (0..16)
                .map(|c| CellRow {
                    omega_plus: c & 8 != 0,
                    omega_minus: c & 4 != 0,
                    eta_hat: c & 2 != 0,
                    eta_bar: c & 1 != 0,
                    exact: joint.cells[c],
                    observed: mc.cells[c],
                })
                .collect();
            art.csv("holder_cells.csv", &rows)?;
            let chi = chi_square(&mc.cells, &joint.cells);
            let both_exact = joint.prob(|wp, wm, _, _| wp && wm);
            let both_mc = mc.frequency(|wp, wm, _, _| wp && wm);
            let domination = match &cfg.p {
                Some(_) => {
                    let g = graph_of(cfg)?;
                    let runs = cfg.runs.unwrap_or(1000);
                    Some(downward_domination_check(&g, single(&cfg.p, "p")?, &params, runs, seed)?)
                }
                None => None,
            };
            art.fail_if(mc.violations > 0, format!("{} coupling-property violations", mc.violations));
            if let Some(d) = &domination {
                art.fail_if(d.violations + d.edge_violations > 0, "downward domination violated");
            }
            art.json(
                "holder_verify.json",
                &serde_json::json!({
                    "params": params,
                    "samples": mc.samples,
                    "coupling_violations": mc.violations,
                    "chi_square": chi.statistic, "dof": chi.dof, "p_value": chi.p_value,
                    "p_both_open_exact": both_exact,
                    "p_both_open_observed": both_mc,
                    "p_both_open_sigma": bernoulli_sigma(both_exact, mc.samples),
                    "domination": domination,
                }),
            )?;
            art.stdout = format!("violations {} chi2 p-value {}\n", mc.violations, chi.p_value);
        }
        Command::EnhancePc => {
            let g = graph_of(cfg)?;
            let radius = match cfg.radius {
                Some(r) => r,
                None => build_cycle_partition(&g)?.radius,
            };
            #[derive(Serialize)]
            struct Row {
                graph: String,
                radius: usize,
                s: f64,
                pc_hat: f64,
                ci_low: f64,
                ci_high: f64,
                stderr: f64,
                trials: u64,
            }
            let mut rows = Vec::new();
            for s in grid(&cfg.s, "s")? {
                let e = estimate_enhanced_pc(&g, radius, s, trials, seed)?;
                rows.push(Row {
                    graph: e.graph,
                    radius,
                    s,
                    pc_hat: e.pc_hat,
                    ci_low: e.ci_low,
                    ci_high: e.ci_high,
                    stderr: e.stderr,
                    trials,
                });
            }
            art.csv("enhance_pc.csv", &rows)?;
        }
        Command::MonoCouplingAudit => {
            let g = graph_of(cfg)?;
            let s = audit_monotonicity_coupling(&g, single(&cfg.q, "q")?, single(&cfg.p, "p")?, cfg.runs.unwrap_or(1000), seed)?;
            let bad = s.invariant_violations + s.enhanced_mismatches + s.lift_cluster_escapes + s.reach_violations;
            art.fail_if(bad > 0, format!("{bad} audited runs failed; first: {:?}", s.first_failure));
            art.json("mono_audit.json", &s)?;
            art.stdout = format!("{} runs, {bad} failures\n", s.runs);
        }
        Command::SharpnessVerify => {
            let g = graph_of(cfg)?;
            let p = single(&cfg.p, "p")?;
            let h = cfg.h.unwrap_or_default();
            let rep = verify_exp_inequality(&g, p, h, cfg.n_max.unwrap_or(30), trials, seed)?;
            art.csv("sharpness_rows.csv", &rep.rows)?;
            let law = match cfg.law_runs {
                Some(runs) if runs > 0 => {
                    let law = remaining_law_check(&build_cycle(4)?, 0.5, p, h, runs, runs, seed)?;
                    let bad = law.height_violations + law.forest_violations + law.domination_violations + law.other_violations;
                    art.fail_if(bad > 0, format!("{bad} remaining-graph coupling violations"));
                    Some(law)
                }
                _ => None,
            };
            art.json(
                "sharpness_report.json",
                &serde_json::json!({
                    "graph": g.kind().to_string(), "p": p, "h": h, "trials": trials,
                    "m_h": rep.m_h, "s_raw": rep.s_raw, "s": rep.s, "clamped": rep.clamped,
                    "max_margin": rep.max_margin, "max_margin_sigmas": rep.max_margin_sigmas,
                    "within_3_sigma": rep.passes(3.0),
                    "law_check": law,
                }),
            )?;
            art.stdout = format!("max margin {} ({} sigma), within 3 sigma: {}\n", rep.max_margin, rep.max_margin_sigmas, rep.passes(3.0));
        }
        Command::QuenchedTails => {
            let g = graph_of(cfg)?;
            let sum = quenched_decay(
                &g,
                single(&cfg.p, "p")?,
                single(&cfg.q, "q")?,
                cfg.draws.unwrap_or(20),
                cfg.n_max.unwrap_or(200),
                trials,
                seed,
                &FitOptions::default(),
            )?;
            #[derive(Serialize)]
            struct Row {
                draw: u64,
                switching_edges: usize,
                c_hat: f64,
                big_c_hat: f64,
                n_lo: usize,
                n_hi: usize,
                points: usize,
                r2: f64,
                low_confidence: bool,
            }
            let rows: Vec<Row> = sum
                .fits
                .iter()
                .map(|f| Row {
                    draw: f.draw,
                    switching_edges: f.switching_edges,
                    c_hat: f.fit.c_hat,
                    big_c_hat: f.fit.big_c_hat,
                    n_lo: f.fit.n_lo,
                    n_hi: f.fit.n_hi,
                    points: f.fit.points,
                    r2: f.fit.r2,
                    low_confidence: f.fit.low_confidence,
                })
                .collect();
            art.csv("quenched_fits.csv", &rows)?;
            art.json(
                "quenched_summary.json",
                &serde_json::json!({
                    "mean_rate": sum.mean_rate, "std_rate": sum.std_rate,
                    "all_negative_slopes": sum.all_negative_slopes, "concentrated": sum.concentrated,
                }),
            )?;
        }
        Command::DecayFit => {
            let g = graph_of(cfg)?;
            let curve = tail_psi(&g, single(&cfg.p, "p")?, single(&cfg.q, "q")?, cfg.n_max.unwrap_or(200), trials, seed)?;
            let rows: Vec<TailRow> = curve
                .iter()
                .map(|t| TailRow {
                    n: t.n,
                    psi_hat: t.psi(),
                    stderr: t.stderr(),
                    count: t.count,
                    touching: t.touching,
                })
                .collect();
            art.csv("tail.csv", &rows)?;
            let fit = fit_decay(&curve, &FitOptions::default());
            art.json("decay_fit.json", &fit)?;
            art.stdout = format!("c_hat {} R2 {} on [{}, {}]\n", fit.c_hat, fit.r2, fit.n_lo, fit.n_hi);
        }
    }
    Ok(())
}

/// Result of a completed run.
#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub stdout: String,
    pub failure: Option<CliError>,
}

/// Runs a resolved configuration and writes its artifacts and manifest.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let cfg = cfg.clone().resolve()?;
    let command = cfg.command.expect("resolved");
    let seed = MasterSeed(MasterSeed(cfg.seed.expect("resolved")).key(command.name(), 0));
    let workers = cfg.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::config(format!("worker pool: {e}")))?;
    let mut art = Artifacts::default();
    pool.install(|| dispatch(&cfg, seed, &mut art))?;

    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    let echo = cfg.echo();
    let mut input = serde_json::to_vec(&echo).expect("config serializes");
    if let Some(path) = cfg.graph.as_deref().and_then(|g| g.strip_prefix("file:")) {
        input.extend(std::fs::read(path).map_err(Error::from)?);
    }
    let mut outputs = Vec::new();
    for (name, bytes) in &art.files {
        std::fs::write(out_dir.join(name), bytes).map_err(Error::from)?;
        outputs.push(OutputEntry {
            file: name.clone(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
    }
    let manifest = Manifest {
        tool: "liftperc",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        config: &echo,
        input_hash: blob_hash(&input),
        outputs,
        status: if art.failure.is_some() { "invariant-violation" } else { "ok" },
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    std::fs::write(out_dir.join("manifest.json"), bytes).map_err(Error::from)?;
    let mut files: Vec<String> = art.files.iter().map(|(n, _)| n.clone()).collect();
    files.push("manifest.json".into());
    Ok(RunOutcome {
        out_dir,
        files,
        stdout: art.stdout,
        failure: art.failure,
    })
}

fn report_error(err: &CliError, out: Option<&Path>) -> i32 {
    let record = serde_json::json!({ "error": err });
    eprintln!("{record}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{record:#}\n"));
        }
    }
    err.code
}

/// Entry point of the binary; returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            return report_error(&CliError::config(e.to_string()), None);
        }
    };
    let file_cfg = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match serde_json::from_str::<ExperimentConfig>(&text) {
                Ok(c) => c,
                Err(e) => return report_error(&CliError::config(format!("{}: {e}", path.display())), cli.flags.out.as_deref()),
            },
            Err(e) => return report_error(&CliError::config(format!("{}: {e}", path.display())), cli.flags.out.as_deref()),
        },
        None => ExperimentConfig::default(),
    };
    let mut flags = cli.flags.clone();
    flags.command = cli.command;
    let cfg = file_cfg.overlay(flags);
    match run(&cfg) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            match &outcome.failure {
                Some(err) => report_error(err, Some(&outcome.out_dir)),
                None => 0,
            }
        }
        Err(err) => report_error(&err, cfg.out.as_deref()),
    }
}
