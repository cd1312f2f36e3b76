//! Command implementations behind the `cslq` binary.
//!
//! Every command loads a JSON instance, runs one or more solver operations
//! and returns a [`RunReport`]. Numbers in a report are grouped under the
//! name of the operation that produced them. Wall-clock timings are kept
//! out of the report so that identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cslq::alm::{self, AlmConfig, AlmReport, Reference};
use cslq::controllability;
use cslq::instance::{random_instance, GeneratorBounds, Instance, InstanceConfig};
use cslq::model::{self, VectorProcess};
use cslq::oracle;
use cslq::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CERTIFICATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// Random directions sampled by the saddle check in `compare`.
const SADDLE_SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotUniformlyConvex(_) | Error::NotSurjective(_) | Error::SizeGuard(..) | Error::IndefiniteGain { .. } | Error::RankDeficient { .. } => EXIT_CERTIFICATION,
        Error::PenaltyMismatch { .. } | Error::Consistency(_) => EXIT_NOT_CONVERGED,
        _ => EXIT_CONFIG,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self { code: exit_code(&err), message: err.to_string() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub csv: bool,
    pub force: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckSelection {
    pub surjectivity: bool,
    pub rank: bool,
    pub convexity: bool,
}

impl CheckSelection {
    fn all_if_empty(self) -> Self {
        if self.surjectivity || self.rank || self.convexity {
            self
        } else {
            Self { surjectivity: true, rank: true, convexity: true }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub instance_sha256: String,
    pub seed: u64,
    pub convention: String,
    pub certificates: BTreeMap<String, Value>,
    pub outputs: BTreeMap<String, Value>,
}

impl RunReport {
    fn new(command: &str, loaded: &Loaded) -> Self {
        Self {
            tool: "cslq".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            instance_sha256: loaded.hash.clone(),
            seed: loaded.seed,
            convention: oracle::CONVENTION.into(),
            certificates: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports always serialize");
        text.push('\n');
        text
    }
}

/// Result of a command: the report plus the side outputs that are not part of it.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: RunReport,
    pub exit_code: i32,
    /// Per-iteration table, when the command ran the ALM.
    pub iterations_csv: Option<String>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
}

struct Loaded {
    instance: Instance,
    hash: String,
    seed: u64,
}

fn load(path: &Path, seed: Option<u64>) -> Result<Loaded, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::config(format!("{} is not UTF-8: {e}", path.display())))?;
    let config = InstanceConfig::from_json(text)?;
    let instance = config.load()?;
    let hash = hex::encode(Sha256::digest(&bytes));
    Ok(Loaded { seed: seed.unwrap_or(instance.seed), instance, hash })
}

fn rows(p: &VectorProcess) -> Vec<Vec<f64>> {
    p.values().iter().map(|v| v.iter().copied().collect()).collect()
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable value")
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.insert(name.into(), start.elapsed().as_secs_f64());
        out
    }
}

/// Computes `δ̂` and the surjectivity certificate, recording both; fails with
/// exit code 2 when either does not certify.
fn certify(report: &mut RunReport, timer: &mut Timer, inst: &Instance) -> Result<(), CliError> {
    let delta = timer.run("uniform_convexity_delta", || model::uniform_convexity_delta(&inst.tree, &inst.data))?;
    report.certificates.insert("uniform_convexity_delta".into(), json!({ "delta_hat": delta, "uniformly_convex": delta > inst.alm.convexity_tol }));
    if !(delta > inst.alm.convexity_tol) {
        return Err(Error::NotUniformlyConvex(delta).into());
    }
    if inst.data.vacuous_constraint() {
        report.certificates.insert("surjectivity_certificate".into(), json!({ "waived": "vacuous constraint" }));
        return Ok(());
    }
    if inst.alm.waive_surjectivity {
        report.certificates.insert("surjectivity_certificate".into(), json!({ "waived": "solver.waive_surjectivity" }));
        return Ok(());
    }
    let cert = timer.run("surjectivity_certificate", || oracle::surjectivity_certificate(&inst.tree, &inst.data))?;
    report.certificates.insert("surjectivity_certificate".into(), to_value(&cert));
    if !cert.surjective {
        return Err(Error::NotSurjective(cert.sigma_min).into());
    }
    Ok(())
}

fn alm_output(report: &AlmReport, config: &AlmConfig) -> Value {
    let last = report.iterations.last();
    json!({
        "verdict": report.verdict,
        "iterations": report.iterations.len(),
        "rho": report.rho,
        "step_schedule": config.schedule(),
        "final": last,
        "control": rows(&report.final_control),
        "multiplier": rows(&report.final_multiplier),
    })
}

fn iterations_csv(report: &AlmReport) -> Result<String, CliError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for record in &report.iterations {
        writer.serialize(record).map_err(|e| CliError::config(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Runs the augmented Lagrangian method. Exit code 0 on convergence, 3 otherwise.
pub fn cmd_solve(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    let loaded = load(config_path, opts.seed)?;
    let inst = &loaded.instance;
    let mut report = RunReport::new("solve", &loaded);
    let mut timer = Timer(BTreeMap::new());
    if opts.force {
        report.certificates.insert("forced".into(), Value::Bool(true));
    } else {
        certify(&mut report, &mut timer, inst)?;
    }
    let mut config = inst.alm.clone();
    config.certify = false;
    let alm_report = timer.run("alm_solve", || alm::alm_solve(&inst.tree, &inst.data, &config))?;
    let gap = oracle::duality_gap(&inst.tree, &inst.data, &alm_report.final_control, &alm_report.final_multiplier)?;
    report.outputs.insert("alm_solve".into(), alm_output(&alm_report, &config));
    report.outputs.insert("duality_gap".into(), to_value(&gap));

    let summary = vec![
        format!("verdict: {:?} after {} iterations", alm_report.verdict, alm_report.iterations.len()),
        format!("J = {:.12e}", gap.primal),
        format!("residual = {:.6e}", gap.residual_norm),
        format!("gap = {:.6e}", gap.gap),
    ];
    Ok(Outcome {
        exit_code: if alm_report.converged() { EXIT_OK } else { EXIT_NOT_CONVERGED },
        iterations_csv: if opts.csv { Some(iterations_csv(&alm_report)?) } else { None },
        report,
        timings: timer.0,
        summary,
    })
}

/// Solves the dense KKT system and reports the saddle pair with its duality gap.
pub fn cmd_oracle(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    let loaded = load(config_path, opts.seed)?;
    let inst = &loaded.instance;
    let mut report = RunReport::new("oracle", &loaded);
    let mut timer = Timer(BTreeMap::new());
    let dense = timer.run("assemble_dense", || oracle::assemble_dense(&inst.tree, &inst.data))?;
    if !opts.force {
        certify(&mut report, &mut timer, inst)?;
    }
    let vacuous = inst.data.vacuous_constraint();
    let kkt = timer.run("kkt_solve", || oracle::kkt_solve_dense(&inst.tree, &inst.data, &dense))?;
    let gap = oracle::duality_gap(&inst.tree, &inst.data, &kkt.control, &kkt.multiplier)?;
    report.outputs.insert(
        "kkt_solve".into(),
        json!({
            "mode": if vacuous { "unconstrained" } else { "constrained" },
            "kkt_residual": kkt.kkt_residual,
            "rhs_norm": kkt.rhs_norm,
            "control": rows(&kkt.control),
            "multiplier": rows(&kkt.multiplier),
        }),
    );
    report.outputs.insert("duality_gap".into(), to_value(&gap));
    let summary = vec![
        format!("mode: {}", if vacuous { "unconstrained" } else { "constrained" }),
        format!("J = {:.12e}", gap.primal),
        format!("d = {:.12e}", gap.dual),
        format!("gap = {:.6e}", gap.gap),
        format!("kkt residual = {:.6e}", kkt.kkt_residual),
    ];
    Ok(Outcome { report, exit_code: EXIT_OK, iterations_csv: None, timings: timer.0, summary })
}

/// Emits the selected certificates. Failing certificates do not fail the process.
pub fn cmd_check(config_path: &Path, opts: &RunOptions, selection: CheckSelection) -> Result<Outcome, CliError> {
    let loaded = load(config_path, opts.seed)?;
    let inst = &loaded.instance;
    let sel = selection.all_if_empty();
    let mut report = RunReport::new("check", &loaded);
    let mut timer = Timer(BTreeMap::new());
    let mut summary = Vec::new();

    if sel.convexity {
        let value = match timer.run("uniform_convexity_delta", || model::uniform_convexity_delta(&inst.tree, &inst.data)) {
            Ok(delta) => {
                summary.push(format!("convexity: delta_hat = {delta:.6e}"));
                json!({ "delta_hat": delta, "uniformly_convex": delta > inst.alm.convexity_tol })
            }
            Err(e) => {
                summary.push(format!("convexity: {e}"));
                json!({ "error": e.to_string() })
            }
        };
        report.certificates.insert("uniform_convexity_delta".into(), value);
    }
    if sel.surjectivity {
        let value = match timer.run("surjectivity_certificate", || oracle::surjectivity_certificate(&inst.tree, &inst.data)) {
            Ok(cert) => {
                summary.push(format!("surjectivity: sigma_min = {:.6e}, surjective = {}", cert.sigma_min, cert.surjective));
                to_value(&cert)
            }
            Err(e) => {
                summary.push(format!("surjectivity: {e}"));
                json!({ "error": e.to_string() })
            }
        };
        report.certificates.insert("surjectivity_certificate".into(), value);
    }
    if sel.rank {
        let value = match timer.run("surjectivity_verdict", || controllability::verdict_for(&inst.data)) {
            Ok(verdict) => {
                summary.push(format!("rank: {}", verdict.certificate_note));
                to_value(&verdict)
            }
            Err(e) => {
                summary.push(format!("rank: not applicable ({e})"));
                json!({ "applicable": false, "note": e.to_string() })
            }
        };
        report.certificates.insert("surjectivity_verdict".into(), value);
    }
    Ok(Outcome { report, exit_code: EXIT_OK, iterations_csv: None, timings: timer.0, summary })
}

/// Runs both the ALM and the dense oracle and reports their distance.
pub fn cmd_compare(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    let loaded = load(config_path, opts.seed)?;
    let inst = &loaded.instance;
    let tree = &inst.tree;
    let mut report = RunReport::new("compare", &loaded);
    let mut timer = Timer(BTreeMap::new());
    if !opts.force {
        certify(&mut report, &mut timer, inst)?;
    }
    let kkt = timer.run("kkt_solve", || oracle::kkt_solve(tree, &inst.data))?;
    let mut config = inst.alm.clone();
    config.certify = false;
    config.reference = Some(Reference { control: kkt.control.clone(), multiplier: kkt.multiplier.clone() });
    let alm_report = timer.run("alm_solve", || alm::alm_solve(tree, &inst.data, &config))?;
    let alm_gap = oracle::duality_gap(tree, &inst.data, &alm_report.final_control, &alm_report.final_multiplier)?;
    let oracle_gap = oracle::duality_gap(tree, &inst.data, &kkt.control, &kkt.multiplier)?;

    let du = alm_report.final_control.axpy(-1.0, &kkt.control);
    let control_distance = tree.l2_inner(&du, &du)?.sqrt();
    let ubar_norm = tree.l2_inner(&kkt.control, &kkt.control)?.sqrt();
    let multiplier_distance = model::leaf_norm(tree, &alm_report.final_multiplier.axpy(-1.0, &kkt.multiplier));
    let mut rng = ChaCha8Rng::seed_from_u64(loaded.seed);
    let saddle = alm::saddle_point_check(tree, &inst.data, &alm_report.final_control, &alm_report.final_multiplier, config.rho, SADDLE_SAMPLES, &mut rng)?;

    report.outputs.insert(
        "compare".into(),
        json!({
            "control_distance": control_distance,
            "relative_control_distance": control_distance / (1.0 + ubar_norm),
            "oracle_control_norm": ubar_norm,
            "multiplier_distance": multiplier_distance,
            "iterations": alm_report.iterations.len(),
            "verdict": alm_report.verdict,
        }),
    );
    report.outputs.insert("alm_solve".into(), alm_output(&alm_report, &config));
    report.outputs.insert("duality_gap.alm".into(), to_value(&alm_gap));
    report.outputs.insert("duality_gap.oracle".into(), to_value(&oracle_gap));
    report.outputs.insert("kkt_solve".into(), json!({ "kkt_residual": kkt.kkt_residual, "rhs_norm": kkt.rhs_norm }));
    report.outputs.insert("saddle_point_check".into(), to_value(&saddle));

    let summary = vec![
        format!("verdict: {:?} after {} iterations", alm_report.verdict, alm_report.iterations.len()),
        format!("|u_alm - u_kkt| = {control_distance:.6e} (relative {:.6e})", control_distance / (1.0 + ubar_norm)),
        format!("|lambda_alm - lambda_kkt| = {multiplier_distance:.6e}"),
        format!("gap (alm) = {:.6e}, gap (oracle) = {:.6e}", alm_gap.gap, oracle_gap.gap),
    ];
    Ok(Outcome {
        exit_code: if alm_report.converged() { EXIT_OK } else { EXIT_NOT_CONVERGED },
        iterations_csv: if opts.csv { Some(iterations_csv(&alm_report)?) } else { None },
        report,
        timings: timer.0,
        summary,
    })
}

/// JSON text of the certified random instance for `seed`.
pub fn cmd_generate(seed: u64) -> Result<String, CliError> {
    let mut text = random_instance(seed, &GeneratorBounds::default())?.to_json();
    text.push('\n');
    Ok(text)
}

/// Writes the report, the timing sidecar and the optional CSV into `dir`,
/// named after the config file and the command. Returns the report path.
pub fn write_outputs(outcome: &Outcome, config_path: &Path, dir: &Path) -> Result<PathBuf, CliError> {
    let io = |e: std::io::Error| CliError::config(format!("cannot write to {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("instance");
    let base = format!("{stem}.{}", outcome.report.command);
    let report_path = dir.join(format!("{base}.json"));
    fs::write(&report_path, outcome.report.to_json()).map_err(io)?;
    let timings = serde_json::to_string_pretty(&json!({ "instance_sha256": outcome.report.instance_sha256, "seconds": outcome.timings })).expect("timings serialize");
    fs::write(dir.join(format!("{base}.timings.json")), timings + "\n").map_err(io)?;
    if let Some(csv) = &outcome.iterations_csv {
        fs::write(dir.join(format!("{base}.iterations.csv")), csv).map_err(io)?;
    }
    Ok(report_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::NotSurjective(0.0)), EXIT_CERTIFICATION);
        assert_eq!(exit_code(&Error::SizeGuard(1, 0)), EXIT_CERTIFICATION);
        assert_eq!(exit_code(&Error::NotUniformlyConvex(-1.0)), EXIT_CERTIFICATION);
    }

    #[test]
    fn empty_selection_means_everything() {
        let s = CheckSelection::default().all_if_empty();
        assert!(s.surjectivity && s.rank && s.convexity);
        let s = CheckSelection { rank: true, ..Default::default() }.all_if_empty();
        assert!(s.rank && !s.surjectivity && !s.convexity);
    }
}
