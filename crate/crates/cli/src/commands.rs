//! Subcommand implementations. Each returns its human-readable summary so the
//! binary only decides where text and exit codes go.

use std::fmt::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use rehab_core::body_frame::{load_keypoint_stream, Side};
use rehab_core::dmp::{scale_dmp, DmpModel};
use rehab_core::metrics::{completion_time, max_deviation, reaction_time, rmse, trace_reach_ratio};
use rehab_core::motion::{FrameId, Pose, TimedTrajectory, Vec3};
use rehab_core::pipeline::{learn_demonstration, LearnOptions};
use rehab_core::safety::write_samples;
use rehab_core::sim::{calibrate, run_scenario, Scenario, SimTrace, Simulation};
use rehab_core::Error;

use crate::server::Server;
use crate::session::{LoopConfig, Session};

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad input files, settings or arguments (exit 2).
    Config(String),
    /// A failure while computing (exit 3).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn context(e: Error, what: &Path) -> Self {
        let message = match &e {
            // I/O errors already name their file
            Error::Io { .. } => e.to_string(),
            _ => format!("{}: {e}", what.display()),
        };
        if e.is_config() {
            CliError::Config(message)
        } else {
            CliError::Runtime(message)
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T = String> = Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path, seed: Option<u64>, overrides: &[String]) -> CliResult<Scenario> {
    let mut overrides = overrides.to_vec();
    if let Some(seed) = seed {
        overrides.push(format!("seed={seed}"));
    }
    Scenario::load(path, &overrides).map_err(|e| CliError::context(e, path))
}

/// `model.dmp.json` -> `model.dmp.report.json`.
pub fn report_path(model_out: &Path) -> PathBuf {
    let name = model_out.file_name().map_or("model".into(), |n| n.to_string_lossy().into_owned());
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    model_out.with_file_name(format!("{stem}.report.json"))
}

pub struct LearnArgs {
    pub keypoints: PathBuf,
    pub out: PathBuf,
    pub side: Side,
    pub n_basis: usize,
    pub filter: Option<(usize, f64)>,
}

pub fn learn(a: &LearnArgs) -> CliResult {
    let frames = load_keypoint_stream(&a.keypoints).map_err(|e| CliError::context(e, &a.keypoints))?;
    let opts = LearnOptions {
        side: a.side,
        n_basis: a.n_basis,
        filter: a.filter,
    };
    let (model, report) = learn_demonstration(&frames, &opts).map_err(|e| CliError::context(e, &a.keypoints))?;
    model.save(&a.out).map_err(|e| CliError::context(e, &a.out))?;
    let report_out = report_path(&a.out);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&report_out, &(json + "\n"))?;
    Ok(format!(
        "learned {} frames ({:.2} s): limb length {:.4} m, path {:.4} m, R = {:.4}, rmse {:.3} mm\nwrote {} and {}",
        report.frames,
        report.duration_s,
        report.limb_length,
        report.path_length,
        report.reach_ratio,
        report.reproduction_rmse * 1e3,
        a.out.display(),
        report_out.display()
    ))
}

/// Parses `x,y,z`.
pub fn parse_point(text: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected three finite numbers `x,y,z`, got `{text}`")),
    }
}

pub fn scale(model_path: &Path, limb_length: f64, start: Option<Vec3>, goal: Option<Vec3>, out: &Path) -> CliResult {
    let model = DmpModel::load(model_path).map_err(|e| CliError::context(e, model_path))?;
    let y0 = start.map(|p| Pose::new(p, model.y0.orientation));
    let g = goal.map(|p| Pose::new(p, model.g.orientation));
    let scaled = scale_dmp(&model, limb_length, y0, g).map_err(|e| CliError::context(e, model_path))?;
    scaled.save(out).map_err(|e| CliError::context(e, out))?;
    Ok(format!(
        "scaled {} from L = {:.4} m to {:.4} m (lambda {:.4})\nwrote {}",
        model_path.display(),
        model.limb_length,
        limb_length,
        limb_length / model.limb_length,
        out.display()
    ))
}

pub struct CalibrateArgs {
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub components: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<PathBuf>,
    pub overrides: Vec<String>,
}

pub fn calibrate_cmd(a: &CalibrateArgs) -> CliResult {
    let sc = load_scenario(&a.scenario, None, &a.overrides)?;
    let seed = a.seed.unwrap_or(sc.seed);
    let (samples, fit) = calibrate(&sc, a.components, seed).map_err(|e| CliError::context(e, &a.scenario))?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    fit.model.save(&a.out).map_err(|e| CliError::context(e, &a.out))?;
    if let Some(path) = &a.samples {
        let mut buf = Vec::new();
        write_samples(&samples, &mut buf).expect("writing to memory");
        write_text(path, &String::from_utf8(buf).expect("samples are utf-8"))?;
    }
    let ll = fit.log_likelihood.last().copied().unwrap_or(f64::NAN);
    let mut text = format!(
        "fitted K = {} on {} samples in {} iterations ({}), mean log-likelihood {ll:.4}\nwrote {}",
        fit.model.k(),
        samples.len(),
        fit.iterations,
        if fit.converged { "converged" } else { "iteration cap" },
        a.out.display()
    );
    if let Some(path) = &a.samples {
        let _ = write!(text, " and {}", path.display());
    }
    Ok(text)
}

pub fn run(scenario: &Path, out: &Path, seed: Option<u64>, overrides: &[String]) -> CliResult {
    let sc = load_scenario(scenario, seed, overrides)?;
    let trace = run_scenario(&sc).map_err(|e| CliError::context(e, scenario))?;
    trace.save(out).map_err(|e| CliError::context(e, out))?;
    let done = completion_time(&trace).map_err(|e| CliError::context(e, scenario))?;
    Ok(format!(
        "{}: {} after {} ticks{}\nwrote {}",
        sc.name,
        trace.meta.get("outcome").map_or("unknown", String::as_str),
        trace.records.len(),
        done.map_or(String::new(), |t| format!(", completed at {t:.2} s")),
        out.display()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Outcome,
    Completion,
    MaxDeviation,
    Reaction,
    Reach,
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Outcome,
        Metric::Completion,
        Metric::MaxDeviation,
        Metric::Reaction,
        Metric::Reach,
        Metric::Rmse,
    ];

    fn header(self) -> &'static [&'static str] {
        match self {
            Metric::Outcome => &["outcome", "ticks"],
            Metric::Completion => &["completion_s"],
            Metric::MaxDeviation => &["max_deviation_m"],
            Metric::Reaction => &["reaction_s"],
            Metric::Reach => &["limb_length_m", "reach_ratio"],
            Metric::Rmse => &["rmse_m"],
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "outcome" => Metric::Outcome,
            "completion" => Metric::Completion,
            "max-deviation" => Metric::MaxDeviation,
            "reaction" => Metric::Reaction,
            "reach" => Metric::Reach,
            "rmse" => Metric::Rmse,
            _ => return Err(format!("unknown metric `{s}`")),
        })
    }
}

fn commanded_path(trace: &SimTrace) -> TimedTrajectory {
    TimedTrajectory {
        frame: FrameId::Body,
        samples: trace.records.iter().map(|r| (r.time, r.pose_cmd)).collect(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.6}"))
}

/// One row per trace plus, with two or more reach ratios, their spread
/// `(max - min) / mean`. `rmse` compares commanded paths with `reference`.
pub fn report(traces: &[PathBuf], metrics: &[Metric], reference: Option<&Path>) -> CliResult {
    let metrics: Vec<Metric> = if metrics.is_empty() {
        Metric::ALL.iter().copied().filter(|m| *m != Metric::Rmse || reference.is_some()).collect()
    } else {
        metrics.to_vec()
    };
    let reference = match reference {
        Some(p) => Some(commanded_path(&SimTrace::load(p).map_err(|e| CliError::context(e, p))?)),
        None if metrics.contains(&Metric::Rmse) => {
            return Err(CliError::Config("the rmse metric needs --reference".into()));
        }
        None => None,
    };
    let mut header = vec!["trace"];
    for m in &metrics {
        header.extend_from_slice(m.header());
    }
    let mut out = header.join("\t") + "\n";
    let mut ratios = Vec::new();
    for path in traces {
        let trace = SimTrace::load(path).map_err(|e| CliError::context(e, path))?;
        let ctx = |e| CliError::context(e, path);
        if trace.records.is_empty() {
            return Err(CliError::Runtime(format!("{}: trace has no records", path.display())));
        }
        let mut row = vec![path.display().to_string()];
        for m in &metrics {
            match m {
                Metric::Outcome => {
                    row.push(trace.meta.get("outcome").cloned().unwrap_or_else(|| "-".into()));
                    row.push(trace.records.len().to_string());
                }
                Metric::Completion => row.push(cell(completion_time(&trace).map_err(ctx)?)),
                Metric::MaxDeviation => row.push(cell(Some(max_deviation(&trace).map_err(ctx)?))),
                Metric::Reaction => row.push(cell(reaction_time(&trace).map_err(ctx)?)),
                Metric::Reach => {
                    let limb = trace.meta_f64("subject_limb_length");
                    let r = limb.map(|l| trace_reach_ratio(&trace, l)).transpose().map_err(ctx)?;
                    ratios.extend(r);
                    row.push(cell(limb));
                    row.push(cell(r));
                }
                Metric::Rmse => {
                    let reference = reference.as_ref().expect("checked above");
                    row.push(cell(Some(rmse(&commanded_path(&trace), reference))));
                }
            }
        }
        out += &(row.join("\t") + "\n");
    }
    if ratios.len() >= 2 {
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let _ = writeln!(out, "# reach ratio spread {:.4}% (min {lo:.4}, max {hi:.4})", 100.0 * (hi - lo) / mean);
    }
    Ok(out)
}

pub struct ServeArgs {
    pub scenario: PathBuf,
    pub host: IpAddr,
    pub port: u16,
    pub ws_port: Option<u16>,
    pub decimation: u32,
    pub ticks: Option<u64>,
    pub trace: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

/// Starts the live service. `on_ready` receives the bound addresses before
/// the loop blocks, so callers can announce them.
pub fn serve(a: &ServeArgs, on_ready: impl FnOnce(&Server)) -> CliResult {
    let sc = load_scenario(&a.scenario, a.seed, &a.overrides)?;
    let setup = sc.setup().map_err(|e| CliError::context(e, &a.scenario))?;
    let sim = Simulation::new(setup).map_err(|e| CliError::context(e, &a.scenario))?;
    let session = Session::new(sim, a.decimation, a.trace.is_some());
    let cfg = LoopConfig {
        realtime: true,
        max_ticks: a.ticks,
    };
    let server = Server::start(
        session,
        SocketAddr::new(a.host, a.port),
        a.ws_port.map(|p| SocketAddr::new(a.host, p)),
        cfg,
    )
    .map_err(|e| CliError::Config(format!("cannot listen on {}:{}: {e}", a.host, a.port)))?;
    on_ready(&server);
    let session = server.join();
    let mut text = format!("session ended after {} ticks", session.next_tick());
    if let (Some(path), Some(trace)) = (&a.trace, session.trace()) {
        trace.save(path).map_err(|e| CliError::context(e, path))?;
        let _ = write!(text, "\nwrote {}", path.display());
    }
    Ok(text)
}
