//! Command-line driver for the separatrix-map laboratory.
//!
//! Every subcommand writes self-describing artifacts into `--out`: each file
//! embeds the tool version, a hash of the full configuration, a hash of the
//! model, and the seed, so a rerun with the same inputs is byte-identical
//! and an artifact can always be traced back to what produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use separatrix::diffusion::{self, BinSpec, WalkSpec};
use separatrix::flow::{self, ScalingForm};
use separatrix::geometry::{self, SeparatrixBranch};
use separatrix::hamiltonian::{energy_e, ModelSpec, PhasePoint, TrigPerturbation};
use separatrix::map::{self, RegimePolicy, SepMapState};
use separatrix::melnikov;

const TOOL: &str = "separatrix";
const VERSION: &str = env!("CARGO_PKG_VERSION");
const THREADS_ENV: &str = "SEPARATRIX_THREADS";

#[derive(Parser, Debug)]
#[command(name = TOOL, version, about = "Numerical laboratory for the separatrix map")]
struct Cli {
    /// Model file; omitted means the built-in single-harmonic model.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Base seed for all hashed randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads. When absent, SEPARATRIX_THREADS is consulted, then
    /// the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Integration tolerance override for flow-based commands.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Unperturbed separatrix geometry.
    Geometry {
        #[command(subcommand)]
        cmd: GeometryCmd,
    },
    /// Splitting potential tables.
    Melnikov {
        #[command(subcommand)]
        cmd: MelnikovCmd,
    },
    /// Separatrix map steps and orbits.
    Map {
        #[command(subcommand)]
        cmd: MapCmd,
    },
    /// Direct integration of the full flow.
    Flow {
        #[command(subcommand)]
        cmd: FlowCmd,
    },
    /// Random-walk ensembles and drift/volatility estimation.
    Diffuse {
        #[command(subcommand)]
        cmd: DiffuseCmd,
    },
    /// Numeric one-step increments against the first-order map prediction
    /// over an epsilon ladder; exits nonzero if the fitted slopes fall below
    /// the first-order thresholds.
    VerifyScaling(VerifyScalingArgs),
    /// Recompute the golden reference tables and diff them against the
    /// committed files; exits nonzero on any mismatch.
    Golden {
        /// Rewrite the committed files instead of diffing.
        #[arg(long)]
        write: bool,
        /// Directory holding the golden files.
        #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/golden"))]
        dir: PathBuf,
    },
    /// Map orbit -> empirical drift/volatility -> splitting-potential
    /// variance, the whole pipeline in one run.
    EndToEnd {
        /// Orbit length in map steps.
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Initial action.
        #[arg(long, default_value_t = 1.3)]
        eta0: f64,
    },
}

#[derive(Subcommand, Debug)]
enum GeometryCmd {
    /// Tabulate (tau, p, q, chi) along one separatrix branch.
    Tabulate {
        #[arg(long, value_enum, default_value_t = Branch::Plus)]
        branch: Branch,
        /// Grid as start:end:count.
        #[arg(long, default_value = "-10:10:201", allow_hyphen_values = true)]
        tau_grid: String,
    },
}

#[derive(Subcommand, Debug)]
enum MelnikovCmd {
    /// Tabulate Theta(eta, xi, tau) on a phase grid at fixed action.
    Grid {
        #[arg(long)]
        eta: f64,
        #[arg(long, value_enum, default_value_t = Branch::Plus)]
        sigma: Branch,
        #[arg(long, default_value_t = 16)]
        nxi: usize,
        #[arg(long, default_value_t = 8)]
        ntau: usize,
    },
}

#[derive(Subcommand, Debug)]
enum MapCmd {
    /// One map step from a given state.
    Step {
        /// State as eta,xi,h,tau,sigma with sigma in {+,-}.
        #[arg(long, allow_hyphen_values = true)]
        state: String,
        #[arg(long, value_enum, default_value_t = Regime::Auto)]
        regime: Regime,
    },
    /// Iterate the map n times.
    Orbit {
        #[arg(long, allow_hyphen_values = true)]
        state: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Regime::Auto)]
        regime: Regime,
        /// Drop the eps-sized theorem gate and iterate the map as a
        /// standalone dynamical system.
        #[arg(long)]
        ungated: bool,
    },
}

#[derive(Subcommand, Debug)]
enum FlowCmd {
    /// Integrate the full flow from a phase point to its next section
    /// crossing and extract map coordinates there.
    Return {
        /// Start as I,phi,p,q,t.
        #[arg(long, allow_hyphen_values = true)]
        state: String,
    },
}

#[derive(Subcommand, Debug)]
enum DiffuseCmd {
    /// Simulate an ensemble of constant-coefficient walks.
    Walk {
        /// Spec file with key = value lines: sigma, b, delta, eta0, s.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Per-bin drift/volatility estimates from a map-orbit CSV.
    Estimate {
        /// Orbit file produced by `map orbit`.
        #[arg(long)]
        orbit: PathBuf,
        #[arg(long, default_value_t = 16)]
        bins: usize,
    },
}

#[derive(Args, Debug)]
struct VerifyScalingArgs {
    #[arg(long, value_enum, default_value_t = Form::Nonres)]
    form: Form,
    /// Comma-separated epsilon ladder.
    #[arg(long, default_value = "1e-4,3e-4,1e-3,3e-3,1e-2")]
    eps_list: String,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Initial action; defaults to the form-specific experiment value.
    #[arg(long)]
    eta0: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Branch {
    Plus,
    Minus,
}

impl From<Branch> for SeparatrixBranch {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Plus => SeparatrixBranch::Plus,
            Branch::Minus => SeparatrixBranch::Minus,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Regime {
    Auto,
    Nonres,
    Res,
}

impl From<Regime> for RegimePolicy {
    fn from(r: Regime) -> Self {
        match r {
            Regime::Auto => RegimePolicy::Auto,
            Regime::Nonres => RegimePolicy::NonResonant,
            Regime::Res => RegimePolicy::Resonant,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Form {
    Nonres,
    Res,
}

/// Provenance block embedded in every artifact.
#[derive(Serialize, Clone)]
struct Header {
    tool: String,
    version: String,
    config_sha256: String,
    model_sha256: String,
    seed: u64,
}

impl Header {
    fn comment_lines(&self) -> String {
        format!(
            "# tool = {} {}\n# config = {}\n# model = {}\n# seed = {}\n",
            self.tool, self.version, self.config_sha256, self.model_sha256, self.seed
        )
    }
}

fn sha256_hex(data: &str) -> String {
    let mut h = Sha256::new();
    h.update(data.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// The single-harmonic reference model `(1 - cos q) cos phi` used when no
/// model file is given.
fn builtin_model() -> ModelSpec {
    ModelSpec::new(
        TrigPerturbation::pendulum_times_cos(1, 0, 1.0),
        1e-3,
        (-1.0, 2.5),
        0.25,
    )
    .expect("builtin model is valid")
}

fn load_model(path: Option<&Path>) -> Result<ModelSpec, String> {
    match path {
        None => Ok(builtin_model()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read model file {}: {e}", p.display()))?;
            ModelSpec::from_model_file(&text).map_err(|e| format!("bad model file: {e}"))
        }
    }
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(format!("{what}: expected {n} comma-separated values"));
    }
    parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|e| format!("{what}: {e}")))
        .collect()
}

fn parse_map_state(s: &str) -> Result<SepMapState, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err("state: expected eta,xi,h,tau,sigma".into());
    }
    let nums: Result<Vec<f64>, String> = parts[..4]
        .iter()
        .map(|p| p.parse::<f64>().map_err(|e| format!("state: {e}")))
        .collect();
    let nums = nums?;
    let sigma = match parts[4] {
        "+" | "plus" => SeparatrixBranch::Plus,
        "-" | "minus" => SeparatrixBranch::Minus,
        other => return Err(format!("state: sigma must be + or -, got {other}")),
    };
    Ok(SepMapState::new(nums[0], nums[1], nums[2], nums[3], sigma))
}

fn parse_grid(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err("grid: expected start:end:count".into());
    }
    Ok((
        parts[0].parse().map_err(|e| format!("grid start: {e}"))?,
        parts[1].parse().map_err(|e| format!("grid end: {e}"))?,
        parts[2].parse().map_err(|e| format!("grid count: {e}"))?,
    ))
}

fn write_artifact(out_dir: &Path, name: &str, contents: &str) -> Result<PathBuf, String> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(path)
}

fn json_artifact<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| format!("serialization failed: {e}"))
}

fn init_threads(requested: Option<usize>) -> Result<(), String> {
    let n = match requested {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|e| format!("bad {THREADS_ENV}: {e}"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| format!("thread pool: {e}"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    init_threads(cli.threads)?;
    let model = load_model(cli.model.as_deref())?;
    let model_text = model.to_model_file();
    let header = Header {
        tool: TOOL.into(),
        version: VERSION.into(),
        config_sha256: sha256_hex(&format!(
            "{VERSION}|{:?}|seed={}|tol={:?}|{model_text}",
            cli.cmd, cli.seed, cli.tol
        )),
        model_sha256: sha256_hex(&model_text),
        seed: cli.seed,
    };

    match &cli.cmd {
        Cmd::Geometry {
            cmd: GeometryCmd::Tabulate { branch, tau_grid },
        } => cmd_geometry(cli, &header, *branch, tau_grid),
        Cmd::Melnikov {
            cmd:
                MelnikovCmd::Grid {
                    eta,
                    sigma,
                    nxi,
                    ntau,
                },
        } => cmd_melnikov_grid(cli, &header, &model, *eta, *sigma, *nxi, *ntau),
        Cmd::Map {
            cmd: MapCmd::Step { state, regime },
        } => cmd_map_step(cli, &header, &model, state, *regime),
        Cmd::Map {
            cmd: MapCmd::Orbit {
                state,
                n,
                regime,
                ungated,
            },
        } => cmd_map_orbit(cli, &header, &model, state, *n, *regime, *ungated),
        Cmd::Flow {
            cmd: FlowCmd::Return { state },
        } => cmd_flow_return(cli, &header, &model, state),
        Cmd::Diffuse {
            cmd: DiffuseCmd::Walk { spec, samples },
        } => cmd_diffuse_walk(cli, &header, spec, *samples),
        Cmd::Diffuse {
            cmd: DiffuseCmd::Estimate { orbit, bins },
        } => cmd_diffuse_estimate(cli, &header, orbit, *bins),
        Cmd::VerifyScaling(args) => cmd_verify_scaling(cli, &header, args),
        Cmd::Golden { write, dir } => cmd_golden(&header, *write, dir),
        Cmd::EndToEnd { n, eta0 } => cmd_end_to_end(cli, &header, &model, *n, *eta0),
    }
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

fn cmd_geometry(
    cli: &Cli,
    header: &Header,
    branch: Branch,
    tau_grid: &str,
) -> Result<ExitCode, String> {
    let (a, b, n) = parse_grid(tau_grid)?;
    let rows = geometry::tabulate(branch.into(), a, b, n);
    let mut csv = header.comment_lines();
    csv.push_str("tau,p,q,chi\n");
    for (tau, p, q, chi) in rows {
        let _ = writeln!(csv, "{tau},{p},{q},{chi}");
    }
    let path = write_artifact(&cli.out, "geometry_tabulate.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_melnikov_grid(
    cli: &Cli,
    header: &Header,
    model: &ModelSpec,
    eta: f64,
    sigma: Branch,
    nxi: usize,
    ntau: usize,
) -> Result<ExitCode, String> {
    use std::f64::consts::PI;
    let mut csv = header.comment_lines();
    let _ = writeln!(csv, "# eta = {eta}");
    csv.push_str("xi,tau,theta,err_est\n");
    for i in 0..nxi {
        let xi = 2.0 * PI * i as f64 / nxi as f64;
        for j in 0..ntau.max(1) {
            let tau = PI * j as f64 / ntau.max(1) as f64;
            let v = melnikov::theta_splitting(eta, xi, tau, sigma.into(), model)
                .map_err(|e| e.to_string())?;
            let _ = writeln!(csv, "{xi},{tau},{},{}", v.value, v.error);
        }
    }
    let path = write_artifact(&cli.out, "melnikov_grid.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StepReport {
    header: Header,
    input: SepMapState,
    output: SepMapState,
    diagnostics: map::MapDiagnostics,
}

fn cmd_map_step(
    cli: &Cli,
    header: &Header,
    model: &ModelSpec,
    state: &str,
    regime: Regime,
) -> Result<ExitCode, String> {
    let s = parse_map_state(state)?;
    let orbit = map::iterate(&s, model, 1, regime.into()).map_err(|e| e.to_string())?;
    if orbit.states.len() < 2 {
        return Err(format!("map step not defined: {:?}", orbit.termination));
    }
    let report = StepReport {
        header: header.clone(),
        input: s,
        output: orbit.states[1],
        diagnostics: orbit.diagnostics[0].clone(),
    };
    let path = write_artifact(&cli.out, "map_step.json", &json_artifact(&report)?)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_map_orbit(
    cli: &Cli,
    header: &Header,
    model: &ModelSpec,
    state: &str,
    n: usize,
    regime: Regime,
    ungated: bool,
) -> Result<ExitCode, String> {
    let s = parse_map_state(state)?;
    let orbit = if ungated {
        map::iterate_ungated(&s, model, n, regime.into())
    } else {
        map::iterate(&s, model, n, regime.into())
    }
    .map_err(|e| e.to_string())?;
    let mut csv = header.comment_lines();
    let _ = writeln!(csv, "# epsilon = {}", model.epsilon);
    let _ = writeln!(csv, "# termination = {:?}", orbit.termination);
    csv.push_str("n,eta,xi,h,tau,sigma,w,bar_t,residual\n");
    for (i, st) in orbit.states.iter().enumerate() {
        let (w, bar_t, residual) = if i == 0 {
            (f64::NAN, 0, 0.0)
        } else {
            let d = &orbit.diagnostics[i - 1];
            (d.w_value, d.bar_t, d.residual)
        };
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{w},{bar_t},{residual}",
            st.eta,
            st.xi,
            st.h,
            st.tau,
            st.sigma.sign()
        );
    }
    let path = write_artifact(&cli.out, "map_orbit.csv", &csv)?;
    println!(
        "wrote {} ({} states, {:?})",
        path.display(),
        orbit.states.len(),
        orbit.termination
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ReturnReport {
    header: Header,
    start: PhasePoint,
    event_time: f64,
    event_point: PhasePoint,
    state: SepMapState,
    accepted_steps: usize,
}

fn cmd_flow_return(
    cli: &Cli,
    header: &Header,
    model: &ModelSpec,
    state: &str,
) -> Result<ExitCode, String> {
    let v = parse_floats(state, 5, "state")?;
    let start = PhasePoint::new(v[0], v[1], v[2], v[3], v[4]);
    let (event, s, steps) =
        flow::numeric_return_map(model, &start).map_err(|e| e.to_string())?;
    let report = ReturnReport {
        header: header.clone(),
        start,
        event_time: event.time,
        event_point: event.point,
        state: s,
        accepted_steps: steps,
    };
    let path = write_artifact(&cli.out, "flow_return.json", &json_artifact(&report)?)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct WalkReport {
    header: Header,
    delta: f64,
    eta0: f64,
    s: f64,
    summary: diffusion::EnsembleSummary,
}

fn cmd_diffuse_walk(
    cli: &Cli,
    header: &Header,
    spec_path: &Path,
    samples: usize,
) -> Result<ExitCode, String> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| format!("cannot read {}: {e}", spec_path.display()))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("bad spec line: {line}"))?;
        kv.insert(
            k.trim().to_string(),
            v.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad spec value in {line:?}: {e}"))?,
        );
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| format!("spec missing {k}"));
    let spec = WalkSpec::constant(get("sigma")?, get("b")?, get("delta")?, get("eta0")?, get("s")?)
        .map_err(|e| e.to_string())?;
    let summary = diffusion::simulate_ensemble(&spec, samples, cli.seed);

    let mut csv = header.comment_lines();
    csv.push_str("bin_lo,bin_hi,count\n");
    let h = &summary.histogram;
    let width = (h.hi - h.lo) / h.counts.len() as f64;
    for (i, c) in h.counts.iter().enumerate() {
        let lo = h.lo + width * i as f64;
        let _ = writeln!(csv, "{lo},{},{c}", lo + width);
    }
    let hist_path = write_artifact(&cli.out, "diffuse_walk_histogram.csv", &csv)?;

    let report = WalkReport {
        header: header.clone(),
        delta: spec.delta,
        eta0: spec.eta0,
        s: spec.s,
        summary,
    };
    let json_path = write_artifact(&cli.out, "diffuse_walk.json", &json_artifact(&report)?)?;
    println!("wrote {} and {}", json_path.display(), hist_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_diffuse_estimate(
    cli: &Cli,
    header: &Header,
    orbit_path: &Path,
    bins: usize,
) -> Result<ExitCode, String> {
    let text = std::fs::read_to_string(orbit_path)
        .map_err(|e| format!("cannot read {}: {e}", orbit_path.display()))?;
    let mut epsilon: Option<f64> = None;
    let mut states: Vec<SepMapState> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# epsilon =") {
            epsilon = Some(rest.trim().parse().map_err(|e| format!("bad epsilon: {e}"))?);
            continue;
        }
        if line.starts_with('#') || line.starts_with('n') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 6 {
            return Err(format!("bad orbit row: {line}"));
        }
        let f = |i: usize| -> Result<f64, String> {
            cols[i].parse().map_err(|e| format!("bad orbit row {line:?}: {e}"))
        };
        states.push(SepMapState::new(
            f(1)?,
            f(2)?,
            f(3)?,
            f(4)?,
            SeparatrixBranch::from_sign(f(5)?),
        ));
    }
    let epsilon = epsilon.ok_or("orbit file lacks the # epsilon header")?;
    if states.len() < 2 {
        return Err("orbit too short".into());
    }
    let (lo, hi) = states
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.eta), hi.max(s.eta))
        });
    let est = diffusion::empirical_drift_variance(&states, epsilon, BinSpec { lo, hi, n_bins: bins });
    let mut csv = header.comment_lines();
    let _ = writeln!(csv, "# epsilon = {epsilon}");
    csv.push_str("eta_mid,count,b_hat,sigma_hat,b_se,sigma_se\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for b in est {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            b.eta_mid,
            b.count,
            fmt(b.b_hat),
            fmt(b.sigma_hat),
            fmt(b.b_se),
            fmt(b.sigma_se)
        );
    }
    let path = write_artifact(&cli.out, "diffuse_estimate.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// The two experiment models: the thresholds below match the integration
/// test suite.
fn scaling_setup(form: Form) -> (ModelSpec, f64, f64) {
    match form {
        Form::Nonres => {
            let mut p = TrigPerturbation::pendulum_times_cos(1, 0, 1.0);
            p.add_cos(0, 1, -1, 1.0)
                .add_cos(1, 1, -1, -0.5)
                .add_cos(-1, 1, -1, -0.5);
            let m = ModelSpec::new(p, 1e-3, (-1.0, 2.5), 0.25).expect("valid");
            (m, 1.6, 1.6)
        }
        Form::Res => {
            let mut p = TrigPerturbation::pendulum_times_cos(1, 0, 1.0);
            p.add_cos(0, 1, 0, 0.1);
            let m = ModelSpec::new(p, 1e-3, (-1.0, 2.5), 0.25).expect("valid");
            (m, 0.0, 1.5)
        }
    }
}

fn cmd_verify_scaling(
    cli: &Cli,
    header: &Header,
    args: &VerifyScalingArgs,
) -> Result<ExitCode, String> {
    let eps_list: Result<Vec<f64>, String> = args
        .eps_list
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("eps list: {e}")))
        .collect();
    let eps_list = eps_list?;
    let (default_model, default_eta0, threshold) = scaling_setup(args.form);
    let model = match &cli.model {
        Some(_) => load_model(cli.model.as_deref())?,
        None => default_model,
    };
    let eta0 = args.eta0.unwrap_or(default_eta0);
    let form = match args.form {
        Form::Nonres => ScalingForm::NonResonant,
        Form::Res => ScalingForm::Resonant,
    };
    let report = flow::scaling_experiment(&model, form, eta0, &eps_list, args.samples, cli.seed)
        .map_err(|e| e.to_string())?;

    let mut csv = header.comment_lines();
    let _ = writeln!(csv, "# form = {:?}, eta0 = {eta0}, samples = {}", args.form, args.samples);
    let _ = writeln!(csv, "# fitted_slope_eta = {}", report.slope_eta);
    let _ = writeln!(csv, "# fitted_slope_h = {}", report.slope_h);
    csv.push_str("eps,mean_abs_err_eta,mean_abs_err_h,fitted_slope\n");
    for p in &report.points {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            p.epsilon, p.mean_abs_err_eta, p.mean_abs_err_h, report.slope_eta
        );
    }
    let path = write_artifact(&cli.out, "verify_scaling.csv", &csv)?;
    let pass = match form {
        ScalingForm::NonResonant => report.slope_eta >= threshold && report.slope_h >= threshold,
        ScalingForm::Resonant => report.slope_eta >= threshold,
    };
    println!(
        "wrote {} (slope_eta = {:.3}, slope_h = {:.3}, threshold = {threshold}, {})",
        path.display(),
        report.slope_eta,
        report.slope_h,
        if pass { "pass" } else { "FAIL" }
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

// ---------------------------------------------------------------------------
// Golden tables.
// ---------------------------------------------------------------------------

/// Closed-form splitting potential of the built-in model:
/// `Theta = 2 pi eta cos(xi) / sinh(pi eta / 2)`.
fn golden_theta(eta: f64, xi: f64) -> f64 {
    if eta == 0.0 {
        return 4.0 * xi.cos();
    }
    2.0 * std::f64::consts::PI * eta * xi.cos() / (std::f64::consts::PI * eta / 2.0).sinh()
}

/// Saddle-asymptote estimate of the gluing constant at truncation time
/// `tau`: `kappa = 1 / (2 a^2)` with `a = e^tau (p + |2 pi - q|) / 2 -> 4`.
fn kappa_estimate(tau: f64) -> f64 {
    let (p, _) = geometry::pendulum_separatrix(SeparatrixBranch::Plus, tau);
    // |q_rel| = 2 pi - q on the outgoing side, computed without cancellation.
    let q_dist = geometry::separatrix_q_rel(SeparatrixBranch::Plus, tau).abs();
    let a = tau.exp() * (p + q_dist) / 2.0;
    1.0 / (2.0 * a * a)
}

fn golden_tables(model: &ModelSpec) -> Result<Vec<(String, String)>, String> {
    use std::f64::consts::PI;
    let mut theta = String::from("eta,xi,theta_numeric,theta_closed_form\n");
    for i in 0..16 {
        let eta = 0.3 + (2.0 - 0.3) * i as f64 / 15.0;
        for j in 0..16 {
            let xi = 2.0 * PI * j as f64 / 16.0;
            let v = melnikov::theta_splitting(eta, xi, 0.0, SeparatrixBranch::Plus, model)
                .map_err(|e| e.to_string())?;
            let _ = writeln!(theta, "{eta},{xi},{:.12e},{:.12e}", v.value, golden_theta(eta, xi));
        }
    }

    let mut kappa = String::from("tau_cut,kappa_estimate,kappa_exact\n");
    for tau in [10.0, 20.0, 30.0] {
        let _ = writeln!(
            kappa,
            "{tau},{:.12e},{:.12e}",
            kappa_estimate(tau),
            1.0 / 32.0
        );
    }

    let mut bar_t = String::from("w,bar_t\n");
    for w in [1e-5, 5e-5, 1e-4] {
        let m = model.clone().with_epsilon(1e-3);
        let t = map::select_bar_t(w, &m).map_err(|e| e.to_string())?;
        let _ = writeln!(bar_t, "{w},{t}");
    }

    Ok(vec![
        ("theta_golden.csv".into(), theta),
        ("kappa_golden.csv".into(), kappa),
        ("bar_t_golden.csv".into(), bar_t),
    ])
}

fn cmd_golden(header: &Header, write: bool, dir: &Path) -> Result<ExitCode, String> {
    let model = builtin_model();
    let tables = golden_tables(&model)?;
    let _ = header;
    if write {
        for (name, contents) in &tables {
            write_artifact(dir, name, contents)?;
            println!("wrote {}", dir.join(name).display());
        }
        return Ok(ExitCode::SUCCESS);
    }
    let mut ok = true;
    for (name, contents) in &tables {
        let path = dir.join(name);
        match std::fs::read_to_string(&path) {
            Ok(existing) if existing == *contents => println!("ok   {}", path.display()),
            Ok(_) => {
                println!("DIFF {}", path.display());
                ok = false;
            }
            Err(e) => {
                println!("MISSING {} ({e})", path.display());
                ok = false;
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

// ---------------------------------------------------------------------------
// End-to-end pipeline.
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EndToEndReport {
    header: Header,
    eta0: f64,
    steps_completed: usize,
    termination: map::OrbitTermination,
    bins: Vec<EndToEndBin>,
}

#[derive(Serialize)]
struct EndToEndBin {
    eta_mid: f64,
    count: usize,
    sigma_hat: Option<f64>,
    sigma_melnikov: f64,
    ratio: Option<f64>,
}

fn cmd_end_to_end(
    cli: &Cli,
    header: &Header,
    model: &ModelSpec,
    n: usize,
    eta0: f64,
) -> Result<ExitCode, String> {
    let eps = model.epsilon;
    // Start mid regime-window on the positive branch with a hashed phase.
    let w = 0.1 * eps;
    let xi0 = 2.0 * std::f64::consts::PI * (cli.seed as f64 / u64::MAX as f64);
    let s0 = SepMapState::new(eta0, xi0, energy_e(eta0) + w, 0.0, SeparatrixBranch::Plus);
    // The long orbit runs ungated: excursions beyond the O(eps) theorem
    // window are part of the chaotic-layer dynamics being sampled.
    let orbit = map::iterate_ungated(&s0, model, n, RegimePolicy::Auto).map_err(|e| e.to_string())?;
    let steps = orbit.states.len() - 1;

    let (lo, hi) = orbit
        .states
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.eta), hi.max(s.eta))
        });
    let est = diffusion::empirical_drift_variance(&orbit.states, eps, BinSpec { lo, hi, n_bins: 8 });
    let mut bins = Vec::new();
    for b in est {
        let sigma_melnikov = diffusion::melnikov_variance(b.eta_mid, model)
            .map(|v| v.sqrt())
            .unwrap_or(f64::NAN);
        bins.push(EndToEndBin {
            eta_mid: b.eta_mid,
            count: b.count,
            sigma_hat: b.sigma_hat,
            ratio: b.sigma_hat.map(|s| s / sigma_melnikov),
            sigma_melnikov,
        });
    }
    let report = EndToEndReport {
        header: header.clone(),
        eta0,
        steps_completed: steps,
        termination: orbit.termination,
        bins,
    };
    let path = write_artifact(&cli.out, "end_to_end.json", &json_artifact(&report)?)?;
    println!("wrote {} ({steps} map steps)", path.display());
    Ok(ExitCode::SUCCESS)
}
