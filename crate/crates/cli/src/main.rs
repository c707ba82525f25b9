//! `csi`: command line front end for the csi-core library.
//!
//! Exit status is 0 on success, 2 for bad input and 3 for numerical failure.
//! Errors are printed to stderr as a single JSON object.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csi_core::config::{load_json, AcquisitionConfig, ConstraintConfig};
use csi_core::container::{read_container, read_grid, scalar_channels, write_container, write_grid, CsirHeader};
use csi_core::experiments::{experiment_curvature, experiment_solution_set, write_curvature, CurvatureExperiment, SolutionSetExperiment};
use csi_core::imaging::{metrics, pdff_map, reconstruct, reconstruct_noisy, FieldmapConstraint, PdffConvention, ReconConfig, ReconResult};
use csi_core::phantom::{corrupt, default_phantom, generate_phantom, CorruptionSpec, PhantomSpec};
use csi_core::residual::ResidualOperator;
use csi_core::solution_set::{delta_matrix, delta_zero_set, model_lattice, ZeroSetConfig};
use csi_core::solver::{constrained_flow, regularized_constrained_flow, wirtinger_flow, FlowConfig, RecoveryResult};
use csi_core::species_model::{check_j_full_rank, check_submatrices_nonsingular};
use csi_core::{linalg, CVec, Complex64, Error};
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "csi", version, about = "Chemical shift encoded MRI parameter recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print echo/species counts and model-matrix checks.
    ModelInfo {
        #[arg(long)]
        acquisition: PathBuf,
    },
    /// Solution-set analysis: lattice, kernel zeros of Delta and a sigma_min profile.
    Analyze(AnalyzeArgs),
    /// Single-voxel recovery from a JSON problem.
    Solve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV of the xi iterates.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Generate a phantom and its truth maps.
    Phantom {
        #[arg(long)]
        acquisition: Option<PathBuf>,
        /// Phantom description; the built-in 64x64 phantom when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add noise and unmodeled species to a signal container.
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        /// Container holding the true xi map.
        #[arg(long)]
        xi: PathBuf,
        #[arg(long)]
        corruption: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Constrained image reconstruction.
    Reconstruct(ReconstructArgs),
    /// MSE, SNR and PSNR of an estimate container against a truth container.
    Metrics {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
    },
    /// Experiment drivers writing CSV/JSON data files.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    acquisition: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = -1000.0, allow_negative_numbers = true)]
    band_min: f64,
    #[arg(long, default_value_t = 21000.0, allow_negative_numbers = true)]
    band_max: f64,
    /// CSV of sigma_min(Delta(eta)) over the band.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    grid_step: f64,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    acquisition: PathBuf,
    #[arg(long)]
    constraint: Option<PathBuf>,
    /// Reconstruction settings (flow, projection, max_backtracks).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-voxel ball radius; switches to the noisy formulation.
    #[arg(long)]
    delta: Option<f64>,
    /// Container with the initial xi map; xi = 1 Hz everywhere when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Container with true concentrations, for the metrics table.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Experiment {
    SolutionSet {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Curvature {
        #[arg(long)]
        acquisition: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn report(&self) -> (u8, Value) {
        match self {
            Failure::Usage(msg) => (2, json!({"error": "UsageError", "message": msg})),
            Failure::Core(e) => {
                (if e.is_input_error() { 2 } else { 3 }, json!({"error": e.kind(), "message": e.to_string()}))
            }
        }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SolveMode {
    Plain,
    Constrained,
    Regularized,
}

#[derive(Deserialize)]
struct SolveInput {
    acquisition: AcquisitionConfig,
    /// `[re, im]` per echo.
    signal: Vec<[f64; 2]>,
    init: [f64; 2],
    #[serde(default)]
    flow: FlowConfig,
    #[serde(default = "default_mode")]
    mode: SolveMode,
    #[serde(default)]
    delta: f64,
    #[serde(default)]
    epsilon: f64,
}

fn default_mode() -> SolveMode {
    SolveMode::Plain
}

fn pair(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

fn pairs(v: &CVec) -> Vec<[f64; 2]> {
    v.iter().map(|z| pair(*z)).collect()
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn emit(out: Option<&Path>, value: &Value) -> CliResult<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            // a closed pipe is not an error for a report on stdout
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn acquisition(path: Option<&Path>) -> CliResult<AcquisitionConfig> {
    Ok(match path {
        Some(p) => load_json(p)?,
        None => AcquisitionConfig::phantom_default(),
    })
}

fn operator(cfg: &AcquisitionConfig) -> CliResult<ResidualOperator> {
    Ok(ResidualOperator::new(cfg.build()?)?)
}

fn model_info(path: &Path) -> CliResult<()> {
    let cfg: AcquisitionConfig = load_json(path)?;
    let model = cfg.build()?;
    let out = json!({
        "n_e": model.n_echoes(),
        "n_s": model.n_species(),
        "echo_times_ms": model.times().iter().map(|t| t * 1e3).collect::<Vec<_>>(),
        "species": model.species.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        "submatrices": check_submatrices_nonsingular(&model, 1e-10)?,
        "jacobian": check_j_full_rank(&model, 1e-10),
        "lattice": model_lattice(&model),
    });
    emit(None, &out)
}

fn analyze(args: &AnalyzeArgs) -> CliResult<()> {
    if !(args.band_max > args.band_min) || !(args.grid_step > 0.0) {
        return Err(Failure::Usage("need band_min < band_max and grid_step > 0".into()));
    }
    let cfg: AcquisitionConfig = load_json(&args.acquisition)?;
    let model = cfg.build()?;
    let set = delta_zero_set(&model, (args.band_min, args.band_max), &ZeroSetConfig::default())?;
    let zeros: Vec<Value> = set
        .zeros
        .iter()
        .map(|z| {
            json!({
                "eta_hz": z.eta_hz,
                "sigma_min": z.sigma_min,
                "classification": z.classification,
                "phases": z.swap_phases.as_ref().map(|p| p.iter().map(|c| pair(*c)).collect::<Vec<_>>()),
            })
        })
        .collect();
    write_json(&args.out, &json!({"lattice": model_lattice(&model), "zeros": zeros}))?;
    if let Some(csv) = &args.csv {
        let steps = ((args.band_max - args.band_min) / args.grid_step).floor() as usize;
        let mut text = String::from("eta_hz,sigma_min\n");
        for k in 0..=steps {
            let eta = args.band_min + k as f64 * args.grid_step;
            let sv = linalg::singular_values(&delta_matrix(Complex64::new(eta, 0.0), &model));
            text.push_str(&format!("{eta},{}\n", sv.last().copied().unwrap_or(0.0)));
        }
        std::fs::write(csv, text)?;
    }
    Ok(())
}

fn recovery_json(r: &RecoveryResult) -> Value {
    json!({
        "xi_hat": pair(r.xi_hat),
        "c_hat": pairs(&r.c_hat),
        "s_hat": r.s_hat.as_ref().map(pairs),
        "iterations": r.iterations,
        "final_grad_norm": r.final_grad_norm,
        "converged": r.converged,
        "step": r.step,
        "branch": r.branch,
    })
}

fn solve(input: &Path, out: Option<&Path>, trajectory: Option<&Path>) -> CliResult<()> {
    let mut problem: SolveInput = load_json(input)?;
    let op = operator(&problem.acquisition)?;
    if problem.signal.len() != op.n_echoes() {
        return Err(Failure::Usage(format!("signal has {} samples, model has {} echoes", problem.signal.len(), op.n_echoes())));
    }
    problem.flow.record_trajectory |= trajectory.is_some();
    let y = CVec::from_iterator(problem.signal.len(), problem.signal.iter().map(|p| Complex64::new(p[0], p[1])));
    let init = Complex64::new(problem.init[0], problem.init[1]);
    let res = match problem.mode {
        SolveMode::Plain => wirtinger_flow(&op, &y, init, &problem.flow)?,
        SolveMode::Constrained => constrained_flow(&op, &y, problem.delta, init, &problem.flow)?,
        SolveMode::Regularized => {
            regularized_constrained_flow(&op, &y, problem.delta, problem.epsilon, init, &problem.flow)?
        }
    };
    if let (Some(path), Some(traj)) = (trajectory, &res.trajectory) {
        let mut text = String::from("iteration,phi_hz,r2star_hz\n");
        for (k, z) in traj.iter().enumerate() {
            text.push_str(&format!("{k},{},{}\n", z.re, z.im));
        }
        std::fs::write(path, text)?;
    }
    emit(out, &recovery_json(&res))
}

fn species_names(cfg: &AcquisitionConfig) -> CliResult<Vec<String>> {
    Ok(cfg.species()?.into_iter().map(|s| s.name).collect())
}

fn phantom(acq: Option<&Path>, spec: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = acquisition(acq)?;
    let spec: PhantomSpec = match spec {
        Some(p) => load_json(p)?,
        None => default_phantom(),
    };
    let model = cfg.build()?;
    let (truth, grid) = generate_phantom(&spec, &model)?;
    std::fs::create_dir_all(out)?;
    let times_ms: Vec<f64> = model.times().iter().map(|t| t * 1e3).collect();
    write_grid(&out.join("signal.json"), &grid, &times_ms)?;
    let xi_header = CsirHeader::new(grid.width, grid.height, times_ms.clone(), "xi", 1);
    write_container(&out.join("xi.json"), &xi_header, &scalar_channels(&truth.xi_map))?;
    let mut c_header = CsirHeader::new(grid.width, grid.height, times_ms, "concentration", model.n_species());
    c_header.n_s = Some(model.n_species());
    write_container(&out.join("c.json"), &c_header, &truth.c_map)?;
    write_json(
        &out.join("phantom.json"),
        &json!({"spec": spec, "species": species_names(&cfg)?, "masked_voxels": truth.mask.iter().filter(|m| **m).count()}),
    )
}

fn corrupt_cmd(
    input: &Path,
    xi: &Path,
    corruption: Option<&Path>,
    sigma: Option<f64>,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let mut spec: CorruptionSpec = match corruption {
        Some(p) => load_json(p)?,
        None => CorruptionSpec::default(),
    };
    if let Some(s) = sigma {
        spec.sigma = s;
    }
    let (header, grid) = read_grid(input, 0.0)?;
    let (xh, xi_vox) = read_container(xi)?;
    if (xh.width, xh.height) != (header.width, header.height) || xh.n_channels() != 1 {
        return Err(Failure::Usage("xi container must be a single-channel map of the same size".into()));
    }
    let xi_map: Vec<Complex64> = xi_vox.iter().map(|v| v[0]).collect();
    let echoes = csi_core::species_model::EchoSpec::from_ms(&header.echo_times_ms)?;
    let (noisy, budget) = corrupt(&grid, &xi_map, &echoes, &spec, seed)?;
    ensure_parent(out)?;
    write_grid(out, &noisy, &header.echo_times_ms)?;
    emit(None, &json!({"budget": budget, "sigma": spec.sigma, "seed": seed}))
}

fn recon_outputs(res: &ReconResult, w: usize, h: usize, cfg: &AcquisitionConfig, out: &Path) -> CliResult<Option<Vec<f64>>> {
    let times = cfg.echoes()?.times().iter().map(|t| t * 1e3).collect::<Vec<_>>();
    std::fs::create_dir_all(out)?;
    write_container(&out.join("xi.json"), &CsirHeader::new(w, h, times.clone(), "xi", 1), &scalar_channels(&res.xi_map))?;
    let ns = res.c_map.first().map_or(0, |c| c.len());
    let mut ch = CsirHeader::new(w, h, times.clone(), "concentration", ns);
    ch.n_s = Some(ns);
    write_container(&out.join("c.json"), &ch, &res.c_map)?;
    if let Some(s) = &res.s_map {
        write_container(&out.join("s.json"), &CsirHeader::new(w, h, times.clone(), "signal", times.len()), s)?;
    }
    let (Some(wi), Some(fi)) = (cfg.species_index("water"), cfg.species_index("fat")) else { return Ok(None) };
    let pdff = pdff_map(&res.c_map, wi, fi, PdffConvention::Magnitude, 1e-12)?;
    let values: Vec<Complex64> = pdff.iter().map(|p| Complex64::new(p.unwrap_or(f64::NAN), 0.0)).collect();
    write_container(&out.join("pdff.json"), &CsirHeader::new(w, h, times, "pdff", 1), &scalar_channels(&values))?;
    Ok(Some(pdff.iter().map(|p| p.unwrap_or(f64::NAN)).collect()))
}

fn reconstruct_cmd(args: &ReconstructArgs) -> CliResult<()> {
    let acq: AcquisitionConfig = load_json(&args.acquisition)?;
    let op = operator(&acq)?;
    let ccfg: ConstraintConfig = match &args.constraint {
        Some(p) => load_json(p)?,
        None => ConstraintConfig::default(),
    };
    let rcfg: ReconConfig = match &args.config {
        Some(p) => load_json(p)?,
        None => ReconConfig { flow: FlowConfig::certified(0.5), ..Default::default() },
    };
    let (_, grid) = read_grid(&args.input, ccfg.mask_threshold)?;
    if grid.n_echoes() != op.n_echoes() {
        return Err(Failure::Usage(format!("container has {} echoes, model has {}", grid.n_echoes(), op.n_echoes())));
    }
    let constraint = FieldmapConstraint::from_mask(&grid.mask, ccfg.eps_on_mask_hz, ccfg.eps_off_mask_hz)?;
    let init: Vec<Complex64> = match &args.init {
        Some(p) => read_container(p)?.1.iter().map(|v| v[0]).collect(),
        None => vec![Complex64::new(1.0, 0.0); grid.len()],
    };
    let res = match args.delta {
        Some(d) => reconstruct_noisy(&grid, &op, &constraint, &vec![d; grid.len()], &rcfg, &init)?,
        None => reconstruct(&grid, &op, &constraint, &rcfg, &init)?,
    };
    recon_outputs(&res, grid.width, grid.height, &acq, &args.out)?;
    let mut summary = json!({
        "iterations": res.iterations,
        "converged": res.converged,
        "final_grad_norm": res.final_grad_norm,
        "step": res.step,
        "constraint_violation": res.constraint_violation,
        "objective_trace": res.objective_trace,
    });
    if let Some(t) = &args.truth {
        let (_, truth) = read_container(t)?;
        summary["metrics"] = concentration_table(&truth, &res.c_map, &species_names(&acq)?)?;
    }
    write_json(&args.out.join("recon.json"), &summary)?;
    emit(None, &summary_without_trace(summary))
}

fn summary_without_trace(mut v: Value) -> Value {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("objective_trace");
    }
    v
}

fn concentration_table(truth: &[CVec], est: &[CVec], names: &[String]) -> CliResult<Value> {
    let nc = truth.first().map_or(0, |c| c.len());
    if truth.len() != est.len() || est.iter().chain(truth).any(|c| c.len() != nc) {
        return Err(Failure::Usage("truth and estimate differ in size".into()));
    }
    let mut rows = serde_json::Map::new();
    for k in 0..nc {
        let a: Vec<Complex64> = truth.iter().map(|c| c[k]).collect();
        let b: Vec<Complex64> = est.iter().map(|c| c[k]).collect();
        let name = names.get(k).cloned().unwrap_or_else(|| format!("channel_{k}"));
        rows.insert(name, serde_json::to_value(metrics(&a, &b)?)?);
    }
    Ok(Value::Object(rows))
}

fn metrics_cmd(truth: &Path, estimate: &Path) -> CliResult<()> {
    let (th, t) = read_container(truth)?;
    let (eh, e) = read_container(estimate)?;
    if (th.width, th.height) != (eh.width, eh.height) {
        return Err(Failure::Usage("containers differ in size".into()));
    }
    emit(None, &concentration_table(&t, &e, &[])?)
}

fn experiment(which: &Experiment) -> CliResult<()> {
    match which {
        Experiment::SolutionSet { config, out } => {
            let cfg: SolutionSetExperiment = match config {
                Some(p) => load_json(p)?,
                None => SolutionSetExperiment::default(),
            };
            experiment_solution_set(&cfg)?.write_to(out)?;
        }
        Experiment::Curvature { acquisition: acq, spec, config, out } => {
            let acq = acquisition(acq.as_deref())?;
            let spec: PhantomSpec = match spec {
                Some(p) => load_json(p)?,
                None => default_phantom(),
            };
            let cfg: CurvatureExperiment = match config {
                Some(p) => load_json(p)?,
                None => CurvatureExperiment::default(),
            };
            let model = acq.build()?;
            let (truth, grid) = generate_phantom(&spec, &model)?;
            let rows = experiment_curvature(&truth, &grid, &ResidualOperator::new(model)?, &cfg)?;
            write_curvature(out, &rows)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::ModelInfo { acquisition } => model_info(&acquisition),
        Command::Analyze(args) => analyze(&args),
        Command::Solve { input, out, trajectory } => solve(&input, out.as_deref(), trajectory.as_deref()),
        Command::Phantom { acquisition, spec, out } => phantom(acquisition.as_deref(), spec.as_deref(), &out),
        Command::Corrupt { input, xi, corruption, sigma, seed, out } => {
            corrupt_cmd(&input, &xi, corruption.as_deref(), sigma, seed, &out)
        }
        Command::Reconstruct(args) => reconstruct_cmd(&args),
        Command::Metrics { truth, estimate } => metrics_cmd(&truth, &estimate),
        Command::Experiment { which } => experiment(&which),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(text) = std::env::var("CSI_THREADS") else { return Ok(()) };
    let n: usize = text.parse().map_err(|_| Failure::Usage(format!("CSI_THREADS={text:?} is not a count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "UsageError", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, body) = f.report();
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
