//! `bgadj`: simulate phantoms, fit mixtures, standardize images and run the
//! tail and CDF studies from the command line.

use std::f64::consts::FRAC_1_SQRT_2;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use bgadj::canonical::{contrast_cdf_mc, hard_cdf_univariate, CanonicalParams};
use bgadj::fit::{align_labels, fit, param_error, FitConfig};
use bgadj::io::{read_params, write_params, BafRaster};
use bgadj::mixture::{contrast_scores, standardize_field, Assignment, TemplateStack, Transform, VoxelGrid};
use bgadj::spdcore::ks_statistic;
use bgadj::synth::{generate, phantom_model, synth_templates, LesionSpec, Scenario, ScenarioSpec, TemplateStyle};
use bgadj::tailmc::{difference_contrast, fmt17, heatmap, Case, CaseGrid, Tail, TailSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;

#[derive(Parser, Debug)]
#[command(name = "bgadj", version, about = "Bias-adjusted standardization under Gaussian mixtures")]
struct Cli {
    /// Worker threads for the parallel kernels (results do not depend on it).
    #[arg(long, global = true, env = "BGADJ_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a phantom image with its templates and true parameters.
    Simulate(SimulateArgs),
    /// Fit a mixture model to an image.
    Fit(FitArgs),
    /// Standardize an image with fitted parameters.
    Standardize(StandardizeArgs),
    /// Relative size heatmap over a (kappa1, pi1) grid.
    Tail(TailArgs),
    /// Exact and Monte Carlo CDF of the univariate hard-assigned score.
    Cdf(CdfArgs),
    /// Parameter errors of an estimate against the truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScenarioArg {
    A,
    B,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Gmm,
    Sgmm,
    RbSgmm,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, ignore_case = true, default_value = "a")]
    scenario: ScenarioArg,
    /// Grid size NX,NY [default: 320,256, or the template grid].
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// True parameters [default: the built-in phantom model].
    #[arg(long)]
    params: Option<PathBuf>,
    /// Template raster, or `synthetic` for the built-in concentric templates.
    #[arg(long, default_value = "synthetic")]
    templates: String,
    /// Lesion centre and radius CX,CY,R (scenario B only).
    #[arg(long, value_parser = parse_lesion)]
    lesion: Option<(usize, usize, f64)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, value_enum, default_value = "rb-sgmm")]
    method: Method,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Number of classes [default: template channels, else 3].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.99)]
    huber_q: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines fit log [default: OUT.log.jsonl].
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StandardizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value = "t1", value_parser = Transform::from_str)]
    transform: Transform,
    #[arg(long, default_value = "soft", value_parser = Assignment::from_str)]
    assign: Assignment,
    /// Contrast a1,a2,... rescaled to unit length [default: -1,1 for two
    /// channels, 1 for one].
    #[arg(long, value_parser = parse_contrast, allow_hyphen_values = true)]
    contrast: Option<Points>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TailArgs {
    #[arg(long, default_value = "1", value_parser = Case::from_str)]
    case: Case,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    kappa2: f64,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value = "two", value_parser = Tail::from_str)]
    tail: Tail,
    /// Number of kappa1 values by number of pi1 values.
    #[arg(long, default_value = "21x21", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 100_000)]
    reps: u64,
    #[arg(long, default_value = "t1", value_parser = Transform::from_str)]
    method: Transform,
    #[arg(long, default_value = "soft", value_parser = Assignment::from_str)]
    assign: Assignment,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CdfArgs {
    #[arg(long)]
    tau: f64,
    #[arg(long, allow_hyphen_values = true)]
    delta1: f64,
    #[arg(long, allow_hyphen_values = true)]
    pi0: f64,
    /// Evaluation points LO:HI:STEP.
    #[arg(long, default_value = "-4:4:0.1", value_parser = parse_range, allow_hyphen_values = true)]
    t: Points,
    #[arg(long, default_value_t = 100_000)]
    reps: u64,
    #[arg(long, default_value = "hard", value_parser = Assignment::from_str)]
    assign: Assignment,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Needed when either model uses template weights.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    NotConverged(String),
    Core(bgadj::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::NotConverged(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<bgadj::Error> for CliError {
    fn from(e: bgadj::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Core(e) => match e {
                bgadj::Error::Argument(_) | bgadj::Error::Domain(_) | bgadj::Error::DegenerateParameters(_) => EXIT_USAGE,
                bgadj::Error::Format(_) => EXIT_DATA,
                _ => 1,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("{t:?} is not a number")))
        .collect()
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    match s.split(',').map(|t| t.trim().parse::<usize>()).collect::<Vec<_>>().as_slice() {
        [Ok(nx), Ok(ny)] if *nx > 0 && *ny > 0 => Ok((*nx, *ny)),
        _ => Err(format!("expected NX,NY with positive integers, got {s:?}")),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NxM, got {s:?}"))?;
    match (a.parse::<usize>(), b.parse::<usize>()) {
        (Ok(n), Ok(m)) if n > 0 && m > 0 => Ok((n, m)),
        _ => Err(format!("expected NxM with positive integers, got {s:?}")),
    }
}

fn parse_lesion(s: &str) -> Result<(usize, usize, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if let [x, y, r] = parts.as_slice() {
        if let (Ok(x), Ok(y), Ok(r)) = (x.parse(), y.parse(), r.parse::<f64>()) {
            if r > 0.0 {
                return Ok((x, y, r));
            }
        }
    }
    Err(format!("expected CX,CY,R with a positive radius, got {s:?}"))
}

#[derive(Clone, Debug)]
struct Points(Vec<f64>);

fn parse_contrast(s: &str) -> Result<Points, String> {
    parse_list(s).map(Points)
}

fn parse_range(s: &str) -> Result<Points, String> {
    let v = parse_list(&s.replace(':', ","))?;
    let [lo, hi, step] = v[..] else {
        return Err(format!("expected LO:HI:STEP, got {s:?}"));
    };
    let valid = step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite();
    if !valid {
        return Err(format!("need LO <= HI and STEP > 0, got {s:?}"));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if n > 1_000_000 {
        return Err(format!("{n} evaluation points is too many"));
    }
    Ok(Points((0..n).map(|i| lo + i as f64 * step).collect()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Core(bgadj::Error::Io(e)))
}

fn read_templates(path: &Path) -> CliResult<TemplateStack> {
    Ok(BafRaster::read(path)?.into_templates()?)
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let scenario = match a.scenario {
        ScenarioArg::A => Scenario::A,
        ScenarioArg::B => Scenario::B,
    };
    if matches!(scenario, Scenario::A) && a.lesion.is_some() {
        return Err(usage("--lesion is only valid with --scenario B"));
    }
    let model = match &a.params {
        Some(p) => read_params(p)?,
        None => phantom_model(),
    };
    let templates = if a.templates == "synthetic" {
        let (nx, ny) = a.dims.unwrap_or((320, 256));
        synth_templates(VoxelGrid::new(nx, ny)?, TemplateStyle::Concentric)?
    } else {
        let t = read_templates(Path::new(&a.templates))?;
        if let Some((nx, ny)) = a.dims {
            if (nx, ny) != (t.grid().nx, t.grid().ny) {
                return Err(usage(format!(
                    "--dims {nx},{ny} conflicts with the {}x{} template raster",
                    t.grid().nx,
                    t.grid().ny
                )));
            }
        }
        t
    };
    if templates.k() != model.k() {
        return Err(CliError::Data(format!(
            "templates have {} classes, parameters have {}",
            templates.k(),
            model.k()
        )));
    }
    let grid = templates.grid();
    let lesion = match scenario {
        Scenario::A => None,
        Scenario::B => {
            let mut l = LesionSpec::default_for(grid);
            if let Some((x, y, r)) = a.lesion {
                l.center = (x, y);
                l.radius = r;
            }
            Some(l)
        }
    };
    let spec = ScenarioSpec { scenario, grid, model, templates, lesion, seed: a.seed };
    let (obs, truth) = generate(&spec)?;
    BafRaster::new(grid, spec.model.dim(), obs)?.write(&with_suffix(&a.out, ".obs.baf"))?;
    BafRaster::from(&spec.templates).write(&with_suffix(&a.out, ".templates.baf"))?;
    write_params(&with_suffix(&a.out, ".truth.params"), &truth.model)?;
    if matches!(scenario, Scenario::B) {
        let mask = truth.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        BafRaster::new(grid, 1, mask)?.write(&with_suffix(&a.out, ".mask.baf"))?;
    }
    Ok(())
}

fn cmd_fit(a: FitArgs) -> CliResult<()> {
    let spatial = !matches!(a.method, Method::Gmm);
    if spatial && a.templates.is_none() {
        return Err(usage("--method sgmm and rb-sgmm require --templates"));
    }
    let obs = BafRaster::read(&a.input)?;
    let templates = a.templates.as_deref().map(read_templates).transpose()?;
    if let Some(t) = &templates {
        if t.grid() != obs.grid {
            return Err(CliError::Data(format!(
                "template grid {}x{} differs from image grid {}x{}",
                t.grid().nx,
                t.grid().ny,
                obs.grid.nx,
                obs.grid.ny
            )));
        }
    }
    let k = match (a.k, &templates) {
        (Some(k), Some(t)) if k != t.k() => {
            return Err(usage(format!("--k {k} conflicts with {} template channels", t.k())));
        }
        (Some(k), _) => k,
        (None, Some(t)) => t.k(),
        (None, None) => 3,
    };
    let base = match a.method {
        Method::Gmm => FitConfig::gmm(k),
        Method::Sgmm => FitConfig::sgmm(k),
        Method::RbSgmm => FitConfig::rb_sgmm(k),
    };
    let cfg = FitConfig { tol: a.tol, max_iter: a.max_iter, huber_q: a.huber_q, seed: a.seed, ..base };
    let res = fit(&obs.data, obs.channels, if spatial { templates.as_ref() } else { None }, &cfg)?;
    write_params(&a.out, &res.model)?;
    let mut lines = String::new();
    for (i, ll) in res.loglik_trace.iter().enumerate() {
        lines.push_str(&json!({ "iteration": i, "loglik": ll }).to_string());
        lines.push('\n');
    }
    lines.push_str(
        &json!({
            "converged": res.converged,
            "iterations": res.iterations,
            "restarted": res.restarted,
            "loglik_decreases": res.loglik_decreases,
            "warnings": res.warnings,
        })
        .to_string(),
    );
    lines.push('\n');
    write_text(&a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl")), &lines)?;
    for w in &res.warnings {
        log::warn!("{w}");
    }
    if !res.converged {
        return Err(CliError::NotConverged(format!("fit did not converge in {} iterations", res.iterations)));
    }
    Ok(())
}

fn cmd_standardize(a: StandardizeArgs) -> CliResult<()> {
    let obs = BafRaster::read(&a.input)?;
    let model = read_params(&a.params)?;
    let p = obs.channels;
    if model.dim() != p {
        return Err(CliError::Data(format!("parameters have p = {}, image has {p} channels", model.dim())));
    }
    let contrast = match a.contrast {
        Some(Points(c)) => c,
        None => match p {
            1 => vec![1.0],
            2 => vec![-FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            _ => return Err(usage(format!("--contrast is required for {p} channels"))),
        },
    };
    if contrast.len() != p {
        return Err(usage(format!("contrast has {} entries, image has {p} channels", contrast.len())));
    }
    let templates = a.templates.as_deref().map(read_templates).transpose()?;
    if model.weighting().is_spatial() && templates.is_none() {
        return Err(usage("template-weighted parameters require --templates"));
    }
    if let Some(t) = &templates {
        if t.grid() != obs.grid || t.k() != model.k() {
            return Err(CliError::Data("templates do not match the image grid or class count".into()));
        }
    }
    let field = standardize_field(&obs.data, obs.grid, &model, templates.as_ref(), a.transform, a.assign)?;
    let map = contrast_scores(&field, &contrast)?;
    BafRaster::new(obs.grid, p, field.scores().to_vec())?.write(&with_suffix(&a.out, ".scores.baf"))?;
    BafRaster::new(obs.grid, 1, map.z.clone())?.write(&with_suffix(&a.out, ".z.baf"))?;
    BafRaster::new(obs.grid, 1, map.p_two.clone())?.write(&with_suffix(&a.out, ".p.baf"))?;

    let mut csv = String::from("series,n,ks_statistic,ks_p_value\n");
    let mut row = |name: &str, v: &[f64]| -> CliResult<()> {
        let ks = ks_statistic(v)?;
        csv.push_str(&format!("{name},{},{},{}\n", ks.n, fmt17(ks.statistic), fmt17(ks.p_value)));
        Ok(())
    };
    row("z", &map.z)?;
    row("pooled", field.scores())?;
    for c in 0..p {
        let ch: Vec<f64> = field.scores().iter().skip(c).step_by(p).copied().collect();
        row(&format!("channel{}", c + 1), &ch)?;
    }
    write_text(&with_suffix(&a.out, ".summary.csv"), &csv)
}

fn cmd_tail(a: TailArgs) -> CliResult<()> {
    let grid = CaseGrid::regular(a.case, a.rho, a.kappa2, a.grid.0, a.grid.1);
    let spec = TailSpec::new(a.alpha, a.tail, &difference_contrast(), a.reps, a.seed)?;
    let map = heatmap(&grid, a.method, a.assign, &spec)?;
    write_text(&a.out, &map.to_csv())
}

fn cmd_cdf(a: CdfArgs) -> CliResult<()> {
    let theta = CanonicalParams::univariate(a.tau, a.delta1, a.pi0)?;
    if theta.in_theta0() {
        return Err(CliError::Core(bgadj::Error::DegenerateParameters(format!(
            "(tau, delta1, pi0) = ({}, {}, {}) lies in Theta0 (delta1 = 0 and tau = 1, or pi0 infinite): \
             the two classes coincide and the score is exactly standard normal",
            a.tau, a.delta1, a.pi0
        ))));
    }
    let mc = contrast_cdf_mc(&a.t.0, &[1.0], &theta, a.assign, a.reps, a.seed)?;
    let mut csv = String::from("t,F_exact,F_mc,SE\n");
    for (&t, est) in a.t.0.iter().zip(&mc) {
        let exact = match a.assign {
            Assignment::Hard => fmt17(hard_cdf_univariate(t, &theta)?),
            Assignment::Soft => String::new(),
        };
        csv.push_str(&format!("{},{exact},{},{}\n", fmt17(t), fmt17(est.value), fmt17(est.se)));
    }
    write_text(&a.out, &csv)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let est = read_params(&a.est)?;
    let truth = read_params(&a.truth)?;
    if est.k() != truth.k() || est.dim() != truth.dim() {
        return Err(CliError::Data(format!(
            "estimate has K = {}, p = {}; truth has K = {}, p = {}",
            est.k(),
            est.dim(),
            truth.k(),
            truth.dim()
        )));
    }
    let templates = a.templates.as_deref().map(read_templates).transpose()?;
    let spatial = est.weighting().is_spatial() || truth.weighting().is_spatial();
    if spatial && templates.is_none() {
        return Err(usage("template-weighted parameters require --templates"));
    }
    if let Some(t) = &templates {
        if t.k() != est.k() {
            return Err(CliError::Data(format!("templates have {} classes, models have {}", t.k(), est.k())));
        }
    }
    // Global-weight fits carry arbitrary labels.
    let est = if est.weighting().is_spatial() { est } else { align_labels(&est, &truth)? };
    let n = templates.as_ref().map_or(1, |t| t.len());
    let err = param_error(&est, &truth, templates.as_ref(), n)?;
    let mut csv = String::from("parameter,error\n");
    for (name, v) in err.entries() {
        csv.push_str(&format!("{name},{}\n", fmt17(v)));
    }
    write_text(&a.out, &csv)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Standardize(a) => cmd_standardize(a),
        Command::Tail(a) => cmd_tail(a),
        Command::Cdf(a) => cmd_cdf(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bgadj: {e}");
            ExitCode::from(e.code())
        }
    }
}
