use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use brakeorbit_core::distance::{self, Backend, DistanceOptions, GridSpec};
use brakeorbit_core::dynamics::shoot_brake_orbit;
use brakeorbit_core::geometry::PotentialSpec;
use brakeorbit_core::jacobi_geodesic::{asymptotic_exponents, boundary_start, integrate_interior};
use brakeorbit_core::morse::{self, BrokenIndex, MorseOptions, MorseReport};
use brakeorbit_core::{verify, Error, PotentialSystem, Vector};

#[derive(Parser, Debug)]
#[command(name = "brakeorbit", version, about = "Brake orbits, Jacobi-metric geodesics, boundary distance and Morse index")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON file with run settings; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Builtin potential name or path to a JSON potential spec.
    #[arg(long, global = true)]
    potential: Option<String>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    energy: Option<f64>,
    /// Comma-separated potential coefficients (frequencies, stiffness).
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    coefficients: Option<Vec<f64>>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Shoot a brake orbit from a boundary point.
    BrakeOrbit {
        #[arg(long, allow_hyphen_values = true)]
        start: Option<String>,
    },
    /// Unit-speed Jacobi geodesic from a boundary point, or from an interior
    /// point with --velocity.
    Geodesic {
        #[arg(long, allow_hyphen_values = true)]
        start: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        velocity: Option<String>,
        #[arg(long)]
        arc: Option<f64>,
    },
    /// Distance from the boundary to one point.
    Distance {
        #[arg(long, allow_hyphen_values = true)]
        point: Option<String>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        n_start: Option<usize>,
    },
    /// Distance on a grid of cell centres over the domain box.
    DistanceField {
        /// Cells per axis, e.g. 40x40.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        nodes: Option<usize>,
    },
    /// Index, nullity and conjugate points along a boundary-starting geodesic.
    Morse {
        #[arg(long, allow_hyphen_values = true)]
        start: Option<String>,
        #[arg(long)]
        arc: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        tol_null: Option<f64>,
        /// Also run the broken-Jacobi-field backend.
        #[arg(long)]
        broken: bool,
    },
    /// Run the invariant suite.
    Verify {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
enum Format {
    #[default]
    Csv,
    Json,
}

/// Settings merged from the config file and the flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    potential: Option<String>,
    dim: Option<usize>,
    energy: Option<f64>,
    coefficients: Option<Vec<f64>>,
    output: Option<PathBuf>,
    format: Option<Format>,
    seed: Option<u64>,
    threads: Option<usize>,
    start: Option<Vec<f64>>,
    velocity: Option<Vec<f64>>,
    arc: Option<f64>,
    point: Option<Vec<f64>>,
    backend: Option<String>,
    grid: Option<String>,
    nodes: Option<usize>,
    n_start: Option<usize>,
    samples: Option<usize>,
    cells: Option<usize>,
    tol_null: Option<f64>,
    tol_s: Option<f64>,
    tol_opt: Option<f64>,
    tol_unique: Option<f64>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_vec(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| usage(format!("'{x}' is not a number"))))
        .collect()
}

macro_rules! take {
    ($cfg:expr, $field:ident, $val:expr) => {
        if let Some(v) = $val {
            $cfg.$field = Some(v);
        }
    };
}

fn merged_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let c = &cli.common;
    take!(cfg, potential, c.potential.clone());
    take!(cfg, dim, c.dim);
    take!(cfg, energy, c.energy);
    take!(cfg, coefficients, c.coefficients.clone());
    take!(cfg, output, c.output.clone());
    take!(cfg, format, c.format);
    if let Ok(s) = std::env::var("BRAKEORBIT_SEED") {
        cfg.seed = Some(s.trim().parse().map_err(|_| usage("BRAKEORBIT_SEED must be an unsigned integer"))?);
    }
    take!(cfg, seed, c.seed);
    take!(cfg, threads, c.threads);
    match &cli.cmd {
        Cmd::BrakeOrbit { start } => take!(cfg, start, start.as_deref().map(parse_vec).transpose()?),
        Cmd::Geodesic { start, velocity, arc } => {
            take!(cfg, start, start.as_deref().map(parse_vec).transpose()?);
            take!(cfg, velocity, velocity.as_deref().map(parse_vec).transpose()?);
            take!(cfg, arc, *arc);
        }
        Cmd::Distance { point, backend, nodes, n_start } => {
            take!(cfg, point, point.as_deref().map(parse_vec).transpose()?);
            take!(cfg, backend, backend.clone());
            take!(cfg, nodes, *nodes);
            take!(cfg, n_start, *n_start);
        }
        Cmd::DistanceField { grid, backend, nodes } => {
            take!(cfg, grid, grid.clone());
            take!(cfg, backend, backend.clone());
            take!(cfg, nodes, *nodes);
        }
        Cmd::Morse { start, arc, samples, cells, tol_null, .. } => {
            take!(cfg, start, start.as_deref().map(parse_vec).transpose()?);
            take!(cfg, arc, *arc);
            take!(cfg, samples, *samples);
            take!(cfg, cells, *cells);
            take!(cfg, tol_null, *tol_null);
        }
        Cmd::Verify {} => {}
    }
    for (name, v) in [("tol_null", cfg.tol_null), ("tol_s", cfg.tol_s), ("tol_opt", cfg.tol_opt), ("tol_unique", cfg.tol_unique)] {
        if let Some(x) = v {
            if !(x > 0.0) {
                return Err(usage(format!("{name} must be positive")));
            }
        }
    }
    Ok(cfg)
}

fn system(cfg: &RunConfig) -> Result<PotentialSystem, Error> {
    let name = cfg.potential.as_deref().ok_or_else(|| usage("--potential is required"))?;
    let coeffs: Vec<serde_json::Value> = cfg.coefficients.iter().flatten().map(|&x| x.into()).collect();
    let path = Path::new(name);
    if name.ends_with(".json") || path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{name}: {e}")))?;
        let mut spec: PotentialSpec = serde_json::from_str(&text).map_err(|e| usage(format!("{name}: {e}")))?;
        if let Some(e) = cfg.energy {
            spec.energy = e;
        }
        return PotentialSystem::from_spec(&spec);
    }
    let dim = cfg.dim.ok_or_else(|| usage("--dim is required for a builtin potential"))?;
    let energy = cfg.energy.ok_or_else(|| usage("--energy is required for a builtin potential"))?;
    PotentialSystem::builtin(name, dim, energy, &coeffs)
}

fn point(sys: &PotentialSystem, v: &Option<Vec<f64>>, flag: &str) -> Result<Vector, Error> {
    let v = v.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))?;
    if v.len() != sys.dim {
        return Err(usage(format!("--{flag} has {} components, expected {}", v.len(), sys.dim)));
    }
    let q = Vector::from_column_slice(v);
    sys.check_domain(&q)?;
    Ok(q)
}

fn boundary_point(sys: &PotentialSystem, v: &Option<Vec<f64>>) -> Result<Vector, Error> {
    let q = point(sys, v, "start")?;
    sys.project_to_boundary(&q)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let d = cfg.output.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&d)?;
    Ok(d)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

/// Tabular output: CSV as written, or the same rows as a JSON array of
/// objects keyed by column name.
fn write_table(dir: &Path, stem: &str, format: Format, write: impl FnOnce(&mut Vec<u8>) -> Result<(), Error>) -> Result<(), Error> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    match format {
        Format::Csv => std::fs::write(dir.join(format!("{stem}.csv")), buf)?,
        Format::Json => {
            let text = String::from_utf8_lossy(&buf);
            let mut lines = text.lines();
            let head: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
            let rows: Vec<serde_json::Map<String, serde_json::Value>> = lines
                .map(|l| {
                    head.iter()
                        .zip(l.split(','))
                        .map(|(h, x)| {
                            let v = match x.parse::<f64>() {
                                Ok(f) if f.is_finite() => serde_json::Value::from(f),
                                _ => match x {
                                    "true" => true.into(),
                                    "false" => false.into(),
                                    _ => serde_json::Value::Null,
                                },
                            };
                            (h.to_string(), v)
                        })
                        .collect()
                })
                .collect();
            write_json(&dir.join(format!("{stem}_rows.json")), &rows)?;
        }
    }
    Ok(())
}

fn vec_of(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

#[derive(Serialize)]
struct OrbitSummary {
    half_period: f64,
    start: Vec<f64>,
    end: Vec<f64>,
    end_speed: f64,
    boundary_residual: f64,
    energy_residual: f64,
    arc_length: f64,
    nodes: usize,
}

#[derive(Serialize)]
struct GeodesicSummary {
    arc_length: f64,
    duration: f64,
    start: Vec<f64>,
    end: Vec<f64>,
    boundary_start: bool,
    ends_on_boundary: bool,
    truncated: bool,
    conservation_residual: f64,
    nodes: usize,
    gap_exponent: Option<f64>,
    speed_exponent: Option<f64>,
}

#[derive(Serialize)]
struct DistanceSummary {
    point: Vec<f64>,
    value: f64,
    backend: Backend,
    start: Vec<f64>,
    end_velocity: Vec<f64>,
    energy: f64,
    length: f64,
    spread: Option<f64>,
    unique: bool,
    candidates: usize,
    seeds_failed: usize,
    gradient: Option<Vec<f64>>,
    seed: u64,
}

#[derive(Serialize)]
struct MorseOutput {
    #[serde(flatten)]
    report: MorseReport,
    broken: Option<BrokenIndex>,
}

fn distance_options(cfg: &RunConfig) -> DistanceOptions {
    let mut o = DistanceOptions { seed: cfg.seed.unwrap_or(0), ..Default::default() };
    if let Some(n) = cfg.nodes {
        o.nodes = n;
    }
    if let Some(n) = cfg.n_start {
        o.n_start = n;
    }
    if let Some(t) = cfg.tol_opt {
        o.tol_opt = t;
    }
    if let Some(t) = cfg.tol_unique {
        o.tol_unique = t;
    }
    o
}

fn backend(cfg: &RunConfig) -> Result<Backend, Error> {
    cfg.backend.as_deref().unwrap_or("shooting").parse()
}

/// Runs one subcommand; Ok(false) means the run finished but a check failed.
fn run(cli: &Cli) -> Result<bool, Error> {
    let cfg = merged_config(cli)?;
    if let Some(k) = cfg.threads {
        if k == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().map_err(|e| usage(e.to_string()))?;
    }
    let format = cfg.format.unwrap_or_default();
    match &cli.cmd {
        Cmd::BrakeOrbit { .. } => {
            let sys = system(&cfg)?;
            let x0 = boundary_point(&sys, &cfg.start)?;
            let dir = out_dir(&cfg)?;
            let b = shoot_brake_orbit(&sys, &x0)?;
            write_table(&dir, "brake_orbit", format, |w| b.trajectory.write_csv(&sys, w))?;
            let s = OrbitSummary {
                half_period: b.half_period,
                start: vec_of(&b.start),
                end: vec_of(&b.end),
                end_speed: b.end_speed,
                boundary_residual: b.boundary_residual,
                energy_residual: b.trajectory.energy_residual,
                arc_length: b.arc_length(),
                nodes: b.trajectory.len(),
            };
            write_json(&dir.join("brake_orbit.json"), &s)?;
            println!("T={:.12} end={:?} energy_residual={:.3e}", s.half_period, s.end, s.energy_residual);
        }
        Cmd::Geodesic { .. } => {
            let sys = system(&cfg)?;
            let arc = cfg.arc.ok_or_else(|| usage("--arc is required"))?;
            let g = match &cfg.velocity {
                Some(_) => integrate_interior(&sys, &point(&sys, &cfg.start, "start")?, &point(&sys, &cfg.velocity, "velocity")?, arc)?,
                None => boundary_start(&sys, &boundary_point(&sys, &cfg.start)?, arc)?,
            };
            let dir = out_dir(&cfg)?;
            write_table(&dir, "geodesic", format, |w| g.write_csv(&sys, w))?;
            let asy = if g.boundary_start { asymptotic_exponents(&sys, &g).ok() } else { None };
            let s = GeodesicSummary {
                arc_length: g.arc_length(),
                duration: g.duration(),
                start: vec_of(&g.points[0]),
                end: vec_of(g.end_point()),
                boundary_start: g.boundary_start,
                ends_on_boundary: g.ends_on_boundary,
                truncated: g.truncated,
                conservation_residual: g.conservation_residual,
                nodes: g.len(),
                gap_exponent: asy.as_ref().map(|a| a.alpha_gap),
                speed_exponent: asy.as_ref().map(|a| a.alpha_speed),
            };
            write_json(&dir.join("geodesic.json"), &s)?;
            println!("s={:.12} t={:.12} end={:?} truncated={}", s.arc_length, s.duration, s.end, s.truncated);
        }
        Cmd::Distance { .. } => {
            let sys = system(&cfg)?;
            let q = point(&sys, &cfg.point, "point")?;
            let be = backend(&cfg)?;
            let opts = distance_options(&cfg);
            let dir = out_dir(&cfg)?;
            let r = distance::distance(&sys, &q, be, &opts)?;
            let gradient = if r.unique && r.value > 0.0 { distance::grad_dv(&sys, &r).ok().map(|g| vec_of(&g)) } else { None };
            let s = DistanceSummary {
                point: vec_of(&r.q),
                value: r.value,
                backend: r.backend,
                start: vec_of(&r.start),
                end_velocity: vec_of(&r.end_velocity),
                energy: r.energy,
                length: r.length,
                spread: r.spread.is_finite().then_some(r.spread),
                unique: r.unique,
                candidates: r.candidates,
                seeds_failed: r.seeds_failed,
                gradient,
                seed: opts.seed,
            };
            write_json(&dir.join("distance.json"), &s)?;
            println!("d={:.12} backend={} unique={}", s.value, cfg.backend.as_deref().unwrap_or("shooting"), s.unique);
        }
        Cmd::DistanceField { .. } => {
            let sys = system(&cfg)?;
            let be = backend(&cfg)?;
            let opts = distance_options(&cfg);
            let grid = match &cfg.grid {
                None => GridSpec::over_box(&sys, 20),
                Some(g) => {
                    let cells: Vec<usize> = g
                        .split(['x', 'X'])
                        .map(|x| x.trim().parse::<usize>().map_err(|_| usage(format!("bad --grid '{g}', expected e.g. 40x40"))))
                        .collect::<Result<_, _>>()?;
                    if cells.len() != sys.dim || cells.iter().any(|&c| c == 0) {
                        return Err(usage(format!("--grid needs {} positive counts", sys.dim)));
                    }
                    let mut spec = GridSpec::over_box(&sys, 1);
                    spec.cells = cells;
                    spec
                }
            };
            let dir = out_dir(&cfg)?;
            let field = distance::distance_field(&sys, &grid, be, &opts)?;
            write_table(&dir, "distance_field", format, |w| field.write_csv(w))?;
            let s = field.summary();
            write_json(&dir.join("distance_field.json"), &s)?;
            println!("cells={} computed={} non_unique={} failed={} max={:.6}", s.cells, s.computed, s.non_unique, s.failed, s.max_value);
        }
        Cmd::Morse { broken, .. } => {
            let sys = system(&cfg)?;
            let x0 = boundary_point(&sys, &cfg.start)?;
            let a = cfg.arc.ok_or_else(|| usage("--arc is required"))?;
            let mut opts = MorseOptions::default();
            if let Some(n) = cfg.samples {
                opts.samples = n;
            }
            if let Some(n) = cfg.cells {
                opts.cells = n;
            }
            if let Some(t) = cfg.tol_null {
                opts.tol_null = t;
            }
            if let Some(t) = cfg.tol_s {
                opts.tol_s = t;
            }
            let dir = out_dir(&cfg)?;
            let g = boundary_start(&sys, &x0, a)?;
            let a = a.min(g.arc_length());
            let report = morse::mit_verify(&sys, &g, a, &opts)?;
            let broken = if *broken { Some(morse::broken_jacobi_index(&sys, &g, a, None, &opts)?) } else { None };
            morse::write_staircase_csv(&report.staircase, BufWriter::new(File::create(dir.join("staircase.csv"))?))?;
            let pts: Vec<String> = report.conjugate_points.iter().map(|c| format!("{:.6}x{}", c.s, c.multiplicity)).collect();
            println!(
                "index={} nullity={} conjugate=[{}] mit_consistent={}",
                report.index,
                report.nullity,
                pts.join(","),
                report.mit_consistent.map_or("undetermined".to_string(), |b| b.to_string())
            );
            let ok = report.mit_consistent == Some(true);
            write_json(&dir.join("morse.json"), &MorseOutput { report, broken })?;
            return Ok(ok);
        }
        Cmd::Verify {} => {
            let dir = out_dir(&cfg)?;
            let suite = verify::run_suite(cfg.seed.unwrap_or(0))?;
            suite.write(&dir)?;
            let passed = suite.report.checks.iter().filter(|c| c.passed).count();
            println!("checks={} passed={}", suite.report.checks.len(), passed);
            for c in suite.report.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAILED {} value={:e} tolerance={:e}", c.name, c.value, c.tolerance);
            }
            return Ok(suite.report.all_passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
