//! `snpp`: cell tensors, micro and macro runs, convergence studies and grid dumps.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error, 3 solver failure.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use snpp::cell::{solve_all_cells, EffectiveTensors};
use snpp::config::{parse_epsilon, RunConfig};
use snpp::grid::{build_perforated_grid, build_unit_cell, CellGeometry};
use snpp::io::FieldFile;
use snpp::macroscale::{run_macro, MacroConfig};
use snpp::micro::{run_micro, uniform_times};
use snpp::verify::run_convergence_study;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "snpp",
    version,
    about = "Stokes–Nernst–Planck–Poisson homogenization toolkit"
)]
struct Cli {
    /// Worker threads for the parallel stages (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// No progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the unit-cell problems and write the effective tensors as JSON.
    Cell(CellArgs),
    /// Run the microscopic system at one ε and write its snapshots.
    Micro(MicroArgs),
    /// Run the upscaled system and write its snapshots.
    Macro(MacroArgs),
    /// Convergence study over an ε ladder; writes a JSON report and a rate CSV.
    Verify(VerifyArgs),
    /// Write the cell classification of a grid as a plain PGM map.
    DumpGrid(GridArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GeometryFlags {
    /// Hole side length as a fraction of the cell.
    #[arg(long)]
    hole: Option<f64>,
    /// Grid cells per period side.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct CellArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    geometry: GeometryFlags,
    /// Output path (default: <output.dir>/tensors.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MicroArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    geometry: GeometryFlags,
    /// Scale separation, e.g. 1/8 (default: first ladder entry).
    #[arg(long)]
    eps: Option<String>,
    /// Snapshot file; `.csv` gives the table, anything else the binary container.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-snapshot diagnostics as JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MacroArgs {
    #[command(flatten)]
    common: Common,
    /// Tensors written by `snpp cell` (computed from the config when absent).
    #[arg(long)]
    tensors: Option<PathBuf>,
    /// Snapshot file; `.csv` gives the table, anything else the binary container.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-snapshot diagnostics as JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Case {
    Neumann,
    Dirichlet,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    case: Option<Case>,
    /// Comma-separated regime flags: beta-eq-alpha, beta-gt-alpha, gamma-eq-alpha,
    /// gamma-gt-alpha (Neumann); gamma-eq-alpha-1, gamma-gt-alpha-1 (Dirichlet).
    #[arg(long, value_delimiter = ',')]
    regime: Vec<String>,
    /// Comma-separated ε ladder, e.g. 1/4,1/8,1/16,1/32.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<String>,
    /// JSON report (default: <output.dir>/report.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rate table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Skip the lemma checks.
    #[arg(long)]
    no_lemmas: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    geometry: GeometryFlags,
    /// Perforated domain at this ε; the unit cell when absent.
    #[arg(long)]
    eps: Option<String>,
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<snpp::Error>() {
        Some(s) if s.is_config_error() => 2,
        Some(_) => 3,
        None => 1,
    }
}

struct Log(bool);

impl Log {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.0 {
            eprintln!("snpp: {}", msg.as_ref());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(snpp::Error::InvalidConfig("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()?;
    }
    let log = Log(cli.quiet);
    match cli.command {
        Command::Cell(a) => cell(a, &log),
        Command::Micro(a) => micro(a, &log),
        Command::Macro(a) => macro_run(a, &log),
        Command::Verify(a) => verify(a, &log),
        Command::DumpGrid(a) => dump_grid(a),
    }
}

fn load(common: &Common, overrides: &[(&str, String)]) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    RunConfig::parse_with(&text, overrides)
        .map_err(|e| match (&common.config, e) {
            (Some(p), snpp::Error::ParseError(m)) => {
                snpp::Error::ParseError(format!("{}: {m}", p.display()))
            }
            (_, e) => e,
        })
        .map_err(Into::into)
}

fn geometry_overrides(g: &GeometryFlags) -> Vec<(&'static str, String)> {
    let mut o = Vec::new();
    if let Some(h) = g.hole {
        o.push(("geometry.hole_side", toml_float(h)));
    }
    if let Some(n) = g.resolution {
        o.push(("geometry.resolution", n.to_string()));
    }
    o
}

fn toml_float(x: f64) -> String {
    format!("{x:?}")
}

fn epsilon(s: &str) -> Result<f64> {
    parse_epsilon(s).map_err(|e| snpp::Error::InvalidConfig(format!("--eps: {e}")).into())
}

fn output(cfg: &RunConfig, out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.join(default))
}

/// Writes a sibling temporary file, then renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .with_context(|| format!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let written = std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(e).with_context(|| format!("writing {}", path.display()));
    }
    Ok(())
}

fn write_fields(path: &Path, file: &FieldFile) -> Result<()> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        write_atomic(path, file.to_csv().as_bytes())
    } else {
        write_atomic(path, &file.to_bytes())
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn cell(a: CellArgs, log: &Log) -> Result<()> {
    let cfg = load(&a.common, &geometry_overrides(&a.geometry))?;
    let g = cfg.geometry;
    log.say(format!(
        "cell problems: hole {} at N = {}",
        g.hole_side, g.resolution
    ));
    let (_, tensors) = solve_all_cells(g, &cfg.solver)?;
    let out = output(&cfg, a.out, "tensors.json");
    write_atomic(&out, &json(&tensors)?)?;
    log.say(format!("wrote {}", out.display()));
    Ok(())
}

fn micro(a: MicroArgs, log: &Log) -> Result<()> {
    let cfg = load(&a.common, &geometry_overrides(&a.geometry))?;
    let eps = match &a.eps {
        Some(s) => epsilon(s)?,
        None => cfg.ladder[0],
    };
    let grid = build_perforated_grid(eps, cfg.geometry)?;
    let times = uniform_times(cfg.scaling.t_final, cfg.snapshots);
    log.say(format!(
        "micro run: eps = {eps}, {} x {} grid, {} fluid cells, {} snapshots",
        grid.n(),
        grid.n(),
        grid.num_fluid_cells(),
        times.len()
    ));
    let init = cfg.study().micro_init(eps);
    let run = run_micro(&cfg.scaling, &grid, &init, &times, &cfg.micro_options())?;
    let out = output(&cfg, a.out, "micro.csv");
    write_fields(&out, &FieldFile::from_micro(&grid, &run.snapshots))?;
    log.say(format!("wrote {}", out.display()));
    if let Some(p) = a.diagnostics {
        write_atomic(&p, &json(&run.diagnostics)?)?;
        log.say(format!("wrote {}", p.display()));
    }
    Ok(())
}

fn read_tensors(path: &Path) -> Result<EffectiveTensors> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        snpp::Error::ParseError(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
        .into()
    })
}

fn macro_run(a: MacroArgs, log: &Log) -> Result<()> {
    let cfg = load(&a.common, &[])?;
    let tensors = match &a.tensors {
        Some(p) => read_tensors(p)?,
        None => {
            log.say("no --tensors given; solving the cell problems");
            solve_all_cells(cfg.geometry, &cfg.solver)?.1
        }
    };
    let mut mc = MacroConfig::from_scaling(
        &cfg.scaling,
        tensors,
        cfg.geometry.hole_side,
        cfg.macro_resolution,
    );
    mc.solver = cfg.solver;
    mc.method = cfg.method;
    mc.validate()?;
    let times = uniform_times(cfg.scaling.t_final, cfg.snapshots);
    log.say(format!(
        "macro run: {} x {} grid, {} snapshots",
        mc.resolution,
        mc.resolution,
        times.len()
    ));
    let run = run_macro(&mc, &cfg.init, &times)?;
    let out = output(&cfg, a.out, "macro.csv");
    write_fields(&out, &FieldFile::from_macro(&run))?;
    log.say(format!("wrote {}", out.display()));
    if let Some(p) = a.diagnostics {
        write_atomic(&p, &json(&run.diagnostics)?)?;
        log.say(format!("wrote {}", p.display()));
    }
    Ok(())
}

/// Regime flags become explicit β, γ values relative to the configured α.
fn regime_overrides(flags: &[String], alpha: f64) -> Result<Vec<(&'static str, String)>> {
    let mut o = Vec::new();
    for f in flags {
        let (key, value) = match f.trim() {
            "beta-eq-alpha" => ("scaling.beta", alpha),
            "beta-gt-alpha" => ("scaling.beta", alpha + 1.0),
            "gamma-eq-alpha" => ("scaling.gamma", alpha),
            "gamma-gt-alpha" => ("scaling.gamma", alpha + 1.0),
            "gamma-eq-alpha-1" => ("scaling.gamma", alpha - 1.0),
            "gamma-gt-alpha-1" => ("scaling.gamma", alpha),
            other => {
                return Err(
                    snpp::Error::InvalidConfig(format!("--regime: unknown flag `{other}`")).into(),
                )
            }
        };
        o.push((key, toml_float(value)));
    }
    Ok(o)
}

fn verify(a: VerifyArgs, log: &Log) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(c) = a.case {
        let name = match c {
            Case::Neumann => "neumann",
            Case::Dirichlet => "dirichlet",
        };
        overrides.push(("scaling.bc_kind", format!("\"{name}\"")));
    }
    if !a.eps.is_empty() {
        let list: Vec<String> = a.eps.iter().map(|s| format!("{:?}", s.trim())).collect();
        overrides.push(("ladder.epsilons", format!("[{}]", list.join(", "))));
    }
    let base = load(&a.common, &overrides)?;
    overrides.extend(regime_overrides(&a.regime, base.scaling.alpha)?);
    let cfg = load(&a.common, &overrides)?;
    let study = cfg.study();
    study.validate()?;
    log.say(format!(
        "{:?} study: hole {}, N = {}, eps = {:?}",
        cfg.scaling.bc_kind, cfg.geometry.hole_side, cfg.geometry.resolution, cfg.ladder
    ));
    let report = run_convergence_study(&study, !a.no_lemmas)?;
    for r in &report.rates {
        let slope = r.fit.map_or("n/a".to_string(), |f| {
            format!("{:.3} (R² {:.3})", f.slope, f.r2)
        });
        let verdict = match r.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "report",
        };
        log.say(format!(
            "  {:<22} slope {slope:<22} floor {:.3}  {verdict}",
            r.name, r.floor
        ));
    }
    if !report.h_limited.is_empty() {
        log.say(format!("  h-limited ladder points: {:?}", report.h_limited));
    }
    let out = output(&cfg, a.out, "report.json");
    let mut text = report.to_json()?;
    text.push('\n');
    write_atomic(&out, text.as_bytes())?;
    log.say(format!("wrote {}", out.display()));
    if let Some(p) = a.csv {
        write_atomic(&p, report.to_csv().as_bytes())?;
        log.say(format!("wrote {}", p.display()));
    }
    if report.rates.iter().any(|r| r.pass == Some(false)) {
        log.say("some asserted rates are below their floors");
    }
    Ok(())
}

fn dump_grid(a: GridArgs) -> Result<()> {
    let cfg = load(&a.common, &geometry_overrides(&a.geometry))?;
    let geometry = CellGeometry::new(cfg.geometry.hole_side, cfg.geometry.resolution);
    let grid = match &a.eps {
        Some(s) => build_perforated_grid(epsilon(s)?, geometry)?,
        None => build_unit_cell(geometry)?,
    };
    let pgm = grid.to_pgm();
    match a.out {
        Some(p) => write_atomic(&p, pgm.as_bytes()),
        None => {
            std::io::stdout().write_all(pgm.as_bytes())?;
            Ok(())
        }
    }
}
