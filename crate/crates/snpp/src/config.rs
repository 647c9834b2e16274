//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! [geometry]
//! hole_side = 0.5
//! resolution = 16          # cells per period side
//! macro_resolution = 128
//! [scaling]
//! bc_kind = "neumann"      # or "dirichlet"
//! alpha = 2.0              # beta, gamma default to alpha (Neumann) or alpha - 1 (Dirichlet)
//! sigma = 0.0
//! phi_d = 0.0
//! [time]
//! t_final = 0.1
//! dt = 1e-3
//! snapshots = 11
//! [initial]
//! base = 1.0
//! density = 0.2
//! charge = 0.4
//! [ladder]
//! epsilons = ["1/4", "1/8", "1/16", "1/32"]
//! lambda = 0.3333333333333333
//! # mu = 1.0, mu_amplitude = 0.05 perturb the micro initial data by A·ε^{μ/2}
//! [solver]
//! method = "direct"        # or "iterative"
//! relative_tolerance = 1e-10
//! [output]
//! dir = "out"
//! ```

use crate::error::{Error, Result};
use crate::grid::{build_perforated_grid, CellGeometry};
use crate::linalg::{Method, SolverSettings};
use crate::micro::{BcKind, InitialData, MicroOptions, ScalingConfig};
use crate::recon::DEFAULT_LAMBDA;
use crate::verify::{StudyConfig, TimeRule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    #[serde(default)]
    geometry: RawGeometry,
    #[serde(default)]
    scaling: RawScaling,
    #[serde(default)]
    time: RawTime,
    #[serde(default)]
    initial: RawInitial,
    #[serde(default)]
    ladder: RawLadder,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    hole_side: Option<f64>,
    resolution: Option<usize>,
    macro_resolution: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScaling {
    bc_kind: Option<BcKind>,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    sigma: Option<f64>,
    phi_d: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTime {
    t_final: Option<f64>,
    dt: Option<f64>,
    snapshots: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    base: Option<f64>,
    density: Option<f64>,
    charge: Option<f64>,
    offset: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EpsValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLadder {
    epsilons: Option<Vec<EpsValue>>,
    lambda: Option<f64>,
    mu: Option<f64>,
    mu_amplitude: Option<f64>,
    time_rule: Option<TimeRule>,
    poincare_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    method: Option<Method>,
    relative_tolerance: Option<f64>,
    max_iterations: Option<usize>,
    stokes_interval: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// A fully validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub geometry: CellGeometry,
    pub macro_resolution: usize,
    pub scaling: ScalingConfig,
    pub snapshots: usize,
    pub init: InitialData,
    pub ladder: Vec<f64>,
    pub lambda: f64,
    pub mu: Option<(f64, f64)>,
    pub time_rule: TimeRule,
    pub solver: SolverSettings,
    pub method: Method,
    pub stokes_interval: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub poincare_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults are valid")
    }
}

/// `"1/8"`, `"0.125"` or a bare number.
pub fn parse_epsilon(s: &str) -> Result<f64> {
    let t = s.trim();
    let v = match t.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a
                .trim()
                .parse()
                .map_err(|_| Error::ParseError(format!("bad numerator in {t:?}")))?;
            let b: f64 = b
                .trim()
                .parse()
                .map_err(|_| Error::ParseError(format!("bad denominator in {t:?}")))?;
            a / b
        }
        None => t
            .parse()
            .map_err(|_| Error::ParseError(format!("bad epsilon {t:?}")))?,
    };
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "epsilon {t:?} must lie in (0, 1]"
        )));
    }
    Ok(v)
}

fn field_err(field: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(m) => Error::InvalidConfig(format!("{field}: {m}")),
        other => other,
    }
}

fn require(field: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{field}: {msg}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let pos = e
                .span()
                .map(|s| line_col(text, s.start))
                .map_or(String::new(), |(l, c)| format!("line {l}, column {c}: "));
            Error::ParseError(format!("{pos}{}", e.message()))
        })?;
        Self::from_raw(raw)
    }

    /// Parses `text`, then sets each dotted `key` to the TOML literal `value`
    /// (for example `("scaling.bc_kind", "\"dirichlet\"")`) before validation.
    pub fn parse_with(text: &str, overrides: &[(&str, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| {
            let pos = e
                .span()
                .map(|s| line_col(text, s.start))
                .map_or(String::new(), |(l, c)| format!("line {l}, column {c}: "));
            Error::ParseError(format!("{pos}{}", e.message()))
        })?;
        for (key, value) in overrides {
            let v: toml::Table = toml::from_str(&format!("v = {value}"))
                .map_err(|e| Error::InvalidConfig(format!("{key}: {}", e.message())))?;
            let mut path: Vec<&str> = key.split('.').collect();
            let last = path.pop().unwrap_or_default();
            let mut t = &mut table;
            for part in path {
                t = t
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("{key}: {part} is not a section"))
                    })?;
            }
            t.insert(last.to_string(), v["v"].clone());
        }
        let raw: RawConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::ParseError(e.message().to_string()))?;
        Self::from_raw(raw)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::ParseError(m) => Error::ParseError(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let g = raw.geometry;
        let geometry = CellGeometry::new(g.hole_side.unwrap_or(0.5), g.resolution.unwrap_or(16));
        geometry
            .hole_range()
            .map_err(|e| field_err("geometry", e))?;
        let macro_resolution = g.macro_resolution.unwrap_or(128);
        require(
            "geometry.macro_resolution",
            macro_resolution >= 4,
            "at least 4 required",
        )?;

        let s = raw.scaling;
        let bc_kind = s.bc_kind.unwrap_or(BcKind::Neumann);
        let alpha = s.alpha.unwrap_or(2.0);
        let lag = match bc_kind {
            BcKind::Neumann => 0.0,
            BcKind::Dirichlet => 1.0,
        };
        let t = raw.time;
        let scaling = ScalingConfig {
            alpha,
            beta: s.beta.unwrap_or(alpha - lag),
            gamma: s.gamma.unwrap_or(alpha - lag),
            bc_kind,
            sigma: s.sigma.unwrap_or(0.0),
            phi_d: s.phi_d.unwrap_or(0.0),
            t_final: t.t_final.unwrap_or(0.1),
            dt: t.dt.unwrap_or(1e-3),
        };
        let section = |e: Error| match &e {
            Error::InvalidConfig(m) if m.starts_with("beta") || m.starts_with("gamma") => {
                field_err(
                    &format!("scaling.{}", &m[..m.find(' ').unwrap_or(m.len())]),
                    e,
                )
            }
            Error::InvalidConfig(_) => field_err("time", e),
            _ => e,
        };
        scaling.validate().map_err(section)?;
        let snapshots = t.snapshots.unwrap_or(11);
        require("time.snapshots", snapshots >= 2, "at least 2 required")?;
        let steps = scaling.t_final / scaling.dt;
        require(
            "time.dt",
            (steps - steps.round()).abs() < 1e-9 * steps.max(1.0),
            "t_final must be a multiple of dt",
        )?;

        let i = raw.initial;
        let d = InitialData::default();
        let init = InitialData {
            base: i.base.unwrap_or(d.base),
            density: i.density.unwrap_or(d.density),
            charge: i.charge.unwrap_or(d.charge),
            offset: i.offset.unwrap_or(0.0),
            perturbation: 0.0,
        };
        require(
            "initial",
            init.lower_bound() >= 0.0,
            "concentrations must stay non-negative",
        )?;

        let l = raw.ladder;
        let ladder = match l.epsilons {
            None => vec![0.25, 0.125, 0.0625, 0.03125],
            Some(v) => v
                .iter()
                .map(|e| match e {
                    EpsValue::Number(x) => parse_epsilon(&x.to_string()),
                    EpsValue::Text(s) => parse_epsilon(s),
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| field_err("ladder.epsilons", e))?,
        };
        for &eps in &ladder {
            build_perforated_grid(eps, geometry).map_err(|e| match e {
                Error::NonIntegerReciprocal(_) | Error::MisalignedHole(_) => {
                    Error::InvalidConfig(format!("ladder.epsilons: {e}"))
                }
                other => other,
            })?;
        }
        let lambda = l.lambda.unwrap_or(DEFAULT_LAMBDA);
        require(
            "ladder.lambda",
            lambda > 0.0 && lambda < 1.0,
            "must lie in (0, 1)",
        )?;
        let mu = match (l.mu, l.mu_amplitude) {
            (Some(m), a) => {
                require("ladder.mu", m > 0.0, "must be positive")?;
                Some((m, a.unwrap_or(0.05)))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "ladder.mu_amplitude: set ladder.mu as well".into(),
                ))
            }
            (None, None) => None,
        };
        if let Some((_, a)) = mu {
            require(
                "ladder.mu_amplitude",
                init.lower_bound() - a.abs() >= 0.0,
                "perturbed data must stay non-negative",
            )?;
        }

        let so = raw.solver;
        let solver = SolverSettings {
            relative_tolerance: so.relative_tolerance.unwrap_or(1e-10),
            max_iterations: so.max_iterations.unwrap_or(20_000),
            ..Default::default()
        };
        solver.validate().map_err(|e| field_err("solver", e))?;
        let stokes_interval = so.stokes_interval.unwrap_or(1);
        require(
            "solver.stokes_interval",
            stokes_interval >= 1,
            "at least 1 required",
        )?;

        Ok(RunConfig {
            geometry,
            macro_resolution,
            scaling,
            snapshots,
            init,
            ladder,
            lambda,
            mu,
            time_rule: l.time_rule.unwrap_or_default(),
            solver,
            method: so.method.unwrap_or_default(),
            stokes_interval,
            output_dir: raw.output.dir.unwrap_or_else(|| PathBuf::from("out")),
            seed: raw.seed.unwrap_or(7),
            poincare_samples: l.poincare_samples.unwrap_or(8),
        })
    }

    pub fn study(&self) -> StudyConfig {
        StudyConfig {
            geometry: self.geometry,
            scaling: self.scaling,
            init: self.init,
            ladder: self.ladder.clone(),
            lambda: self.lambda,
            mu: self.mu,
            snapshots: self.snapshots,
            macro_resolution: self.macro_resolution,
            solver: self.solver,
            method: self.method,
            seed: self.seed,
            poincare_samples: self.poincare_samples,
            time_rule: self.time_rule,
        }
    }

    pub fn micro_options(&self) -> MicroOptions {
        MicroOptions {
            solver: self.solver,
            method: self.method,
            stokes_interval: self.stokes_interval,
            project_rhs: true,
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}
