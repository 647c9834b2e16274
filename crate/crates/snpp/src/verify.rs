//! Corrector error norms across an ε ladder, fitted rates, and the auxiliary
//! inequality checks (perforated Poincaré, average estimate, cutoff, ∇·𝒱).

use crate::cell::{solve_all_cells, CellSolutions, EffectiveTensors};
use crate::error::{Error, Result};
use crate::fv::face_gradient;
use crate::grid::{
    build_perforated_grid, Axis, CellGeometry, FaceKind, FieldOnGrid, PerforatedGrid, Placement,
    VelocityField,
};
use crate::linalg::{Method, SolverSettings};
use crate::macroscale::{run_macro, MacroConfig, MacroRun, Regime};
use crate::micro::{run_micro, uniform_times, BcKind, InitialData, MicroOptions, ScalingConfig};
use crate::recon::{build_reconstructions, build_velocity_pressure_correctors, cutoff_diagnostics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Exponent of a theorem bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    /// `max{ε^{1/2}, ε^{μ/2}}`.
    Leading,
    /// Square root of the leading rate.
    HalfLeading,
    /// `max{ε^{1/2}, ε^{μ/2}} + ε^{λ/2} + ε^{1−3λ/2} + ε^{1/2−λ}`.
    Corrector,
}

#[derive(Clone, Copy, Debug)]
pub struct TheoremRate {
    pub name: &'static str,
    pub case: BcKind,
    pub exponent: Exponent,
    /// Part of pass/fail; otherwise reported only.
    pub asserted: bool,
}

const fn rate(name: &'static str, case: BcKind, exponent: Exponent, asserted: bool) -> TheoremRate {
    TheoremRate {
        name,
        case,
        exponent,
        asserted,
    }
}

/// Every rate claim checked by the study.
pub const THEOREM_RATES: &[TheoremRate] = &[
    rate("phi_L2", BcKind::Neumann, Exponent::Leading, true),
    rate("c_L2+", BcKind::Neumann, Exponent::Leading, true),
    rate("c_L2-", BcKind::Neumann, Exponent::Leading, true),
    rate("grad_phi", BcKind::Neumann, Exponent::Leading, true),
    rate("grad_c+", BcKind::Neumann, Exponent::HalfLeading, true),
    rate("grad_c-", BcKind::Neumann, Exponent::HalfLeading, true),
    rate("v_avg", BcKind::Neumann, Exponent::Leading, false),
    rate("v_corr_paper", BcKind::Neumann, Exponent::Corrector, true),
    rate("v_corr_plain", BcKind::Neumann, Exponent::Corrector, false),
    rate("p_quot", BcKind::Neumann, Exponent::Corrector, true),
    rate("phi_L2", BcKind::Dirichlet, Exponent::Leading, true),
    rate("grad_phi", BcKind::Dirichlet, Exponent::Leading, true),
    rate("c_L2+", BcKind::Dirichlet, Exponent::Leading, true),
    rate("c_L2-", BcKind::Dirichlet, Exponent::Leading, true),
    rate("grad_c+", BcKind::Dirichlet, Exponent::Leading, true),
    rate("grad_c-", BcKind::Dirichlet, Exponent::Leading, true),
    rate(
        "phi_avg_dirichlet",
        BcKind::Dirichlet,
        Exponent::Leading,
        true,
    ),
    rate("v_avg", BcKind::Dirichlet, Exponent::Leading, false),
    rate("v_corr_paper", BcKind::Dirichlet, Exponent::Corrector, true),
    rate(
        "v_corr_plain",
        BcKind::Dirichlet,
        Exponent::Corrector,
        false,
    ),
    rate("p_quot", BcKind::Dirichlet, Exponent::Corrector, true),
];

/// Slack below a theoretical exponent that still passes.
pub const RATE_TOLERANCE: f64 = 0.1;
/// Absolute floor for the corrector exponents.
pub const CORRECTOR_FLOOR: f64 = 0.1;
pub const MIN_R2: f64 = 0.9;

/// Exponent of `max{ε^{1/2}, ε^{μ/2}}`; `mu = None` means ε-independent initial data.
pub fn leading_exponent(mu: Option<f64>) -> f64 {
    mu.map_or(0.5, |m| (0.5 * m).min(0.5))
}

pub fn corrector_exponent(lambda: f64, mu: Option<f64>) -> f64 {
    leading_exponent(mu)
        .min(0.5 * lambda)
        .min(1.0 - 1.5 * lambda)
        .min(0.5 - lambda)
}

impl TheoremRate {
    pub fn theoretical(&self, lambda: f64, mu: Option<f64>) -> f64 {
        match self.exponent {
            Exponent::Leading => leading_exponent(mu),
            Exponent::HalfLeading => 0.5 * leading_exponent(mu),
            Exponent::Corrector => corrector_exponent(lambda, mu),
        }
    }

    pub fn floor(&self, lambda: f64, mu: Option<f64>) -> f64 {
        let t = self.theoretical(lambda, mu);
        match self.exponent {
            Exponent::Corrector => CORRECTOR_FLOOR.min(t),
            _ => t - RATE_TOLERANCE,
        }
    }
}

pub fn theorem_rates(case: BcKind) -> impl Iterator<Item = &'static TheoremRate> {
    THEOREM_RATES.iter().filter(move |r| r.case == case)
}

// ---------------------------------------------------------------- norms

const AXES_ALL: [(Axis, Placement); 2] = [(Axis::X, Placement::XFace), (Axis::Y, Placement::YFace)];

fn area(grid: &PerforatedGrid) -> f64 {
    grid.h() * grid.h()
}

/// `Σ |f|² h²` over fluid cells.
pub fn cell_sq(grid: &PerforatedGrid, f: &FieldOnGrid) -> Result<f64> {
    f.check(grid, Placement::CellCenter)?;
    Ok(f.values.iter().map(|v| v * v).sum::<f64>() * area(grid))
}

/// Same after removing the fluid-cell mean.
pub fn quotient_sq(grid: &PerforatedGrid, f: &FieldOnGrid) -> Result<f64> {
    f.check(grid, Placement::CellCenter)?;
    let m = f.mean();
    Ok(f.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() * area(grid))
}

/// Face quadrature of a MAC field: `h²` per interior face, `h²/2` on ∂Ω, nothing on Γ.
pub fn velocity_sq(grid: &PerforatedGrid, v: &VelocityField) -> Result<f64> {
    let mut s = 0.0;
    for (axis, placement) in AXES_ALL {
        let f = v.component(axis);
        f.check(grid, placement)?;
        let kinds = &grid.faces(axis).kinds;
        for (val, kind) in f.values.iter().zip(kinds) {
            let w = match kind {
                FaceKind::InteriorFluid => 1.0,
                FaceKind::OuterBoundary => 0.5,
                _ => 0.0,
            };
            s += w * val * val;
        }
    }
    Ok(s * area(grid))
}

/// `‖∇f‖²` from difference quotients across interior fluid faces.
pub fn gradient_sq(grid: &PerforatedGrid, f: &FieldOnGrid) -> Result<f64> {
    f.check(grid, Placement::CellCenter)?;
    let g = face_gradient(grid, f);
    Ok((g.x.values.iter().map(|v| v * v).sum::<f64>()
        + g.y.values.iter().map(|v| v * v).sum::<f64>())
        * area(grid))
}

/// Time quadrature over the snapshot set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeRule {
    Trapezoid,
    /// Trapezoid, except that `[t₀, t₁]` takes the value at `t₁`: the initial
    /// snapshot is data, and the O(ε²) initial layer behind it is not resolved.
    #[default]
    InitialLayer,
}

/// Quadrature in time over squared spatial norms, then the square root.
pub fn time_norm(times: &[f64], sq: &[f64], rule: TimeRule) -> Result<f64> {
    if times.len() != sq.len() {
        return Err(Error::PlacementMismatch(format!(
            "{} times for {} snapshots",
            times.len(),
            sq.len()
        )));
    }
    if times.len() == 1 {
        return Ok(sq[0].sqrt());
    }
    let total: f64 = times
        .windows(2)
        .zip(sq.windows(2))
        .enumerate()
        .map(|(k, (t, s))| match (rule, k) {
            (TimeRule::InitialLayer, 0) => (t[1] - t[0]) * s[1],
            _ => 0.5 * (t[1] - t[0]) * (s[0] + s[1]),
        })
        .sum();
    Ok(total.sqrt())
}

pub fn trapezoid_norm(times: &[f64], sq: &[f64]) -> Result<f64> {
    time_norm(times, sq, TimeRule::Trapezoid)
}

/// `‖f‖_{L²((0,T)×Ω^ε)}` of per-snapshot cell fields.
pub fn l2_norm_perforated(
    grid: &PerforatedGrid,
    fields: &[FieldOnGrid],
    times: &[f64],
) -> Result<f64> {
    let sq = fields
        .iter()
        .map(|f| cell_sq(grid, f))
        .collect::<Result<Vec<_>>>()?;
    trapezoid_norm(times, &sq)
}

/// Quotient variant, the spatial mean removed at each snapshot.
pub fn quotient_norm_perforated(
    grid: &PerforatedGrid,
    fields: &[FieldOnGrid],
    times: &[f64],
) -> Result<f64> {
    let sq = fields
        .iter()
        .map(|f| quotient_sq(grid, f))
        .collect::<Result<Vec<_>>>()?;
    trapezoid_norm(times, &sq)
}

// ---------------------------------------------------------------- rate fits

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Errors decrease strictly with ε.
    pub monotone: bool,
}

/// Least squares on `(ln ε, ln error)`.
pub fn fit_rate(eps: &[f64], errors: &[f64]) -> Result<RateFit> {
    if eps.len() != errors.len() || eps.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "{} points",
            eps.len().min(errors.len())
        )));
    }
    if let Some(e) = errors
        .iter()
        .chain(eps)
        .find(|v| !(**v > 0.0) || !v.is_finite())
    {
        return Err(Error::DegenerateFit(format!("non-positive value {e}")));
    }
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all epsilons equal".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    let mut order: Vec<usize> = (0..eps.len()).collect();
    order.sort_by(|&a, &b| eps[a].total_cmp(&eps[b]));
    let monotone = order.windows(2).all(|w| errors[w[0]] < errors[w[1]]);
    Ok(RateFit {
        slope,
        intercept,
        r2,
        monotone,
    })
}

// ---------------------------------------------------------------- the study

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub geometry: CellGeometry,
    pub scaling: ScalingConfig,
    pub init: InitialData,
    pub ladder: Vec<f64>,
    pub lambda: f64,
    /// `(μ, A)`: micro initial data get `A·ε^{μ/2}` added to both species.
    pub mu: Option<(f64, f64)>,
    pub snapshots: usize,
    pub macro_resolution: usize,
    pub solver: SolverSettings,
    pub method: Method,
    pub seed: u64,
    pub poincare_samples: usize,
    #[serde(default)]
    pub time_rule: TimeRule,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            geometry: CellGeometry::new(0.5, 16),
            scaling: ScalingConfig::default(),
            init: InitialData::default(),
            ladder: vec![0.25, 0.125, 0.0625, 0.03125],
            lambda: crate::recon::DEFAULT_LAMBDA,
            mu: None,
            snapshots: 11,
            macro_resolution: 128,
            solver: SolverSettings::default(),
            method: Method::Direct,
            seed: 7,
            poincare_samples: 8,
            time_rule: TimeRule::InitialLayer,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ladder.len() < 3 {
            return Err(Error::LadderTooShort(self.ladder.len()));
        }
        self.scaling.validate()?;
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        if self.snapshots < 2 {
            return Err(Error::InvalidConfig("at least 2 snapshots required".into()));
        }
        for &eps in &self.ladder {
            build_perforated_grid(eps, self.geometry).map(|_| ())?;
        }
        self.solver.validate()
    }

    pub fn mu_exponent(&self) -> Option<f64> {
        self.mu.map(|m| m.0)
    }

    pub fn micro_init(&self, eps: f64) -> InitialData {
        match self.mu {
            Some((mu, a)) => InitialData {
                perturbation: self.init.perturbation + a * eps.powf(0.5 * mu),
                ..self.init
            },
            None => self.init,
        }
    }

    /// `h = ε/N` coarser than ε².
    pub fn h_limited(&self, eps: f64) -> bool {
        eps / self.geometry.resolution as f64 > eps * eps * (1.0 + 1e-12)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub epsilon: f64,
    pub h: f64,
    pub h_limited: bool,
    pub norms: BTreeMap<String, f64>,
    /// Side quantities: ∇·𝒱 norms, micro invariants.
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub name: String,
    pub theoretical: f64,
    pub floor: f64,
    pub asserted: bool,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
    /// `None` when reported only.
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub epsilons: Vec<f64>,
    pub poincare: Vec<f64>,
    pub average_estimate: Vec<f64>,
    /// `‖1 − m^ε‖/ε^{1/2}`.
    pub cutoff_l2: Vec<f64>,
    /// `ε‖∇m^ε‖/ε^{1/2}`.
    pub cutoff_grad: Vec<f64>,
    /// `‖∇·𝒱‖/(εδ^{−3/2} + ε^{1/2}δ^{−1})`, empty without a hole.
    pub corrector_divergence: Vec<f64>,
}

/// `max/min` of a positive sequence.
pub fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(0.0, f64::max);
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub case: BcKind,
    pub regime: Regime,
    pub config: StudyConfig,
    pub tensors: EffectiveTensors,
    pub records: Vec<ErrorRecord>,
    pub rates: Vec<RateCheck>,
    /// Ladder points where `h = ε/N > ε²`.
    pub h_limited: Vec<f64>,
    pub lemmas: Option<LemmaReport>,
}

impl ConvergenceReport {
    pub fn rate(&self, name: &str) -> Option<&RateCheck> {
        self.rates.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ParseError(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::ParseError(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    /// `name,epsilon,error,slope,theoretical,pass`, one row per norm and ε.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,epsilon,error,slope,theoretical,pass\n");
        for r in &self.rates {
            let slope = r.fit.map_or(String::new(), |f| format!("{}", f.slope));
            let pass = r
                .pass
                .map_or("report", |p| if p { "true" } else { "false" });
            for rec in &self.records {
                if let Some(e) = rec.norms.get(&r.name) {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        r.name, rec.epsilon, e, slope, r.theoretical, pass
                    ));
                }
            }
        }
        out
    }
}

/// Accumulates squared spatial norms per quantity.
#[derive(Default)]
struct Accumulator(BTreeMap<String, Vec<f64>>);

impl Accumulator {
    fn push(&mut self, name: &str, v: f64) {
        self.0.entry(name.to_string()).or_default().push(v);
    }

    fn finish(&self, times: &[f64], rule: TimeRule) -> Result<BTreeMap<String, f64>> {
        self.0
            .iter()
            .map(|(k, sq)| Ok((k.clone(), time_norm(times, sq, rule)?)))
            .collect()
    }
}

/// Everything shared by the per-ε runs.
pub struct StudyContext {
    pub config: StudyConfig,
    pub cells: CellSolutions,
    pub tensors: EffectiveTensors,
    pub macro_run: MacroRun,
    pub times: Vec<f64>,
}

impl StudyContext {
    pub fn new(config: &StudyConfig) -> Result<Self> {
        config.validate()?;
        let (cells, tensors) = solve_all_cells(config.geometry, &config.solver)?;
        let times = uniform_times(config.scaling.t_final, config.snapshots);
        let mut mc = MacroConfig::from_scaling(
            &config.scaling,
            tensors.clone(),
            config.geometry.hole_side,
            config.macro_resolution,
        );
        mc.solver = config.solver;
        mc.method = config.method;
        let macro_run = run_macro(&mc, &config.init, &times)?;
        Ok(StudyContext {
            config: config.clone(),
            cells,
            tensors,
            macro_run,
            times,
        })
    }

    pub fn regime(&self) -> Regime {
        self.macro_run.regime
    }

    /// Micro run and all norms at one ε.
    pub fn record(&self, eps: f64) -> Result<ErrorRecord> {
        let cfg = &self.config;
        let grid = build_perforated_grid(eps, cfg.geometry)?;
        let opts = MicroOptions {
            solver: cfg.solver,
            method: cfg.method,
            ..Default::default()
        };
        let micro = run_micro(
            &cfg.scaling,
            &grid,
            &cfg.micro_init(eps),
            &self.times,
            &opts,
        )?;
        let regime = self.regime();
        let porosity = self.tensors.porosity;
        let d = self.tensors.d;
        let mut acc = Accumulator::default();
        let mut div = Accumulator::default();
        let mut bound = 0.0;
        for (k, s) in micro.snapshots.iter().enumerate() {
            let snap = self.macro_run.snapshot(k);
            if (snap.state.time - s.time).abs() > 1e-9 {
                return Err(Error::PlacementMismatch(format!(
                    "snapshot times {} and {}",
                    snap.state.time, s.time
                )));
            }
            let b = build_reconstructions(snap, &self.cells, &grid, regime)?;
            let phi = s.phi_scaled(eps, &cfg.scaling);
            acc.push("phi_L2", cell_sq(&grid, &phi.sub(&b.phi0_eps))?);
            let first = match regime.bc_kind {
                BcKind::Neumann => &b.phi1_eps,
                BcKind::Dirichlet => &b.phi0_eps,
            };
            acc.push("grad_phi", gradient_sq(&grid, &phi.sub(first))?);
            acc.push("c_L2+", cell_sq(&grid, &s.c_plus.sub(&b.c0_plus_eps))?);
            acc.push("c_L2-", cell_sq(&grid, &s.c_minus.sub(&b.c0_minus_eps))?);
            acc.push(
                "grad_c+",
                gradient_sq(&grid, &s.c_plus.sub(&b.c1_plus_eps))?,
            );
            acc.push(
                "grad_c-",
                gradient_sq(&grid, &s.c_minus.sub(&b.c1_minus_eps))?,
            );
            if let Some(bar) = &b.phi_bar_eps {
                acc.push("phi_avg_dirichlet", cell_sq(&grid, &phi.sub(bar))?);
            }
            acc.push("v_avg", velocity_sq(&grid, &s.v.sub(&b.v_bar_eps))?);
            acc.push("p_quot", quotient_sq(&grid, &s.p.sub(&b.p0_eps))?);
            if let (Some(v0), Some(v1)) = (&b.v0_eps, &b.v1_eps) {
                let mut plain = s.v.sub(v0);
                plain.axpy(-eps, v1);
                acc.push("v_corr_plain", velocity_sq(&grid, &plain)?);
                let mut paper = s.v.clone();
                for (a, (axis, _)) in AXES_ALL.iter().enumerate() {
                    // 𝔻 is diagonal on the square cell; its off-diagonal entries are round-off
                    let f = d[a][a] / porosity;
                    paper.component_mut(*axis).axpy(-f, v0.component(*axis));
                    paper
                        .component_mut(*axis)
                        .axpy(-f * eps, v1.component(*axis));
                }
                acc.push("v_corr_paper", velocity_sq(&grid, &paper)?);
                let c = build_velocity_pressure_correctors(
                    snap,
                    &self.cells,
                    &self.tensors,
                    &grid,
                    regime,
                    cfg.lambda,
                )?;
                div.push("div_V", c.diagnostics.div_l2.powi(2));
                div.push(
                    "div_V_interior_cutoff",
                    c.diagnostics.div_l2_interior_cutoff.powi(2),
                );
                bound = c.diagnostics.bound;
            }
        }
        let norms = acc.finish(&self.times, cfg.time_rule)?;
        let mut diagnostics = div.finish(&self.times, cfg.time_rule)?;
        for (k, v) in acc.finish(&self.times, TimeRule::Trapezoid)? {
            diagnostics.insert(format!("{k}@trapezoid"), v);
        }
        if let Some(&dv) = diagnostics.get("div_V") {
            diagnostics.insert("div_V_bound".into(), bound);
            diagnostics.insert("div_V_ratio".into(), dv / bound);
        }
        let last = micro.diagnostics.last().expect("at least one snapshot");
        let first = &micro.diagnostics[0];
        diagnostics.insert(
            "mass_drift".into(),
            (last.mass - first.mass).abs() / first.mass.abs().max(1e-300),
        );
        diagnostics.insert(
            "min_c".into(),
            micro
                .diagnostics
                .iter()
                .map(|d| d.min_c)
                .fold(f64::INFINITY, f64::min),
        );
        diagnostics.insert(
            "max_div_v".into(),
            micro
                .diagnostics
                .iter()
                .map(|d| d.max_div_v)
                .fold(0.0, f64::max),
        );
        Ok(ErrorRecord {
            epsilon: eps,
            h: grid.h(),
            h_limited: cfg.h_limited(eps),
            norms,
            diagnostics,
        })
    }
}

/// Rate checks over a set of records.
pub fn rate_checks(
    case: BcKind,
    records: &[ErrorRecord],
    lambda: f64,
    mu: Option<f64>,
) -> Vec<RateCheck> {
    let any_h_limited = records.iter().any(|r| r.h_limited);
    theorem_rates(case)
        .filter(|t| records.iter().all(|r| r.norms.contains_key(t.name)))
        .map(|t| {
            let eps: Vec<f64> = records.iter().map(|r| r.epsilon).collect();
            let err: Vec<f64> = records.iter().map(|r| r.norms[t.name]).collect();
            let floor = t.floor(lambda, mu);
            let (fit, fit_error) = match fit_rate(&eps, &err) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let pass = t.asserted.then(|| {
                fit.is_some_and(|f| f.slope >= floor && (f.r2 >= MIN_R2 || any_h_limited))
            });
            RateCheck {
                name: t.name.to_string(),
                theoretical: t.theoretical(lambda, mu),
                floor,
                asserted: t.asserted,
                fit,
                fit_error,
                pass,
            }
        })
        .collect()
}

/// Cell problems and macro run once, then one micro run per ε (in parallel).
pub fn run_convergence_study(config: &StudyConfig, lemmas: bool) -> Result<ConvergenceReport> {
    let ctx = StudyContext::new(config)?;
    let records = crate::par_map(&config.ladder, |&eps| ctx.record(eps))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let case = config.scaling.bc_kind;
    let rates = rate_checks(case, &records, config.lambda, config.mu_exponent());
    let h_limited = records
        .iter()
        .filter(|r| r.h_limited)
        .map(|r| r.epsilon)
        .collect();
    let lemmas = if lemmas {
        let mut rep = lemma_report(
            &ctx.cells,
            config.geometry,
            &config.ladder,
            config.poincare_samples,
            config.seed,
        )?;
        rep.corrector_divergence = records
            .iter()
            .filter_map(|r| r.diagnostics.get("div_V_ratio").copied())
            .collect();
        Some(rep)
    } else {
        None
    };
    Ok(ConvergenceReport {
        case,
        regime: ctx.regime(),
        config: config.clone(),
        tensors: ctx.tensors.clone(),
        records,
        rates,
        h_limited,
        lemmas,
    })
}

// ---------------------------------------------------------------- lemma checks

/// Samples `u = g(x)·φ(x/ε)` with φ the Dirichlet cell function and `g` a random
/// sine series vanishing on ∂Ω; `u = 0` on Γ^ε ∪ ∂Ω. Returns the largest
/// `‖u‖/(ε‖∇u‖)`, zero samples skipped.
pub fn poincare_check(
    grid: &PerforatedGrid,
    cells: &CellSolutions,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let phi = cells
        .phi
        .as_ref()
        .ok_or_else(|| Error::DegenerateGeometry("Poincaré check needs a hole".into()))?;
    let nc = cells.grid.n();
    let per: Vec<f64> = grid
        .cells()
        .iter()
        .map(|&(i, j)| {
            phi.values[cells
                .grid
                .cell_id(i % nc, j % nc)
                .expect("fluid maps to fluid")]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = |x: f64, y: f64| {
            let mut s = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    let (kf, lf) = ((k + 1) as f64, (l + 1) as f64);
                    s += a[3 * k + l]
                        * (kf * std::f64::consts::PI * x).sin()
                        * (lf * std::f64::consts::PI * y).sin();
                }
            }
            s
        };
        let u = FieldOnGrid {
            placement: Placement::CellCenter,
            values: grid
                .positions(Placement::CellCenter)
                .iter()
                .zip(&per)
                .map(|(&(x, y), p)| g(x, y) * p)
                .collect(),
        };
        if let Some(r) = poincare_ratio(grid, &u)? {
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// `‖u‖/(ε‖∇u‖)` with homogeneous Dirichlet ghost values on Γ and ∂Ω; `None` for `u ≡ 0`.
pub fn poincare_ratio(grid: &PerforatedGrid, u: &FieldOnGrid) -> Result<Option<f64>> {
    let l2 = cell_sq(grid, u)?.sqrt();
    if l2 == 0.0 {
        return Ok(None);
    }
    let h = grid.h();
    let mut g2 = gradient_sq(grid, u)? / (h * h);
    for &(i, j) in grid.cells() {
        let c = u.values[grid.cell_id(i, j).unwrap()];
        for (axis, fi, fj, _) in grid.cell_faces(i, j) {
            if matches!(
                grid.face_kind(axis, fi, fj),
                FaceKind::MicroBoundary | FaceKind::OuterBoundary
            ) {
                g2 += (c / (0.5 * h)).powi(2);
            }
        }
    }
    Ok(Some(l2 / (grid.epsilon() * (g2 * h * h).sqrt())))
}

/// `‖p^ε − p̄‖/(ε^{1/2}‖p^ε‖_{H¹})` for a unit-cell field replicated at each ε.
pub fn average_estimate_check(
    p: &FieldOnGrid,
    cells: &CellSolutions,
    geometry: CellGeometry,
    ladder: &[f64],
) -> Result<Vec<f64>> {
    p.check(&cells.grid, Placement::CellCenter)?;
    let pbar = p.mean();
    let nc = cells.grid.n();
    ladder
        .iter()
        .map(|&eps| {
            let grid = build_perforated_grid(eps, geometry)?;
            let pe = FieldOnGrid {
                placement: Placement::CellCenter,
                values: grid
                    .cells()
                    .iter()
                    .map(|&(i, j)| p.values[cells.grid.cell_id(i % nc, j % nc).unwrap()])
                    .collect(),
            };
            let dev = FieldOnGrid {
                placement: Placement::CellCenter,
                values: pe.values.iter().map(|v| v - pbar).collect(),
            };
            let num = cell_sq(&grid, &dev)?.sqrt();
            let h1 = (cell_sq(&grid, &pe)? + gradient_sq(&grid, &pe)?).sqrt();
            Ok(if h1 > 0.0 {
                num / (eps.sqrt() * h1)
            } else {
                0.0
            })
        })
        .collect()
}

/// Poincaré, average-estimate and cutoff ratios over a ladder.
pub fn lemma_report(
    cells: &CellSolutions,
    geometry: CellGeometry,
    ladder: &[f64],
    samples: usize,
    seed: u64,
) -> Result<LemmaReport> {
    let mut rep = LemmaReport {
        epsilons: ladder.to_vec(),
        ..Default::default()
    };
    rep.average_estimate = average_estimate_check(&cells.phi_j[0], cells, geometry, ladder)?;
    for &eps in ladder {
        let grid = build_perforated_grid(eps, geometry)?;
        if cells.phi.is_some() {
            rep.poincare
                .push(poincare_check(&grid, cells, samples, seed)?);
        }
        let c = cutoff_diagnostics(&grid, eps)?;
        rep.cutoff_l2.push(c.one_minus_m_l2 / eps.sqrt());
        rep.cutoff_grad.push(c.eps_grad_m_l2 / eps.sqrt());
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_unit_cell;
    use proptest::prelude::*;

    #[test]
    fn fit_of_exact_powers() {
        let eps = [0.25, 0.125, 0.0625, 0.03125];
        let f = fit_rate(&eps, &eps).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12 && f.monotone);
        let e: Vec<f64> = eps.iter().map(|x| 2.0 * x.sqrt()).collect();
        let f = fit_rate(&eps, &e).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12 && (f.intercept - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            fit_rate(&eps, &[1.0, 0.0, 1.0, 1.0]),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn fit_of_wobbly_sequence() {
        let eps = [0.25, 0.125, 0.0625, 0.03125];
        let e: Vec<f64> = eps
            .iter()
            .map(|x: &f64| x.sqrt() * (1.0 + 0.1 * x.ln().sin()))
            .collect();
        let f = fit_rate(&eps, &e).unwrap();
        assert!((0.4..=0.6).contains(&f.slope), "{f:?}");
    }

    #[test]
    fn constant_difference_norm() {
        let g = build_unit_cell(CellGeometry::new(0.5, 8)).unwrap();
        let one = FieldOnGrid {
            placement: Placement::CellCenter,
            values: vec![1.0; g.num_fluid_cells()],
        };
        let times = uniform_times(0.1, 11);
        let fields = vec![one.clone(); 11];
        let n = l2_norm_perforated(&g, &fields, &times).unwrap();
        assert!((n - 0.075f64.sqrt()).abs() < 1e-14);
        let sq = vec![0.75; 11];
        assert!(
            (time_norm(&times, &sq, TimeRule::InitialLayer).unwrap() - 0.075f64.sqrt()).abs()
                < 1e-14
        );
        let mut spike = vec![0.0; 11];
        spike[0] = 1.0;
        assert_eq!(
            time_norm(&times, &spike, TimeRule::InitialLayer).unwrap(),
            0.0
        );
        assert!((trapezoid_norm(&times, &spike).unwrap() - 0.005f64.sqrt()).abs() < 1e-15);
        assert!(quotient_norm_perforated(&g, &fields, &times).unwrap() < 1e-14);
        let zero = vec![one.sub(&one); 11];
        assert_eq!(l2_norm_perforated(&g, &zero, &times).unwrap(), 0.0);
        let faces = FieldOnGrid::zeros(&g, Placement::XFace);
        assert!(matches!(
            l2_norm_perforated(&g, &[faces], &[0.0]),
            Err(Error::PlacementMismatch(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn norms_scale_with_the_field(vals in proptest::collection::vec(-5.0f64..5.0, 48), s in -3.0f64..3.0) {
            let g = build_unit_cell(CellGeometry::new(0.5, 8)).unwrap();
            let f = FieldOnGrid { placement: Placement::CellCenter, values: vals };
            let fs = f.scaled(s);
            let a = cell_sq(&g, &f).unwrap().sqrt();
            let b = cell_sq(&g, &fs).unwrap().sqrt();
            prop_assert!((b - s.abs() * a).abs() <= 1e-12 * (1.0 + b));
            let a = gradient_sq(&g, &f).unwrap().sqrt();
            let b = gradient_sq(&g, &fs).unwrap().sqrt();
            prop_assert!((b - s.abs() * a).abs() <= 1e-12 * (1.0 + b));
            let a = quotient_sq(&g, &f).unwrap().sqrt();
            let b = quotient_sq(&g, &fs).unwrap().sqrt();
            prop_assert!((b - s.abs() * a).abs() <= 1e-12 * (1.0 + b));
        }
    }

    #[test]
    fn scaling_by_two_and_minus_one() {
        let g = build_unit_cell(CellGeometry::new(0.5, 8)).unwrap();
        let v = VelocityField {
            x: FieldOnGrid::from_fn(&g, Placement::XFace, |x, y| x.sin() + y),
            y: FieldOnGrid::from_fn(&g, Placement::YFace, |x, y| x * y),
        };
        let n = velocity_sq(&g, &v).unwrap().sqrt();
        assert!((velocity_sq(&g, &v.scaled(2.0)).unwrap().sqrt() - 2.0 * n).abs() < 1e-14);
        assert_eq!(velocity_sq(&g, &v.scaled(-1.0)).unwrap().sqrt(), n);
    }

    #[test]
    fn theorem_table_is_consistent() {
        assert!((corrector_exponent(1.0 / 3.0, None) - 1.0 / 6.0).abs() < 1e-15);
        for t in THEOREM_RATES {
            let th = t.theoretical(1.0 / 3.0, None);
            let fl = t.floor(1.0 / 3.0, None);
            assert!(fl < th && fl > 0.0, "{}", t.name);
        }
        let floors: Vec<(&str, f64)> = theorem_rates(BcKind::Neumann)
            .map(|t| (t.name, t.floor(1.0 / 3.0, None)))
            .collect();
        assert!(floors.contains(&("grad_c+", 0.25 - 0.1)));
        assert!(floors.contains(&("p_quot", 0.1)));
        assert_eq!(leading_exponent(Some(0.6)), 0.3);
    }

    #[test]
    fn report_round_trips() {
        let mut norms = BTreeMap::new();
        norms.insert("phi_L2".to_string(), 0.1 + 0.2);
        norms.insert("c_L2+".to_string(), std::f64::consts::PI * 1e-7);
        let rec = ErrorRecord {
            epsilon: 1.0 / 3.0,
            h: 1.0 / 48.0,
            h_limited: true,
            norms,
            diagnostics: BTreeMap::new(),
        };
        let records = vec![
            rec.clone(),
            ErrorRecord {
                epsilon: 1.0 / 7.0,
                ..rec.clone()
            },
            ErrorRecord {
                epsilon: 0.01,
                ..rec
            },
        ];
        let rates = rate_checks(BcKind::Neumann, &records, 1.0 / 3.0, None);
        let (cells, tensors) =
            solve_all_cells(CellGeometry::new(0.5, 8), &SolverSettings::default()).unwrap();
        drop(cells);
        let report = ConvergenceReport {
            case: BcKind::Neumann,
            regime: Regime::neumann(true, true),
            config: StudyConfig::default(),
            tensors,
            records,
            rates,
            h_limited: vec![0.01],
            lemmas: Some(LemmaReport {
                epsilons: vec![0.5],
                poincare: vec![1.0 / 3.0],
                ..Default::default()
            }),
        };
        let back = ConvergenceReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let csv = report.to_csv();
        assert!(csv.starts_with("name,epsilon,error,slope,theoretical,pass\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
    }

    #[test]
    fn short_ladder_rejected() {
        let cfg = StudyConfig {
            ladder: vec![0.25, 0.125],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::LadderTooShort(2))));
        assert!(StudyConfig::default().h_limited(1.0 / 32.0));
        assert!(!StudyConfig::default().h_limited(1.0 / 16.0));
    }

    #[test]
    fn poincare_ratio_of_a_single_bump() {
        let (cells, _) =
            solve_all_cells(CellGeometry::new(0.5, 8), &SolverSettings::default()).unwrap();
        let mut ratios = Vec::new();
        for eps in [0.125, 0.0625, 0.03125] {
            let g = build_perforated_grid(eps, CellGeometry::new(0.5, 8)).unwrap();
            // φ(x/ε) times a bump vanishing on the edges of the period cell at (1/2, 1/2)
            let phi = cells.phi.as_ref().unwrap();
            let k = (0.5 / eps) as usize;
            let mut u = FieldOnGrid::zeros(&g, Placement::CellCenter);
            for (id, &(i, j)) in g.cells().iter().enumerate() {
                if i / 8 == k && j / 8 == k {
                    let (yx, yy) = ((i % 8) as f64 + 0.5, (j % 8) as f64 + 0.5);
                    let b = yx * (8.0 - yx) * yy * (8.0 - yy);
                    u.values[id] = b * phi.values[cells.grid.cell_id(i % 8, j % 8).unwrap()];
                }
            }
            ratios.push(poincare_ratio(&g, &u).unwrap().unwrap());
            assert_eq!(poincare_ratio(&g, &u.scaled(0.0)).unwrap(), None);
        }
        assert!(spread(&ratios) < 1.5, "{ratios:?}");
        let lemma = lemma_report(
            &cells,
            CellGeometry::new(0.5, 8),
            &[0.125, 0.0625, 0.03125],
            4,
            3,
        )
        .unwrap();
        assert!(spread(&lemma.poincare) < 3.0, "{lemma:?}");
        assert!(spread(&lemma.average_estimate) < 3.0, "{lemma:?}");
        let zero_mean = cells.phi_j[0].clone();
        let r = average_estimate_check(&zero_mean, &cells, CellGeometry::new(0.5, 8), &[0.25])
            .unwrap()[0];
        assert!(r > 0.0);
        let constant = FieldOnGrid {
            placement: Placement::CellCenter,
            values: vec![2.0; cells.grid.num_fluid_cells()],
        };
        assert_eq!(
            average_estimate_check(&constant, &cells, CellGeometry::new(0.5, 8), &[0.25]).unwrap()
                [0],
            0.0
        );
    }
}
