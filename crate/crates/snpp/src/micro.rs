//! Time-dependent microscopic SNPP system on Ω^ε: Poisson → Stokes → Nernst–Planck
//! with lagged coupling.
//!
//! The potential is solved in its scaled form Φ̃_ε (`ε^α Φ_ε` for surface charge,
//! `ε^{α−2}(Φ_ε − Φ_D)` for a ζ-potential) and stored unscaled.

use crate::error::{Error, Result};
use crate::fv::{
    cell_to_faces, divergence, divergence_matrix, face_gradient, max_outflow_rate,
    scalar_laplacian, upwind_divergence, vector_laplacian, InterfaceBc, VelocityDofs,
};
use crate::grid::{Axis, FaceKind, FieldOnGrid, PerforatedGrid, Placement, VelocityField};
use crate::linalg::{
    Gauge, Method, SaddleSolver, SaddleStats, SolverSettings, SparseMatrix, SpdSolver,
    TripletBuilder,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcKind {
    Neumann,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub bc_kind: BcKind,
    pub sigma: f64,
    pub phi_d: f64,
    pub t_final: f64,
    pub dt: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            alpha: 2.0,
            beta: 2.0,
            gamma: 2.0,
            bc_kind: BcKind::Neumann,
            sigma: 0.0,
            phi_d: 0.0,
            t_final: 0.1,
            dt: 1e-3,
        }
    }
}

impl ScalingConfig {
    pub fn dirichlet() -> Self {
        ScalingConfig {
            beta: 1.0,
            gamma: 1.0,
            bc_kind: BcKind::Dirichlet,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(s.to_string()));
        match self.bc_kind {
            BcKind::Neumann => {
                if self.beta < self.alpha {
                    return bad("beta >= alpha required");
                }
                if self.gamma < self.alpha {
                    return bad("gamma >= alpha required");
                }
            }
            BcKind::Dirichlet => {
                if self.beta < self.alpha - 1.0 {
                    return bad("beta >= alpha - 1 required");
                }
                if self.gamma < self.alpha - 1.0 {
                    return bad("gamma >= alpha - 1 required");
                }
            }
        }
        if !(self.dt > 0.0) {
            return bad("dt > 0 required");
        }
        if !(self.t_final > 0.0) {
            return bad("t_final > 0 required");
        }
        Ok(())
    }

    /// Factor turning ∇Φ̃_ε into ∇Φ_ε.
    pub fn potential_factor(&self, eps: f64) -> f64 {
        match self.bc_kind {
            BcKind::Neumann => eps.powf(-self.alpha),
            BcKind::Dirichlet => eps.powf(2.0 - self.alpha),
        }
    }
}

/// ε-independent smooth initial concentrations:
/// `c± = base + density·cos(πy) ± ½[charge·cos(πx)(1 + ½cos(2πy)) + offset]`,
/// optionally plus `perturbation·cos(2πx)cos(2πy)` on both species.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    pub base: f64,
    pub density: f64,
    pub charge: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub perturbation: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData {
            base: 1.0,
            density: 0.2,
            charge: 0.4,
            offset: 0.0,
            perturbation: 0.0,
        }
    }
}

impl InitialData {
    pub fn symmetric() -> Self {
        InitialData {
            charge: 0.0,
            offset: 0.0,
            ..Default::default()
        }
    }

    pub fn charge_density(&self, x: f64, y: f64) -> f64 {
        self.charge * (PI * x).cos() * (1.0 + 0.5 * (2.0 * PI * y).cos()) + self.offset
    }

    fn common(&self, x: f64, y: f64) -> f64 {
        self.base
            + self.density * (PI * y).cos()
            + self.perturbation * (2.0 * PI * x).cos() * (2.0 * PI * y).cos()
    }

    pub fn c_plus(&self, x: f64, y: f64) -> f64 {
        self.common(x, y) + 0.5 * self.charge_density(x, y)
    }

    pub fn c_minus(&self, x: f64, y: f64) -> f64 {
        self.common(x, y) - 0.5 * self.charge_density(x, y)
    }

    /// Lower bound of both species (A1 requires it to be non-negative).
    pub fn lower_bound(&self) -> f64 {
        self.base
            - self.density.abs()
            - self.perturbation.abs()
            - 0.75 * self.charge.abs()
            - 0.5 * self.offset.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroState {
    pub time: f64,
    pub v: VelocityField,
    pub p: FieldOnGrid,
    /// Unscaled potential Φ_ε.
    pub phi: FieldOnGrid,
    pub c_plus: FieldOnGrid,
    pub c_minus: FieldOnGrid,
}

impl MicroState {
    /// Scaled potential Φ̃_ε.
    pub fn phi_scaled(&self, eps: f64, cfg: &ScalingConfig) -> FieldOnGrid {
        let f = cfg.potential_factor(eps);
        let shift = match cfg.bc_kind {
            BcKind::Neumann => 0.0,
            BcKind::Dirichlet => cfg.phi_d,
        };
        FieldOnGrid {
            placement: Placement::CellCenter,
            values: self.phi.values.iter().map(|v| (v - shift) / f).collect(),
        }
    }

    pub fn charge_field(&self) -> FieldOnGrid {
        self.c_plus.sub(&self.c_minus)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MicroDiagnostics {
    pub time: f64,
    pub mass: f64,
    pub charge: f64,
    /// Q(0)∏(1 − 2dt), the reaction-step bookkeeping value.
    pub charge_expected: f64,
    pub min_c: f64,
    pub max_c: f64,
    pub max_div_v: f64,
    pub mean_p: f64,
    pub mean_phi: f64,
    /// Mean removed from the Neumann Poisson data to restore compatibility.
    pub projection: f64,
    pub stokes: SaddleStats,
}

#[derive(Clone, Debug)]
pub struct MicroRun {
    pub snapshots: Vec<MicroState>,
    pub diagnostics: Vec<MicroDiagnostics>,
}

/// Options beyond the physical scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroOptions {
    pub solver: SolverSettings,
    /// Project incompatible Neumann data instead of failing.
    pub project_rhs: bool,
    /// Refresh the Stokes solve every this many steps (and always at snapshots).
    pub stokes_interval: usize,
    #[serde(default)]
    pub method: Method,
}

impl Default for MicroOptions {
    fn default() -> Self {
        MicroOptions {
            solver: SolverSettings::default(),
            project_rhs: true,
            stokes_interval: 1,
            method: Method::Direct,
        }
    }
}

/// Prebuilt operators for one micro grid.
pub struct MicroSolver<'a> {
    grid: &'a PerforatedGrid,
    cfg: ScalingConfig,
    opts: MicroOptions,
    eps: f64,
    poisson: SpdSolver,
    gamma_faces: Vec<f64>,
    dofs: VelocityDofs,
    stokes: SaddleSolver,
    diffusion: SpdSolver,
}

impl<'a> MicroSolver<'a> {
    pub fn new(grid: &'a PerforatedGrid, cfg: ScalingConfig, opts: MicroOptions) -> Result<Self> {
        cfg.validate()?;
        let eps = grid.epsilon();
        let bc = match cfg.bc_kind {
            BcKind::Neumann => InterfaceBc::Neumann,
            BcKind::Dirichlet => InterfaceBc::Dirichlet,
        };
        let gauge = if bc == InterfaceBc::Neumann {
            Gauge::ZeroMean
        } else {
            Gauge::None
        };
        let poisson = SpdSolver::new(
            &scalar_laplacian(grid, bc),
            &opts.solver.with_gauge(gauge),
            opts.method,
        )?;
        let gamma_faces = grid
            .cells()
            .iter()
            .map(|&(i, j)| grid.interface_faces_of(i, j) as f64)
            .collect();
        let dofs = VelocityDofs::new(grid);
        let a0 = vector_laplacian(grid, &dofs);
        let stokes = SaddleSolver::new(
            &scale_matrix(&a0, eps * eps),
            &divergence_matrix(grid, &dofs),
            &opts.solver,
            opts.method,
        )?;
        let lap = scalar_laplacian(grid, InterfaceBc::Neumann);
        let diffusion = SpdSolver::new(
            &identity_plus(&lap, cfg.dt),
            &diffusion_settings(&opts.solver),
            opts.method,
        )?;
        Ok(MicroSolver {
            grid,
            cfg,
            opts,
            eps,
            poisson,
            gamma_faces,
            dofs,
            stokes,
            diffusion,
        })
    }

    pub fn grid(&self) -> &PerforatedGrid {
        self.grid
    }

    /// Scaled potential Φ̃_ε from the current concentrations, with the projection magnitude.
    pub fn solve_poisson_scaled(&self, c_plus: &[f64], c_minus: &[f64]) -> Result<(Vec<f64>, f64)> {
        let eps = self.eps;
        let h = self.grid.h();
        let n = c_plus.len();
        let mut b: Vec<f64> = (0..n).map(|k| c_plus[k] - c_minus[k]).collect();
        let mut projection = 0.0;
        match self.cfg.bc_kind {
            BcKind::Neumann => {
                let src = eps * self.cfg.sigma / h;
                for k in 0..n {
                    b[k] += src * self.gamma_faces[k];
                }
                let sum: f64 = b.iter().sum();
                let l1: f64 = b.iter().map(|v| v.abs()).sum();
                if sum.abs() > 1e-9 * l1 && !self.opts.project_rhs {
                    return Err(Error::IncompatibleRHS {
                        mean: sum / n as f64,
                    });
                }
                projection = sum / n as f64;
                b.iter_mut().for_each(|v| *v -= projection);
            }
            BcKind::Dirichlet => b.iter_mut().for_each(|v| *v /= eps * eps),
        }
        Ok((self.poisson.solve(&b)?, projection))
    }

    /// Unscaled potential field from Φ̃_ε.
    pub fn unscale(&self, phi_tilde: &[f64]) -> FieldOnGrid {
        let f = self.cfg.potential_factor(self.eps);
        let shift = if self.cfg.bc_kind == BcKind::Dirichlet {
            self.cfg.phi_d
        } else {
            0.0
        };
        FieldOnGrid {
            placement: Placement::CellCenter,
            values: phi_tilde.iter().map(|v| shift + f * v).collect(),
        }
    }

    /// Stokes with viscosity ε² and forcing −ε^β q ∇Φ_ε on interior faces.
    pub fn solve_stokes(
        &self,
        c_plus: &[f64],
        c_minus: &[f64],
        phi_tilde: &[f64],
    ) -> Result<(VelocityField, FieldOnGrid, SaddleStats)> {
        let grid = self.grid;
        let q = FieldOnGrid {
            placement: Placement::CellCenter,
            values: c_plus.iter().zip(c_minus).map(|(a, b)| a - b).collect(),
        };
        let phi = FieldOnGrid {
            placement: Placement::CellCenter,
            values: phi_tilde.to_vec(),
        };
        let qf = cell_to_faces(grid, &q);
        let gf = face_gradient(grid, &phi);
        let coef = -self.eps.powf(self.cfg.beta) * self.cfg.potential_factor(self.eps);
        let f: Vec<f64> = self
            .dofs
            .dofs
            .iter()
            .map(|&(axis, id)| coef * qf.component(axis).values[id] * gf.component(axis).values[id])
            .collect();
        let g = vec![0.0; grid.num_fluid_cells()];
        let (u, qp, stats) = self.stokes.solve(&f, &g, None)?;
        let p = FieldOnGrid {
            placement: Placement::CellCenter,
            values: qp.iter().map(|v| -v).collect(),
        };
        Ok((self.dofs.to_field(grid, &u), p, stats))
    }

    /// Drift velocities `v ∓ ε^γ ∇Φ_ε` on faces for (c⁺, c⁻).
    pub fn drift_velocities(
        &self,
        v: &VelocityField,
        phi_tilde: &[f64],
    ) -> (VelocityField, VelocityField) {
        let phi = FieldOnGrid {
            placement: Placement::CellCenter,
            values: phi_tilde.to_vec(),
        };
        let g = face_gradient(self.grid, &phi);
        let k = self.eps.powf(self.cfg.gamma) * self.cfg.potential_factor(self.eps);
        let mut plus = v.clone();
        plus.axpy(-k, &g);
        let mut minus = v.clone();
        minus.axpy(k, &g);
        (plus, minus)
    }

    /// One step: explicit upwind drift and reaction, implicit diffusion.
    pub fn advance_concentrations(
        &self,
        c_plus: &[f64],
        c_minus: &[f64],
        v: &VelocityField,
        phi_tilde: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (ap, am) = self.drift_velocities(v, phi_tilde);
        advance_species(
            self.grid,
            &self.diffusion,
            self.cfg.dt,
            c_plus,
            c_minus,
            &ap,
            &am,
            1.0,
        )
    }
}

/// Backward-Euler diffusion with explicit upwind drift and reaction `∓(c⁺ − c⁻)`.
/// `capacity` multiplies the time derivative and the reaction (|Y_l| for the macro
/// system) and `diffusion` factors `capacity·I + dt·L`.
#[allow(clippy::too_many_arguments)]
pub fn advance_species(
    grid: &PerforatedGrid,
    diffusion: &SpdSolver,
    dt: f64,
    c_plus: &[f64],
    c_minus: &[f64],
    a_plus: &VelocityField,
    a_minus: &VelocityField,
    capacity: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rate = max_outflow_rate(grid, a_plus).max(max_outflow_rate(grid, a_minus)) / capacity + 1.0;
    if dt * rate > 1.0 {
        return Err(Error::CFLViolated {
            dt,
            limit: 1.0 / rate,
        });
    }
    let n = c_plus.len();
    let mut adv = vec![0.0; n];
    let mut out = Vec::with_capacity(2);
    for (c, a, sign) in [(c_plus, a_plus, 1.0), (c_minus, a_minus, -1.0)] {
        upwind_divergence(grid, a, c, &mut adv);
        let rhs: Vec<f64> = (0..n)
            .map(|k| {
                let r = -sign * (c_plus[k] - c_minus[k]);
                capacity * c[k] - dt * adv[k] + dt * capacity * r
            })
            .collect();
        let guess: Vec<f64> = rhs.iter().map(|v| v / capacity).collect();
        out.push(diffusion.solve_from(&rhs, Some(&guess))?);
    }
    let cm = out.pop().unwrap();
    let cp = out.pop().unwrap();
    Ok((cp, cm))
}

/// Settings for the diffusion solves. Unpreconditioned CG started from the scaled
/// right-hand side keeps the residual orthogonal to constants, so the iterative path
/// preserves the discrete mass to round-off as well.
pub fn diffusion_settings(s: &SolverSettings) -> SolverSettings {
    SolverSettings {
        jacobi: false,
        gauge: Gauge::None,
        relative_tolerance: s.relative_tolerance.min(1e-12),
        ..*s
    }
}

pub fn scale_matrix(a: &SparseMatrix, s: f64) -> SparseMatrix {
    let mut t = TripletBuilder::new(a.rows(), a.cols());
    for i in 0..a.rows() {
        for (j, v) in a.row(i) {
            t.push(i, j, s * v);
        }
    }
    if a.is_symmetric() {
        t.build_symmetric()
    } else {
        t.build()
    }
}

/// `I + dt·L`.
pub fn identity_plus(l: &SparseMatrix, dt: f64) -> SparseMatrix {
    capacity_plus(l, 1.0, dt)
}

/// `capacity·I + dt·L`.
pub fn capacity_plus(l: &SparseMatrix, capacity: f64, dt: f64) -> SparseMatrix {
    let mut t = TripletBuilder::new(l.rows(), l.cols());
    for i in 0..l.rows() {
        t.push(i, i, capacity);
        for (j, v) in l.row(i) {
            t.push(i, j, dt * v);
        }
    }
    t.build_symmetric()
}

/// Snapshot step indices for requested times.
pub fn snapshot_steps(times: &[f64], dt: f64, t_final: f64) -> Result<Vec<usize>> {
    let mut steps = Vec::with_capacity(times.len());
    for &t in times {
        let k = (t / dt).round();
        if (k * dt - t).abs() > 1e-9 * t.max(1.0) || t < 0.0 || t > t_final * (1.0 + 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "snapshot time {t} is not a step multiple within [0, T]"
            )));
        }
        steps.push(k as usize);
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "snapshot times must increase strictly".into(),
        ));
    }
    Ok(steps)
}

/// Evenly spaced snapshot times `0, T/(m−1), …, T`.
pub fn uniform_times(t_final: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![t_final];
    }
    (0..count)
        .map(|k| t_final * k as f64 / (count - 1) as f64)
        .collect()
}

pub fn initial_fields(grid: &PerforatedGrid, init: &InitialData) -> (FieldOnGrid, FieldOnGrid) {
    (
        FieldOnGrid::from_fn(grid, Placement::CellCenter, |x, y| init.c_plus(x, y)),
        FieldOnGrid::from_fn(grid, Placement::CellCenter, |x, y| init.c_minus(x, y)),
    )
}

/// Full micro run with invariant checks at every snapshot.
pub fn run_micro(
    cfg: &ScalingConfig,
    grid: &PerforatedGrid,
    init: &InitialData,
    snapshot_times: &[f64],
    opts: &MicroOptions,
) -> Result<MicroRun> {
    cfg.validate()?;
    if init.lower_bound() < 0.0 {
        return Err(Error::InvalidConfig(
            "initial concentrations must be non-negative".into(),
        ));
    }
    let steps = snapshot_steps(snapshot_times, cfg.dt, cfg.t_final)?;
    let solver = MicroSolver::new(grid, *cfg, *opts)?;
    let (cp0, cm0) = initial_fields(grid, init);
    let mut cp = cp0.values;
    let mut cm = cm0.values;
    let cell_area = grid.h() * grid.h();
    let mass0: f64 = cp.iter().chain(&cm).sum::<f64>() * cell_area;
    let q0: f64 = cp.iter().zip(&cm).map(|(a, b)| a - b).sum::<f64>() * cell_area;
    if cfg.bc_kind == BcKind::Neumann && !opts.project_rhs {
        let gamma = grid.interface_measure();
        if (q0 + grid.epsilon() * cfg.sigma * gamma).abs() > 1e-9 * (q0.abs() + mass0) {
            return Err(Error::IncompatibleRHS {
                mean: q0 + grid.epsilon() * cfg.sigma * gamma,
            });
        }
    }
    let last = *steps.last().unwrap_or(&0);
    let mut snapshots = Vec::with_capacity(steps.len());
    let mut diagnostics = Vec::with_capacity(steps.len());
    let mut v = VelocityField::zeros(grid);
    let mut p = FieldOnGrid::zeros(grid, Placement::CellCenter);
    let mut stats = SaddleStats::default();
    let mut charge_expected = q0;
    let mut next_snap = 0;
    let interval = opts.stokes_interval.max(1);
    for step in 0..=last {
        let (phi_t, projection) = solver.solve_poisson_scaled(&cp, &cm)?;
        let is_snap = steps.get(next_snap) == Some(&step);
        if step % interval == 0 || is_snap {
            let r = solver.solve_stokes(&cp, &cm, &phi_t)?;
            v = r.0;
            p = r.1;
            stats = r.2;
        }
        if is_snap {
            let state = MicroState {
                time: step as f64 * cfg.dt,
                v: v.clone(),
                p: p.clone(),
                phi: solver.unscale(&phi_t),
                c_plus: FieldOnGrid {
                    placement: Placement::CellCenter,
                    values: cp.clone(),
                },
                c_minus: FieldOnGrid {
                    placement: Placement::CellCenter,
                    values: cm.clone(),
                },
            };
            let d =
                micro_diagnostics(grid, cfg, &state, mass0, charge_expected, projection, stats)?;
            snapshots.push(state);
            diagnostics.push(d);
            next_snap += 1;
        }
        if step < last {
            let (a, b) = solver.advance_concentrations(&cp, &cm, &v, &phi_t)?;
            cp = a;
            cm = b;
            charge_expected *= 1.0 - 2.0 * cfg.dt;
        }
    }
    Ok(MicroRun {
        snapshots,
        diagnostics,
    })
}

fn micro_diagnostics(
    grid: &PerforatedGrid,
    cfg: &ScalingConfig,
    s: &MicroState,
    mass0: f64,
    charge_expected: f64,
    projection: f64,
    stokes: SaddleStats,
) -> Result<MicroDiagnostics> {
    let area = grid.h() * grid.h();
    let mass = (s.c_plus.values.iter().sum::<f64>() + s.c_minus.values.iter().sum::<f64>()) * area;
    let charge = s.charge_field().values.iter().sum::<f64>() * area;
    let all = s.c_plus.values.iter().chain(&s.c_minus.values);
    let min_c = all.clone().copied().fold(f64::INFINITY, f64::min);
    let max_c = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let d = MicroDiagnostics {
        time: s.time,
        mass,
        charge,
        charge_expected,
        min_c,
        max_c,
        max_div_v: divergence(grid, &s.v).max_abs(),
        mean_p: s.p.mean(),
        mean_phi: if cfg.bc_kind == BcKind::Neumann {
            s.phi.mean()
        } else {
            0.0
        },
        projection,
        stokes,
    };
    if min_c < -1e-12 {
        return Err(Error::InvariantViolated(format!(
            "negative concentration {min_c:.3e} at t = {}",
            s.time
        )));
    }
    if (mass - mass0).abs() > 1e-10 * mass0 {
        return Err(Error::InvariantViolated(format!(
            "mass drift {:.3e} at t = {}",
            (mass - mass0) / mass0,
            s.time
        )));
    }
    Ok(d)
}

/// Faces on which the velocity is prescribed zero (Γ ∪ ∂Ω), for checks.
pub fn no_slip_faces(grid: &PerforatedGrid) -> usize {
    [Axis::X, Axis::Y]
        .iter()
        .map(|&a| {
            grid.faces(a)
                .kinds
                .iter()
                .filter(|k| **k != FaceKind::InteriorFluid)
                .count()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_perforated_grid, CellGeometry};

    fn grid() -> PerforatedGrid {
        build_perforated_grid(0.25, CellGeometry::new(0.5, 8)).unwrap()
    }

    #[test]
    fn admissibility() {
        let mut c = ScalingConfig::default();
        assert!(c.validate().is_ok());
        c.gamma = 1.0;
        assert_eq!(
            c.validate(),
            Err(Error::InvalidConfig("gamma >= alpha required".into()))
        );
        assert!(ScalingConfig::dirichlet().validate().is_ok());
    }

    #[test]
    fn symmetric_data_gives_zero_potential_and_flow() {
        let g = grid();
        let cfg = ScalingConfig {
            t_final: 0.01,
            ..Default::default()
        };
        let run = run_micro(
            &cfg,
            &g,
            &InitialData::symmetric(),
            &[0.0, 0.01],
            &MicroOptions::default(),
        )
        .unwrap();
        for s in &run.snapshots {
            assert_eq!(s.phi.max_abs(), 0.0);
            assert_eq!(s.v.max_abs(), 0.0);
            assert_eq!(s.c_plus, s.c_minus);
        }
    }

    #[test]
    fn dirichlet_constant_potential() {
        let g = grid();
        let cfg = ScalingConfig {
            phi_d: 1.0,
            ..ScalingConfig::dirichlet()
        };
        let s = MicroSolver::new(&g, cfg, MicroOptions::default()).unwrap();
        let c = vec![1.0; g.num_fluid_cells()];
        let (pt, _) = s.solve_poisson_scaled(&c, &c).unwrap();
        assert!(s
            .unscale(&pt)
            .values
            .iter()
            .all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn steady_state_unchanged() {
        let g = grid();
        let s = MicroSolver::new(&g, ScalingConfig::default(), MicroOptions::default()).unwrap();
        let c = vec![0.7; g.num_fluid_cells()];
        let zero = vec![0.0; c.len()];
        let (a, b) = s
            .advance_concentrations(&c, &c, &VelocityField::zeros(&g), &zero)
            .unwrap();
        assert!(a.iter().chain(&b).all(|v| (v - 0.7).abs() < 1e-14));
    }

    #[test]
    fn one_step_conserves_mass_and_decays_charge() {
        let g = grid();
        let cfg = ScalingConfig::default();
        let s = MicroSolver::new(&g, cfg, MicroOptions::default()).unwrap();
        let init = InitialData {
            offset: 0.1,
            ..Default::default()
        };
        let (cp, cm) = initial_fields(&g, &init);
        let (pt, _) = s.solve_poisson_scaled(&cp.values, &cm.values).unwrap();
        let (v, _, _) = s.solve_stokes(&cp.values, &cm.values, &pt).unwrap();
        let (a, b) = s
            .advance_concentrations(&cp.values, &cm.values, &v, &pt)
            .unwrap();
        let sum = |x: &[f64]| x.iter().sum::<f64>();
        let m0 = sum(&cp.values) + sum(&cm.values);
        assert!(((sum(&a) + sum(&b)) - m0).abs() < 1e-12 * m0);
        let q0 = sum(&cp.values) - sum(&cm.values);
        let q1 = sum(&a) - sum(&b);
        assert!((q1 - q0 * (1.0 - 2.0 * cfg.dt)).abs() < 1e-12 * m0);
    }

    #[test]
    fn cfl_violation_detected() {
        let g = grid();
        let cfg = ScalingConfig {
            dt: 0.5,
            ..Default::default()
        };
        let s = MicroSolver::new(&g, cfg, MicroOptions::default()).unwrap();
        let c = vec![1.0; g.num_fluid_cells()];
        let zero = vec![0.0; c.len()];
        let mut v = VelocityField::zeros(&g);
        v.x.values.iter_mut().for_each(|x| *x = 10.0);
        assert!(matches!(
            s.advance_concentrations(&c, &c, &v, &zero),
            Err(Error::CFLViolated { .. })
        ));
    }

    #[test]
    fn snapshot_times_must_align() {
        assert!(snapshot_steps(&[0.0, 0.0105], 1e-3, 0.1).is_err());
        assert_eq!(
            snapshot_steps(&uniform_times(0.1, 11), 1e-3, 0.1).unwrap()[10],
            100
        );
    }
}
