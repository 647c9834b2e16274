//! Upscaled systems on the unperforated unit square: effective Poisson (or the algebraic
//! Dirichlet potential), Darcy flow with tensor 𝕂, and Nernst–Planck transport with 𝔻.

use crate::cell::{EffectiveTensors, Tensor};
use crate::error::{Error, Result};
use crate::fv::{divergence, TensorDiffusion};
use crate::grid::{Axis, FaceKind, FieldOnGrid, PerforatedGrid, Placement, VelocityField};
use crate::linalg::{Gauge, Method, SolverSettings, SpdSolver};
use crate::micro::{
    advance_species, capacity_plus, diffusion_settings, snapshot_steps, BcKind, InitialData,
    ScalingConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub tensors: EffectiveTensors,
    pub bc_kind: BcKind,
    pub alpha: f64,
    /// β = α (Neumann): electric forcing in Darcy's law.
    pub beta_equals_alpha: bool,
    /// γ = α (Neumann): electric drift in the transport equations.
    pub gamma_equals_alpha: bool,
    /// γ = α − 1 (Dirichlet): selects the first-order concentration corrector.
    pub gamma_equals_alpha_minus_1: bool,
    /// σ̄ = σ|Γ|.
    pub sigma_bar: f64,
    pub phi_d: f64,
    pub t_final: f64,
    pub dt: f64,
    /// Cells per side of the macro grid.
    pub resolution: usize,
    pub project_rhs: bool,
    pub solver: SolverSettings,
    #[serde(default)]
    pub method: Method,
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

impl MacroConfig {
    /// Regime flags and σ̄ derived from a micro scaling; `hole_side` gives |Γ| = 4·hole_side.
    pub fn from_scaling(
        s: &ScalingConfig,
        tensors: EffectiveTensors,
        hole_side: f64,
        resolution: usize,
    ) -> Self {
        MacroConfig {
            tensors,
            bc_kind: s.bc_kind,
            alpha: s.alpha,
            beta_equals_alpha: s.bc_kind == BcKind::Neumann && same(s.beta, s.alpha),
            gamma_equals_alpha: s.bc_kind == BcKind::Neumann && same(s.gamma, s.alpha),
            gamma_equals_alpha_minus_1: s.bc_kind == BcKind::Dirichlet
                && same(s.gamma, s.alpha - 1.0),
            sigma_bar: s.sigma * 4.0 * hole_side,
            phi_d: s.phi_d,
            t_final: s.t_final,
            dt: s.dt,
            resolution,
            project_rhs: true,
            solver: SolverSettings::default(),
            method: Method::Direct,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::InvalidConfig(
                "macro resolution >= 2 required".into(),
            ));
        }
        if !(self.dt > 0.0) || !(self.t_final > 0.0) {
            return Err(Error::InvalidConfig(
                "dt > 0 and t_final > 0 required".into(),
            ));
        }
        if self.bc_kind == BcKind::Dirichlet && (self.beta_equals_alpha || self.gamma_equals_alpha)
        {
            return Err(Error::RegimeMismatch(
                "Neumann regime flags set for a Dirichlet run".into(),
            ));
        }
        if self.bc_kind == BcKind::Neumann && self.gamma_equals_alpha_minus_1 {
            return Err(Error::RegimeMismatch(
                "Dirichlet regime flag set for a Neumann run".into(),
            ));
        }
        self.solver.validate()
    }

    fn porosity(&self) -> f64 {
        self.tensors.porosity
    }

    pub fn regime(&self) -> Regime {
        Regime {
            bc_kind: self.bc_kind,
            beta_equals_alpha: self.beta_equals_alpha,
            gamma_equals_alpha: self.gamma_equals_alpha,
            gamma_equals_alpha_minus_1: self.gamma_equals_alpha_minus_1,
        }
    }
}

/// Which coupling terms survive the limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub bc_kind: BcKind,
    pub beta_equals_alpha: bool,
    pub gamma_equals_alpha: bool,
    pub gamma_equals_alpha_minus_1: bool,
}

impl Regime {
    pub fn neumann(beta_equals_alpha: bool, gamma_equals_alpha: bool) -> Self {
        Regime {
            bc_kind: BcKind::Neumann,
            beta_equals_alpha,
            gamma_equals_alpha,
            gamma_equals_alpha_minus_1: false,
        }
    }

    pub fn dirichlet(gamma_equals_alpha_minus_1: bool) -> Self {
        Regime {
            bc_kind: BcKind::Dirichlet,
            beta_equals_alpha: false,
            gamma_equals_alpha: false,
            gamma_equals_alpha_minus_1,
        }
    }

    /// Electric forcing `q∇Φ̃₀` in Darcy's law.
    pub fn electric_darcy(&self) -> bool {
        self.bc_kind == BcKind::Neumann && self.beta_equals_alpha
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub time: f64,
    pub v_bar: VelocityField,
    pub p0: FieldOnGrid,
    /// Φ̃₀ (Neumann) or the cell average Φ̄̃₀ (Dirichlet).
    #[serde(rename = "Phi0")]
    pub phi0: FieldOnGrid,
    pub c0_plus: FieldOnGrid,
    pub c0_minus: FieldOnGrid,
}

impl MacroState {
    pub fn charge_field(&self) -> FieldOnGrid {
        self.c0_plus.sub(&self.c0_minus)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroDiagnostics {
    pub time: f64,
    pub mass: f64,
    pub charge: f64,
    pub charge_expected: f64,
    pub min_c: f64,
    pub max_c: f64,
    pub max_div_v: f64,
    pub mean_p: f64,
    pub mean_phi: f64,
    pub projection: f64,
}

#[derive(Clone, Debug)]
pub struct MacroRun {
    pub grid: PerforatedGrid,
    pub regime: Regime,
    pub snapshots: Vec<MacroState>,
    pub diagnostics: Vec<MacroDiagnostics>,
}

impl MacroRun {
    pub fn snapshot(&self, k: usize) -> MacroSnapshot<'_> {
        MacroSnapshot {
            grid: &self.grid,
            state: &self.snapshots[k],
            regime: self.regime,
        }
    }
}

/// One macro state together with the grid and regime it was computed on.
#[derive(Clone, Copy, Debug)]
pub struct MacroSnapshot<'a> {
    pub grid: &'a PerforatedGrid,
    pub state: &'a MacroState,
    pub regime: Regime,
}

/// Prebuilt macro operators.
pub struct MacroSolver {
    grid: PerforatedGrid,
    cfg: MacroConfig,
    d_op: TensorDiffusion,
    k_op: Option<TensorDiffusion>,
    poisson: Option<SpdSolver>,
    darcy: Option<SpdSolver>,
    transport: SpdSolver,
}

impl MacroSolver {
    pub fn new(cfg: &MacroConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = PerforatedGrid::unperforated(cfg.resolution);
        let d_op = TensorDiffusion::new(&grid, cfg.tensors.d);
        let k_op = cfg.tensors.k.map(|k| TensorDiffusion::new(&grid, k));
        let gauged = cfg.solver.with_gauge(Gauge::ZeroMean);
        let poisson = match cfg.bc_kind {
            BcKind::Neumann => Some(SpdSolver::new(d_op.matrix(), &gauged, cfg.method)?),
            BcKind::Dirichlet => None,
        };
        let darcy = k_op
            .as_ref()
            .map(|k| SpdSolver::new(k.matrix(), &gauged, cfg.method))
            .transpose()?;
        let transport = SpdSolver::new(
            &capacity_plus(d_op.matrix(), cfg.porosity(), cfg.dt),
            &diffusion_settings(&cfg.solver),
            cfg.method,
        )?;
        Ok(MacroSolver {
            grid,
            cfg: cfg.clone(),
            d_op,
            k_op,
            poisson,
            darcy,
            transport,
        })
    }

    pub fn grid(&self) -> &PerforatedGrid {
        &self.grid
    }

    /// Φ̃₀ from `−∇·(𝔻∇Φ̃₀) = σ̄ + |Y_l|(c₀⁺ − c₀⁻)`, zero mean; returns the projection.
    pub fn solve_poisson_neumann(
        &self,
        c_plus: &[f64],
        c_minus: &[f64],
    ) -> Result<(Vec<f64>, f64)> {
        let solver = self
            .poisson
            .as_ref()
            .ok_or_else(|| Error::RegimeMismatch("no Neumann potential".into()))?;
        let (b, projection) = neumann_source(
            c_plus,
            c_minus,
            self.cfg.sigma_bar,
            self.cfg.porosity(),
            self.cfg.project_rhs,
        )?;
        Ok((solver.solve(&b)?, projection))
    }

    /// Darcy velocity and pressure for the given electric forcing potential (`None` drops it).
    pub fn solve_darcy(
        &self,
        c_plus: &[f64],
        c_minus: &[f64],
        phi0: Option<&[f64]>,
    ) -> Result<(VelocityField, FieldOnGrid)> {
        let grid = &self.grid;
        let zero = || {
            (
                VelocityField::zeros(grid),
                FieldOnGrid::zeros(grid, Placement::CellCenter),
            )
        };
        let (Some(k_op), Some(darcy), Some(phi)) = (&self.k_op, &self.darcy, phi0) else {
            // Without forcing the Darcy system is homogeneous.
            return if self.k_op.is_none() && phi0.is_some() {
                Err(Error::DegenerateGeometry(
                    "permeability undefined without a hole".into(),
                ))
            } else {
                Ok(zero())
            };
        };
        let q: Vec<f64> = c_plus.iter().zip(c_minus).map(|(a, b)| a - b).collect();
        let f = electric_forcing(grid, &k_op.tensor(), &q, phi);
        darcy_projection(grid, k_op, darcy, &f)
    }

    /// Drift velocities `v̄₀ ∓ 𝔻∇Φ̃₀` (or `v̄₀` without electric drift).
    pub fn drift_velocities(
        &self,
        v_bar: &VelocityField,
        phi0: Option<&[f64]>,
    ) -> (VelocityField, VelocityField) {
        match phi0 {
            Some(phi) if self.cfg.gamma_equals_alpha => {
                let e = self.d_op.fluxes(&self.grid, phi);
                let mut plus = v_bar.clone();
                plus.axpy(-1.0, &e);
                let mut minus = v_bar.clone();
                minus.axpy(1.0, &e);
                (plus, minus)
            }
            _ => (v_bar.clone(), v_bar.clone()),
        }
    }

    pub fn advance(
        &self,
        c_plus: &[f64],
        c_minus: &[f64],
        v_bar: &VelocityField,
        phi0: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (ap, am) = self.drift_velocities(v_bar, phi0);
        advance_species(
            &self.grid,
            &self.transport,
            self.cfg.dt,
            c_plus,
            c_minus,
            &ap,
            &am,
            self.cfg.porosity(),
        )
    }
}

/// `σ̄ + |Y_l| q`, checked or projected onto zero mean.
fn neumann_source(
    c_plus: &[f64],
    c_minus: &[f64],
    sigma_bar: f64,
    porosity: f64,
    project: bool,
) -> Result<(Vec<f64>, f64)> {
    let n = c_plus.len();
    let mut b: Vec<f64> = (0..n)
        .map(|k| sigma_bar + porosity * (c_plus[k] - c_minus[k]))
        .collect();
    let sum: f64 = b.iter().sum();
    let l1: f64 = b.iter().map(|v| v.abs()).sum();
    if sum.abs() > 1e-9 * l1 && !project {
        return Err(Error::IncompatibleRHS {
            mean: sum / n as f64,
        });
    }
    let projection = sum / n as f64;
    b.iter_mut().for_each(|v| *v -= projection);
    Ok((b, projection))
}

/// Cell-centred gradient: central differences inside, one-sided second order at ∂Ω.
pub fn cell_gradient(grid: &PerforatedGrid, f: &[f64]) -> [Vec<f64>; 2] {
    let n = grid.n();
    let h = grid.h();
    let at = |i: usize, j: usize| f[j * n + i];
    let d = |get: &dyn Fn(usize) -> f64, k: usize| -> f64 {
        if n < 3 {
            if n == 1 {
                return 0.0;
            }
            return (get(1) - get(0)) / h;
        }
        if k == 0 {
            (-3.0 * get(0) + 4.0 * get(1) - get(2)) / (2.0 * h)
        } else if k == n - 1 {
            (3.0 * get(n - 1) - 4.0 * get(n - 2) + get(n - 3)) / (2.0 * h)
        } else {
            (get(k + 1) - get(k - 1)) / (2.0 * h)
        }
    };
    let mut gx = vec![0.0; n * n];
    let mut gy = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            gx[j * n + i] = d(&|k| at(k, j), i);
            gy[j * n + i] = d(&|k| at(i, k), j);
        }
    }
    [gx, gy]
}

/// Face values of `F = −𝕂 q ∇Φ̃₀` on interior faces (zero on ∂Ω).
fn electric_forcing(grid: &PerforatedGrid, k: &Tensor, q: &[f64], phi: &[f64]) -> VelocityField {
    let n = grid.n();
    let h = grid.h();
    let cg = cell_gradient(grid, phi);
    let mut f = VelocityField::zeros(grid);
    for axis in [Axis::X, Axis::Y] {
        let (a, b) = match axis {
            Axis::X => (0, 1),
            Axis::Y => (1, 0),
        };
        let fs = grid.faces(axis).clone();
        let out = f.component_mut(axis);
        for (id, &(i, j)) in fs.faces.iter().enumerate() {
            if fs.kinds[id] != FaceKind::InteriorFluid {
                continue;
            }
            let (lo, hi) = grid.face_cells(axis, i, j);
            let (lo, hi) = (lo.unwrap(), hi.unwrap());
            let (l, r) = (lo.1 * n + lo.0, hi.1 * n + hi.0);
            let normal = (phi[r] - phi[l]) / h;
            let tangential = 0.5 * (cg[b][l] + cg[b][r]);
            let qf = 0.5 * (q[l] + q[r]);
            out.values[id] = -qf * (k[a][a] * normal + k[a][b] * tangential);
        }
    }
    f
}

/// Helmholtz-type projection: `v = F − 𝕂∇p` with `∇·v = 0` and `v·n = 0`.
fn darcy_projection(
    grid: &PerforatedGrid,
    k_op: &TensorDiffusion,
    solver: &SpdSolver,
    f: &VelocityField,
) -> Result<(VelocityField, FieldOnGrid)> {
    let div_f = divergence(grid, f);
    let rhs: Vec<f64> = div_f.values.iter().map(|v| -v).collect();
    let p = solver.solve(&rhs)?;
    let mut v = f.clone();
    v.axpy(-1.0, &k_op.fluxes(grid, &p));
    Ok((
        v,
        FieldOnGrid {
            placement: Placement::CellCenter,
            values: p,
        },
    ))
}

/// `Φ̄̃₀ = (∫φ dy)(c₀⁺ − c₀⁻)`.
pub fn solve_macro_potential_dirichlet(
    c_plus: &FieldOnGrid,
    c_minus: &FieldOnGrid,
    tensors: &EffectiveTensors,
) -> Result<FieldOnGrid> {
    let integral = tensors.phi_integral()?;
    Ok(c_plus.sub(c_minus).scaled(integral))
}

/// Cell average of the physical potential for α = 2: `Φ̄̃₀ + |Y_l|Φ_D`.
pub fn averaged_physical_potential(
    phi_bar: &FieldOnGrid,
    porosity: f64,
    phi_d: f64,
) -> FieldOnGrid {
    FieldOnGrid {
        placement: phi_bar.placement,
        values: phi_bar
            .values
            .iter()
            .map(|v| v + porosity * phi_d)
            .collect(),
    }
}

/// Free-standing Neumann macro Poisson solve.
pub fn solve_macro_poisson_neumann(
    grid: &PerforatedGrid,
    c_plus: &FieldOnGrid,
    c_minus: &FieldOnGrid,
    tensors: &EffectiveTensors,
    sigma_bar: f64,
    project: bool,
    settings: &SolverSettings,
) -> Result<FieldOnGrid> {
    let op = TensorDiffusion::new(grid, tensors.d);
    let (b, _) = neumann_source(
        &c_plus.values,
        &c_minus.values,
        sigma_bar,
        tensors.porosity,
        project,
    )?;
    let x = SpdSolver::new(
        op.matrix(),
        &settings.with_gauge(Gauge::ZeroMean),
        Method::Direct,
    )?
    .solve(&b)?;
    Ok(FieldOnGrid {
        placement: Placement::CellCenter,
        values: x,
    })
}

/// Free-standing Darcy solve for a given face forcing `F`.
pub fn solve_macro_darcy(
    grid: &PerforatedGrid,
    k: Tensor,
    forcing: &VelocityField,
    settings: &SolverSettings,
) -> Result<(VelocityField, FieldOnGrid)> {
    let op = TensorDiffusion::new(grid, k);
    let solver = SpdSolver::new(
        op.matrix(),
        &settings.with_gauge(Gauge::ZeroMean),
        Method::Direct,
    )?;
    let mut f = forcing.clone();
    zero_boundary_faces(grid, &mut f);
    darcy_projection(grid, &op, &solver, &f)
}

fn zero_boundary_faces(grid: &PerforatedGrid, f: &mut VelocityField) {
    for axis in [Axis::X, Axis::Y] {
        let kinds = grid.faces(axis).kinds.clone();
        for (v, k) in f.component_mut(axis).values.iter_mut().zip(kinds) {
            if k != FaceKind::InteriorFluid {
                *v = 0.0;
            }
        }
    }
}

/// Macro time loop: potential → Darcy → transport, snapshots at the requested times.
pub fn run_macro(
    cfg: &MacroConfig,
    init: &InitialData,
    snapshot_times: &[f64],
) -> Result<MacroRun> {
    let solver = MacroSolver::new(cfg)?;
    let grid = solver.grid.clone();
    let steps = snapshot_steps(snapshot_times, cfg.dt, cfg.t_final)?;
    let mut cp =
        FieldOnGrid::from_fn(&grid, Placement::CellCenter, |x, y| init.c_plus(x, y)).values;
    let mut cm =
        FieldOnGrid::from_fn(&grid, Placement::CellCenter, |x, y| init.c_minus(x, y)).values;
    let area = grid.h() * grid.h();
    let mass0 = (cp.iter().sum::<f64>() + cm.iter().sum::<f64>()) * area;
    let q0 = (cp.iter().sum::<f64>() - cm.iter().sum::<f64>()) * area;
    if cfg.bc_kind == BcKind::Neumann && !cfg.project_rhs {
        let imbalance = cfg.sigma_bar + cfg.porosity() * q0;
        if imbalance.abs() > 1e-9 * (cfg.sigma_bar.abs() + cfg.porosity() * mass0) {
            return Err(Error::IncompatibleRHS { mean: imbalance });
        }
    }
    let last = *steps.last().unwrap_or(&0);
    let mut snapshots = Vec::with_capacity(steps.len());
    let mut diagnostics = Vec::with_capacity(steps.len());
    let mut charge_expected = q0;
    let mut next = 0;
    for step in 0..=last {
        let (phi, projection, forcing) = match cfg.bc_kind {
            BcKind::Neumann => {
                let (phi, proj) = solver.solve_poisson_neumann(&cp, &cm)?;
                (phi, proj, true)
            }
            BcKind::Dirichlet => {
                let integral = cfg.tensors.phi_integral()?;
                (
                    cp.iter()
                        .zip(&cm)
                        .map(|(a, b)| integral * (a - b))
                        .collect(),
                    0.0,
                    false,
                )
            }
        };
        let electric = (forcing && cfg.beta_equals_alpha).then_some(phi.as_slice());
        let (v_bar, p0) = solver.solve_darcy(&cp, &cm, electric)?;
        if steps.get(next) == Some(&step) {
            let state = MacroState {
                time: step as f64 * cfg.dt,
                v_bar: v_bar.clone(),
                p0,
                phi0: FieldOnGrid {
                    placement: Placement::CellCenter,
                    values: phi.clone(),
                },
                c0_plus: FieldOnGrid {
                    placement: Placement::CellCenter,
                    values: cp.clone(),
                },
                c0_minus: FieldOnGrid {
                    placement: Placement::CellCenter,
                    values: cm.clone(),
                },
            };
            diagnostics.push(macro_diagnostics(
                &grid,
                cfg,
                &state,
                mass0,
                charge_expected,
                projection,
            )?);
            snapshots.push(state);
            next += 1;
        }
        if step < last {
            let drift = (cfg.bc_kind == BcKind::Neumann).then_some(phi.as_slice());
            let (a, b) = solver.advance(&cp, &cm, &v_bar, drift)?;
            cp = a;
            cm = b;
            charge_expected *= 1.0 - 2.0 * cfg.dt;
        }
    }
    Ok(MacroRun {
        grid,
        regime: cfg.regime(),
        snapshots,
        diagnostics,
    })
}

fn macro_diagnostics(
    grid: &PerforatedGrid,
    cfg: &MacroConfig,
    s: &MacroState,
    mass0: f64,
    charge_expected: f64,
    projection: f64,
) -> Result<MacroDiagnostics> {
    let area = grid.h() * grid.h();
    let sp: f64 = s.c0_plus.values.iter().sum();
    let sm: f64 = s.c0_minus.values.iter().sum();
    let all = s.c0_plus.values.iter().chain(&s.c0_minus.values);
    let d = MacroDiagnostics {
        time: s.time,
        mass: (sp + sm) * area,
        charge: (sp - sm) * area,
        charge_expected,
        min_c: all.clone().copied().fold(f64::INFINITY, f64::min),
        max_c: all.copied().fold(f64::NEG_INFINITY, f64::max),
        max_div_v: divergence(grid, &s.v_bar).max_abs(),
        mean_p: s.p0.mean(),
        mean_phi: if cfg.bc_kind == BcKind::Neumann {
            s.phi0.mean()
        } else {
            0.0
        },
        projection,
    };
    if d.min_c < -1e-12 {
        return Err(Error::InvariantViolated(format!(
            "negative macro concentration {:.3e} at t = {}",
            d.min_c, s.time
        )));
    }
    if (d.mass - mass0).abs() > 1e-10 * mass0 {
        return Err(Error::InvariantViolated(format!(
            "macro mass drift {:.3e} at t = {}",
            (d.mass - mass0) / mass0,
            s.time
        )));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CellResiduals;
    use crate::grid::build_perforated_grid;
    use crate::grid::CellGeometry;
    use crate::micro::{run_micro, MicroOptions};
    use std::f64::consts::PI;

    fn tensors(d: f64, k: f64, porosity: f64) -> EffectiveTensors {
        EffectiveTensors {
            d: [[d, 0.0], [0.0, d]],
            k: Some([[k, 0.0], [0.0, k]]),
            phi_integral: Some(0.03),
            porosity,
            residuals: CellResiduals::default(),
        }
    }

    fn l2(grid: &PerforatedGrid, a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() * grid.h() * grid.h()).sqrt()
    }

    #[test]
    fn symmetric_data_gives_zero_potential() {
        let g = PerforatedGrid::unperforated(8);
        let c = FieldOnGrid::from_fn(&g, Placement::CellCenter, |x, _| 1.0 + x);
        let phi = solve_macro_poisson_neumann(
            &g,
            &c,
            &c,
            &tensors(0.5, 0.01, 0.75),
            0.0,
            false,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(phi.max_abs(), 0.0);
    }

    #[test]
    fn incompatible_charge_rejected() {
        let g = PerforatedGrid::unperforated(8);
        let one = FieldOnGrid::from_fn(&g, Placement::CellCenter, |_, _| 1.0);
        let zero = FieldOnGrid::zeros(&g, Placement::CellCenter);
        let r = solve_macro_poisson_neumann(
            &g,
            &one,
            &zero,
            &tensors(0.5, 0.01, 0.75),
            0.0,
            false,
            &Default::default(),
        );
        assert!(matches!(r, Err(Error::IncompatibleRHS { .. })));
    }

    #[test]
    fn dirichlet_potential_is_algebraic() {
        let g = PerforatedGrid::unperforated(4);
        let t = tensors(0.5, 0.01, 0.75);
        let one = FieldOnGrid::from_fn(&g, Placement::CellCenter, |_, _| 2.0);
        let base = FieldOnGrid::from_fn(&g, Placement::CellCenter, |_, _| 1.0);
        let phi = solve_macro_potential_dirichlet(&one, &base, &t).unwrap();
        assert!(phi.values.iter().all(|v| (v - 0.03).abs() < 1e-15));
        let same = solve_macro_potential_dirichlet(&base, &base, &t).unwrap();
        let avg = averaged_physical_potential(&same, 0.75, 2.0);
        assert!(avg.values.iter().all(|v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn constant_forcing_projects_to_rest() {
        let g = PerforatedGrid::unperforated(8);
        let mut f = VelocityField::zeros(&g);
        f.x.values.iter_mut().for_each(|v| *v = 0.3);
        let (v, p) =
            solve_macro_darcy(&g, [[0.02, 0.0], [0.0, 0.02]], &f, &Default::default()).unwrap();
        assert!(v.max_abs() < 1e-12);
        // ∇p = 𝕂⁻¹F in the interior.
        let grad = cell_gradient(&g, &p.values);
        assert!((grad[0][3 * 8 + 4] - 15.0).abs() < 1e-9);
    }

    #[test]
    fn poisson_and_darcy_second_order() {
        // −∇·(d∇u) = f with u = cos(πx)cos(πy); for Darcy F = k∇u gives p = u.
        let d = 0.6;
        let mut errs = vec![];
        let mut derrs = vec![];
        for n in [16, 32, 64] {
            let g = PerforatedGrid::unperforated(n);
            let exact = FieldOnGrid::from_fn(&g, Placement::CellCenter, |x, y| {
                (PI * x).cos() * (PI * y).cos()
            });
            let src = FieldOnGrid::from_fn(&g, Placement::CellCenter, |x, y| {
                2.0 * PI * PI * d * (PI * x).cos() * (PI * y).cos()
            });
            let t = EffectiveTensors {
                porosity: 1.0,
                ..tensors(d, 0.01, 1.0)
            };
            let zero = FieldOnGrid::zeros(&g, Placement::CellCenter);
            let u =
                solve_macro_poisson_neumann(&g, &src, &zero, &t, 0.0, true, &Default::default())
                    .unwrap();
            errs.push(l2(&g, &u.values, &exact.values));
            let k = 0.02;
            let mut f = VelocityField::zeros(&g);
            for axis in [Axis::X, Axis::Y] {
                let pos = g.positions(match axis {
                    Axis::X => Placement::XFace,
                    Axis::Y => Placement::YFace,
                });
                for (v, (x, y)) in f.component_mut(axis).values.iter_mut().zip(pos) {
                    *v = match axis {
                        Axis::X => -k * PI * (PI * x).sin() * (PI * y).cos(),
                        Axis::Y => -k * PI * (PI * x).cos() * (PI * y).sin(),
                    };
                }
            }
            let (v, p) =
                solve_macro_darcy(&g, [[k, 0.0], [0.0, k]], &f, &Default::default()).unwrap();
            assert!(divergence(&g, &v).max_abs() < 1e-9);
            derrs.push(l2(&g, &p.values, &exact.values));
        }
        for e in [&errs, &derrs] {
            let r1 = (e[0] / e[1]).log2();
            let r2 = (e[1] / e[2]).log2();
            assert!(r1 > 1.8 && r2 > 1.8, "{e:?}");
        }
    }

    #[test]
    fn matches_micro_diffusion_on_unperforated_grid() {
        // 𝔻 = |Y_l| I reproduces the micro transport with v = Φ = 0.
        let porosity = 0.75;
        let init = InitialData::symmetric();
        let scaling = ScalingConfig {
            t_final: 0.02,
            ..Default::default()
        };
        let mut cfg =
            MacroConfig::from_scaling(&scaling, tensors(porosity, 0.01, porosity), 0.5, 16);
        cfg.tensors.d = [[porosity, 0.0], [0.0, porosity]];
        let times = [0.0, 0.01, 0.02];
        let mac = run_macro(&cfg, &init, &times).unwrap();
        let g = build_perforated_grid(0.5, CellGeometry::new(0.0, 8)).unwrap();
        let mic = run_micro(&scaling, &g, &init, &times, &MicroOptions::default()).unwrap();
        for (a, b) in mac.snapshots.iter().zip(&mic.snapshots) {
            for (x, y) in a.c0_plus.values.iter().zip(&b.c_plus.values) {
                assert!((x - y).abs() < 1e-10);
            }
            assert_eq!(a.v_bar.max_abs(), 0.0);
        }
    }

    #[test]
    fn conservation_and_charge_decay() {
        let scaling = ScalingConfig::default();
        let cfg = MacroConfig::from_scaling(&scaling, tensors(0.57, 0.013, 0.75), 0.5, 32);
        let init = InitialData {
            offset: 0.1,
            ..Default::default()
        };
        let run = run_macro(&cfg, &init, &crate::micro::uniform_times(0.1, 11)).unwrap();
        let q0 = run.diagnostics[0].charge;
        for d in &run.diagnostics {
            assert!((d.charge - d.charge_expected).abs() < 1e-12);
            assert!((d.charge - q0 * (-2.0 * d.time).exp()).abs() <= 0.02 * q0.abs());
            assert!(d.mean_p.abs() < 1e-12 && d.mean_phi.abs() < 1e-12);
            assert!(d.max_div_v < 1e-9);
        }
        assert!(run.snapshots[5].v_bar.max_abs() > 0.0);
    }
}
