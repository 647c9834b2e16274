//! First-order reconstructions on the micro grid, the boundary cutoff, the
//! boundary-layer field η^δ and the velocity/pressure correctors.

use crate::cell::{invert, CellSolutions, EffectiveTensors, Tensor, AXES};
use crate::error::{Error, Result};
use crate::fv::divergence;
use crate::grid::{Axis, FieldOnGrid, Lattice, PerforatedGrid, Placement, VelocityField};
use crate::macroscale::{cell_gradient, MacroSnapshot, Regime};
use crate::micro::BcKind;
use serde::{Deserialize, Serialize};

/// Largest admissible boundary-layer thickness.
pub const DELTA_MAX: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 1.0 / 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionBundle {
    pub time: f64,
    /// |Y_l|⁻¹ v̄₀ on the micro faces.
    pub v_bar_eps: VelocityField,
    #[serde(rename = "Phi0_eps")]
    pub phi0_eps: FieldOnGrid,
    #[serde(rename = "Phi1_eps")]
    pub phi1_eps: FieldOnGrid,
    /// Dirichlet only: |Y_l|⁻¹ Φ̄̃₀.
    #[serde(rename = "Phi_bar_eps")]
    pub phi_bar_eps: Option<FieldOnGrid>,
    pub c0_plus_eps: FieldOnGrid,
    pub c0_minus_eps: FieldOnGrid,
    pub c1_plus_eps: FieldOnGrid,
    pub c1_minus_eps: FieldOnGrid,
    /// Absent without a hole.
    pub v0_eps: Option<VelocityField>,
    pub v1_eps: Option<VelocityField>,
    pub p0_eps: FieldOnGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderAux {
    pub p1: FieldOnGrid,
    pub p_tilde1: FieldOnGrid,
    pub mu: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectorDiagnostics {
    /// ‖∇·𝒱‖ on Ω^ε.
    pub div_l2: f64,
    /// Same norm with the cutoff factor `m` in place of `1 − m`.
    pub div_l2_interior_cutoff: f64,
    /// εδ^{−3/2} + ε^{1/2}δ^{−1}.
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorFields {
    pub m_eps: FieldOnGrid,
    /// On the macro grid.
    pub eta_delta: VelocityField,
    #[serde(rename = "V_eps_delta")]
    pub v_corr: VelocityField,
    #[serde(rename = "P_eps_delta")]
    pub p_corr: FieldOnGrid,
    pub delta: f64,
    pub lambda: f64,
    pub diagnostics: CorrectorDiagnostics,
}

/// Micro-entity to cell-entity index maps (exact, the micro grid tiles the cell grid).
struct CellIndex {
    cells: Vec<usize>,
    faces: [Vec<Option<usize>>; 2],
}

impl CellIndex {
    fn new(cell: &PerforatedGrid, micro: &PerforatedGrid) -> Result<Self> {
        let nc = cell.n();
        if micro.cells_per_period() != nc || micro.geometry() != cell.geometry() {
            return Err(Error::PlacementMismatch(
                "micro grid does not tile the cell grid".into(),
            ));
        }
        let cells = micro
            .cells()
            .iter()
            .map(|&(i, j)| {
                let (ci, cj) = micro.cell_index_in_period(i, j);
                cell.cell_id(ci, cj)
                    .ok_or_else(|| Error::PlacementMismatch("fluid cell maps to solid".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let faces = AXES.map(|axis| {
            micro
                .faces(axis)
                .faces
                .iter()
                .map(|&(i, j)| cell.faces(axis).id(i % nc, j % nc))
                .collect()
        });
        Ok(CellIndex { cells, faces })
    }

    fn cell_values(&self, f: &FieldOnGrid) -> Vec<f64> {
        self.cells.iter().map(|&k| f.values[k]).collect()
    }

    fn face_values(&self, axis: Axis, f: &FieldOnGrid) -> Vec<f64> {
        self.faces[axis_index(axis)]
            .iter()
            .map(|k| k.map_or(0.0, |k| f.values[k]))
            .collect()
    }
}

fn axis_index(axis: Axis) -> usize {
    match axis {
        Axis::X => 0,
        Axis::Y => 1,
    }
}

fn placement_of(axis: Axis) -> Placement {
    match axis {
        Axis::X => Placement::XFace,
        Axis::Y => Placement::YFace,
    }
}

fn field(placement: Placement, values: Vec<f64>) -> FieldOnGrid {
    FieldOnGrid { placement, values }
}

/// Samples macro cell fields at a fixed list of micro points.
struct MacroSampler<'a> {
    grid: &'a PerforatedGrid,
    points: Vec<(f64, f64)>,
}

impl MacroSampler<'_> {
    fn sample(&self, values: &[f64]) -> Result<Vec<f64>> {
        let lat =
            Lattice::from_cell_field(self.grid, &field(Placement::CellCenter, values.to_vec()))?;
        Ok(self.points.iter().map(|&(x, y)| lat.sample(x, y)).collect())
    }
}

/// `B_j = q∂_jΦ̃₀ + ∂_jp₀` (electric part only when the regime keeps it) and `∂_iB_j`.
struct Bracket {
    b: [Vec<f64>; 2],
    db: [[Vec<f64>; 2]; 2],
}

fn bracket(snap: &MacroSnapshot, extra: Option<&[Vec<f64>; 2]>) -> Bracket {
    let g = snap.grid;
    let s = snap.state;
    let gp = cell_gradient(g, &s.p0.values);
    let mut b = gp;
    if snap.regime.electric_darcy() {
        let q = s.charge_field().values;
        let gphi = cell_gradient(g, &s.phi0.values);
        for j in 0..2 {
            for k in 0..q.len() {
                b[j][k] += q[k] * gphi[j][k];
            }
        }
    }
    if let Some(e) = extra {
        for j in 0..2 {
            for k in 0..b[j].len() {
                b[j][k] += e[j][k];
            }
        }
    }
    let d0 = cell_gradient(g, &b[0]);
    let d1 = cell_gradient(g, &b[1]);
    let db = [
        [d0[0].clone(), d1[0].clone()],
        [d0[1].clone(), d1[1].clone()],
    ];
    Bracket { b, db }
}

fn check_regime(snap: &MacroSnapshot, regime: Regime) -> Result<()> {
    if snap.regime != regime {
        return Err(Error::RegimeMismatch(format!(
            "macro run used {:?}, reconstruction requested for {:?}",
            snap.regime, regime
        )));
    }
    if snap.grid.num_fluid_cells() != snap.grid.n() * snap.grid.n() {
        return Err(Error::PlacementMismatch(
            "macro grid must be unperforated".into(),
        ));
    }
    Ok(())
}

/// `−Σ_j w_j(x/ε)B_j(x) − ε·weight(x)·Σ_ij r_ij(x/ε)∂_iB_j(x)` on the micro faces;
/// `with_w = false` drops the first sum.
fn corrector_velocity(
    micro: &PerforatedGrid,
    cells: &CellSolutions,
    idx: &CellIndex,
    macro_grid: &PerforatedGrid,
    br: &Bracket,
    with_w: bool,
    weight: Option<&dyn Fn(f64, f64) -> f64>,
) -> Result<VelocityField> {
    let eps = micro.epsilon();
    let (w, r) = match (&cells.w_j, &cells.r_ij) {
        (Some(w), Some(r)) => (w, r),
        _ => {
            return Err(Error::DegenerateGeometry(
                "Stokes cell solutions need a hole".into(),
            ))
        }
    };
    let mut out = VelocityField::zeros(micro);
    for axis in AXES {
        let placement = placement_of(axis);
        let sampler = MacroSampler {
            grid: macro_grid,
            points: micro.positions(placement),
        };
        let mut vals = vec![0.0; sampler.points.len()];
        for j in (0..2).filter(|_| with_w) {
            let wj = idx.face_values(axis, w[j].component(axis));
            let bj = sampler.sample(&br.b[j])?;
            for k in 0..vals.len() {
                vals[k] -= wj[k] * bj[k];
            }
        }
        if let Some(weight) = weight {
            let wt: Vec<f64> = sampler.points.iter().map(|&(x, y)| weight(x, y)).collect();
            for i in 0..2 {
                for j in 0..2 {
                    let rij = idx.face_values(axis, r[i][j].component(axis));
                    let dij = sampler.sample(&br.db[i][j])?;
                    for k in 0..vals.len() {
                        vals[k] -= eps * wt[k] * rij[k] * dij[k];
                    }
                }
            }
        }
        *out.component_mut(axis) = field(placement, vals);
    }
    Ok(out)
}

/// All macroscopic reconstructions of one snapshot on the micro grid.
pub fn build_reconstructions(
    snap: MacroSnapshot,
    cells: &CellSolutions,
    micro: &PerforatedGrid,
    regime: Regime,
) -> Result<ReconstructionBundle> {
    check_regime(&snap, regime)?;
    let eps = micro.epsilon();
    let idx = CellIndex::new(&cells.grid, micro)?;
    let porosity = cells.grid.porosity();
    let s = snap.state;
    let mg = snap.grid;
    let cc = MacroSampler {
        grid: mg,
        points: micro.positions(Placement::CellCenter),
    };
    let q = s.charge_field().values;

    let c0p = cc.sample(&s.c0_plus.values)?;
    let c0m = cc.sample(&s.c0_minus.values)?;
    let gcp = cell_gradient(mg, &s.c0_plus.values);
    let gcm = cell_gradient(mg, &s.c0_minus.values);
    let phi_j = [
        idx.cell_values(&cells.phi_j[0]),
        idx.cell_values(&cells.phi_j[1]),
    ];
    let first_order = |c0: &[f64], grad: &[Vec<f64>; 2]| -> Result<Vec<f64>> {
        let mut c1 = c0.to_vec();
        for j in 0..2 {
            let g = cc.sample(&grad[j])?;
            for k in 0..c1.len() {
                c1[k] += eps * phi_j[j][k] * g[k];
            }
        }
        Ok(c1)
    };
    let mut c1p = first_order(&c0p, &gcp)?;
    let mut c1m = first_order(&c0m, &gcm)?;

    let (phi0, phi1, phi_bar) = match regime.bc_kind {
        BcKind::Neumann => {
            let phi0 = cc.sample(&s.phi0.values)?;
            let phi1 = first_order(&phi0, &cell_gradient(mg, &s.phi0.values))?;
            (phi0, phi1, None)
        }
        BcKind::Dirichlet => {
            let phi_cell = cells.phi.as_ref().ok_or_else(|| {
                Error::DegenerateGeometry("Dirichlet cell solution needs a hole".into())
            })?;
            let phi_y = idx.cell_values(phi_cell);
            let q_eps = cc.sample(&q)?;
            let phi0: Vec<f64> = phi_y.iter().zip(&q_eps).map(|(a, b)| a * b).collect();
            if regime.gamma_equals_alpha_minus_1 {
                for k in 0..phi0.len() {
                    c1p[k] -= eps * c0p[k] * phi0[k];
                    c1m[k] += eps * c0m[k] * phi0[k];
                }
            }
            let bar: Vec<f64> = cc
                .sample(&s.phi0.values)?
                .iter()
                .map(|v| v / porosity)
                .collect();
            (phi0.clone(), phi0, Some(field(Placement::CellCenter, bar)))
        }
    };

    let mut v_bar_eps = VelocityField::zeros(micro);
    for axis in AXES {
        let lat = Lattice::from_face_field(mg, axis, s.v_bar.component(axis))?;
        let placement = placement_of(axis);
        let vals = micro
            .positions(placement)
            .iter()
            .map(|&(x, y)| lat.sample(x, y) / porosity)
            .collect();
        *v_bar_eps.component_mut(axis) = field(placement, vals);
    }

    let (v0, v1) = if cells.w_j.is_some() {
        let br = bracket(&snap, None);
        let v0 = corrector_velocity(micro, cells, &idx, mg, &br, true, None)?;
        let v1 = corrector_velocity(micro, cells, &idx, mg, &br, false, Some(&|_, _| 1.0 / eps))?;
        (Some(v0), Some(v1))
    } else {
        (None, None)
    };

    let cf = |v: Vec<f64>| field(Placement::CellCenter, v);
    Ok(ReconstructionBundle {
        time: s.time,
        v_bar_eps,
        phi0_eps: cf(phi0),
        phi1_eps: cf(phi1),
        phi_bar_eps: phi_bar,
        c0_plus_eps: cf(c0p),
        c0_minus_eps: cf(c0m),
        c1_plus_eps: cf(c1p),
        c1_minus_eps: cf(c1m),
        v0_eps: v0,
        v1_eps: v1,
        p0_eps: cf(cc.sample(&s.p0.values)?),
    })
}

/// `p₁ = −Σ π_j B_j` and `p̃₁ = p₁ + qΦ̃₁` with `Φ̃₁ = Σ φ_j ∂_jΦ̃₀` (Neumann; zero for Dirichlet).
pub fn first_order_aux(
    snap: MacroSnapshot,
    cells: &CellSolutions,
    micro: &PerforatedGrid,
    regime: Regime,
    mu: f64,
) -> Result<FirstOrderAux> {
    check_regime(&snap, regime)?;
    let pi = cells
        .pi_j
        .as_ref()
        .ok_or_else(|| Error::DegenerateGeometry("π_j needs a hole".into()))?;
    let idx = CellIndex::new(&cells.grid, micro)?;
    let cc = MacroSampler {
        grid: snap.grid,
        points: micro.positions(Placement::CellCenter),
    };
    let br = bracket(&snap, None);
    let n = micro.num_fluid_cells();
    let mut p1 = vec![0.0; n];
    for j in 0..2 {
        let pij = idx.cell_values(&pi[j]);
        let bj = cc.sample(&br.b[j])?;
        for k in 0..n {
            p1[k] -= pij[k] * bj[k];
        }
    }
    let mut pt = p1.clone();
    if regime.bc_kind == BcKind::Neumann {
        let q = cc.sample(&snap.state.charge_field().values)?;
        let g = cell_gradient(snap.grid, &snap.state.phi0.values);
        for j in 0..2 {
            let phij = idx.cell_values(&cells.phi_j[j]);
            let gj = cc.sample(&g[j])?;
            for k in 0..n {
                pt[k] += q[k] * phij[k] * gj[k];
            }
        }
    }
    Ok(FirstOrderAux {
        p1: field(Placement::CellCenter, p1),
        p_tilde1: field(Placement::CellCenter, pt),
        mu,
    })
}

fn smoothstep(u: f64) -> (f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0)
    } else if u >= 1.0 {
        (1.0, 0.0)
    } else {
        (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u))
    }
}

/// One factor of the cutoff and its derivative in `t`.
fn cutoff_1d(t: f64, eps: f64) -> (f64, f64) {
    let (d, sign) = if t <= 0.5 { (t, 1.0) } else { (1.0 - t, -1.0) };
    let (s, ds) = smoothstep((d - eps) / eps);
    (s, sign * ds / eps)
}

/// `m^ε(x, y)` and its gradient.
pub fn cutoff_value(x: f64, y: f64, eps: f64) -> (f64, [f64; 2]) {
    let (sx, dx) = cutoff_1d(x, eps);
    let (sy, dy) = cutoff_1d(y, eps);
    (sx * sy, [dx * sy, sx * dy])
}

fn check_band(eps: f64) -> Result<()> {
    if !(eps > 0.0) || 2.0 * eps > 0.5 {
        return Err(Error::BandTooWide(eps));
    }
    Ok(())
}

/// Cutoff at the fluid cell centres of `grid`.
pub fn build_cutoff(grid: &PerforatedGrid, eps: f64) -> Result<FieldOnGrid> {
    check_band(eps)?;
    Ok(FieldOnGrid::from_fn(grid, Placement::CellCenter, |x, y| {
        cutoff_value(x, y, eps).0
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CutoffDiagnostics {
    pub one_minus_m_l2: f64,
    pub eps_grad_m_l2: f64,
}

/// `‖1 − m^ε‖` and `ε‖∇m^ε‖` over the fluid cells.
pub fn cutoff_diagnostics(grid: &PerforatedGrid, eps: f64) -> Result<CutoffDiagnostics> {
    check_band(eps)?;
    let area = grid.h() * grid.h();
    let (mut a, mut b) = (0.0, 0.0);
    for (x, y) in grid.positions(Placement::CellCenter) {
        let (m, g) = cutoff_value(x, y, eps);
        a += (1.0 - m).powi(2) * area;
        b += (g[0] * g[0] + g[1] * g[1]) * area;
    }
    Ok(CutoffDiagnostics {
        one_minus_m_l2: a.sqrt(),
        eps_grad_m_l2: eps * b.sqrt(),
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= DELTA_MAX) {
        return Err(Error::DeltaOutOfRange {
            delta,
            max: DELTA_MAX,
        });
    }
    Ok(())
}

/// Tangential traces of `v̄` on the four sides, extrapolated from the first two
/// face rows: `[bottom vx(x,0), top vx(x,1), left vy(0,y), right vy(1,y)]`, indexed by node.
fn boundary_traces(grid: &PerforatedGrid, v: &VelocityField) -> [Vec<f64>; 4] {
    let n = grid.n();
    let vx = |i: usize, j: usize| v.x.values[grid.faces(Axis::X).id(i, j).unwrap()];
    let vy = |i: usize, j: usize| v.y.values[grid.faces(Axis::Y).id(i, j).unwrap()];
    let ext = |a: f64, b: f64| 1.5 * a - 0.5 * b;
    let two = n >= 2;
    let mut out = [
        vec![0.0; n + 1],
        vec![0.0; n + 1],
        vec![0.0; n + 1],
        vec![0.0; n + 1],
    ];
    for k in 0..=n {
        if two {
            out[0][k] = ext(vx(k, 0), vx(k, 1));
            out[1][k] = ext(vx(k, n - 1), vx(k, n - 2));
            out[2][k] = ext(vy(0, k), vy(1, k));
            out[3][k] = ext(vy(n - 1, k), vy(n - 2, k));
        }
    }
    out
}

/// Nodal stream function `ψ = z e^{−z/δ} a(ξ)`, side chosen by the min-distance rule.
pub fn eta_stream_function(
    grid: &PerforatedGrid,
    v_bar: &VelocityField,
    delta: f64,
) -> Result<Vec<f64>> {
    check_delta(delta)?;
    let n = grid.n();
    if grid.num_fluid_cells() != n * n || grid.is_periodic() {
        return Err(Error::PlacementMismatch(
            "η^δ lives on the unperforated macro grid".into(),
        ));
    }
    let h = grid.h();
    let tr = boundary_traces(grid, v_bar);
    let mut psi = vec![0.0; (n + 1) * (n + 1)];
    for j in 0..=n {
        for i in 0..=n {
            let sides = [(j, 0, i), (n - j, 1, i), (i, 2, j), (n - i, 3, j)];
            let &(zi, side, xi) = sides.iter().min_by_key(|s| s.0).unwrap();
            let z = zi as f64 * h;
            // curl ψ gives ±a on each side; top and left need the minus
            let sign = [1.0, -1.0, -1.0, 1.0][side];
            psi[j * (n + 1) + i] = sign * z * (-z / delta).exp() * tr[side][xi];
        }
    }
    Ok(psi)
}

/// `η^δ = curl ψ = (∂_yψ, −∂_xψ)` on the MAC faces; exactly divergence-free.
pub fn build_eta_delta(
    grid: &PerforatedGrid,
    v_bar: &VelocityField,
    delta: f64,
) -> Result<VelocityField> {
    let psi = eta_stream_function(grid, v_bar, delta)?;
    let n = grid.n();
    let h = grid.h();
    let node = |i: usize, j: usize| psi[j * (n + 1) + i];
    let mut eta = VelocityField::zeros(grid);
    for axis in AXES {
        let fs = grid.faces(axis);
        let vals = fs
            .faces
            .iter()
            .map(|&(i, j)| match axis {
                Axis::X => (node(i, j + 1) - node(i, j)) / h,
                Axis::Y => -(node(i + 1, j) - node(i, j)) / h,
            })
            .collect();
        *eta.component_mut(axis) = field(placement_of(axis), vals);
    }
    Ok(eta)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EtaDiagnostics {
    pub max_div: f64,
    /// Largest tangential mismatch between η^δ and v̄₀ on the faces next to ∂Ω.
    pub trace_error: f64,
    pub grad_l2: f64,
    pub l2: f64,
}

pub fn eta_diagnostics(
    grid: &PerforatedGrid,
    v_bar: &VelocityField,
    eta: &VelocityField,
) -> EtaDiagnostics {
    let n = grid.n();
    let h = grid.h();
    let max_div = divergence(grid, eta).max_abs();
    let mut trace_error = 0.0f64;
    for axis in AXES {
        let fs = grid.faces(axis);
        for (id, &(i, j)) in fs.faces.iter().enumerate() {
            let edge = match axis {
                Axis::X => j == 0 || j == n - 1,
                Axis::Y => i == 0 || i == n - 1,
            };
            let normal_boundary = match axis {
                Axis::X => i == 0 || i == n,
                Axis::Y => j == 0 || j == n,
            };
            if edge && !normal_boundary {
                let d = eta.component(axis).values[id] - v_bar.component(axis).values[id];
                trace_error = trace_error.max(d.abs());
            }
        }
    }
    let mut g2 = 0.0;
    let mut l2 = 0.0;
    for axis in AXES {
        let (nx, ny) = match axis {
            Axis::X => (n + 1, n),
            Axis::Y => (n, n + 1),
        };
        let v = &eta.component(axis).values;
        let at = |i: usize, j: usize| v[grid.faces(axis).id(i, j).unwrap()];
        for j in 0..ny {
            for i in 0..nx {
                l2 += at(i, j).powi(2) * h * h;
                if i + 1 < nx {
                    g2 += (at(i + 1, j) - at(i, j)).powi(2);
                }
                if j + 1 < ny {
                    g2 += (at(i, j + 1) - at(i, j)).powi(2);
                }
            }
        }
    }
    EtaDiagnostics {
        max_div,
        trace_error,
        grad_l2: g2.sqrt(),
        l2: l2.sqrt(),
    }
}

/// Cell-centred `𝕂⁻¹η`.
fn k_inverse_eta(grid: &PerforatedGrid, k: &Tensor, eta: &VelocityField) -> Result<[Vec<f64>; 2]> {
    let kinv = invert(k)?;
    let mut avg = [
        vec![0.0; grid.num_fluid_cells()],
        vec![0.0; grid.num_fluid_cells()],
    ];
    for (c, &(i, j)) in grid.cells().iter().enumerate() {
        for (a, axis) in AXES.iter().enumerate() {
            let (i1, j1) = match axis {
                Axis::X => (i + 1, j),
                Axis::Y => (i, j + 1),
            };
            let fs = grid.faces(*axis);
            let comp = &eta.component(*axis).values;
            avg[a][c] = 0.5 * (comp[fs.id(i, j).unwrap()] + comp[fs.id(i1, j1).unwrap()]);
        }
    }
    let mut out = [vec![0.0; avg[0].len()], vec![0.0; avg[0].len()]];
    for c in 0..avg[0].len() {
        for a in 0..2 {
            out[a][c] = kinv[a][0] * avg[0][c] + kinv[a][1] * avg[1][c];
        }
    }
    Ok(out)
}

/// 𝒱^{ε,δ}, 𝒫^{ε,δ} with `δ = ε^λ`; the r-term carries the factor `1 − m^ε`.
pub fn build_velocity_pressure_correctors(
    snap: MacroSnapshot,
    cells: &CellSolutions,
    tensors: &EffectiveTensors,
    micro: &PerforatedGrid,
    regime: Regime,
    lambda: f64,
) -> Result<CorrectorFields> {
    check_regime(&snap, regime)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must lie in (0, 1), got {lambda}"
        )));
    }
    let k = tensors
        .k()
        .map_err(|_| Error::DegenerateGeometry("permeability needs a hole".into()))?;
    let pi = cells
        .pi_j
        .as_ref()
        .ok_or_else(|| Error::DegenerateGeometry("π_j needs a hole".into()))?;
    let eps = micro.epsilon();
    let delta = eps.powf(lambda);
    let m_eps = build_cutoff(micro, eps)?;
    let eta = build_eta_delta(snap.grid, &snap.state.v_bar, delta)?;
    let keta = k_inverse_eta(snap.grid, &k, &eta)?;
    let br = bracket(&snap, Some(&keta));
    let idx = CellIndex::new(&cells.grid, micro)?;

    let outer = |x: f64, y: f64| 1.0 - cutoff_value(x, y, eps).0;
    let inner = |x: f64, y: f64| cutoff_value(x, y, eps).0;
    let v_corr = corrector_velocity(micro, cells, &idx, snap.grid, &br, true, Some(&outer))?;
    let swapped = corrector_velocity(micro, cells, &idx, snap.grid, &br, true, Some(&inner))?;

    let cc = MacroSampler {
        grid: snap.grid,
        points: micro.positions(Placement::CellCenter),
    };
    let mut p = cc.sample(&snap.state.p0.values)?;
    for j in 0..2 {
        let pij = idx.cell_values(&pi[j]);
        let bj = cc.sample(&br.b[j])?;
        for c in 0..p.len() {
            p[c] -= eps * pij[c] * bj[c];
        }
    }

    let area = micro.h() * micro.h();
    let l2 = |f: &FieldOnGrid| (f.values.iter().map(|v| v * v).sum::<f64>() * area).sqrt();
    let div_l2 = l2(&divergence(micro, &v_corr));
    let div_l2_interior_cutoff = l2(&divergence(micro, &swapped));
    let bound = eps * delta.powf(-1.5) + eps.sqrt() / delta;
    Ok(CorrectorFields {
        m_eps,
        eta_delta: eta,
        v_corr,
        p_corr: field(Placement::CellCenter, p),
        delta,
        lambda,
        diagnostics: CorrectorDiagnostics {
            div_l2,
            div_l2_interior_cutoff,
            bound,
            ratio: div_l2 / bound,
        },
    })
}
