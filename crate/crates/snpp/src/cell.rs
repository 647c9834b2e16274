//! Periodic cell problems on the pore `Y_l` and the effective tensors.

use crate::error::{Error, Result};
use crate::fv::{divergence_matrix, scalar_laplacian, vector_laplacian, InterfaceBc, VelocityDofs};
use crate::grid::{
    build_unit_cell, Axis, CellGeometry, FaceKind, FieldOnGrid, PerforatedGrid, Placement,
    VelocityField,
};
use crate::linalg::{cg_solve, saddle_solve, Gauge, SolverSettings};
use serde::{Deserialize, Serialize};

pub const AXES: [Axis; 2] = [Axis::X, Axis::Y];

pub type Tensor = [[f64; 2]; 2];

#[derive(Clone, Debug)]
pub struct CellSolutions {
    pub grid: PerforatedGrid,
    /// φ_j, zero mean.
    pub phi_j: [FieldOnGrid; 2],
    /// w_j and π_j; absent without a hole.
    pub w_j: Option<[VelocityField; 2]>,
    pub pi_j: Option<[FieldOnGrid; 2]>,
    /// Dirichlet cell solution φ; absent without a hole.
    pub phi: Option<FieldOnGrid>,
    /// `r[i][j]` for the divergence problem.
    pub r_ij: Option<[[VelocityField; 2]; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellResiduals {
    pub scalar: f64,
    pub stokes_momentum: f64,
    pub stokes_divergence: f64,
    pub dirichlet: f64,
    pub r_divergence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTensors {
    #[serde(rename = "D")]
    pub d: Tensor,
    #[serde(rename = "K")]
    pub k: Option<Tensor>,
    pub phi_integral: Option<f64>,
    pub porosity: f64,
    #[serde(default)]
    pub residuals: CellResiduals,
}

impl EffectiveTensors {
    pub fn k(&self) -> Result<Tensor> {
        self.k.ok_or_else(|| {
            Error::DegenerateGeometry("permeability undefined without a hole".into())
        })
    }

    pub fn phi_integral(&self) -> Result<f64> {
        self.phi_integral.ok_or_else(|| {
            Error::DegenerateGeometry("Dirichlet cell undefined without a hole".into())
        })
    }
}

pub fn axis_index(axis: Axis) -> usize {
    match axis {
        Axis::X => 0,
        Axis::Y => 1,
    }
}

/// Cell problem for φ_j with Neumann data `−e_j·n` on Γ; returns (φ_1, φ_2) and 𝔻.
pub fn solve_scalar_cells(
    grid: &PerforatedGrid,
    settings: &SolverSettings,
) -> Result<([FieldOnGrid; 2], Tensor, f64)> {
    let l = scalar_laplacian(grid, InterfaceBc::Neumann);
    let h = grid.h();
    let s = settings.with_gauge(Gauge::ZeroMean);
    let solve = |axis: Axis| -> Result<(FieldOnGrid, f64)> {
        let mut b = vec![0.0; grid.num_fluid_cells()];
        for (c, &(i, j)) in grid.cells().iter().enumerate() {
            for (a, fi, fj, sign) in grid.cell_faces(i, j) {
                if a == axis && grid.face_kind(a, fi, fj) == FaceKind::MicroBoundary {
                    b[c] -= sign / h;
                }
            }
        }
        let x = cg_solve(&l, &b, &s)?;
        let lx = l.mul_vec(&x);
        let res = crate::linalg::norm2(&lx.iter().zip(&b).map(|(a, b)| a - b).collect::<Vec<_>>())
            / crate::linalg::norm2(&b).max(1.0);
        Ok((
            FieldOnGrid {
                placement: Placement::CellCenter,
                values: x,
            },
            res,
        ))
    };
    let sols: Vec<(FieldOnGrid, f64)> = crate::par_map(&AXES, |&a| solve(a))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let [(p1, r1), (p2, r2)]: [(FieldOnGrid, f64); 2] = sols.try_into().unwrap();
    let phi = [p1, p2];
    let mut d = [[0.0; 2]; 2];
    let h2 = h * h;
    // Flux quadrature over interior fluid faces: the discrete energy form of the
    // cell operator, so 𝔻 is exactly the homogenized tensor of the FV scheme.
    for (ii, axis) in AXES.into_iter().enumerate() {
        let fs = grid.faces(axis);
        for (id, &(fi, fj)) in fs.faces.iter().enumerate() {
            if fs.kinds[id] != FaceKind::InteriorFluid {
                continue;
            }
            let (lo, hi) = grid.face_cells(axis, fi, fj);
            let (lo, hi) = (lo.unwrap(), hi.unwrap());
            let (cl, ch) = (
                grid.cell_id(lo.0, lo.1).unwrap(),
                grid.cell_id(hi.0, hi.1).unwrap(),
            );
            for jj in 0..2 {
                let delta = if ii == jj { 1.0 } else { 0.0 };
                d[ii][jj] += (delta + (phi[jj].values[ch] - phi[jj].values[cl]) / h) * h2;
            }
        }
    }
    Ok((phi, d, r1.max(r2)))
}

/// Stokes cell problem with forcing e_j; returns (w_j, π_j, 𝕂).
pub fn solve_stokes_cells(
    grid: &PerforatedGrid,
    settings: &SolverSettings,
) -> Result<([VelocityField; 2], [FieldOnGrid; 2], Tensor, (f64, f64))> {
    if !grid.geometry().has_hole() {
        return Err(Error::DegenerateGeometry(
            "Stokes cell problem needs a no-slip surface".into(),
        ));
    }
    let dofs = VelocityDofs::new(grid);
    let a = vector_laplacian(grid, &dofs);
    let b = divergence_matrix(grid, &dofs);
    let g = vec![0.0; b.rows()];
    let sols: Vec<(VelocityField, FieldOnGrid, f64, f64)> =
        crate::par_map(&AXES, |&axis| -> Result<_> {
            let f: Vec<f64> = dofs
                .dofs
                .iter()
                .map(|&(ax, _)| if ax == axis { 1.0 } else { 0.0 })
                .collect();
            let (u, q) = saddle_solve(&a, &b, &f, &g, settings)?;
            let au = a.mul_vec(&u);
            let btq = b.mul_transpose_vec(&q);
            let mom: Vec<f64> = (0..u.len()).map(|k| au[k] + btq[k] - f[k]).collect();
            let div = b.mul_vec(&u);
            let scale = crate::linalg::norm2(&f);
            let w = dofs.to_field(grid, &u);
            let p = FieldOnGrid {
                placement: Placement::CellCenter,
                values: q.iter().map(|v| -v).collect(),
            };
            Ok((
                w,
                p,
                crate::linalg::norm2(&mom) / scale,
                crate::linalg::norm2(&div) / scale,
            ))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let [(w1, p1, m1, d1), (w2, p2, m2, d2)]: [_; 2] = sols.try_into().unwrap();
    let w = [w1, w2];
    let h2 = grid.h() * grid.h();
    let mut k = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            k[i][j] = w[j].component(AXES[i]).values.iter().sum::<f64>() * h2;
        }
    }
    Ok((w, [p1, p2], k, (m1.max(m2), d1.max(d2))))
}

/// −Δφ = 1 in Y_l, φ = 0 on Γ; returns φ and ∫φ.
pub fn solve_dirichlet_cell(
    grid: &PerforatedGrid,
    settings: &SolverSettings,
) -> Result<(FieldOnGrid, f64, f64)> {
    if !grid.geometry().has_hole() {
        return Err(Error::DegenerateGeometry(
            "periodic −Δφ = 1 without Dirichlet data has no solution".into(),
        ));
    }
    let l = scalar_laplacian(grid, InterfaceBc::Dirichlet);
    let b = vec![1.0; grid.num_fluid_cells()];
    let x = cg_solve(&l, &b, &settings.with_gauge(Gauge::None))?;
    let lx = l.mul_vec(&x);
    let res = crate::linalg::norm2(&lx.iter().zip(&b).map(|(a, b)| a - b).collect::<Vec<_>>())
        / crate::linalg::norm2(&b);
    let integral = x.iter().sum::<f64>() * grid.h() * grid.h();
    Ok((
        FieldOnGrid {
            placement: Placement::CellCenter,
            values: x,
        },
        integral,
        res,
    ))
}

/// Cell average of the `axis` component of a face field (mean of the two faces of the cell).
pub fn face_component_to_cells(grid: &PerforatedGrid, v: &VelocityField, axis: Axis) -> Vec<f64> {
    grid.cells()
        .iter()
        .map(|&(i, j)| {
            grid.cell_faces(i, j)
                .iter()
                .filter(|f| f.0 == axis)
                .map(|&(a, fi, fj, _)| {
                    grid.faces(a)
                        .id(fi, fj)
                        .map_or(0.0, |id| v.component(a).values[id])
                })
                .sum::<f64>()
                * 0.5
        })
        .collect()
}

/// Divergence data `|Y_l|⁻¹K_ij − w_j^i` on cells.
pub fn r_cell_data(
    grid: &PerforatedGrid,
    w: &[VelocityField; 2],
    k: &Tensor,
    i: usize,
    j: usize,
) -> Vec<f64> {
    let por = grid.porosity();
    face_component_to_cells(grid, &w[j], AXES[i])
        .iter()
        .map(|wc| k[i][j] / por - wc)
        .collect()
}

/// Minimum-energy solutions of `∇·r_ij = |Y_l|⁻¹K_ij − w_j^i`, `r_ij = 0` on Γ.
pub fn solve_r_cells(
    grid: &PerforatedGrid,
    w: &[VelocityField; 2],
    k: &Tensor,
    settings: &SolverSettings,
) -> Result<([[VelocityField; 2]; 2], f64)> {
    let dofs = VelocityDofs::new(grid);
    let a = vector_laplacian(grid, &dofs);
    let b = divergence_matrix(grid, &dofs);
    let f = vec![0.0; dofs.len()];
    let pairs = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let sols: Vec<(VelocityField, f64)> = crate::par_map(&pairs, |&(i, j)| -> Result<_> {
        let g = r_cell_data(grid, w, k, i, j);
        let (u, _) = saddle_solve(&a, &b, &f, &g, settings)?;
        let bu = b.mul_vec(&u);
        let res = bu
            .iter()
            .zip(&g)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        Ok((dofs.to_field(grid, &u), res))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let res = sols.iter().map(|s| s.1).fold(0.0, f64::max);
    let mut it = sols.into_iter().map(|s| s.0);
    let mut next = || it.next().unwrap();
    Ok(([[next(), next()], [next(), next()]], res))
}

/// All cell problems for one geometry.
pub fn solve_all_cells(
    geometry: CellGeometry,
    settings: &SolverSettings,
) -> Result<(CellSolutions, EffectiveTensors)> {
    let grid = build_unit_cell(geometry)?;
    let (phi_j, d, scalar_res) = solve_scalar_cells(&grid, settings)?;
    let mut residuals = CellResiduals {
        scalar: scalar_res,
        ..Default::default()
    };
    let porosity = grid.porosity();
    if !geometry.has_hole() {
        let sol = CellSolutions {
            grid,
            phi_j,
            w_j: None,
            pi_j: None,
            phi: None,
            r_ij: None,
        };
        return Ok((
            sol,
            EffectiveTensors {
                d,
                k: None,
                phi_integral: None,
                porosity,
                residuals,
            },
        ));
    }
    let (w, pi, k, (rm, rd)) = solve_stokes_cells(&grid, settings)?;
    residuals.stokes_momentum = rm;
    residuals.stokes_divergence = rd;
    let (phi, phi_integral, dres) = solve_dirichlet_cell(&grid, settings)?;
    residuals.dirichlet = dres;
    let (r, rres) = solve_r_cells(&grid, &w, &k, settings)?;
    residuals.r_divergence = rres;
    let sol = CellSolutions {
        grid,
        phi_j,
        w_j: Some(w),
        pi_j: Some(pi),
        phi: Some(phi),
        r_ij: Some(r),
    };
    Ok((
        sol,
        EffectiveTensors {
            d,
            k: Some(k),
            phi_integral: Some(phi_integral),
            porosity,
            residuals,
        },
    ))
}

/// Eigenvalues of a symmetric 2×2 tensor, ascending.
pub fn eigenvalues(t: &Tensor) -> [f64; 2] {
    let m = 0.5 * (t[0][0] + t[1][1]);
    let r = (0.25 * (t[0][0] - t[1][1]).powi(2) + t[0][1] * t[1][0])
        .max(0.0)
        .sqrt();
    [m - r, m + r]
}

pub fn invert(t: &Tensor) -> Result<Tensor> {
    let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
    if det.abs() <= 1e-300 || !det.is_finite() {
        return Err(Error::SingularTensor);
    }
    Ok([
        [t[1][1] / det, -t[0][1] / det],
        [-t[1][0] / det, t[0][0] / det],
    ])
}
