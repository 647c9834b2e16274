//! Finite-volume operators on [`PerforatedGrid`]: scalar and vector Laplacians,
//! MAC divergence, face gradients, tensor diffusion and upwind fluxes.

use crate::grid::{Axis, FaceKind, FieldOnGrid, PerforatedGrid, Placement, VelocityField};
use crate::linalg::{SparseMatrix, TripletBuilder};

/// Condition imposed on the solid/fluid interface faces for scalar problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterfaceBc {
    /// Zero normal flux (data enter through the right-hand side).
    Neumann,
    /// Homogeneous value on the face, via a ghost reflection.
    Dirichlet,
}

/// `−Δ_h` on fluid cells; ∂Ω is always no-flux.
pub fn scalar_laplacian(grid: &PerforatedGrid, bc: InterfaceBc) -> SparseMatrix {
    let n = grid.num_fluid_cells();
    let h2 = grid.h() * grid.h();
    let mut t = TripletBuilder::new(n, n);
    for (c, &(i, j)) in grid.cells().iter().enumerate() {
        let mut diag = 0.0;
        for (axis, fi, fj, _) in grid.cell_faces(i, j) {
            match grid.face_kind(axis, fi, fj) {
                FaceKind::InteriorFluid => {
                    let (lo, hi) = grid.face_cells(axis, fi, fj);
                    let other = if lo == Some((i, j)) { hi } else { lo }.unwrap();
                    let o = grid.cell_id(other.0, other.1).unwrap();
                    diag += 1.0 / h2;
                    t.push(c, o, -1.0 / h2);
                }
                FaceKind::MicroBoundary if bc == InterfaceBc::Dirichlet => diag += 2.0 / h2,
                _ => {}
            }
        }
        t.push(c, c, diag);
    }
    t.build_symmetric()
}

/// Velocity unknowns: interior fluid faces, x-faces first.
#[derive(Clone, Debug)]
pub struct VelocityDofs {
    /// `(axis, active face id)` per unknown.
    pub dofs: Vec<(Axis, usize)>,
    xmap: Vec<Option<usize>>,
    ymap: Vec<Option<usize>>,
}

impl VelocityDofs {
    pub fn new(grid: &PerforatedGrid) -> Self {
        let mut dofs = Vec::new();
        let mut maps = [Vec::new(), Vec::new()];
        for (k, axis) in [Axis::X, Axis::Y].into_iter().enumerate() {
            let fs = grid.faces(axis);
            for (id, kind) in fs.kinds.iter().enumerate() {
                if *kind == FaceKind::InteriorFluid {
                    maps[k].push(Some(dofs.len()));
                    dofs.push((axis, id));
                } else {
                    maps[k].push(None);
                }
            }
        }
        let [xmap, ymap] = maps;
        VelocityDofs { dofs, xmap, ymap }
    }

    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    /// Unknown index of an active face, if it is an interior fluid face.
    pub fn dof(&self, axis: Axis, active_id: usize) -> Option<usize> {
        match axis {
            Axis::X => self.xmap[active_id],
            Axis::Y => self.ymap[active_id],
        }
    }

    pub fn dof_at(&self, grid: &PerforatedGrid, axis: Axis, i: usize, j: usize) -> Option<usize> {
        grid.faces(axis).id(i, j).and_then(|id| self.dof(axis, id))
    }

    pub fn to_field(&self, grid: &PerforatedGrid, u: &[f64]) -> VelocityField {
        let mut v = VelocityField::zeros(grid);
        for (k, &(axis, id)) in self.dofs.iter().enumerate() {
            v.component_mut(axis).values[id] = u[k];
        }
        v
    }

    /// Restriction of a face field to the unknowns (boundary faces dropped).
    pub fn from_field(&self, v: &VelocityField) -> Vec<f64> {
        self.dofs
            .iter()
            .map(|&(axis, id)| v.component(axis).values[id])
            .collect()
    }
}

/// `−Δ_h` on MAC velocity unknowns with no-slip on Γ and ∂Ω.
///
/// A neighbouring face that lies on a wall contributes a zero value at distance h;
/// a wall halfway between two face rows is handled by reflection.
pub fn vector_laplacian(grid: &PerforatedGrid, dofs: &VelocityDofs) -> SparseMatrix {
    let n = grid.n();
    let h2 = grid.h() * grid.h();
    let nd = dofs.len();
    let mut t = TripletBuilder::new(nd, nd);
    let step = |k: usize, d: isize| -> Option<usize> {
        let m = k as isize + d;
        if grid.is_periodic() {
            Some(m.rem_euclid(n as isize) as usize)
        } else if m < 0 {
            None
        } else {
            Some(m as usize)
        }
    };
    for (row, &(axis, id)) in dofs.dofs.iter().enumerate() {
        let (i, j) = grid.faces(axis).faces[id];
        let mut diag = 4.0 / h2;
        // Along the normal direction neighbours are faces of the same cells.
        // Across, the lattice of this orientation has n rows (or columns).
        let (along, across): ([(isize, isize); 2], [(isize, isize); 2]) = match axis {
            Axis::X => ([(-1, 0), (1, 0)], [(0, -1), (0, 1)]),
            Axis::Y => ([(0, -1), (0, 1)], [(-1, 0), (1, 0)]),
        };
        for (di, dj) in along {
            let (Some(ni), Some(nj)) = (step(i, di), step(j, dj)) else {
                continue;
            };
            if let Some(col) = dofs.dof_at(grid, axis, ni, nj) {
                t.push(row, col, -1.0 / h2);
            }
        }
        for (di, dj) in across {
            let ni = step(i, di);
            let nj = step(j, dj);
            let inside = match (ni, nj) {
                (Some(ni), Some(nj)) => match axis {
                    Axis::X => nj < n,
                    Axis::Y => ni < n,
                },
                _ => false,
            };
            if !inside {
                diag += 1.0 / h2;
                continue;
            }
            let (ni, nj) = (ni.unwrap(), nj.unwrap());
            match grid.face_kind(axis, ni, nj) {
                FaceKind::InteriorFluid => {
                    let col = dofs.dof_at(grid, axis, ni, nj).unwrap();
                    t.push(row, col, -1.0 / h2);
                }
                FaceKind::Solid => diag += 1.0 / h2,
                _ => {}
            }
        }
        t.push(row, row, diag);
    }
    t.build_symmetric()
}

/// Discrete divergence from velocity unknowns to fluid cells.
pub fn divergence_matrix(grid: &PerforatedGrid, dofs: &VelocityDofs) -> SparseMatrix {
    let h = grid.h();
    let mut t = TripletBuilder::new(grid.num_fluid_cells(), dofs.len());
    for (c, &(i, j)) in grid.cells().iter().enumerate() {
        for (axis, fi, fj, sign) in grid.cell_faces(i, j) {
            if let Some(d) = dofs.dof_at(grid, axis, fi, fj) {
                t.push(c, d, sign / h);
            }
        }
    }
    t.build()
}

/// Divergence of a face field on fluid cells using every active face.
pub fn divergence(grid: &PerforatedGrid, v: &VelocityField) -> FieldOnGrid {
    let h = grid.h();
    let values = grid
        .cells()
        .iter()
        .map(|&(i, j)| {
            grid.cell_faces(i, j)
                .iter()
                .map(|&(axis, fi, fj, sign)| {
                    grid.faces(axis)
                        .id(fi, fj)
                        .map_or(0.0, |id| sign * v.component(axis).values[id])
                })
                .sum::<f64>()
                / h
        })
        .collect();
    FieldOnGrid {
        placement: Placement::CellCenter,
        values,
    }
}

/// Difference quotients of a cell field across interior fluid faces
/// (zero on boundary faces).
pub fn face_gradient(grid: &PerforatedGrid, f: &FieldOnGrid) -> VelocityField {
    let h = grid.h();
    let mut g = VelocityField::zeros(grid);
    for axis in [Axis::X, Axis::Y] {
        let fs = grid.faces(axis);
        let out = g.component_mut(axis);
        for (id, &(i, j)) in fs.faces.iter().enumerate() {
            if fs.kinds[id] != FaceKind::InteriorFluid {
                continue;
            }
            let (lo, hi) = grid.face_cells(axis, i, j);
            let (lo, hi) = (lo.unwrap(), hi.unwrap());
            let a = f.values[grid.cell_id(lo.0, lo.1).unwrap()];
            let b = f.values[grid.cell_id(hi.0, hi.1).unwrap()];
            out.values[id] = (b - a) / h;
        }
    }
    g
}

/// Arithmetic mean of the two cells adjacent to each interior fluid face.
pub fn cell_to_faces(grid: &PerforatedGrid, f: &FieldOnGrid) -> VelocityField {
    let mut g = VelocityField::zeros(grid);
    for axis in [Axis::X, Axis::Y] {
        let fs = grid.faces(axis);
        let out = g.component_mut(axis);
        for (id, &(i, j)) in fs.faces.iter().enumerate() {
            let (lo, hi) = grid.face_cells(axis, i, j);
            let vals: Vec<f64> = [lo, hi]
                .into_iter()
                .flatten()
                .filter_map(|(ci, cj)| grid.cell_id(ci, cj))
                .map(|c| f.values[c])
                .collect();
            out.values[id] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    g
}

/// Symmetric tensor diffusion `−∇·(T∇u)` on an unperforated, non-periodic grid
/// with no-flux on ∂Ω. Cross terms use node-centred gradients at interior nodes,
/// which keeps the operator symmetric and gives consistent face fluxes.
#[derive(Clone, Debug)]
pub struct TensorDiffusion {
    n: usize,
    h: f64,
    tensor: [[f64; 2]; 2],
    matrix: SparseMatrix,
}

impl TensorDiffusion {
    pub fn new(grid: &PerforatedGrid, tensor: [[f64; 2]; 2]) -> Self {
        let n = grid.n();
        assert!(!grid.is_periodic() && grid.num_fluid_cells() == n * n);
        let mut op = TensorDiffusion {
            n,
            h: grid.h(),
            tensor,
            matrix: SparseMatrix::identity(0),
        };
        let mut t = TripletBuilder::new(n * n, n * n);
        let h = op.h;
        for axis in [Axis::X, Axis::Y] {
            for (i, j) in op.interior_faces(axis) {
                let stencil = op.flux_stencil(axis, i, j);
                let (lo, hi) = match axis {
                    Axis::X => ((i - 1, j), (i, j)),
                    Axis::Y => ((i, j - 1), (i, j)),
                };
                // −div: the flux leaves `lo` and enters `hi`.
                for &(c, w) in &stencil {
                    t.push(lo.1 * n + lo.0, c, -w / h);
                    t.push(hi.1 * n + hi.0, c, w / h);
                }
            }
        }
        op.matrix = t.build_symmetric();
        op
    }

    fn interior_faces(&self, axis: Axis) -> Vec<(usize, usize)> {
        let n = self.n;
        match axis {
            Axis::X => (0..n).flat_map(|j| (1..n).map(move |i| (i, j))).collect(),
            Axis::Y => (1..n).flat_map(|j| (0..n).map(move |i| (i, j))).collect(),
        }
    }

    /// Weights of cell values in the node gradient component along `axis`.
    fn node_gradient(&self, axis: Axis, i: usize, j: usize) -> Vec<(usize, f64)> {
        let n = self.n;
        if i == 0 || j == 0 || i == n || j == n {
            return Vec::new();
        }
        let w = 0.5 / self.h;
        let c = |a: usize, b: usize| b * n + a;
        match axis {
            Axis::X => vec![
                (c(i, j), w),
                (c(i, j - 1), w),
                (c(i - 1, j), -w),
                (c(i - 1, j - 1), -w),
            ],
            Axis::Y => vec![
                (c(i - 1, j), w),
                (c(i, j), w),
                (c(i - 1, j - 1), -w),
                (c(i, j - 1), -w),
            ],
        }
    }

    /// Stencil of the normal component of `T∇u` on an interior face.
    fn flux_stencil(&self, axis: Axis, i: usize, j: usize) -> Vec<(usize, f64)> {
        let n = self.n;
        let h = self.h;
        let t = self.tensor;
        let mut s = Vec::with_capacity(10);
        let (lo, hi, diag, nodes, other) = match axis {
            Axis::X => ((i - 1, j), (i, j), t[0][0], [(i, j), (i, j + 1)], Axis::Y),
            Axis::Y => ((i, j - 1), (i, j), t[1][1], [(i, j), (i + 1, j)], Axis::X),
        };
        s.push((hi.1 * n + hi.0, diag / h));
        s.push((lo.1 * n + lo.0, -diag / h));
        if t[0][1] != 0.0 {
            for (a, b) in nodes {
                for (c, w) in self.node_gradient(other, a, b) {
                    s.push((c, 0.5 * t[0][1] * w));
                }
            }
        }
        s
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn tensor(&self) -> [[f64; 2]; 2] {
        self.tensor
    }

    /// Face values of `T∇u`·e_axis; zero on ∂Ω.
    pub fn fluxes(&self, grid: &PerforatedGrid, u: &[f64]) -> VelocityField {
        let mut v = VelocityField::zeros(grid);
        for axis in [Axis::X, Axis::Y] {
            for (i, j) in self.interior_faces(axis) {
                let val: f64 = self
                    .flux_stencil(axis, i, j)
                    .iter()
                    .map(|&(c, w)| w * u[c])
                    .sum();
                let id = grid.faces(axis).id(i, j).unwrap();
                v.component_mut(axis).values[id] = val;
            }
        }
        v
    }
}

/// Net outflow per unit area of `a c` through interior fluid faces, first-order upwind.
/// Γ and ∂Ω faces carry no flux.
pub fn upwind_divergence(grid: &PerforatedGrid, a: &VelocityField, c: &[f64], out: &mut [f64]) {
    let h = grid.h();
    out.iter_mut().for_each(|v| *v = 0.0);
    for axis in [Axis::X, Axis::Y] {
        let fs = grid.faces(axis);
        let comp = &a.component(axis).values;
        for (id, &(i, j)) in fs.faces.iter().enumerate() {
            if fs.kinds[id] != FaceKind::InteriorFluid {
                continue;
            }
            let (lo, hi) = grid.face_cells(axis, i, j);
            let (lo, hi) = (lo.unwrap(), hi.unwrap());
            let l = grid.cell_id(lo.0, lo.1).unwrap();
            let r = grid.cell_id(hi.0, hi.1).unwrap();
            let s = comp[id];
            let flux = if s >= 0.0 { s * c[l] } else { s * c[r] } / h;
            out[l] += flux;
            out[r] -= flux;
        }
    }
}

/// Largest total outflow rate of a cell, `Σ_out |a|/h`; the explicit upwind step
/// is positive when `dt` times this (plus reaction) stays below one.
pub fn max_outflow_rate(grid: &PerforatedGrid, a: &VelocityField) -> f64 {
    let h = grid.h();
    let mut rate = vec![0.0; grid.num_fluid_cells()];
    for axis in [Axis::X, Axis::Y] {
        let fs = grid.faces(axis);
        let comp = &a.component(axis).values;
        for (id, &(i, j)) in fs.faces.iter().enumerate() {
            if fs.kinds[id] != FaceKind::InteriorFluid {
                continue;
            }
            let (lo, hi) = grid.face_cells(axis, i, j);
            let (lo, hi) = (lo.unwrap(), hi.unwrap());
            let s = comp[id];
            let (up, _) = if s >= 0.0 { (lo, hi) } else { (hi, lo) };
            rate[grid.cell_id(up.0, up.1).unwrap()] += s.abs() / h;
        }
    }
    rate.into_iter().fold(0.0, f64::max)
}
