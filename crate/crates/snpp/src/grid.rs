//! Unit cell and ε-periodic perforated domain on a Cartesian MAC grid.
//!
//! Cells are indexed `(i, j)` with `i` along x. The x-face `(i, j)` sits at
//! `x = i h` between cells `(i-1, j)` and `(i, j)`; y-faces likewise. Scalars live
//! on fluid cells, velocity components on *active* faces: fluid/fluid faces plus
//! faces on the outer boundary ∂Ω (where the discrete velocity is zero but
//! reconstructions need not be).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub hole_side: f64,
    pub resolution: usize,
}

impl CellGeometry {
    pub fn new(hole_side: f64, resolution: usize) -> Self {
        CellGeometry {
            hole_side,
            resolution,
        }
    }

    /// Returns the index range `[a, b)` of solid cells along each axis.
    pub fn hole_range(&self) -> Result<(usize, usize)> {
        let s = self.hole_side;
        if !(0.0..1.0).contains(&s) {
            return Err(Error::HoleTouchesBoundary(s));
        }
        if self.resolution == 0 {
            return Err(Error::InvalidConfig("resolution >= 1 required".into()));
        }
        if s == 0.0 {
            return Ok((self.resolution, self.resolution));
        }
        let n = self.resolution as f64;
        let margin = n * (1.0 - s) / 2.0;
        let a = margin.round();
        if (margin - a).abs() > 1e-9 {
            return Err(Error::MisalignedHole(format!(
                "N(1 - hole_side)/2 = {} * {} / 2 = {margin} is not an integer",
                self.resolution,
                1.0 - s
            )));
        }
        let a = a as usize;
        let b = self.resolution - a;
        if s > 0.0 && a == 0 {
            return Err(Error::HoleTouchesBoundary(s));
        }
        Ok((a, b))
    }

    pub fn has_hole(&self) -> bool {
        self.hole_side > 0.0
    }

    /// Fluid volume fraction |Y_l|.
    pub fn porosity(&self) -> f64 {
        1.0 - self.hole_side * self.hole_side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Fluid,
    Solid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaceKind {
    InteriorFluid,
    MicroBoundary,
    OuterBoundary,
    Solid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    CellCenter,
    XFace,
    YFace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Active faces of one orientation.
#[derive(Clone, Debug)]
pub struct FaceSet {
    /// `(i, j)` face indices, row-major in `j` then `i`.
    pub faces: Vec<(usize, usize)>,
    pub kinds: Vec<FaceKind>,
    /// Dense map from face lattice index to active index.
    id: Vec<u32>,
    /// Every face of the lattice, classified.
    all_kinds: Vec<FaceKind>,
    ncols: usize,
}

impl FaceSet {
    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn id(&self, i: usize, j: usize) -> Option<usize> {
        let v = self.id[j * self.ncols + i];
        (v != NONE).then_some(v as usize)
    }

    pub fn kind(&self, i: usize, j: usize) -> FaceKind {
        self.all_kinds[j * self.ncols + i]
    }
}

#[derive(Clone, Debug)]
pub struct PerforatedGrid {
    n: usize,
    h: f64,
    periodic: bool,
    epsilon: f64,
    geometry: CellGeometry,
    cell_kind: Vec<CellKind>,
    cell_id: Vec<u32>,
    cells: Vec<(usize, usize)>,
    xfaces: FaceSet,
    yfaces: FaceSet,
}

/// Periodic cell with periodic wrapping on ∂Y.
pub fn build_unit_cell(geometry: CellGeometry) -> Result<PerforatedGrid> {
    geometry.hole_range()?;
    PerforatedGrid::build(geometry, 1, true, 1.0)
}

/// M×M tiling of the unit cell with M = 1/ε, no-flux/no-slip outer boundary.
pub fn build_perforated_grid(epsilon: f64, geometry: CellGeometry) -> Result<PerforatedGrid> {
    let m = reciprocal(epsilon)?;
    geometry.hole_range()?;
    PerforatedGrid::build(geometry, m, false, epsilon)
}

/// Returns `1/ε` when it is a positive integer.
pub fn reciprocal(epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::NonIntegerReciprocal(epsilon));
    }
    let m = 1.0 / epsilon;
    let r = m.round();
    if (m - r).abs() > 1e-9 * m {
        return Err(Error::NonIntegerReciprocal(epsilon));
    }
    Ok(r as usize)
}

/// Wrap an index into `0..n`.
pub fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

impl PerforatedGrid {
    /// Unperforated `n × n` grid on Ω, used by the macroscopic solvers.
    pub fn unperforated(n: usize) -> PerforatedGrid {
        PerforatedGrid::build(CellGeometry::new(0.0, n), 1, false, 1.0)
            .expect("an unperforated grid is always valid")
    }

    fn build(geometry: CellGeometry, m: usize, periodic: bool, epsilon: f64) -> Result<Self> {
        let nc = geometry.resolution;
        let (a, b) = geometry.hole_range()?;
        let n = nc * m;
        let h = 1.0 / n as f64;
        let solid_1d = |k: usize| geometry.has_hole() && (a..b).contains(&(k % nc));
        let mut cell_kind = vec![CellKind::Fluid; n * n];
        for j in 0..n {
            for i in 0..n {
                if solid_1d(i) && solid_1d(j) {
                    cell_kind[j * n + i] = CellKind::Solid;
                }
            }
        }
        let mut cell_id = vec![NONE; n * n];
        let mut cells = Vec::new();
        for j in 0..n {
            for i in 0..n {
                if cell_kind[j * n + i] == CellKind::Fluid {
                    cell_id[j * n + i] = cells.len() as u32;
                    cells.push((i, j));
                }
            }
        }
        let mut grid = PerforatedGrid {
            n,
            h,
            periodic,
            epsilon,
            geometry,
            cell_kind,
            cell_id,
            cells,
            xfaces: FaceSet {
                faces: vec![],
                kinds: vec![],
                id: vec![],
                all_kinds: vec![],
                ncols: 0,
            },
            yfaces: FaceSet {
                faces: vec![],
                kinds: vec![],
                id: vec![],
                all_kinds: vec![],
                ncols: 0,
            },
        };
        grid.xfaces = grid.classify_faces(Axis::X);
        grid.yfaces = grid.classify_faces(Axis::Y);
        if !grid.fluid_connected() {
            return Err(Error::DegenerateGeometry(
                "fluid region is not connected".into(),
            ));
        }
        Ok(grid)
    }

    fn classify_faces(&self, axis: Axis) -> FaceSet {
        let n = self.n;
        let nlines = if self.periodic { n } else { n + 1 };
        let (ncols, nrows) = match axis {
            Axis::X => (nlines, n),
            Axis::Y => (n, nlines),
        };
        let mut all_kinds = Vec::with_capacity(ncols * nrows);
        let mut faces = Vec::new();
        let mut kinds = Vec::new();
        let mut id = vec![NONE; ncols * nrows];
        for j in 0..nrows {
            for i in 0..ncols {
                let (lo, hi) = self.face_cells(axis, i, j);
                let fl = |c: Option<(usize, usize)>| c.map(|(ci, cj)| self.is_fluid(ci, cj));
                let kind = match (fl(lo), fl(hi)) {
                    (Some(true), Some(true)) => FaceKind::InteriorFluid,
                    (Some(true), Some(false)) | (Some(false), Some(true)) => {
                        FaceKind::MicroBoundary
                    }
                    (Some(true), None) | (None, Some(true)) => FaceKind::OuterBoundary,
                    _ => FaceKind::Solid,
                };
                all_kinds.push(kind);
                if matches!(kind, FaceKind::InteriorFluid | FaceKind::OuterBoundary) {
                    id[j * ncols + i] = faces.len() as u32;
                    faces.push((i, j));
                    kinds.push(kind);
                }
            }
        }
        FaceSet {
            faces,
            kinds,
            id,
            all_kinds,
            ncols,
        }
    }

    /// Cells on the low and high side of a face, `None` outside Ω.
    pub fn face_cells(
        &self,
        axis: Axis,
        i: usize,
        j: usize,
    ) -> (Option<(usize, usize)>, Option<(usize, usize)>) {
        let n = self.n;
        let along = match axis {
            Axis::X => i,
            Axis::Y => j,
        };
        let lo = if along == 0 {
            self.periodic.then_some(n - 1)
        } else {
            Some(along - 1)
        };
        let hi = if along == n { None } else { Some(along) };
        let place = |k: usize| match axis {
            Axis::X => (k, j),
            Axis::Y => (i, k),
        };
        (lo.map(place), hi.map(place))
    }

    fn fluid_connected(&self) -> bool {
        if self.cells.is_empty() {
            return false;
        }
        let mut seen = vec![false; self.cells.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(c) = stack.pop() {
            let (i, j) = self.cells[c];
            for (nb, _) in self.fluid_neighbors(i, j) {
                if !seen[nb] {
                    seen[nb] = true;
                    count += 1;
                    stack.push(nb);
                }
            }
        }
        count == self.cells.len()
    }

    /// Fluid neighbours across interior fluid faces, with the axis of the shared face.
    pub fn fluid_neighbors(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, Axis)> + '_ {
        let n = self.n;
        let mut out: [(Option<usize>, Axis); 4] = [(None, Axis::X); 4];
        let faces = [
            (Axis::X, i, j, true),
            (Axis::X, i + 1, j, false),
            (Axis::Y, i, j, true),
            (Axis::Y, i, j + 1, false),
        ];
        for (k, &(axis, fi, fj, low_side)) in faces.iter().enumerate() {
            let (fi, fj) = if self.periodic {
                (fi % n, fj % n)
            } else {
                (fi, fj)
            };
            if self.face_kind(axis, fi, fj) == FaceKind::InteriorFluid {
                let (lo, hi) = self.face_cells(axis, fi, fj);
                let (ci, cj) = if low_side { lo.unwrap() } else { hi.unwrap() };
                out[k] = (self.cell_id(ci, cj), axis);
            }
        }
        out.into_iter().filter_map(|(c, a)| c.map(|c| (c, a)))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn geometry(&self) -> CellGeometry {
        self.geometry
    }

    /// Grid cells per period.
    pub fn cells_per_period(&self) -> usize {
        self.geometry.resolution
    }

    pub fn cell_kind(&self, i: usize, j: usize) -> CellKind {
        self.cell_kind[j * self.n + i]
    }

    pub fn is_fluid(&self, i: usize, j: usize) -> bool {
        self.cell_kind(i, j) == CellKind::Fluid
    }

    pub fn cell_id(&self, i: usize, j: usize) -> Option<usize> {
        let v = self.cell_id[j * self.n + i];
        (v != NONE).then_some(v as usize)
    }

    /// Fluid cells in storage order.
    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn num_fluid_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn faces(&self, axis: Axis) -> &FaceSet {
        match axis {
            Axis::X => &self.xfaces,
            Axis::Y => &self.yfaces,
        }
    }

    pub fn face_kind(&self, axis: Axis, i: usize, j: usize) -> FaceKind {
        self.faces(axis).kind(i, j)
    }

    pub fn entity_count(&self, placement: Placement) -> usize {
        match placement {
            Placement::CellCenter => self.cells.len(),
            Placement::XFace => self.xfaces.len(),
            Placement::YFace => self.yfaces.len(),
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h)
    }

    pub fn face_center(&self, axis: Axis, i: usize, j: usize) -> (f64, f64) {
        match axis {
            Axis::X => (i as f64 * self.h, (j as f64 + 0.5) * self.h),
            Axis::Y => ((i as f64 + 0.5) * self.h, j as f64 * self.h),
        }
    }

    /// Coordinates of every entity of a placement, in storage order.
    pub fn positions(&self, placement: Placement) -> Vec<(f64, f64)> {
        match placement {
            Placement::CellCenter => self
                .cells
                .iter()
                .map(|&(i, j)| self.cell_center(i, j))
                .collect(),
            Placement::XFace => self
                .xfaces
                .faces
                .iter()
                .map(|&(i, j)| self.face_center(Axis::X, i, j))
                .collect(),
            Placement::YFace => self
                .yfaces
                .faces
                .iter()
                .map(|&(i, j)| self.face_center(Axis::Y, i, j))
                .collect(),
        }
    }

    /// Fluid area |Ω^ε| (or |Y_l| for the unit cell).
    pub fn fluid_area(&self) -> f64 {
        self.cells.len() as f64 * self.h * self.h
    }

    pub fn porosity(&self) -> f64 {
        self.fluid_area()
    }

    /// Total length of solid/fluid interface faces.
    pub fn interface_measure(&self) -> f64 {
        let count = |f: &FaceSet| {
            f.all_kinds
                .iter()
                .filter(|k| **k == FaceKind::MicroBoundary)
                .count()
        };
        (count(&self.xfaces) + count(&self.yfaces)) as f64 * self.h
    }

    /// Number of Γ faces touching a fluid cell.
    pub fn interface_faces_of(&self, i: usize, j: usize) -> usize {
        self.cell_faces(i, j)
            .iter()
            .filter(|&&(axis, fi, fj, _)| self.face_kind(axis, fi, fj) == FaceKind::MicroBoundary)
            .count()
    }

    /// The four faces of a cell as `(axis, i, j, outward sign)`.
    pub fn cell_faces(&self, i: usize, j: usize) -> [(Axis, usize, usize, f64); 4] {
        let n = self.n;
        let w = |k: usize| if self.periodic { k % n } else { k };
        [
            (Axis::X, i, j, -1.0),
            (Axis::X, w(i + 1), j, 1.0),
            (Axis::Y, i, j, -1.0),
            (Axis::Y, i, w(j + 1), 1.0),
        ]
    }

    /// Position of a micro entity inside the periodic unit cell with `N` cells per side.
    pub fn cell_index_in_period(&self, i: usize, j: usize) -> (usize, usize) {
        let nc = self.geometry.resolution;
        (i % nc, j % nc)
    }

    /// Plain-text PGM map: 0 solid, 1 fluid next to Γ, 2 other fluid. Top row is y = 1.
    pub fn to_pgm(&self) -> String {
        let n = self.n;
        let mut s = format!("P2\n# snpp grid n={n} eps={}\n{n} {n}\n2\n", self.epsilon);
        for j in (0..n).rev() {
            let row: Vec<&str> = (0..n)
                .map(|i| {
                    if !self.is_fluid(i, j) {
                        "0"
                    } else if self.interface_faces_of(i, j) > 0 {
                        "1"
                    } else {
                        "2"
                    }
                })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Values on the fluid entities of one placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOnGrid {
    pub placement: Placement,
    pub values: Vec<f64>,
}

impl FieldOnGrid {
    pub fn zeros(grid: &PerforatedGrid, placement: Placement) -> Self {
        FieldOnGrid {
            placement,
            values: vec![0.0; grid.entity_count(placement)],
        }
    }

    pub fn from_fn(
        grid: &PerforatedGrid,
        placement: Placement,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let values = grid
            .positions(placement)
            .into_iter()
            .map(|(x, y)| f(x, y))
            .collect();
        FieldOnGrid { placement, values }
    }

    pub fn check(&self, grid: &PerforatedGrid, placement: Placement) -> Result<()> {
        if self.placement != placement {
            return Err(Error::PlacementMismatch(format!(
                "expected {placement:?}, found {:?}",
                self.placement
            )));
        }
        if self.values.len() != grid.entity_count(placement) {
            return Err(Error::PlacementMismatch(format!(
                "{} values for {} entities",
                self.values.len(),
                grid.entity_count(placement)
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    pub fn sub(&self, other: &FieldOnGrid) -> FieldOnGrid {
        assert_eq!(self.placement, other.placement);
        FieldOnGrid {
            placement: self.placement,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> FieldOnGrid {
        FieldOnGrid {
            placement: self.placement,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn axpy(&mut self, a: f64, x: &FieldOnGrid) {
        assert_eq!(self.placement, x.placement);
        self.values
            .iter_mut()
            .zip(&x.values)
            .for_each(|(y, x)| *y += a * x);
    }
}

/// MAC velocity: x-components on x-faces, y-components on y-faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub x: FieldOnGrid,
    pub y: FieldOnGrid,
}

impl VelocityField {
    pub fn zeros(grid: &PerforatedGrid) -> Self {
        VelocityField {
            x: FieldOnGrid::zeros(grid, Placement::XFace),
            y: FieldOnGrid::zeros(grid, Placement::YFace),
        }
    }

    pub fn component(&self, axis: Axis) -> &FieldOnGrid {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
        }
    }

    pub fn component_mut(&mut self, axis: Axis) -> &mut FieldOnGrid {
        match axis {
            Axis::X => &mut self.x,
            Axis::Y => &mut self.y,
        }
    }

    pub fn sub(&self, o: &VelocityField) -> VelocityField {
        VelocityField {
            x: self.x.sub(&o.x),
            y: self.y.sub(&o.y),
        }
    }

    pub fn scaled(&self, s: f64) -> VelocityField {
        VelocityField {
            x: self.x.scaled(s),
            y: self.y.scaled(s),
        }
    }

    pub fn axpy(&mut self, a: f64, o: &VelocityField) {
        self.x.axpy(a, &o.x);
        self.y.axpy(a, &o.y);
    }

    pub fn max_abs(&self) -> f64 {
        self.x.max_abs().max(self.y.max_abs())
    }
}

/// Bilinear interpolation on a regular lattice `(x0 + i h, y0 + j h)`,
/// linearly extrapolated outside the lattice hull.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl Lattice {
    /// Cell-centred lattice of an unperforated grid.
    pub fn from_cell_field(grid: &PerforatedGrid, f: &FieldOnGrid) -> Result<Lattice> {
        f.check(grid, Placement::CellCenter)?;
        if grid.num_fluid_cells() != grid.n() * grid.n() {
            return Err(Error::PlacementMismatch(
                "macro field must live on an unperforated grid".into(),
            ));
        }
        let h = grid.h();
        Ok(Lattice {
            nx: grid.n(),
            ny: grid.n(),
            x0: 0.5 * h,
            y0: 0.5 * h,
            h,
            values: f.values.clone(),
        })
    }

    /// Face lattice of one velocity component on an unperforated, non-periodic grid.
    pub fn from_face_field(grid: &PerforatedGrid, axis: Axis, f: &FieldOnGrid) -> Result<Lattice> {
        let placement = match axis {
            Axis::X => Placement::XFace,
            Axis::Y => Placement::YFace,
        };
        f.check(grid, placement)?;
        let n = grid.n();
        if grid.is_periodic() || grid.num_fluid_cells() != n * n {
            return Err(Error::PlacementMismatch(
                "face lattice needs an unperforated grid".into(),
            ));
        }
        let h = grid.h();
        Ok(match axis {
            Axis::X => Lattice {
                nx: n + 1,
                ny: n,
                x0: 0.0,
                y0: 0.5 * h,
                h,
                values: f.values.clone(),
            },
            Axis::Y => Lattice {
                nx: n,
                ny: n + 1,
                x0: 0.5 * h,
                y0: 0.0,
                h,
                values: f.values.clone(),
            },
        })
    }

    fn locate(t: f64, n: usize) -> (usize, f64) {
        if n < 2 {
            return (0, 0.0);
        }
        let i = (t.floor().max(0.0) as usize).min(n - 2);
        (i, t - i as f64)
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (i, s) = Self::locate((x - self.x0) / self.h, self.nx);
        let (j, t) = Self::locate((y - self.y0) / self.h, self.ny);
        let v = |i: usize, j: usize| self.values[j * self.nx + i];
        let i1 = (i + 1).min(self.nx - 1);
        let j1 = (j + 1).min(self.ny - 1);
        (1.0 - s) * (1.0 - t) * v(i, j)
            + s * (1.0 - t) * v(i1, j)
            + (1.0 - s) * t * v(i, j1)
            + s * t * v(i1, j1)
    }
}

/// Bilinear interpolation of a cell-centred macro field onto the fluid cells of a micro grid.
pub fn interpolate_macro_to_micro(
    macro_field: &FieldOnGrid,
    macro_grid: &PerforatedGrid,
    micro_grid: &PerforatedGrid,
) -> Result<FieldOnGrid> {
    let lat = Lattice::from_cell_field(macro_grid, macro_field)?;
    Ok(FieldOnGrid::from_fn(
        micro_grid,
        Placement::CellCenter,
        |x, y| lat.sample(x, y),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cell_counts() {
        let g = build_unit_cell(CellGeometry::new(0.0, 8)).unwrap();
        assert_eq!(g.num_fluid_cells(), 64);
        assert_eq!(g.porosity(), 1.0);
        assert_eq!(g.interface_measure(), 0.0);
        let g = build_unit_cell(CellGeometry::new(0.5, 16)).unwrap();
        assert_eq!(g.num_fluid_cells(), 192);
        assert!((g.porosity() - 0.75).abs() < 1e-15);
        assert!((g.interface_measure() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn misaligned_and_touching_holes() {
        assert!(matches!(
            build_unit_cell(CellGeometry::new(0.5, 10)),
            Err(Error::MisalignedHole(_))
        ));
        assert!(matches!(
            build_unit_cell(CellGeometry::new(1.0, 8)),
            Err(Error::HoleTouchesBoundary(_))
        ));
    }

    #[test]
    fn tiled_grid() {
        let g = build_perforated_grid(0.5, CellGeometry::new(0.5, 8)).unwrap();
        assert_eq!(g.n(), 16);
        let solid = (0..16)
            .flat_map(|j| (0..16).map(move |i| (i, j)))
            .filter(|&(i, j)| !g.is_fluid(i, j))
            .count();
        assert_eq!(solid, 4 * 16);
        assert!((g.porosity() - 0.75).abs() < 1e-15);
        // Γ^ε measure: ε · M² · 4 · hole_side.
        assert!((g.interface_measure() - 0.5 * 4.0 * 2.0).abs() < 1e-12);
        let g = build_perforated_grid(0.25, CellGeometry::new(0.0, 4)).unwrap();
        assert_eq!(g.num_fluid_cells(), 256);
        assert_eq!(g.interface_measure(), 0.0);
        assert!(matches!(
            build_perforated_grid(1.0 / 3.5, CellGeometry::new(0.5, 8)),
            Err(Error::NonIntegerReciprocal(_))
        ));
    }

    #[test]
    fn outer_faces_are_never_interface_faces() {
        let g = build_perforated_grid(0.25, CellGeometry::new(0.5, 4)).unwrap();
        let n = g.n();
        for j in 0..n {
            assert_eq!(g.face_kind(Axis::X, 0, j), FaceKind::OuterBoundary);
            assert_eq!(g.face_kind(Axis::X, n, j), FaceKind::OuterBoundary);
            assert_eq!(g.face_kind(Axis::Y, j, 0), FaceKind::OuterBoundary);
        }
    }

    #[test]
    fn refinement_preserves_measures() {
        for hole in [0.25, 0.5] {
            let a = build_perforated_grid(0.25, CellGeometry::new(hole, 8)).unwrap();
            let b = build_perforated_grid(0.25, CellGeometry::new(hole, 16)).unwrap();
            assert_eq!(a.porosity(), b.porosity());
            assert!((a.interface_measure() - b.interface_measure()).abs() < 1e-12);
        }
    }

    #[test]
    fn wrapping_round_trips() {
        for i in 0..7isize {
            assert_eq!(wrap(i + 7, 7), i as usize);
            assert_eq!(wrap(i - 7, 7), i as usize);
            assert_eq!(wrap(wrap(i + 7, 7) as isize - 7, 7), i as usize);
        }
    }

    #[test]
    fn periodic_faces_wrap() {
        let g = build_unit_cell(CellGeometry::new(0.5, 8)).unwrap();
        let (lo, hi) = g.face_cells(Axis::X, 0, 0);
        assert_eq!(lo, Some((7, 0)));
        assert_eq!(hi, Some((0, 0)));
        assert_eq!(g.faces(Axis::X).len(), g.faces(Axis::Y).len());
    }

    #[test]
    fn interpolation_exact_on_affine() {
        let mg = PerforatedGrid::unperforated(8);
        let micro = build_perforated_grid(0.25, CellGeometry::new(0.5, 8)).unwrap();
        let c = FieldOnGrid::from_fn(&mg, Placement::CellCenter, |_, _| 3.0);
        let out = interpolate_macro_to_micro(&c, &mg, &micro).unwrap();
        assert!(out.values.iter().all(|v| (v - 3.0).abs() < 1e-14));
        let fx = FieldOnGrid::from_fn(&mg, Placement::CellCenter, |x, _| x);
        let out = interpolate_macro_to_micro(&fx, &mg, &micro).unwrap();
        for (v, (x, _)) in out
            .values
            .iter()
            .zip(micro.positions(Placement::CellCenter))
        {
            assert!((v - x).abs() < 1e-14);
        }
        let bad = FieldOnGrid::zeros(&mg, Placement::XFace);
        assert!(matches!(
            interpolate_macro_to_micro(&bad, &mg, &micro),
            Err(Error::PlacementMismatch(_))
        ));
    }

    #[test]
    fn interpolation_second_order_on_smooth_field() {
        let f = |x: f64, y: f64| (2.0 * x).sin() * (3.0 * y).cos();
        let micro = build_perforated_grid(1.0 / 16.0, CellGeometry::new(0.5, 8)).unwrap();
        let err = |n: usize| {
            let mg = PerforatedGrid::unperforated(n);
            let m = FieldOnGrid::from_fn(&mg, Placement::CellCenter, f);
            let out = interpolate_macro_to_micro(&m, &mg, &micro).unwrap();
            out.values
                .iter()
                .zip(micro.positions(Placement::CellCenter))
                .map(|(v, (x, y))| (v - f(x, y)).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(16), err(32));
        assert!(e1 / e2 > 3.5, "ratio {}", e1 / e2);
        // x·y is bilinear and therefore reproduced exactly.
        let mg = PerforatedGrid::unperforated(16);
        let m = FieldOnGrid::from_fn(&mg, Placement::CellCenter, |x, y| x * y);
        let out = interpolate_macro_to_micro(&m, &mg, &micro).unwrap();
        for (v, (x, y)) in out
            .values
            .iter()
            .zip(micro.positions(Placement::CellCenter))
        {
            assert!((v - x * y).abs() < 1e-13);
        }
    }

    #[test]
    fn pgm_dump_shape() {
        let g = build_unit_cell(CellGeometry::new(0.5, 4)).unwrap();
        let s = g.to_pgm();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines.len(), 4 + 4);
        assert_eq!(lines[5], "1 0 0 1");
    }

    proptest::proptest! {
        #[test]
        fn admissible_grids_are_connected(m in 1usize..6, k in 1usize..4, half in 0usize..3) {
            // N = 2(k + half); margin k; hole = 1 - 2k/N.
            let n = 2 * (k + half);
            let hole = 1.0 - 2.0 * k as f64 / n as f64;
            let g = build_perforated_grid(1.0 / m as f64, CellGeometry::new(hole, n));
            proptest::prop_assert!(g.is_ok());
        }
    }
}
