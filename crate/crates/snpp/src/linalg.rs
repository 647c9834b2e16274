//! Compressed sparse row storage, preconditioned conjugate gradients and an
//! Uzawa (pressure Schur complement) solver for saddle-point systems.

use crate::error::{Error, Result};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Side};

/// Compatibility threshold for singular systems, relative to the l1 norm of the data.
const COMPAT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    None,
    ZeroMean,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub gauge: Gauge,
    /// Jacobi preconditioning. Plain CG keeps `1ᵀr` fixed when the constant
    /// vector is an eigenvector of `A`, which the transport solves rely on.
    #[serde(default = "default_true")]
    pub jacobi: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 20_000,
            relative_tolerance: 1e-10,
            gauge: Gauge::None,
            jacobi: true,
        }
    }
}

impl SolverSettings {
    pub fn with_gauge(mut self, gauge: Gauge) -> Self {
        self.gauge = gauge;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.relative_tolerance = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relative_tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "relative_tolerance > 0 required".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations >= 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

/// Triplet accumulator; duplicates are summed when finalized.
#[derive(Clone, Debug, Default)]
pub struct TripletBuilder {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(rows: usize, cols: usize) -> Self {
        TripletBuilder {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.entries.push((r, c, v));
    }

    pub fn build(self) -> SparseMatrix {
        self.finish(false)
    }

    pub fn build_symmetric(self) -> SparseMatrix {
        self.finish(true)
    }

    fn finish(mut self, symmetric: bool) -> SparseMatrix {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.rows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
            symmetric,
        }
    }
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            t.push(i, i, 1.0);
        }
        t.build_symmetric()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = s;
        }
    }

    /// `y = Aᵀ x`.
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.values[k] * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut t = TripletBuilder::new(self.cols, self.rows);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                t.push(j, i, v);
            }
        }
        t.build()
    }

    /// Largest |A_ij − A_ji| over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Dense copy, for small oracle computations.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                d[i][j] += v;
            }
        }
        d
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a.iter().sum::<f64>() / a.len() as f64
    }
}

fn remove_mean(a: &mut [f64]) {
    let m = mean(a);
    a.iter_mut().for_each(|v| *v -= m);
}

fn check_compatible(b: &[f64]) -> Result<()> {
    let l1: f64 = b.iter().map(|v| v.abs()).sum();
    let s: f64 = b.iter().sum();
    if s.abs() > COMPAT_TOL * l1.max(f64::MIN_POSITIVE) {
        return Err(Error::IncompatibleRHS {
            mean: s / b.len().max(1) as f64,
        });
    }
    Ok(())
}

/// Solve `A x = b` from a zero initial guess.
pub fn cg_solve(a: &SparseMatrix, b: &[f64], settings: &SolverSettings) -> Result<Vec<f64>> {
    cg_solve_from(a, b, None, settings).map(|(x, _)| x)
}

/// Solve `A x = b` starting from `x0`; returns the solution and the iteration count.
pub fn cg_solve_from(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, usize)> {
    settings.validate()?;
    let n = a.rows();
    assert_eq!(a.cols(), n, "cg_solve needs a square matrix");
    assert_eq!(b.len(), n);
    let zero_mean = settings.gauge == Gauge::ZeroMean;
    let mut b = b.to_vec();
    if zero_mean {
        check_compatible(&b)?;
        remove_mean(&mut b);
    }
    let bnorm = norm2(&b);
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    if zero_mean {
        remove_mean(&mut x);
    }
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let target = settings.relative_tolerance * bnorm;
    let inv_diag: Option<Vec<f64>> = settings.jacobi.then(|| {
        a.diagonal()
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect()
    });
    let precond = |r: &[f64], z: &mut [f64]| {
        match &inv_diag {
            Some(d) => z
                .iter_mut()
                .zip(r)
                .zip(d)
                .for_each(|((z, r), d)| *z = r * d),
            None => z.copy_from_slice(r),
        }
        if zero_mean {
            remove_mean(z);
        }
    };

    let mut ax = vec![0.0; n];
    a.mul_vec_into(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let mut rnorm = norm2(&r);
    while rnorm > target {
        if iterations >= settings.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                residual: rnorm / bnorm,
            });
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::NotConverged {
                iterations,
                residual: rnorm / bnorm,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        rnorm = norm2(&r);
        // Recompute the true residual now and then to avoid drift.
        if iterations % 500 == 0 || rnorm <= target {
            a.mul_vec_into(&x, &mut ax);
            for i in 0..n {
                r[i] = b[i] - ax[i];
            }
            rnorm = norm2(&r);
        }
    }
    if zero_mean {
        remove_mean(&mut x);
    }
    a.mul_vec_into(&x, &mut ax);
    let resid = norm2(&b.iter().zip(&ax).map(|(b, ax)| b - ax).collect::<Vec<_>>());
    if resid > target * (1.0 + 1e-6) {
        return Err(Error::NotConverged {
            iterations,
            residual: resid / bnorm,
        });
    }
    Ok((x, iterations))
}

/// Statistics of a saddle solve, kept for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SaddleStats {
    pub outer_iterations: usize,
    pub momentum_residual: f64,
    pub divergence_residual: f64,
}

/// Solve `[[A, Bᵀ], [B, 0]] (u, q) = (f, g)` with `q` in the zero-mean gauge.
pub fn saddle_solve(
    a: &SparseMatrix,
    b: &SparseMatrix,
    f: &[f64],
    g: &[f64],
    settings: &SolverSettings,
) -> Result<(Vec<f64>, Vec<f64>)> {
    saddle_solve_from(a, b, f, g, None, settings).map(|(u, q, _)| (u, q))
}

pub fn saddle_solve_from(
    a: &SparseMatrix,
    b: &SparseMatrix,
    f: &[f64],
    g: &[f64],
    q0: Option<&[f64]>,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, Vec<f64>, SaddleStats)> {
    settings.validate()?;
    let nu = a.rows();
    let np = b.rows();
    assert_eq!(b.cols(), nu);
    assert_eq!(f.len(), nu);
    assert_eq!(g.len(), np);
    let mut g = g.to_vec();
    check_compatible(&g)?;
    remove_mean(&mut g);
    let scale = norm2(f) + norm2(&g);
    if scale == 0.0 {
        return Ok((vec![0.0; nu], vec![0.0; np], SaddleStats::default()));
    }
    let tol = settings.relative_tolerance;
    let target = tol * scale;
    let inner = SolverSettings {
        max_iterations: settings.max_iterations,
        relative_tolerance: tol * 1e-2,
        gauge: Gauge::None,
        jacobi: true,
    };
    let mut inner_guess: Option<Vec<f64>> = None;
    let solve_a = |rhs: &[f64], guess: Option<&[f64]>, rel: f64| -> Result<Vec<f64>> {
        if norm2(rhs) == 0.0 {
            return Ok(vec![0.0; nu]);
        }
        let s = SolverSettings {
            relative_tolerance: rel,
            ..inner
        };
        cg_solve_from(a, rhs, guess, &s).map(|(x, _)| x)
    };
    // Final momentum solves are measured against the outer scale, not their own rhs.
    let scaled = |rhs: &[f64]| {
        (inner.relative_tolerance * scale / norm2(rhs).max(f64::MIN_POSITIVE)).min(0.1)
    };

    // Schur preconditioner: inverse diagonal of B diag(A)^{-1} Bᵀ.
    let adiag = a.diagonal();
    let mut sdiag = vec![0.0; np];
    for i in 0..np {
        for (j, v) in b.row(i) {
            sdiag[i] += v * v / adiag[j];
        }
    }
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut z: Vec<f64> = r
            .iter()
            .zip(&sdiag)
            .map(|(r, d)| if *d > 0.0 { r / d } else { *r })
            .collect();
        remove_mean(&mut z);
        z
    };

    let mut q = match q0 {
        Some(q0) => q0.to_vec(),
        None => vec![0.0; np],
    };
    remove_mean(&mut q);
    let btq = b.mul_transpose_vec(&q);
    let rhs0: Vec<f64> = f.iter().zip(&btq).map(|(f, t)| f - t).collect();
    let mut u = solve_a(&rhs0, None, scaled(&rhs0))?;
    // Residual of the Schur system S q = B A⁻¹ f − g equals B u − g.
    let mut r: Vec<f64> = b.mul_vec(&u).iter().zip(&g).map(|(bu, g)| bu - g).collect();
    remove_mean(&mut r);
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut it = 0;
    while norm2(&r) > target * 0.5 {
        if it >= settings.max_iterations {
            return Err(Error::NotConverged {
                iterations: it,
                residual: norm2(&r) / scale,
            });
        }
        let btp = b.mul_transpose_vec(&p);
        let y = solve_a(&btp, inner_guess.as_deref(), inner.relative_tolerance)?;
        let mut sp = b.mul_vec(&y);
        remove_mean(&mut sp);
        let psp = dot(&p, &sp);
        if psp <= 0.0 {
            return Err(Error::NotConverged {
                iterations: it,
                residual: norm2(&r) / scale,
            });
        }
        let alpha = rz / psp;
        for i in 0..np {
            q[i] += alpha * p[i];
            r[i] -= alpha * sp[i];
        }
        for i in 0..nu {
            u[i] -= alpha * y[i];
        }
        inner_guess = Some(y);
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..np {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
    }
    remove_mean(&mut q);
    // Final velocity from the converged pressure, then independent residual checks.
    let btq = b.mul_transpose_vec(&q);
    let rhs: Vec<f64> = f.iter().zip(&btq).map(|(f, t)| f - t).collect();
    let u = solve_a(&rhs, Some(&u), scaled(&rhs))?;
    let au = a.mul_vec(&u);
    let mom: Vec<f64> = (0..nu).map(|i| au[i] + btq[i] - f[i]).collect();
    let bu = b.mul_vec(&u);
    let div: Vec<f64> = (0..np).map(|i| bu[i] - g[i]).collect();
    let stats = SaddleStats {
        outer_iterations: it,
        momentum_residual: norm2(&mom) / scale,
        divergence_residual: norm2(&div) / scale,
    };
    if norm2(&mom) > target || norm2(&div) > target {
        return Err(Error::NotConverged {
            iterations: it,
            residual: stats.momentum_residual.max(stats.divergence_residual),
        });
    }
    Ok((u, q, stats))
}

fn to_faer(
    a: &SparseMatrix,
    pin: Option<usize>,
    lower_only: bool,
) -> Result<SparseColMat<usize, f64>> {
    let mut trip = Vec::with_capacity(a.nnz());
    for i in 0..a.rows() {
        for (j, v) in a.row(i) {
            if lower_only && j > i {
                continue;
            }
            if let Some(k) = pin {
                if i == k || j == k {
                    continue;
                }
            }
            trip.push(Triplet::new(i, j, v));
        }
    }
    if let Some(k) = pin {
        trip.push(Triplet::new(k, k, 1.0));
    }
    SparseColMat::try_new_from_triplets(a.rows(), a.cols(), &trip)
        .map_err(|e| Error::DegenerateGeometry(format!("sparse assembly failed: {e:?}")))
}

fn residual_norm(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    ax.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Sparse Cholesky factor of a fixed SPD matrix, or of a singular Laplacian with
/// constant kernel (`Gauge::ZeroMean`) grounded at its first unknown.
pub struct CholeskyFactor {
    a: SparseMatrix,
    llt: Llt<usize, f64>,
    gauge: Gauge,
    tol: f64,
}

impl CholeskyFactor {
    pub fn new(a: &SparseMatrix, settings: &SolverSettings) -> Result<Self> {
        settings.validate()?;
        let pin = (settings.gauge == Gauge::ZeroMean && a.rows() > 0).then_some(0);
        let m = to_faer(a, pin, true)?;
        let llt = m
            .sp_cholesky(Side::Lower)
            .map_err(|_| Error::NotConverged {
                iterations: 0,
                residual: f64::NAN,
            })?;
        Ok(CholeskyFactor {
            a: a.clone(),
            llt,
            gauge: settings.gauge,
            tol: settings.relative_tolerance,
        })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.a
    }

    fn raw(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Col::from_fn(b.len(), |i| b[i]);
        if self.gauge == Gauge::ZeroMean {
            rhs[0] = 0.0;
        }
        self.llt.solve_in_place(rhs.as_mat_mut());
        let mut x: Vec<f64> = (0..b.len()).map(|i| rhs[i]).collect();
        if self.gauge == Gauge::ZeroMean {
            remove_mean(&mut x);
        }
        x
    }

    /// Solve with one step of iterative refinement and an independent residual check.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut b = b.to_vec();
        if self.gauge == Gauge::ZeroMean {
            check_compatible(&b)?;
            remove_mean(&mut b);
        }
        let bn = norm2(&b);
        if bn == 0.0 {
            return Ok(vec![0.0; b.len()]);
        }
        let mut x = self.raw(&b);
        let ax = self.a.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = self.raw(&r);
        x.iter_mut().zip(&dx).for_each(|(x, d)| *x += d);
        if self.gauge == Gauge::ZeroMean {
            remove_mean(&mut x);
        }
        let res = residual_norm(&self.a, &x, &b) / bn;
        if !(res <= self.tol) {
            return Err(Error::NotConverged {
                iterations: 1,
                residual: res,
            });
        }
        Ok(x)
    }
}

/// Sparse LU factor of the Stokes saddle matrix `[[A, Bᵀ], [B, 0]]` with the pressure
/// grounded at its first unknown; solutions are returned in the zero-mean gauge.
pub struct SaddleFactor {
    a: SparseMatrix,
    b: SparseMatrix,
    lu: Lu<usize, f64>,
    tol: f64,
}

impl SaddleFactor {
    pub fn new(a: &SparseMatrix, b: &SparseMatrix, settings: &SolverSettings) -> Result<Self> {
        settings.validate()?;
        let nu = a.rows();
        let np = b.rows();
        assert_eq!(b.cols(), nu);
        let mut t = TripletBuilder::new(nu + np, nu + np);
        for i in 0..nu {
            for (j, v) in a.row(i) {
                t.push(i, j, v);
            }
        }
        for i in 0..np {
            for (j, v) in b.row(i) {
                t.push(nu + i, j, v);
                t.push(j, nu + i, v);
            }
        }
        let pin = (np > 0).then_some(nu);
        let m = to_faer(&t.build(), pin, false)?;
        let lu = m.sp_lu().map_err(|_| Error::NotConverged {
            iterations: 0,
            residual: f64::NAN,
        })?;
        Ok(SaddleFactor {
            a: a.clone(),
            b: b.clone(),
            lu,
            tol: settings.relative_tolerance,
        })
    }

    fn raw(&self, f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nu = f.len();
        let np = g.len();
        let mut rhs = Col::from_fn(nu + np, |i| if i < nu { f[i] } else { g[i - nu] });
        if np > 0 {
            rhs[nu] = 0.0;
        }
        self.lu.solve_in_place(rhs.as_mat_mut());
        let u = (0..nu).map(|i| rhs[i]).collect();
        let mut q: Vec<f64> = (0..np).map(|i| rhs[nu + i]).collect();
        remove_mean(&mut q);
        (u, q)
    }

    fn residuals(&self, u: &[f64], q: &[f64], f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let au = self.a.mul_vec(u);
        let btq = self.b.mul_transpose_vec(q);
        let bu = self.b.mul_vec(u);
        let rm = (0..f.len()).map(|i| f[i] - au[i] - btq[i]).collect();
        let rd = (0..g.len()).map(|i| g[i] - bu[i]).collect();
        (rm, rd)
    }

    pub fn solve(&self, f: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>, SaddleStats)> {
        let mut g = g.to_vec();
        check_compatible(&g)?;
        remove_mean(&mut g);
        let scale = norm2(f) + norm2(&g);
        if scale == 0.0 {
            return Ok((
                vec![0.0; f.len()],
                vec![0.0; g.len()],
                SaddleStats::default(),
            ));
        }
        let (mut u, mut q) = self.raw(f, &g);
        let (rm, mut rd) = self.residuals(&u, &q, f, &g);
        remove_mean(&mut rd);
        let (du, dq) = self.raw(&rm, &rd);
        u.iter_mut().zip(&du).for_each(|(x, d)| *x += d);
        q.iter_mut().zip(&dq).for_each(|(x, d)| *x += d);
        let (rm, rd) = self.residuals(&u, &q, f, &g);
        let stats = SaddleStats {
            outer_iterations: 1,
            momentum_residual: norm2(&rm) / scale,
            divergence_residual: norm2(&rd) / scale,
        };
        if !(stats.momentum_residual.max(stats.divergence_residual) <= self.tol) {
            return Err(Error::NotConverged {
                iterations: 1,
                residual: stats.momentum_residual.max(stats.divergence_residual),
            });
        }
        Ok((u, q, stats))
    }
}

/// How repeated solves with a fixed matrix are carried out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Factor once, then back-substitute on every solve.
    #[default]
    Direct,
    /// Krylov iterations on every solve.
    Iterative,
}

/// Repeated SPD (or gauged singular) solves with one matrix.
pub enum SpdSolver {
    Direct(CholeskyFactor),
    Iterative {
        a: SparseMatrix,
        settings: SolverSettings,
    },
}

impl SpdSolver {
    pub fn new(a: &SparseMatrix, settings: &SolverSettings, method: Method) -> Result<Self> {
        settings.validate()?;
        Ok(match method {
            Method::Direct => SpdSolver::Direct(CholeskyFactor::new(a, settings)?),
            Method::Iterative => SpdSolver::Iterative {
                a: a.clone(),
                settings: *settings,
            },
        })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_from(b, None)
    }

    /// `x0` is a starting guess for the iterative variant and ignored by the direct one.
    pub fn solve_from(&self, b: &[f64], x0: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            SpdSolver::Direct(f) => f.solve(b),
            SpdSolver::Iterative { a, settings } => {
                cg_solve_from(a, b, x0, settings).map(|(x, _)| x)
            }
        }
    }
}

/// Repeated saddle solves with one operator pair.
pub enum SaddleSolver {
    Direct(SaddleFactor),
    Iterative {
        a: SparseMatrix,
        b: SparseMatrix,
        settings: SolverSettings,
    },
}

impl SaddleSolver {
    pub fn new(
        a: &SparseMatrix,
        b: &SparseMatrix,
        settings: &SolverSettings,
        method: Method,
    ) -> Result<Self> {
        settings.validate()?;
        Ok(match method {
            Method::Direct => SaddleSolver::Direct(SaddleFactor::new(a, b, settings)?),
            Method::Iterative => SaddleSolver::Iterative {
                a: a.clone(),
                b: b.clone(),
                settings: *settings,
            },
        })
    }

    pub fn solve(
        &self,
        f: &[f64],
        g: &[f64],
        q0: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>, SaddleStats)> {
        match self {
            SaddleSolver::Direct(s) => s.solve(f, g),
            SaddleSolver::Iterative { a, b, settings } => {
                saddle_solve_from(a, b, f, g, q0, settings)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periodic_laplacian_1d(n: usize) -> SparseMatrix {
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            t.push(i, i, 2.0);
            t.push(i, (i + 1) % n, -1.0);
            t.push(i, (i + n - 1) % n, -1.0);
        }
        t.build_symmetric()
    }

    #[test]
    fn identity_solve() {
        let x = cg_solve(
            &SparseMatrix::identity(4),
            &[1.0, 2.0, 3.0, 4.0],
            &Default::default(),
        )
        .unwrap();
        for (i, v) in x.iter().enumerate() {
            assert!((v - (i + 1) as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let mut t = TripletBuilder::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 0, 4.0);
        let m = t.build();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn periodic_laplacian_against_dense_lu() {
        let n = 8;
        let a = periodic_laplacian_1d(n);
        let b: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin())
            .collect();
        let s = SolverSettings::default().with_gauge(Gauge::ZeroMean);
        let x = cg_solve(&a, &b, &s).unwrap();

        // Oracle: pin x_0 = 0 to remove the kernel, solve the reduced dense system by LU,
        // then shift to zero mean.
        let dense = nalgebra::DMatrix::from_fn(n - 1, n - 1, |i, j| a.get(i + 1, j + 1));
        let rhs = nalgebra::DVector::from_fn(n - 1, |i, _| b[i + 1]);
        let y = dense.lu().solve(&rhs).unwrap();
        let mut full = vec![0.0];
        full.extend(y.iter().copied());
        let m = full.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            assert!(
                (x[i] - (full[i] - m)).abs() < 1e-9,
                "{} vs {}",
                x[i],
                full[i] - m
            );
        }
        assert!(x.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn incompatible_rhs_detected() {
        let a = periodic_laplacian_1d(8);
        let b = vec![1.0; 8];
        let s = SolverSettings::default().with_gauge(Gauge::ZeroMean);
        assert!(matches!(
            cg_solve(&a, &b, &s),
            Err(Error::IncompatibleRHS { .. })
        ));
    }

    #[test]
    fn budget_exhaustion_reports_not_converged() {
        let a = periodic_laplacian_1d(64);
        let b: Vec<f64> = (0..64).map(|i| if i < 32 { 1.0 } else { -1.0 }).collect();
        let s = SolverSettings {
            max_iterations: 2,
            ..Default::default()
        }
        .with_gauge(Gauge::ZeroMean);
        assert!(matches!(
            cg_solve(&a, &b, &s),
            Err(Error::NotConverged { .. })
        ));
    }

    /// Tiny periodic 2x2-cell MAC Stokes system: 4 pressures, 8 face velocities.
    fn tiny_mac() -> (SparseMatrix, SparseMatrix) {
        let n = 2;
        let h = 0.5;
        let xf = |i: usize, j: usize| (j % n) * n + (i % n);
        let yf = |i: usize, j: usize| n * n + (j % n) * n + (i % n);
        let mut a = TripletBuilder::new(8, 8);
        for j in 0..n {
            for i in 0..n {
                for (f, nb) in [
                    (
                        xf(i, j),
                        [xf(i + 1, j), xf(i + 1, j), xf(i, j + 1), xf(i, j + 1)],
                    ),
                    (
                        yf(i, j),
                        [yf(i + 1, j), yf(i + 1, j), yf(i, j + 1), yf(i, j + 1)],
                    ),
                ] {
                    a.push(f, f, 4.0 / (h * h) + 1.0);
                    for k in nb {
                        a.push(f, k, -1.0 / (h * h));
                    }
                }
            }
        }
        let mut b = TripletBuilder::new(4, 8);
        for j in 0..n {
            for i in 0..n {
                let c = j * n + i;
                b.push(c, xf(i + 1, j), 1.0 / h);
                b.push(c, xf(i, j), -1.0 / h);
                b.push(c, yf(i, j + 1), 1.0 / h);
                b.push(c, yf(i, j), -1.0 / h);
            }
        }
        (a.build_symmetric(), b.build())
    }

    #[test]
    fn saddle_homogeneous() {
        let (a, b) = tiny_mac();
        let (u, q) = saddle_solve(&a, &b, &[0.0; 8], &[0.0; 4], &Default::default()).unwrap();
        assert!(u.iter().chain(&q).all(|v| *v == 0.0));
    }

    #[test]
    fn saddle_manufactured_recovery() {
        let (a, b) = tiny_mac();
        let u_star = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2, -0.6];
        let q_star = [0.25, -0.5, 0.75, -0.5];
        let bt = b.mul_transpose_vec(&q_star);
        let f: Vec<f64> = a
            .mul_vec(&u_star)
            .iter()
            .zip(&bt)
            .map(|(x, y)| x + y)
            .collect();
        let g = b.mul_vec(&u_star);
        let s = SolverSettings::default().with_tolerance(1e-12);
        let (u, q) = saddle_solve(&a, &b, &f, &g, &s).unwrap();
        for i in 0..8 {
            assert!((u[i] - u_star[i]).abs() < 1e-8);
        }
        for i in 0..4 {
            assert!((q[i] - q_star[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn saddle_rejects_nonzero_mean_divergence() {
        let (a, b) = tiny_mac();
        let r = saddle_solve(
            &a,
            &b,
            &[0.0; 8],
            &[1.0, 0.0, 0.0, 0.0],
            &Default::default(),
        );
        assert!(matches!(r, Err(Error::IncompatibleRHS { .. })));
    }

    #[test]
    fn direct_saddle_matches_manufactured() {
        let (a, b) = tiny_mac();
        let u_star = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2, -0.6];
        let q_star = [0.25, -0.5, 0.75, -0.5];
        let bt = b.mul_transpose_vec(&q_star);
        let f: Vec<f64> = a
            .mul_vec(&u_star)
            .iter()
            .zip(&bt)
            .map(|(x, y)| x + y)
            .collect();
        let g = b.mul_vec(&u_star);
        let s = SaddleSolver::new(&a, &b, &Default::default(), Method::Direct).unwrap();
        let (u, q, stats) = s.solve(&f, &g, None).unwrap();
        assert!(stats.momentum_residual < 1e-14);
        for i in 0..8 {
            assert!((u[i] - u_star[i]).abs() < 1e-12);
        }
        for i in 0..4 {
            assert!((q[i] - q_star[i]).abs() < 1e-12);
        }
        assert!(s.solve(&f, &[1.0, 0.0, 0.0, 0.0], None).is_err());
    }

    #[test]
    fn direct_and_iterative_agree_on_gauged_laplacian() {
        let a = periodic_laplacian_1d(16);
        let b: Vec<f64> = (0..16)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 16.0).cos())
            .collect();
        let s = SolverSettings::default()
            .with_gauge(Gauge::ZeroMean)
            .with_tolerance(1e-12);
        let x1 = SpdSolver::new(&a, &s, Method::Direct)
            .unwrap()
            .solve(&b)
            .unwrap();
        let x2 = SpdSolver::new(&a, &s, Method::Iterative)
            .unwrap()
            .solve(&b)
            .unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).abs() < 1e-10);
        }
        assert!(mean(&x1).abs() < 1e-14);
        let mut bad = b.clone();
        bad[0] += 1.0;
        assert!(matches!(
            SpdSolver::new(&a, &s, Method::Direct).unwrap().solve(&bad),
            Err(Error::IncompatibleRHS { .. })
        ));
    }
}
