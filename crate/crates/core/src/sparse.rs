//! Compressed-row symmetric matrices and a Jacobi-preconditioned conjugate
//! gradient solver with Dirichlet row/column elimination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Empty matrix with the sparsity pattern of the given (unsorted,
    /// possibly repeated) `(row, col)` couplings.
    pub fn with_pattern(n: usize, couplings: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, j) in couplings {
            rows[i].push(j);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        Self { n, row_ptr, col_idx, values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        cols.binary_search(&j).ok().map(|p| self.row_ptr[i] + p)
    }

    /// Adds `v` to entry `(i, j)`. Panics if the entry is outside the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let p = self.position(i, j).expect("entry outside sparsity pattern");
        self.values[p] += v;
    }

    /// Sets entry `(i, j)`. Panics if the entry is outside the pattern.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let p = self.position(i, j).expect("entry outside sparsity pattern");
        self.values[p] = v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`; both matrices must share a pattern.
    pub fn add_scaled(&mut self, c: f64, other: &CsrMatrix) {
        assert_eq!(self.col_idx, other.col_idx, "patterns differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert!(x.len() >= self.n && y.len() >= self.n);
        for (yi, w) in y[..self.n].iter_mut().zip(self.row_ptr.windows(2)) {
            let (cols, vals) = (&self.col_idx[w[0]..w[1]], &self.values[w[0]..w[1]]);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (v - self.get(j, i)).abs() <= tol))
    }
}

/// Matrix stored by diagonals: entry `(i, i + offsets[d])` is `diags[d][i]`.
/// Used for the banded operators of structured meshes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMatrix {
    n: usize,
    offsets: Vec<isize>,
    diags: Vec<Vec<f64>>,
    /// Reciprocal main diagonal, zero where the diagonal vanishes.
    inv_diag: Vec<f64>,
    /// Row-major copy of the bands: `packed[i * offsets.len() + d] = diags[d][i]`.
    packed: Vec<f64>,
}

impl DiagonalMatrix {
    /// Diagonal storage of `a`, or `None` when it has more than
    /// `max_diagonals` distinct nonzero offsets.
    pub fn from_csr(a: &CsrMatrix, max_diagonals: usize) -> Option<Self> {
        let n = a.dim();
        let mut offsets: Vec<isize> = vec![0];
        for i in 0..n {
            for (j, _) in a.row(i) {
                let o = j as isize - i as isize;
                if !offsets.contains(&o) {
                    if offsets.len() == max_diagonals {
                        return None;
                    }
                    offsets.push(o);
                }
            }
        }
        offsets[1..].sort_unstable();
        let mut diags = vec![vec![0.0; n]; offsets.len()];
        for i in 0..n {
            for (j, v) in a.row(i) {
                let o = j as isize - i as isize;
                let d = offsets.iter().position(|&x| x == o).expect("offset collected above");
                diags[d][i] = v;
            }
        }
        let inv_diag = diags[0].iter().map(|&d| if d == 0.0 { 0.0 } else { 1.0 / d }).collect();
        let packed = (0..n).flat_map(|i| diags.iter().map(move |d| d[i])).collect();
        Some(Self { n, offsets, diags, inv_diag, packed })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        for (&o, diag) in self.offsets.iter().zip(&self.diags) {
            for (i, &v) in diag.iter().enumerate() {
                let j = i as isize + o;
                if v != 0.0 && (0..n as isize).contains(&j) {
                    a[i * n + j as usize] = v;
                }
            }
        }
        a
    }

    /// One Gauss-Seidel sweep on `A x = b`, in increasing row order when
    /// `forward`, else decreasing. Rows with a zero diagonal are set to zero.
    pub fn gauss_seidel(&self, b: &[f64], x: &mut [f64], forward: bool) {
        let n = self.n;
        let nd = self.offsets.len();
        // the neighbour updated just before row i goes last, so only one
        // product waits on it
        let near: isize = if forward { -1 } else { 1 };
        let mut order: Vec<usize> = (1..nd).filter(|&d| self.offsets[d] != near).collect();
        order.extend((1..nd).filter(|&d| self.offsets[d] == near));
        let reach = self.offsets.iter().map(|o| o.unsigned_abs()).max().unwrap_or(0);
        let interior = reach..n.saturating_sub(reach).max(reach);
        let mut row = |i: usize| {
            let vals = &self.packed[i * nd..(i + 1) * nd];
            let mut s = b[i];
            if interior.contains(&i) {
                for &d in &order {
                    s -= vals[d] * x[i.wrapping_add_signed(self.offsets[d])];
                }
            } else {
                for &d in &order {
                    let j = i as isize + self.offsets[d];
                    if j >= 0 && (j as usize) < n {
                        s -= vals[d] * x[j as usize];
                    }
                }
            }
            x[i] = s * self.inv_diag[i];
        };
        if forward {
            (0..n).for_each(&mut row);
        } else {
            (0..n).rev().for_each(&mut row);
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        let (x, y) = (&x[..n], &mut y[..n]);
        for ((yi, d), xi) in y.iter_mut().zip(&self.diags[0]).zip(x) {
            *yi = d * xi;
        }
        for (&o, diag) in self.offsets.iter().zip(&self.diags).skip(1) {
            let shift = o.unsigned_abs();
            if shift >= n {
                continue;
            }
            if o > 0 {
                for ((yi, d), xj) in y[..n - shift].iter_mut().zip(&diag[..n - shift]).zip(&x[shift..]) {
                    *yi += d * xj;
                }
            } else {
                for ((yi, d), xj) in y[shift..].iter_mut().zip(&diag[shift..]).zip(&x[..n - shift]) {
                    *yi += d * xj;
                }
            }
        }
    }
}

/// Band count up to which [`solve_constrained`] switches to diagonal storage.
const MAX_BANDS: usize = 9;

/// Approximate inverse applied to residuals in conjugate gradients.
pub trait Preconditioner: Sync {
    /// `z ~ A^-1 r`. Constrained entries of `r` are zero and must be zero
    /// in `z`; the map must be symmetric positive definite on the rest.
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    #[default]
    Jacobi,
    /// Geometric multigrid V-cycle; needs a structured mesh.
    Multigrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    pub rel_tol: f64,
    /// Maximum iterations as a multiple of the system size.
    pub max_iter_factor: usize,
    pub preconditioner: PreconditionerKind,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_iter_factor: 10, preconditioner: PreconditionerKind::Jacobi }
    }
}

/// Copy of `a` with the rows and columns of constrained entries zeroed.
pub(crate) fn eliminate(a: &CsrMatrix, fixed: &[bool]) -> CsrMatrix {
    let mut reduced = a.clone();
    for i in 0..a.n {
        for p in reduced.row_ptr[i]..reduced.row_ptr[i + 1] {
            if fixed[i] || fixed[reduced.col_idx[p]] {
                reduced.values[p] = 0.0;
            }
        }
    }
    reduced
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Solves `A x = b` with the entries flagged in `fixed` prescribed to
/// `values[i]`. The constrained rows and columns are eliminated, which keeps
/// the reduced system symmetric.
///
/// `guess` seeds the free unknowns; the returned vector holds the prescribed
/// values exactly.
pub fn solve_constrained(
    a: &CsrMatrix,
    b: &[f64],
    fixed: &[bool],
    values: &[f64],
    guess: Option<&[f64]>,
    settings: CgSettings,
) -> Result<(Vec<f64>, CgStats)> {
    solve_constrained_with(a, b, fixed, values, guess, settings, None)
}

/// As [`solve_constrained`] with a custom preconditioner in place of Jacobi.
pub fn solve_constrained_with(
    a: &CsrMatrix,
    b: &[f64],
    fixed: &[bool],
    values: &[f64],
    guess: Option<&[f64]>,
    settings: CgSettings,
    preconditioner: Option<&dyn Preconditioner>,
) -> Result<(Vec<f64>, CgStats)> {
    let n = a.dim();
    crate::error::check_len(n, b.len())?;
    crate::error::check_len(n, fixed.len())?;
    crate::error::check_len(n, values.len())?;

    // rhs of the reduced system: b_f - A_fc x_c
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        if fixed[i] {
            continue;
        }
        let mut s = b[i];
        for (j, v) in a.row(i) {
            if fixed[j] {
                s -= v * values[j];
            }
        }
        rhs[i] = s;
    }

    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .zip(fixed)
        .map(|(&d, &f)| if f || d == 0.0 { 0.0 } else { 1.0 / d })
        .collect();

    // the reduced operator acts on the free block and leaves constrained
    // entries of the iterates at zero
    let reduced = eliminate(a, fixed);
    let banded = DiagonalMatrix::from_csr(&reduced, MAX_BANDS);
    let apply = |x: &[f64], y: &mut [f64]| match &banded {
        Some(d) => d.matvec(x, y),
        None => reduced.matvec(x, y),
    };

    let mut x = vec![0.0; n];
    if let Some(g) = guess {
        crate::error::check_len(n, g.len())?;
        for i in 0..n {
            if !fixed[i] {
                x[i] = g[i];
            }
        }
    }

    let rhs_norm = norm(&rhs);
    let mut stats = CgStats { iterations: 0, rel_residual: 0.0 };
    if rhs_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let mut r = vec![0.0; n];
        apply(&x, &mut r);
        for (ri, bi) in r.iter_mut().zip(&rhs) {
            *ri = bi - *ri;
        }
        let precondition = |r: &[f64], z: &mut [f64]| match preconditioner {
            Some(m) => m.apply(r, z),
            None => z.iter_mut().zip(r).zip(&inv_diag).for_each(|((z, r), d)| *z = r * d),
        };
        let mut z = vec![0.0; n];
        precondition(&r, &mut z);
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let max_iter = settings.max_iter_factor * n.max(1);
        let target = settings.rel_tol * rhs_norm;
        let mut res = norm(&r);
        let mut it = 0;
        while res > target {
            if it >= max_iter {
                return Err(Error::SolverFailure { iterations: it, residual: res / rhs_norm });
            }
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                return Err(Error::SolverFailure { iterations: it, residual: res / rhs_norm });
            }
            let alpha = rz / pap;
            for ((xi, ri), (pi, api)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
                *xi += alpha * pi;
                *ri -= alpha * api;
            }
            precondition(&r, &mut z);
            let rz_new = dot(&r, &z);
            let rr = dot(&r, &r);
            let beta = rz_new / rz;
            rz = rz_new;
            for (pi, zi) in p.iter_mut().zip(&z) {
                *pi = zi + beta * *pi;
            }
            res = rr.sqrt();
            it += 1;
        }
        stats = CgStats { iterations: it, rel_residual: res / rhs_norm };
    }
    for i in 0..n {
        if fixed[i] {
            x[i] = values[i];
        }
    }
    Ok((x, stats))
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (ca, cb) in ac.zip(bc) {
        for k in 0..LANES {
            acc[k] += ca[k] * cb[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
