//! Geometric multigrid V-cycle for P1 stiffness matrices on the structured
//! mesh, used as a conjugate-gradient preconditioner.
//!
//! Coarse levels halve `n` while it stays even. Coarse conductivities are
//! means of the four fine triangles covered by each coarse triangle, and
//! the coarse operators are rediscretized. Transfers are the nested P1
//! interpolation and its transpose. Smoothing is one forward Gauss-Seidel
//! sweep before the coarse correction and one backward sweep after, which
//! keeps the cycle symmetric. The coarsest level is factored densely when
//! small and smoothed otherwise.

use crate::error::{check_len, Result};
use crate::fem::{assemble_stiffness, ElementCoefficient};
use crate::mesh::StructuredMesh;
use crate::sparse::{eliminate, CsrMatrix, DiagonalMatrix, Preconditioner};

/// Largest system factored directly; coarsening stops below this size.
const DENSE_LIMIT: usize = 100;
/// Symmetric sweeps on a coarsest level too large to factor.
const COARSE_SWEEPS: usize = 4;

#[derive(Debug, Clone)]
struct Level {
    n: usize,
    op: DiagonalMatrix,
    fixed: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Multigrid {
    levels: Vec<Level>,
    /// Lower Cholesky factor of the coarsest operator, row-major.
    coarse_factor: Option<Vec<f64>>,
}

/// Operator with constrained rows and columns replaced by the identity.
fn level_operator(a: &CsrMatrix, fixed: &[bool]) -> DiagonalMatrix {
    let mut m = eliminate(a, fixed);
    for (i, &f) in fixed.iter().enumerate() {
        if f {
            m.set(i, i, 1.0);
        }
    }
    DiagonalMatrix::from_csr(&m, 9).expect("structured P1 stiffness has seven bands")
}

/// Conductivity on the mesh with half as many cells per side.
fn coarsen_sigma(n: usize, sigma: &[f64]) -> Vec<f64> {
    let nc = n / 2;
    let tri = |i: usize, j: usize, upper: usize| sigma[2 * (j * n + i) + upper];
    let mut out = Vec::with_capacity(2 * nc * nc);
    for jc in 0..nc {
        for ic in 0..nc {
            let (i, j) = (2 * ic, 2 * jc);
            out.push(0.25 * (tri(i, j, 0) + tri(i + 1, j, 0) + tri(i + 1, j, 1) + tri(i + 1, j + 1, 0)));
            out.push(0.25 * (tri(i, j, 1) + tri(i, j + 1, 0) + tri(i, j + 1, 1) + tri(i + 1, j + 1, 1)));
        }
    }
    out
}

fn cholesky(op: &DiagonalMatrix) -> Option<Vec<f64>> {
    let n = op.dim();
    let mut a = op.to_dense();
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Some(a)
}

fn cholesky_solve(l: &[f64], b: &[f64], x: &mut [f64]) {
    let n = b.len();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
}

/// Nested P1 interpolation from `nc` to `2 nc` cells per side, added to `fine`.
fn prolong_add(nc: usize, coarse: &[f64], fine: &mut [f64]) {
    let (npc, npf) = (nc + 1, 2 * nc + 1);
    let c = |i: usize, j: usize| coarse[j * npc + i];
    for jf in 0..npf {
        for i_f in 0..npf {
            let (i, j) = (i_f / 2, jf / 2);
            let v = match (i_f % 2, jf % 2) {
                (0, 0) => c(i, j),
                (1, 0) => 0.5 * (c(i, j) + c(i + 1, j)),
                (0, 1) => 0.5 * (c(i, j) + c(i, j + 1)),
                _ => 0.5 * (c(i, j) + c(i + 1, j + 1)),
            };
            fine[jf * npf + i_f] += v;
        }
    }
}

/// Transpose of [`prolong_add`].
fn restrict(nc: usize, fine: &[f64], coarse: &mut [f64]) {
    let (npc, npf) = (nc + 1, 2 * nc + 1);
    coarse.iter_mut().for_each(|v| *v = 0.0);
    for jf in 0..npf {
        for i_f in 0..npf {
            let r = fine[jf * npf + i_f];
            let (i, j) = (i_f / 2, jf / 2);
            let mut put = |ii: usize, jj: usize, w: f64| coarse[jj * npc + ii] += w * r;
            match (i_f % 2, jf % 2) {
                (0, 0) => put(i, j, 1.0),
                (1, 0) => {
                    put(i, j, 0.5);
                    put(i + 1, j, 0.5);
                }
                (0, 1) => {
                    put(i, j, 0.5);
                    put(i, j + 1, 0.5);
                }
                _ => {
                    put(i, j, 0.5);
                    put(i + 1, j + 1, 0.5);
                }
            }
        }
    }
}

impl Multigrid {
    /// Hierarchy for the matrix `a` assembled from `sigma` on `mesh`.
    /// `fixed_on` gives the constrained nodes of a mesh at any level.
    pub fn new(
        a: &CsrMatrix,
        mesh: &StructuredMesh,
        sigma: &ElementCoefficient,
        fixed_on: impl Fn(&StructuredMesh) -> Vec<bool>,
    ) -> Result<Self> {
        check_len(mesh.num_nodes(), a.dim())?;
        sigma.validate(mesh)?;
        let fixed = fixed_on(mesh);
        check_len(a.dim(), fixed.len())?;
        let mut levels = vec![Level { n: mesh.n(), op: level_operator(a, &fixed), fixed }];
        let mut coef = sigma.0.clone();
        let mut n = mesh.n();
        while n % 2 == 0 && (n + 1) * (n + 1) > DENSE_LIMIT {
            coef = coarsen_sigma(n, &coef);
            n /= 2;
            let m = StructuredMesh::unit_square(n)?;
            let fixed = fixed_on(&m);
            let k = assemble_stiffness(&m, &ElementCoefficient(coef.clone()))?;
            levels.push(Level { n, op: level_operator(&k, &fixed), fixed });
        }
        let last = levels.last().expect("at least the fine level");
        let coarse_factor = if last.op.dim() <= DENSE_LIMIT { cholesky(&last.op) } else { None };
        Ok(Self { levels, coarse_factor })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn cycle(&self, l: usize, b: &[f64], x: &mut [f64]) {
        let level = &self.levels[l];
        x.iter_mut().for_each(|v| *v = 0.0);
        if l + 1 == self.levels.len() {
            match &self.coarse_factor {
                Some(f) => cholesky_solve(f, b, x),
                None => {
                    for _ in 0..COARSE_SWEEPS {
                        level.op.gauss_seidel(b, x, true);
                        level.op.gauss_seidel(b, x, false);
                    }
                }
            }
            return;
        }
        level.op.gauss_seidel(b, x, true);
        let mut r = vec![0.0; b.len()];
        level.op.matvec(x, &mut r);
        for ((ri, bi), &f) in r.iter_mut().zip(b).zip(&level.fixed) {
            *ri = if f { 0.0 } else { bi - *ri };
        }
        let coarse = &self.levels[l + 1];
        let mut rc = vec![0.0; coarse.op.dim()];
        restrict(coarse.n, &r, &mut rc);
        for (v, &f) in rc.iter_mut().zip(&coarse.fixed) {
            if f {
                *v = 0.0;
            }
        }
        let mut xc = vec![0.0; rc.len()];
        self.cycle(l + 1, &rc, &mut xc);
        let mut corr = vec![0.0; b.len()];
        prolong_add(coarse.n, &xc, &mut corr);
        for ((xi, c), &f) in x.iter_mut().zip(&corr).zip(&level.fixed) {
            if !f {
                *xi += c;
            }
        }
        level.op.gauss_seidel(b, x, false);
    }
}

impl Preconditioner for Multigrid {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        self.cycle(0, r, z);
    }
}
