//! P1 finite elements on the structured mesh: stiffness and load assembly and
//! the mixed Dirichlet/flux state and adjoint solves.
//!
//! Volume loads use vertex (lumped) quadrature, boundary loads the edge
//! trapezoid rule. Dirichlet data are imposed by row/column elimination so the
//! reduced systems stay symmetric positive definite.

use std::ops::{Deref, DerefMut};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mesh::{Side, StructuredMesh};
use crate::multigrid::Multigrid;
use crate::sparse::{solve_constrained_with, CgSettings, CsrMatrix, Preconditioner, PreconditionerKind};

/// Nodal values of a P1 function.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField(pub Vec<f64>);

impl ScalarField {
    pub fn zeros(mesh: &StructuredMesh) -> Self {
        Self(vec![0.0; mesh.num_nodes()])
    }

    pub fn from_fn(mesh: &StructuredMesh, f: impl Fn(f64, f64) -> f64) -> Self {
        Self(mesh.nodes().iter().map(|p| f(p[0], p[1])).collect())
    }

    pub fn check(&self, mesh: &StructuredMesh) -> Result<()> {
        check_len(mesh.num_nodes(), self.0.len())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ScalarField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ScalarField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Piecewise-constant coefficient, one value per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementCoefficient(pub Vec<f64>);

impl ElementCoefficient {
    pub fn constant(mesh: &StructuredMesh, value: f64) -> Self {
        Self(vec![value; mesh.num_triangles()])
    }

    pub fn validate(&self, mesh: &StructuredMesh) -> Result<()> {
        check_len(mesh.num_triangles(), self.0.len())?;
        match self.0.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            Some(element) => Err(Error::InvalidCoefficient { element, value: self.0[element] }),
            None => Ok(()),
        }
    }
}

impl Deref for ElementCoefficient {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A value per side of the square (used for piecewise-constant fluxes).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SideValues {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

impl SideValues {
    pub fn new(left: f64, right: f64, top: f64, bottom: f64) -> Self {
        Self { left, right, top, bottom }
    }

    pub fn get(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
            Side::Top => self.top,
            Side::Bottom => self.bottom,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(c * self.left, c * self.right, c * self.top, c * self.bottom)
    }
}

/// A pair of opposite sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SidePair {
    LeftRight,
    TopBottom,
}

impl SidePair {
    pub fn sides(self) -> [Side; 2] {
        match self {
            SidePair::LeftRight => [Side::Left, Side::Right],
            SidePair::TopBottom => [Side::Top, Side::Bottom],
        }
    }

    pub fn other(self) -> SidePair {
        match self {
            SidePair::LeftRight => SidePair::TopBottom,
            SidePair::TopBottom => SidePair::LeftRight,
        }
    }
}

fn stiffness_pattern(mesh: &StructuredMesh) -> CsrMatrix {
    CsrMatrix::with_pattern(
        mesh.num_nodes(),
        mesh.triangles().iter().flat_map(|t| {
            let t = *t;
            (0..9).map(move |k| (t[k / 3], t[k % 3]))
        }),
    )
}

/// `K_ij = sum_T sigma_T |T| grad(l_i) . grad(l_j)`.
pub fn assemble_stiffness(mesh: &StructuredMesh, sigma: &ElementCoefficient) -> Result<CsrMatrix> {
    sigma.validate(mesh)?;
    let mut k = stiffness_pattern(mesh);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (area, g) = mesh.element_gradients(t);
        let c = sigma[t] * area;
        for a in 0..3 {
            for b in 0..3 {
                k.add(tri[a], tri[b], c * (g[a][0] * g[b][0] + g[a][1] * g[b][1]));
            }
        }
    }
    Ok(k)
}

/// `int_{sides} g phi_k` with `g` constant on each side.
pub fn assemble_boundary_load(mesh: &StructuredMesh, g: &SideValues, sides: &[Side]) -> Vec<f64> {
    let mut load = vec![0.0; mesh.num_nodes()];
    for &side in sides {
        let gs = g.get(side);
        for e in mesh.boundary_edges(side) {
            let len = edge_length(mesh, e);
            load[e[0]] += 0.5 * gs * len;
            load[e[1]] += 0.5 * gs * len;
        }
    }
    load
}

/// Trapezoid-rule `int_{sides} w phi_k` for a nodal function `w`.
pub fn boundary_mass_load(mesh: &StructuredMesh, w: &[f64], sides: &[Side]) -> Vec<f64> {
    let mut load = vec![0.0; mesh.num_nodes()];
    for &side in sides {
        for e in mesh.boundary_edges(side) {
            let len = edge_length(mesh, e);
            load[e[0]] += 0.5 * len * w[e[0]];
            load[e[1]] += 0.5 * len * w[e[1]];
        }
    }
    load
}

/// Trapezoid-rule `int_{sides} w^2`.
pub fn boundary_l2_squared(mesh: &StructuredMesh, w: &[f64], sides: &[Side]) -> f64 {
    sides
        .iter()
        .flat_map(|&s| mesh.boundary_edges(s))
        .map(|e| 0.5 * edge_length(mesh, e) * (w[e[0]] * w[e[0]] + w[e[1]] * w[e[1]]))
        .sum()
}

/// Vertex-quadrature `int_D w phi_k`.
pub fn lumped_load(mesh: &StructuredMesh, w: &[f64]) -> Vec<f64> {
    let mut load = vec![0.0; mesh.num_nodes()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let third = mesh.signed_area(t) / 3.0;
        for &v in tri {
            load[v] += third * w[v];
        }
    }
    load
}

/// Vertex-quadrature `int_D w^2`.
pub fn volume_l2_squared(mesh: &StructuredMesh, w: &[f64]) -> f64 {
    mesh.triangles()
        .iter()
        .enumerate()
        .map(|(t, tri)| mesh.signed_area(t) / 3.0 * tri.iter().map(|&v| w[v] * w[v]).sum::<f64>())
        .sum()
}

fn edge_length(mesh: &StructuredMesh, e: &[usize; 2]) -> f64 {
    let (a, b) = (mesh.nodes()[e[0]], mesh.nodes()[e[1]]);
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

/// Stiffness matrix for one conductivity, reused across the state and adjoint
/// solves of every flux.
#[derive(Debug)]
pub struct FemSystem<'m> {
    mesh: &'m StructuredMesh,
    sigma: ElementCoefficient,
    stiffness: CsrMatrix,
    settings: CgSettings,
    /// Multigrid hierarchies by constraint set: slots 0..16 are side
    /// bitmasks, slot 16 the grounded pure-flux problem.
    hierarchies: [OnceLock<Multigrid>; 17],
}

const GROUNDED: usize = 16;

fn side_key(sides: &[Side]) -> usize {
    sides.iter().fold(0, |k, s| k | 1 << s.index())
}

impl<'m> FemSystem<'m> {
    pub fn new(mesh: &'m StructuredMesh, sigma: &ElementCoefficient, settings: CgSettings) -> Result<Self> {
        Ok(Self {
            mesh,
            sigma: sigma.clone(),
            stiffness: assemble_stiffness(mesh, sigma)?,
            settings,
            hierarchies: Default::default(),
        })
    }

    fn preconditioner(&self, key: usize, fixed_on: impl Fn(&StructuredMesh) -> Vec<bool>) -> Result<Option<&dyn Preconditioner>> {
        if self.settings.preconditioner == PreconditionerKind::Jacobi {
            return Ok(None);
        }
        let slot = &self.hierarchies[key];
        if slot.get().is_none() {
            let mg = Multigrid::new(&self.stiffness, self.mesh, &self.sigma, fixed_on)?;
            // a concurrent build of the same hierarchy gives an identical value
            let _ = slot.set(mg);
        }
        Ok(slot.get().map(|m| m as &dyn Preconditioner))
    }

    pub fn mesh(&self) -> &StructuredMesh {
        self.mesh
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Solves `K u = load` with `u = values` on the nodes of `dirichlet`.
    pub fn solve(&self, load: &[f64], dirichlet: &[Side], values: &[f64], guess: Option<&[f64]>) -> Result<ScalarField> {
        let fixed = self.mesh.side_mask(dirichlet);
        let pre = self.preconditioner(side_key(dirichlet), |m| m.side_mask(dirichlet))?;
        let (u, _) = solve_constrained_with(&self.stiffness, load, &fixed, values, guess, self.settings, pre)?;
        Ok(ScalarField(u))
    }

    /// State with flux `g` on `flux_pair` and Dirichlet data `h` (nodal) on
    /// the opposite pair.
    pub fn solve_state(
        &self,
        f: Option<&[f64]>,
        g: &SideValues,
        flux_pair: SidePair,
        h: &[f64],
        guess: Option<&[f64]>,
    ) -> Result<ScalarField> {
        let mesh = self.mesh;
        check_len(mesh.num_nodes(), h.len())?;
        let mut load = assemble_boundary_load(mesh, g, &flux_pair.sides());
        if let Some(f) = f {
            check_len(mesh.num_nodes(), f.len())?;
            for (l, v) in load.iter_mut().zip(lumped_load(mesh, f)) {
                *l += v;
            }
        }
        self.solve(&load, &flux_pair.other().sides(), h, guess)
    }

    /// Flux `g` on all four sides; the constant is fixed by grounding node 0
    /// and the result is shifted to zero boundary mean.
    pub fn solve_pure_flux(&self, g: &SideValues) -> Result<ScalarField> {
        let mesh = self.mesh;
        let load = assemble_boundary_load(mesh, g, &Side::ALL);
        let total: f64 = load.iter().sum();
        let scale: f64 = load.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
        if total.abs() > 1e-12 * scale {
            return Err(Error::DegenerateData(format!("boundary fluxes do not balance (net {total:e})")));
        }
        let grounded = |m: &StructuredMesh| {
            let mut fixed = vec![false; m.num_nodes()];
            fixed[0] = true;
            fixed
        };
        let pre = self.preconditioner(GROUNDED, grounded)?;
        let (mut u, _) =
            solve_constrained_with(&self.stiffness, &load, &grounded(mesh), &vec![0.0; mesh.num_nodes()], None, self.settings, pre)?;
        let ones = vec![1.0; mesh.num_nodes()];
        let perimeter = boundary_mass_load(mesh, &ones, &Side::ALL);
        let mean = perimeter.iter().zip(&u).map(|(w, v)| w * v).sum::<f64>() / perimeter.iter().sum::<f64>();
        u.iter_mut().for_each(|v| *v -= mean);
        Ok(ScalarField(u))
    }

    /// Adjoint with volume load `coef * int w phi` plus an optional boundary
    /// load `bcoef * int_{bsides} b phi`, homogeneous Dirichlet on `dirichlet`.
    pub fn solve_adjoint(
        &self,
        coef: f64,
        w: &[f64],
        boundary: Option<(f64, &[f64], &[Side])>,
        dirichlet: SidePair,
        guess: Option<&[f64]>,
    ) -> Result<ScalarField> {
        let mesh = self.mesh;
        check_len(mesh.num_nodes(), w.len())?;
        let mut load: Vec<f64> = lumped_load(mesh, w).into_iter().map(|v| coef * v).collect();
        if let Some((bcoef, b, sides)) = boundary {
            check_len(mesh.num_nodes(), b.len())?;
            for (l, v) in load.iter_mut().zip(boundary_mass_load(mesh, b, sides)) {
                *l += bcoef * v;
            }
        }
        self.solve(&load, &dirichlet.sides(), &vec![0.0; mesh.num_nodes()], guess)
    }
}

/// `u_n`: flux `g` on left/right, Dirichlet `h` on top/bottom.
pub fn solve_state_neumann(
    mesh: &StructuredMesh,
    sigma: &ElementCoefficient,
    f: Option<&ScalarField>,
    g: &SideValues,
    h: &ScalarField,
) -> Result<ScalarField> {
    FemSystem::new(mesh, sigma, CgSettings::default())?.solve_state(f.map(|f| &f[..]), g, SidePair::LeftRight, h, None)
}

/// `u_d`: flux `g` on top/bottom, Dirichlet `h` on left/right.
pub fn solve_state_dirichlet(
    mesh: &StructuredMesh,
    sigma: &ElementCoefficient,
    f: Option<&ScalarField>,
    g: &SideValues,
    h: &ScalarField,
) -> Result<ScalarField> {
    FemSystem::new(mesh, sigma, CgSettings::default())?.solve_state(f.map(|f| &f[..]), g, SidePair::TopBottom, h, None)
}

fn misfit(u_d: &[f64], u_n: &[f64]) -> Vec<f64> {
    u_d.iter().zip(u_n).map(|(a, b)| a - b).collect()
}

/// `p_d`: `int sigma grad p_d . grad phi = -alpha1 int (u_d - u_n) phi`, zero on left/right.
pub fn solve_adjoint_d(
    mesh: &StructuredMesh,
    sigma: &ElementCoefficient,
    u_d: &ScalarField,
    u_n: &ScalarField,
    alpha1: f64,
) -> Result<ScalarField> {
    u_d.check(mesh)?;
    u_n.check(mesh)?;
    FemSystem::new(mesh, sigma, CgSettings::default())?.solve_adjoint(-alpha1, &misfit(u_d, u_n), None, SidePair::LeftRight, None)
}

/// `p_n`: `int sigma grad p_n . grad phi = alpha1 int (u_d - u_n) phi
/// - alpha2 int_{left,right} (u_n - h) phi`, zero on top/bottom.
pub fn solve_adjoint_n(
    mesh: &StructuredMesh,
    sigma: &ElementCoefficient,
    u_d: &ScalarField,
    u_n: &ScalarField,
    h: &ScalarField,
    alpha1: f64,
    alpha2: f64,
) -> Result<ScalarField> {
    u_d.check(mesh)?;
    u_n.check(mesh)?;
    h.check(mesh)?;
    let mismatch = misfit(u_n, h);
    let lr = SidePair::LeftRight.sides();
    FemSystem::new(mesh, sigma, CgSettings::default())?.solve_adjoint(
        alpha1,
        &misfit(u_d, u_n),
        Some((-alpha2, &mismatch, &lr)),
        SidePair::TopBottom,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn bumpy_sigma(mesh: &StructuredMesh) -> ElementCoefficient {
        ElementCoefficient(
            (0..mesh.num_triangles())
                .map(|t| {
                    let tri = mesh.triangles()[t];
                    let c = tri.iter().map(|&v| mesh.nodes()[v]).fold([0.0, 0.0], |a, p| [a[0] + p[0] / 3.0, a[1] + p[1] / 3.0]);
                    if (c[0] - 0.4).powi(2) + (c[1] - 0.55).powi(2) < 0.06 { 10.0 } else { 1.0 }
                })
                .collect(),
        )
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_symmetric() {
        let mesh = build_unit_square_mesh(6).unwrap();
        let k = assemble_stiffness(&mesh, &bumpy_sigma(&mesh)).unwrap();
        assert!(k.is_symmetric(1e-14));
        for i in 0..k.dim() {
            assert!(k.row(i).map(|(_, v)| v).sum::<f64>().abs() < 1e-12);
        }
        // positive semidefinite on a few vectors
        for s in 0..5 {
            let x: Vec<f64> = (0..k.dim()).map(|i| ((i * 7 + s * 13) % 11) as f64 - 5.0).collect();
            assert!(crate::sparse::dot(&x, &k.mul(&x)) >= -1e-12);
        }
    }

    #[test]
    fn unit_square_single_cell_stiffness() {
        let mesh = build_unit_square_mesh(1).unwrap();
        let k = assemble_stiffness(&mesh, &ElementCoefficient::constant(&mesh, 1.0)).unwrap();
        assert_eq!(k.diagonal(), vec![1.0, 1.0, 1.0, 1.0]);
        assert!(k.mul(&[1.0; 4]).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn stiffness_scales_with_sigma() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let s = bumpy_sigma(&mesh);
        let k1 = assemble_stiffness(&mesh, &s).unwrap();
        let k3 = assemble_stiffness(&mesh, &ElementCoefficient(s.iter().map(|v| 3.0 * v).collect())).unwrap();
        let mut scaled = k1.clone();
        scaled.scale(3.0);
        assert_eq!(scaled, k3);
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let mesh = build_unit_square_mesh(2).unwrap();
        let mut s = ElementCoefficient::constant(&mesh, 1.0);
        s.0[3] = 0.0;
        assert_eq!(assemble_stiffness(&mesh, &s).unwrap_err(), Error::InvalidCoefficient { element: 3, value: 0.0 });
    }

    #[test]
    fn boundary_load_totals() {
        let mesh = build_unit_square_mesh(5).unwrap();
        let left = assemble_boundary_load(&mesh, &SideValues::new(1.0, 0.0, 0.0, 0.0), &[Side::Left]);
        assert!((left.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let lm = mesh.side_mask(&[Side::Left]);
        assert!(left.iter().zip(&lm).all(|(v, &m)| m || *v == 0.0));
        let zero = assemble_boundary_load(&mesh, &SideValues::default(), &Side::ALL);
        assert!(zero.iter().all(|&v| v == 0.0));
        let cancel = assemble_boundary_load(&mesh, &SideValues::new(1.0, -1.0, 0.0, 0.0), &[Side::Left, Side::Right]);
        assert!(cancel.iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn trivial_data_gives_zero_state() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let sigma = ElementCoefficient::constant(&mesh, 1.0);
        let zero = ScalarField::zeros(&mesh);
        let un = solve_state_neumann(&mesh, &sigma, None, &SideValues::default(), &zero).unwrap();
        let ud = solve_state_dirichlet(&mesh, &sigma, None, &SideValues::default(), &zero).unwrap();
        assert!(un.iter().chain(ud.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_solutions_reproduced() {
        for n in [3, 8, 17] {
            let mesh = build_unit_square_mesh(n).unwrap();
            let sigma = ElementCoefficient::constant(&mesh, 1.0);
            let x = ScalarField::from_fn(&mesh, |x, _| x);
            let y = ScalarField::from_fn(&mesh, |_, y| y);
            let un = solve_state_neumann(&mesh, &sigma, None, &SideValues::new(-1.0, 1.0, 0.0, 0.0), &x).unwrap();
            assert!(max_err(&un, &x) < 1e-10);
            let ud = solve_state_dirichlet(&mesh, &sigma, None, &SideValues::new(0.0, 0.0, 1.0, -1.0), &y).unwrap();
            assert!(max_err(&ud, &y) < 1e-10);
        }
    }

    #[test]
    fn scaling_sigma_and_flux_together_leaves_state() {
        let mesh = build_unit_square_mesh(8).unwrap();
        let s = bumpy_sigma(&mesh);
        let h = ScalarField::from_fn(&mesh, |x, y| x * x - y);
        let g = SideValues::new(0.3, -1.0, 0.0, 0.0);
        let u1 = solve_state_neumann(&mesh, &s, None, &g, &h).unwrap();
        let s4 = ElementCoefficient(s.iter().map(|v| 4.0 * v).collect());
        let u4 = solve_state_neumann(&mesh, &s4, None, &g.scaled(4.0), &h).unwrap();
        assert!(max_err(&u1, &u4) < 1e-8);
    }

    #[test]
    fn diagonal_reflection_swaps_roles() {
        // the mesh is symmetric under (x, y) -> (y, x) since the diagonal
        // runs along that axis; reflect sigma and data and compare
        let n = 10;
        let mesh = build_unit_square_mesh(n).unwrap();
        let np = n + 1;
        let reflect_node = |k: usize| {
            let (i, j) = (k % np, k / np);
            i * np + j
        };
        let centroid = |t: usize| {
            let tri = mesh.triangles()[t];
            tri.iter().map(|&v| mesh.nodes()[v]).fold([0.0, 0.0], |a, p| [a[0] + p[0] / 3.0, a[1] + p[1] / 3.0])
        };
        let sig = |c: [f64; 2]| if (c[0] - 0.3).powi(2) + (c[1] - 0.6).powi(2) < 0.04 { 5.0 } else { 1.0 };
        let sigma = ElementCoefficient((0..mesh.num_triangles()).map(|t| sig(centroid(t))).collect());
        let sigma_r = ElementCoefficient((0..mesh.num_triangles()).map(|t| { let c = centroid(t); sig([c[1], c[0]]) }).collect());
        let h = ScalarField::from_fn(&mesh, |x, y| (x + 2.0 * y).sin());
        let h_r = ScalarField::from_fn(&mesh, |x, y| (y + 2.0 * x).sin());
        let g = SideValues::new(0.7, -0.2, 0.0, 0.0);
        let g_r = SideValues::new(0.0, 0.0, -0.2, 0.7);
        let un = solve_state_neumann(&mesh, &sigma, None, &g, &h).unwrap();
        let ud = solve_state_dirichlet(&mesh, &sigma_r, None, &g_r, &h_r).unwrap();
        for k in 0..mesh.num_nodes() {
            assert!((un[k] - ud[reflect_node(k)]).abs() < 1e-10);
        }
    }

    #[test]
    fn galerkin_residual_vanishes_on_free_nodes() {
        let mesh = build_unit_square_mesh(12).unwrap();
        let sigma = bumpy_sigma(&mesh);
        let f = ScalarField::from_fn(&mesh, |x, y| x * y);
        let h = ScalarField::from_fn(&mesh, |x, _| x);
        let g = SideValues::new(-1.0, 2.0, 0.0, 0.0);
        let sys = FemSystem::new(&mesh, &sigma, CgSettings::default()).unwrap();
        let u = sys.solve_state(Some(&f), &g, SidePair::LeftRight, &h, None).unwrap();
        let mut load = assemble_boundary_load(&mesh, &g, &[Side::Left, Side::Right]);
        for (l, v) in load.iter_mut().zip(lumped_load(&mesh, &f)) {
            *l += v;
        }
        let ku = sys.stiffness().mul(&u);
        let fixed = mesh.side_mask(&[Side::Top, Side::Bottom]);
        let scale = load.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for k in 0..mesh.num_nodes() {
            if !fixed[k] {
                assert!((ku[k] - load[k]).abs() < 1e-8 * scale.max(1.0));
            } else {
                assert_eq!(u[k], h[k]);
            }
        }
    }

    #[test]
    fn raising_sigma_lowers_dirichlet_energy_bound() {
        // for pure Dirichlet data the energy is the minimum of int sigma |grad v|^2;
        // doubling sigma at most doubles it and never lowers it
        let mesh = build_unit_square_mesh(10).unwrap();
        let s = bumpy_sigma(&mesh);
        let h = ScalarField::from_fn(&mesh, |x, y| x + 0.5 * y * y);
        let energy = |sigma: &ElementCoefficient| {
            let sys = FemSystem::new(&mesh, sigma, CgSettings::default()).unwrap();
            let u = sys.solve(&vec![0.0; mesh.num_nodes()], &Side::ALL, &h, None).unwrap();
            crate::sparse::dot(&u, &sys.stiffness().mul(&u))
        };
        let e1 = energy(&s);
        let s2 = ElementCoefficient(s.iter().enumerate().map(|(t, v)| if t % 3 == 0 { 2.0 * v } else { *v }).collect());
        let e2 = energy(&s2);
        assert!(e2 >= e1 - 1e-12);
        assert!(e2 <= 2.0 * e1 + 1e-12);
    }

    #[test]
    fn adjoint_trivial_cases() {
        let mesh = build_unit_square_mesh(6).unwrap();
        let sigma = bumpy_sigma(&mesh);
        let u = ScalarField::from_fn(&mesh, |x, y| x * y + 0.1);
        let v = ScalarField::from_fn(&mesh, |x, y| x - y);
        let pd = solve_adjoint_d(&mesh, &sigma, &u, &u, 1.0).unwrap();
        assert!(pd.iter().all(|&x| x == 0.0));
        let pd = solve_adjoint_d(&mesh, &sigma, &u, &v, 0.0).unwrap();
        assert!(pd.iter().all(|&x| x == 0.0));
        let p1 = solve_adjoint_d(&mesh, &sigma, &u, &v, 1.5).unwrap();
        let p2 = solve_adjoint_d(&mesh, &sigma, &u, &v, 3.0).unwrap();
        assert!(p1.iter().zip(p2.iter()).all(|(a, b)| (2.0 * a - b).abs() < 1e-9 * b.abs().max(1e-3)));
        assert!(p1.iter().any(|&x| x != 0.0));

        // u_n equal to h: only the alpha1 term could act
        let pn = solve_adjoint_n(&mesh, &sigma, &u, &v, &v, 0.0, 2.0).unwrap();
        assert!(pn.iter().all(|&x| x == 0.0));
        let pn = solve_adjoint_n(&mesh, &sigma, &u, &u, &v, 1.0, 0.0).unwrap();
        assert!(pn.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adjoints_opposite_with_matched_constraints() {
        let mesh = build_unit_square_mesh(9).unwrap();
        let sigma = bumpy_sigma(&mesh);
        let w = ScalarField::from_fn(&mesh, |x, y| (3.0 * x).sin() * y);
        let sys = FemSystem::new(&mesh, &sigma, CgSettings::default()).unwrap();
        let pd = sys.solve_adjoint(-1.0, &w, None, SidePair::LeftRight, None).unwrap();
        let pn = sys.solve_adjoint(1.0, &w, None, SidePair::LeftRight, None).unwrap();
        assert!(pd.iter().zip(pn.iter()).all(|(a, b)| a == &-b));
    }

    #[test]
    fn pure_flux_solution_matches_mixed_problems() {
        let mesh = build_unit_square_mesh(12).unwrap();
        let sigma = bumpy_sigma(&mesh);
        let sys = FemSystem::new(&mesh, &sigma, CgSettings::default()).unwrap();
        let g = SideValues::new(1.0, 1.0, -1.0, -1.0);
        let u = sys.solve_pure_flux(&g).unwrap();
        let un = sys.solve_state(None, &g, SidePair::LeftRight, &u, None).unwrap();
        let ud = sys.solve_state(None, &g, SidePair::TopBottom, &u, None).unwrap();
        assert!(max_err(&u, &un) < 1e-8);
        assert!(max_err(&u, &ud) < 1e-8);
        let unbalanced = SideValues::new(1.0, 1.0, 1.0, -1.0);
        assert!(matches!(sys.solve_pure_flux(&unbalanced), Err(Error::DegenerateData(_))));
    }
}
