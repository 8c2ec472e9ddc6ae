//! Volume form of the shape derivative,
//! `dJ(theta) = int_D S1 : D(theta) + S0 . theta`,
//! with `S1`, `S0` constant per triangle.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Result};
use crate::fem::{ElementCoefficient, ScalarField};
use crate::mesh::StructuredMesh;

/// Nodal vector field, e.g. a deformation velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2(pub Vec<[f64; 2]>);

impl VectorField2 {
    pub fn zeros(mesh: &StructuredMesh) -> Self {
        Self(vec![[0.0; 2]; mesh.num_nodes()])
    }

    pub fn from_fn(mesh: &StructuredMesh, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        Self(mesh.nodes().iter().map(|p| f(p[0], p[1])).collect())
    }

    /// Smooth field vanishing on the boundary: the bubble `16 x(1-x) y(1-y)`
    /// times a random cosine series with `modes` terms per direction and
    /// coefficients decaying like `1 / (1 + k + l)`.
    pub fn random_smooth(mesh: &StructuredMesh, seed: u64, modes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coef: Vec<[f64; 2]> = (0..modes * modes)
            .map(|m| {
                let decay = 1.0 / (1.0 + (m / modes + m % modes) as f64);
                [decay * rng.random_range(-1.0..1.0), decay * rng.random_range(-1.0..1.0)]
            })
            .collect();
        Self::from_fn(mesh, |x, y| {
            let bubble = 16.0 * x * (1.0 - x) * y * (1.0 - y);
            let mut v = [0.0; 2];
            for (m, c) in coef.iter().enumerate() {
                let basis = (std::f64::consts::PI * (m / modes) as f64 * x).cos() * (std::f64::consts::PI * (m % modes) as f64 * y).cos();
                v[0] += c[0] * basis;
                v[1] += c[1] * basis;
            }
            [bubble * v[0], bubble * v[1]]
        })
    }

    pub fn from_components(x: &[f64], y: &[f64]) -> Self {
        Self(x.iter().zip(y).map(|(&a, &b)| [a, b]).collect())
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.0.iter().map(|v| v[c]).collect()
    }

    pub fn check(&self, mesh: &StructuredMesh) -> Result<()> {
        check_len(mesh.num_nodes(), self.0.len())
    }

    pub fn max_norm(&self) -> f64 {
        self.0.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max)
    }

    pub fn is_boundary_zero(&self, mesh: &StructuredMesh) -> bool {
        (0..self.0.len()).all(|k| !mesh.is_boundary_node(k) || self.0[k] == [0.0, 0.0])
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| [c * v[0], c * v[1]]).collect())
    }

    pub fn dot(&self, other: &VectorField2) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum()
    }

    /// Constant gradient `D theta` on triangle `t`, row `c` = gradient of component `c`.
    pub fn element_jacobian(&self, mesh: &StructuredMesh, t: usize) -> [[f64; 2]; 2] {
        let (_, g) = mesh.element_gradients(t);
        jacobian(&self.0, &mesh.triangles()[t], &g)
    }

    /// `int_D |D theta|^2`.
    pub fn h1_seminorm_squared(&self, mesh: &StructuredMesh) -> f64 {
        (0..mesh.num_triangles())
            .map(|t| {
                let (area, g) = mesh.element_gradients(t);
                let d = jacobian(&self.0, &mesh.triangles()[t], &g);
                area * (d[0][0].powi(2) + d[0][1].powi(2) + d[1][0].powi(2) + d[1][1].powi(2))
            })
            .sum()
    }

    /// Full H1 norm with the exact P1 mass matrix.
    pub fn h1_norm(&self, mesh: &StructuredMesh) -> f64 {
        let l2: f64 = mesh
            .triangles()
            .iter()
            .enumerate()
            .map(|(t, tri)| {
                let area = mesh.signed_area(t);
                (0..2)
                    .map(|c| {
                        let v = [self.0[tri[0]][c], self.0[tri[1]][c], self.0[tri[2]][c]];
                        let s = v[0] + v[1] + v[2];
                        area / 12.0 * (v.iter().map(|x| x * x).sum::<f64>() + s * s)
                    })
                    .sum::<f64>()
            })
            .sum();
        (l2 + self.h1_seminorm_squared(mesh)).sqrt()
    }

    /// Nodal product with a scalar weight.
    pub fn weighted(&self, mesh: &StructuredMesh, w: impl Fn([f64; 2]) -> f64) -> Self {
        Self(mesh.nodes().iter().zip(&self.0).map(|(&p, v)| [w(p) * v[0], w(p) * v[1]]).collect())
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Splits `base` by the distance `dist` to an interface into a part vanishing
/// within `gap` of it (ramping up over `width`) and a part supported within
/// `gap`. Both are scaled to unit `H1` norm.
pub fn interface_split(
    mesh: &StructuredMesh,
    base: &VectorField2,
    dist: impl Fn([f64; 2]) -> f64,
    gap: f64,
    width: f64,
) -> (VectorField2, VectorField2) {
    let unit = |v: VectorField2| {
        let norm = v.h1_norm(mesh);
        if norm > 0.0 { v.scaled(1.0 / norm) } else { v }
    };
    let away = base.weighted(mesh, |p| smoothstep((dist(p).abs() - gap) / width));
    let near = base.weighted(mesh, |p| 1.0 - smoothstep(dist(p).abs() / gap));
    (unit(away), unit(near))
}

impl Deref for VectorField2 {
    type Target = [[f64; 2]];
    fn deref(&self) -> &[[f64; 2]] {
        &self.0
    }
}

impl DerefMut for VectorField2 {
    fn deref_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.0
    }
}

fn jacobian(theta: &[[f64; 2]], tri: &[usize; 3], g: &[[f64; 2]; 3]) -> [[f64; 2]; 2] {
    let mut d = [[0.0; 2]; 2];
    for (a, &v) in tri.iter().enumerate() {
        for c in 0..2 {
            d[c][0] += theta[v][c] * g[a][0];
            d[c][1] += theta[v][c] * g[a][1];
        }
    }
    d
}

fn p1_gradient(w: &[f64], tri: &[usize; 3], g: &[[f64; 2]; 3]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (a, &v) in tri.iter().enumerate() {
        out[0] += w[v] * g[a][0];
        out[1] += w[v] * g[a][1];
    }
    out
}

/// Per-triangle tensors of the volume shape derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRep {
    pub s1: Vec<[[f64; 2]; 2]>,
    pub s0: Vec<[f64; 2]>,
}

impl TensorRep {
    pub fn zeros(mesh: &StructuredMesh) -> Self {
        Self { s1: vec![[[0.0; 2]; 2]; mesh.num_triangles()], s0: vec![[0.0; 2]; mesh.num_triangles()] }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &TensorRep) {
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            for i in 0..2 {
                for j in 0..2 {
                    a[i][j] += c * b[i][j];
                }
            }
        }
        for (a, b) in self.s0.iter_mut().zip(&other.s0) {
            a[0] += c * b[0];
            a[1] += c * b[1];
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = Self { s1: vec![[[0.0; 2]; 2]; self.s1.len()], s0: vec![[0.0; 2]; self.s0.len()] };
        out.add_scaled(c, self);
        out
    }
}

/// Tensors for one measurement:
///
/// ```text
/// S1 = -sigma (grad u_d (x) grad p_d + grad p_d (x) grad u_d + same for n)
///      + sigma (grad u_d . grad p_d + grad u_n . grad p_n) I
///      + (alpha1 / 2 (u_d - u_n)^2 - f (p_n + p_d)) I
/// S0 = -(p_d + p_n) grad f
/// ```
///
/// Nodal products in the scalar term are averaged over the three vertices,
/// the same quadrature the cost and adjoint loads use.
#[allow(clippy::too_many_arguments)]
pub fn assemble_tensors(
    mesh: &StructuredMesh,
    sigma: &ElementCoefficient,
    f: Option<&ScalarField>,
    u_d: &ScalarField,
    u_n: &ScalarField,
    p_d: &ScalarField,
    p_n: &ScalarField,
    alpha1: f64,
) -> Result<TensorRep> {
    check_len(mesh.num_triangles(), sigma.len())?;
    for w in [u_d, u_n, p_d, p_n] {
        w.check(mesh)?;
    }
    if let Some(f) = f {
        f.check(mesh)?;
    }
    let mut out = TensorRep::zeros(mesh);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (_, g) = mesh.element_gradients(t);
        let gud = p1_gradient(u_d, tri, &g);
        let gun = p1_gradient(u_n, tri, &g);
        let gpd = p1_gradient(p_d, tri, &g);
        let gpn = p1_gradient(p_n, tri, &g);
        let s = sigma[t];
        let misfit: f64 = tri.iter().map(|&v| (u_d[v] - u_n[v]).powi(2)).sum::<f64>() / 3.0;
        let mut scalar = 0.5 * alpha1 * misfit + s * (gud[0] * gpd[0] + gud[1] * gpd[1] + gun[0] * gpn[0] + gun[1] * gpn[1]);
        if let Some(f) = f {
            scalar -= tri.iter().map(|&v| f[v] * (p_n[v] + p_d[v])).sum::<f64>() / 3.0;
            let gf = p1_gradient(f, tri, &g);
            let pbar = tri.iter().map(|&v| p_d[v] + p_n[v]).sum::<f64>() / 3.0;
            out.s0[t] = [-pbar * gf[0], -pbar * gf[1]];
        }
        let s1 = &mut out.s1[t];
        let sym = |i: usize, j: usize| -s * (gud[i] * gpd[j] + gpd[i] * gud[j] + gun[i] * gpn[j] + gpn[i] * gun[j]);
        let off = sym(0, 1);
        *s1 = [[sym(0, 0) + scalar, off], [off, sym(1, 1) + scalar]];
    }
    Ok(out)
}

/// Element sum of `|T| (S1 : D theta + S0 . theta_bar)`.
pub fn eval_dj(mesh: &StructuredMesh, tensors: &TensorRep, theta: &VectorField2) -> f64 {
    let mut total = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (area, g) = mesh.element_gradients(t);
        let d = jacobian(theta, tri, &g);
        let s1 = &tensors.s1[t];
        let s0 = tensors.s0[t];
        let mean = [0, 1].map(|c| tri.iter().map(|&v| theta[v][c]).sum::<f64>() / 3.0);
        total += area * (s1[0][0] * d[0][0] + s1[0][1] * d[0][1] + s1[1][0] * d[1][0] + s1[1][1] * d[1][1] + s0[0] * mean[0] + s0[1] * mean[1]);
    }
    total
}

/// `L` with `L . theta = eval_dj(theta)` for every nodal field `theta`.
pub fn dj_load_vector(mesh: &StructuredMesh, tensors: &TensorRep) -> VectorField2 {
    let mut load = vec![[0.0; 2]; mesh.num_nodes()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (area, g) = mesh.element_gradients(t);
        let s1 = &tensors.s1[t];
        let s0 = tensors.s0[t];
        for (a, &v) in tri.iter().enumerate() {
            for c in 0..2 {
                load[v][c] += area * (s1[c][0] * g[a][0] + s1[c][1] * g[a][1] + s0[c] / 3.0);
            }
        }
    }
    VectorField2(load)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(mesh: &StructuredMesh, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField::from_fn(mesh, f)
    }

    fn sample(mesh: &StructuredMesh, seed: u64) -> (ElementCoefficient, [ScalarField; 4]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = ElementCoefficient((0..mesh.num_triangles()).map(|_| if rng.random::<bool>() { 10.0 } else { 1.0 }).collect());
        let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.5..3.0));
        (
            sigma,
            [
                field(mesh, |x, y| (a[0] * x).sin() + y * y),
                field(mesh, |x, y| (a[1] * y).cos() * x),
                field(mesh, |x, y| x * (1.0 - x) * (a[2] * y).sin()),
                field(mesh, |x, y| y * (1.0 - y) * (a[3] * x).cos()),
            ],
        )
    }

    fn random_theta(mesh: &StructuredMesh, rng: &mut ChaCha8Rng) -> VectorField2 {
        VectorField2(
            (0..mesh.num_nodes())
                .map(|k| if mesh.is_boundary_node(k) { [0.0, 0.0] } else { [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)] })
                .collect(),
        )
    }

    #[test]
    fn vanishing_data_gives_zero_tensors() {
        let mesh = build_unit_square_mesh(6).unwrap();
        let (sigma, [u, _, _, _]) = sample(&mesh, 1);
        let zero = ScalarField::zeros(&mesh);
        let t = assemble_tensors(&mesh, &sigma, None, &u, &u, &zero, &zero, 1.0).unwrap();
        assert_eq!(t, TensorRep::zeros(&mesh));
    }

    #[test]
    fn trace_identity_without_source() {
        let mesh = build_unit_square_mesh(9).unwrap();
        let (sigma, [ud, un, pd, pn]) = sample(&mesh, 2);
        let alpha1 = 1.7;
        let t = assemble_tensors(&mesh, &sigma, None, &ud, &un, &pd, &pn, alpha1).unwrap();
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let misfit: f64 = tri.iter().map(|&v| (ud[v] - un[v]).powi(2)).sum::<f64>() / 3.0;
            assert!((t.s1[e][0][0] + t.s1[e][1][1] - alpha1 * misfit).abs() < 1e-12);
            assert_eq!(t.s0[e], [0.0, 0.0]);
            assert_eq!(t.s1[e][0][1], t.s1[e][1][0]);
        }
    }

    #[test]
    fn source_term_enters_s0() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let (sigma, [ud, un, pd, pn]) = sample(&mesh, 3);
        let f = field(&mesh, |x, _| 2.0 * x);
        let t = assemble_tensors(&mesh, &sigma, Some(&f), &ud, &un, &pd, &pn, 1.0).unwrap();
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let pbar: f64 = tri.iter().map(|&v| pd[v] + pn[v]).sum::<f64>() / 3.0;
            assert!((t.s0[e][0] + 2.0 * pbar).abs() < 1e-12);
            assert!(t.s0[e][1].abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let small = build_unit_square_mesh(3).unwrap();
        let (sigma, [ud, un, pd, _]) = sample(&mesh, 4);
        let wrong = ScalarField::zeros(&small);
        assert!(assemble_tensors(&mesh, &sigma, None, &ud, &un, &pd, &wrong, 1.0).is_err());
    }

    #[test]
    fn load_vector_reproduces_eval() {
        let mesh = build_unit_square_mesh(10).unwrap();
        let (sigma, [ud, un, pd, pn]) = sample(&mesh, 5);
        let f = field(&mesh, |x, y| x * y);
        let t = assemble_tensors(&mesh, &sigma, Some(&f), &ud, &un, &pd, &pn, 1.0).unwrap();
        let load = dj_load_vector(&mesh, &t);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let theta = random_theta(&mesh, &mut rng);
            let direct = eval_dj(&mesh, &t, &theta);
            let via_load = load.dot(&theta);
            assert!((direct - via_load).abs() <= 1e-12 * direct.abs().max(1.0), "{direct} vs {via_load}");
        }
    }

    #[test]
    fn zero_theta_and_zero_tensors() {
        let mesh = build_unit_square_mesh(5).unwrap();
        let (sigma, [ud, un, pd, pn]) = sample(&mesh, 7);
        let t = assemble_tensors(&mesh, &sigma, None, &ud, &un, &pd, &pn, 1.0).unwrap();
        assert_eq!(eval_dj(&mesh, &t, &VectorField2::zeros(&mesh)), 0.0);
        assert!(dj_load_vector(&mesh, &TensorRep::zeros(&mesh)).iter().all(|v| *v == [0.0, 0.0]));
        // constant theta has zero Jacobian; with S0 = 0 nothing remains
        let constant = VectorField2(vec![[0.4, -1.1]; mesh.num_nodes()]);
        assert!(eval_dj(&mesh, &t, &constant).abs() < 1e-12);
    }

    #[test]
    fn load_is_linear_in_tensors() {
        let mesh = build_unit_square_mesh(6).unwrap();
        let (sigma, [ud, un, pd, pn]) = sample(&mesh, 8);
        let a = assemble_tensors(&mesh, &sigma, None, &ud, &un, &pd, &pn, 1.0).unwrap();
        let b = assemble_tensors(&mesh, &sigma, None, &un, &pd, &ud, &pn, 0.5).unwrap();
        let mut sum = a.clone();
        sum.add_scaled(1.0, &b);
        let (la, lb, ls) = (dj_load_vector(&mesh, &a), dj_load_vector(&mesh, &b), dj_load_vector(&mesh, &sum));
        for k in 0..mesh.num_nodes() {
            for c in 0..2 {
                assert!((la[k][c] + lb[k][c] - ls[k][c]).abs() < 1e-12);
            }
        }
        let half = a.scaled(0.5);
        let lh = dj_load_vector(&mesh, &half);
        assert!(la.iter().zip(lh.iter()).all(|(x, y)| (0.5 * x[0] - y[0]).abs() < 1e-14 && (0.5 * x[1] - y[1]).abs() < 1e-14));
    }

    #[test]
    fn jacobian_of_linear_field() {
        let mesh = build_unit_square_mesh(3).unwrap();
        let theta = VectorField2::from_fn(&mesh, |x, y| [2.0 * x - y, 0.5 * y + 3.0 * x]);
        for t in 0..mesh.num_triangles() {
            let d = theta.element_jacobian(&mesh, t);
            let expect = [[2.0, -1.0], [3.0, 0.5]];
            for i in 0..2 {
                for j in 0..2 {
                    assert!((d[i][j] - expect[i][j]).abs() < 1e-12);
                }
            }
        }
        // |D theta|^2 = 4 + 1 + 9 + 0.25 over the unit square
        assert!((theta.h1_seminorm_squared(&mesh) - 14.25).abs() < 1e-12);
    }

    #[test]
    fn h1_norm_of_constant_is_l2() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let theta = VectorField2(vec![[3.0, 4.0]; mesh.num_nodes()]);
        assert!((theta.h1_norm(&mesh) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn random_smooth_fields() {
        let mesh = build_unit_square_mesh(16).unwrap();
        let a = VectorField2::random_smooth(&mesh, 7, 3);
        assert_eq!(a, VectorField2::random_smooth(&mesh, 7, 3));
        assert_ne!(a, VectorField2::random_smooth(&mesh, 8, 3));
        assert!(a.is_boundary_zero(&mesh));
        assert!(a.max_norm() > 0.0 && a.max_norm() <= 9.0);
    }

    #[test]
    fn interface_split_supports() {
        let mesh = build_unit_square_mesh(32).unwrap();
        let base = VectorField2::random_smooth(&mesh, 3, 3);
        let dist = |p: [f64; 2]| ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt() - 0.2;
        let (away, near) = interface_split(&mesh, &base, dist, 0.1, 0.05);
        assert!((away.h1_norm(&mesh) - 1.0).abs() < 1e-12);
        assert!((near.h1_norm(&mesh) - 1.0).abs() < 1e-12);
        for (k, &p) in mesh.nodes().iter().enumerate() {
            let d = dist(p).abs();
            if d <= 0.1 {
                assert_eq!(away[k], [0.0, 0.0]);
            }
            if d >= 0.1 {
                assert_eq!(near[k], [0.0, 0.0]);
            }
        }
    }
}
