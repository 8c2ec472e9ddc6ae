//! H1 descent direction: find `theta` in `H1_0(D)^2` with
//! `int_D D theta : D zeta (+ w theta . zeta) = -dJ(zeta)` for all `zeta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, ElementCoefficient};
use crate::mesh::{Side, StructuredMesh};
use crate::shapederiv::{dj_load_vector, TensorRep, VectorField2};
use crate::multigrid::Multigrid;
use crate::sparse::{solve_constrained_with, CgSettings, CsrMatrix, Preconditioner, PreconditionerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub tolerance: f64,
    /// Weight of an extra lumped L2 term; 0 gives the pure gradient form.
    pub mass_weight: f64,
    /// Set from the problem's solver choice, not read from configuration.
    #[serde(skip)]
    pub preconditioner: PreconditionerKind,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self { tolerance: 1e-10, mass_weight: 0.0, preconditioner: PreconditionerKind::Jacobi }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!("descent tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.mass_weight >= 0.0) || !self.mass_weight.is_finite() {
            return Err(Error::InvalidParameter(format!("mass weight must be non-negative, got {}", self.mass_weight)));
        }
        Ok(())
    }
}

/// Matrix of the bilinear form, shared by both components.
pub fn descent_operator(mesh: &StructuredMesh, config: &DescentConfig) -> Result<CsrMatrix> {
    let mut b = assemble_stiffness(mesh, &ElementCoefficient::constant(mesh, 1.0))?;
    if config.mass_weight > 0.0 {
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let third = config.mass_weight * mesh.signed_area(t) / 3.0;
            for &v in tri {
                b.add(v, v, third);
            }
        }
    }
    Ok(b)
}

pub fn solve_descent(mesh: &StructuredMesh, tensors: &TensorRep, config: &DescentConfig) -> Result<VectorField2> {
    solve_descent_with_guess(mesh, tensors, config, None)
}

/// As [`solve_descent`], seeding CG with a previous direction.
pub fn solve_descent_with_guess(
    mesh: &StructuredMesh,
    tensors: &TensorRep,
    config: &DescentConfig,
    guess: Option<&VectorField2>,
) -> Result<VectorField2> {
    config.validate()?;
    let b = descent_operator(mesh, config)?;
    let load = dj_load_vector(mesh, tensors);
    let settings = CgSettings { rel_tol: config.tolerance, preconditioner: config.preconditioner, ..CgSettings::default() };
    solve_vector_poisson(mesh, &b, &load.scaled(-1.0), settings, guess)
}

/// Solves `B theta_c = rhs_c` per component with `theta = 0` on the boundary.
/// With the multigrid option the coarse levels ignore any mass term.
pub fn solve_vector_poisson(
    mesh: &StructuredMesh,
    b: &CsrMatrix,
    rhs: &VectorField2,
    settings: CgSettings,
    guess: Option<&VectorField2>,
) -> Result<VectorField2> {
    rhs.check(mesh)?;
    let fixed = mesh.side_mask(&Side::ALL);
    let zeros = vec![0.0; mesh.num_nodes()];
    let mg = match settings.preconditioner {
        PreconditionerKind::Jacobi => None,
        PreconditionerKind::Multigrid => {
            Some(Multigrid::new(b, mesh, &ElementCoefficient::constant(mesh, 1.0), |m| m.side_mask(&Side::ALL))?)
        }
    };
    let pre = mg.as_ref().map(|m| m as &dyn Preconditioner);
    let mut comps = [Vec::new(), Vec::new()];
    for (c, out) in comps.iter_mut().enumerate() {
        let g = guess.map(|g| g.component(c));
        *out = solve_constrained_with(b, &rhs.component(c), &fixed, &zeros, g.as_deref(), settings, pre)?.0;
    }
    Ok(VectorField2::from_components(&comps[0], &comps[1]))
}

/// `B(theta, theta)` for the pure gradient form.
pub fn energy(mesh: &StructuredMesh, theta: &VectorField2) -> f64 {
    theta.h1_seminorm_squared(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{ScalarField, lumped_load};
    use crate::shapederiv::{assemble_tensors, eval_dj};
    use std::f64::consts::PI;

    fn tensors(mesh: &StructuredMesh) -> TensorRep {
        let sigma = ElementCoefficient((0..mesh.num_triangles()).map(|t| if t % 5 == 0 { 10.0 } else { 1.0 }).collect());
        let f = |g: fn(f64, f64) -> f64| ScalarField::from_fn(mesh, g);
        assemble_tensors(
            mesh,
            &sigma,
            None,
            &f(|x, y| x * x + y),
            &f(|x, y| (2.0 * x).sin() * y),
            &f(|x, y| x * (1.0 - x) * y),
            &f(|x, y| (x - y).cos()),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_tensors_give_zero_direction() {
        let mesh = build(8);
        let theta = solve_descent(&mesh, &TensorRep::zeros(&mesh), &DescentConfig::default()).unwrap();
        assert!(theta.iter().all(|v| *v == [0.0, 0.0]));
    }

    fn build(n: usize) -> StructuredMesh {
        crate::mesh::build_unit_square_mesh(n).unwrap()
    }

    #[test]
    fn galerkin_identity_and_sign() {
        for n in [8, 20] {
            let mesh = build(n);
            let t = tensors(&mesh);
            let theta = solve_descent(&mesh, &t, &DescentConfig::default()).unwrap();
            assert!(theta.is_boundary_zero(&mesh));
            let dj = eval_dj(&mesh, &t, &theta);
            let b = energy(&mesh, &theta);
            assert!(dj <= 0.0);
            assert!((dj + b).abs() <= 1e-8 * b.max(1.0), "{dj} {b}");
        }
    }

    #[test]
    fn scaling_tensors_scales_direction() {
        let mesh = build(10);
        let t = tensors(&mesh);
        let cfg = DescentConfig { tolerance: 1e-13, ..Default::default() };
        let a = solve_descent(&mesh, &t, &cfg).unwrap();
        let b = solve_descent(&mesh, &t.scaled(4.0), &cfg).unwrap();
        for k in 0..mesh.num_nodes() {
            for c in 0..2 {
                assert!((4.0 * a[k][c] - b[k][c]).abs() < 1e-10 * a.max_norm().max(1e-3));
            }
        }
    }

    #[test]
    fn mass_term_keeps_descent() {
        let mesh = build(10);
        let t = tensors(&mesh);
        let cfg = DescentConfig { mass_weight: 5.0, ..Default::default() };
        let theta = solve_descent(&mesh, &t, &cfg).unwrap();
        assert!(eval_dj(&mesh, &t, &theta) < 0.0);
        assert!(DescentConfig { tolerance: 0.0, ..Default::default() }.validate().is_err());
        assert!(DescentConfig { mass_weight: -1.0, ..Default::default() }.validate().is_err());
    }

    /// `-Lap theta = F` with `theta = (sin(pi x) sin(pi y), x y (1-x)(1-y))`.
    #[test]
    fn manufactured_poisson_second_order() {
        let exact = |x: f64, y: f64| [(PI * x).sin() * (PI * y).sin(), x * y * (1.0 - x) * (1.0 - y)];
        let forcing = |x: f64, y: f64| [2.0 * PI * PI * (PI * x).sin() * (PI * y).sin(), 2.0 * (x * (1.0 - x) + y * (1.0 - y))];
        let err = |n: usize| {
            let mesh = build(n);
            let b = descent_operator(&mesh, &DescentConfig::default()).unwrap();
            let fx = ScalarField::from_fn(&mesh, |x, y| forcing(x, y)[0]);
            let fy = ScalarField::from_fn(&mesh, |x, y| forcing(x, y)[1]);
            let rhs = VectorField2::from_components(&lumped_load(&mesh, &fx), &lumped_load(&mesh, &fy));
            let settings = CgSettings { rel_tol: 1e-12, ..CgSettings::default() };
            let theta = solve_vector_poisson(&mesh, &b, &rhs, settings, None).unwrap();
            let diff = VectorField2(theta.iter().zip(mesh.nodes()).map(|(t, p)| {
                let e = exact(p[0], p[1]);
                [t[0] - e[0], t[1] - e[1]]
            }).collect());
            // lumped L2 norm of the nodal error
            let dx = diff.component(0);
            let dy = diff.component(1);
            (crate::fem::volume_l2_squared(&mesh, &dx) + crate::fem::volume_l2_squared(&mesh, &dy)).sqrt()
        };
        let (e1, e2, e3) = (err(8), err(16), err(32));
        let r1 = (e1 / e2).log2();
        let r2 = (e2 / e3).log2();
        assert!(r1 > 1.8 && r2 > 1.8, "orders {r1} {r2}");
    }

    #[test]
    fn warm_start_agrees() {
        let mesh = build(12);
        let t = tensors(&mesh);
        let cfg = DescentConfig { tolerance: 1e-12, ..Default::default() };
        let cold = solve_descent(&mesh, &t, &cfg).unwrap();
        let warm = solve_descent_with_guess(&mesh, &t, &cfg, Some(&cold.scaled(0.9))).unwrap();
        for k in 0..mesh.num_nodes() {
            assert!((cold[k][0] - warm[k][0]).abs() < 1e-9 && (cold[k][1] - warm[k][1]).abs() < 1e-9);
        }
    }

    #[test]
    fn multigrid_matches_jacobi() {
        let mesh = build(32);
        let t = tensors(&mesh);
        let cfg = DescentConfig { tolerance: 1e-12, ..Default::default() };
        let a = solve_descent(&mesh, &t, &cfg).unwrap();
        let mg = DescentConfig { preconditioner: PreconditionerKind::Multigrid, ..cfg };
        let b = solve_descent(&mesh, &t, &mg).unwrap();
        let scale = a.max_norm();
        for k in 0..mesh.num_nodes() {
            assert!((a[k][0] - b[k][0]).abs() < 1e-9 * scale && (a[k][1] - b[k][1]).abs() < 1e-9 * scale);
        }
        let with_mass = DescentConfig { mass_weight: 3.0, ..mg };
        let c = solve_descent(&mesh, &t, &with_mass).unwrap();
        assert!(eval_dj(&mesh, &t, &c) < 0.0);
    }
}
