//! Level-set representation of the inclusion `{phi < 0}`.
//!
//! Initialization by signed distance to balls and ellipses, conductivity
//! sampling, transport `phi_t + theta . grad(phi) = 0` with the Local
//! Lax-Friedrichs flux and forward Euler, plus a handful of geometric
//! measurements on the zero level set.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fem::{ElementCoefficient, ScalarField};
use crate::mesh::StructuredMesh;
use crate::shapederiv::VectorField2;

pub const DEFAULT_CFL: f64 = 0.5;
pub const VELOCITY_FLOOR: f64 = 1e-14;
pub const GRADIENT_DEVIATION_WARNING: f64 = 0.5;

/// Nodal level-set function; negative inside the inclusion.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet(pub ScalarField);

impl LevelSet {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// True when both signs occur, i.e. a zero level set exists.
    pub fn has_interface(&self) -> bool {
        self.0.iter().any(|&v| v < 0.0) && self.0.iter().any(|&v| v >= 0.0)
    }
}

impl Deref for LevelSet {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Ball { center: [f64; 2], radius: f64 },
    Ellipse { center: [f64; 2], semi_axes: [f64; 2], #[serde(default)] angle: f64 },
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let (center, extent) = match *self {
            Primitive::Ball { center, radius } => {
                if !(radius > 0.0) {
                    return Err(Error::InvalidShape(format!("ball radius must be positive, got {radius}")));
                }
                (center, radius)
            }
            Primitive::Ellipse { center, semi_axes, .. } => {
                if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) {
                    return Err(Error::InvalidShape(format!("ellipse semi-axes must be positive, got {semi_axes:?}")));
                }
                (center, semi_axes[0].max(semi_axes[1]))
            }
        };
        let inside = |c: f64| c - extent >= 0.0 && c + extent <= 1.0;
        if !(inside(center[0]) && inside(center[1])) {
            return Err(Error::InvalidShape(format!("{self:?} does not fit in the unit square")));
        }
        Ok(())
    }

    /// Signed distance to the boundary of the primitive, negative inside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            Primitive::Ball { center, radius } => ((p[0] - center[0]).hypot(p[1] - center[1])) - radius,
            Primitive::Ellipse { center, semi_axes, angle } => {
                let (s, c) = angle.sin_cos();
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let x = c * dx + s * dy;
                let y = -s * dx + c * dy;
                let inside = (x / semi_axes[0]).powi(2) + (y / semi_axes[1]).powi(2) < 1.0;
                let d = ellipse_distance(semi_axes[0], semi_axes[1], x, y);
                if inside {
                    -d
                } else {
                    d
                }
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Ball { radius, .. } => std::f64::consts::PI * radius * radius,
            Primitive::Ellipse { semi_axes, .. } => std::f64::consts::PI * semi_axes[0] * semi_axes[1],
        }
    }
}

/// Union of primitives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeSpec(pub Vec<Primitive>);

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidShape("shape list is empty".into()));
        }
        self.0.iter().try_for_each(Primitive::validate)
    }

    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        self.0.iter().map(|s| s.signed_distance(p)).fold(f64::INFINITY, f64::min)
    }
}

/// Unsigned distance from `(x, y)` to the axis-aligned ellipse with
/// semi-axes `a`, `b` centred at the origin.
fn ellipse_distance(a: f64, b: f64, x: f64, y: f64) -> f64 {
    // reduce to the first quadrant with the major axis along x
    let (e0, e1, y0, y1) = if a >= b { (a, b, x.abs(), y.abs()) } else { (b, a, y.abs(), x.abs()) };
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e0 / e1).powi(2);
            match ellipse_root(r0, z0, z1, g) {
                Some(s) => {
                    let x0 = r0 * y0 / (s + r0);
                    let x1 = y1 / (s + 1.0);
                    (x0 - y0).hypot(x1 - y1)
                }
                None => {
                    // scaled algebraic distance |F| / |grad F|
                    let gx = 2.0 * y0 / (e0 * e0);
                    let gy = 2.0 * y1 / (e1 * e1);
                    g.abs() / gx.hypot(gy)
                }
            }
        } else {
            (y1 - e1).abs()
        }
    } else {
        let numer = e0 * y0;
        let denom = e0 * e0 - e1 * e1;
        if numer < denom {
            let xde = numer / denom;
            let x0 = e0 * xde;
            let x1 = e1 * (1.0 - xde * xde).max(0.0).sqrt();
            (x0 - y0).hypot(x1)
        } else {
            (y0 - e0).abs()
        }
    }
}

/// Root of `(r0 z0 / (s + r0))^2 + (z1 / (s + 1))^2 - 1`, decreasing and
/// convex on the bracket, by Newton from the left end with bisection
/// safeguarding. `None` when 50 iterations do not reach `1e-10`.
fn ellipse_root(r0: f64, z0: f64, z1: f64, g: f64) -> Option<f64> {
    let n0 = r0 * z0;
    let mut lo = z1 - 1.0;
    let mut hi = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let eval = |s: f64| {
        let a = n0 / (s + r0);
        let b = z1 / (s + 1.0);
        let f = a * a + b * b - 1.0;
        let df = -2.0 * (a * a / (s + r0) + b * b / (s + 1.0));
        (f, df)
    };
    let mut s = lo;
    for _ in 0..50 {
        let (f, df) = eval(s);
        if f > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let mut next = s - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-10 * (1.0 + s.abs()) || (hi - lo).abs() <= 1e-15 * (1.0 + s.abs()) {
            return Some(next);
        }
        s = next;
    }
    None
}

pub fn init_signed_distance(mesh: &StructuredMesh, shapes: &ShapeSpec) -> Result<LevelSet> {
    shapes.validate()?;
    Ok(LevelSet(ScalarField(mesh.nodes().iter().map(|&p| shapes.signed_distance(p)).collect())))
}

/// How a triangle cut by the interface is assigned a conductivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSampling {
    /// `sigma+` when the mean of the three vertex values is negative.
    VertexAverage,
    /// Area-weighted mix by the fraction of the triangle where the linear
    /// interpolant is negative.
    #[default]
    AreaFraction,
}

pub fn sigma_from_levelset(mesh: &StructuredMesh, phi: &LevelSet, sigma_plus: f64, sigma_minus: f64) -> ElementCoefficient {
    sigma_from_levelset_with(mesh, phi, sigma_plus, sigma_minus, SigmaSampling::default())
}

pub fn sigma_from_levelset_with(
    mesh: &StructuredMesh,
    phi: &LevelSet,
    sigma_plus: f64,
    sigma_minus: f64,
    sampling: SigmaSampling,
) -> ElementCoefficient {
    let nodes = mesh.nodes();
    ElementCoefficient(
        mesh.triangles()
            .iter()
            .map(|tri| {
                let v = [phi[tri[0]], phi[tri[1]], phi[tri[2]]];
                match sampling {
                    SigmaSampling::VertexAverage => {
                        if v[0] + v[1] + v[2] < 0.0 {
                            sigma_plus
                        } else {
                            sigma_minus
                        }
                    }
                    SigmaSampling::AreaFraction => {
                        let pts = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
                        let total = polygon_moments(&pts).0;
                        let frac = (negative_part(&pts, &v).0 / total).clamp(0.0, 1.0);
                        frac * sigma_plus + (1.0 - frac) * sigma_minus
                    }
                }
            })
            .collect(),
    )
}

/// One forward Euler step with the Local Lax-Friedrichs numerical
/// Hamiltonian for `H(grad phi) = theta . grad phi`.
///
/// At boundary nodes the missing one-sided difference is replaced by the
/// available one.
pub fn llf_step(mesh: &StructuredMesh, phi: &LevelSet, theta: &VectorField2, dt: f64) -> LevelSet {
    let n = mesh.n();
    let np = n + 1;
    let h = mesh.h();
    let v = phi.values();
    let mut out = vec![0.0; v.len()];
    for j in 0..np {
        for i in 0..np {
            let k = j * np + i;
            let [tx, ty] = theta[k];
            if tx == 0.0 && ty == 0.0 {
                out[k] = v[k];
                continue;
            }
            let dm_x = (i > 0).then(|| (v[k] - v[k - 1]) / h);
            let dp_x = (i < n).then(|| (v[k + 1] - v[k]) / h);
            let dm_y = (j > 0).then(|| (v[k] - v[k - np]) / h);
            let dp_y = (j < n).then(|| (v[k + np] - v[k]) / h);
            let (pm, pp) = one_sided_pair(dm_x, dp_x);
            let (qm, qp) = one_sided_pair(dm_y, dp_y);
            let ham = tx * 0.5 * (pm + pp) + ty * 0.5 * (qm + qp) - 0.5 * (pp - pm) * tx.abs() - 0.5 * (qp - qm) * ty.abs();
            out[k] = v[k] - dt * ham;
        }
    }
    LevelSet(ScalarField(out))
}

fn one_sided_pair(minus: Option<f64>, plus: Option<f64>) -> (f64, f64) {
    match (minus, plus) {
        (Some(m), Some(p)) => (m, p),
        (Some(m), None) => (m, m),
        (None, Some(p)) => (p, p),
        (None, None) => (0.0, 0.0),
    }
}

/// Largest stable step for `theta` at the given CFL number.
pub fn cfl_time_step(mesh: &StructuredMesh, theta: &VectorField2, cfl: f64) -> f64 {
    cfl * mesh.h() / theta.max_norm().max(VELOCITY_FLOOR)
}

/// Transport for `total_time` with frozen `theta`, landing exactly on the
/// final time.
pub fn advect(mesh: &StructuredMesh, phi: &LevelSet, theta: &VectorField2, total_time: f64) -> LevelSet {
    advect_with_cfl(mesh, phi, theta, total_time, DEFAULT_CFL)
}

pub fn advect_with_cfl(mesh: &StructuredMesh, phi: &LevelSet, theta: &VectorField2, total_time: f64, cfl: f64) -> LevelSet {
    let dt = cfl_time_step(mesh, theta, cfl);
    let mut current = phi.clone();
    let mut elapsed = 0.0;
    while elapsed < total_time {
        let step = dt.min(total_time - elapsed);
        // the remainder can fall below rounding of elapsed
        if step <= 1e-15 * total_time {
            break;
        }
        current = llf_step(mesh, &current, theta, step);
        elapsed += step;
    }
    current
}

/// Median over interior nodes of `| |grad phi| - 1 |` with central differences.
pub fn gradient_norm_deviation(mesh: &StructuredMesh, phi: &LevelSet) -> f64 {
    let n = mesh.n();
    if n < 2 {
        return 0.0;
    }
    let np = n + 1;
    let h2 = 2.0 * mesh.h();
    let mut dev = Vec::with_capacity((n - 1) * (n - 1));
    for j in 1..n {
        for i in 1..n {
            let k = j * np + i;
            let gx = (phi[k + 1] - phi[k - 1]) / h2;
            let gy = (phi[k + np] - phi[k - np]) / h2;
            dev.push((gx.hypot(gy) - 1.0).abs());
        }
    }
    dev.sort_by(f64::total_cmp);
    let m = dev.len();
    if m % 2 == 1 {
        dev[m / 2]
    } else {
        0.5 * (dev[m / 2 - 1] + dev[m / 2])
    }
}

/// Area and first moments of a simple polygon (shoelace).
fn polygon_moments(pts: &[[f64; 2]]) -> (f64, [f64; 2]) {
    let mut a = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    for k in 0..pts.len() {
        let p = pts[k];
        let q = pts[(k + 1) % pts.len()];
        let cross = p[0] * q[1] - q[0] * p[1];
        a += cross;
        mx += (p[0] + q[0]) * cross;
        my += (p[1] + q[1]) * cross;
    }
    (0.5 * a, [mx / 6.0, my / 6.0])
}

/// Area and first moments of the part of a triangle where the linear
/// interpolant of `vals` is negative.
fn negative_part(pts: &[[f64; 2]; 3], vals: &[f64; 3]) -> (f64, [f64; 2]) {
    let neg = vals.iter().filter(|&&v| v < 0.0).count();
    if neg == 0 {
        return (0.0, [0.0, 0.0]);
    }
    if neg == 3 {
        return polygon_moments(pts);
    }
    let mut poly: Vec<[f64; 2]> = Vec::with_capacity(4);
    for k in 0..3 {
        let (p, q) = (pts[k], pts[(k + 1) % 3]);
        let (a, b) = (vals[k], vals[(k + 1) % 3]);
        if a < 0.0 {
            poly.push(p);
        }
        if (a < 0.0) != (b < 0.0) {
            let s = a / (a - b);
            poly.push([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]);
        }
    }
    polygon_moments(&poly)
}

/// Area and centroid of `{phi < 0}` for the piecewise-linear interpolant.
pub fn negative_region_moments(mesh: &StructuredMesh, phi: &[f64]) -> (f64, [f64; 2]) {
    let nodes = mesh.nodes();
    let mut area = 0.0;
    let mut m = [0.0, 0.0];
    for tri in mesh.triangles() {
        let pts = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
        let (a, mom) = negative_part(&pts, &[phi[tri[0]], phi[tri[1]], phi[tri[2]]]);
        area += a;
        m[0] += mom[0];
        m[1] += mom[1];
    }
    let c = if area > 0.0 { [m[0] / area, m[1] / area] } else { [f64::NAN, f64::NAN] };
    (area, c)
}

/// Zero crossings of the piecewise-linear interpolant along mesh edges.
pub fn zero_level_points(mesh: &StructuredMesh, phi: &[f64]) -> Vec<[f64; 2]> {
    let n = mesh.n();
    let np = n + 1;
    let nodes = mesh.nodes();
    let mut pts = Vec::new();
    let mut visit = |a: usize, b: usize| {
        let (fa, fb) = (phi[a], phi[b]);
        if (fa < 0.0) != (fb < 0.0) {
            let s = fa / (fa - fb);
            let (p, q) = (nodes[a], nodes[b]);
            pts.push([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]);
        }
    };
    for j in 0..np {
        for i in 0..np {
            let k = j * np + i;
            if i < n {
                visit(k, k + 1);
            }
            if j < n {
                visit(k, k + np);
            }
            if i < n && j < n {
                visit(k, k + np + 1);
            }
        }
    }
    pts
}

/// Symmetric Hausdorff distance between two point sets (infinite if exactly
/// one of them is empty).
pub fn hausdorff_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let directed = |x: &[[f64; 2]], y: &[[f64; 2]]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p[0] - q[0]).hypot(p[1] - q[1])).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// Area of `{phi_a < 0} xor {phi_b < 0}` for the piecewise-linear
/// interpolants, sampled at the centroids of an 8x8 subdivision of every
/// triangle.
pub fn symmetric_difference_area(mesh: &StructuredMesh, phi_a: &[f64], phi_b: &[f64]) -> Result<f64> {
    check_len(mesh.num_nodes(), phi_a.len())?;
    check_len(mesh.num_nodes(), phi_b.len())?;
    const R: usize = 8;
    let rf = R as f64;
    let mut samples = Vec::with_capacity(R * R);
    for i in 0..R {
        for j in 0..R - i {
            samples.push([(i as f64 + 1.0 / 3.0) / rf, (j as f64 + 1.0 / 3.0) / rf]);
            if i + j + 1 < R {
                samples.push([(i as f64 + 2.0 / 3.0) / rf, (j as f64 + 2.0 / 3.0) / rf]);
            }
        }
    }
    let mut area = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let w = mesh.signed_area(t) / (R * R) as f64;
        let (a, b) = ([phi_a[tri[0]], phi_a[tri[1]], phi_a[tri[2]]], [phi_b[tri[0]], phi_b[tri[1]], phi_b[tri[2]]]);
        for s in &samples {
            let l = [1.0 - s[0] - s[1], s[0], s[1]];
            let va = l[0] * a[0] + l[1] * a[1] + l[2] * a[2];
            let vb = l[0] * b[0] + l[1] * b[1] + l[2] * b[2];
            if (va < 0.0) != (vb < 0.0) {
                area += w;
            }
        }
    }
    Ok(area)
}
