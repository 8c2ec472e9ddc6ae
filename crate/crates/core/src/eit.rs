//! Inclusion reconstruction from boundary data.
//!
//! For every applied flux `g_i` two mixed problems are solved on the current
//! conductivity: `u_n` takes the flux on one pair of opposite sides and the
//! measured potential on the other pair, `u_d` swaps the roles. The cost
//! penalizes their disagreement,
//!
//! ```text
//! J = sum_i mu_i [ alpha1/2 int_D (u_d,i - u_n,i)^2 + alpha2/2 int_{flux sides} (u_n,i - h_i)^2 ]
//! ```
//!
//! with weights `mu_i` frozen at the first evaluation so every term starts
//! at one.

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::descent::{solve_descent_with_guess, DescentConfig};
use crate::error::{check_len, Error, Result};
use crate::fem::{boundary_l2_squared, volume_l2_squared, ElementCoefficient, FemSystem, ScalarField, SidePair, SideValues};
use crate::levelset::{
    advect_with_cfl, gradient_norm_deviation, init_signed_distance, sigma_from_levelset_with, LevelSet, ShapeSpec, SigmaSampling,
    GRADIENT_DEVIATION_WARNING,
};
use crate::mesh::{Side, StructuredMesh};
use crate::shapederiv::{assemble_tensors, eval_dj, TensorRep, VectorField2};
use crate::sparse::{CgSettings, PreconditionerKind};

/// The three flux patterns: `+1` on left and right, then left and top, then
/// left and bottom; `-1` on the remaining sides.
pub fn standard_fluxes() -> Vec<SideValues> {
    vec![
        SideValues::new(1.0, 1.0, -1.0, -1.0),
        SideValues::new(1.0, -1.0, 1.0, -1.0),
        SideValues::new(1.0, -1.0, -1.0, 1.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmijoConfig {
    pub c: f64,
    pub max_backtracks: usize,
    /// First trial step moves the interface by about this many cells.
    pub initial_displacement_cells: f64,
    /// Accepted step times this factor seeds the next line search.
    pub growth: f64,
    /// Upper bound on the trial displacement, in cells.
    pub max_displacement_cells: f64,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self { c: 1e-4, max_backtracks: 20, initial_displacement_cells: 2.0, growth: 2.0, max_displacement_cells: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EitProblem {
    pub n: usize,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub fluxes: Vec<SideValues>,
    /// Sides carrying the flux in the `u_n` problem; `u_d` uses the other pair.
    pub neumann_sides: SidePair,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta: f64,
    pub seed: u64,
    pub gamma: f64,
    pub stop_patience: usize,
    pub max_iter: usize,
    /// Stop once `-dJ(theta)` falls below this value times `max(1, J)`.
    pub grad_tol: f64,
    pub armijo: ArmijoConfig,
    pub cfl: f64,
    pub cg_tol: f64,
    pub preconditioner: PreconditionerKind,
    pub sampling: SigmaSampling,
    pub descent: DescentConfig,
}

impl Default for EitProblem {
    fn default() -> Self {
        Self {
            n: 128,
            sigma_plus: 10.0,
            sigma_minus: 1.0,
            fluxes: standard_fluxes(),
            neumann_sides: SidePair::LeftRight,
            alpha1: 1.0,
            alpha2: 0.0,
            delta: 0.0,
            seed: 0,
            gamma: 5e-5,
            stop_patience: 5,
            max_iter: 500,
            grad_tol: 1e-12,
            armijo: ArmijoConfig::default(),
            cfl: 0.5,
            cg_tol: 1e-10,
            preconditioner: PreconditionerKind::Jacobi,
            sampling: SigmaSampling::default(),
            descent: DescentConfig::default(),
        }
    }
}

impl EitProblem {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.sigma_plus > 0.0 && self.sigma_minus > 0.0) || !self.sigma_plus.is_finite() || !self.sigma_minus.is_finite() {
            return bad(format!("conductivities must be positive, got {} and {}", self.sigma_plus, self.sigma_minus));
        }
        if self.sigma_plus == self.sigma_minus {
            return bad("sigma_plus and sigma_minus must differ".into());
        }
        if self.fluxes.is_empty() {
            return bad("at least one flux is required".into());
        }
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) || !(self.alpha1 + self.alpha2 > 0.0) {
            return bad(format!("need alpha1, alpha2 >= 0 with a positive sum, got {} and {}", self.alpha1, self.alpha2));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return bad(format!("noise delta must be non-negative, got {}", self.delta));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.stop_patience == 0 {
            return bad("stop_patience must be at least 1".into());
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return bad(format!("cfl must lie in (0, 1], got {}", self.cfl));
        }
        if !(self.cg_tol > 0.0) {
            return bad(format!("cg_tol must be positive, got {}", self.cg_tol));
        }
        let a = &self.armijo;
        if !(a.c > 0.0 && a.c < 1.0) || !(a.growth >= 1.0) || !(a.initial_displacement_cells > 0.0) || !(a.max_displacement_cells >= a.initial_displacement_cells) {
            return bad(format!("invalid line-search settings {a:?}"));
        }
        self.descent.validate()
    }

    pub fn mesh(&self) -> Result<StructuredMesh> {
        StructuredMesh::unit_square(self.n)
    }

    pub fn cg_settings(&self) -> CgSettings {
        CgSettings { rel_tol: self.cg_tol, preconditioner: self.preconditioner, ..CgSettings::default() }
    }

    /// Descent settings with the problem's solver choice.
    pub fn descent_config(&self) -> DescentConfig {
        DescentConfig { preconditioner: self.preconditioner, ..self.descent }
    }

    pub fn sigma(&self, mesh: &StructuredMesh, phi: &LevelSet) -> ElementCoefficient {
        sigma_from_levelset_with(mesh, phi, self.sigma_plus, self.sigma_minus, self.sampling)
    }

    fn dirichlet_n(&self) -> SidePair {
        self.neumann_sides.other()
    }
}

/// Boundary potentials for every flux.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    /// Boundary node indices, ascending; traces are stored in this order.
    pub nodes: Vec<usize>,
    pub clean: Vec<Vec<f64>>,
    pub noisy: Vec<Vec<f64>>,
    /// Cost weights, frozen at the first cost evaluation.
    pub mu: Option<Vec<f64>>,
}

impl MeasurementSet {
    pub fn num_fluxes(&self) -> usize {
        self.noisy.len()
    }

    /// Noisy trace of flux `i` as a nodal field (zero in the interior).
    pub fn nodal(&self, mesh: &StructuredMesh, i: usize) -> ScalarField {
        let mut h = ScalarField::zeros(mesh);
        for (&k, &v) in self.nodes.iter().zip(&self.noisy[i]) {
            h[k] = v;
        }
        h
    }

    pub fn validate(&self, mesh: &StructuredMesh, fluxes: usize) -> Result<()> {
        check_len(mesh.boundary_nodes(&Side::ALL).len(), self.nodes.len())?;
        check_len(fluxes, self.clean.len())?;
        check_len(fluxes, self.noisy.len())?;
        for (c, n) in self.clean.iter().zip(&self.noisy) {
            check_len(self.nodes.len(), c.len())?;
            check_len(self.nodes.len(), n.len())?;
        }
        if let Some(mu) = &self.mu {
            check_len(fluxes, mu.len())?;
            if mu.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
                return Err(Error::InvalidParameter(format!("weights must be positive, got {mu:?}")));
            }
        }
        Ok(())
    }
}

#[cfg(feature = "parallel")]
fn per_flux<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn per_flux<T>(count: usize, f: impl Fn(usize) -> Result<T>) -> Result<Vec<T>> {
    (0..count).map(f).collect()
}

/// Solves the pure flux problem on the true conductivity for every flux and
/// perturbs the boundary traces with `N(0, (delta ||h_i||_inf)^2)` per node.
pub fn synthesize_measurements(problem: &EitProblem, mesh: &StructuredMesh, truth: &ShapeSpec) -> Result<MeasurementSet> {
    problem.validate()?;
    let phi = init_signed_distance(mesh, truth)?;
    let sigma = problem.sigma(mesh, &phi);
    synthesize_from_sigma(problem, mesh, &sigma)
}

pub fn synthesize_from_sigma(problem: &EitProblem, mesh: &StructuredMesh, sigma: &ElementCoefficient) -> Result<MeasurementSet> {
    let system = FemSystem::new(mesh, sigma, problem.cg_settings())?;
    let nodes = mesh.boundary_nodes(&Side::ALL);
    let clean: Vec<Vec<f64>> = per_flux(problem.fluxes.len(), |i| {
        let u = system.solve_pure_flux(&problem.fluxes[i])?;
        Ok(nodes.iter().map(|&k| u[k]).collect())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    let noisy = clean
        .iter()
        .map(|h| {
            let scale = problem.delta * h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                return Ok(h.clone());
            }
            let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(h.iter().map(|v| v + normal.sample(&mut rng)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementSet { nodes, clean, noisy, mu: None })
}

fn trace_l2(mesh: &StructuredMesh, nodes: &[usize], values: &[f64]) -> f64 {
    let mut w = vec![0.0; mesh.num_nodes()];
    for (&k, &v) in nodes.iter().zip(values) {
        w[k] = v;
    }
    boundary_l2_squared(mesh, &w, &Side::ALL).sqrt()
}

/// `sum_i ||h_i - h~_i|| / sum_i ||h_i||` in `L2` of the boundary.
pub fn noise_level(mesh: &StructuredMesh, clean: &MeasurementSet, noisy: &MeasurementSet) -> Result<f64> {
    check_len(clean.nodes.len(), noisy.nodes.len())?;
    if clean.nodes != noisy.nodes {
        return Err(Error::DegenerateData("measurement sets use different nodes".into()));
    }
    check_len(clean.clean.len(), noisy.noisy.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (h, ht) in clean.clean.iter().zip(&noisy.noisy) {
        let diff: Vec<f64> = h.iter().zip(ht).map(|(a, b)| a - b).collect();
        num += trace_l2(mesh, &clean.nodes, &diff);
        den += trace_l2(mesh, &clean.nodes, h);
    }
    if den == 0.0 {
        return Err(Error::DegenerateData("clean traces vanish".into()));
    }
    Ok(num / den)
}

/// Realized noise of a set against its own clean copy.
pub fn realized_noise_level(mesh: &StructuredMesh, m: &MeasurementSet) -> Result<f64> {
    noise_level(mesh, m, m)
}

/// States of one flux.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxState {
    pub u_d: ScalarField,
    pub u_n: ScalarField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Weighted cost.
    pub cost: f64,
    /// Unweighted per-flux terms.
    pub terms: Vec<f64>,
    pub states: Vec<FluxState>,
}

fn flux_term(problem: &EitProblem, mesh: &StructuredMesh, s: &FluxState, h: &[f64]) -> f64 {
    let w: Vec<f64> = s.u_d.iter().zip(s.u_n.iter()).map(|(a, b)| a - b).collect();
    let mut term = 0.5 * problem.alpha1 * volume_l2_squared(mesh, &w);
    if problem.alpha2 > 0.0 {
        let m: Vec<f64> = s.u_n.iter().zip(h).map(|(a, b)| a - b).collect();
        term += 0.5 * problem.alpha2 * boundary_l2_squared(mesh, &m, &problem.neumann_sides.sides());
    }
    term
}

/// Per-flux states and unweighted cost terms for a given conductivity.
pub fn evaluate_terms(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &MeasurementSet,
    sigma: &ElementCoefficient,
    guesses: Option<&[FluxState]>,
) -> Result<(Vec<f64>, Vec<FluxState>)> {
    let system = FemSystem::new(mesh, sigma, problem.cg_settings())?;
    let results = per_flux(problem.fluxes.len(), |i| {
        let h = meas.nodal(mesh, i);
        let g = &problem.fluxes[i];
        let guess = guesses.map(|gs| &gs[i]);
        let u_n = system.solve_state(None, g, problem.neumann_sides, &h, guess.map(|s| &s.u_n[..]))?;
        let u_d = system.solve_state(None, g, problem.dirichlet_n(), &h, guess.map(|s| &s.u_d[..]))?;
        let s = FluxState { u_d, u_n };
        Ok((flux_term(problem, mesh, &s, &h), s))
    })?;
    Ok(results.into_iter().unzip())
}

/// Cost for the level set `phi`; sets the weights on first use.
pub fn cost(problem: &EitProblem, mesh: &StructuredMesh, meas: &mut MeasurementSet, phi: &LevelSet) -> Result<Evaluation> {
    let sigma = problem.sigma(mesh, phi);
    cost_for_sigma(problem, mesh, meas, &sigma, None)
}

pub fn cost_for_sigma(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &mut MeasurementSet,
    sigma: &ElementCoefficient,
    guesses: Option<&[FluxState]>,
) -> Result<Evaluation> {
    meas.validate(mesh, problem.fluxes.len())?;
    let (terms, states) = evaluate_terms(problem, mesh, meas, sigma, guesses)?;
    if meas.mu.is_none() {
        if let Some((flux, &value)) = terms.iter().enumerate().find(|(_, &t)| !(t >= 1e-14)) {
            return Err(Error::DegenerateInitialization { flux, value });
        }
        meas.mu = Some(terms.iter().map(|t| 1.0 / t).collect());
    }
    let mu = meas.mu.as_ref().expect("weights set above");
    let cost = terms.iter().zip(mu).map(|(t, m)| t * m).sum();
    Ok(Evaluation { cost, terms, states })
}

/// Adjoint states of one flux.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxAdjoint {
    pub p_d: ScalarField,
    pub p_n: ScalarField,
}

/// Adjoints of every flux and the weighted tensors of the shape derivative.
pub fn gradient_tensors(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &MeasurementSet,
    sigma: &ElementCoefficient,
    states: &[FluxState],
) -> Result<TensorRep> {
    Ok(gradient_with_adjoints(problem, mesh, meas, sigma, states, None)?.0)
}

/// As [`gradient_tensors`], seeding the adjoint solves with `guesses` and
/// returning the adjoints.
pub fn gradient_with_adjoints(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &MeasurementSet,
    sigma: &ElementCoefficient,
    states: &[FluxState],
    guesses: Option<&[FluxAdjoint]>,
) -> Result<(TensorRep, Vec<FluxAdjoint>)> {
    let mu = meas.mu.as_ref().ok_or_else(|| Error::InvalidParameter("cost weights are not set".into()))?;
    check_len(problem.fluxes.len(), states.len())?;
    let system = FemSystem::new(mesh, sigma, problem.cg_settings())?;
    let per = per_flux(problem.fluxes.len(), |i| {
        let s = &states[i];
        let guess = guesses.map(|g| &g[i]);
        let h = meas.nodal(mesh, i);
        let w: Vec<f64> = s.u_d.iter().zip(s.u_n.iter()).map(|(a, b)| a - b).collect();
        let p_d = system.solve_adjoint(-problem.alpha1, &w, None, problem.neumann_sides, guess.map(|g| &g.p_d[..]))?;
        let mismatch: Vec<f64> = s.u_n.iter().zip(h.iter()).map(|(a, b)| a - b).collect();
        let flux_sides = problem.neumann_sides.sides();
        let boundary = (problem.alpha2 > 0.0).then_some((-problem.alpha2, &mismatch[..], &flux_sides[..]));
        let p_n = system.solve_adjoint(problem.alpha1, &w, boundary, problem.dirichlet_n(), guess.map(|g| &g.p_n[..]))?;
        let t = assemble_tensors(mesh, sigma, None, &s.u_d, &s.u_n, &p_d, &p_n, problem.alpha1)?;
        Ok((t, FluxAdjoint { p_d, p_n }))
    })?;
    let mut total = TensorRep::zeros(mesh);
    let mut adjoints = Vec::with_capacity(per.len());
    for ((t, a), m) in per.into_iter().zip(mu) {
        total.add_scaled(*m, &t);
        adjoints.push(a);
    }
    Ok((total, adjoints))
}

/// Cost on the mesh moved to `x + t theta(x)` with the element
/// conductivities kept. Weights must already be set.
pub fn perturbed_cost_mesh(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &MeasurementSet,
    sigma: &ElementCoefficient,
    theta: &VectorField2,
    t: f64,
) -> Result<f64> {
    let moved = mesh.displaced(theta, t)?;
    let mut m = meas.clone();
    if m.mu.is_none() {
        return Err(Error::InvalidParameter("cost weights are not set".into()));
    }
    Ok(cost_for_sigma(problem, &moved, &mut m, sigma, None)?.cost)
}

/// Cost after transporting `phi` along `theta` for time `t`.
pub fn perturbed_cost_levelset(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &MeasurementSet,
    phi: &LevelSet,
    theta: &VectorField2,
    t: f64,
) -> Result<f64> {
    let moved = advect_with_cfl(mesh, phi, theta, t, problem.cfl);
    let mut m = meas.clone();
    if m.mu.is_none() {
        return Err(Error::InvalidParameter("cost weights are not set".into()));
    }
    Ok(cost(problem, mesh, &mut m, &moved)?.cost)
}

/// How the perturbed domain is realized in a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Nodes move along `theta`, conductivity stays attached to elements.
    #[default]
    MeshDeformation,
    /// The level set is transported and the conductivity resampled.
    LevelSetTransport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdRow {
    pub t: f64,
    pub fd: f64,
    pub dj: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub j: f64,
    pub dj: f64,
    pub rows: Vec<FdRow>,
}

impl DerivativeCheck {
    /// `error(t_k) / error(t_{k+1})`.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].error / w[1].error).collect()
    }
}

/// One-sided difference quotients of the cost against the volume
/// derivative. Sets the weights if needed.
pub fn derivative_check(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &mut MeasurementSet,
    phi: &LevelSet,
    theta: &VectorField2,
    steps: &[f64],
    kind: PerturbationKind,
) -> Result<DerivativeCheck> {
    theta.check(mesh)?;
    let sigma = problem.sigma(mesh, phi);
    let base = cost_for_sigma(problem, mesh, meas, &sigma, None)?;
    let tensors = gradient_tensors(problem, mesh, meas, &sigma, &base.states)?;
    let dj = eval_dj(mesh, &tensors, theta);
    let rows = steps
        .iter()
        .map(|&t| {
            let jt = match kind {
                PerturbationKind::MeshDeformation => perturbed_cost_mesh(problem, mesh, meas, &sigma, theta, t)?,
                PerturbationKind::LevelSetTransport => perturbed_cost_levelset(problem, mesh, meas, phi, theta, t)?,
            };
            let fd = (jt - base.cost) / t;
            Ok(FdRow { t, fd, dj, error: (fd - dj).abs() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivativeCheck { j: base.cost, dj, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Cost after the accepted step.
    pub cost: f64,
    pub step: f64,
    /// Derivative along the direction that produced the step.
    pub dj_theta: f64,
    pub grad_dev: f64,
    pub stop_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptTrace {
    pub j0: f64,
    pub rows: Vec<TraceRow>,
    /// Data generated on the reconstruction mesh without noise.
    pub inverse_crime: bool,
}

impl OptTrace {
    pub fn final_cost(&self) -> f64 {
        self.rows.last().map_or(self.j0, |r| r.cost)
    }

    pub fn iterations(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Stopping rule met or the derivative vanished.
    Converged,
    /// Line search found no decrease.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub phi: LevelSet,
    pub trace: OptTrace,
    pub status: StopReason,
}

/// Snapshot handed to the observer after every accepted step.
pub struct IterationView<'a> {
    pub row: &'a TraceRow,
    pub phi: &'a LevelSet,
    pub sigma: &'a ElementCoefficient,
    pub theta: &'a VectorField2,
    pub states: &'a [FluxState],
}

pub fn reconstruct(problem: &EitProblem, mesh: &StructuredMesh, meas: &mut MeasurementSet, initial: &LevelSet) -> Result<Reconstruction> {
    reconstruct_with_observer(problem, mesh, meas, initial, |_| {})
}

/// Gradient descent with Armijo backtracking on the transport time.
pub fn reconstruct_with_observer(
    problem: &EitProblem,
    mesh: &StructuredMesh,
    meas: &mut MeasurementSet,
    initial: &LevelSet,
    mut observer: impl FnMut(&IterationView<'_>),
) -> Result<Reconstruction> {
    problem.validate()?;
    check_len(mesh.num_nodes(), initial.len())?;
    let armijo = problem.armijo;
    let h = mesh.h();

    let mut phi = initial.clone();
    let mut sigma = problem.sigma(mesh, &phi);
    let mut current = cost_for_sigma(problem, mesh, meas, &sigma, None)?;
    let mut trace = OptTrace { j0: current.cost, rows: Vec::new(), inverse_crime: problem.delta == 0.0 };
    info!("initial cost {:.6e}", current.cost);

    let mut theta_prev: Option<VectorField2> = None;
    let mut adjoints: Option<Vec<FluxAdjoint>> = None;
    let mut next_disp = armijo.initial_displacement_cells;
    let mut first_decrease: Option<f64> = None;
    let mut hits = 0;
    let mut status = StopReason::MaxIterations;

    for iter in 1..=problem.max_iter {
        let (tensors, adj) = gradient_with_adjoints(problem, mesh, meas, &sigma, &current.states, adjoints.as_deref())?;
        adjoints = Some(adj);
        let theta = solve_descent_with_guess(mesh, &tensors, &problem.descent_config(), theta_prev.as_ref())?;
        let dj = eval_dj(mesh, &tensors, &theta);
        if !(-dj > problem.grad_tol * current.cost.max(1.0)) {
            debug!("iteration {iter}: derivative {dj:.3e} below tolerance");
            status = StopReason::Converged;
            break;
        }
        let speed = theta.max_norm();
        let mut t = next_disp * h / speed;
        let mut accepted = None;
        for _ in 0..=armijo.max_backtracks {
            let trial_phi = advect_with_cfl(mesh, &phi, &theta, t, problem.cfl);
            let trial_sigma = problem.sigma(mesh, &trial_phi);
            let trial = cost_for_sigma(problem, mesh, meas, &trial_sigma, Some(&current.states))?;
            if trial.cost <= current.cost + armijo.c * t * dj {
                accepted = Some((trial_phi, trial_sigma, trial));
                break;
            }
            t *= 0.5;
        }
        let Some((new_phi, new_sigma, new_eval)) = accepted else {
            info!("iteration {iter}: line search failed");
            status = StopReason::Stalled;
            break;
        };

        let decrease = current.cost - new_eval.cost;
        let reference = *first_decrease.get_or_insert(decrease);
        if decrease < problem.gamma * reference {
            hits += 1;
        } else {
            hits = 0;
        }
        let grad_dev = gradient_norm_deviation(mesh, &new_phi);
        if grad_dev > GRADIENT_DEVIATION_WARNING {
            warn!("iteration {iter}: level set far from a distance function (deviation {grad_dev:.3})");
        }
        let row = TraceRow { iter, cost: new_eval.cost, step: t, dj_theta: dj, grad_dev, stop_hits: hits };
        debug!("iteration {iter}: J = {:.6e}, t = {t:.3e}, dJ = {dj:.3e}", row.cost);
        trace.rows.push(row);

        next_disp = (armijo.growth * t * speed / h).min(armijo.max_displacement_cells);
        phi = new_phi;
        sigma = new_sigma;
        current = new_eval;
        observer(&IterationView { row: &row, phi: &phi, sigma: &sigma, theta: &theta, states: &current.states });
        theta_prev = Some(theta);

        if hits >= problem.stop_patience {
            status = StopReason::Converged;
            break;
        }
    }
    info!("stopped after {} iterations ({status:?}), J = {:.6e}", trace.iterations(), trace.final_cost());
    Ok(Reconstruction { phi, trace, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levelset::Primitive;

    fn ball(c: [f64; 2], r: f64) -> ShapeSpec {
        ShapeSpec(vec![Primitive::Ball { center: c, radius: r }])
    }

    fn small_problem(n: usize) -> EitProblem {
        EitProblem { n, ..Default::default() }
    }

    #[test]
    fn default_problem_is_valid() {
        EitProblem::default().validate().unwrap();
        let mut p = EitProblem::default();
        p.sigma_plus = 1.0;
        assert!(p.validate().is_err());
        let p = EitProblem { fluxes: vec![], ..Default::default() };
        assert!(p.validate().is_err());
        let p = EitProblem { alpha1: 0.0, alpha2: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = EitProblem { delta: -0.1, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn standard_fluxes_balance() {
        for g in standard_fluxes() {
            assert_eq!(g.left + g.right + g.top + g.bottom, 0.0);
        }
    }

    #[test]
    fn noiseless_data_and_determinism() {
        let p = small_problem(12);
        let mesh = p.mesh().unwrap();
        let truth = ball([0.6, 0.6], 0.15);
        let m = synthesize_measurements(&p, &mesh, &truth).unwrap();
        assert_eq!(m.clean, m.noisy);
        assert_eq!(realized_noise_level(&mesh, &m).unwrap(), 0.0);

        let noisy = EitProblem { delta: 0.02, seed: 7, ..p.clone() };
        let a = synthesize_measurements(&noisy, &mesh, &truth).unwrap();
        let b = synthesize_measurements(&noisy, &mesh, &truth).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.noisy, a.clean);
        let other = synthesize_measurements(&EitProblem { seed: 8, ..noisy }, &mesh, &truth).unwrap();
        assert_ne!(a.noisy, other.noisy);
    }

    #[test]
    fn noise_level_of_doubled_traces_is_one() {
        let p = small_problem(10);
        let mesh = p.mesh().unwrap();
        let mut m = synthesize_measurements(&p, &mesh, &ball([0.5, 0.5], 0.2)).unwrap();
        m.noisy = m.clean.iter().map(|h| h.iter().map(|v| 2.0 * v).collect()).collect();
        assert!((realized_noise_level(&mesh, &m).unwrap() - 1.0).abs() < 1e-14);
        let mut zero = m.clone();
        zero.clean.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v = 0.0));
        assert!(matches!(noise_level(&mesh, &zero, &zero), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn realized_noise_matches_expectation() {
        // E||noise_i||^2 = (delta ||h_i||_inf)^2 * perimeter under the trapezoid weights
        let p = EitProblem { n: 32, delta: 0.01, ..Default::default() };
        let mesh = p.mesh().unwrap();
        let truth = ball([0.6, 0.6], 0.15);
        let clean = synthesize_measurements(&EitProblem { delta: 0.0, ..p.clone() }, &mesh, &truth).unwrap();
        let num: f64 = clean.clean.iter().map(|h| h.iter().fold(0.0_f64, |m, v| m.max(v.abs())) * 2.0).sum();
        let den: f64 = clean.clean.iter().map(|h| trace_l2(&mesh, &clean.nodes, h)).sum();
        let expected = p.delta * num / den;
        let levels: Vec<f64> = (0..100)
            .map(|seed| realized_noise_level(&mesh, &synthesize_measurements(&EitProblem { seed, ..p.clone() }, &mesh, &truth).unwrap()).unwrap())
            .collect();
        assert!(levels.iter().all(|&l| l > 0.2 * expected && l < 5.0 * expected));
        let mean = levels.iter().sum::<f64>() / levels.len() as f64;
        assert!((mean / expected - 1.0).abs() < 0.05, "mean {mean}, expected {expected}");
    }

    #[test]
    fn noise_level_grows_with_delta() {
        let mesh = small_problem(16).mesh().unwrap();
        let truth = ball([0.6, 0.6], 0.15);
        let mut last = 0.0;
        for delta in [0.005, 0.01, 0.03, 0.1] {
            let p = EitProblem { n: 16, delta, seed: 3, ..Default::default() };
            let level = realized_noise_level(&mesh, &synthesize_measurements(&p, &mesh, &truth).unwrap()).unwrap();
            assert!(level > last);
            last = level;
        }
    }

    #[test]
    fn first_evaluation_normalizes_terms() {
        let p = small_problem(16);
        let mesh = p.mesh().unwrap();
        let mut m = synthesize_measurements(&p, &mesh, &ball([0.6, 0.6], 0.15)).unwrap();
        let phi = init_signed_distance(&mesh, &ball([0.4, 0.4], 0.2)).unwrap();
        let e = cost(&p, &mesh, &mut m, &phi).unwrap();
        assert!((e.cost - 3.0).abs() < 1e-12);
        // weights frozen: a second evaluation gives the same value
        assert_eq!(cost(&p, &mesh, &mut m, &phi).unwrap().cost, e.cost);
        let mut doubled = m.clone();
        doubled.mu = Some(m.mu.as_ref().unwrap().iter().map(|v| 2.0 * v).collect());
        assert!((cost(&p, &mesh, &mut doubled, &phi).unwrap().cost - 6.0).abs() < 1e-12);
    }

    #[test]
    fn true_shape_gives_degenerate_start_and_zero_cost() {
        let p = small_problem(16);
        let mesh = p.mesh().unwrap();
        let truth = ball([0.6, 0.6], 0.15);
        let mut m = synthesize_measurements(&p, &mesh, &truth).unwrap();
        let phi_true = init_signed_distance(&mesh, &truth).unwrap();
        assert!(matches!(cost(&p, &mesh, &mut m.clone(), &phi_true), Err(Error::DegenerateInitialization { .. })));
        let phi = init_signed_distance(&mesh, &ball([0.4, 0.4], 0.2)).unwrap();
        cost(&p, &mesh, &mut m, &phi).unwrap();
        assert!(cost(&p, &mesh, &mut m, &phi_true).unwrap().cost < 1e-12);
    }

    #[test]
    fn mesh_deformation_difference_quotients_converge_linearly() {
        let p = EitProblem { n: 16, cg_tol: 1e-13, ..Default::default() };
        let mesh = p.mesh().unwrap();
        let mut m = synthesize_measurements(&p, &mesh, &ball([0.6, 0.6], 0.15)).unwrap();
        let phi = init_signed_distance(&mesh, &ball([0.4, 0.45], 0.2)).unwrap();
        let theta = VectorField2::from_fn(&mesh, |x, y| {
            let b = x * (1.0 - x) * y * (1.0 - y);
            [b * (1.0 + x), b * (2.0 - 3.0 * y)]
        });
        let check = derivative_check(&p, &mesh, &mut m, &phi, &theta, &[1e-2, 5e-3, 2.5e-3], PerturbationKind::MeshDeformation).unwrap();
        for r in check.ratios() {
            assert!((1.6..=2.4).contains(&r), "ratios {:?}", check.ratios());
        }
        assert!(check.rows[2].error < 0.05 * check.dj.abs());
    }

    #[test]
    fn adjoint_gradient_with_boundary_term() {
        let p = EitProblem { n: 12, alpha2: 0.7, delta: 0.05, seed: 1, cg_tol: 1e-13, ..Default::default() };
        let mesh = p.mesh().unwrap();
        let mut m = synthesize_measurements(&p, &mesh, &ball([0.55, 0.6], 0.2)).unwrap();
        let phi = init_signed_distance(&mesh, &ball([0.45, 0.4], 0.2)).unwrap();
        let theta = VectorField2::from_fn(&mesh, |x, y| {
            let b = x * (1.0 - x) * y * (1.0 - y);
            [b * (2.0 - y), -b * x]
        });
        let check = derivative_check(&p, &mesh, &mut m, &phi, &theta, &[1e-2, 5e-3, 2.5e-3], PerturbationKind::MeshDeformation).unwrap();
        for r in check.ratios() {
            assert!((1.6..=2.4).contains(&r), "ratios {:?}", check.ratios());
        }
    }

    #[test]
    fn short_reconstruction_descends() {
        let p = EitProblem { n: 24, max_iter: 8, ..Default::default() };
        let mesh = p.mesh().unwrap();
        let mut m = synthesize_measurements(&p, &mesh, &ball([0.6, 0.6], 0.15)).unwrap();
        let phi = init_signed_distance(&mesh, &ball([0.4, 0.4], 0.2)).unwrap();
        let r = reconstruct(&p, &mesh, &mut m, &phi).unwrap();
        assert!((r.trace.j0 - 3.0).abs() < 1e-12);
        assert!(r.trace.inverse_crime);
        let mut prev = r.trace.j0;
        for row in &r.trace.rows {
            assert!(row.dj_theta <= 0.0 && row.step > 0.0);
            assert!(row.cost <= prev + p.armijo.c * row.step * row.dj_theta);
            prev = row.cost;
        }
        assert!(r.trace.final_cost() < r.trace.j0);
    }

    #[test]
    fn start_at_truth_stops_immediately() {
        let p = EitProblem { n: 16, ..Default::default() };
        let mesh = p.mesh().unwrap();
        let truth = ball([0.6, 0.6], 0.15);
        let mut m = synthesize_measurements(&p, &mesh, &truth).unwrap();
        // weights from another shape
        cost(&p, &mesh, &mut m, &init_signed_distance(&mesh, &ball([0.4, 0.4], 0.2)).unwrap()).unwrap();
        let phi = init_signed_distance(&mesh, &truth).unwrap();
        let r = reconstruct(&p, &mesh, &mut m, &phi).unwrap();
        assert_eq!(r.status, StopReason::Converged);
        assert!(r.trace.iterations() <= p.stop_patience + 1);
        assert!(r.trace.final_cost() <= 1e-10 * 3.0);
    }
}
