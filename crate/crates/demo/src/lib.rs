//! Browser bindings: a small reconstruction session driven from JavaScript.

use eit_shape::eit::{reconstruct, synthesize_measurements, EitProblem, MeasurementSet, StopReason};
use eit_shape::fem::FemSystem;
use eit_shape::levelset::{advect, init_signed_distance, symmetric_difference_area};
use eit_shape::{LevelSet, Primitive, ShapeSpec, StructuredMesh, VectorField2};
use wasm_bindgen::prelude::*;

fn js_err(e: eit_shape::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Truth circle, data and the current level set on an `n x n` mesh.
#[wasm_bindgen]
pub struct Session {
    problem: EitProblem,
    mesh: StructuredMesh,
    truth: ShapeSpec,
    meas: MeasurementSet,
    phi: LevelSet,
    iterations: usize,
    cost: f64,
    status: Option<StopReason>,
}

#[wasm_bindgen]
impl Session {
    /// Synthesizes data for a circular inclusion and starts from a circle at
    /// `(ix, iy)` with radius `ir`.
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(n: usize, tx: f64, ty: f64, tr: f64, ix: f64, iy: f64, ir: f64, delta: f64) -> Result<Session, JsError> {
        let problem = EitProblem { n, delta, ..Default::default() };
        let mesh = problem.mesh().map_err(js_err)?;
        let truth = ShapeSpec(vec![Primitive::Ball { center: [tx, ty], radius: tr }]);
        let init = ShapeSpec(vec![Primitive::Ball { center: [ix, iy], radius: ir }]);
        let meas = synthesize_measurements(&problem, &mesh, &truth).map_err(js_err)?;
        let phi = init_signed_distance(&mesh, &init).map_err(js_err)?;
        Ok(Session { problem, mesh, truth, meas, phi, iterations: 0, cost: f64::NAN, status: None })
    }

    pub fn n(&self) -> usize {
        self.mesh.n()
    }

    /// Nodal level set, row by row from the bottom.
    pub fn phi(&self) -> Vec<f64> {
        self.phi.values().to_vec()
    }

    pub fn truth_phi(&self) -> Result<Vec<f64>, JsError> {
        Ok(init_signed_distance(&self.mesh, &self.truth).map_err(js_err)?.values().to_vec())
    }

    /// Potential of flux `flux` (0, 1 or 2) with the true conductivity.
    pub fn forward(&self, flux: usize) -> Result<Vec<f64>, JsError> {
        let g = self.problem.fluxes.get(flux).ok_or_else(|| JsError::new("no such flux"))?;
        let truth_phi = init_signed_distance(&self.mesh, &self.truth).map_err(js_err)?;
        let sigma = self.problem.sigma(&self.mesh, &truth_phi);
        let system = FemSystem::new(&self.mesh, &sigma, self.problem.cg_settings()).map_err(js_err)?;
        Ok(system.solve_pure_flux(g).map_err(js_err)?.into_inner())
    }

    /// Transports the current level set by the constant velocity `(vx, vy)`
    /// for time `t`.
    pub fn advect(&mut self, vx: f64, vy: f64, t: f64) {
        let theta = VectorField2::from_fn(&self.mesh, |_, _| [vx, vy]);
        self.phi = advect(&self.mesh, &self.phi, &theta, t);
    }

    /// Runs up to `k` descent iterations from the current level set and
    /// returns the cost reached. Line-search memory restarts on every call.
    pub fn step(&mut self, k: usize) -> Result<f64, JsError> {
        let problem = EitProblem { max_iter: k.max(1), ..self.problem.clone() };
        let r = reconstruct(&problem, &self.mesh, &mut self.meas, &self.phi).map_err(js_err)?;
        self.iterations += r.trace.iterations();
        self.cost = r.trace.final_cost();
        self.status = Some(r.status);
        self.phi = r.phi;
        Ok(self.cost)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Cost after the last `step`, `NaN` before the first.
    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// `true` once a `step` stopped before its iteration budget.
    pub fn finished(&self) -> bool {
        matches!(self.status, Some(StopReason::Converged | StopReason::Stalled))
    }

    /// Area between the current and the true inclusion.
    pub fn error_area(&self) -> Result<f64, JsError> {
        let truth = init_signed_distance(&self.mesh, &self.truth).map_err(js_err)?;
        symmetric_difference_area(&self.mesh, self.phi.values(), truth.values()).map_err(js_err)
    }
}
