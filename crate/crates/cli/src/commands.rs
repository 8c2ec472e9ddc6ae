use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use eit_shape::eit::{
    cost, derivative_check, gradient_tensors, realized_noise_level, reconstruct_with_observer, synthesize_measurements, EitProblem, MeasurementSet, StopReason,
};
use eit_shape::fem::{assemble_stiffness, FemSystem};
use eit_shape::levelset::{init_signed_distance, negative_region_moments, symmetric_difference_area};
use eit_shape::verify::{equilibrium_residual_check, run_boundary_checks, Resolution, SinCos, TargetChoice, XSquaredY};
use eit_shape::shapederiv::{eval_dj, interface_split};
use eit_shape::{Side, StructuredMesh, VectorField2};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{square_means, trace_csv, write_fields, Field, TraceWriter};

/// Outcome of a subcommand, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    CheckFailed,
    Stalled,
    MaxIterations,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::CheckFailed => 1,
            Outcome::Stalled => 2,
            Outcome::MaxIterations => 3,
        }
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn nodal_states(problem: &EitProblem, mesh: &StructuredMesh, sigma: &eit_shape::ElementCoefficient) -> Result<Vec<Vec<f64>>> {
    let system = FemSystem::new(mesh, sigma, problem.cg_settings())?;
    problem.fluxes.iter().map(|g| Ok(system.solve_pure_flux(g)?.into_inner())).collect()
}

/// Measurements from the configured file, or synthesized from the truth.
fn measurements(cfg: &RunConfig, mesh: &StructuredMesh) -> Result<MeasurementSet> {
    match &cfg.measurements {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let mut m: MeasurementSet = serde_json::from_str(&text).with_context(|| format!("invalid measurements in {}", path.display()))?;
            m.mu = None;
            m.validate(mesh, cfg.problem.fluxes.len())
                .map_err(|e| crate::config::ConfigError(format!("measurements do not fit the problem: {e}")))?;
            Ok(m)
        }
        None => Ok(synthesize_measurements(&cfg.problem, mesh, &cfg.truth)?),
    }
}

/// One row per boundary node with the clean and noisy potential of every flux.
fn traces_csv(mesh: &StructuredMesh, m: &MeasurementSet) -> String {
    let mut s = String::from("node,x,y");
    for i in 1..=m.num_fluxes() {
        s.push_str(&format!(",clean_{i},noisy_{i}"));
    }
    s.push('\n');
    for (r, &k) in m.nodes.iter().enumerate() {
        let [x, y] = mesh.nodes()[k];
        s.push_str(&format!("{k},{x:e},{y:e}"));
        for (c, n) in m.clean.iter().zip(&m.noisy) {
            s.push_str(&format!(",{:e},{:e}", c[r], n[r]));
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct SynthManifest {
    command: &'static str,
    n: usize,
    h: f64,
    seed: u64,
    delta: f64,
    noise_level: f64,
    fluxes: usize,
    boundary_nodes: usize,
    truth_area: f64,
}

pub fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let out = &cfg.output.dir;
    prepare_dir(out)?;
    let p = &cfg.problem;
    let mesh = p.mesh()?;
    let meas = synthesize_measurements(p, &mesh, &cfg.truth)?;
    let noise = realized_noise_level(&mesh, &meas)?;
    write_json(&out.join("measurements.json"), &meas)?;
    fs::write(out.join("traces.csv"), traces_csv(&mesh, &meas))?;

    let phi = init_signed_distance(&mesh, &cfg.truth)?;
    if cfg.output.fields {
        let sigma = p.sigma(&mesh, &phi);
        let states = nodal_states(p, &mesh, &sigma)?;
        let names: Vec<String> = (1..=states.len()).map(|i| format!("u{i}")).collect();
        let mut points = vec![Field { name: "phi", values: phi.values() }];
        points.extend(names.iter().zip(&states).map(|(n, u)| Field { name: n, values: u }));
        let cells = square_means(&mesh, &sigma.0);
        write_fields(out, "truth", &mesh, "truth level set, conductivity and potentials", &points, &[Field { name: "sigma", values: &cells }])?;
    }

    let manifest = SynthManifest {
        command: "synth",
        n: p.n,
        h: mesh.h(),
        seed: p.seed,
        delta: p.delta,
        noise_level: noise,
        fluxes: p.fluxes.len(),
        boundary_nodes: meas.nodes.len(),
        truth_area: negative_region_moments(&mesh, phi.values()).0,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    info!("noise level {noise:.4e}; data written to {}", out.display());
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct ReconstructManifest {
    command: &'static str,
    n: usize,
    h: f64,
    seed: u64,
    delta: f64,
    noise_level: f64,
    inverse_crime: bool,
    status: StopReason,
    iterations: usize,
    j0: f64,
    final_j: f64,
    symmetric_difference: f64,
    area: f64,
    centroid: [f64; 2],
}

pub fn reconstruct(cfg: &RunConfig) -> Result<Outcome> {
    let out = &cfg.output.dir;
    prepare_dir(out)?;
    let p = &cfg.problem;
    let mesh = p.mesh()?;
    let mut meas = measurements(cfg, &mesh)?;
    let noise = realized_noise_level(&mesh, &meas)?;
    let phi0 = init_signed_distance(&mesh, &cfg.init)?;
    let fields = cfg.output.fields;
    if fields {
        write_fields(out, "init", &mesh, "initial level set", &[Field { name: "phi", values: phi0.values() }], &[])?;
    }

    let mut trace_file = TraceWriter::create(&out.join("trace.csv"))?;
    let mut io_error: Option<std::io::Error> = None;
    let every = if fields { cfg.output.dump_every } else { 0 };
    let started = Instant::now();
    let result = reconstruct_with_observer(p, &mesh, &mut meas, &phi0, |view| {
        if io_error.is_some() {
            return;
        }
        let mut step = || -> std::io::Result<()> {
            trace_file.push(view.row)?;
            if every > 0 && view.row.iter % every == 0 {
                let cells = square_means(&mesh, &view.sigma.0);
                let stem = format!("iter_{:05}", view.row.iter);
                let mut points = vec![Field { name: "phi", values: view.phi.values() }];
                let (tx, ty) = (view.theta.component(0), view.theta.component(1));
                points.push(Field { name: "theta_x", values: &tx });
                points.push(Field { name: "theta_y", values: &ty });
                points.push(Field { name: "u_n1", values: &view.states[0].u_n.0 });
                write_fields(out, &stem, &mesh, &stem, &points, &[Field { name: "sigma", values: &cells }])?;
            }
            Ok(())
        };
        io_error = step().err();
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing iteration output");
    }
    info!("reconstruction took {:.1} s", started.elapsed().as_secs_f64());
    fs::write(out.join("trace.csv"), trace_csv(&result.trace))?;

    let sigma = p.sigma(&mesh, &result.phi);
    let truth_phi = init_signed_distance(&mesh, &cfg.truth)?;
    if fields {
        let cells = square_means(&mesh, &sigma.0);
        write_fields(
            out,
            "final",
            &mesh,
            "reconstructed level set and conductivity",
            &[Field { name: "phi", values: result.phi.values() }, Field { name: "phi_truth", values: truth_phi.values() }],
            &[Field { name: "sigma", values: &cells }],
        )?;
    }
    let (area, centroid) = negative_region_moments(&mesh, result.phi.values());
    let manifest = ReconstructManifest {
        command: "reconstruct",
        n: p.n,
        h: mesh.h(),
        seed: p.seed,
        delta: p.delta,
        noise_level: noise,
        inverse_crime: noise == 0.0,
        status: result.status,
        iterations: result.trace.iterations(),
        j0: result.trace.j0,
        final_j: result.trace.final_cost(),
        symmetric_difference: symmetric_difference_area(&mesh, result.phi.values(), truth_phi.values())?,
        area,
        centroid,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    info!(
        "{:?} after {} iterations: J = {:.4e} (J0 = {:.4e}), symmetric difference {:.4e}",
        manifest.status, manifest.iterations, manifest.final_j, manifest.j0, manifest.symmetric_difference
    );
    Ok(match result.status {
        StopReason::Converged => Outcome::Ok,
        StopReason::Stalled => Outcome::Stalled,
        StopReason::MaxIterations => Outcome::MaxIterations,
    })
}

/// Fine quadrature with `panels` boundary panels and the coarse one at half of it.
fn quadrature_pair(panels: Option<usize>) -> (Resolution, Resolution) {
    match panels {
        None => (Resolution::coarse(), Resolution::default_fine()),
        Some(m) => {
            let m = m.max(2);
            let fine = Resolution { panels: m, radial: (m / 4).max(2), angular: 2 * m };
            let coarse = Resolution { panels: m / 2, radial: (m / 8).max(1), angular: m };
            (coarse, fine)
        }
    }
}

pub fn verify(cfg: &RunConfig, negative_control: bool, panels: Option<usize>) -> Result<Outcome> {
    let out = &cfg.output.dir;
    prepare_dir(out)?;
    let mut csv = String::from("check,coarse,fine,order,passed\n");
    let mut all = true;
    let (coarse, fine) = quadrature_pair(panels);
    for c in run_boundary_checks(coarse, fine) {
        let order = c.order.map_or("roundoff".to_string(), |o| format!("{o:.3}"));
        println!("{:<44} fine gap {:.3e}  order {:>8}  {}", c.name, c.fine_gap, order, if c.passed { "pass" } else { "FAIL" });
        csv.push_str(&format!("{},{:e},{:e},{},{}\n", c.name, c.coarse_gap, c.fine_gap, order, c.passed));
        all &= c.passed;
    }
    let steps = [1e-2, 5e-3, 2.5e-3];
    let mut equilibrium = |target: TargetChoice, label: &str| {
        let rep = equilibrium_residual_check(&XSquaredY, &SinCos, target, &steps);
        let ok = rep.passed();
        let orders: Vec<String> = rep.orders.iter().map(|o| format!("{o:.3}")).collect();
        let last = rep.residuals[steps.len() - 1];
        println!("{label:<44} residuals {:.3e} .. {last:.3e}  orders {}  {}", rep.residuals[0], orders.join(" "), if ok { "pass" } else { "FAIL" });
        csv.push_str(&format!("{label},{:e},{last:e},{},{ok}\n", rep.residuals[0], orders.join(" ")));
        ok
    };
    all &= equilibrium(TargetChoice::Consistent, "equilibrium residual");
    if negative_control {
        all &= equilibrium(TargetChoice::Shifted, "equilibrium residual (negative control)");
    }
    fs::write(out.join("verify.csv"), csv)?;
    Ok(if all { Outcome::Ok } else { Outcome::CheckFailed })
}

pub fn deriv_check(cfg: &RunConfig) -> Result<Outcome> {
    let out = &cfg.output.dir;
    prepare_dir(out)?;
    let p = &cfg.problem;
    let d = &cfg.deriv;
    let mesh = p.mesh()?;
    let mut meas = measurements(cfg, &mesh)?;
    let phi = init_signed_distance(&mesh, &cfg.init)?;
    let mut csv = String::from("field,t,fd,dJ,error,ratio\n");
    let mut structure = String::from("field,dJ_away,dJ_near,fraction,negligible\n");
    let eval = cost(p, &mesh, &mut meas, &phi)?;
    let tensors = gradient_tensors(p, &mesh, &meas, &p.sigma(&mesh, &phi), &eval.states)?;
    let mut all = true;
    for k in 0..d.fields {
        let theta = VectorField2::random_smooth(&mesh, p.seed.wrapping_add(k as u64), d.modes);
        let (away, near) = interface_split(&mesh, &theta, |x| cfg.init.signed_distance(x), d.gap, d.width);
        let (dj_away, dj_near) = (eval_dj(&mesh, &tensors, &away), eval_dj(&mesh, &tensors, &near));
        let fraction = dj_away.abs() / dj_near.abs();
        let negligible = fraction <= d.structure_threshold;
        structure.push_str(&format!("{k},{dj_away:e},{dj_near:e},{fraction:e},{negligible}\n"));
        let check = derivative_check(p, &mesh, &mut meas, &phi, &theta, &d.steps, d.kind)?;
        let ratios = check.ratios();
        let ok = ratios.iter().all(|r| (d.ratio_band[0]..=d.ratio_band[1]).contains(r));
        all &= ok;
        for (i, row) in check.rows.iter().enumerate() {
            let ratio = if i == 0 { String::new() } else { format!("{:e}", ratios[i - 1]) };
            csv.push_str(&format!("{k},{:e},{:e},{:e},{:e},{ratio}\n", row.t, row.fd, row.dj, row.error));
        }
        let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
        println!("field {k}: dJ = {:+.6e}  error ratios {}  {}", check.dj, shown.join(" "), if ok { "pass" } else { "FAIL" });
        println!(
            "         away from interface |dJ| / near |dJ| = {fraction:.3e}{}",
            if negligible { "  (negligible)" } else { "" }
        );
    }
    fs::write(out.join("deriv_check.csv"), csv)?;
    fs::write(out.join("structure.csv"), structure)?;
    Ok(if all { Outcome::Ok } else { Outcome::CheckFailed })
}

pub fn mesh_info(cfg: &RunConfig) -> Result<Outcome> {
    let p = &cfg.problem;
    let mesh = p.mesh()?;
    let sides = [("left", Side::Left), ("right", Side::Right), ("top", Side::Top), ("bottom", Side::Bottom)];
    println!("cells per side     {}", mesh.n());
    println!("h                  {:e}", mesh.h());
    println!("nodes              {}", mesh.num_nodes());
    println!("triangles          {}", mesh.num_triangles());
    for (name, s) in sides {
        println!("{:<18} {} edges", format!("{name} side"), mesh.boundary_edges(s).len());
    }
    let k = assemble_stiffness(&mesh, &eit_shape::ElementCoefficient::constant(&mesh, 1.0))?;
    println!("stiffness nonzeros {}", k.nnz());
    for (name, shape) in [("truth", &cfg.truth), ("init", &cfg.init)] {
        let phi = init_signed_distance(&mesh, shape)?;
        let phi = phi.values();
        let (area, c) = negative_region_moments(&mesh, phi);
        let cut = mesh.triangles().iter().filter(|t| {
            let neg = t.iter().filter(|&&v| phi[v] < 0.0).count();
            neg > 0 && neg < 3
        });
        println!("{name:<18} area {area:.6} centroid ({:.4}, {:.4}), {} cut triangles", c[0], c[1], cut.count());
    }
    Ok(Outcome::Ok)
}
