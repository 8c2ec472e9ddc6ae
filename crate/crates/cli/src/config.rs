use std::path::{Path, PathBuf};

use eit_shape::eit::{EitProblem, PerturbationKind};
use eit_shape::{Primitive, ShapeSpec};
use serde::{Deserialize, Serialize};

/// Problem in a config file that cannot be run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Field dump cadence in iterations; 0 writes only the final state.
    pub dump_every: usize,
    /// Write VTK and CSV field files at all.
    pub fields: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), dump_every: 0, fields: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerivConfig {
    pub steps: Vec<f64>,
    /// Number of random velocity fields.
    pub fields: usize,
    /// Cosine modes per direction in each field.
    pub modes: usize,
    pub kind: PerturbationKind,
    /// Accepted band for successive error ratios.
    pub ratio_band: [f64; 2],
    /// Distance from the initial interface inside which the "away" fields vanish.
    pub gap: f64,
    /// Ramp width of the "away" cutoff.
    pub width: f64,
    /// Largest `|dJ(away)| / |dJ(near)|` flagged as negligible.
    pub structure_threshold: f64,
}

impl Default for DerivConfig {
    fn default() -> Self {
        Self {
            steps: vec![1e-2, 5e-3, 2.5e-3],
            fields: 5,
            modes: 3,
            kind: PerturbationKind::MeshDeformation,
            ratio_band: [1.6, 2.4],
            gap: 0.125,
            width: 0.1,
            structure_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: EitProblem,
    pub truth: ShapeSpec,
    pub init: ShapeSpec,
    /// Boundary data written by `synth`; synthesized from `truth` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measurements: Option<PathBuf>,
    pub output: OutputConfig,
    pub deriv: DerivConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: EitProblem::default(),
            truth: ShapeSpec(vec![Primitive::Ball { center: [0.6, 0.6], radius: 0.15 }]),
            init: ShapeSpec(vec![Primitive::Ball { center: [0.4, 0.4], radius: 0.2 }]),
            measurements: None,
            output: OutputConfig::default(),
            deriv: DerivConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dump_every: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Some(out) = &overrides.out {
            cfg.output.dir = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.problem.seed = seed;
        }
        if let Some(k) = overrides.dump_every {
            cfg.output.dump_every = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |what: &str, e: eit_shape::Error| ConfigError(format!("{what}: {e}"));
        self.problem.validate().map_err(|e| wrap("problem", e))?;
        self.truth.validate().map_err(|e| wrap("truth", e))?;
        self.init.validate().map_err(|e| wrap("init", e))?;
        let d = &self.deriv;
        if d.steps.len() < 2 || d.steps.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(ConfigError("deriv.steps needs at least two positive steps".into()));
        }
        if d.fields == 0 || d.modes == 0 {
            return Err(ConfigError("deriv.fields and deriv.modes must be positive".into()));
        }
        if !(d.gap > 0.0 && d.width > 0.0 && d.structure_threshold > 0.0) {
            return Err(ConfigError("deriv.gap, deriv.width and deriv.structure_threshold must be positive".into()));
        }
        if !(d.ratio_band[0] <= d.ratio_band[1]) {
            return Err(ConfigError(format!("deriv.ratio_band {:?} is empty", d.ratio_band)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
