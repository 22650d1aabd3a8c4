//! Run configuration: a TOML file whose dotted keys mirror the sections below.
//! Unknown keys are rejected; `key=value` overrides are applied before
//! deserialization so they are validated exactly like file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::InclusionBox;
use crate::error::{Error, Result};
use crate::fem::SolverKind;
use crate::mesh::Face;
use crate::monreg::{ContrastBounds, QpOptions, SignCase};
use crate::montest::TestWeights;
use crate::onestep::OneStepConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub resolution: [usize; 3],
    pub extents: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    /// Pixel grid; must divide `resolution`.
    pub pixels: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub per_face_grid: usize,
    #[serde(default = "default_dirichlet")]
    pub dirichlet_face: Face,
}

fn default_dirichlet() -> Face {
    Face::ZMinus
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub lambda0: f64,
    pub mu0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionConfig {
    pub gamma_lambda: f64,
    pub gamma_mu: f64,
    #[serde(default)]
    pub boxes: Vec<InclusionBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub eta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub fem_tol: f64,
    pub qp_tol: f64,
    pub max_iter: usize,
    #[serde(default = "default_linear")]
    pub linear: SolverKind,
}

fn default_linear() -> SolverKind {
    SolverKind::Direct
}

impl SolverConfig {
    pub fn qp_options(&self) -> QpOptions {
        QpOptions {
            tol: self.qp_tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub emit_vtk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    pub patches: PatchConfig,
    pub material: MaterialConfig,
    pub inclusion: InclusionConfig,
    pub bounds: ContrastBounds,
    pub noise: NoiseConfig,
    pub solver: SolverConfig,
    pub onestep: OneStepConfig,
    pub montest: TestWeights,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Field-level checks; geometric checks happen when the problem is built.
    pub fn validate(&self) -> Result<()> {
        let m = &self.material;
        if !(m.lambda0 > 0.0 && m.mu0 > 0.0) {
            return Err(Error::invalid("material.lambda0 and material.mu0 must be positive"));
        }
        self.bounds.validate()?;
        let inc = &self.inclusion;
        if !inc.boxes.is_empty() && !self.bounds.admits(inc.gamma_lambda, inc.gamma_mu) {
            return Err(Error::invalid(format!(
                "inclusion contrast ({}, {}) violates the configured bounds",
                inc.gamma_lambda, inc.gamma_mu
            )));
        }
        if !(m.lambda0 + inc.gamma_lambda > 0.0 && m.mu0 + inc.gamma_mu > 0.0) {
            return Err(Error::invalid("inclusion Lamé parameters must stay positive"));
        }
        if !(self.noise.eta >= 0.0) || !self.noise.eta.is_finite() {
            return Err(Error::invalid("noise.eta must be ≥ 0"));
        }
        let s = &self.solver;
        if !(s.fem_tol > 0.0 && s.fem_tol <= 1e-6) {
            return Err(Error::invalid("solver.fem_tol must lie in (0, 1e-6]"));
        }
        if !(s.qp_tol > 0.0) || s.max_iter == 0 {
            return Err(Error::invalid("solver.qp_tol must be positive and solver.max_iter ≥ 1"));
        }
        self.onestep.validate()?;
        self.montest.validate()?;
        Ok(())
    }

    /// Reference desk configuration: unit cube, 12³ mesh, 6³ pixels, 2×2
    /// patches on the five Neumann faces, two box inclusions.
    pub fn desk() -> Self {
        let (lambda0, mu0) = (6.6211e5, 6.6892e3);
        let (lambda1, mu1) = (2.3177e6, 2.3411e4);
        let sixth = 1.0 / 6.0;
        RunConfig {
            mesh: MeshConfig {
                resolution: [12, 12, 12],
                extents: [1.0, 1.0, 1.0],
                origin: [0.0, 0.0, 0.0],
                pixels: [6, 6, 6],
            },
            patches: PatchConfig {
                per_face_grid: 2,
                dirichlet_face: Face::ZMinus,
            },
            material: MaterialConfig { lambda0, mu0 },
            inclusion: InclusionConfig {
                gamma_lambda: lambda1 - lambda0,
                gamma_mu: mu1 - mu0,
                boxes: vec![
                    InclusionBox {
                        min: [sixth, sixth, 2.0 * sixth],
                        max: [3.0 * sixth, 3.0 * sixth, 4.0 * sixth],
                    },
                    InclusionBox {
                        min: [4.0 * sixth, 3.0 * sixth, 2.0 * sixth],
                        max: [5.0 * sixth, 5.0 * sixth, 4.0 * sixth],
                    },
                ],
            },
            bounds: ContrastBounds {
                c_lambda: 1.2e6,
                upper_lambda: 1.7e6,
                c_mu: 1.2e4,
                upper_mu: 1.7e4,
                sign_case: SignCase::Increase,
            },
            noise: NoiseConfig { eta: 0.0, seed: 20_240_617 },
            solver: SolverConfig {
                fem_tol: 1e-10,
                qp_tol: 1e-10,
                max_iter: 20_000,
                linear: SolverKind::Direct,
            },
            onestep: OneStepConfig {
                omega: 1e-14,
                sigma: 1e-10,
            },
            montest: TestWeights {
                alpha_lambda: 0.28 * (lambda1 - lambda0),
                alpha_mu: 0.28 * (mu1 - mu0),
            },
            output: OutputConfig {
                dir: PathBuf::from("out"),
                emit_vtk: false,
            },
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML when
/// possible and taken as a string otherwise.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("malformed override key '{key}'")));
    }
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips_through_toml() {
        let cfg = RunConfig::desk();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::desk().to_toml_string();
        let err = RunConfig::from_toml_str(&text, &[("noise.colour".into(), "\"pink\"".into())]);
        assert!(matches!(err, Err(Error::Parse(_))));
    }

    #[test]
    fn overrides_apply() {
        let text = RunConfig::desk().to_toml_string();
        let cfg = RunConfig::from_toml_str(
            &text,
            &[
                ("noise.eta".into(), "0.1".into()),
                ("bounds.sign_case".into(), "decrease".into()),
                ("inclusion.gamma_lambda".into(), "-1.3e5".into()),
                ("inclusion.gamma_mu".into(), "-1.3e3".into()),
                ("bounds.c_lambda".into(), "1e5".into()),
                ("bounds.c_mu".into(), "1e3".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.noise.eta, 0.1);
        assert_eq!(cfg.bounds.sign_case, SignCase::Decrease);
    }

    #[test]
    fn contrast_outside_bounds_is_rejected() {
        let text = RunConfig::desk().to_toml_string();
        let err = RunConfig::from_toml_str(&text, &[("inclusion.gamma_mu".into(), "5e3".into())]);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
