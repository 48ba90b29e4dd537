use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use super::{preset, BenchmarkCase, CaseKind};
use crate::mesh::{Point, TriangleQuadrature};
use crate::schemes::{Scheme, SchemeConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key '{key}'{}", suggestion.as_ref().map(|s| format!(" (did you mean '{s}'?)")).unwrap_or_default())]
    UnknownKey {
        line: usize,
        key: String,
        suggestion: Option<String>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// A fully resolved run: case geometry, scheme settings and output cadence.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub case: BenchmarkCase,
    pub cfg: SchemeConfig,
    pub snapshot_every: usize,
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.case.validate().map_err(ConfigError::Invalid)?;
        self.cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.snapshot_every == 0 {
            return Err(ConfigError::Invalid("snapshot_every must be at least 1".into()));
        }
        Ok(())
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "kind",
    "name",
    "scheme",
    "re",
    "c1_tilde",
    "rho_r",
    "mu_r",
    "fr",
    "dt",
    "t_end",
    "nx",
    "ny",
    "length",
    "height",
    "solid_triangles",
    "disc_center_x",
    "disc_center_y",
    "disc_radius",
    "lid_speed",
    "leaflet_height",
    "leaflet_width",
    "period",
    "snapshot_every",
    "fp_tol",
    "fp_max_iters",
    "linear_tol",
    "max_linear_iters",
    "quadrature_points",
];

fn suggest(key: &str) -> Option<String> {
    CONFIG_KEYS
        .iter()
        .map(|k| (strsim::jaro_winkler(key, k), *k))
        .filter(|(sim, _)| *sim > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| ConfigError::Parse {
        line,
        message: format!("bad value '{v}' for {key}: {e}"),
    })
}

pub fn parse_config(path: &Path) -> Result<RunSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

/// `key = value` lines, `#` comments. `preset` (or `kind`) is applied first,
/// every other key overrides one field.
pub fn parse_config_str(text: &str) -> Result<RunSpec, ConfigError> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            message: format!("expected 'key = value', got '{content}'"),
        })?;
        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
        if !CONFIG_KEYS.contains(&k.as_str()) {
            return Err(ConfigError::UnknownKey {
                line,
                suggestion: suggest(&k),
                key: k,
            });
        }
        if let Some((first, ..)) = entries.iter().find(|(_, key, _)| *key == k) {
            return Err(ConfigError::Parse {
                line,
                message: format!("duplicate key '{k}' (first set on line {first})"),
            });
        }
        entries.push((line, k, v));
    }

    let find = |key: &str| entries.iter().find(|(_, k, _)| k == key);
    let mut case = match (find("preset"), find("kind")) {
        (Some((line, _, v)), _) => preset(v).map_err(|e| ConfigError::Parse {
            line: *line,
            message: e.to_string(),
        })?,
        (None, Some((line, _, v))) => {
            let mut c = match v.as_str() {
                "cavity" | "cavity-disc" => preset("cavity-1").unwrap(),
                "leaflet" => preset("leaflet-1").unwrap(),
                _ => {
                    return Err(ConfigError::Parse {
                        line: *line,
                        message: format!("kind must be 'cavity' or 'leaflet', got '{v}'"),
                    })
                }
            };
            c.name = v.clone();
            c
        }
        (None, None) => {
            let mut c = preset("cavity-1").unwrap();
            c.name = "custom".into();
            c
        }
    };
    if let (Some((line, _, v)), Some(_)) = (find("kind"), find("preset")) {
        let want = if case.kind == CaseKind::Leaflet { "leaflet" } else { "cavity" };
        if !v.starts_with(want) {
            return Err(ConfigError::Parse {
                line: *line,
                message: format!("kind '{v}' contradicts the preset"),
            });
        }
    }

    let mut scheme = Scheme::OneFieldFdm;
    let mut snapshot_every = 100;
    let mut tuning: Vec<(usize, &str, &str)> = Vec::new();
    for (line, k, v) in &entries {
        let line = *line;
        let f = || value::<f64>(line, k, v);
        let n = || value::<usize>(line, k, v);
        match k.as_str() {
            "preset" | "kind" => {}
            "name" => case.name = v.clone(),
            "scheme" => {
                scheme = v.parse().map_err(|e: String| ConfigError::Parse { line, message: e })?;
            }
            "re" => case.re = f()?,
            "c1_tilde" => case.c1_tilde = f()?,
            "rho_r" => case.rho_r = f()?,
            "mu_r" => case.mu_r = f()?,
            "dt" => case.dt = f()?,
            "t_end" => case.t_end = f()?,
            "nx" => case.nx = n()?,
            "ny" => case.ny = n()?,
            "length" => case.length = f()?,
            "height" => case.height = f()?,
            "solid_triangles" => case.solid_triangles = n()?,
            "disc_center_x" => case.disc_center = Point::new(f()?, case.disc_center.y),
            "disc_center_y" => case.disc_center = Point::new(case.disc_center.x, f()?),
            "disc_radius" => case.disc_radius = f()?,
            "lid_speed" => case.lid_speed = f()?,
            "leaflet_height" => case.leaflet_height = f()?,
            "leaflet_width" => case.leaflet_width = f()?,
            "period" => case.period = f()?,
            "snapshot_every" => snapshot_every = n()?,
            _ => tuning.push((line, k, v)),
        }
    }

    let mut cfg = case.scheme_config(scheme);
    for (line, k, v) in tuning {
        match k {
            "fr" => cfg.fr = value(line, k, v)?,
            "fp_tol" => cfg.fp_tol = value(line, k, v)?,
            "fp_max_iters" => cfg.fp_max_iters = value(line, k, v)?,
            "linear_tol" => {
                let tol: f64 = value(line, k, v)?;
                cfg.convection_tol = tol;
                cfg.diffusion_tol = tol;
                cfg.pressure_tol = tol;
            }
            "max_linear_iters" => cfg.max_linear_iters = value(line, k, v)?,
            "quadrature_points" => {
                cfg.quadrature = TriangleQuadrature::from_points(value(line, k, v)?).map_err(|e| {
                    ConfigError::Parse {
                        line,
                        message: e.to_string(),
                    }
                })?
            }
            _ => unreachable!("key list and match arms out of sync: {k}"),
        }
    }
    let spec = RunSpec {
        case,
        cfg,
        snapshot_every,
    };
    spec.validate()?;
    Ok(spec)
}
