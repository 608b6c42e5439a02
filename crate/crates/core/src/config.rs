//! Pipeline configuration as flat `key = value` text.
//!
//! Keys mirror the fields one to one; registration parameters are flattened
//! under their own names. Lines starting with `#` are comments. The same
//! keys can be overridden one at a time with [`PipelineConfig::set`], which
//! is what the command line does for `--key value`.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{CohortSplit, WeekLimit};
use crate::error::{Error, Result};
use crate::registration::RegistrationParams;
use crate::stats::DEFAULT_BOOTSTRAP_RESAMPLES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub registration: RegistrationParams,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Truncation used for the second classification column.
    pub week_limit: WeekLimit,
    /// Patients pooled for the population ordering; empty means all.
    pub population_ids: Vec<String>,
    /// Patients tabulated against response; empty means all.
    pub test_ids: Vec<String>,
    pub out: PathBuf,
    pub confidence_level: f64,
    /// Width of the patient worker pool; `None` uses every available core.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationParams::default(),
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            bootstrap_seed: 0,
            week_limit: WeekLimit::THREE_WEEKS,
            population_ids: Vec::new(),
            test_ids: Vec::new(),
            out: PathBuf::from("."),
            confidence_level: 0.95,
            workers: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidParameter(format!("{key} = '{value}': {e}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn parse_ids(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn show_auto<T: Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map(|x| x.to_string())
        .unwrap_or_else(|| "auto".into())
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 16] = [
        "pyramid_levels",
        "iterations_per_level",
        "lcc_sigma",
        "fluid_sigma",
        "diffusion_sigma",
        "exp_steps",
        "step_scale",
        "convergence_tol",
        "bootstrap_resamples",
        "bootstrap_seed",
        "week_limit",
        "population_ids",
        "test_ids",
        "out",
        "confidence_level",
        "workers",
    ];

    /// Sets one key from its text form. Does not validate cross-field
    /// invariants; call [`validate`](Self::validate) once all keys are in.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let r = &mut self.registration;
        match key {
            "pyramid_levels" => r.pyramid_levels = parse_value(key, value)?,
            "iterations_per_level" => r.iterations_per_level = parse_value(key, value)?,
            "lcc_sigma" => r.lcc_sigma = parse_value(key, value)?,
            "fluid_sigma" => r.fluid_sigma = parse_value(key, value)?,
            "diffusion_sigma" => r.diffusion_sigma = parse_value(key, value)?,
            "exp_steps" => r.exp_steps = parse_auto(key, value)?,
            "step_scale" => r.step_scale = parse_value(key, value)?,
            "convergence_tol" => r.convergence_tol = parse_value(key, value)?,
            "bootstrap_resamples" => self.bootstrap_resamples = parse_value(key, value)?,
            "bootstrap_seed" => self.bootstrap_seed = parse_value(key, value)?,
            "week_limit" => self.week_limit = parse_value(key, value)?,
            "population_ids" => self.population_ids = parse_ids(value),
            "test_ids" => self.test_ids = parse_ids(value),
            "out" => self.out = PathBuf::from(value),
            "confidence_level" => self.confidence_level = parse_value(key, value)?,
            "workers" => self.workers = parse_auto(key, value)?,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown config key '{key}'"
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let r = &self.registration;
        Some(match key {
            "pyramid_levels" => r.pyramid_levels.to_string(),
            "iterations_per_level" => r.iterations_per_level.to_string(),
            "lcc_sigma" => r.lcc_sigma.to_string(),
            "fluid_sigma" => r.fluid_sigma.to_string(),
            "diffusion_sigma" => r.diffusion_sigma.to_string(),
            "exp_steps" => show_auto(&r.exp_steps),
            "step_scale" => r.step_scale.to_string(),
            "convergence_tol" => r.convergence_tol.to_string(),
            "bootstrap_resamples" => self.bootstrap_resamples.to_string(),
            "bootstrap_seed" => self.bootstrap_seed.to_string(),
            "week_limit" => self.week_limit.to_string(),
            "population_ids" => self.population_ids.join(","),
            "test_ids" => self.test_ids.join(","),
            "out" => self.out.display().to_string(),
            "confidence_level" => self.confidence_level.to_string(),
            "workers" => show_auto(&self.workers),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults. A key given twice is an
    /// error, as is any line without `=`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::malformed(path, format!("line {}: expected key = value", n + 1))
            })?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::malformed(
                    path,
                    format!("line {}: duplicate key '{key}'", n + 1),
                ));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| Error::malformed(path, format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.bootstrap_resamples < 100 {
            return bad(format!(
                "bootstrap_resamples must be >= 100, got {}",
                self.bootstrap_resamples
            ));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return bad(format!(
                "confidence_level must lie in (0, 1), got {}",
                self.confidence_level
            ));
        }
        if let WeekLimit::First(n) = self.week_limit {
            if n < 2 {
                return bad(format!("week_limit must be 'all' or >= 2, got {n}"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1".into());
        }
        for (name, ids) in [
            ("population_ids", &self.population_ids),
            ("test_ids", &self.test_ids),
        ] {
            for (i, id) in ids.iter().enumerate() {
                if ids[..i].contains(id) {
                    return bad(format!("{name} lists '{id}' twice"));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self) -> CohortSplit {
        CohortSplit {
            population: self.population_ids.clone(),
            test: self.test_ids.clone(),
        }
    }
}
