//! Flat `section.key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::inverse::log_grid;

use super::Command;

/// Every accepted key with its default. An empty default means unset.
const SCHEMA: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("schedule.beta_min", "0.01"),
    ("schedule.beta_max", "20"),
    ("schedule.T", "1000"),
    ("kernel.std", "0.7"),
    ("kernel.grayscale", "false"),
    ("kernel.gamma", "0"),
    ("prior.kind", "toy"),
    ("prior.height", "32"),
    ("prior.width", "32"),
    ("prior.channels", "1"),
    ("prior.weights", ""),
    ("prior.means", ""),
    ("prior.variances", ""),
    ("prior.checkpoint", ""),
    ("problem.operator", "lens_blur"),
    ("problem.length", "5"),
    ("problem.std", "0.8"),
    ("problem.snr", "0.81"),
    ("problem.sigma", ""),
    ("problem.seed", "5"),
    ("problem.truth_seed", "123"),
    ("problem.noise_std", "2.5"),
    ("problem.noise_gamma", "0.3"),
    ("problem.noise_grayscale", "true"),
    ("problem.tikhonov_grid", "log:1e-4:1e2:25"),
    ("sampler.integrator", "pf"),
    ("sampler.stochastic", "false"),
    ("sampler.chains", "1000"),
    ("sampler.lambda", ""),
    ("sampler.lambda_grid", "0,log:0.01:10:13"),
    ("sampler.lambda_rule", "proportional"),
    ("sampler.likelihood_sign", "descend"),
    ("train.steps", "20000"),
    ("train.batch_size", "128"),
    ("train.lr", "1e-3"),
    ("train.decay", "constant"),
    ("train.hidden", "64,64"),
    ("train.consistency_weight", "1"),
    ("train.kernel_std_min", ""),
    ("train.kernel_std_max", ""),
    ("train.gamma_sq_min", ""),
    ("train.gamma_sq_max", ""),
    ("train.grayscale_prob", "0"),
    ("train.resume", ""),
    ("train.gap_samples", "5000"),
    ("field.t", "0.5"),
    ("field.extent", "3"),
    ("field.points", "21"),
    ("field.kappas", "1,4,16,64"),
    ("field.prior_scale", "1"),
    ("field.image_size", "512"),
    ("check.tolerance_scale", "1"),
    ("output.directory", "out"),
    ("output.stride", "1"),
];

fn command_defaults(cmd: Command) -> &'static [(&'static str, &'static str)] {
    match cmd {
        Command::VectorField => &[("prior.kind", "whitening")],
        Command::Sample | Command::TrainToy | Command::Check => &[],
        Command::Invert => &[
            ("prior.kind", "imaging"),
            ("prior.channels", "3"),
            ("kernel.std", "2.5"),
            ("kernel.gamma", "0.3"),
        ],
    }
}

/// Resolved configuration: schema defaults, then command defaults, then the
/// file, then command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn defaults(cmd: Command) -> Self {
        let mut values: BTreeMap<&'static str, String> =
            SCHEMA.iter().map(|(k, v)| (*k, v.to_string())).collect();
        for (k, v) in command_defaults(cmd) {
            values.insert(k, v.to_string());
        }
        Self { values }
    }

    pub fn parse(text: &str, cmd: Command) -> Result<Self> {
        let mut cfg = Self::defaults(cmd);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, cmd: Command) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, cmd)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, _) = SCHEMA
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key `{key}` missing from schema"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("`{key}`: expected a boolean, got `{other}`"))),
        }
    }

    /// Comma-separated numbers.
    pub fn get_list(&self, key: &str) -> Result<Vec<f64>> {
        parse_list(self.raw(key)).map_err(|e| Error::Config(format!("`{key}`: {e}")))
    }

    /// Semicolon-separated rows of comma-separated numbers.
    pub fn get_rows(&self, key: &str) -> Result<Vec<Vec<f64>>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(';')
            .map(|row| parse_list(row).map_err(|e| Error::Config(format!("`{key}`: {e}"))))
            .collect()
    }

    /// Like [`get_list`](Self::get_list), but an item `log:lo:hi:n` expands
    /// to `n` log-spaced values.
    pub fn get_grid(&self, key: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for item in self.raw(key).split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if let Some(spec) = item.strip_prefix("log:") {
                let parts: Vec<&str> = spec.split(':').collect();
                let bad = || Error::Config(format!("`{key}`: bad log range `{item}`"));
                if parts.len() != 3 {
                    return Err(bad());
                }
                let lo: f64 = parts[0].parse().map_err(|_| bad())?;
                let hi: f64 = parts[1].parse().map_err(|_| bad())?;
                let n: usize = parts[2].parse().map_err(|_| bad())?;
                if !(lo > 0.0 && hi >= lo && n > 0) {
                    return Err(bad());
                }
                out.extend(log_grid(lo, hi, n));
            } else {
                out.push(
                    item.parse()
                        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{item}`")))?,
                );
            }
        }
        Ok(out)
    }

    /// The resolved configuration in schema order, parseable by [`parse`](Self::parse).
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, _) in SCHEMA {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{key} = {}", self.values[key]);
        }
        out
    }
}

fn parse_list(raw: &str) -> std::result::Result<Vec<f64>, String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("cannot parse `{s}`")))
        .collect()
}
