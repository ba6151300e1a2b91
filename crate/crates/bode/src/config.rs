//! Run configuration: flat JSON with flag > file > default precedence.

use std::fs;
use std::path::{Path, PathBuf};

use bode_core::field::{MIN_GRID, MIN_TIMESTEPS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of every command. Commands ignore the fields they do not use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for member-level parallelism. Does not affect results.
    pub jobs: usize,
    /// Dataset directory; when absent the synthetic dataset is generated in memory.
    pub data: Option<PathBuf>,
    pub nx: usize,
    pub nz: usize,
    pub timesteps: usize,
    /// Scattered source points for kNN regridding; absent means a uniform mesh.
    pub mesh_points: Option<usize>,
    pub knn_k: usize,
    pub members: usize,
    pub sobol: usize,
    /// Total trials per member, Sobol phase included.
    pub iters: usize,
    pub epochs: usize,
    pub trial_epochs: usize,
    /// Channel widths are divided by this (rounded up); 1 keeps the literal widths.
    pub width_divisor: usize,
    pub noise: f64,
    pub noise_filter_width: f64,
    /// Noise draws of the test frames averaged into noisy-run metrics.
    pub eval_draws: usize,
    pub n_raw: usize,
    pub mc_samples: usize,
    pub gp_restarts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            data: None,
            nx: 8,
            nz: 16,
            timesteps: 100,
            mesh_points: None,
            knn_k: 4,
            members: 5,
            sobol: 8,
            iters: 30,
            epochs: 200,
            trial_epochs: 60,
            width_divisor: 4,
            noise: 0.0,
            noise_filter_width: 2.0,
            eval_draws: 16,
            n_raw: 512,
            mc_samples: 256,
            gp_restarts: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Baseline,
    Bode,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Baseline => "baseline",
            Command::Bode => "bode",
            Command::Evaluate => "evaluate",
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl RunConfig {
    /// Reads a flat config file, or the `config` object of a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::json(path))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Checks the fields `command` depends on before any compute starts.
    pub fn validate(&self, command: Command) -> Result<()> {
        if self.jobs == 0 {
            return Err(invalid("jobs must be at least 1"));
        }
        let needs_grid = self.data.is_none() || command == Command::Generate;
        if needs_grid {
            if self.nx < MIN_GRID || self.nz < MIN_GRID {
                return Err(invalid(format!("grid {}x{} is below the {MIN_GRID}x{MIN_GRID} minimum", self.nx, self.nz)));
            }
            if self.timesteps < MIN_TIMESTEPS {
                return Err(invalid(format!("timesteps must be at least {MIN_TIMESTEPS}, got {}", self.timesteps)));
            }
            if let Some(p) = self.mesh_points {
                if self.knn_k == 0 || p < self.knn_k {
                    return Err(invalid(format!("mesh_points ({p}) must be at least knn_k ({}) and knn_k positive", self.knn_k)));
                }
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid(format!("noise must be a non-negative fraction, got {}", self.noise)));
        }
        if !(self.noise_filter_width > 0.0 && self.noise_filter_width.is_finite()) {
            return Err(invalid("noise_filter_width must be positive"));
        }
        match command {
            Command::Generate | Command::Evaluate => {}
            Command::Baseline | Command::Bode => {
                if self.members == 0 {
                    return Err(invalid("members must be at least 1"));
                }
                if self.epochs == 0 {
                    return Err(invalid("epochs must be at least 1"));
                }
                if self.width_divisor == 0 {
                    return Err(invalid("width_divisor must be at least 1"));
                }
                if self.noise > 0.0 && self.eval_draws == 0 {
                    return Err(invalid("eval_draws must be at least 1 for noisy runs"));
                }
            }
        }
        if command == Command::Baseline && self.members < 2 {
            return Err(invalid("a baseline ensemble needs at least 2 members"));
        }
        if command == Command::Bode {
            if self.sobol < 2 {
                return Err(invalid("sobol must be at least 2"));
            }
            if self.iters < self.sobol {
                return Err(invalid(format!("iters ({}) must be at least sobol ({})", self.iters, self.sobol)));
            }
            if self.trial_epochs == 0 || self.n_raw == 0 || self.mc_samples == 0 || self.gp_restarts == 0 {
                return Err(invalid("trial_epochs, n_raw, mc_samples and gp_restarts must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_command() {
        let c = RunConfig::default();
        for cmd in [Command::Generate, Command::Baseline, Command::Bode, Command::Evaluate] {
            c.validate(cmd).unwrap();
        }
    }

    #[test]
    fn small_grid_is_rejected() {
        let c = RunConfig { nx: 4, ..RunConfig::default() };
        assert!(matches!(c.validate(Command::Generate), Err(Error::Validation(_))));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"members": 3, "noise": 0.05}"#).unwrap();
        assert_eq!(c.members, 3);
        assert_eq!(c.noise, 0.05);
        assert_eq!(c.epochs, 200);
        assert!(serde_json::from_str::<RunConfig>(r#"{"membres": 3}"#).is_err());
    }
}
