//! Mapping between the 8-dimensional unit cube and network hyperparameters.
//!
//! Coordinate order: learning rate, weight decay, drop rate, batch size,
//! dense blocks, layers per block, growth rate, initial features.
//! Learning rate and weight decay are log-uniform over `[1e-4, 1e-2]`, drop
//! rate is linear over `[0, 0.5]`, and discrete fields split their
//! coordinate into equal-width bins over the ordered value set.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DIMENSION: usize = 8;

pub const RATE_RANGE: (f64, f64) = (1e-4, 1e-2);
pub const DROP_RATE_MAX: f64 = 0.5;
pub const BATCH_SIZES: [usize; 8] = [8, 12, 16, 24, 32, 48, 64, 128];
pub const DENSE_BLOCKS: [usize; 2] = [3, 5];
pub const LAYERS_PER_BLOCK: [usize; 7] = [3, 4, 5, 6, 7, 8, 9];
pub const GROWTH_RATES: [usize; 6] = [8, 12, 16, 24, 32, 48];
pub const INITIAL_FEATURES: [usize; 8] = [8, 12, 16, 24, 32, 48, 64, 128];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HyperspaceError {
    #[error("expected {DIMENSION} coordinates, got {0}")]
    WrongDimension(usize),
    #[error("coordinate {index} = {value} is outside [0, 1]")]
    OutOfCube { index: usize, value: f64 },
    #[error("{field} = {value} is outside the search space")]
    InvalidField { field: &'static str, value: f64 },
}

/// One point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub drop_rate: f64,
    pub batch_size: usize,
    pub n_dense_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub initial_features: usize,
}

/// Hand-tuned reference ensemble configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub block_layers: Vec<usize>,
    pub growth_rate: usize,
    pub drop_rate: f64,
    pub initial_features: usize,
    pub epochs: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 0.0008,
            weight_decay: 0.002,
            block_layers: alloc::vec![3, 4, 5],
            growth_rate: 16,
            drop_rate: 0.15,
            initial_features: 32,
            epochs: 200,
        }
    }
}

impl BaselineConfig {
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            drop_rate: self.drop_rate,
            batch_size: self.batch_size,
            block_layers: self.block_layers.clone(),
            growth_rate: self.growth_rate,
            initial_features: self.initial_features,
        }
    }

    /// Closest search-space point: the per-block layer counts collapse to
    /// their rounded mean, everything else carries over.
    pub fn nearest_hyper_config(&self) -> HyperConfig {
        let n = self.block_layers.len().max(1);
        let mean = (self.block_layers.iter().sum::<usize>() + n / 2) / n;
        HyperConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            drop_rate: self.drop_rate,
            batch_size: self.batch_size,
            n_dense_blocks: self.block_layers.len(),
            layers_per_block: mean,
            growth_rate: self.growth_rate,
            initial_features: self.initial_features,
        }
    }
}

/// Everything the trainer needs about architecture and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub drop_rate: f64,
    pub batch_size: usize,
    pub block_layers: Vec<usize>,
    pub growth_rate: usize,
    pub initial_features: usize,
}

impl HyperConfig {
    /// Every block gets the same layer count.
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            drop_rate: self.drop_rate,
            batch_size: self.batch_size,
            block_layers: alloc::vec![self.layers_per_block; self.n_dense_blocks],
            growth_rate: self.growth_rate,
            initial_features: self.initial_features,
        }
    }

    pub fn validate(&self) -> Result<(), HyperspaceError> {
        let rate_ok = |v: f64| v.is_finite() && v >= RATE_RANGE.0 * (1.0 - 1e-12) && v <= RATE_RANGE.1 * (1.0 + 1e-12);
        if !rate_ok(self.learning_rate) {
            return Err(HyperspaceError::InvalidField { field: "learning_rate", value: self.learning_rate });
        }
        if !rate_ok(self.weight_decay) {
            return Err(HyperspaceError::InvalidField { field: "weight_decay", value: self.weight_decay });
        }
        if !(0.0..=DROP_RATE_MAX).contains(&self.drop_rate) {
            return Err(HyperspaceError::InvalidField { field: "drop_rate", value: self.drop_rate });
        }
        index_of(&BATCH_SIZES, self.batch_size, "batch_size")?;
        index_of(&DENSE_BLOCKS, self.n_dense_blocks, "n_dense_blocks")?;
        index_of(&LAYERS_PER_BLOCK, self.layers_per_block, "layers_per_block")?;
        index_of(&GROWTH_RATES, self.growth_rate, "growth_rate")?;
        index_of(&INITIAL_FEATURES, self.initial_features, "initial_features")?;
        Ok(())
    }
}

fn index_of(values: &[usize], v: usize, field: &'static str) -> Result<usize, HyperspaceError> {
    values.iter().position(|&x| x == v).ok_or(HyperspaceError::InvalidField { field, value: v as f64 })
}

fn bin(values: &[usize], u: f64) -> usize {
    let k = values.len();
    values[((u * k as f64) as usize).min(k - 1)]
}

fn bin_center(index: usize, k: usize) -> f64 {
    (index as f64 + 0.5) / k as f64
}

fn log_rate(u: f64) -> f64 {
    let (lo, hi) = (libm::log10(RATE_RANGE.0), libm::log10(RATE_RANGE.1));
    libm::pow(10.0, lo + (hi - lo) * u)
}

fn log_rate_inverse(v: f64) -> f64 {
    let (lo, hi) = (libm::log10(RATE_RANGE.0), libm::log10(RATE_RANGE.1));
    ((libm::log10(v) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Unit-cube point -> configuration.
pub fn decode(u: &[f64]) -> Result<HyperConfig, HyperspaceError> {
    if u.len() != DIMENSION {
        return Err(HyperspaceError::WrongDimension(u.len()));
    }
    for (index, &value) in u.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(HyperspaceError::OutOfCube { index, value });
        }
    }
    Ok(HyperConfig {
        learning_rate: log_rate(u[0]),
        weight_decay: log_rate(u[1]),
        drop_rate: DROP_RATE_MAX * u[2],
        batch_size: bin(&BATCH_SIZES, u[3]),
        n_dense_blocks: bin(&DENSE_BLOCKS, u[4]),
        layers_per_block: bin(&LAYERS_PER_BLOCK, u[5]),
        growth_rate: bin(&GROWTH_RATES, u[6]),
        initial_features: bin(&INITIAL_FEATURES, u[7]),
    })
}

/// Configuration -> unit-cube point; discrete fields map to bin centers.
pub fn encode(cfg: &HyperConfig) -> Result<Vec<f64>, HyperspaceError> {
    cfg.validate()?;
    Ok(alloc::vec![
        log_rate_inverse(cfg.learning_rate),
        log_rate_inverse(cfg.weight_decay),
        cfg.drop_rate / DROP_RATE_MAX,
        bin_center(index_of(&BATCH_SIZES, cfg.batch_size, "batch_size")?, BATCH_SIZES.len()),
        bin_center(index_of(&DENSE_BLOCKS, cfg.n_dense_blocks, "n_dense_blocks")?, DENSE_BLOCKS.len()),
        bin_center(index_of(&LAYERS_PER_BLOCK, cfg.layers_per_block, "layers_per_block")?, LAYERS_PER_BLOCK.len()),
        bin_center(index_of(&GROWTH_RATES, cfg.growth_rate, "growth_rate")?, GROWTH_RATES.len()),
        bin_center(index_of(&INITIAL_FEATURES, cfg.initial_features, "initial_features")?, INITIAL_FEATURES.len()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn lower_corner() {
        let c = decode(&[0.0; 8]).unwrap();
        assert!(close(c.learning_rate, 1e-4) && close(c.weight_decay, 1e-4));
        assert_eq!(c.drop_rate, 0.0);
        assert_eq!(
            (c.batch_size, c.n_dense_blocks, c.layers_per_block, c.growth_rate, c.initial_features),
            (8, 3, 3, 8, 8)
        );
    }

    #[test]
    fn upper_corner() {
        let c = decode(&[1.0; 8]).unwrap();
        assert!(close(c.learning_rate, 1e-2) && close(c.weight_decay, 1e-2));
        assert_eq!(c.drop_rate, 0.5);
        assert_eq!(
            (c.batch_size, c.n_dense_blocks, c.layers_per_block, c.growth_rate, c.initial_features),
            (128, 5, 9, 48, 128)
        );
    }

    #[test]
    fn log_midpoint() {
        let c = decode(&[0.5; 8]).unwrap();
        assert!(close(c.learning_rate, 1e-3));
        let mut cfg = c.clone();
        cfg.learning_rate = 1e-3;
        assert!(close(encode(&cfg).unwrap()[0], 0.5));
    }

    #[test]
    fn baseline_encodes_inside_cube() {
        let b = BaselineConfig::default();
        let h = b.nearest_hyper_config();
        assert_eq!(h.layers_per_block, 4);
        let u = encode(&h).unwrap();
        assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(u[1] > 0.0 && u[1] < 1.0);
        assert!(u[2] > 0.0 && u[2] < 1.0);
        assert!(close(u[2], 0.3));
    }

    #[test]
    fn out_of_cube_is_rejected() {
        let mut u = [0.5; 8];
        u[3] = 1.2;
        assert_eq!(decode(&u).unwrap_err(), HyperspaceError::OutOfCube { index: 3, value: 1.2 });
        assert_eq!(decode(&[0.5; 7]).unwrap_err(), HyperspaceError::WrongDimension(7));
        let mut cfg = decode(&[0.5; 8]).unwrap();
        cfg.growth_rate = 10;
        assert!(matches!(encode(&cfg), Err(HyperspaceError::InvalidField { field: "growth_rate", .. })));
    }

    #[test]
    fn json_field_names() {
        let v = serde_json::to_value(decode(&[0.0; 8]).unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in [
            "learning_rate",
            "weight_decay",
            "drop_rate",
            "batch_size",
            "n_dense_blocks",
            "layers_per_block",
            "growth_rate",
            "initial_features",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(keys.len(), 8);
    }
}
