//! Synthetic transient field data, nearest-neighbour regridding, feature
//! normalization, the timestep split ledger, and smoothed multiplicative
//! target noise.
//!
//! Frames are `nz x nx` row-major (`index = iz * nx + ix`). All stored values
//! are `f32` so a dataset written to disk reloads bit-identically.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{SampleGroup, SampleSet, TargetNoise};
use crate::rng;

pub const MIN_GRID: usize = 8;
pub const MIN_TIMESTEPS: usize = 100;
/// Input channels, in feature order after the coordinates.
pub const CHANNELS: [&str; 4] = ["temperature", "pressure", "velocity_x", "velocity_z"];
/// Network input columns: coordinates, time, then the channels.
pub const FEATURE_NAMES: [&str; 7] = ["x", "z", "t", "temperature", "pressure", "velocity_x", "velocity_z"];
pub const TRAIN_FRACTION: f64 = 0.70;
pub const VALIDATION_FRACTION: f64 = 0.295;
pub const TEST_FRACTION: f64 = 0.005;
pub const BO_FRACTION: f64 = 0.30;
pub const BO_TRAIN_SHARE: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("grid {nx}x{nz} is below the {MIN_GRID}x{MIN_GRID} minimum")]
    GridTooSmall { nx: usize, nz: usize },
    #[error("{0} timesteps is below the minimum of {MIN_TIMESTEPS}")]
    TooFewTimesteps(usize),
    #[error("no source points to regrid from")]
    EmptySource,
    #[error("k = {k} but only {available} source points")]
    NotEnoughNeighbours { k: usize, available: usize },
    #[error("k must be positive")]
    ZeroNeighbours,
    #[error("sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("filter width must be positive, got {0}")]
    InvalidFilterWidth(f64),
    #[error("frame has {got} cells, grid has {expected}")]
    FrameSize { expected: usize, got: usize },
}

/// Uniform cell-centred grid over `[0, lx] x [0, lz]` metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub nz: usize,
    pub lx: f64,
    pub lz: f64,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.nx * self.nz
    }

    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 + 0.5) * self.lx / self.nx as f64
    }

    pub fn z(&self, iz: usize) -> f64 {
        (iz as f64 + 0.5) * self.lz / self.nz as f64
    }

    /// Cell-centre coordinates in frame order.
    pub fn centres(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.cells());
        for iz in 0..self.nz {
            for ix in 0..self.nx {
                out.push([self.x(ix), self.z(iz)]);
            }
        }
        out
    }
}

/// One time frame: target plus input channels, each `nz x nx`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub target: Vec<f32>,
    pub channels: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Which split every timestep belongs to, plus the optimization subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLedger {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub bo_train: Vec<usize>,
    pub bo_val: Vec<usize>,
}

impl SplitLedger {
    /// Contiguous blocks of timesteps are shuffled under `seed`; the first
    /// `n_test` shuffled timesteps form the test split, the last `n_train`
    /// the training split, the rest validation. Block length equals `n_test`, so
    /// the test split is one contiguous stretch of time.
    pub fn assign(n_timesteps: usize, seed: u64) -> Self {
        let n = n_timesteps;
        let n_test = ((TEST_FRACTION * n as f64).round() as usize).max(1).min(n.saturating_sub(2));
        let n_train = ((TRAIN_FRACTION * n as f64).round() as usize).clamp(1, n - n_test - 1);
        let n_val = n - n_test - n_train;
        let block = n_test.max(1);
        let mut blocks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(block).map(|c| c.to_vec()).collect();
        let mut rng = rng::stream(seed, &[0x5917]);
        blocks.shuffle(&mut rng);
        // a short trailing block must not open the order, or the test split
        // would straddle two blocks
        if let Some(first_full) = blocks.iter().position(|b| b.len() == block) {
            let b = blocks.remove(first_full);
            blocks.insert(0, b);
        }
        let order: Vec<usize> = blocks.into_iter().flatten().collect();
        let mut test = order[..n_test].to_vec();
        let mut validation = order[n_test..n_test + n_val].to_vec();
        let mut train = order[n_test + n_val..].to_vec();
        test.sort_unstable();
        validation.sort_unstable();
        train.sort_unstable();

        let mut pool: Vec<usize> = train.iter().chain(&validation).copied().collect();
        pool.sort_unstable();
        pool.shuffle(&mut rng);
        let n_bo = ((BO_FRACTION * pool.len() as f64).round() as usize).clamp(2, pool.len());
        let n_bo_train = ((BO_TRAIN_SHARE * n_bo as f64).round() as usize).clamp(1, n_bo - 1);
        let mut bo_train = pool[..n_bo_train].to_vec();
        let mut bo_val = pool[n_bo_train..n_bo].to_vec();
        bo_train.sort_unstable();
        bo_val.sort_unstable();
        Self { train, validation, test, bo_train, bo_val }
    }

    pub fn split_of(&self, t: usize) -> Option<Split> {
        if self.train.binary_search(&t).is_ok() {
            Some(Split::Train)
        } else if self.validation.binary_search(&t).is_ok() {
            Some(Split::Validation)
        } else if self.test.binary_search(&t).is_ok() {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// Partition and subset checks; returns a description of the first
    /// violation.
    pub fn check(&self, n_timesteps: usize) -> Result<(), String> {
        let mut seen = vec![0u8; n_timesteps];
        for &t in self.train.iter().chain(&self.validation).chain(&self.test) {
            if t >= n_timesteps {
                return Err(alloc::format!("timestep {t} out of range"));
            }
            seen[t] += 1;
        }
        if let Some(t) = seen.iter().position(|&c| c != 1) {
            return Err(alloc::format!("timestep {t} is in {} splits", seen[t]));
        }
        for &t in self.bo_train.iter().chain(&self.bo_val) {
            match self.split_of(t) {
                Some(Split::Train | Split::Validation) => {}
                _ => return Err(alloc::format!("optimization timestep {t} is outside train/validation")),
            }
        }
        if self.bo_train.iter().any(|t| self.bo_val.binary_search(t).is_ok()) {
            return Err("optimization train and validation overlap".to_string());
        }
        Ok(())
    }
}

/// Per-feature affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics of each column of a row-major matrix.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = rows.len().checked_div(dim).unwrap_or(0);
        let mut mean = vec![0.0; dim];
        let mut std = vec![0.0; dim];
        if n == 0 {
            return Self { mean, std };
        }
        for r in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in rows.chunks_exact(dim) {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        std.iter_mut().for_each(|s| *s = libm::sqrt(*s / n as f64));
        Self { mean, std }
    }

    /// `(x - mean) / std`; zero-spread columns map to 0.
    pub fn apply(&self, rows: &mut [f64]) {
        let dim = self.mean.len();
        for r in rows.chunks_exact_mut(dim) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s > 0.0 { (*v - m) / s } else { 0.0 };
            }
        }
    }

    pub fn invert(&self, rows: &mut [f64]) {
        let dim = self.mean.len();
        for r in rows.chunks_exact_mut(dim) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s > 0.0 { *v * s + m } else { *m };
            }
        }
    }
}

/// Fits statistics on `rows` and normalizes them in place.
pub fn z_normalize(rows: &mut [f64], dim: usize) -> NormStats {
    let stats = NormStats::fit(rows, dim);
    stats.apply(rows);
    stats
}

/// Inverse-distance-weighted (power 2) mean of the `k` nearest sources at
/// every grid cell. A cell that coincides with a source, or any cell when
/// `k = 1`, takes the nearest value exactly.
pub fn knn_regrid(points: &[[f64; 2]], values: &[f64], k: usize, grid: &Grid) -> Result<Vec<f64>, FieldError> {
    if points.is_empty() {
        return Err(FieldError::EmptySource);
    }
    if k == 0 {
        return Err(FieldError::ZeroNeighbours);
    }
    if k > points.len() {
        return Err(FieldError::NotEnoughNeighbours { k, available: points.len() });
    }
    let mut out = Vec::with_capacity(grid.cells());
    let mut near: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for c in grid.centres() {
        near.clear();
        for (i, p) in points.iter().enumerate() {
            let d2 = (p[0] - c[0]) * (p[0] - c[0]) + (p[1] - c[1]) * (p[1] - c[1]);
            if near.len() < k || d2 < near[near.len() - 1].0 {
                let pos = near.partition_point(|e| e.0 <= d2);
                near.insert(pos, (d2, i));
                near.truncate(k);
            }
        }
        if near[0].0 == 0.0 || k == 1 {
            out.push(values[near[0].1]);
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &(d2, i) in &near {
            let w = 1.0 / d2;
            num += w * values[i];
            den += w;
        }
        out.push(num / den);
    }
    Ok(out)
}

/// Source mesh for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mesh {
    /// Evaluate the analytic field at the cell centres.
    Uniform,
    /// Evaluate at `points` random locations and regrid with `k` neighbours.
    Scattered { points: usize, k: usize },
}

/// Random shape parameters of one synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldShape {
    pub amplitude: f64,
    pub centre_x: f64,
    pub width_x: f64,
    pub width_z: f64,
    pub z_start: f64,
    pub z_end: f64,
    pub decay: f64,
    pub background: f64,
    pub phase: f64,
}

impl FieldShape {
    pub fn draw(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0xF1E1D]);
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * r.random::<f64>();
        Self {
            amplitude: u(1.5, 2.5),
            centre_x: u(0.4, 0.6),
            width_x: u(0.15, 0.22),
            width_z: u(0.08, 0.12),
            z_start: u(0.72, 0.8),
            z_end: u(0.2, 0.3),
            decay: u(0.3, 0.5),
            background: u(0.04, 0.08),
            phase: u(0.0, core::f64::consts::TAU),
        }
    }

    /// Target and channels at normalized coordinates `(xs, zs)` in `[0, 1]`
    /// and normalized time `s` in `[0, 1]`.
    pub fn eval(&self, xs: f64, zs: f64, s: f64) -> (f64, [f64; 4]) {
        use libm::{cos, exp, sin};
        let zc = self.z_start + (self.z_end - self.z_start) * s;
        let amp = self.amplitude * (1.0 - self.decay * s);
        let dx = (xs - self.centre_x) / self.width_x;
        let dz = (zs - zc) / self.width_z;
        let bump = exp(-0.5 * (dx * dx + dz * dz));
        let target = amp * bump + self.background * (1.0 + 0.5 * zs);
        // heated, lighter fluid sits in the bump; it sinks as the bump descends
        let temperature = 300.0 + 20.0 * zs + 15.0 * bump * (1.0 - 0.3 * s) + 2.0 * sin(3.0 * xs + self.phase);
        let pressure = 1.0e5 - 9.81 * 1.2 * zs + 3.0 * bump * dz;
        let velocity_x = 0.3 * sin(core::f64::consts::PI * zs) * cos(2.0 * xs + self.phase) - 0.2 * bump * dz;
        let velocity_z = -0.5 * (self.z_start - self.z_end) * bump + 0.05 * sin(4.0 * xs + 2.0 * s);
        (target, [temperature, pressure, velocity_x, velocity_z])
    }
}

/// Time-indexed field data with its split ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDataset {
    pub grid: Grid,
    pub dt: f64,
    pub seed: u64,
    pub shape: FieldShape,
    pub mesh: Mesh,
    pub frames: Vec<Frame>,
    pub ledger: SplitLedger,
}

fn to_f32(v: f64) -> f32 {
    v as f32
}

/// Smooth transient field: a high-target bump whose centre descends and
/// whose amplitude decays over time, on a weak stratified background.
pub fn generate_synthetic(nx: usize, nz: usize, n_timesteps: usize, seed: u64) -> Result<FieldDataset, FieldError> {
    generate_synthetic_with(nx, nz, n_timesteps, seed, Mesh::Uniform)
}

pub fn generate_synthetic_with(nx: usize, nz: usize, n_timesteps: usize, seed: u64, mesh: Mesh) -> Result<FieldDataset, FieldError> {
    if nx < MIN_GRID || nz < MIN_GRID {
        return Err(FieldError::GridTooSmall { nx, nz });
    }
    if n_timesteps < MIN_TIMESTEPS {
        return Err(FieldError::TooFewTimesteps(n_timesteps));
    }
    let grid = Grid { nx, nz, lx: 1.0, lz: 2.0 };
    let shape = FieldShape::draw(seed);
    let scattered: Option<(Vec<[f64; 2]>, usize)> = match mesh {
        Mesh::Uniform => None,
        Mesh::Scattered { points, k } => {
            let mut r = rng::stream(seed, &[0x5CA7]);
            let pts = (0..points).map(|_| [r.random::<f64>() * grid.lx, r.random::<f64>() * grid.lz]).collect();
            Some((pts, k))
        }
    };
    let mut frames = Vec::with_capacity(n_timesteps);
    for t in 0..n_timesteps {
        let s = t as f64 / (n_timesteps - 1) as f64;
        let sites = match &scattered {
            Some((pts, _)) => pts.clone(),
            None => grid.centres(),
        };
        let mut target = Vec::with_capacity(sites.len());
        let mut chans: Vec<Vec<f64>> = vec![Vec::with_capacity(sites.len()); CHANNELS.len()];
        for p in &sites {
            let (y, c) = shape.eval(p[0] / grid.lx, p[1] / grid.lz, s);
            target.push(y);
            for (dst, v) in chans.iter_mut().zip(c) {
                dst.push(v);
            }
        }
        if let Some((pts, k)) = &scattered {
            target = knn_regrid(pts, &target, *k, &grid)?;
            for c in chans.iter_mut() {
                *c = knn_regrid(pts, c, *k, &grid)?;
            }
        }
        frames.push(Frame {
            target: target.into_iter().map(|v| to_f32(v.max(0.0))).collect(),
            channels: chans.into_iter().map(|c| c.into_iter().map(to_f32).collect()).collect(),
        });
    }
    Ok(FieldDataset { grid, dt: 1.0 / (n_timesteps - 1) as f64, seed, shape, mesh, frames, ledger: SplitLedger::assign(n_timesteps, seed) })
}

impl FieldDataset {
    pub fn n_timesteps(&self) -> usize {
        self.frames.len()
    }

    /// Raw (unnormalized) feature rows and targets for the given timesteps,
    /// grouped by frame.
    pub fn raw_samples(&self, timesteps: &[usize]) -> SampleSet {
        let cells = self.grid.cells();
        let dim = FEATURE_NAMES.len();
        let centres = self.grid.centres();
        let mut set = SampleSet {
            dim,
            inputs: Vec::with_capacity(timesteps.len() * cells * dim),
            targets: Vec::with_capacity(timesteps.len() * cells),
            groups: Vec::with_capacity(timesteps.len()),
        };
        for &t in timesteps {
            let frame = &self.frames[t];
            set.groups.push(SampleGroup { timestep: t as u64, start: set.targets.len(), len: cells });
            for (i, c) in centres.iter().enumerate() {
                set.inputs.extend_from_slice(&[c[0], c[1], t as f64 * self.dt]);
                set.inputs.extend(frame.channels.iter().map(|ch| ch[i] as f64));
                set.targets.push(frame.target[i] as f64);
            }
        }
        set
    }

    /// Feature statistics of the training split.
    pub fn feature_stats(&self) -> NormStats {
        NormStats::fit(&self.raw_samples(&self.ledger.train).inputs, FEATURE_NAMES.len())
    }

    /// Samples with features normalized by `stats`.
    pub fn samples(&self, timesteps: &[usize], stats: &NormStats) -> SampleSet {
        let mut set = self.raw_samples(timesteps);
        stats.apply(&mut set.inputs);
        set
    }

    /// Root-mean-square of the target over the given timesteps.
    pub fn target_rms(&self, timesteps: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &t in timesteps {
            for &v in &self.frames[t].target {
                sum += (v as f64) * (v as f64);
                n += 1;
            }
        }
        libm::sqrt(sum / n.max(1) as f64)
    }
}

/// Relative noise level and smoothing of the noise factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    /// Gaussian filter standard deviation, in cells.
    pub filter_width: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const DEFAULT_FILTER_WIDTH: f64 = 2.0;

    pub fn new(sigma: f64, seed: u64) -> Self {
        Self { sigma, filter_width: Self::DEFAULT_FILTER_WIDTH, seed }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(FieldError::InvalidSigma(self.sigma));
        }
        if !(self.filter_width > 0.0 && self.filter_width.is_finite()) {
            return Err(FieldError::InvalidFilterWidth(self.filter_width));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps truncated at four standard deviations.
fn gaussian_taps(width: f64) -> Vec<f64> {
    let radius = libm::ceil(4.0 * width) as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|i| libm::exp(-0.5 * (i as f64 / width) * (i as f64 / width))).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Mirror index into `[0, n)`: `-1 -> 0`, `n -> n - 1`.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian smoothing of an `nz x nx` field with mirror padding.
pub fn gaussian_filter(field: &[f64], nx: usize, nz: usize, width: f64) -> Vec<f64> {
    let taps = gaussian_taps(width);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; field.len()];
    for iz in 0..nz {
        for ix in 0..nx {
            tmp[iz * nx + ix] = taps.iter().enumerate().map(|(k, w)| w * field[iz * nx + mirror(ix as isize + k as isize - r, nx)]).sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for iz in 0..nz {
        for ix in 0..nx {
            out[iz * nx + ix] = taps.iter().enumerate().map(|(k, w)| w * tmp[mirror(iz as isize + k as isize - r, nz) * nx + ix]).sum();
        }
    }
    out
}

/// Smoothed noise factor with sample standard deviation exactly `sigma`.
pub fn noise_factor(spec: &NoiseSpec, nx: usize, nz: usize, epoch: u64, timestep: u64) -> Vec<f64> {
    let n = nx * nz;
    if spec.sigma == 0.0 {
        return vec![0.0; n];
    }
    let mut r = rng::stream(spec.seed, &[0x401E, epoch, timestep]);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            spec.sigma * z
        })
        .collect();
    let mut smooth = gaussian_filter(&raw, nx, nz, spec.filter_width);
    let mean = smooth.iter().sum::<f64>() / n as f64;
    let sd = libm::sqrt(smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64);
    if sd > 0.0 {
        let k = spec.sigma / sd;
        smooth.iter_mut().for_each(|v| *v *= k);
    } else {
        smooth.iter_mut().for_each(|v| *v = 0.0);
    }
    smooth
}

/// `max(0, y + factor * y)` with a fresh factor per `(epoch, timestep)`.
pub fn inject_noise(frame: &[f64], nx: usize, nz: usize, spec: &NoiseSpec, epoch: u64, timestep: u64) -> Result<Vec<f64>, FieldError> {
    spec.validate()?;
    if frame.len() != nx * nz {
        return Err(FieldError::FrameSize { expected: nx * nz, got: frame.len() });
    }
    if spec.sigma == 0.0 {
        return Ok(frame.to_vec());
    }
    let eps = noise_factor(spec, nx, nz, epoch, timestep);
    Ok(frame.iter().zip(&eps).map(|(y, e)| (y + e * y).max(0.0)).collect())
}

/// Per-epoch target noise for sample sets built from whole frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameNoise {
    pub spec: NoiseSpec,
    pub nx: usize,
    pub nz: usize,
}

/// Epoch tags reserved for fixed evaluation draws; training epochs never
/// reach them.
pub const EVALUATION_EPOCH_BASE: u64 = u64::MAX - 1024;

impl FrameNoise {
    /// Copy of `set` whose targets carry the noise draw of `epoch`.
    pub fn noisy_copy(&self, set: &SampleSet, epoch: u64) -> SampleSet {
        let mut out = set.clone();
        self.perturb(epoch, set, &mut out.targets);
        out
    }
}

impl TargetNoise for FrameNoise {
    fn perturb(&self, epoch: u64, set: &SampleSet, out: &mut [f64]) {
        for g in &set.groups {
            let clean = &set.targets[g.start..g.start + g.len];
            let noisy = inject_noise(clean, self.nx, self.nz, &self.spec, epoch, g.timestep).expect("groups hold whole frames");
            out[g.start..g.start + g.len].copy_from_slice(&noisy);
        }
    }
}
