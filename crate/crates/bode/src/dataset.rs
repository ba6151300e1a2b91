//! Dataset directory format.
//!
//! ```text
//! meta.json            grid, timing, split ledger, feature statistics, layout
//! frames/00000.bin     one file per timestep
//! ```
//!
//! A frame file holds `1 + channels` arrays back to back (target first, then
//! the channels in `meta.channels` order). Each array is `nz * nx`
//! little-endian `f32` values in row-major order, `index = iz * nx + ix`.

use std::fs;
use std::path::{Path, PathBuf};

use bode_core::field::{FieldDataset, FieldShape, Frame, Grid, Mesh, NormStats, SplitLedger, CHANNELS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "bode-field-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub dtype: String,
    pub order: String,
    pub arrays: Vec<String>,
    pub file_pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format: String,
    pub grid: Grid,
    pub timesteps: usize,
    pub dt: f64,
    pub seed: u64,
    pub shape: FieldShape,
    pub mesh: Mesh,
    pub channels: Vec<String>,
    pub ledger: SplitLedger,
    /// Training-split statistics of the network input columns.
    pub feature_stats: NormStats,
    pub layout: Layout,
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:05}.bin"))
}

pub fn meta_of(ds: &FieldDataset) -> Meta {
    let mut arrays = vec!["target".to_string()];
    arrays.extend(CHANNELS.iter().map(|c| c.to_string()));
    Meta {
        format: FORMAT.into(),
        grid: ds.grid,
        timesteps: ds.n_timesteps(),
        dt: ds.dt,
        seed: ds.seed,
        shape: ds.shape,
        mesh: ds.mesh,
        channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
        ledger: ds.ledger.clone(),
        feature_stats: ds.feature_stats(),
        layout: Layout {
            dtype: "f32 little-endian".into(),
            order: "row-major nz x nx, index = iz * nx + ix".into(),
            arrays,
            file_pattern: "frames/{timestep:05}.bin".into(),
        },
    }
}

/// Writes `ds` into `dir`, which must exist and be empty.
pub fn write(ds: &FieldDataset, dir: &Path) -> Result<()> {
    let meta = meta_of(ds);
    let text = serde_json::to_string_pretty(&meta).map_err(Error::json(dir))?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, text + "\n").map_err(Error::io(&meta_path))?;
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(Error::io(&frames))?;
    for (t, f) in ds.frames.iter().enumerate() {
        let mut bytes = Vec::with_capacity((1 + f.channels.len()) * f.target.len() * 4);
        for arr in std::iter::once(&f.target).chain(&f.channels) {
            for v in arr {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let p = frame_path(dir, t);
        fs::write(&p, bytes).map_err(Error::io(&p))?;
    }
    Ok(())
}

pub fn read(dir: &Path) -> Result<FieldDataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
    let meta: Meta = serde_json::from_str(&text).map_err(Error::json(&meta_path))?;
    if meta.format != FORMAT {
        return Err(Error::Format { path: meta_path, reason: format!("unknown format {:?}", meta.format) });
    }
    let cells = meta.grid.cells();
    let arrays = 1 + meta.channels.len();
    let mut frames = Vec::with_capacity(meta.timesteps);
    for t in 0..meta.timesteps {
        let p = frame_path(dir, t);
        let bytes = fs::read(&p).map_err(Error::io(&p))?;
        if bytes.len() != arrays * cells * 4 {
            return Err(Error::Format { path: p, reason: format!("expected {} bytes, found {}", arrays * cells * 4, bytes.len()) });
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let mut chunks = values.chunks_exact(cells).map(<[f32]>::to_vec);
        let target = chunks.next().unwrap_or_default();
        frames.push(Frame { target, channels: chunks.collect() });
    }
    let ds = FieldDataset {
        grid: meta.grid,
        dt: meta.dt,
        seed: meta.seed,
        shape: meta.shape,
        mesh: meta.mesh,
        frames,
        ledger: meta.ledger,
    };
    if let Err(reason) = ds.ledger.check(ds.n_timesteps()) {
        return Err(Error::Format { path: meta_path, reason });
    }
    Ok(ds)
}
