//! Member checkpoints: `BODECKPT`, a `u32` version, a `u64` header length,
//! the JSON header, then the parameters as little-endian `f64`.

use std::fs;
use std::path::Path;

use bode_core::ensemble::TrainedMember;
use bode_core::hyperspace::TrainingConfig;
use bode_core::nn::{DenseNetSpec, Network, TargetScale, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BODECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: DenseNetSpec,
    pub config: TrainingConfig,
    pub seed: u64,
    pub epochs: usize,
    pub target_scale: TargetScale,
    pub n_params: usize,
}

pub fn encode(member: &TrainedMember) -> Vec<u8> {
    let net = &member.model.network;
    let header = Header {
        spec: net.spec().clone(),
        config: member.config.clone(),
        seed: member.seed,
        epochs: member.epochs,
        target_scale: member.model.target_scale,
        n_params: net.parameters().len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * header.n_params);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.parameters() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Header, TrainedModel)> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(Error::json(path))?;
    let params_bytes = &bytes[20 + len..];
    if params_bytes.len() != header.n_params * 8 {
        return Err(bad("parameter block length does not match header"));
    }
    let params = params_bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let network = Network::from_parameters(header.spec.clone(), params).map_err(|e| bad(&e.to_string()))?;
    let model = TrainedModel { network, target_scale: header.target_scale };
    Ok((header, model))
}

pub fn save(member: &TrainedMember, path: &Path) -> Result<()> {
    fs::write(path, encode(member)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<(Header, TrainedModel)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bode_core::ensemble::{train_member, MemberData};
    use bode_core::hyperspace::BaselineConfig;
    use bode_core::nn::SampleSet;

    #[test]
    fn round_trip_preserves_predictions() {
        let set = SampleSet { dim: 2, inputs: (0..40).map(|i| i as f64 / 40.0).collect(), targets: (0..20).map(|i| i as f64).collect(), groups: vec![] };
        let data = MemberData { train: &set, validation: None, noise: None, width_divisor: 4 };
        let m = train_member(data, &BaselineConfig::default().training(), 2, 5).unwrap();
        let bytes = encode(&m);
        let (h, model) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(h.seed, 5);
        assert_eq!(model, m.model);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
