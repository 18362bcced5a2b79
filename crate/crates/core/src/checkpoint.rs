//! Checkpoint files: `FLMCKPT1`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor's values back to back in little-endian
//! `f32` or `f64`.
//!
//! Loading widens `f32` files to `f64`. Saving in `f32` refuses values that
//! `f32` cannot hold exactly, so nothing is ever narrowed silently.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser_net::{DenoiserNet, ModelParameters, NetDenoiser, NetworkConfig, Parameterization};
use crate::error::{Error, Result};
use crate::flowmap::{FlowMapKind, FlowMapModel};
use crate::lang_repr::Vocabulary;
use crate::numerics::{Precision, Tensor};

pub const MAGIC: &[u8; 8] = b"FLMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Flm,
    FlowMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ArtifactKind,
    pub dtype: Precision,
    pub network: NetworkConfig,
    pub parameterization: Parameterization,
    pub flowmap_kind: Option<FlowMapKind>,
    pub teacher_network: Option<NetworkConfig>,
    pub vocab: Option<Vocabulary>,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn flm(model: &NetDenoiser, dtype: Precision) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            kind: ArtifactKind::Flm,
            dtype,
            network: model.net.config().clone(),
            parameterization: model.parameterization,
            flowmap_kind: None,
            teacher_network: None,
            vocab: None,
            config_hash: String::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_vocab(mut self, vocab: &Vocabulary) -> Self {
        self.vocab = Some(vocab.clone());
        self
    }

    pub fn with_config_hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.to_string();
        self
    }
}

/// Writes `tensors` under `manifest` (its tensor list is replaced).
pub fn write_checkpoint(path: &Path, manifest: &Manifest, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(manifest, tensors)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// The exact bytes `write_checkpoint` would produce.
pub fn encode(manifest: &Manifest, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut m = manifest.clone();
    m.tensors = tensors
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&m)?;
    let width = if m.dtype == Precision::F32 { 4 } else { 8 };
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + total * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in tensors {
        for &v in t.data() {
            match m.dtype {
                Precision::F32 => {
                    let f = v as f32;
                    if f as f64 != v && !(v.is_nan() && f.is_nan()) {
                        return Err(Error::Checkpoint(format!("{name} holds {v}, which f32 would narrow")));
                    }
                    out.extend_from_slice(&f.to_le_bytes());
                }
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Reads a checkpoint. Nothing is returned unless the whole file parses and
/// every tensor's size matches the manifest.
pub fn read_checkpoint(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    decode(&std::fs::read(path)?)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {} unsupported", manifest.format_version)));
    }
    let width = if manifest.dtype == Precision::F32 { 4 } else { 8 };
    let blob = &bytes[16 + len..];
    let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * width {
        return Err(Error::Checkpoint(format!("expected {} data bytes, found {}", total * width, blob.len())));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut pos = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = blob[pos..pos + n * width]
            .chunks_exact(width)
            .map(|c| match width {
                4 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                _ => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        pos += n * width;
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}

fn group<'a>(prefix: &str, params: &'a ModelParameters) -> Vec<(String, &'a Tensor)> {
    params.iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

fn take_group(tensors: &[(String, Tensor)], prefix: &str) -> Result<ModelParameters> {
    ModelParameters::new(
        tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect(),
    )
}

pub fn save_flm(path: &Path, model: &NetDenoiser, manifest: &Manifest) -> Result<()> {
    let mut m = manifest.clone();
    m.kind = ArtifactKind::Flm;
    m.network = model.net.config().clone();
    m.parameterization = model.parameterization;
    write_checkpoint(path, &m, &group("model.", model.net.params()))
}

pub fn load_flm(path: &Path) -> Result<(NetDenoiser, Manifest)> {
    let (m, tensors) = read_checkpoint(path)?;
    if m.kind != ArtifactKind::Flm {
        return Err(Error::Checkpoint("not a denoiser checkpoint".into()));
    }
    let net = DenoiserNet::from_parameters(m.network.clone(), take_group(&tensors, "model.")?)?;
    Ok((NetDenoiser::new(net, m.parameterization), m))
}

/// Saves a flow map. Correction models need their frozen denoiser, which
/// must be the one the model was built around.
pub fn save_flowmap(path: &Path, model: &FlowMapModel, teacher: Option<&NetDenoiser>, manifest: &Manifest) -> Result<()> {
    let mut m = manifest.clone();
    m.kind = ArtifactKind::FlowMap;
    m.network = model.net().config().clone();
    m.flowmap_kind = Some(model.kind());
    let mut tensors = group("model.", model.net().params());
    match (model.kind(), teacher) {
        (FlowMapKind::SingleModel, _) => m.teacher_network = None,
        (_, Some(t)) => {
            use crate::denoiser_net::Denoiser;
            if t.fingerprint() != model.frozen_fingerprint() {
                return Err(Error::Checkpoint("given denoiser is not the model's frozen denoiser".into()));
            }
            m.teacher_network = Some(t.net.config().clone());
            m.parameterization = t.parameterization;
            tensors.extend(group("teacher.", t.net.params()));
        }
        (_, None) => return Err(Error::Checkpoint("correction models are saved with their denoiser".into())),
    }
    write_checkpoint(path, &m, &tensors)
}

pub fn load_flowmap(path: &Path) -> Result<(FlowMapModel, Manifest)> {
    let (m, tensors) = read_checkpoint(path)?;
    if m.kind != ArtifactKind::FlowMap {
        return Err(Error::Checkpoint("not a flow-map checkpoint".into()));
    }
    let kind = m.flowmap_kind.ok_or_else(|| Error::Checkpoint("flow-map kind missing".into()))?;
    let net = DenoiserNet::from_parameters(m.network.clone(), take_group(&tensors, "model.")?)?;
    let model = match kind {
        FlowMapKind::SingleModel => FlowMapModel::single(net)?,
        _ => {
            let cfg = m.teacher_network.clone().ok_or_else(|| Error::Checkpoint("denoiser config missing".into()))?;
            let tnet = DenoiserNet::from_parameters(cfg, take_group(&tensors, "teacher.")?)?;
            FlowMapModel::correction(kind, Arc::new(NetDenoiser::new(tnet, m.parameterization)), net)?
        }
    };
    Ok((model, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_len: 2,
            vocab_size: 4,
            time_embed_dim: 4,
            ..NetworkConfig::default()
        }
    }

    fn flm(precision: Precision) -> NetDenoiser {
        let mut net = DenoiserNet::init(&mut SeededRng::new(1), small()).unwrap();
        net.params_mut().round_to(precision);
        NetDenoiser::new(net, Parameterization::Denoiser)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for dtype in [Precision::F32, Precision::F64] {
            let model = flm(Precision::F32);
            let p1 = dir.path().join("a.ckpt");
            let p2 = dir.path().join("b.ckpt");
            let m = Manifest::flm(&model, dtype).with_config_hash("abc");
            save_flm(&p1, &model, &m).unwrap();
            let (back, m2) = load_flm(&p1).unwrap();
            assert_eq!(back.net.params(), model.net.params());
            save_flm(&p2, &back, &m2).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn f32_never_narrows_silently() {
        let dir = tempfile::tempdir().unwrap();
        let model = flm(Precision::F64);
        let m = Manifest::flm(&model, Precision::F32);
        let err = save_flm(&dir.path().join("x.ckpt"), &model, &m).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn truncation_and_magic_are_rejected() {
        let model = flm(Precision::F64);
        let bytes = encode(&Manifest::flm(&model, Precision::F64), &group("model.", model.net.params())).unwrap();
        assert!(decode(&bytes).is_ok());
        for cut in [3, 12, 40, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn flowmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = flm(Precision::F64);
        let model = FlowMapModel::correction_from_flm(FlowMapKind::LogitCorrection, &f).unwrap();
        let p = dir.path().join("fm.ckpt");
        let m = Manifest::flm(&f, Precision::F64);
        assert!(save_flowmap(&p, &model, None, &m).is_err());
        save_flowmap(&p, &model, Some(&f), &m).unwrap();
        let (back, man) = load_flowmap(&p).unwrap();
        assert_eq!(man.flowmap_kind, Some(FlowMapKind::LogitCorrection));
        assert_eq!(back.fingerprint(), model.fingerprint());
        let single = FlowMapModel::single_from_flm(&f).unwrap();
        save_flowmap(&p, &single, None, &m).unwrap();
        assert_eq!(load_flowmap(&p).unwrap().0.kind(), FlowMapKind::SingleModel);
        assert!(load_flm(&p).is_err());
    }
}
