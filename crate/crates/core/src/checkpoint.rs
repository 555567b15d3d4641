//! Versioned binary checkpoint container.
//!
//! Layout: the magic bytes `LTSFCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f64` data of every tensor in header order. The header
//! lists sections (`autoencoder`, `backbone`), each with its own metadata
//! and named tensor shapes, plus a SHA-256 of the tensor payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AeSpec, AutoEncoder};
use crate::backbones::{build_backbone, Backbone, BackboneSpec};
use crate::error::{Error, Result};
use crate::layers::LinearLayer;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::training::{Forecaster, RunKind};

pub const MAGIC: &[u8; 8] = b"LTSFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub tag: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: RunKind,
    /// Free-form run metadata (dataset, seed, horizon, losses).
    pub meta: serde_json::Value,
    pub sections: Vec<SectionHeader>,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: RunKind,
    pub meta: serde_json::Value,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, tag: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.tag == tag)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {tag:?} section")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut sections = Vec::new();
        for s in &self.sections {
            let mut tensors = Vec::new();
            for (name, t) in &s.tensors {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            sections.push(SectionHeader {
                tag: s.tag.clone(),
                meta: s.meta.clone(),
                tensors,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind,
            meta: self.meta.clone(),
            sections,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = 20usize
            .checked_add(usize::try_from(header_len).map_err(|_| bad("header length overflows".into()))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(format!("unreadable header: {e}")))?;
        let payload = &bytes[header_end..];
        let digest = hex(&Sha256::digest(payload));
        if digest != header.payload_sha256 {
            return Err(bad(format!(
                "payload checksum mismatch (header {}, data {digest}); file is truncated or corrupt",
                header.payload_sha256
            )));
        }
        let mut offset = 0;
        let mut sections = Vec::new();
        for s in header.sections {
            let mut tensors = Vec::new();
            for e in s.tensors {
                let n: usize = e.shape.iter().product();
                let end = offset + 8 * n;
                if end > payload.len() {
                    return Err(bad(format!("tensor {} runs past the end of the payload", e.name)));
                }
                let data = payload[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                offset = end;
                let t = Tensor::new(&e.shape, data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
                tensors.push((e.name, t));
            }
            sections.push(Section {
                tag: s.tag,
                meta: s.meta,
                tensors,
            });
        }
        if offset != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - offset)));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AeMeta {
    spec: AeSpec,
    frozen: bool,
    checksum: String,
}

pub fn ae_section(ae: &AutoEncoder) -> Result<Section> {
    let meta = AeMeta {
        spec: ae.spec,
        frozen: ae.frozen,
        checksum: ae.checksum(),
    };
    Ok(Section {
        tag: "autoencoder".into(),
        meta: serde_json::to_value(meta)?,
        tensors: ae.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
    })
}

pub fn ae_from_section(section: &Section) -> Result<AutoEncoder> {
    let meta: AeMeta = serde_json::from_value(section.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("autoencoder metadata: {e}")))?;
    let mut ae = AutoEncoder::new(meta.spec, &mut rng_for(0, 0))
        .map_err(|e| Error::Checkpoint(format!("autoencoder spec: {e}")))?;
    let layers: Vec<&mut LinearLayer> = ae
        .encoder
        .layers
        .iter_mut()
        .chain(ae.decoder.layers.iter_mut())
        .collect();
    assign(
        layers.into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]),
        &section.tensors,
        "autoencoder",
    )?;
    ae.frozen = meta.frozen;
    if ae.checksum() != meta.checksum {
        return Err(Error::Checkpoint("autoencoder parameter checksum mismatch".into()));
    }
    Ok(ae)
}

pub fn backbone_section(backbone: &dyn Backbone) -> Result<Section> {
    Ok(Section {
        tag: "backbone".into(),
        meta: serde_json::to_value(backbone.spec())?,
        tensors: backbone
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    })
}

pub fn backbone_from_section(section: &Section) -> Result<Box<dyn Backbone>> {
    let spec: BackboneSpec = serde_json::from_value(section.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("backbone metadata: {e}")))?;
    let mut b =
        build_backbone(spec, &mut rng_for(0, 0)).map_err(|e| Error::Checkpoint(format!("backbone spec: {e}")))?;
    let names: Vec<String> = b.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (i, (name, _)) in section.tensors.iter().enumerate() {
        if names.get(i) != Some(name) {
            return Err(Error::Checkpoint(format!("unexpected backbone tensor {name:?}")));
        }
    }
    assign(
        b.named_tensors_mut().into_iter().map(|(_, t)| t),
        &section.tensors,
        "backbone",
    )?;
    Ok(b)
}

fn assign<'a>(targets: impl Iterator<Item = &'a mut Tensor>, source: &[(String, Tensor)], what: &str) -> Result<()> {
    let mut count = 0;
    for (target, (name, t)) in targets.zip(source) {
        if target.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{what} tensor {name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                target.shape()
            )));
        }
        *target = t.clone();
        count += 1;
    }
    if count != source.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: stored {} tensors, model has {count}",
            source.len()
        )));
    }
    Ok(())
}

/// Checkpoint holding a pretrained autoencoder.
pub fn autoencoder_checkpoint(ae: &AutoEncoder, meta: serde_json::Value) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: RunKind::Autoencoder,
        meta,
        sections: vec![ae_section(ae)?],
    })
}

/// Checkpoint holding a trained forecaster.
pub fn forecaster_checkpoint(model: &Forecaster, meta: serde_json::Value) -> Result<Checkpoint> {
    let mut sections = Vec::new();
    if let Some(ae) = model.autoencoder() {
        sections.push(ae_section(ae)?);
    }
    sections.push(backbone_section(model.backbone())?);
    Ok(Checkpoint {
        kind: model.kind(),
        meta,
        sections,
    })
}

impl Checkpoint {
    pub fn autoencoder(&self) -> Result<AutoEncoder> {
        ae_from_section(self.section("autoencoder")?)
    }

    pub fn forecaster(&self) -> Result<Forecaster> {
        let backbone = backbone_from_section(self.section("backbone")?)?;
        match self.kind {
            RunKind::Latent => Ok(Forecaster::Latent {
                ae: self.autoencoder()?,
                backbone,
            }),
            RunKind::Baseline => Ok(Forecaster::Direct { backbone }),
            RunKind::Autoencoder => Err(Error::Checkpoint(
                "checkpoint holds an autoencoder, not a forecaster".into(),
            )),
        }
    }
}
