//! On-disk artifacts: a directory holding `manifest.json` plus one raw
//! little-endian `f64` blob per tensor field, named after the field.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quantizer::{BorderFunction, BorderVariant, QuantParams};
use crate::tensor::Tensor;

use super::{Block, Geometry, Layer, LayerQuant, LayerSpec, LinearLayer, Model};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Model,
    SampleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<T> {
    format_version: u32,
    kind: ArtifactKind,
    blobs: Vec<BlobMeta>,
    body: T,
}

#[derive(Default)]
struct BlobWriter {
    blobs: Vec<(BlobMeta, Vec<u8>)>,
}

impl BlobWriter {
    fn put(&mut self, name: String, shape: Vec<usize>, data: &[f64]) -> String {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let meta = BlobMeta {
            name: name.clone(),
            shape,
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        self.blobs.push((meta, bytes));
        name
    }

    fn put_vec(&mut self, name: String, data: &[f64]) -> String {
        self.put(name, vec![data.len()], data)
    }

    fn finish<T: Serialize>(self, dir: &Path, kind: ArtifactKind, body: T) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut metas = Vec::with_capacity(self.blobs.len());
        for (meta, bytes) in self.blobs {
            fs::write(dir.join(blob_file(&meta.name)), bytes)?;
            metas.push(meta);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind,
            blobs: metas,
            body,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

struct BlobReader<'a> {
    dir: &'a Path,
    metas: Vec<BlobMeta>,
}

impl BlobReader<'_> {
    fn get(&self, name: &str) -> Result<Tensor> {
        let meta = self
            .metas
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Malformed(format!("manifest lists no blob `{name}`")))?;
        let bytes = fs::read(self.dir.join(blob_file(name)))?;
        let count: usize = meta.shape.iter().product();
        if meta.bytes != count * 8 {
            return Err(Error::Malformed(format!(
                "blob `{name}` declares {} bytes for shape {:?}",
                meta.bytes, meta.shape
            )));
        }
        if bytes.len() != meta.bytes {
            return Err(Error::TruncatedBlob {
                name: name.to_string(),
                expected: meta.bytes,
                found: bytes.len(),
            });
        }
        if hex::encode(Sha256::digest(&bytes)) != meta.sha256 {
            return Err(Error::ChecksumMismatch(name.to_string()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(meta.shape.clone(), data)
    }

    fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.into_data())
    }
}

fn blob_file(name: &str) -> String {
    format!("{name}.bin")
}

fn read_manifest<T: DeserializeOwned>(dir: &Path, kind: ArtifactKind) -> Result<(T, Vec<BlobMeta>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Malformed("manifest has no format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: u32::try_from(found).unwrap_or(u32::MAX),
        });
    }
    let manifest: Manifest<T> = serde_json::from_value(value)?;
    if manifest.kind != kind {
        return Err(Error::Malformed(format!(
            "expected a {kind:?} artifact, found {:?}",
            manifest.kind
        )));
    }
    Ok((manifest.body, manifest.blobs))
}

#[derive(Debug, Serialize, Deserialize)]
struct BorderDoc {
    variant: BorderVariant,
    b0: String,
    b1: String,
    b2: Option<String>,
    bound_scale: f64,
    bounded: bool,
    fusion: bool,
    channel_size: usize,
    rows: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantDoc {
    weight_bits: u32,
    weight_steps: String,
    weight_levels: String,
    bias_q: Option<String>,
    activation: QuantParams,
    border: BorderDoc,
    baseline_act_step: f64,
    baseline_weight_steps: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDoc {
    Linear {
        geometry: Geometry,
        weight: String,
        bias: Option<String>,
        quant: Option<QuantDoc>,
    },
    Relu,
    ResidualAdd {
        from: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedLayerDoc {
    name: String,
    #[serde(flatten)]
    layer: LayerDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    input_shape: Vec<usize>,
    blocks: Vec<Block>,
    layers: Vec<NamedLayerDoc>,
}

fn quant_doc(w: &mut BlobWriter, prefix: &str, q: &LayerQuant, shape: &[usize]) -> QuantDoc {
    let levels: Vec<f64> = q.weight_levels.iter().map(|&l| l as f64).collect();
    let bf = &q.border;
    QuantDoc {
        weight_bits: q.weight_bits,
        weight_steps: w.put_vec(format!("{prefix}.weight_steps"), &q.weight_steps),
        weight_levels: w.put(format!("{prefix}.weight_levels"), shape.to_vec(), &levels),
        bias_q: q
            .bias_q
            .as_ref()
            .map(|b| w.put_vec(format!("{prefix}.bias_q"), b)),
        activation: q.activation,
        border: BorderDoc {
            variant: bf.variant,
            b0: w.put_vec(format!("{prefix}.border.b0"), &bf.b0),
            b1: w.put_vec(format!("{prefix}.border.b1"), &bf.b1),
            b2: (!bf.b2.is_empty()).then(|| w.put_vec(format!("{prefix}.border.b2"), &bf.b2)),
            bound_scale: bf.bound_scale,
            bounded: bf.bounded,
            fusion: bf.fusion,
            channel_size: bf.channel_size,
            rows: bf.rows,
        },
        baseline_act_step: q.baseline_act_step,
        baseline_weight_steps: w.put_vec(
            format!("{prefix}.baseline_weight_steps"),
            &q.baseline_weight_steps,
        ),
    }
}

fn level_from_f64(v: f64, name: &str) -> Result<i64> {
    if v.fract() != 0.0 || v.abs() > 2f64.powi(53) {
        return Err(Error::Malformed(format!("non-integer level {v} in `{name}`")));
    }
    Ok(v as i64)
}

fn quant_from_doc(r: &BlobReader<'_>, d: &QuantDoc) -> Result<LayerQuant> {
    let b = &d.border;
    Ok(LayerQuant {
        weight_bits: d.weight_bits,
        weight_steps: r.get_vec(&d.weight_steps)?,
        weight_levels: r
            .get_vec(&d.weight_levels)?
            .into_iter()
            .map(|v| level_from_f64(v, &d.weight_levels))
            .collect::<Result<_>>()?,
        bias_q: d.bias_q.as_deref().map(|n| r.get_vec(n)).transpose()?,
        activation: d.activation,
        border: BorderFunction {
            variant: b.variant,
            b0: r.get_vec(&b.b0)?,
            b1: r.get_vec(&b.b1)?,
            b2: b.b2.as_deref().map(|n| r.get_vec(n)).transpose()?.unwrap_or_default(),
            bound_scale: b.bound_scale,
            bounded: b.bounded,
            fusion: b.fusion,
            channel_size: b.channel_size,
            rows: b.rows,
        },
        baseline_act_step: d.baseline_act_step,
        baseline_weight_steps: r.get_vec(&d.baseline_weight_steps)?,
    })
}

pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    model.validate()?;
    let mut w = BlobWriter::default();
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let prefix = format!("layers.{i}");
            let layer = match &spec.layer {
                Layer::Linear(l) => LayerDoc::Linear {
                    geometry: l.geometry,
                    weight: w.put(
                        format!("{prefix}.weight"),
                        l.weight.shape().to_vec(),
                        l.weight.data(),
                    ),
                    bias: l.bias.as_ref().map(|b| w.put_vec(format!("{prefix}.bias"), b)),
                    quant: l
                        .quant
                        .as_ref()
                        .map(|q| quant_doc(&mut w, &format!("{prefix}.quant"), q, l.weight.shape())),
                },
                Layer::Relu => LayerDoc::Relu,
                Layer::ResidualAdd { from } => LayerDoc::ResidualAdd { from: *from },
            };
            NamedLayerDoc {
                name: spec.name.clone(),
                layer,
            }
        })
        .collect();
    let doc = ModelDoc {
        input_shape: model.input_shape.clone(),
        blocks: model.blocks.clone(),
        layers,
    };
    w.finish(dir, ArtifactKind::Model, doc)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let (doc, metas): (ModelDoc, _) = read_manifest(dir, ArtifactKind::Model)?;
    let r = BlobReader { dir, metas };
    let layers = doc
        .layers
        .iter()
        .map(|named| {
            let layer = match &named.layer {
                LayerDoc::Linear {
                    geometry,
                    weight,
                    bias,
                    quant,
                } => Layer::Linear(LinearLayer {
                    geometry: *geometry,
                    weight: r.get(weight)?,
                    bias: bias.as_deref().map(|n| r.get_vec(n)).transpose()?,
                    quant: quant.as_ref().map(|q| quant_from_doc(&r, q)).transpose()?,
                }),
                LayerDoc::Relu => Layer::Relu,
                LayerDoc::ResidualAdd { from } => Layer::ResidualAdd { from: *from },
            };
            Ok(LayerSpec {
                name: named.name.clone(),
                layer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(doc.input_shape, layers, doc.blocks)
}

/// Calibration or evaluation inputs, `[N, ...]`, with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
    pub seed: u64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleDoc {
    samples: String,
    labels: Option<String>,
    seed: u64,
}

pub fn save_samples(set: &SampleSet, dir: &Path) -> Result<()> {
    if let Some(labels) = &set.labels {
        if labels.len() != set.len() {
            return Err(Error::LengthMismatch {
                expected: set.len(),
                actual: labels.len(),
            });
        }
    }
    let mut w = BlobWriter::default();
    let doc = SampleDoc {
        samples: w.put(
            "samples".into(),
            set.samples.shape().to_vec(),
            set.samples.data(),
        ),
        labels: set.labels.as_ref().map(|l| {
            let v: Vec<f64> = l.iter().map(|&c| c as f64).collect();
            w.put_vec("labels".into(), &v)
        }),
        seed: set.seed,
    };
    w.finish(dir, ArtifactKind::SampleSet, doc)
}

pub fn load_samples(dir: &Path) -> Result<SampleSet> {
    let (doc, metas): (SampleDoc, _) = read_manifest(dir, ArtifactKind::SampleSet)?;
    let r = BlobReader { dir, metas };
    let samples = r.get(&doc.samples)?;
    let labels = doc
        .labels
        .as_deref()
        .map(|n| {
            r.get_vec(n)?
                .into_iter()
                .map(|v| level_from_f64(v, n).map(|l| l as usize))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let set = SampleSet {
        samples,
        labels,
        seed: doc.seed,
    };
    if set.samples.rank() < 2 {
        return Err(Error::Malformed("samples must be a batch".into()));
    }
    if set.labels.as_ref().is_some_and(|l| l.len() != set.len()) {
        return Err(Error::Malformed("label count differs from sample count".into()));
    }
    Ok(set)
}

/// Writes any serializable report as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
