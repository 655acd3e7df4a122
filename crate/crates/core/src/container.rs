//! Portable file container shared by `.cnnmod`, `.cnnds` and `.cnnmodule`.
//!
//! ```text
//! CNNMOD                      magic line
//! version = 1                 UTF-8 `key = value` lines
//! layer.0.kind = conv2d
//! blob.layer.0.kernel = 0 3456   byte offset and length inside the blob
//! end
//! <blob>                      little-endian payloads, in header order
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, LayerInput, LayerKind, LayerSpec, ModelGraph, Split};
use crate::tensor::{ConvParams, Padding, PoolMode, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: &str = "CNNMOD";
pub const DATASET_MAGIC: &str = "CNNDS";
const END: &str = "end";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    magic: String,
    header: Vec<(String, String)>,
    blob: Vec<u8>,
}

impl Container {
    pub fn new(magic: &str) -> Self {
        let mut c = Container { magic: magic.to_string(), ..Default::default() };
        c.set("version", FORMAT_VERSION);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(['\n', '=']) && !value.contains('\n'));
        self.header.push((key.to_string(), value));
    }

    fn put_bytes(&mut self, name: &str, bytes: &[u8]) {
        let offset = self.blob.len();
        self.blob.extend_from_slice(bytes);
        self.set(&format!("blob.{name}"), format!("{offset} {}", bytes.len()));
    }

    pub fn put_f32s(&mut self, name: &str, values: &[f64]) {
        let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        self.put_bytes(name, &bytes);
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        let bytes: Vec<u8> = values.iter().flat_map(|&v| v.to_le_bytes()).collect();
        self.put_bytes(name, &bytes);
    }

    pub fn put_u32s(&mut self, name: &str, values: &[usize]) {
        let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as u32).to_le_bytes()).collect();
        self.put_bytes(name, &bytes);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.blob.len() + 64 * self.header.len());
        out.extend_from_slice(self.magic.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.header {
            out.extend_from_slice(format!("{k} = {v}\n").as_bytes());
        }
        out.extend_from_slice(END.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn decode(bytes: &[u8], magic: &str) -> Result<Self> {
        let mut lines = Vec::new();
        let mut pos = 0;
        let mut saw_end = false;
        while pos < bytes.len() {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Parse("header is not terminated".into()))?;
            let line =
                std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| Error::Parse("header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == END {
                saw_end = true;
                break;
            }
            lines.push(line);
        }
        if !saw_end {
            return Err(Error::Parse("missing header terminator".into()));
        }
        let mut lines = lines.into_iter();
        match lines.next() {
            Some(m) if m == magic => {}
            other => return Err(Error::Parse(format!("expected magic {magic:?}, found {other:?}"))),
        }
        let mut header = Vec::new();
        for line in lines {
            let (k, v) =
                line.split_once(" = ").ok_or_else(|| Error::Parse(format!("malformed header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let c = Container { magic: magic.to_string(), header, blob: bytes[pos..].to_vec() };
        let version = c.get("version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::VersionMismatch { found: version.to_string(), expected: FORMAT_VERSION });
        }
        Ok(c)
    }

    pub fn find(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.find(key).ok_or_else(|| Error::Parse(format!("missing header key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Parse(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        parse_usizes(self.get(key)?)
    }

    /// Header entries in file order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.header.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn bytes(&self, name: &str, width: usize) -> Result<&[u8]> {
        let key = format!("blob.{name}");
        let span = parse_usizes(self.get(&key)?)?;
        let &[offset, len] = &span[..] else {
            return Err(Error::Parse(format!("{key} must be `offset length`")));
        };
        if len % width != 0 || offset.checked_add(len).is_none_or(|end| end > self.blob.len()) {
            return Err(Error::Parse(format!("{key} span {offset}+{len} is invalid")));
        }
        Ok(&self.blob[offset..offset + len])
    }

    pub fn f32s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.bytes(name, 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.bytes(name, 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.bytes(name, 4)?.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize).collect())
    }
}

pub(crate) fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("expected integer, found {t:?}"))))
        .collect()
}

pub(crate) fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_model(model: &ModelGraph) -> Vec<u8> {
    let mut c = Container::new(MODEL_MAGIC);
    c.set("name", model.name());
    c.set("input_shape", join(&model.input_shape()));
    c.set("class_count", model.class_count());
    c.set("layer_count", model.len());
    for (i, layer) in model.layers().iter().enumerate() {
        let key = |k: &str| format!("layer.{i}.{k}");
        c.set(&key("kind"), layer.kind.name());
        c.set(&key("inputs"), join(&layer.inputs));
        c.set(&key("output_shape"), join(model.output_shape(i)));
        match &layer.kind {
            LayerKind::Conv2D(p) => {
                c.set(&key("kernel_shape"), join(p.kernel.shape()));
                c.set(&key("stride"), p.stride);
                c.set(&key("padding"), p.padding.as_str());
                c.put_f32s(&key("kernel"), p.kernel.data());
                c.put_f32s(&key("bias"), p.bias.data());
            }
            LayerKind::Dense { weights, bias } => {
                c.set(&key("weight_shape"), join(weights.shape()));
                c.put_f32s(&key("weights"), weights.data());
                c.put_f32s(&key("bias"), bias.data());
            }
            LayerKind::Pool { size, .. } => c.set(&key("pool_size"), size),
            LayerKind::Flatten | LayerKind::Add | LayerKind::ReLU | LayerKind::Softmax => {}
        }
    }
    c.encode()
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    let c = Container::decode(bytes, MODEL_MAGIC)?;
    let input_shape: [usize; 3] = c
        .parse_list("input_shape")?
        .try_into()
        .map_err(|_| Error::Parse("input_shape must have three extents".into()))?;
    let count: usize = c.parse("layer_count")?;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let key = |k: &str| format!("layer.{i}.{k}");
        let inputs = c
            .get(&key("inputs"))?
            .split_whitespace()
            .map(|t| match t {
                "input" => Ok(LayerInput::Model),
                n => n.parse().map(LayerInput::Layer).map_err(|_| Error::Parse(format!("bad input reference {n:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let kind = match c.get(&key("kind"))? {
            "conv2d" => {
                let kernel = Tensor::new(c.parse_list(&key("kernel_shape"))?, c.f32s(&key("kernel"))?)?;
                let bias = Tensor::vector(c.f32s(&key("bias"))?)?;
                LayerKind::Conv2D(ConvParams::new(
                    kernel,
                    bias,
                    c.parse(&key("stride"))?,
                    c.get(&key("padding"))?.parse::<Padding>()?,
                )?)
            }
            "dense" => LayerKind::Dense {
                weights: Tensor::new(c.parse_list(&key("weight_shape"))?, c.f32s(&key("weights"))?)?,
                bias: Tensor::vector(c.f32s(&key("bias"))?)?,
            },
            "flatten" => LayerKind::Flatten,
            "maxpool" => LayerKind::Pool { size: c.parse(&key("pool_size"))?, mode: PoolMode::Max },
            "avgpool" => LayerKind::Pool { size: c.parse(&key("pool_size"))?, mode: PoolMode::Avg },
            "add" => LayerKind::Add,
            "relu" => LayerKind::ReLU,
            "softmax" => LayerKind::Softmax,
            other => return Err(Error::Parse(format!("unknown layer kind {other:?}"))),
        };
        layers.push(LayerSpec::new(kind, inputs));
    }
    let model = ModelGraph::new(c.get("name")?, input_shape, layers)?;
    for i in 0..count {
        let declared = c.parse_list(&format!("layer.{i}.output_shape"))?;
        if declared != model.output_shape(i) {
            return Err(Error::Invariant(format!(
                "layer {i} declares output {declared:?}, computed {:?}",
                model.output_shape(i)
            )));
        }
    }
    let classes: usize = c.parse("class_count")?;
    if classes != model.class_count() {
        return Err(Error::Invariant(format!("class_count {classes} but head has {}", model.class_count())));
    }
    Ok(model)
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    decode_model(&read_file(path)?)
}

pub fn encode_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let mut c = Container::new(DATASET_MAGIC);
    c.set("name", ds.name());
    c.set("split", ds.split().as_str());
    c.set("class_count", ds.class_count());
    c.set("count", ds.len());
    c.set("image_shape", join(&ds.image_shape()));
    let pixels: Vec<f64> = ds.images().iter().flat_map(|t| t.data().iter().copied()).collect();
    c.put_f32s("images", &pixels);
    c.put_u32s("labels", ds.labels());
    c.encode()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let c = Container::decode(bytes, DATASET_MAGIC)?;
    let shape: [usize; 3] = c
        .parse_list("image_shape")?
        .try_into()
        .map_err(|_| Error::Parse("image_shape must have three extents".into()))?;
    let count: usize = c.parse("count")?;
    let labels = c.u32s("labels")?;
    let pixels = c.f32s("images")?;
    let per: usize = shape.iter().product();
    if labels.len() != count || pixels.len() != count * per {
        return Err(Error::Dataset(format!(
            "count {count} disagrees with {} labels / {} pixels",
            labels.len(),
            pixels.len()
        )));
    }
    let images = pixels
        .chunks_exact(per.max(1))
        .map(|px| Tensor::new(shape.to_vec(), px.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(
        c.get("name")?,
        c.get("split")?.parse::<Split>()?,
        c.parse("class_count")?,
        shape,
        images,
        labels,
    )
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    decode_dataset(&read_file(path)?)
}
