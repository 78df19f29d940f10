//! Binary checkpoint format.
//!
//! ```text
//! "NLTM"                 4 bytes magic
//! version                u32 LE (= 1)
//! header_len             u64 LE
//! header                 UTF-8 `key = value` lines describing the model
//! per tensor, in layer order:
//!     data               f32 LE * element count
//!     crc32              u32 LE of the data bytes
//! ```
//!
//! Weights are stored at 32-bit precision; `load(save(m))` reproduces `m`
//! rounded to `f32`, and `save(load(f))` reproduces `f` byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    Conv2d, DecomposedConv2d, DecomposedDense, Dense, InputNorm, LayerSpec, Model,
};
use crate::tensor::{ConvGeometry, Tensor};

pub const MAGIC: &[u8; 4] = b"NLTM";
pub const VERSION: u32 = 1;

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    if model.name.contains('\n') || model.name.trim() != model.name {
        return Err(Error::Checkpoint(
            "model name must be a single line without surrounding whitespace".into(),
        ));
    }
    let header = render_header(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for layer in &model.layers {
        for t in layer.params() {
            let start = out.len();
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
    }
    Ok(out)
}

fn render_header(model: &Model) -> String {
    let [c, h, w] = model.input_shape;
    let mut s = String::new();
    s.push_str(&format!("name = {}\n", model.name));
    s.push_str(&format!("input_shape = {c},{h},{w}\n"));
    s.push_str(&format!("num_classes = {}\n", model.num_classes));
    if let Some(norm) = &model.input_norm {
        s.push_str(&format!("norm_mean = {}\n", join_floats(&norm.mean)));
        s.push_str(&format!("norm_std = {}\n", join_floats(&norm.std)));
    }
    s.push_str(&format!("layers = {}\n", model.layers.len()));
    for (i, layer) in model.layers.iter().enumerate() {
        s.push_str(&format!("layer.{i} = {}\n", describe_layer(layer)));
    }
    s
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn geom_fields(g: &ConvGeometry) -> String {
    format!(
        "in={} out={} kh={} kw={} sh={} sw={} ph={} pw={}",
        g.in_ch, g.out_ch, g.kernel_h, g.kernel_w, g.stride_h, g.stride_w, g.pad_h, g.pad_w
    )
}

fn describe_layer(layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Conv2d(l) => format!("conv2d {}", geom_fields(&l.geom)),
        LayerSpec::Dense(l) => format!("dense in={} out={}", l.inputs, l.outputs),
        LayerSpec::DecomposedConv2d(l) => {
            format!("decomposed_conv2d {} rank={}", geom_fields(&l.geom), l.rank)
        }
        LayerSpec::DecomposedDense(l) => format!(
            "decomposed_dense in={} out={} rank={}",
            l.inputs, l.outputs, l.rank
        ),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::MaxPool2d { kernel, stride } => {
            format!("maxpool2d kernel={kernel} stride={stride}")
        }
        LayerSpec::Flatten => "flatten".into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .take(4)
        .ok_or_else(|| Error::Checkpoint("bad magic (file shorter than 4 bytes)".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let version = cur
        .take(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Checkpoint("truncated before version".into()))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, reader supports {VERSION}"
        )));
    }
    let header_len = cur
        .take(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Checkpoint("truncated before header length".into()))?;
    let header = usize::try_from(header_len)
        .ok()
        .and_then(|n| cur.take(n))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header = std::str::from_utf8(header)
        .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
    let skeleton = parse_header(header)?;

    let mut layers = Vec::with_capacity(skeleton.layers.len());
    for (i, mut layer) in skeleton.layers.into_iter().enumerate() {
        let shapes = layer.expected_param_shapes();
        let kind = layer.kind();
        for (t, shape) in layer.params_mut().into_iter().zip(shapes) {
            let n: usize = shape.iter().product();
            let blob = cur.take(n * 4).ok_or_else(|| {
                Error::Checkpoint(format!("layer {i} ({kind}): truncated parameter blob"))
            })?;
            let crc = cur
                .take(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("layer {i} ({kind}): truncated checksum"))
                })?;
            if crc32fast::hash(blob) != crc {
                return Err(Error::Checkpoint(format!(
                    "layer {i} ({kind}): checksum failure"
                )));
            }
            let data = blob
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            *t = Tensor::new(&shape, data)?;
        }
        layers.push(layer);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    let model = Model::new(skeleton.name, skeleton.input_shape, skeleton.num_classes, layers)?;
    match skeleton.norm {
        Some(norm) => model.with_input_norm(norm),
        None => Ok(model),
    }
}

struct Skeleton {
    name: String,
    input_shape: [usize; 3],
    num_classes: usize,
    norm: Option<InputNorm>,
    layers: Vec<LayerSpec>,
}

fn parse_header(header: &str) -> Result<Skeleton> {
    let mut name = None;
    let mut input_shape = None;
    let mut num_classes = None;
    let mut mean = None;
    let mut std = None;
    let mut n_layers = None;
    let mut layers = Vec::new();
    for (lineno, line) in header.lines().enumerate() {
        let bad = |m: &str| Error::Checkpoint(format!("header line {}: {m}", lineno + 1));
        let (key, value) = line.split_once(" = ").ok_or_else(|| bad("expected `key = value`"))?;
        match key {
            "name" => name = Some(value.to_string()),
            "input_shape" => {
                let dims = parse_list::<usize>(value).map_err(|_| bad("bad input_shape"))?;
                let dims: [usize; 3] = dims.try_into().map_err(|_| bad("input_shape needs 3 dims"))?;
                input_shape = Some(dims);
            }
            "num_classes" => num_classes = Some(value.parse().map_err(|_| bad("bad num_classes"))?),
            "norm_mean" => mean = Some(parse_list::<f64>(value).map_err(|_| bad("bad norm_mean"))?),
            "norm_std" => std = Some(parse_list::<f64>(value).map_err(|_| bad("bad norm_std"))?),
            "layers" => n_layers = Some(value.parse::<usize>().map_err(|_| bad("bad layer count"))?),
            k if k.starts_with("layer.") => {
                let idx: usize = k[6..].parse().map_err(|_| bad("bad layer index"))?;
                if idx != layers.len() {
                    return Err(bad("layers out of order"));
                }
                layers.push(parse_layer(value).map_err(|e| bad(&e))?);
            }
            _ => return Err(bad(&format!("unknown key `{key}`"))),
        }
    }
    let missing = |k: &str| Error::Checkpoint(format!("header missing `{k}`"));
    let n_layers = n_layers.ok_or_else(|| missing("layers"))?;
    if n_layers != layers.len() {
        return Err(Error::Checkpoint(format!(
            "header declares {n_layers} layers, describes {}",
            layers.len()
        )));
    }
    let norm = match (mean, std) {
        (Some(mean), Some(std)) => Some(InputNorm { mean, std }),
        (None, None) => None,
        _ => return Err(Error::Checkpoint("norm_mean and norm_std must appear together".into())),
    };
    Ok(Skeleton {
        name: name.ok_or_else(|| missing("name"))?,
        input_shape: input_shape.ok_or_else(|| missing("input_shape"))?,
        num_classes: num_classes.ok_or_else(|| missing("num_classes"))?,
        norm,
        layers,
    })
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, ()> {
    s.split(',').map(|p| p.trim().parse().map_err(|_| ())).collect()
}

fn parse_layer(desc: &str) -> std::result::Result<LayerSpec, String> {
    let mut parts = desc.split_whitespace();
    let kind = parts.next().ok_or("empty layer description")?;
    let mut fields = std::collections::BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("bad field `{p}`"))?;
        let v: usize = v.parse().map_err(|_| format!("bad value in `{p}`"))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("{kind}: missing `{k}`"));
    let geom = || -> std::result::Result<ConvGeometry, String> {
        Ok(ConvGeometry {
            in_ch: get("in")?,
            out_ch: get("out")?,
            kernel_h: get("kh")?,
            kernel_w: get("kw")?,
            stride_h: get("sh")?,
            stride_w: get("sw")?,
            pad_h: get("ph")?,
            pad_w: get("pw")?,
        })
    };
    // Placeholder tensors are overwritten with the blob contents.
    let z = |shape: &[usize]| Tensor::zeros(shape).map_err(|e| e.to_string());
    let layer = match kind {
        "conv2d" => {
            let g = geom()?;
            LayerSpec::Conv2d(Conv2d {
                geom: g,
                weight: z(&g.kernel_shape())?,
                bias: z(&[g.out_ch])?,
            })
        }
        "dense" => {
            let (i, o) = (get("in")?, get("out")?);
            LayerSpec::Dense(Dense {
                inputs: i,
                outputs: o,
                weight: z(&[i, o])?,
                bias: z(&[o])?,
            })
        }
        "decomposed_conv2d" => {
            let g = geom()?;
            let r = get("rank")?;
            LayerSpec::DecomposedConv2d(DecomposedConv2d {
                geom: g,
                rank: r,
                f1: z(&[r, 1, 1, g.kernel_w])?,
                f2: z(&[r, 1, g.kernel_h, 1])?,
                f3: z(&[r, g.in_ch, 1, 1])?,
                f4: z(&[g.out_ch, r, 1, 1])?,
                bias: z(&[g.out_ch])?,
            })
        }
        "decomposed_dense" => {
            let (i, o, r) = (get("in")?, get("out")?, get("rank")?);
            LayerSpec::DecomposedDense(DecomposedDense {
                inputs: i,
                outputs: o,
                rank: r,
                u: z(&[i, r])?,
                s: z(&[r])?,
                v: z(&[o, r])?,
                bias: z(&[o])?,
            })
        }
        "relu" => LayerSpec::Relu,
        "flatten" => LayerSpec::Flatten,
        "maxpool2d" => LayerSpec::MaxPool2d {
            kernel: get("kernel")?,
            stride: get("stride")?,
        },
        other => return Err(format!("unknown layer kind `{other}`")),
    };
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::reference_cnn;

    fn model() -> Model {
        reference_cnn([1, 12, 12], 3, 42)
            .unwrap()
            .with_input_norm(InputNorm {
                mean: vec![0.25],
                std: vec![0.1],
            })
            .unwrap()
    }

    fn rounded(m: &Model) -> Model {
        let mut m = m.clone();
        for t in m.params_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        m
    }

    #[test]
    fn roundtrip_is_exact_at_f32() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, rounded(&m));
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[0] = b'X';
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[4] = 2;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_blob_names_layer() {
        let bytes = to_bytes(&model()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated parameter blob"), "{msg}");
        assert!(msg.contains("layer 9 (dense)"), "{msg}");
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let mut bytes = to_bytes(&model()).unwrap();
        let n = bytes.len();
        bytes[n - 8] ^= 0x40;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
