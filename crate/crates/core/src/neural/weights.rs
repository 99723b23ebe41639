//! Binary weights file.
//!
//! ```text
//! "EPVR" | version u8 | heads u32 | tensor count u32
//! per tensor: name len u16 | name utf-8 | dtype u8 (0 = f32) | ndim u8 | dims u32… | payload offset u64
//! payload: little-endian f32 values
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! All integers are little-endian. Offsets are relative to the payload start.

use std::collections::HashMap;
use std::path::Path;

use super::layers::{FeedForward, LayerNorm, Linear, Matrix, Mlp, MultiHeadAttention, TransformerLayer};
use super::{EncoderWeights, FusionWeights, NeuralError, PoseNetwork};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"EPVR";
pub const WEIGHTS_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

struct Tensor {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Default)]
struct Writer {
    tensors: Vec<Tensor>,
    heads: Option<usize>,
}

impl Writer {
    fn push(&mut self, name: String, dims: Vec<usize>, values: &[f64]) {
        self.tensors.push(Tensor { name, dims, values: values.to_vec() });
    }

    fn matrix(&mut self, name: String, m: &Matrix) {
        self.push(name, vec![m.rows(), m.cols()], m.data());
    }

    fn vector(&mut self, name: String, v: &[f64]) {
        self.push(name, vec![v.len()], v);
    }

    fn linear(&mut self, name: &str, l: &Linear) {
        self.matrix(format!("{name}.weight"), &l.weight);
        self.vector(format!("{name}.bias"), &l.bias);
    }

    fn norm(&mut self, name: &str, n: &LayerNorm) {
        self.vector(format!("{name}.gamma"), &n.gamma);
        self.vector(format!("{name}.beta"), &n.beta);
    }

    fn mlp(&mut self, name: &str, m: &Mlp) {
        self.linear(&format!("{name}.hidden"), &m.hidden);
        self.linear(&format!("{name}.output"), &m.output);
    }

    fn attention(&mut self, name: &str, a: &MultiHeadAttention) -> Result<(), NeuralError> {
        match self.heads {
            Some(h) if h != a.heads => {
                return Err(NeuralError::ShapeMismatch(format!(
                    "{name} has {} heads; the file format stores one head count ({h})",
                    a.heads
                )))
            }
            _ => self.heads = Some(a.heads),
        }
        self.linear(&format!("{name}.query"), &a.query);
        self.linear(&format!("{name}.key"), &a.key);
        self.linear(&format!("{name}.value"), &a.value);
        self.linear(&format!("{name}.output"), &a.output);
        Ok(())
    }

    fn feed_forward(&mut self, name: &str, f: &FeedForward) {
        self.norm(&format!("{name}.norm"), &f.norm);
        self.mlp(&format!("{name}.mlp"), &f.mlp);
    }

    fn layer(&mut self, name: &str, l: &TransformerLayer) -> Result<(), NeuralError> {
        self.norm(&format!("{name}.norm"), &l.norm);
        self.attention(&format!("{name}.attn"), &l.attention)?;
        self.feed_forward(&format!("{name}.ff"), &l.feed_forward);
        Ok(())
    }

    fn encoder(&mut self, prefix: &str, e: &EncoderWeights) -> Result<(), NeuralError> {
        self.linear(&format!("{prefix}.embed"), &e.embed);
        self.matrix(format!("{prefix}.positional"), &e.positional);
        for (i, l) in e.frame_layers.iter().enumerate() {
            self.layer(&format!("{prefix}.frame.{i}"), l)?;
        }
        self.mlp(&format!("{prefix}.summary"), &e.summary);
        self.matrix(format!("{prefix}.joint_embedding"), &e.joint_embedding);
        for (i, l) in e.joint_layers.iter().enumerate() {
            self.layer(&format!("{prefix}.joint.{i}"), l)?;
        }
        Ok(())
    }

    fn fusion(&mut self, f: &FusionWeights) -> Result<(), NeuralError> {
        self.norm("fusion.query_norm", &f.query_norm);
        self.norm("fusion.context_norm", &f.context_norm);
        self.attention("fusion.attn", &f.attention)?;
        self.feed_forward("fusion.ff", &f.feed_forward);
        self.mlp("fusion.decoder_global", &f.decoder_global);
        self.mlp("fusion.decoder_local", &f.decoder_local);
        Ok(())
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.push(WEIGHTS_VERSION);
        out.extend_from_slice(&(self.heads.unwrap_or(1) as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.values.len() as u64;
        }
        for t in &self.tensors {
            for &v in &t.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

/// Serializes the network. Values are stored as f32, so only networks whose
/// weights are f32-representable (as produced by the random initializer or
/// a previous load) round-trip exactly.
pub fn write_weights(net: &PoseNetwork) -> Result<Vec<u8>, NeuralError> {
    net.validate()?;
    let mut w = Writer::default();
    w.encoder("hmd", &net.hmd)?;
    w.encoder("keypoint", &net.keypoint)?;
    w.fusion(&net.fusion)?;
    Ok(w.finish())
}

pub fn save_weights(net: &PoseNetwork, path: impl AsRef<Path>) -> Result<(), NeuralError> {
    std::fs::write(path, write_weights(net)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NeuralError::ShapeMismatch("tensor directory overruns the file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, NeuralError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NeuralError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Store {
    tensors: HashMap<String, (Vec<usize>, Vec<f64>)>,
    heads: usize,
}

impl Store {
    fn take(&mut self, name: &str, ndim: usize) -> Result<(Vec<usize>, Vec<f64>), NeuralError> {
        let (dims, values) = self
            .tensors
            .remove(name)
            .ok_or_else(|| NeuralError::ShapeMismatch(format!("missing tensor {name}")))?;
        if dims.len() != ndim {
            return Err(NeuralError::ShapeMismatch(format!("{name} has {} dims, expected {ndim}", dims.len())));
        }
        Ok((dims, values))
    }

    fn matrix(&mut self, name: String) -> Result<Matrix, NeuralError> {
        let (dims, values) = self.take(&name, 2)?;
        Matrix::from_vec(dims[0], dims[1], values)
    }

    fn vector(&mut self, name: String) -> Result<Vec<f64>, NeuralError> {
        Ok(self.take(&name, 1)?.1)
    }

    fn linear(&mut self, name: &str) -> Result<Linear, NeuralError> {
        Linear::new(self.matrix(format!("{name}.weight"))?, self.vector(format!("{name}.bias"))?)
    }

    fn norm(&mut self, name: &str) -> Result<LayerNorm, NeuralError> {
        Ok(LayerNorm {
            gamma: self.vector(format!("{name}.gamma"))?,
            beta: self.vector(format!("{name}.beta"))?,
            eps: LayerNorm::EPS,
        })
    }

    fn mlp(&mut self, name: &str) -> Result<Mlp, NeuralError> {
        Ok(Mlp { hidden: self.linear(&format!("{name}.hidden"))?, output: self.linear(&format!("{name}.output"))? })
    }

    fn attention(&mut self, name: &str) -> Result<MultiHeadAttention, NeuralError> {
        Ok(MultiHeadAttention {
            heads: self.heads,
            query: self.linear(&format!("{name}.query"))?,
            key: self.linear(&format!("{name}.key"))?,
            value: self.linear(&format!("{name}.value"))?,
            output: self.linear(&format!("{name}.output"))?,
        })
    }

    fn feed_forward(&mut self, name: &str) -> Result<FeedForward, NeuralError> {
        Ok(FeedForward { norm: self.norm(&format!("{name}.norm"))?, mlp: self.mlp(&format!("{name}.mlp"))? })
    }

    fn layers(&mut self, name: &str) -> Result<Vec<TransformerLayer>, NeuralError> {
        let mut out = Vec::new();
        while self.tensors.contains_key(&format!("{name}.{}.norm.gamma", out.len())) {
            let p = format!("{name}.{}", out.len());
            out.push(TransformerLayer {
                norm: self.norm(&format!("{p}.norm"))?,
                attention: self.attention(&format!("{p}.attn"))?,
                feed_forward: self.feed_forward(&format!("{p}.ff"))?,
            });
        }
        Ok(out)
    }

    fn encoder(&mut self, prefix: &str) -> Result<EncoderWeights, NeuralError> {
        Ok(EncoderWeights {
            embed: self.linear(&format!("{prefix}.embed"))?,
            positional: self.matrix(format!("{prefix}.positional"))?,
            frame_layers: self.layers(&format!("{prefix}.frame"))?,
            summary: self.mlp(&format!("{prefix}.summary"))?,
            joint_embedding: self.matrix(format!("{prefix}.joint_embedding"))?,
            joint_layers: self.layers(&format!("{prefix}.joint"))?,
        })
    }

    fn fusion(&mut self) -> Result<FusionWeights, NeuralError> {
        Ok(FusionWeights {
            query_norm: self.norm("fusion.query_norm")?,
            context_norm: self.norm("fusion.context_norm")?,
            attention: self.attention("fusion.attn")?,
            feed_forward: self.feed_forward("fusion.ff")?,
            decoder_global: self.mlp("fusion.decoder_global")?,
            decoder_local: self.mlp("fusion.decoder_local")?,
        })
    }
}

pub fn read_weights(bytes: &[u8]) -> Result<PoseNetwork, NeuralError> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(NeuralError::BadMagic);
    }
    // magic + version + heads + count + crc
    if bytes.len() < 4 + 1 + 4 + 4 + 4 {
        return Err(NeuralError::ChecksumFailure);
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(NeuralError::ChecksumFailure);
    }
    let mut cur = Cursor { bytes: body, pos: 4 };
    let version = cur.u8()?;
    if version != WEIGHTS_VERSION {
        return Err(NeuralError::UnsupportedVersion(version));
    }
    let heads = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut directory = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| NeuralError::ShapeMismatch("tensor name is not utf-8".into()))?
            .to_owned();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(NeuralError::ShapeMismatch(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = cur.u8()? as usize;
        let dims = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let offset = cur.u64()?;
        directory.push((name, dims, offset));
    }
    let payload = &body[cur.pos..];
    let mut tensors = HashMap::with_capacity(directory.len());
    for (name, dims, offset) in directory {
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let range = n
            .and_then(|n| n.checked_mul(4))
            .and_then(|len| usize::try_from(offset).ok().map(|o| (o, len)))
            .and_then(|(o, len)| o.checked_add(len).map(|end| o..end))
            .filter(|r| r.end <= payload.len())
            .ok_or_else(|| NeuralError::ShapeMismatch(format!("{name}: payload out of range")))?;
        let values: Vec<f64> = payload[range]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::ShapeMismatch(format!("{name}: non-finite values")));
        }
        if tensors.insert(name.clone(), (dims, values)).is_some() {
            return Err(NeuralError::ShapeMismatch(format!("duplicate tensor {name}")));
        }
    }
    let mut store = Store { tensors, heads };
    let net = PoseNetwork {
        hmd: store.encoder("hmd")?,
        keypoint: store.encoder("keypoint")?,
        fusion: store.fusion()?,
    };
    if let Some(extra) = store.tensors.keys().next() {
        return Err(NeuralError::ShapeMismatch(format!("unexpected tensor {extra}")));
    }
    net.validate()?;
    Ok(net)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<PoseNetwork, NeuralError> {
    read_weights(&std::fs::read(path)?)
}
