//! Versioned little-endian binary checkpoints of a [`CompositeModel`].
//!
//! Layout: magic `GRAPCKPT`, `u32` version, length-prefixed config hash,
//! `u32` loss count, downstream loss tag, per-loss tags, then the backbone,
//! each head and the downstream head as MLP blocks. An MLP block is a
//! `u32` layer count followed by, per layer, an activation tag, `u32` rows,
//! `u32` cols, the weight and the bias as raw `f64` bits.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::loss::LossKind;
use crate::mlp::{Activation, Layer, Mlp};
use crate::model::CompositeModel;

const MAGIC: &[u8; 8] = b"GRAPCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) {
    put_u32(out, u32::try_from(v).expect("checkpoint dimension fits in u32"));
}

fn put_mlp(out: &mut Vec<u8>, mlp: &Mlp) {
    put_len(out, mlp.layers().len());
    for layer in mlp.layers() {
        out.push(layer.activation.tag());
        put_len(out, layer.weight.rows());
        put_len(out, layer.weight.cols());
        for v in layer.weight.as_slice().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

/// Serializes `model` together with the hash of the config that produced it.
pub fn to_bytes(model: &CompositeModel, config_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_len(&mut out, config_hash.len());
    out.extend_from_slice(config_hash.as_bytes());
    put_len(&mut out, model.num_losses());
    out.push(model.downstream_loss_kind.tag());
    out.extend(model.loss_kinds.iter().map(|k| k.tag()));
    put_mlp(&mut out, &model.backbone);
    for h in &model.heads {
        put_mlp(&mut out, h);
    }
    put_mlp(&mut out, &model.downstream_head);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect())
    }

    fn loss_kind(&mut self) -> Result<LossKind> {
        let t = self.u8()?;
        LossKind::from_tag(t).ok_or_else(|| Error::Checkpoint(format!("unknown loss tag {t}")))
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.u32()?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let t = self.u8()?;
            let act = Activation::from_tag(t).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {t}")))?;
            let rows = self.u32()?;
            let cols = self.u32()?;
            let weight = Mat::from_vec(rows, cols, self.f64s(rows * cols)?)?;
            let bias = self.f64s(rows)?;
            layers.push(Layer::new(weight, bias, act)?);
        }
        Mlp::new(layers)
    }
}

/// Inverse of [`to_bytes`]; returns the model and its config hash.
pub fn from_bytes(bytes: &[u8]) -> Result<(CompositeModel, String)> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash_len = r.u32()?;
    let hash = String::from_utf8(r.take(hash_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config hash is not UTF-8".into()))?;
    let k = r.u32()?;
    let down_kind = r.loss_kind()?;
    let kinds = (0..k).map(|_| r.loss_kind()).collect::<Result<Vec<_>>>()?;
    let backbone = r.mlp()?;
    let heads = (0..k).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
    let down = r.mlp()?;
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((CompositeModel::new(backbone, heads, down, kinds, down_kind)?, hash))
}

pub fn save(path: &Path, model: &CompositeModel, config_hash: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, config_hash))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CompositeModel, String)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
