//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KOAL" | version: u32 | kind: u8 | first_layer: u32
//! spec_len: u32 | spec: JSON bytes
//! layer_count: u32 | frozen: u8 per layer
//! value_count: u64 | values: f64 per parameter, weights then bias, layer order
//! ```
//!
//! A full checkpoint has `first_layer == 0`; an adapter payload starts at the
//! spec's `adapter_start` and carries only those layers.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{KoalaError, Result};
use crate::models::{Layer, Model, ModelSpec};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"KOAL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Full = 0,
    Adapter = 1,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: PayloadKind,
    pub spec: ModelSpec,
    pub first_layer: usize,
    pub frozen: Vec<bool>,
    /// Raw parameter values of layers `first_layer..`.
    pub values: Vec<f64>,
}

fn encode<S: Scalar>(model: &Model<S>, kind: PayloadKind) -> Vec<u8> {
    let spec = model.spec();
    let first = match kind {
        PayloadKind::Full => 0,
        PayloadKind::Adapter => spec.adapter_start,
    };
    let spec_json = serde_json::to_vec(spec).expect("spec serializes");
    let values: Vec<f64> = model.layers()[first..]
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(l.bias.data()))
        .map(|x| x.as_f64())
        .collect();

    let mut out = Vec::with_capacity(32 + spec_json.len() + values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(first as u32).to_le_bytes());
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    out.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());
    out.extend(model.frozen_mask().iter().map(|&f| f as u8));
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serializes every layer.
pub fn encode_model<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    encode(model, PayloadKind::Full)
}

/// Serializes only the adapter layers.
pub fn encode_adapter<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    encode(model, PayloadKind::Adapter)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            KoalaError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(KoalaError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(KoalaError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let kind = match r.u8()? {
        0 => PayloadKind::Full,
        1 => PayloadKind::Adapter,
        k => return Err(KoalaError::Checkpoint(format!("unknown payload kind {k}"))),
    };
    let first_layer = r.u32()? as usize;
    let spec_len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| KoalaError::Checkpoint(format!("spec: {e}")))?;
    spec.validate()?;
    let layer_count = r.u32()? as usize;
    if layer_count != spec.layers.len() {
        return Err(KoalaError::Checkpoint("frozen mask length".into()));
    }
    let frozen = r.take(layer_count)?.iter().map(|&b| b != 0).collect();
    let count = r.u64()? as usize;
    let expected: u64 = spec.layers.get(first_layer..).map_or(u64::MAX, |ls| {
        ls.iter().map(|l| l.params()).sum()
    });
    if count as u64 != expected {
        return Err(KoalaError::Checkpoint(format!(
            "expected {expected} values, header says {count}"
        )));
    }
    let values = r
        .take(count * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if r.pos != bytes.len() {
        return Err(KoalaError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        kind,
        spec,
        first_layer,
        frozen,
        values,
    })
}

impl Checkpoint {
    fn layers<S: Scalar>(&self) -> Vec<Layer<S>> {
        let mut it = self.values.iter().map(|&v| S::of(v));
        self.spec.layers[self.first_layer..]
            .iter()
            .map(|l| {
                let w: Vec<S> = it.by_ref().take(l.in_dim * l.out_dim).collect();
                let b: Vec<S> = it.by_ref().take(l.out_dim).collect();
                Layer {
                    weight: Tensor::new(vec![l.in_dim, l.out_dim], w).expect("counted"),
                    bias: Tensor::new(vec![l.out_dim], b).expect("counted"),
                }
            })
            .collect()
    }

    pub fn into_model<S: Scalar>(self) -> Result<Model<S>> {
        if self.kind != PayloadKind::Full {
            return Err(KoalaError::Checkpoint(
                "adapter payload cannot build a model".into(),
            ));
        }
        let layers = self.layers();
        Model::from_parts(self.spec, layers, self.frozen)
    }

    /// Overwrites the carried layers of `model`; its spec must match.
    pub fn apply_to<S: Scalar>(&self, model: &mut Model<S>) -> Result<()> {
        if model.spec() != &self.spec {
            return Err(KoalaError::SpecMismatch(
                "checkpoint spec differs from target model".into(),
            ));
        }
        for (dst, src) in model.layers_mut()[self.first_layer..]
            .iter_mut()
            .zip(self.layers())
        {
            *dst = src;
        }
        Ok(())
    }
}

pub fn decode_model<S: Scalar>(bytes: &[u8]) -> Result<Model<S>> {
    decode(bytes)?.into_model()
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<Model<S>> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, zoo};
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m: Model<f64> = init_model(&zoo::homo(8, 3), 1).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..4], b"KOAL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 0);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.values.len() as u64, m.spec().total_params());
    }

    #[test]
    fn adapter_payload_applies() {
        let mut a: Model<f64> = init_model(&zoo::large(8, 3), 1).unwrap();
        a.freeze_backbone();
        let mut b = a.clone();
        b.reinit_adapter(99);
        let payload = encode_adapter(&b);
        let ck = decode(&payload).unwrap();
        assert_eq!(ck.kind, PayloadKind::Adapter);
        assert_eq!(ck.values.len() as u64, a.spec().adapter_params());
        assert!(ck.clone().into_model::<f64>().is_err());
        ck.apply_to(&mut a).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_input_rejected() {
        let m: Model<f64> = init_model(&zoo::homo(4, 2), 1).unwrap();
        let bytes = encode_model(&m);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.koal");
        let mut m: Model<f64> = init_model(&zoo::large(6, 2), 4).unwrap();
        m.freeze_backbone();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model::<f64>(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..12, classes in 2usize..6) {
            let spec = ModelSpec::mlp(5, &[hidden], classes).unwrap();
            let mut m: Model<f64> = init_model(&spec, seed).unwrap();
            // exercise awkward bit patterns
            m.layers_mut()[0].bias.data_mut()[0] = f64::MIN_POSITIVE / 3.0;
            let back: Model<f64> = decode_model(&encode_model(&m)).unwrap();
            let bits = |m: &Model<f64>| m.flat_params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&m));
            prop_assert_eq!(back.frozen_mask(), m.frozen_mask());
        }
    }
}
