//! Versioned binary archive of a model: config, trainable flags and every
//! named tensor stored as little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{LayerId, ModelParams, NetConfig};
use crate::error::{Error, Result};
use crate::kv::{KvReader, KvWriter};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"UDAMACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Parse("length overflow".into()))?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Parse("invalid utf-8 in checkpoint".into()))
    }
}

pub fn to_bytes<T: Scalar>(p: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut w = KvWriter::new();
    p.cfg.write_kv(&mut w, "");
    put_bytes(&mut out, w.finish().as_bytes());
    let flags = p.trainable_map();
    out.extend_from_slice(&(flags.len() as u32).to_le_bytes());
    for (layer, &on) in flags {
        put_bytes(&mut out, layer.to_string().as_bytes());
        out.push(on as u8);
    }
    let slots = p.slots();
    out.extend_from_slice(&(slots.len() as u32).to_le_bytes());
    for s in slots {
        put_bytes(&mut out, s.name.as_bytes());
        out.extend_from_slice(&(s.data.len() as u64).to_le_bytes());
        for v in s.data {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    out
}

fn parse_layer(name: &str, n_rnn: usize) -> Result<LayerId> {
    let id = match name {
        "meta_norm" => LayerId::MetaNorm,
        "meta_dense" => LayerId::MetaDense,
        "predictor" => LayerId::Predictor,
        "coarse" => LayerId::Coarse,
        "fine" => LayerId::Fine,
        other => match other.strip_prefix("rnn").and_then(|i| i.parse::<usize>().ok()) {
            Some(i) if i < n_rnn => LayerId::Recurrent(i),
            _ => return Err(Error::Parse(format!("unknown layer `{other}` in checkpoint"))),
        },
    };
    Ok(id)
}

pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<ModelParams<T>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let mut r = KvReader::parse(&c.string()?)?;
    let cfg = NetConfig::read_kv(&mut r, "")?;
    r.finish()?;
    let mut p = ModelParams::<T>::init(&cfg, 0)?;
    let n_flags = c.u32()?;
    let mut flags = BTreeMap::new();
    for _ in 0..n_flags {
        let layer = parse_layer(&c.string()?, cfg.recurrent_layers)?;
        let on = c.take(1)?[0] != 0;
        flags.insert(layer, on);
    }
    p.set_trainable_map(flags)?;
    let n_tensors = c.u32()? as usize;
    let mut slots = p.slots_mut();
    if n_tensors != slots.len() {
        return Err(Error::Parse(format!("checkpoint has {n_tensors} tensors, model expects {}", slots.len())));
    }
    for slot in slots.iter_mut() {
        let name = c.string()?;
        if name != slot.name {
            return Err(Error::Parse(format!("expected tensor `{}`, found `{name}`", slot.name)));
        }
        let len = c.u64()? as usize;
        if len != slot.data.len() {
            return Err(Error::Parse(format!("tensor `{name}` has {len} values, expected {}", slot.data.len())));
        }
        for v in slot.data.iter_mut() {
            *v = T::of(f64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")));
        }
    }
    drop(slots);
    if c.pos != buf.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    Ok(p)
}

pub fn save<T: Scalar>(p: &ModelParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(p))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetConfig { recurrent_units: 4, meta_hidden: 6, disc_hidden: 3, ..NetConfig::default() };
        let mut p = init_params::<f32>(&cfg, 5).unwrap().freeze_plan();
        p.meta_norm.running_var[0] = 0.123_456_7;
        let q: ModelParams<f32> = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(p, q);
        let p64 = init_params::<f64>(&cfg, 5).unwrap();
        let q64: ModelParams<f64> = from_bytes(&to_bytes(&p64)).unwrap();
        assert_eq!(p64, q64);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let p = init_params::<f64>(&NetConfig { recurrent_units: 2, meta_hidden: 2, ..NetConfig::default() }, 1).unwrap();
        let bytes = to_bytes(&p);
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f64>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes::<f64>(&extra).is_err());
    }
}
