//! `E2V1` checkpoint container. All integers little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::adam::AdamState;
use super::network::{ModelWeights, NetworkConfig, SkipMode};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"E2V1";
const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub weights: ModelWeights,
    pub optimizer: Option<AdamState>,
}

fn config_entries(c: &NetworkConfig) -> [(&'static str, u32); 6] {
    [
        ("num_encoders", c.num_encoders as u32),
        ("num_residual", c.num_residual as u32),
        ("base_channels", c.base_channels as u32),
        ("skip_mode", matches!(c.skip, SkipMode::Concat) as u32),
        ("input_bins", c.input_bins as u32),
        ("unroll", c.unroll as u32),
    ]
}

fn put_blob(out: &mut Vec<u8>, kind: u8, key: &str, t: &Tensor4) {
    out.push(kind);
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(
    weights: &ModelWeights,
    config: &NetworkConfig,
    optimizer: Option<&AdamState>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let entries = config_entries(config);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (k, v) in entries {
        out.push(k.len() as u8);
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(optimizer.is_some() as u8);
    out.extend_from_slice(&optimizer.map_or(0, |o| o.step).to_le_bytes());
    let mut blobs: Vec<(u8, &String, &Tensor4)> = Vec::new();
    blobs.extend(weights.params.iter().map(|(k, t)| (KIND_PARAM, k, t)));
    blobs.extend(weights.buffers.iter().map(|(k, t)| (KIND_BUFFER, k, t)));
    if let Some(o) = optimizer {
        blobs.extend(o.m.iter().map(|(k, t)| (KIND_ADAM_M, k, t)));
        blobs.extend(o.v.iter().map(|(k, t)| (KIND_ADAM_V, k, t)));
    }
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (kind, key, t) in blobs {
        put_blob(&mut out, kind, key, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint body ends early"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint key is not UTF-8"))
    }
}

/// Parses a checkpoint. With `expected`, every config entry must agree and
/// the first disagreement is reported by key.
pub fn load_checkpoint(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::format(format!("checkpoint is {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("not an E2V1 checkpoint (bad magic)"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let mut cfg_map = BTreeMap::new();
    for _ in 0..r.u32()? {
        let n = r.u8()? as usize;
        let key = r.string(n)?;
        cfg_map.insert(key, r.u32()?);
    }
    let get = |k: &str| {
        cfg_map
            .get(k)
            .copied()
            .ok_or_else(|| Error::format(format!("checkpoint config lacks `{k}`")))
    };
    let config = NetworkConfig {
        num_encoders: get("num_encoders")? as usize,
        num_residual: get("num_residual")? as usize,
        base_channels: get("base_channels")? as usize,
        skip: if get("skip_mode")? == 1 { SkipMode::Concat } else { SkipMode::Sum },
        input_bins: get("input_bins")? as usize,
        unroll: get("unroll")? as usize,
    };
    if let Some(exp) = expected {
        for ((key, want), (_, have)) in config_entries(exp).into_iter().zip(config_entries(&config)) {
            if want != have {
                return Err(Error::ConfigMismatch {
                    key: key.to_string(),
                    expected: want.to_string(),
                    found: have.to_string(),
                });
            }
        }
    }
    let has_opt = r.u8()? != 0;
    let step = r.u64()?;
    let mut weights = ModelWeights {
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    let mut opt = AdamState {
        step,
        ..AdamState::default()
    };
    for _ in 0..r.u32()? {
        let kind = r.u8()?;
        let n = r.u16()? as usize;
        let key = r.string(n)?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor4::from_vec(shape, data)?;
        let map = match kind {
            KIND_PARAM => &mut weights.params,
            KIND_BUFFER => &mut weights.buffers,
            KIND_ADAM_M => &mut opt.m,
            KIND_ADAM_V => &mut opt.v,
            _ => return Err(Error::format(format!("unknown blob kind {kind}"))),
        };
        map.insert(key, t);
    }
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes after checkpoint blobs"));
    }
    weights.validate(&config)?;
    Ok(Checkpoint {
        config,
        weights,
        optimizer: has_opt.then_some(opt),
    })
}

pub fn write_checkpoint(
    path: &Path,
    weights: &ModelWeights,
    config: &NetworkConfig,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    std::fs::write(path, save_checkpoint(weights, config, optimizer))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<Checkpoint> {
    load_checkpoint(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            num_encoders: 2,
            num_residual: 1,
            base_channels: 2,
            skip: SkipMode::Concat,
            input_bins: 3,
            unroll: 4,
        }
    }

    #[test]
    fn round_trip() {
        let w = ModelWeights::init(&cfg(), 9).unwrap();
        let bytes = save_checkpoint(&w, &cfg(), None);
        let ck = load_checkpoint(&bytes, Some(&cfg())).unwrap();
        assert_eq!(ck.config, cfg());
        assert_eq!(ck.weights, w);
        assert!(ck.optimizer.is_none());
        assert_eq!(save_checkpoint(&ck.weights, &ck.config, None), bytes);
    }

    #[test]
    fn optimizer_round_trip() {
        let w = ModelWeights::init(&cfg(), 9).unwrap();
        let mut st = AdamState { step: 7, ..Default::default() };
        for (k, t) in &w.params {
            st.m.insert(k.clone(), Tensor4::filled(t.shape(), 0.25));
            st.v.insert(k.clone(), Tensor4::filled(t.shape(), 0.5));
        }
        let bytes = save_checkpoint(&w, &cfg(), Some(&st));
        assert_eq!(load_checkpoint(&bytes, None).unwrap().optimizer, Some(st));
    }

    #[test]
    fn truncation_fails_checksum() {
        let w = ModelWeights::init(&cfg(), 9).unwrap();
        let bytes = save_checkpoint(&w, &cfg(), None);
        let err = load_checkpoint(&bytes[..bytes.len() - 10], None).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(load_checkpoint(&flipped, None), Err(Error::Checksum { .. })));
    }

    #[test]
    fn mismatch_names_key() {
        let w = ModelWeights::init(&cfg(), 9).unwrap();
        let bytes = save_checkpoint(&w, &cfg(), None);
        let other = NetworkConfig { num_encoders: 3, ..cfg() };
        let err = load_checkpoint(&bytes, Some(&other)).unwrap_err();
        assert!(err.to_string().contains("num_encoders"), "{err}");
    }
}
