//! Checkpoint file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "TFMW" | version u32 | config block | param count u32
//! per param: name_len u16 | name utf8 | rank u8 (=4) | dims u32×4 | f32 data
//! trailer: fnv1a-64 checksum of every preceding byte
//! ```
//!
//! Config block: down_blocks u32, layers_per_block u32, growth_rate u32,
//! first_conv_filters u32, up_conv_filters u32, dropout_rate f32,
//! preset u8 (0 = paper, 1 = desk). Writing then reading a checkpoint
//! reproduces the file byte for byte.

use super::{build, Model, ModelConfig, ModelError, Preset};
use crate::autograd::{Shape4, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TFMW";
const VERSION: u32 = 1;

type Result<T> = std::result::Result<T, ModelError>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serialize a model to bytes (checksum included).
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = model.config();
    out.extend_from_slice(&(c.down_blocks as u32).to_le_bytes());
    out.extend_from_slice(&(c.layers_per_block as u32).to_le_bytes());
    out.extend_from_slice(&(c.growth_rate as u32).to_le_bytes());
    out.extend_from_slice(&(c.first_conv_filters as u32).to_le_bytes());
    out.extend_from_slice(&(c.up_conv_filters as u32).to_le_bytes());
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    out.push(match c.preset {
        Preset::Paper => 0,
        Preset::Desk => 1,
    });
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(4);
        let s = p.value.shape();
        for d in [s.b, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Corrupt(format!(
                "unexpected end of checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Deserialize a model, verifying the checksum and that the parameter set
/// matches the architecture the config describes.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(ModelError::Corrupt("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(ModelError::ChecksumMismatch);
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Corrupt(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        down_blocks: r.u32()? as usize,
        layers_per_block: r.u32()? as usize,
        growth_rate: r.u32()? as usize,
        first_conv_filters: r.u32()? as usize,
        up_conv_filters: r.u32()? as usize,
        dropout_rate: r.f32()?,
        preset: match r.u8()? {
            0 => Preset::Paper,
            1 => Preset::Desk,
            p => return Err(ModelError::Corrupt(format!("unknown preset tag {p}"))),
        },
    };
    config.validate()?;

    let count = r.u32()? as usize;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Corrupt("non-utf8 parameter name".into()))?
            .to_string();
        let rank = r.u8()?;
        if rank != 4 {
            return Err(ModelError::Corrupt(format!("parameter {name}: rank {rank} != 4")));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = Vec::with_capacity(shape.len());
        for _ in 0..shape.len() {
            data.push(r.f32()?);
        }
        loaded.push(super::Param { name, value: Tensor::from_vec(shape, data) });
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt("trailing bytes after parameters".into()));
    }

    // The loaded parameter list must match the architecture plan exactly.
    let reference = build(config, 0)?;
    if reference.params().len() != loaded.len() {
        return Err(ModelError::Corrupt(format!(
            "expected {} parameters, found {}",
            reference.params().len(),
            loaded.len()
        )));
    }
    for (want, got) in reference.params().iter().zip(&loaded) {
        if want.name != got.name || want.value.shape() != got.value.shape() {
            return Err(ModelError::Corrupt(format!(
                "parameter mismatch: expected {} {}, found {} {}",
                want.name,
                want.value.shape(),
                got.name,
                got.value.shape()
            )));
        }
    }
    Ok(Model::from_parts(config, loaded))
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
