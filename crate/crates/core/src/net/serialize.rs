//! Binary model files.
//!
//! ```text
//! "UESG"                     magic
//! u16                        format version
//! u32 + bytes                architecture as `key = value` text (UTF-8)
//! u32                        layer count
//! per layer:                 u8 kind (1 = conv2d)
//!                            u8 rank, rank x u32 weight dims
//!                            u8 rank, rank x u32 bias dims
//! f32 data                   weight then bias of each layer, in table order
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{layer_specs, Model, NetConfig};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"UESG";
pub const FORMAT_VERSION: u16 = 1;
const KIND_CONV2D: u8 = 1;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

fn io_err(e: std::io::Error) -> Error {
    fmt_err(format!("i/o: {e}"))
}

pub fn write_model<T: Real, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = model.config().to_kv().to_text();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let params = model.params();
    buf.extend_from_slice(&((params.len() / 2) as u32).to_le_bytes());
    for pair in params.chunks(2) {
        buf.push(KIND_CONV2D);
        for t in pair {
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
    }
    for t in params {
        for v in t.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| fmt_err("unexpected end of file"))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()?;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }
}

pub fn read_model<T: Real, R: Read>(r: R) -> Result<Model<T>> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(fmt_err("bad magic, not a UESG model file"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    if cfg_len > 1 << 20 {
        return Err(fmt_err("architecture block too large"));
    }
    let mut cfg = vec![0u8; cfg_len];
    r.inner
        .read_exact(&mut cfg)
        .map_err(|_| fmt_err("truncated architecture block"))?;
    let cfg = String::from_utf8(cfg).map_err(|_| fmt_err("architecture block is not UTF-8"))?;
    let config = NetConfig::from_kv(&KvMap::parse(&cfg)?)?;
    let specs = layer_specs(&config);
    let layers = r.u32()? as usize;
    if layers != specs.len() {
        return Err(fmt_err(format!(
            "layer table has {layers} entries, architecture needs {}",
            specs.len()
        )));
    }
    let mut shapes = Vec::with_capacity(2 * layers);
    for i in 0..layers {
        let kind = r.u8()?;
        if kind != KIND_CONV2D {
            return Err(fmt_err(format!("layer {i}: unknown kind {kind}")));
        }
        shapes.push(r.dims()?);
        shapes.push(r.dims()?);
    }
    let mut params = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.inner
            .read_exact(&mut raw)
            .map_err(|_| fmt_err("truncated parameter data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    Model::from_parts(config, params)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, std::io::BufWriter::new(f))
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(f))
}
