//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "UAILNET\0"
//! version    u32
//! n_widths   u32
//! widths     n_widths x u32
//! dropout    f64
//! activation u8       0 = tanh, 1 = relu, 2 = linear
//! per layer: len u64, weights (row-major, out x in) f64 x len,
//!            len u64, bias f64 x len
//! ```
//!
//! Trailing bytes are rejected.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Layer, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UAILNET\0";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

pub fn write_to<W: Write>(p: &PolicyParams, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(p.arch().len() as u32).to_le_bytes())?;
    for &width in p.arch() {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&p.dropout().to_le_bytes())?;
    w.write_all(&[p.activation().code()])?;
    for l in p.layers() {
        for t in [&l.weights, &l.bias] {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(fmt_err("unexpected end of checkpoint"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let len = self.u64()?;
        if len != expected as u64 {
            return Err(fmt_err(format!("{what}: header implies {expected} values, tensor holds {len}")));
        }
        (0..expected).map(|_| self.f64()).collect()
    }
}

pub fn read_from<R: Read>(r: &mut R) -> Result<PolicyParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { buf: &bytes };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(fmt_err(format!("implausible layer count {n}")));
    }
    let arch: Vec<usize> = (0..n).map(|_| c.u32().map(|w| w as usize)).collect::<Result<_>>()?;
    let dropout = c.f64()?;
    let activation = Activation::from_code(c.take(1)?[0]).ok_or_else(|| fmt_err("unknown activation code"))?;
    let mut layers = Vec::with_capacity(n - 1);
    for (i, w) in arch.windows(2).enumerate() {
        let (inputs, outputs) = (w[0], w[1]);
        let weights = c.tensor(inputs * outputs, &format!("layer {i} weights"))?;
        let bias = c.tensor(outputs, &format!("layer {i} bias"))?;
        layers.push(Layer { inputs, outputs, weights, bias });
    }
    if !c.buf.is_empty() {
        return Err(fmt_err(format!("{} trailing bytes", c.buf.len())));
    }
    PolicyParams::from_layers(layers, dropout, activation).map_err(|e| fmt_err(e.to_string()))
}

pub fn save(p: &PolicyParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_to(p, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path).map_err(|e| fmt_err(format!("{}: {e}", path.display())))?;
    read_from(&mut bytes.as_slice())
}
