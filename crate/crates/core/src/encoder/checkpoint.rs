//! Binary checkpoint: `OSTM`, version byte, spec block, f32 parameters.
//!
//! All integers are little-endian. The spec block is the input shape
//! (3 × u32), the init seed (u64), the layer count (u32) and one record per
//! layer: a u8 tag followed by the layer's u32 fields.

use std::io::{Read, Write};
use std::path::Path;

use super::network::Network;
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OSTM";
pub const VERSION: u8 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_FC: u8 = 3;
const TAG_L2: u8 = 4;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Spec(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &Network<f32>) -> Result<Vec<u8>> {
    let spec = model.spec();
    let mut out = Vec::with_capacity(64 + model.params().len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for &d in &spec.input {
        put_u32(&mut out, d)?;
    }
    out.extend_from_slice(&model.init_seed().to_le_bytes());
    put_u32(&mut out, spec.layers.len())?;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                out.push(TAG_CONV);
                for v in [in_channels, out_channels, kernel_h, kernel_w, stride, padding] {
                    put_u32(&mut out, v)?;
                }
            }
            LayerSpec::Relu => out.push(TAG_RELU),
            LayerSpec::MaxPool => out.push(TAG_POOL),
            LayerSpec::Fc { inputs, outputs } => {
                out.push(TAG_FC);
                put_u32(&mut out, inputs)?;
                put_u32(&mut out, outputs)?;
            }
            LayerSpec::L2Norm => out.push(TAG_L2),
        }
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                self.pos as u64,
                format!("truncated while reading {field}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<Network<f32>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("checkpoint", 0, "bad magic"));
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let input = [c.u32("input")?, c.u32("input")?, c.u32("input")?];
    let seed = u64::from_le_bytes(c.take(8, "init seed")?.try_into().unwrap());
    let n_layers = c.u32("layer count")?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let at = c.pos;
        let layer = match c.u8("layer tag")? {
            TAG_CONV => LayerSpec::Conv {
                in_channels: c.u32("conv")?,
                out_channels: c.u32("conv")?,
                kernel_h: c.u32("conv")?,
                kernel_w: c.u32("conv")?,
                stride: c.u32("conv")?,
                padding: c.u32("conv")?,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_POOL => LayerSpec::MaxPool,
            TAG_FC => LayerSpec::Fc {
                inputs: c.u32("fc")?,
                outputs: c.u32("fc")?,
            },
            TAG_L2 => LayerSpec::L2Norm,
            t => return Err(Error::format("checkpoint", at as u64, format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let spec = NetworkSpec { input, layers };
    spec.validate()
        .map_err(|e| Error::format("checkpoint", c.pos as u64, e.to_string()))?;
    let count = spec.param_count();
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::format("checkpoint", c.pos as u64, "parameter count overflow"))?;
    let remaining = buf.len() - c.pos;
    if remaining != expected {
        return Err(Error::format(
            "checkpoint",
            c.pos as u64,
            format!("expected {expected} parameter bytes, found {remaining}"),
        ));
    }
    let params = c
        .take(expected, "parameters")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Network::from_params(spec, params, seed)
}

pub fn write_model<W: Write>(model: &Network<f32>, mut w: W) -> Result<()> {
    let bytes = encode(model)?;
    w.write_all(&bytes).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn read_model<R: Read>(mut r: R) -> Result<Network<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    decode(&buf)
}

pub fn save_model(model: &Network<f32>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network<f32>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Network<f32> {
        Network::init(NetworkSpec::desk(16, 16, 16), 21).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ostm");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.init_seed(), m.init_seed());
        let bits = |n: &Network<f32>| n.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        let x: Vec<f32> = (0..256).map(|i| (i % 17) as f32 / 16.0).collect();
        let a = m.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncation_is_rejected_everywhere() {
        let bytes = encode(&model()).unwrap();
        for cut in [0, 3, 4, 5, 12, 30, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn version_bump_is_explicit() {
        let mut bytes = encode(&model()).unwrap();
        bytes[4] = VERSION + 1;
        assert!(matches!(
            decode(&bytes),
            Err(Error::Version { found, expected: VERSION }) if found == VERSION + 1
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
