//! `SNET` model container.
//!
//! ```text
//! "SNET" | u32 version = 1 | u32 layer count
//! per layer: u8 kind tag (0 affine, 1 conv2d, 2 relu, 3 flatten)
//!   affine: u32 in, u32 out, weight tensor, bias tensor
//!   conv2d: u32 in_channels, u32 filters, u32 kernel, u32 stride, u32 padding,
//!           weight tensor, bias tensor
//! tensor: u8 rank, u32 extents..., f32 data...
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Affine, Conv2d, Layer, Network};
use crate::binio::{put_tensor, put_u32, Reader};
use crate::error::{Error, Result, Section};

pub const MAGIC: &[u8; 4] = b"SNET";
pub const VERSION: u32 = 1;

const TAG_AFFINE: u8 = 0;
const TAG_CONV2D: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, net.layers().len() as u32);
    for layer in net.layers() {
        match layer {
            Layer::Affine(a) => {
                out.push(TAG_AFFINE);
                put_u32(&mut out, a.in_dim() as u32);
                put_u32(&mut out, a.out_dim() as u32);
                put_tensor(&mut out, &a.weight);
                put_tensor(&mut out, &a.bias);
            }
            Layer::Conv2d(c) => {
                out.push(TAG_CONV2D);
                for v in [
                    c.in_channels(),
                    c.filters(),
                    c.kernel(),
                    c.stride,
                    c.padding,
                ] {
                    put_u32(&mut out, v as u32);
                }
                put_tensor(&mut out, &c.weight);
                put_tensor(&mut out, &c.bias);
            }
            Layer::Relu => out.push(TAG_RELU),
            Layer::Flatten => out.push(TAG_FLATTEN),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, Section::Magic)?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            section: Section::Magic,
            message: format!("expected {MAGIC:?}, found {magic:?}"),
        });
    }
    let version = r.u32(Section::Version)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32(Section::Header)? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let sec = Section::Layer(i);
        let start = r.offset();
        let tag = r.u8(sec.clone())?;
        let layer = match tag {
            TAG_AFFINE => {
                let inp = r.u32(sec.clone())? as usize;
                let out = r.u32(sec.clone())? as usize;
                let weight = r.tensor(sec.clone())?;
                let bias = r.tensor(sec.clone())?;
                if weight.shape() != [out, inp] {
                    return Err(r.error(
                        sec,
                        format!(
                            "affine weight shape {:?} disagrees with header ({out}, {inp})",
                            weight.shape()
                        ),
                    ));
                }
                Layer::Affine(Affine::new(weight, bias).map_err(|e| r.error(sec, e.to_string()))?)
            }
            TAG_CONV2D => {
                let mut h = [0usize; 5];
                for v in &mut h {
                    *v = r.u32(sec.clone())? as usize;
                }
                let [channels, filters, kernel, stride, padding] = h;
                let weight = r.tensor(sec.clone())?;
                let bias = r.tensor(sec.clone())?;
                if weight.shape() != [filters, channels, kernel, kernel] {
                    return Err(r.error(
                        sec,
                        format!(
                            "conv2d weight shape {:?} disagrees with header",
                            weight.shape()
                        ),
                    ));
                }
                Layer::Conv2d(
                    Conv2d::new(weight, bias, stride, padding)
                        .map_err(|e| r.error(sec, e.to_string()))?,
                )
            }
            TAG_RELU => Layer::Relu,
            TAG_FLATTEN => Layer::Flatten,
            other => {
                return Err(Error::Parse {
                    offset: start,
                    section: sec,
                    message: format!("unknown layer kind tag {other}"),
                })
            }
        };
        layers.push(layer);
    }
    r.finish()?;
    Network::new(layers)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn encode_decode_encode_is_identical() {
        for arch in [Architecture::ToyMlp, Architecture::ToyCnn] {
            let net = Network::build(arch, &[3, 8, 8], 10, 5).unwrap();
            let bytes = encode(&net);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, net);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode(&Network::build(Architecture::ToyMlp, &[1, 2, 2], 2, 0).unwrap());
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Parse {
                offset: 0,
                section: Section::Magic,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_unsupported() {
        let mut bytes = encode(&Network::build(Architecture::ToyMlp, &[1, 2, 2], 2, 0).unwrap());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_names_the_missing_section() {
        let bytes = encode(&Network::build(Architecture::ToyCnn, &[3, 8, 8], 3, 0).unwrap());
        match decode(&bytes[..6]) {
            Err(Error::Parse {
                section: Section::Version,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match decode(&bytes[..bytes.len() - 3]) {
            Err(
                e @ Error::Parse {
                    section: Section::Layer(3),
                    ..
                },
            ) => {
                assert!(e.to_string().contains("layer 3"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode(&extra),
            Err(Error::Parse {
                section: Section::Trailing,
                ..
            })
        ));
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        put_u32(&mut bytes, 1);
        put_u32(&mut bytes, 1);
        bytes.push(9);
        assert!(matches!(
            decode(&bytes),
            Err(Error::Parse {
                offset: 12,
                section: Section::Layer(0),
                ..
            })
        ));
    }
}
