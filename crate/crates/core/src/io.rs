//! File formats: the `SDTN` tensor container, the `SDCK` checkpoint header
//! and 8-bit PGM/PPM images.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "SDTN" u32 version=1 u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 extent, f32 payload }
//! ```
//!
//! A checkpoint is `"SDCK" u32 version=1 u64 step` followed by a container.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"SDTN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const FORMAT_VERSION: u32 = 1;

/// An ordered list of named tensors.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_tensors(out: &mut impl Write, tensors: &[(String, Tensor<f32>)]) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(format_err(format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(want).unwrap())));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        Ok(())
    }
}

fn parse_tensors(c: &mut Cursor<'_>) -> Result<NamedTensors> {
    c.magic(TENSOR_MAGIC)?;
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|e| format_err(format!("tensor name: {e}")))?.to_string();
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if c.pos != c.bytes.len() {
        return Err(format_err(format!("{} trailing bytes", c.bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<NamedTensors> {
    parse_tensors(&mut Cursor { bytes, pos: 0 })
}

pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors).expect("writing to a Vec cannot fail");
    buf
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<NamedTensors> {
    decode_tensors(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_checkpoint(step: u64, tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    write_tensors(&mut buf, tensors).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(u64, NamedTensors)> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(CHECKPOINT_MAGIC)?;
    let step = c.u64()?;
    Ok((step, parse_tensors(&mut c)?))
}

/// Stores UTF-8 text as a rank-1 tensor of byte values.
pub fn text_tensor(text: &str) -> Tensor<f32> {
    let bytes = text.as_bytes();
    Tensor::from_fn(&[bytes.len()], |i| bytes[i] as f32)
}

pub fn tensor_text(t: &Tensor<f32>) -> Result<String> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&x| if (0.0..=255.0).contains(&x) && x.fract() == 0.0 { Ok(x as u8) } else { Err(format_err("not a byte")) })
        .collect::<Result<_>>()?;
    String::from_utf8(bytes).map_err(|e| format_err(format!("embedded text: {e}")))
}

/// An 8-bit grey or RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    /// `[H, W, C]` tensor with values mapped `v ↦ 2v/255 − 1`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(&[self.height, self.width, self.channels], |i| 2.0 * self.data[i] as f32 / 255.0 - 1.0)
    }

    /// Inverse of [`Image::to_tensor`]: `round(255·(x+1)/2)`, clamped.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let &[height, width, channels] = t.shape() else {
            return Err(Error::Shape(format!("image tensor must be [H, W, C], got {:?}", t.shape())));
        };
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("need 1 or 3 channels, got {channels}")));
        }
        let data = t.data().iter().map(|&x| (255.0 * (x + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8).collect();
        Ok(Self { width, height, channels, data })
    }

    /// Binary PGM (1 channel) or PPM (3 channels).
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pnm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::decode_pnm(&bytes)
    }

    /// Reads P2/P3 (ASCII) and P5/P6 (binary) files; samples with
    /// `maxval ≠ 255` are rescaled to 8 bits.
    pub fn decode_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(format_err("unexpected end of PNM header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let number = |s: String| s.parse::<usize>().map_err(|_| format_err(format!("bad PNM number {s:?}")));
        let magic = token()?;
        let (channels, ascii) = match magic.as_str() {
            "P2" => (1, true),
            "P3" => (3, true),
            "P5" => (1, false),
            "P6" => (3, false),
            other => return Err(format_err(format!("unsupported PNM type {other:?}"))),
        };
        let width = number(token()?)?;
        let height = number(token()?)?;
        let maxval = number(token()?)?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format_err(format!("bad PNM header {width}x{height} max {maxval}")));
        }
        let n = width * height * channels;
        let rescale = |v: usize| -> Result<u8> {
            if v > maxval {
                return Err(format_err(format!("sample {v} exceeds maxval {maxval}")));
            }
            Ok(((v * 255 + maxval / 2) / maxval) as u8)
        };
        let mut data = Vec::with_capacity(n);
        if ascii {
            for _ in 0..n {
                data.push(rescale(number(token()?)?)?);
            }
        } else {
            // exactly one whitespace byte separates the header from the raster
            let body = pos + 1;
            let wide = maxval > 255;
            let need = n * if wide { 2 } else { 1 };
            if body + need > bytes.len() {
                return Err(format_err(format!("PNM raster truncated: need {need} bytes")));
            }
            let raster = &bytes[body..body + need];
            for i in 0..n {
                let v = if wide { u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize } else { raster[i] as usize };
                data.push(rescale(v)?);
            }
        }
        Ok(Self { width, height, channels, data })
    }

    /// Center crop to a square followed by area downsampling to `side`
    /// (the crop side must be a multiple of `side`).
    pub fn crop_resize(&self, side: usize) -> Result<Self> {
        let crop = self.width.min(self.height);
        let crop = crop - crop % side;
        if crop == 0 {
            return Err(Error::Shape(format!("{}x{} image is smaller than {side}", self.width, self.height)));
        }
        let (y0, x0) = ((self.height - crop) / 2, (self.width - crop) / 2);
        let f = crop / side;
        let c = self.channels;
        let mut data = vec![0u8; side * side * c];
        for y in 0..side {
            for x in 0..side {
                for ch in 0..c {
                    let mut acc = 0u32;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += self.data[((y0 + y * f + dy) * self.width + x0 + x * f + dx) * c + ch] as u32;
                        }
                    }
                    let n = (f * f) as u32;
                    data[(y * side + x) * c + ch] = ((acc + n / 2) / n) as u8;
                }
            }
        }
        Ok(Self { width: side, height: side, channels: c, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_is_byte_identical() {
        let tensors = vec![
            ("a/b".to_string(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5)),
            ("s".to_string(), Tensor::scalar(-1.25f32)),
        ];
        let bytes = encode_tensors(&tensors);
        assert_eq!(&bytes[..4], b"SDTN");
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back, tensors);
        assert_eq!(encode_tensors(&back), bytes);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_header() {
        let bytes = encode_checkpoint(42, &[("x".into(), text_tensor("k = v"))]);
        assert_eq!(&bytes[..4], b"SDCK");
        let (step, t) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(step, 42);
        assert_eq!(tensor_text(&t[0].1).unwrap(), "k = v");
    }

    #[test]
    fn pnm_roundtrip_and_ascii() {
        let img = Image { width: 2, height: 1, channels: 3, data: vec![0, 128, 255, 1, 2, 3] };
        assert_eq!(Image::decode_pnm(&img.encode_pnm()).unwrap(), img);
        let ascii = b"P2\n# comment\n2 2\n15\n0 15\n5 10\n";
        let g = Image::decode_pnm(ascii).unwrap();
        assert_eq!(g.data, vec![0, 255, 85, 170]);
        assert!(Image::decode_pnm(b"P7\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn tensor_mapping() {
        let img = Image { width: 1, height: 1, channels: 1, data: vec![255] };
        assert_eq!(img.to_tensor().data(), &[1.0]);
        let t = Tensor::from_vec(&[1, 3, 1], vec![-1.0f32, 0.0, 7.0]).unwrap();
        assert_eq!(Image::from_tensor(&t).unwrap().data, vec![0, 128, 255]);
    }

    #[test]
    fn crop_resize_averages() {
        let img = Image { width: 4, height: 2, channels: 1, data: vec![9, 0, 10, 20, 9, 0, 30, 40] };
        let r = img.crop_resize(1).unwrap();
        assert_eq!(r.data, vec![(0 + 10 + 0 + 30 + 2) / 4]);
    }
}
