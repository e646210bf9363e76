//! Portable Float Map reader/writer.
//!
//! Header: `Pf` (one channel) or `PF` (three channels), then width and
//! height, then a scale whose sign gives the byte order (negative means
//! little-endian). The raster is 32-bit floats, bottom scanline first.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Decoded PFM raster, stored top row first, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    /// From an `[H, W]` map.
    pub fn from_map(t: &Tensor) -> Result<Self> {
        let (height, width) = t.dims2()?;
        Ok(Pfm {
            width,
            height,
            channels: 1,
            data: t.data().iter().map(|&x| x as f32).collect(),
        })
    }

    /// From a `[3, H, W]` image.
    pub fn from_image(t: &Tensor) -> Result<Self> {
        let (c, height, width) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("PFM color needs 3 channels, got {c}")));
        }
        let n = height * width;
        let mut data = Vec::with_capacity(3 * n);
        for i in 0..n {
            for ch in 0..3 {
                data.push(t.data()[ch * n + i] as f32);
            }
        }
        Ok(Pfm {
            width,
            height,
            channels: 3,
            data,
        })
    }

    /// `[H, W]` for grayscale, `[3, H, W]` for color.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        if self.channels == 1 {
            let data = self.data.iter().map(|&x| f64::from(x)).collect();
            Tensor::new(vec![self.height, self.width], data).expect("consistent raster")
        } else {
            let mut data = vec![0.0; 3 * n];
            for i in 0..n {
                for ch in 0..3 {
                    data[ch * n + i] = f64::from(self.data[3 * i + ch]);
                }
            }
            Tensor::new(vec![3, self.height, self.width], data).expect("consistent raster")
        }
    }
}

pub fn encode(pfm: &Pfm, endian: Endian) -> Vec<u8> {
    let magic = if pfm.channels == 3 { "PF" } else { "Pf" };
    let scale = match endian {
        Endian::Little => "-1.0",
        Endian::Big => "1.0",
    };
    let mut out = format!("{magic}\n{} {}\n{scale}\n", pfm.width, pfm.height).into_bytes();
    let row = pfm.width * pfm.channels;
    for y in (0..pfm.height).rev() {
        for &v in &pfm.data[y * row..(y + 1) * row] {
            match endian {
                Endian::Little => out.extend_from_slice(&v.to_le_bytes()),
                Endian::Big => out.extend_from_slice(&v.to_be_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Parse {
            offset: start,
            message: format!("{what} is not ASCII"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pfm> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"PF") => 3,
        Some(b"Pf") => 1,
        _ => return Err(c.err("expected PF or Pf magic")),
    };
    c.pos = 2;
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected whitespace after magic"));
    }
    let mut dim = |what: &str| -> Result<usize> {
        c.skip_ws();
        let start = c.pos;
        let tok = c.token(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Parse {
                offset: start,
                message: format!("invalid {what} {tok:?}"),
            }),
        }
    };
    let width = dim("width")?;
    let height = dim("height")?;
    c.skip_ws();
    let start = c.pos;
    let tok = c.token("scale")?;
    let scale: f64 = tok.parse().map_err(|_| Error::Parse {
        offset: start,
        message: format!("invalid scale {tok:?}"),
    })?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Parse {
            offset: start,
            message: "scale must be nonzero".into(),
        });
    }
    let endian = if scale < 0.0 { Endian::Little } else { Endian::Big };
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected a single whitespace byte before the raster"));
    }
    c.pos += 1;

    let row = width * channels;
    let need = row * height * 4;
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: c.pos + raster.len(),
            message: format!("truncated raster: need {need} bytes, have {}", raster.len()),
        });
    }
    let mut data = vec![0f32; row * height];
    for (k, chunk) in raster[..need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = match endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        };
        let (file_row, col) = (k / row, k % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_pfm(path: &Path, pfm: &Pfm) -> Result<()> {
    std::fs::write(path, encode(pfm, Endian::Little)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_map(path: &Path, t: &Tensor) -> Result<()> {
    write_pfm(path, &Pfm::from_map(t)?)
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    write_pfm(path, &Pfm::from_image(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Ok(read_pfm(path)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_bytes() {
        let t = Tensor::new(vec![1, 1], vec![0.25]).unwrap();
        let bytes = encode(&Pfm::from_map(&t).unwrap(), Endian::Little);
        let header = b"Pf\n1 1\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &0.25f32.to_le_bytes());
        assert_eq!(&bytes[header.len()..], &[0x00, 0x00, 0x80, 0x3E]);
    }

    #[test]
    fn bottom_row_first() {
        let t = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let bytes = encode(&Pfm::from_map(&t).unwrap(), Endian::Little);
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(&body[..4], &2.0f32.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap().to_tensor(), t);
    }

    #[test]
    fn big_endian_twin_reads_the_same() {
        let t = Tensor::from_fn(&[3, 2, 3], |i| i as f64 * 0.1 - 0.4);
        let p = Pfm::from_image(&t).unwrap();
        let le = decode(&encode(&p, Endian::Little)).unwrap();
        let be = decode(&encode(&p, Endian::Big)).unwrap();
        assert_eq!(le, be);
        assert_eq!(le.to_tensor(), t.round_f32());
    }

    #[test]
    fn header_variants() {
        let mut bytes = b"Pf 2\t1 -1\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_le_bytes());
        let p = decode(&bytes).unwrap();
        assert_eq!(p.data, vec![1.5, -3.0]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        match decode(b"P6\n1 1\n255\n") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode(b"Pf\nx 1\n-1\n") {
            Err(Error::Parse { offset: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode(b"Pf\n1 1\n0\n\0\0\0\0") {
            Err(Error::Parse { offset: 7, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode(b"Pf\n2 1\n-1\n\0\0\0\0") {
            Err(Error::Parse { offset: 14, message }) => assert!(message.contains("truncated")),
            other => panic!("{other:?}"),
        }
    }
}
