//! RGB images and the on-disk dump formats (8-bit PPM, raw `F32M` float maps).

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::scalar::Scalar;

/// Interleaved `H × W × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::zero(); width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                let o = (y * width + x) * 3;
                img.data[o..o + 3].copy_from_slice(&px);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<T> {
        let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        self.data.chunks_exact(3).map(|c| r * c[0] + g * c[1] + b * c[2]).collect()
    }

    /// Rotates by 90° counter-clockwise: output `(x', y') = (y, W - 1 - x)`.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        Self::from_fn(h, w, |xn, yn| self.get(w - 1 - yn, xn))
    }

    pub fn cast<U: Scalar>(&self) -> RgbImage<U> {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

pub fn write_ppm<T: Scalar>(img: &RgbImage<T>, w: &mut impl Write) -> io::Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)
}

pub fn save_ppm<T: Scalar>(img: &RgbImage<T>, path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(img, &mut w)?;
    w.flush()
}

fn ppm_token<R: BufRead>(r: &mut R) -> io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c == '#' {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

pub fn read_ppm<T: Scalar, R: BufRead>(r: &mut R) -> io::Result<RgbImage<T>> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if ppm_token(r)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let width: usize = ppm_token(r)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = ppm_token(r)?.parse().map_err(|_| bad("bad height"))?;
    if ppm_token(r)? != "255" {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)?;
    Ok(RgbImage {
        width,
        height,
        data: bytes.iter().map(|b| T::lit(*b as f64 / 255.0)).collect(),
    })
}

pub fn load_ppm<T: Scalar>(path: impl AsRef<Path>) -> io::Result<RgbImage<T>> {
    read_ppm(&mut BufReader::new(File::open(path)?))
}

/// Channel-major float map as stored in `F32M` files.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn write_f32m<T: Scalar>(
    channels: usize,
    height: usize,
    width: usize,
    data: &[T],
    w: &mut impl Write,
) -> io::Result<()> {
    assert_eq!(data.len(), channels * height * width);
    w.write_all(b"F32M")?;
    for v in [channels, height, width] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for v in data {
        w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
    }
    Ok(())
}

pub fn read_f32m(r: &mut impl Read) -> io::Result<FloatMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"F32M" {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad F32M magic"));
    }
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let width = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; channels * height * width];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Ok(FloatMap {
        channels,
        height,
        width,
        data,
    })
}
