//! Binary masks and Netpbm (P4/P5/P6) image I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Format(format!(
                "mask of {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 0/1 tensor of shape `[height, width]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(vec![self.height, self.width], data)
    }

    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = t.dims2()?;
        Self::new(h, w, t.data().iter().map(|&v| v > threshold).collect())
    }
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `H × W × 3` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::from_parts(vec![self.height, self.width, 3], data)
    }
}

fn header(kind: &str, width: usize, height: usize, maxval: bool) -> Vec<u8> {
    let mut h = format!("{kind}\n{width} {height}\n");
    if maxval {
        h.push_str("255\n");
    }
    h.into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height, true);
    out.extend_from_slice(&img.data);
    out
}

/// Grayscale values in `[0, 1]`, clamped and rounded to 8 bits.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut out = header("P5", width, height, true);
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// P4 packs eight pixels per byte, MSB first, rows padded to whole bytes;
/// a set bit is a foreground (black) pixel.
pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let mut out = header("P4", mask.width, mask.height, false);
    let stride = mask.width.div_ceil(8);
    for y in 0..mask.height {
        let mut row = vec![0u8; stride];
        for x in 0..mask.width {
            if mask.get(y, x) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

struct Parsed<'a> {
    kind: [u8; 2],
    width: usize,
    height: usize,
    body: &'a [u8],
}

fn parse_netpbm(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("not a netpbm file".into()));
    }
    let kind = [bytes[0], bytes[1]];
    let fields = if kind[1] == b'4' { 2 } else { 3 };
    let mut pos = 2;
    let mut values = Vec::with_capacity(fields);
    while values.len() < fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        values.push(s.parse::<usize>().map_err(|e| Error::Format(e.to_string()))?);
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    if fields == 3 && values[2] != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", values[2])));
    }
    if values[0] == 0 || values[1] == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    Ok(Parsed {
        kind,
        width: values[0],
        height: values[1],
        body: bytes.get(pos..).unwrap_or(&[]),
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let p = parse_netpbm(bytes)?;
    if &p.kind != b"P6" {
        return Err(Error::Format("expected P6".into()));
    }
    let n = p.width * p.height * 3;
    if p.body.len() < n {
        return Err(Error::Format("truncated P6 raster".into()));
    }
    Ok(RgbImage {
        height: p.height,
        width: p.width,
        data: p.body[..n].to_vec(),
    })
}

/// Returns `(height, width, values in [0, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let p = parse_netpbm(bytes)?;
    if &p.kind != b"P5" {
        return Err(Error::Format("expected P5".into()));
    }
    let n = p.width * p.height;
    if p.body.len() < n {
        return Err(Error::Format("truncated P5 raster".into()));
    }
    let v = p.body[..n].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((p.height, p.width, v))
}

pub fn decode_pbm(bytes: &[u8]) -> Result<Mask> {
    let p = parse_netpbm(bytes)?;
    if &p.kind != b"P4" {
        return Err(Error::Format("expected P4".into()));
    }
    let stride = p.width.div_ceil(8);
    if p.body.len() < stride * p.height {
        return Err(Error::Format("truncated P4 raster".into()));
    }
    let mut mask = Mask::empty(p.height, p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            let bit = p.body[y * stride + x / 8] & (0x80 >> (x % 8));
            mask.set(y, x, bit != 0);
        }
    }
    Ok(mask)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn read_pbm(path: &Path) -> Result<Mask> {
    decode_pbm(&std::fs::read(path)?)
}
