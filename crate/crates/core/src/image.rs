//! Grayscale/RGB images, dense flow fields and the netpbm/FLW1 file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Single-channel image, row-major, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clipped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample with coordinates clamped to the image rectangle.
    /// Integer coordinates address pixel centers.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        bilinear_clamped(&self.data, self.width, self.height, x, y)
    }

    /// Bilinear sample returning `fill` outside the image.
    pub fn sample_or(&self, x: f64, y: f64, fill: f64) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x > -1.0 && y > -1.0 && x < w && y < h) {
            return fill;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let px = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= w || yi >= h {
                fill
            } else {
                self.data[yi as usize * self.width + xi as usize]
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1.0, y0) * fx;
        let bot = px(x0, y0 + 1.0) * (1.0 - fx) + px(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Catmull-Rom bicubic upsampling by 2 (half-pixel centers, edge clamp).
    pub fn upsample2x_bicubic(&self) -> Image {
        let (w, h) = (self.width, self.height);
        let src_x: Vec<f64> = (0..2 * w).map(|i| (i as f64 + 0.5) / 2.0 - 0.5).collect();
        let src_y: Vec<f64> = (0..2 * h).map(|i| (i as f64 + 0.5) / 2.0 - 0.5).collect();
        let mut rows = vec![0.0; 2 * w * h];
        for y in 0..h {
            for (ox, &sx) in src_x.iter().enumerate() {
                rows[y * 2 * w + ox] = cubic_1d(|i| self.get(clamp_idx(i, w), y), sx);
            }
        }
        let mut out = Image::new(2 * w, 2 * h);
        for (oy, &sy) in src_y.iter().enumerate() {
            for ox in 0..2 * w {
                let v = cubic_1d(|i| rows[clamp_idx(i, h) * 2 * w + ox], sy);
                out.set(ox, oy, v);
            }
        }
        out
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.to_gray8())?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(mut input: R) -> Result<Image> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let (magic, w, h, maxval, body) = parse_netpbm_header(&bytes)?;
        if magic != "P5" {
            return Err(Error::format(format!("expected P5 PGM, found {magic}")));
        }
        if maxval != 255 {
            return Err(Error::format(format!("unsupported maxval {maxval}")));
        }
        if body.len() < w * h {
            return Err(Error::format("truncated PGM payload"));
        }
        Ok(Image {
            width: w,
            height: h,
            data: body[..w * h].iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn catmull_rom(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_1d(f: impl Fn(isize) -> f64, s: f64) -> f64 {
    let base = s.floor() as isize;
    let mut acc = 0.0;
    for k in -1..=2 {
        let i = base + k;
        acc += f(i) * catmull_rom(s - i as f64);
    }
    acc
}

/// Bilinear sampling of a row-major plane with coordinates clamped to the
/// valid range. Shared by rendering, warping and metrics.
#[inline]
pub fn bilinear_clamped(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let (x0, x1, fx) = bilinear_taps(x, width);
    let (y0, y1, fy) = bilinear_taps(y, height);
    let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
    let bot = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Clamped bilinear taps along one axis: `(i0, i1, weight of i1)`.
#[inline]
pub fn bilinear_taps(coord: f64, n: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

/// RGB image with channels interleaved per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn from_planes(r: &Image, g: &Image, b: &Image) -> Result<Self> {
        if !r.same_size(g) || !r.same_size(b) {
            return Err(Error::shape("RGB planes differ in size"));
        }
        let data = (0..r.len())
            .map(|i| [r.data[i], g.data[i], b.data[i]])
            .collect();
        Ok(Self {
            width: r.width,
            height: r.height,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        }
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        out.write_all(&bytes)?;
        Ok(())
    }
}

fn parse_netpbm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated netpbm header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad netpbm header field `{s}`")))
    };
    let body = bytes.get(pos..).unwrap_or(&[]);
    Ok((
        fields[0].clone(),
        num(&fields[1])?,
        num(&fields[2])?,
        num(&fields[3])?,
        body,
    ))
}

/// Dense displacement field stored as two planes. `dx[i], dy[i]` is the
/// displacement of pixel `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

const FLOW_MAGIC: &[u8; 4] = b"FLW1";

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        Self {
            width,
            height,
            dx: vec![dx; width * height],
            dy: vec![dy; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    /// `FLW1` magic, u16 width, u16 height, then interleaved f32 `dx, dy`.
    pub fn write_flw<W: Write>(&self, mut out: W) -> Result<()> {
        let (w, h) = (dim_u16(self.width)?, dim_u16(self.height)?);
        let mut buf = Vec::with_capacity(8 + self.dx.len() * 8);
        buf.extend_from_slice(FLOW_MAGIC);
        buf.extend_from_slice(&w.to_le_bytes());
        buf.extend_from_slice(&h.to_le_bytes());
        for (dx, dy) in self.dx.iter().zip(&self.dy) {
            buf.extend_from_slice(&(*dx as f32).to_le_bytes());
            buf.extend_from_slice(&(*dy as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_flw<R: Read>(mut input: R) -> Result<FlowField> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..4] != FLOW_MAGIC {
            return Err(Error::format("bad FLW1 magic"));
        }
        let w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let body = &bytes[8..];
        if body.len() != w * h * 8 {
            return Err(Error::format(format!(
                "FLW1 payload is {} bytes, expected {}",
                body.len(),
                w * h * 8
            )));
        }
        let mut flow = FlowField::zeros(w, h);
        for (i, rec) in body.chunks_exact(8).enumerate() {
            flow.dx[i] = f32::from_le_bytes(rec[..4].try_into().unwrap()) as f64;
            flow.dy[i] = f32::from_le_bytes(rec[4..].try_into().unwrap()) as f64;
        }
        Ok(flow)
    }
}

pub(crate) fn dim_u16(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds u16")))
}
