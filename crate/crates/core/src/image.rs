//! In-memory images plus the two accepted on-disk formats: binary PPM (`P6`)
//! and a raw little-endian `f32` tensor with a 16-byte header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, StarError};

/// Magic bytes of the raw tensor format, followed by `H`, `W`, `C` as `u32` LE.
pub const RAW_MAGIC: [u8; 4] = *b"STRT";

/// Pixels in `[0, 1]`, stored row-major with channels interleaved last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(StarError::InvalidImage(format!(
                "empty image {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(StarError::InvalidImage(format!(
                "{} values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(StarError::InvalidImage(format!(
                "value {} at offset {i} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    pixels.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                let base = (r * self.width + c) * self.channels;
                pixels.extend_from_slice(&self.pixels[base..base + self.channels]);
            }
        }
        Self { pixels, ..*self }
    }

    /// Bilinear crop of the window `(top, left, h, w)` resampled to
    /// `out_h x out_w`.
    pub fn crop_resize(
        &self,
        top: f32,
        left: f32,
        h: f32,
        w: f32,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        let ch = self.channels;
        let mut pixels = Vec::with_capacity(out_h * out_w * ch);
        let sample = |y: f32, x: f32, k: usize| -> f32 {
            let y = y.clamp(0.0, (self.height - 1) as f32);
            let x = x.clamp(0.0, (self.width - 1) as f32);
            let y0 = y.floor() as usize;
            let x0 = x.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let fy = y - y0 as f32;
            let fx = x - x0 as f32;
            let top = self.at(y0, x0, k) * (1.0 - fx) + self.at(y0, x1, k) * fx;
            let bot = self.at(y1, x0, k) * (1.0 - fx) + self.at(y1, x1, k) * fx;
            top * (1.0 - fy) + bot * fy
        };
        for r in 0..out_h {
            let y = top + (r as f32 + 0.5) * h / out_h as f32 - 0.5;
            for c in 0..out_w {
                let x = left + (c as f32 + 0.5) * w / out_w as f32 - 0.5;
                for k in 0..ch {
                    pixels.push(sample(y, x, k).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            channels: ch,
            pixels,
        }
    }

    /// Encodes as 8-bit binary PPM. Requires 3 channels.
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(StarError::InvalidImage(format!(
                "PPM needs 3 channels, image has {}",
                self.channels
            )));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v * 255.0).round() as u8));
        Ok(out)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut header = Vec::with_capacity(4);
        while header.len() < 4 {
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
                return Err(StarError::InvalidImage("truncated PPM header".into()));
            }
            header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if header[0] != "P6" {
            return Err(StarError::InvalidImage(format!(
                "expected PPM magic P6, found {}",
                header[0]
            )));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| StarError::InvalidImage(format!("bad PPM {what}: {s}")))
        };
        let width = parse(&header[1], "width")?;
        let height = parse(&header[2], "height")?;
        let maxval = parse(&header[3], "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(StarError::InvalidImage(format!(
                "PPM maxval {maxval} out of range"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let wide = maxval > 255;
        let count = width * height * 3;
        let need = if wide { count * 2 } else { count };
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| StarError::InvalidImage("truncated PPM raster".into()))?;
        let scale = maxval as f32;
        let pixels = if wide {
            raster
                .chunks_exact(2)
                .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f32 / scale).min(1.0))
                .collect()
        } else {
            raster
                .iter()
                .map(|&b| (b as f32 / scale).min(1.0))
                .collect()
        };
        Self::new(height, width, 3, pixels)
    }

    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len() * 4);
        out.extend_from_slice(&RAW_MAGIC);
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != RAW_MAGIC {
            return Err(StarError::InvalidImage("missing raw tensor header".into()));
        }
        let dim =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let body = &bytes[16..];
        if body.len() != h * w * c * 4 {
            return Err(StarError::InvalidImage(format!(
                "raw tensor body has {} bytes, expected {}",
                body.len(),
                h * w * c * 4
            )));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(h, w, c, pixels)
    }

    /// Loads by extension: `.ppm` or `.raw` / `.f32`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => Self::from_ppm(&bytes),
            Some("raw") | Some("f32") => Self::from_raw(&bytes),
            _ => Err(StarError::InvalidImage(format!(
                "{}: only .ppm and .raw images are accepted",
                path.display()
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => self.to_ppm()?,
            _ => self.to_raw(),
        };
        fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }
}
