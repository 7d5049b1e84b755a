//! Grayscale image buffer, resampling, and 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Bilinear sample at continuous pixel-centre coordinates; `None` outside
    /// the half-pixel border.
    pub fn sample(&self, y: f64, x: f64) -> Option<f32> {
        let (h, w) = (self.height as f64, self.width as f64);
        if y < -0.5 || x < -0.5 || y > h - 0.5 || x > w - 0.5 {
            return None;
        }
        let yc = y.clamp(0.0, h - 1.0);
        let xc = x.clamp(0.0, w - 1.0);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = (yc - y0 as f64) as f32;
        let fx = (xc - x0 as f64) as f32;
        if fy == 0.0 && fx == 0.0 {
            return Some(self.get(y0, x0));
        }
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bot = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    /// Resamples the box `(top, left, height, width)` (in source pixels) onto
    /// an `out_h x out_w` grid with bilinear interpolation.
    pub fn resample_box(
        &self,
        top: f64,
        left: f64,
        box_h: f64,
        box_w: f64,
        out_h: usize,
        out_w: usize,
    ) -> GrayImage {
        let sy = box_h / out_h as f64;
        let sx = box_w / out_w as f64;
        let mut out = GrayImage::new(out_h, out_w);
        for oy in 0..out_h {
            let y = top + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let x = left + (ox as f64 + 0.5) * sx - 0.5;
                let v = self.sample(y, x).unwrap_or_else(|| {
                    self.sample(
                        y.clamp(0.0, self.height as f64 - 1.0),
                        x.clamp(0.0, self.width as f64 - 1.0),
                    )
                    .unwrap_or(0.0)
                });
                out.set(oy, ox, v);
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> GrayImage {
        if (out_h, out_w) == self.dims() {
            return self.clone();
        }
        self.resample_box(
            0.0,
            0.0,
            self.height as f64,
            self.width as f64,
            out_h,
            out_w,
        )
    }

    /// Area-averaging downscale; used when shrinking by large factors where
    /// bilinear sampling would alias speckle.
    pub fn downscale_area(&self, out_h: usize, out_w: usize) -> GrayImage {
        let mut out = GrayImage::new(out_h, out_w);
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        for oy in 0..out_h {
            let y0 = oy as f64 * sy;
            let y1 = y0 + sy;
            for ox in 0..out_w {
                let x0 = ox as f64 * sx;
                let x1 = x0 + sx;
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for y in (y0.floor() as usize)..(y1.ceil() as usize).min(self.height) {
                    let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                    for x in (x0.floor() as usize)..(x1.ceil() as usize).min(self.width) {
                        let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                        acc += self.get(y, x) as f64 * wy * wx;
                        wsum += wy * wx;
                    }
                }
                out.set(oy, ox, (acc / wsum) as f32);
            }
        }
        out
    }

    /// Rotates about the image centre by `degrees` (counter-clockwise);
    /// uncovered pixels are filled with `fill`.
    pub fn rotate(&self, degrees: f64, fill: f32) -> GrayImage {
        if degrees == 0.0 {
            return self.clone();
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut out = GrayImage::new(self.height, self.width);
        for y in 0..self.height {
            let dy = y as f64 - cy;
            for x in 0..self.width {
                let dx = x as f64 - cx;
                let sx = c * dx - s * dy + cx;
                let sy = s * dx + c * dy + cy;
                out.set(y, x, self.sample(sy, sx).unwrap_or(fill));
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Quantizes to 8-bit and back, matching a PNG round trip.
    pub fn quantized(&self) -> GrayImage {
        Self::from_u8(self.height, self.width, &self.to_u8())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> GrayImage {
        GrayImage {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png_u8(path, self.height, self.width, &self.to_u8())
    }

    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let (h, w, bytes) = read_png_u8(path)?;
        Ok(Self::from_u8(h, w, &bytes))
    }
}

/// Writes raw 8-bit grayscale bytes as a PNG.
pub fn write_png_u8(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

pub fn read_png_u8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "{}: expected 8-bit grayscale",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    Ok((h, w, buf))
}
