//! Piecewise-constant B-scan renderer with Gaussian speckle.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FluidType, LatentFactors, IMAGE_HEIGHT, IMAGE_WIDTH, PIXEL_HEIGHT_UM, PIXEL_WIDTH_UM};
use crate::error::{Error, Result};
use crate::image::{read_png_u8, write_png_u8, GrayImage};
use crate::rng;

// Layer boundaries (rows) in the unrotated frame, away from the fovea.
const RETINA_TOP: f64 = 62.0;
const FOVEAL_PIT_DEPTH: f64 = 22.0;
const INNER_BOTTOM: usize = 98;
const ONL_BOTTOM: usize = 118;
const EZ_BOTTOM: usize = 122;
const RPE_TOP: usize = 125;
const RPE_BOTTOM: usize = 131;
const HYPERTRANSMISSION_DEPTH: usize = 25;

const VITREOUS: f32 = 0.06;
const NFL: f32 = 0.70;
const INNER: f32 = 0.42;
const ONL: f32 = 0.20;
const EZ: f32 = 0.68;
const GAP: f32 = 0.30;
const RPE: f32 = 0.92;
const DRUSEN: f32 = 0.60;
const CHOROID: f32 = 0.48;
const SCLERA: f32 = 0.14;
const FLUID: f32 = 0.03;
const ATROPHIC: f32 = 0.18;
const HYPER: f32 = 0.85;
const SCAR: f32 = 0.97;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Standard deviation of additive Gaussian speckle, in intensity units.
    pub speckle_sd: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { speckle_sd: 0.05 }
    }
}

/// Per-pixel lesion bit flags emitted alongside each rendered image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl StructureMask {
    pub const DRUSEN: u8 = 1;
    pub const INTRARETINAL_FLUID: u8 = 2;
    pub const SUBRETINAL_FLUID: u8 = 4;
    pub const ATROPHY: u8 = 8;
    pub const HYPERTRANSMISSION: u8 = 16;
    pub const SCAR: u8 = 32;
    pub const ANY_LESION: u8 = 63;

    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn any(&self, bits: u8) -> bool {
        self.data.iter().any(|&m| m & bits != 0)
    }

    pub fn count(&self, bits: u8) -> usize {
        self.data.iter().filter(|&&m| m & bits != 0).count()
    }

    /// Number of columns containing at least one pixel with `bits`.
    pub fn column_extent(&self, bits: u8) -> usize {
        (0..self.width)
            .filter(|&x| (0..self.height).any(|y| self.get(y, x) & bits != 0))
            .count()
    }

    /// Boolean region of pixels carrying any of `bits`, grown by a disc of
    /// `radius` pixels.
    pub fn dilated(&self, bits: u8, radius: usize) -> Vec<bool> {
        let r = radius as isize;
        let mut out = vec![false; self.data.len()];
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) & bits == 0 {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < self.height && (xx as usize) < self.width
                    {
                        out[yy as usize * self.width + xx as usize] = true;
                    }
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png_u8(path, self.height, self.width, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (height, width, data) = read_png_u8(path)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: GrayImage,
    pub mask: StructureMask,
}

pub fn render_bscan(latents: &LatentFactors, noise_seed: u64) -> Result<Rendered> {
    render_bscan_with(latents, noise_seed, &RenderConfig::default())
}

/// Renders one B-scan. Structure (and the mask) depends only on `latents`;
/// `noise_seed` drives the speckle alone.
pub fn render_bscan_with(
    latents: &LatentFactors,
    noise_seed: u64,
    config: &RenderConfig,
) -> Result<Rendered> {
    latents.validate()?;
    let (h, w) = (IMAGE_HEIGHT, IMAGE_WIDTH);
    let mut img = GrayImage::filled(h, w, VITREOUS);
    let mut mask = StructureMask::new(h, w);
    let fx = w as f64 / 2.0 + latents.fovea_offset_px;
    if !(0.0..w as f64).contains(&fx) {
        return Err(Error::invalid(format!("fovea at column {fx} outside image")));
    }

    let choroid_px = (latents.choroid_thickness_um / PIXEL_HEIGHT_UM).round().max(1.0) as usize;
    if RPE_BOTTOM + choroid_px > h {
        return Err(Error::invalid(format!(
            "choroid of {} um exceeds image depth",
            latents.choroid_thickness_um
        )));
    }

    let elevation = drusen_elevation(latents, fx, w)?;

    for x in 0..w {
        let xc = x as f64 + 0.5;
        let dxf = xc - fx;
        let top = RETINA_TOP + FOVEAL_PIT_DEPTH * (-(dxf / 16.0).powi(2)).exp();
        let nfl = 2.0 + 8.0 * (1.0 - (-(dxf / 20.0).powi(2)).exp());
        let top = top.round() as usize;
        let nfl_bottom = (top + nfl.round() as usize).min(INNER_BOTTOM);
        let lift = elevation[x];
        let bands: [(usize, f32, u8); 9] = [
            (top, VITREOUS, 0),
            (nfl_bottom, NFL, 0),
            (INNER_BOTTOM, INNER, 0),
            (ONL_BOTTOM - lift, ONL, 0),
            (EZ_BOTTOM - lift, EZ, 0),
            (RPE_TOP - lift, GAP, 0),
            (RPE_BOTTOM - lift, RPE, if lift > 0 { StructureMask::DRUSEN } else { 0 }),
            (RPE_BOTTOM, DRUSEN, StructureMask::DRUSEN),
            (RPE_BOTTOM + choroid_px, CHOROID, 0),
        ];
        let mut y = 0;
        for (end, value, bit) in bands {
            while y < end.min(h) {
                img.set(y, x, value);
                mask.data[y * w + x] |= bit;
                y += 1;
            }
        }
        while y < h {
            img.set(y, x, SCLERA);
            y += 1;
        }
    }

    if latents.atrophy_width_um > 0.0 {
        let (start, n) = lateral_span(latents.atrophy_width_um, fx, w, "atrophy")?;
        let hyper_end = (RPE_BOTTOM + choroid_px + HYPERTRANSMISSION_DEPTH).min(h);
        for x in start..start + n {
            for y in ONL_BOTTOM - elevation[x]..RPE_BOTTOM {
                img.set(y, x, ATROPHIC);
                mask.data[y * w + x] = (mask.data[y * w + x] & !StructureMask::DRUSEN) | StructureMask::ATROPHY;
            }
            for y in RPE_BOTTOM..hyper_end {
                img.set(y, x, HYPER);
                mask.data[y * w + x] = (mask.data[y * w + x] & !StructureMask::DRUSEN)
                    | StructureMask::HYPERTRANSMISSION;
            }
        }
    }

    if latents.fluid_type != FluidType::None {
        let (start, n) = lateral_span(latents.fluid_width_um, fx, w, "fluid")?;
        let rx = n as f64 / 2.0;
        let cx = start as f64 + rx;
        let (cy, ry, bit, above_rpe_only) = match latents.fluid_type {
            FluidType::Intraretinal => (
                100.0,
                (n as f64 * 0.25).clamp(4.0, 14.0),
                StructureMask::INTRARETINAL_FLUID,
                false,
            ),
            _ => (
                RPE_TOP as f64,
                (n as f64 * 0.3).clamp(4.0, 20.0),
                StructureMask::SUBRETINAL_FLUID,
                true,
            ),
        };
        draw_ellipse(&mut img, &mut mask, cx, cy, rx, ry, FLUID, bit, above_rpe_only);
    }

    if latents.scar {
        let cx = fx;
        draw_ellipse(
            &mut img,
            &mut mask,
            cx,
            RPE_TOP as f64,
            30.0,
            12.0,
            SCAR,
            StructureMask::SCAR,
            true,
        );
    }

    let (mut img, mask) = if latents.rotation_deg != 0.0 {
        (img.rotate(latents.rotation_deg, VITREOUS), rotate_mask(&mask, latents.rotation_deg))
    } else {
        (img, mask)
    };

    let contrast = latents.contrast_scale as f32;
    let brightness = latents.brightness_offset as f32;
    let mut noise_rng = rng::from_seed(noise_seed);
    let speckle = Normal::new(0.0, config.speckle_sd.max(0.0))
        .map_err(|e| Error::invalid(format!("speckle: {e}")))?;
    for v in &mut img.data {
        let n = speckle.sample(&mut noise_rng) as f32;
        *v = (*v * contrast + brightness + n).clamp(0.0, 1.0);
    }
    Ok(Rendered { image: img, mask })
}

/// Columns `[start, start + n)` covered by a structure of lateral size
/// `width_um` centred on `centre`.
fn lateral_span(width_um: f64, centre: f64, w: usize, what: &str) -> Result<(usize, usize)> {
    let n = (width_um / PIXEL_WIDTH_UM).round().max(1.0) as usize;
    let start = (centre - n as f64 / 2.0).round();
    if start < 0.0 || start as usize + n > w {
        return Err(Error::invalid(format!(
            "{what} of {width_um} um at column {centre:.1} exceeds image bounds"
        )));
    }
    Ok((start as usize, n))
}

/// Per-column RPE elevation (pixels) produced by the drusen.
fn drusen_elevation(latents: &LatentFactors, fx: f64, w: usize) -> Result<Vec<usize>> {
    let mut lift = vec![0usize; w];
    if !latents.has_drusen() {
        return Ok(lift);
    }
    let n_px = (latents.drusen_diameter_um / PIXEL_WIDTH_UM).round().max(1.0) as usize;
    let gap = (n_px / 2).max(6);
    let count = latents.drusen_count as usize;
    let span = count * n_px + (count - 1) * gap;
    let height = (latents.drusen_diameter_um * 0.3 / PIXEL_HEIGHT_UM).clamp(3.0, 30.0);
    let first = (fx - span as f64 / 2.0).round();
    if first < 0.0 || first as usize + span > w {
        return Err(Error::invalid(format!(
            "{count} drusen of {} um exceed image bounds",
            latents.drusen_diameter_um
        )));
    }
    let first = first as usize;
    for i in 0..count {
        let start = first + i * (n_px + gap);
        let half = n_px as f64 / 2.0;
        for x in start..start + n_px {
            let u = (x as f64 + 0.5 - start as f64 - half) / half;
            let h = (height * (1.0 - u * u).max(0.0).sqrt()).round().max(1.0);
            lift[x] = h as usize;
        }
    }
    Ok(lift)
}

#[allow(clippy::too_many_arguments)]
fn draw_ellipse(
    img: &mut GrayImage,
    mask: &mut StructureMask,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    value: f32,
    bit: u8,
    upper_half: bool,
) {
    let y_end = if upper_half { cy.floor() as usize } else { (cy + ry).ceil() as usize };
    let y_start = (cy - ry).floor().max(0.0) as usize;
    let x_start = (cx - rx).floor().max(0.0) as usize;
    let x_end = ((cx + rx).ceil() as usize).min(img.width);
    for y in y_start..y_end.min(img.height) {
        for x in x_start..x_end {
            let u = (x as f64 + 0.5 - cx) / rx;
            let v = (y as f64 + 0.5 - cy) / ry;
            if u * u + v * v <= 1.0 {
                img.set(y, x, value);
                mask.data[y * img.width + x] |= bit;
            }
        }
    }
}

fn rotate_mask(mask: &StructureMask, degrees: f64) -> StructureMask {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (mask.height as f64 - 1.0) / 2.0;
    let cx = (mask.width as f64 - 1.0) / 2.0;
    let mut out = StructureMask::new(mask.height, mask.width);
    for y in 0..mask.height {
        let dy = y as f64 - cy;
        for x in 0..mask.width {
            let dx = x as f64 - cx;
            let sx = (c * dx - s * dy + cx).round();
            let sy = (s * dx + c * dy + cy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < mask.width && (sy as usize) < mask.height {
                out.data[y * mask.width + x] = mask.get(sy as usize, sx as usize);
            }
        }
    }
    out
}
