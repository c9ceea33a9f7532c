//! Enhancement pipeline: circular crop, bilinear resize, contrast-limited
//! adaptive histogram equalization, and gamma correction.

use crate::error::{Error, Result};
use crate::par;

use super::FundusImage;

impl FundusImage {
    /// Crop to the retina disc: bounding box of pixels whose max channel
    /// exceeds `black_threshold` (8-bit scale), expanded to a square
    /// centered on that box. Regions outside the frame pad with black.
    /// An all-dark image is returned unchanged.
    pub fn circular_crop(&self, black_threshold: u8) -> FundusImage {
        let thr = black_threshold as f32 / 255.0;
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x);
                if p[0].max(p[1]).max(p[2]) > thr {
                    r0 = r0.min(y);
                    r1 = r1.max(y);
                    c0 = c0.min(x);
                    c1 = c1.max(x);
                }
            }
        }
        if r0 == usize::MAX {
            return self.clone();
        }
        let bh = r1 - r0 + 1;
        let bw = c1 - c0 + 1;
        let side = bh.max(bw);
        let top = r0 as isize - ((side - bh) / 2) as isize;
        let left = c0 as isize - ((side - bw) / 2) as isize;
        let mut data = vec![0.0f32; side * side * 3];
        for y in 0..side {
            let sy = top + y as isize;
            if sy < 0 || sy as usize >= self.height {
                continue;
            }
            for x in 0..side {
                let sx = left + x as isize;
                if sx < 0 || sx as usize >= self.width {
                    continue;
                }
                let src = (sy as usize * self.width + sx as usize) * 3;
                let dst = (y * side + x) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        FundusImage { height: side, width: side, data, source_id: self.source_id.clone() }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<FundusImage> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::data("resize: target extent must be at least 1".to_string()));
        }
        let scale_y = self.height as f32 / out_h as f32;
        let scale_x = self.width as f32 / out_w as f32;
        let src = &self.data;
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f32; out_h * out_w * 3];
        par::for_each_chunk_mut(&mut data, out_w * 3, |oy, row| {
            let fy = ((oy as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                for ch in 0..3 {
                    let p00 = src[(y0 * w + x0) * 3 + ch];
                    let p01 = src[(y0 * w + x1) * 3 + ch];
                    let p10 = src[(y1 * w + x0) * 3 + ch];
                    let p11 = src[(y1 * w + x1) * 3 + ch];
                    let top = p00 + (p01 - p00) * wx;
                    let bot = p10 + (p11 - p10) * wx;
                    row[ox * 3 + ch] = (top + (bot - top) * wy).clamp(0.0, 1.0);
                }
            }
        });
        Ok(FundusImage { height: out_h, width: out_w, data, source_id: self.source_id.clone() })
    }

    /// Contrast-limited adaptive histogram equalization on the luminance
    /// channel, 256 bins per tile. `clip_limit` is a multiple of the
    /// uniform bin height (`area / 256`); excess above the clip is spread
    /// uniformly with the stepped remainder. Tile mappings are blended by
    /// bilinear interpolation between tile centers. Chroma scales with the
    /// luminance ratio.
    pub fn clahe(&self, tiles: (usize, usize), clip_limit: f64) -> Result<FundusImage> {
        let (tx, ty) = tiles;
        if tx == 0 || ty == 0 {
            return Err(Error::config("clahe: tile counts must be at least 1".to_string()));
        }
        if tx > self.width || ty > self.height {
            return Err(Error::config(format!(
                "clahe: {tx}x{ty} tiles exceed {}x{} image",
                self.width, self.height
            )));
        }
        if clip_limit < 1.0 {
            return Err(Error::config(format!(
                "clahe: clip limit {clip_limit} must be at least 1"
            )));
        }
        let (h, w) = (self.height, self.width);
        // Quantized luminance drives both histograms and the ratio base.
        let luma: Vec<u8> = (0..h * w)
            .map(|i| {
                let y = self.luminance(i / w, i % w);
                (y * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect();

        let col_start = |j: usize| j * w / tx;
        let row_start = |i: usize| i * h / ty;
        let mut luts = vec![[0u8; 256]; tx * ty];
        let mut centers_x = vec![0.0f64; tx];
        let mut centers_y = vec![0.0f64; ty];
        for i in 0..ty {
            let (y0, y1) = (row_start(i), row_start(i + 1));
            centers_y[i] = (y0 + y1 - 1) as f64 * 0.5;
            for j in 0..tx {
                let (x0, x1) = (col_start(j), col_start(j + 1));
                if i == 0 {
                    centers_x[j] = (x0 + x1 - 1) as f64 * 0.5;
                }
                let mut hist = [0u64; 256];
                for y in y0..y1 {
                    for x in x0..x1 {
                        hist[luma[y * w + x] as usize] += 1;
                    }
                }
                let area = ((y1 - y0) * (x1 - x0)) as u64;
                clip_histogram(&mut hist, clip_limit, area);
                let mut cdf = 0u64;
                let lut = &mut luts[i * tx + j];
                for (v, slot) in lut.iter_mut().enumerate() {
                    cdf += hist[v];
                    *slot = ((cdf as f64) * 255.0 / area as f64).round() as u8;
                }
            }
        }

        let src = &self.data;
        let mut data = vec![0.0f32; h * w * 3];
        par::for_each_chunk_mut(&mut data, w * 3, |y, row| {
            let (i0, i1, wy) = span(&centers_y, y as f64);
            for x in 0..w {
                let (j0, j1, wx) = span(&centers_x, x as f64);
                let q = luma[y * w + x] as usize;
                let l00 = luts[i0 * tx + j0][q] as f64;
                let l01 = luts[i0 * tx + j1][q] as f64;
                let l10 = luts[i1 * tx + j0][q] as f64;
                let l11 = luts[i1 * tx + j1][q] as f64;
                let new_y = (l00 * (1.0 - wx) + l01 * wx) * (1.0 - wy)
                    + (l10 * (1.0 - wx) + l11 * wx) * wy;
                let base = (y * w + x) * 3;
                if q == 0 {
                    // No chroma information to scale; fall back to gray.
                    let g = (new_y / 255.0) as f32;
                    row[x * 3] = g.clamp(0.0, 1.0);
                    row[x * 3 + 1] = row[x * 3];
                    row[x * 3 + 2] = row[x * 3];
                } else {
                    let ratio = (new_y / q as f64) as f32;
                    for ch in 0..3 {
                        row[x * 3 + ch] = (src[base + ch] * ratio).clamp(0.0, 1.0);
                    }
                }
            }
        });
        Ok(FundusImage { height: h, width: w, data, source_id: self.source_id.clone() })
    }

    /// Gamma correction on unit-interval pixels.
    pub fn gamma_correct(&self, mode: GammaMode) -> Result<FundusImage> {
        let g = match mode {
            GammaMode::Fixed(g) => {
                if !(0.25..=4.0).contains(&g) {
                    return Err(Error::config(format!(
                        "gamma: fixed exponent {g} outside [0.25, 4]"
                    )));
                }
                g
            }
            GammaMode::Adaptive => {
                let mean = self.mean_luminance();
                if mean <= 0.0 || mean >= 1.0 {
                    1.0
                } else {
                    (0.5f64.ln() / mean.ln()).clamp(0.5, 2.0)
                }
            }
        };
        if g == 1.0 {
            return Ok(self.clone());
        }
        let gf = g as f32;
        let data = par::map_collect(self.data.len(), {
            let src = &self.data;
            move |i| src[i].powf(gf).clamp(0.0, 1.0)
        });
        Ok(FundusImage {
            height: self.height,
            width: self.width,
            data,
            source_id: self.source_id.clone(),
        })
    }
}

/// Exponent selection for [`FundusImage::gamma_correct`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaMode {
    Fixed(f64),
    /// Solves `mean^g = 0.5`, clamped to `[0.5, 2.0]`.
    Adaptive,
}

/// Clip every bin at `clip_limit` uniform bin heights, spreading the
/// excess evenly; the integer remainder lands on evenly stepped bins.
fn clip_histogram(hist: &mut [u64; 256], clip_limit: f64, area: u64) {
    if area == 0 {
        return;
    }
    let limit_f = clip_limit * area as f64 / 256.0;
    if !limit_f.is_finite() {
        return;
    }
    let limit = (limit_f as u64).max(1);
    let mut excess = 0u64;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    if excess == 0 {
        return;
    }
    let per_bin = excess / 256;
    let mut rem = (excess % 256) as usize;
    for h in hist.iter_mut() {
        *h += per_bin;
    }
    if rem > 0 {
        let step = 256usize.div_ceil(rem).max(1);
        let mut i = 0;
        while rem > 0 && i < 256 {
            hist[i] += 1;
            rem -= 1;
            i += step;
        }
        // Anything left over (step overshoot) goes to the lowest bins.
        let mut i = 0;
        while rem > 0 {
            hist[i] += 1;
            rem -= 1;
            i += 1;
        }
    }
}

/// Bracketing centers for coordinate `v`: indices `(lo, hi)` and the
/// interpolation weight toward `hi`. Outside the first/last center the
/// nearest tile wins outright.
fn span(centers: &[f64], v: f64) -> (usize, usize, f64) {
    if v <= centers[0] {
        return (0, 0, 0.0);
    }
    let last = centers.len() - 1;
    if v >= centers[last] {
        return (last, last, 0.0);
    }
    let mut i = 0;
    while centers[i + 1] < v {
        i += 1;
    }
    let w = (v - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, w)
}
