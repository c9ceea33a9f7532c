//! Fundus image container, codecs, and the enhancement pipeline.
//!
//! Images live in a unit-interval RGB form for processing and convert to
//! 8-bit for storage. PPM (P6, maxval 255) is the round-trip format; PNG
//! is decode-only (8-bit RGB).

mod augment;
mod enhance;

pub use augment::{mixup, sample_mixup_lambda, AugmentConfig};
pub use enhance::GammaMode;

use crate::error::{Error, Result};

/// Supported image file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ppm,
    Png,
}

/// An RGB fundus photograph in unit-interval form.
///
/// `data` is row-major `height x width x 3` with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub source_id: String,
}

impl FundusImage {
    /// Build from unit-interval data, validating length and range.
    pub fn new(height: usize, width: usize, data: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::data(format!(
                "image buffer length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!(
                    "image value {v} at index {i} outside [0, 1]"
                )));
            }
        }
        Ok(FundusImage { height, width, data, source_id: source_id.into() })
    }

    /// Build from 8-bit RGB bytes.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8], source_id: impl Into<String>) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::data(format!(
                "byte buffer length {} does not match {height}x{width}x3",
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(FundusImage { height, width, data, source_id: source_id.into() })
    }

    /// Quantize to 8-bit RGB (round half away from zero, clamped).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Rec. 601 luminance of one pixel, still on the unit interval.
    pub fn luminance(&self, y: usize, x: usize) -> f32 {
        let i = (y * self.width + x) * 3;
        0.299 * self.data[i] + 0.587 * self.data[i + 1] + 0.114 * self.data[i + 2]
    }

    /// Mean Rec. 601 luminance over the frame.
    pub fn mean_luminance(&self) -> f64 {
        let mut acc = 0.0f64;
        for px in self.data.chunks_exact(3) {
            acc += 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        }
        acc / (self.height * self.width) as f64
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major (`3 x H x W`) copy for network input.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        out
    }

    /// Inverse of [`Self::to_chw`].
    pub fn from_chw(height: usize, width: usize, chw: &[f32], source_id: impl Into<String>) -> Result<Self> {
        let plane = height * width;
        if chw.len() != 3 * plane {
            return Err(Error::data(format!(
                "chw buffer length {} does not match 3x{height}x{width}",
                chw.len()
            )));
        }
        let mut data = vec![0.0f32; 3 * plane];
        for i in 0..plane {
            data[i * 3] = chw[i].clamp(0.0, 1.0);
            data[i * 3 + 1] = chw[plane + i].clamp(0.0, 1.0);
            data[i * 3 + 2] = chw[2 * plane + i].clamp(0.0, 1.0);
        }
        FundusImage::new(height, width, data, source_id)
    }
}

/// Decode an image file.
pub fn decode(bytes: &[u8], format: Format) -> Result<FundusImage> {
    match format {
        Format::Ppm => decode_ppm(bytes),
        Format::Png => decode_png(bytes),
    }
}

/// Encode an image file. Only PPM encoding is supported.
pub fn encode(img: &FundusImage, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Ppm => Ok(encode_ppm(img)),
        Format::Png => Err(Error::data("PNG encoding is not supported; use PPM".to_string())),
    }
}

/// Guess the format from a file extension.
pub fn format_for_path(path: &std::path::Path) -> Option<Format> {
    match path.extension()?.to_str()? {
        "ppm" => Some(Format::Ppm),
        "png" => Some(Format::Png),
        _ => None,
    }
}

fn encode_ppm(img: &FundusImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

fn decode_ppm(bytes: &[u8]) -> Result<FundusImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::data("PPM: missing P6 magic".to_string()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::data("PPM: truncated header".to_string())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::data("PPM: malformed header field".to_string()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| Error::data(format!("PPM: header field {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::data(format!(
            "PPM: unsupported maxval {maxval} (only 8-bit, maxval 255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::data("PPM: zero image dimension".to_string()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::data("PPM: expected whitespace after maxval".to_string())),
    }
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::data(format!(
            "PPM: truncated raster, need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )))?;
    FundusImage::from_rgb8(height, width, raster, "")
}

fn decode_png(bytes: &[u8]) -> Result<FundusImage> {
    let map = |e: png::DecodingError| Error::data(format!("PNG: {e}"));
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(map)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::data(format!("PNG: unsupported bit depth {depth:?}, only 8-bit")));
    }
    if color != png::ColorType::Rgb {
        return Err(Error::data(format!("PNG: unsupported color type {color:?}, only RGB")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data("PNG: output size overflow".to_string()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(map)?;
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    FundusImage::from_rgb8(h, w, &buf, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let img = FundusImage::from_rgb8(
            2,
            2,
            &[0, 1, 2, 250, 251, 252, 10, 20, 30, 99, 100, 101],
            "t",
        )
        .unwrap();
        let bytes = encode(&img, Format::Ppm).unwrap();
        let back = decode(&bytes, Format::Ppm).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!(encode(&back, Format::Ppm).unwrap(), bytes);
    }

    #[test]
    fn ppm_known_bytes_decode() {
        let bytes = b"P6\n2 1\n255\n\x00\x80\xff\x01\x02\x03";
        let img = decode(bytes, Format::Ppm).unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 1);
        assert_eq!(img.to_rgb8(), vec![0, 128, 255, 1, 2, 3]);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let bytes = b"P6\n# made by hand\n2 1\n# more\n255\n\x00\x00\x00\xff\xff\xff";
        let img = decode(bytes, Format::Ppm).unwrap();
        assert_eq!(img.to_rgb8(), vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn ppm_truncated_raster_errors() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00";
        let err = decode(bytes, Format::Ppm).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn ppm_wrong_maxval_errors() {
        let bytes = b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00";
        assert!(decode(bytes, Format::Ppm).is_err());
    }

    #[test]
    fn png_rgb8_round_trips_through_decoder() {
        let mut encoded = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut encoded, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[
                10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120,
            ])
            .unwrap();
        }
        let img = decode(&encoded, Format::Png).unwrap();
        assert_eq!(img.height, 2);
        assert_eq!(img.width, 2);
        assert_eq!(
            img.to_rgb8(),
            vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120]
        );
    }

    #[test]
    fn png_16_bit_is_rejected() {
        let mut encoded = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut encoded, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 0, 0, 0, 0, 0]).unwrap();
        }
        let err = decode(&encoded, Format::Png).unwrap_err();
        assert!(err.to_string().contains("bit depth"));
    }

    #[test]
    fn unit_interval_is_enforced() {
        assert!(FundusImage::new(1, 1, vec![0.0, 0.5, 1.1], "t").is_err());
        assert!(FundusImage::new(1, 1, vec![0.0, 0.5, 1.0], "t").is_ok());
    }

    #[test]
    fn rgb8_round_trip_within_one_level() {
        let img = FundusImage::new(1, 1, vec![0.123, 0.456, 0.789], "t").unwrap();
        let back = FundusImage::from_rgb8(1, 1, &img.to_rgb8(), "t").unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }
}
