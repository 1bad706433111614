//! Image ingestion: 8-bit RGB PNG or binary PPM (P6), aspect-preserving
//! letterbox resize to a square model input, and the inverse transform for
//! mapping detections back to source pixels.

use std::path::Path;

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Letterbox pad value for the gray borders.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Decoded 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "pixel buffer length {} does not match {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = (y * self.width + x) * 3;
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }
}

/// Affine record mapping letterboxed coordinates back to source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub src_w: usize,
    pub src_h: usize,
}

impl Letterbox {
    /// Map a point from model-input coordinates to source pixels.
    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }

    /// Map a point from source pixels into model-input coordinates.
    pub fn to_input(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    /// Map a detection's box back to source pixels.
    pub fn detection_to_source(&self, d: &Detection) -> Detection {
        let (cx, cy) = self.to_source(d.cx, d.cy);
        Detection {
            cx,
            cy,
            w: d.w / self.scale,
            h: d.h / self.scale,
            ..*d
        }
    }
}

/// Load a PNG or PPM image, reject anything that is not 8-bit RGB(A).
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => {
            let bytes = std::fs::read(path)?;
            decode_ppm(&bytes)
        }
        "png" => {
            let decoded = image::open(path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            match decoded {
                image::DynamicImage::ImageRgb8(_)
                | image::DynamicImage::ImageRgba8(_)
                | image::DynamicImage::ImageLuma8(_)
                | image::DynamicImage::ImageLumaA8(_) => {}
                other => {
                    return Err(Error::Format(format!(
                        "{}: unsupported bit depth {:?}, expected 8-bit",
                        path.display(),
                        other.color()
                    )))
                }
            }
            let rgb = decoded.to_rgb8();
            RgbImage::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
        }
        other => Err(Error::Format(format!(
            "unsupported image extension '{other}' (use .png or .ppm)"
        ))),
    }
}

/// Binary PPM (P6) decoder, maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("ppm: missing {what}")));
        }
        Ok(std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format(format!("ppm: non-ascii {what}")))?
            .to_string())
    };
    if token("magic")? != "P6" {
        return Err(Error::Format("ppm: expected P6 magic".into()));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| Error::Format("ppm: bad width".into()))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| Error::Format("ppm: bad height".into()))?;
    let maxval: usize = token("maxval")?
        .parse()
        .map_err(|_| Error::Format("ppm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "ppm: only 8-bit images supported (maxval 255), got {maxval}"
        )));
    }
    // Single whitespace byte after maxval, then raw data.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "ppm: truncated pixel data ({} of {need} bytes)",
            bytes.len().saturating_sub(pos)
        )));
    }
    RgbImage::new(width, height, bytes[pos..pos + need].to_vec())
}

/// Binary PPM (P6) encoder.
pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Aspect-preserving bilinear resize with gray letterbox padding to a square
/// `target`×`target` tensor in [0,1], plus the inverse transform record.
pub fn letterbox(image: &RgbImage, target: usize) -> Result<(Tensor<f32>, Letterbox)> {
    if target == 0 {
        return Err(Error::InvalidSpec("letterbox target must be >= 1".into()));
    }
    let scale = (target as f64 / image.width as f64).min(target as f64 / image.height as f64);
    let new_w = ((image.width as f64 * scale).round() as usize).clamp(1, target);
    let new_h = ((image.height as f64 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - new_w) / 2;
    let pad_y = (target - new_h) / 2;

    let mut tensor = Tensor::full(Shape::new(1, 3, target, target)?, PAD_VALUE);
    for y in 0..new_h {
        // Map destination pixel center back to source coordinates.
        let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, image.height as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..new_w {
            let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, image.width as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = sx - x0 as f64;
            let p00 = image.pixel(x0, y0);
            let p01 = image.pixel(x1, y0);
            let p10 = image.pixel(x0, y1);
            let p11 = image.pixel(x1, y1);
            let blend = |a: u8, b: u8, c: u8, d: u8| -> f32 {
                let top = a as f64 * (1.0 - fx) + b as f64 * fx;
                let bot = c as f64 * (1.0 - fx) + d as f64 * fx;
                ((top * (1.0 - fy) + bot * fy) / 255.0) as f32
            };
            *tensor.at_mut(0, 0, pad_y + y, pad_x + x) = blend(p00.0, p01.0, p10.0, p11.0);
            *tensor.at_mut(0, 1, pad_y + y, pad_x + x) = blend(p00.1, p01.1, p10.1, p11.1);
            *tensor.at_mut(0, 2, pad_y + y, pad_x + x) = blend(p00.2, p01.2, p10.2, p11.2);
        }
    }
    Ok((
        tensor,
        Letterbox {
            scale,
            pad_x: pad_x as f64,
            pad_y: pad_y as f64,
            src_w: image.width,
            src_h: image.height,
        },
    ))
}
