//! Binary PGM/PPM images of correlation maps and keypoint overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::pixelwise_correlation_map;
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::keypoints_to_input_pixels;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Row-major, interleaved.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        Self {
            width,
            height,
            channels: 1,
            pixels,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::BadParam("malformed PGM/PPM".into());
        // header is three newline-terminated lines
        let mut fields = Vec::new();
        let mut at = 0;
        for _ in 0..3 {
            let end = bytes[at..].iter().position(|&b| b == b'\n').ok_or_else(bad)? + at;
            fields.push(std::str::from_utf8(&bytes[at..end]).map_err(|_| bad())?);
            at = end + 1;
        }
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(bad()),
        };
        let (w, h) = fields[1].split_once(' ').ok_or_else(bad)?;
        let (width, height): (usize, usize) =
            (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?);
        if fields[2] != "255" || bytes.len() - at != width * height * channels {
            return Err(bad());
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: bytes[at..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}

/// Min-max normalization of an `H×W` map to 0..=255; a constant map becomes 128.
pub fn normalize_to_gray(map: &Tensor) -> Result<Image> {
    if map.rank() != 2 {
        return Err(crate::error::shape_mismatch(map.shape(), &[0, 0]));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pixels = map
        .data()
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    Ok(Image::gray(w, h, pixels))
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale(img: &Image, factor: usize) -> Image {
    let (w, h, c) = (img.width * factor, img.height * factor, img.channels);
    let mut pixels = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            let src = ((y / factor) * img.width + x / factor) * c;
            pixels.extend_from_slice(&img.pixels[src..src + c]);
        }
    }
    Image {
        width: w,
        height: h,
        channels: c,
        pixels,
    }
}

/// `3×H×W` tensor in `[0, 1]` to an RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<Image> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(crate::error::shape_mismatch(t.shape(), &[3, 0, 0]));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut pixels = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels.push((t.get(&[c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(Image {
        width: w,
        height: h,
        channels: 3,
        pixels,
    })
}

/// Gray level of the markers of scale `s` (0-based).
pub fn marker_level(s: usize) -> u8 {
    [255u8, 0, 128, 64].get(s).copied().unwrap_or(192)
}

/// Plus-shaped 3×3 marker centred on `(row, col)`, clipped at the border.
pub fn draw_cross(img: &mut Image, row: isize, col: isize, level: u8) {
    for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let (r, c) = (row + dr, col + dc);
        if r >= 0 && c >= 0 && (r as usize) < img.height && (c as usize) < img.width {
            let at = (r as usize * img.width + c as usize) * img.channels;
            img.pixels[at..at + img.channels].fill(level);
        }
    }
}

/// Correlation map of the backbone features, enlarged to the input resolution.
pub fn render_correlation(
    params: &ModelParams,
    config: &ModelConfig,
    x_rgb: &Tensor,
    x_d: &Tensor,
) -> Result<Image> {
    let (out, _) = model_forward(params, config, x_rgb, x_d)?;
    let map = pixelwise_correlation_map(&out.f_rgb, &out.f_d)?;
    Ok(upscale(&normalize_to_gray(&map)?, config.total_stride()))
}

/// The input image with one cross per keypoint; one gray level per scale.
pub fn render_keypoints(
    params: &ModelParams,
    config: &ModelConfig,
    x_rgb: &Tensor,
    x_d: &Tensor,
    background: &Tensor,
) -> Result<Image> {
    let (out, _) = model_forward(params, config, x_rgb, x_d)?;
    let mut img = tensor_to_rgb(background)?;
    let Some(local) = out.local else {
        return Ok(img);
    };
    let pts = keypoints_to_input_pixels(&local.keypoints, config);
    let scale_of = local
        .keypoints
        .iter()
        .enumerate()
        .flat_map(|(s, kp)| std::iter::repeat_n(s, kp.coords.len()));
    for ((r, c), s) in pts.into_iter().zip(scale_of) {
        draw_cross(&mut img, r.round() as isize, c.round() as isize, marker_level(s));
    }
    Ok(img)
}
