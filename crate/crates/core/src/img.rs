//! Dense image buffers and the on-disk raster formats.
//!
//! Everything in memory is `f64`, row-major, channel-last. On disk: color as
//! 8-bit PNG, depth as 16-bit PNG with a declared world-unit scale or as
//! 32-bit float PFM, masks as 8-bit PNG with values restricted to {0, 255}.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Row-major H×W×C buffer of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Image::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(y, x, c, f(y, x, c));
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] += v;
    }

    /// All channel values of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn require_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Writes an image with 1 or 3 channels as an 8-bit PNG, clamping to [0,1].
pub fn save_png8(img: &Image, path: &Path) -> Result<()> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match img.channels {
        1 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w, h, buf).unwrap().save(path)
        }
        3 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
            image::RgbImage::from_raw(w, h, buf).unwrap().save(path)
        }
        c => return Err(Error::Format(format!("save_png8: unsupported channel count {c}"))),
    };
    res.map_err(|e| Error::file(path, e.to_string()))
}

/// Loads an 8-bit PNG as RGB in [0,1].
pub fn load_png8_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Image { height: h, width: w, channels: 3, data })
}

/// Writes a single-channel image as a 16-bit PNG of `round(v / scale)`.
pub fn save_png16(img: &Image, scale: f64, path: &Path) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Format("save_png16 expects a single-channel image".into()));
    }
    let buf: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (v / scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        img.width as u32,
        img.height as u32,
        buf,
    )
    .unwrap()
    .save(path)
    .map_err(|e| Error::file(path, e.to_string()))
}

/// Loads a 16-bit PNG and multiplies by `scale` into world units.
pub fn load_png16(path: &Path, scale: f64) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&v| v as f64 * scale).collect();
    Ok(Image { height: h, width: w, channels: 1, data })
}

/// Loads a binary mask PNG. Any sample outside {0, 255} is a format error.
/// Returns 1.0 where the file holds 255.
pub fn load_mask_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for &v in img.as_raw() {
        match v {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(Error::file(
                    path,
                    format!("mask value {other} is not binary (expected 0 or 255)"),
                ))
            }
        }
    }
    Ok(Image { height: h, width: w, channels: 1, data })
}

/// Writes a single-channel image as a little-endian grayscale PFM.
pub fn save_pfm(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Format("save_pfm expects a single-channel image".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    // PFM stores rows bottom-to-top.
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            f.write_all(&(img.get(y, x, 0) as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a grayscale PFM written by [`save_pfm`] (or any little-endian Pf file).
pub fn load_pfm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "Pf" {
        return Err(Error::file(path, "not a grayscale PFM (missing Pf header)"));
    }
    line.clear();
    r.read_line(&mut line)?;
    let dims: Vec<usize> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if dims.len() != 2 {
        return Err(Error::file(path, "bad PFM dimension line"));
    }
    let (w, h) = (dims[0], dims[1]);
    line.clear();
    r.read_line(&mut line)?;
    let scale: f64 = line
        .trim()
        .parse()
        .map_err(|_| Error::file(path, "bad PFM scale line"))?;
    if scale >= 0.0 {
        return Err(Error::file(path, "big-endian PFM is not supported"));
    }
    let mut raw = vec![0u8; w * h * 4];
    r.read_exact(&mut raw)?;
    let mut img = Image::zeros(h, w, 1);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        let y = h - 1 - i / w;
        let x = i % w;
        img.set(y, x, 0, v);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_scale_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let mut img = Image::zeros(2, 2, 1);
        img.set(0, 0, 0, 1.0); // stored as 1000 with scale 0.001
        save_png16(&img, 0.001, &p).unwrap();
        let back = load_png16(&p, 0.001).unwrap();
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert_eq!(back.get(1, 1, 0), 0.0);
    }

    #[test]
    fn pfm_round_trip_is_lossless_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let img = Image::from_fn(3, 5, 1, |y, x, _| (y * 5 + x) as f64 * 0.37 + 0.001);
        save_pfm(&img, &p).unwrap();
        let back = load_pfm(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let buf = image::GrayImage::from_raw(1, 1, vec![128]).unwrap();
        buf.save(&p).unwrap();
        let err = load_mask_png(&p).unwrap_err();
        assert!(err.to_string().contains("128"), "{err}");
    }
}
