//! Dense float images in `[0, 1]` and 8-bit PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height x width x channels, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(Error::Dimension(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "image shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Rec. 601 luminance plane (single channel passes through).
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels < 3 {
            return self.data.iter().step_by(self.channels).copied().collect();
        }
        self.data
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Horizontal concatenation of equally sized tiles.
    pub fn hstack(tiles: &[Image]) -> Result<Image> {
        let first = tiles
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero images".into()))?;
        for t in tiles {
            first.check_same_shape(t)?;
        }
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(h * w * c * tiles.len());
        for y in 0..h {
            for t in tiles {
                data.extend_from_slice(&t.data[y * w * c..(y + 1) * w * c]);
            }
        }
        Image::new(h, w * tiles.len(), c, data)
    }

    /// Vertical concatenation of images with equal width and channels.
    pub fn vstack(rows: &[Image]) -> Result<Image> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero images".into()))?;
        let (_, w, c) = first.shape();
        let mut h = 0;
        let mut data = Vec::new();
        for r in rows {
            if r.width != w || r.channels != c {
                return Err(Error::Dimension("row images differ in width".into()));
            }
            h += r.height;
            data.extend_from_slice(&r.data);
        }
        Image::new(h, w, c, data)
    }

    /// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Dimension(format!(
                "PNG export expects 3 channels, got {}",
                self.channels
            )));
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| f64::from(b) / 255.0)
            .collect();
        Image::new(h as usize, w as usize, 3, data)
    }

    /// Nearest-neighbour resample; used to bring external images to the
    /// backend's render resolution.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                let base = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[base..base + c]);
            }
        }
        Image {
            height,
            width,
            channels: c,
            data,
        }
    }
}

/// Batch of same-shaped images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageBatch(pub Vec<Image>);

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Image> {
        self.0.iter()
    }
}

impl std::ops::Index<usize> for ImageBatch {
    type Output = Image;
    fn index(&self, i: usize) -> &Image {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64) / 59.0).collect();
        let img = Image::new(4, 5, 3, data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.shape(), (4, 5, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn hstack_width_is_sum_of_tiles() {
        let a = Image::filled(2, 3, 3, 0.0);
        let b = Image::filled(2, 3, 3, 1.0);
        let s = Image::hstack(&[a, b]).unwrap();
        assert_eq!(s.shape(), (2, 6, 3));
        assert_eq!(s.at(1, 2, 0), 0.0);
        assert_eq!(s.at(1, 3, 0), 1.0);
    }

    #[test]
    fn missing_png_is_io_error() {
        let err = Image::load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
