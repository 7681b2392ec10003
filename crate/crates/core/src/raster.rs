//! In-memory raster images with values in `[0, 1]`, stored row-major HWC.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::contract(format!(
                "raster data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Rec. 601 luma; identity for grayscale rasters.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_gray(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.luminance(),
        }
    }

    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Raster::filled(width, height, self.channels, 0.0);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(sx, sy, c));
                }
            }
        }
        out
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
        if self.channels == 1 {
            DynamicImage::ImageLuma8(
                GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("sized buffer"),
            )
        } else {
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("sized buffer"),
            )
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Raster {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let is_gray = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLumaA16(_)
        );
        if is_gray {
            let g = img.to_luma8();
            Raster {
                width: w,
                height: h,
                channels: 1,
                data: g.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
            }
        } else {
            let rgb = img.to_rgb8();
            Raster {
                width: w,
                height: h,
                channels: 3,
                data: rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
            }
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Raster> {
        let img = image::load_from_memory(bytes)?;
        Ok(Raster::from_dynamic(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Raster> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::from_png_bytes(&bytes)
    }

    /// Quantizes to 8 bits, matching what a PNG round trip would store.
    pub fn quantized(&self) -> Raster {
        Raster {
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_raster_is_exact() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i as f64) / 35.0).collect();
        let r = Raster::new(4, 3, 3, data).unwrap().quantized();
        let back = Raster::from_png_bytes(&r.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn gray_rasters_stay_single_channel() {
        let r = Raster::filled(2, 2, 1, 0.5).quantized();
        let back = Raster::from_png_bytes(&r.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back.channels, 1);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Raster::new(2, 2, 3, vec![0.0; 5]).is_err());
    }
}
