//! PNG reading and writing on plain `f32` planes.
//!
//! Pixels are decoded without any color-profile handling; values are scaled
//! by the bit-depth maximum so that 8-bit and 16-bit files map onto [0, 1].

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{PdfnetError, Result};

/// A `channels × height × width` plane of samples in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(PdfnetError::NotFound(path.to_path_buf()));
    }
    Ok(image::ImageReader::open(path)
        .map_err(|e| PdfnetError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| PdfnetError::io(path, e))?
        .decode()?)
}

fn is_16bit(img: &DynamicImage) -> bool {
    img.color().bytes_per_pixel() / img.color().channel_count() == 2
}

/// Reads an RGB image scaled to [0, 1].
pub fn read_rgb(path: &Path) -> Result<Plane> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    if is_16bit(&img) {
        let buf = img.to_rgb16();
        for (x, y, p) in buf.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 65535.0;
            }
        }
    } else {
        let buf = img.to_rgb8();
        for (x, y, p) in buf.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
    }
    Ok(Plane::new(3, h, w, data))
}

/// Reads a single-channel image, dividing by 255 or 65535 depending on bit depth.
pub fn read_gray(path: &Path) -> Result<Plane> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = if is_16bit(&img) {
        img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    };
    Ok(Plane::new(1, h, w, data))
}

/// Reads a single-channel image as `(height, width, values)` in double
/// precision. Every sample goes through the 16-bit range, so an 8-bit value `k`
/// lands exactly on the double nearest `k/255`.
pub fn read_gray_f64(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Ok((h, w, data))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PdfnetError::io(parent, e))?;
    }
    Ok(())
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn write_gray8(path: &Path, plane: &Plane) -> Result<()> {
    create_parent(path)?;
    let raw: Vec<u8> = plane.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(plane.width as u32, plane.height as u32, raw)
        .ok_or_else(|| PdfnetError::shape("gray8 buffer size"))?;
    buf.save(path)?;
    Ok(())
}

pub fn write_gray16(path: &Path, plane: &Plane) -> Result<()> {
    create_parent(path)?;
    let raw: Vec<u16> = plane.data.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(plane.width as u32, plane.height as u32, raw)
        .ok_or_else(|| PdfnetError::shape("gray16 buffer size"))?;
    buf.save(path)?;
    Ok(())
}

pub fn write_rgb8(path: &Path, plane: &Plane) -> Result<()> {
    create_parent(path)?;
    let (h, w) = (plane.height, plane.width);
    let mut raw = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw[(y * w + x) * 3 + c] = quantize(plane.at(c, y, x), 255.0) as u8;
            }
        }
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| PdfnetError::shape("rgb8 buffer size"))?;
    buf.save(path)?;
    Ok(())
}

/// Triangle-filter (bilinear) resize of every channel.
pub fn resize_smooth(plane: &Plane, height: usize, width: usize) -> Plane {
    if plane.height == height && plane.width == width {
        return plane.clone();
    }
    let mut out = Vec::with_capacity(plane.channels * height * width);
    for c in 0..plane.channels {
        let start = c * plane.height * plane.width;
        let chan = plane.data[start..start + plane.height * plane.width].to_vec();
        let buf = ImageBuffer::<Luma<f32>, _>::from_raw(plane.width as u32, plane.height as u32, chan)
            .expect("plane size");
        let resized = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        out.extend(resized.into_raw());
    }
    Plane::new(plane.channels, height, width, out)
}

/// Nearest-neighbour resize, used for masks so that they stay binary.
pub fn resize_nearest(plane: &Plane, height: usize, width: usize) -> Plane {
    if plane.height == height && plane.width == width {
        return plane.clone();
    }
    let mut out = Vec::with_capacity(plane.channels * height * width);
    for c in 0..plane.channels {
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * plane.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * plane.width as f64 / width as f64) as usize;
                out.push(plane.at(c, sy.min(plane.height - 1), sx.min(plane.width - 1)));
            }
        }
    }
    Plane::new(plane.channels, height, width, out)
}
