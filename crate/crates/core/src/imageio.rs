//! Floating-point images and 8-bit PNG input/output.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved image with 3 (RGB) or 4 (RGBA) channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_rgb(width: usize, height: usize, pixels: &[[f64; 3]]) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            channels: 3,
            data: pixels.iter().flatten().copied().collect(),
        }
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let p = self.pixel(i);
        [p[0], p[1], p[2]]
    }

    /// RGB image; RGBA input is alpha-composited over `background`.
    pub fn over(&self, background: [f64; 3]) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 3);
        for i in 0..self.width * self.height {
            let p = self.pixel(i);
            for c in 0..3 {
                out.data[3 * i + c] = p[c] * p[3] + background[c] * (1.0 - p[3]);
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Round-half-up 8-bit quantization.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    let color = match image.channels {
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel image"))),
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        image.width as u32,
        image.height as u32,
        color,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

/// Reads a PNG as RGB or RGBA (other layouts are converted to RGBA).
pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        image::DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => (4, other.into_rgba8().into_raw()),
    };
    Ok(Image {
        width,
        height,
        channels,
        data: raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}
