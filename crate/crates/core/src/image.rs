//! Planar RGB images with samples in `[0, 1]`.

use std::path::Path;

use image::{imageops, Rgb32FImage, RgbImage};

use crate::error::{MdcError, Result};
use crate::tensor::Tensor;

/// Channel-major (`[c][h][w]`) image buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(MdcError::shape(format!(
                "{channels}x{height}x{width} image needs {} samples, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
            .expect("image dims are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Image::new(c, h, w, t.data().to_vec()),
            _ => Err(MdcError::shape(format!("expected [c, h, w] tensor, got {:?}", t.shape()))),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
            }
        }
        Image { channels: 3, height: h, width: w, data }
    }

    /// 8-bit RGB with round-to-nearest after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(MdcError::shape(format!("expected 3 channels, got {}", self.channels)));
        }
        let (h, w) = (self.height, self.width);
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        }))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()?.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Mirror-pad (edge sample not repeated) on the bottom/right edges.
    /// Single-pixel dimensions are replicated.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Image> {
        if height < self.height || width < self.width {
            return Err(MdcError::invalid("pad target smaller than image"));
        }
        // mirrored with period 2n − 2, so padding may exceed the image size
        let reflect = |i: usize, n: usize| {
            let j = i % (2 * n - 2);
            if j < n {
                j
            } else {
                2 * n - 2 - j
            }
        };
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = if self.height == 1 { 0 } else { reflect(y, self.height) };
                for x in 0..width {
                    let sx = if self.width == 1 { 0 } else { reflect(x, self.width) };
                    data.push(self.get(c, sy, sx));
                }
            }
        }
        Ok(Image { channels: self.channels, height, width, data })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(MdcError::invalid("crop window outside the image"));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Image { channels: self.channels, height, width, data })
    }

    /// Bilinear (triangle filter) resize of an RGB image.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if self.channels != 3 {
            return Err(MdcError::shape("resize expects an RGB image"));
        }
        let (h, w) = (self.height, self.width);
        let src = Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| self.get(c, y as usize, x as usize) as f32;
            image::Rgb([px(0), px(1), px(2)])
        });
        let out = imageops::resize(&src, width as u32, height as u32, imageops::FilterType::Triangle);
        let mut data = vec![0.0; 3 * height * width];
        for (x, y, px) in out.enumerate_pixels() {
            for c in 0..3 {
                data[(c * height + y as usize) * width + x as usize] = (px.0[c] as f64).clamp(0.0, 1.0);
            }
        }
        Ok(Image { channels: 3, height, width, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let img = Image::new(1, 1, 4, vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let p = img.reflect_pad(1, 7).unwrap();
        assert_eq!(p.data(), &[0.0, 0.1, 0.2, 0.3, 0.2, 0.1, 0.0]);
        let narrow = Image::new(1, 1, 3, vec![0.0, 0.1, 0.2]).unwrap();
        assert_eq!(narrow.reflect_pad(1, 9).unwrap().data(), &[0.0, 0.1, 0.2, 0.1, 0.0, 0.1, 0.2, 0.1, 0.0]);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f64> = (0..3 * 5 * 7).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = Image::new(3, 5, 7, data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert!(img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn resize_scales_dimensions() {
        let img = Image::filled(3, 100, 200, 0.25);
        let r = img.resize(160, 320).unwrap();
        assert_eq!((r.height(), r.width()), (160, 320));
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
