//! Image sets, the synthetic texture generator and batch sampling.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MdcError, Result};
use crate::image::Image;

/// Decoded RGB images with the files they came from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn from_images(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(MdcError::Dataset("no images".into()));
        }
        let paths = (0..images.len()).map(|i| PathBuf::from(format!("#{i}"))).collect();
        Ok(Dataset { images, paths })
    }

    /// Every PNG directly inside `dir`, in file-name order. Unreadable files
    /// are skipped with a warning.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| MdcError::Dataset(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut images = Vec::new();
        let mut paths = Vec::new();
        for f in files {
            match Image::load_png(&f) {
                Ok(img) => {
                    images.push(img);
                    paths.push(f);
                }
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        }
        if images.is_empty() {
            return Err(MdcError::Dataset(format!("no readable PNG images in {}", dir.display())));
        }
        Ok(Dataset { images, paths })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Smallest rescale that makes both sides at least `crop`, keeping the
/// aspect ratio.
pub fn resize_for_crop(img: &Image, crop: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let short = h.min(w);
    if short >= crop {
        return Ok(img.clone());
    }
    let s = crop as f64 / short as f64;
    let nh = if h == short { crop } else { ((h as f64 * s).round() as usize).max(crop) };
    let nw = if w == short { crop } else { ((w as f64 * s).round() as usize).max(crop) };
    img.resize(nh, nw)
}

/// `count` random `crop × crop` crops drawn with replacement.
pub fn sample_batch(data: &Dataset, crop: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<Image>> {
    if data.is_empty() {
        return Err(MdcError::Dataset("empty dataset".into()));
    }
    (0..count)
        .map(|_| {
            let img = &data.images[rng.gen_range(0..data.len())];
            let img = resize_for_crop(img, crop)?;
            let top = rng.gen_range(0..=img.height() - crop);
            let left = rng.gen_range(0..=img.width() - crop);
            img.crop(top, left, crop, crop)
        })
        .collect()
}

/// A colour texture: a few oriented gratings, soft blobs and grain.
pub fn texture(height: usize, width: usize, rng: &mut impl Rng) -> Image {
    struct Wave {
        fy: f64,
        fx: f64,
        phase: f64,
        amp: f64,
        colour: [f64; 3],
    }
    struct Blob {
        cy: f64,
        cx: f64,
        r: f64,
        colour: [f64; 3],
    }
    let colour = |rng: &mut dyn rand::RngCore| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let base = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
    let waves: Vec<Wave> = (0..rng.gen_range(2..5))
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let period = rng.gen_range(4.0..32.0);
            Wave {
                fy: theta.sin() * 2.0 * PI / period,
                fx: theta.cos() * 2.0 * PI / period,
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: rng.gen_range(0.03..0.12),
                colour: colour(rng),
            }
        })
        .collect();
    let blobs: Vec<Blob> = (0..rng.gen_range(1..4))
        .map(|_| Blob {
            cy: rng.gen_range(0.0..height as f64),
            cx: rng.gen_range(0.0..width as f64),
            r: rng.gen_range(4.0..(height.min(width) as f64 / 2.0).max(5.0)),
            colour: colour(rng),
        })
        .collect();
    let grain = rng.gen_range(0.0..0.03);
    let mut data = vec![0.0; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let (yf, xf) = (y as f64, x as f64);
            let mut px = base;
            for w in &waves {
                let s = (w.fy * yf + w.fx * xf + w.phase).sin() * w.amp;
                for c in 0..3 {
                    px[c] += s * w.colour[c];
                }
            }
            for b in &blobs {
                let d2 = ((yf - b.cy).powi(2) + (xf - b.cx).powi(2)) / (b.r * b.r);
                let g = 0.2 * (-d2).exp();
                for c in 0..3 {
                    px[c] += g * b.colour[c];
                }
            }
            for (c, v) in px.iter().enumerate() {
                let noise = if grain > 0.0 { rng.gen_range(-grain..grain) } else { 0.0 };
                data[(c * height + y) * width + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(3, height, width, data).expect("texture dims")
}

/// `count` textures, reproducible from `seed`.
pub fn textures(count: usize, height: usize, width: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| texture(height, width, &mut rng)).collect()
}

/// Writes `texture_0000.png`, ... into `dir` (created if missing).
pub fn write_textures(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    textures(count, size, size, seed)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("texture_{i:04}.png"));
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_images_are_scaled_up_keeping_aspect() {
        let img = Image::filled(3, 100, 200, 0.3);
        let r = resize_for_crop(&img, 160).unwrap();
        assert_eq!((r.height(), r.width()), (160, 320));
        let big = Image::filled(3, 512, 512, 0.3);
        assert_eq!(resize_for_crop(&big, 160).unwrap(), big);
    }

    #[test]
    fn batches_are_seeded() {
        let data = Dataset::from_images(textures(5, 48, 40, 1)).unwrap();
        let draw = |seed| sample_batch(&data, 32, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = draw(9);
        assert_eq!(a, draw(9));
        assert_ne!(a, draw(10));
        assert!(a.iter().all(|i| i.height() == 32 && i.width() == 32));
        assert!(a.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn small_sources_are_resized_before_cropping() {
        let data = Dataset::from_images(vec![Image::filled(3, 20, 40, 0.5)]).unwrap();
        let b = sample_batch(&data, 32, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b[0].height(), b[0].width()), (32, 32));
    }

    #[test]
    fn textures_vary_and_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_textures(dir.path(), 3, 32, 5).unwrap();
        assert_eq!(paths.len(), 3);
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let data = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(data.len(), 3);
        assert_ne!(data.images[0], data.images[1]);
        let empty = tempfile::tempdir().unwrap();
        assert!(Dataset::load_dir(empty.path()).is_err());
    }
}
