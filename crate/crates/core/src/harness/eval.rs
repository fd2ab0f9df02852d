//! Rate-distortion evaluation over an image directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::Codec;
use crate::bitstream::{CodingMode, HEADER_LEN};
use crate::error::{MdcError, Result};
use crate::image::Image;
use crate::metrics::{mr_ssim, ms_ssim, ScaleWeights};
use crate::training::Dataset;

pub const RD_HEADER: &str = "image,bpp,bpp_with_headers,side_ms_ssim,side_mr_ssim,central_ms_ssim,central_mr_ssim";

/// One image's operating point. Side metrics average the two side decodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub image: String,
    /// Arithmetic-coded payload bits of both descriptions per original pixel.
    pub bpp: f64,
    pub bpp_with_headers: f64,
    pub side_ms_ssim: f64,
    pub side_mr_ssim: f64,
    pub central_ms_ssim: f64,
    pub central_mr_ssim: f64,
}

impl RdPoint {
    fn values(&self) -> [f64; 6] {
        [
            self.bpp,
            self.bpp_with_headers,
            self.side_ms_ssim,
            self.side_mr_ssim,
            self.central_ms_ssim,
            self.central_mr_ssim,
        ]
    }

    fn from_values(image: String, v: [f64; 6]) -> Self {
        RdPoint {
            image,
            bpp: v[0],
            bpp_with_headers: v[1],
            side_ms_ssim: v[2],
            side_mr_ssim: v[3],
            central_ms_ssim: v[4],
            central_mr_ssim: v[5],
        }
    }

    /// Field-wise mean, labelled `mean`.
    pub fn mean(points: &[RdPoint]) -> Option<RdPoint> {
        if points.is_empty() {
            return None;
        }
        let mut acc = [0.0; 6];
        for p in points {
            for (a, v) in acc.iter_mut().zip(p.values()) {
                *a += v;
            }
        }
        Some(RdPoint::from_values("mean".into(), acc.map(|a| a / points.len() as f64)))
    }
}

/// Codes one image and scores its reconstructions.
pub fn evaluate_image(codec: &Codec, name: &str, x: &Image) -> Result<RdPoint> {
    let descs = codec.encode_image(x, CodingMode::Arithmetic)?;
    let pixels = x.pixels() as f64;
    let payload: usize = descs.iter().map(|d| d.payload_bits()).sum();
    let total: usize = descs.iter().map(|d| d.total_bits()).sum();
    debug_assert_eq!(total - payload, 2 * 8 * HEADER_LEN);
    let [c, a, b, _] = codec.reconstruct_all(x)?;
    let w = ScaleWeights::mr();
    Ok(RdPoint {
        image: name.to_string(),
        bpp: payload as f64 / pixels,
        bpp_with_headers: total as f64 / pixels,
        side_ms_ssim: 0.5 * (ms_ssim(x, &a)? + ms_ssim(x, &b)?),
        side_mr_ssim: 0.5 * (mr_ssim(x, &a, &w)? + mr_ssim(x, &b, &w)?),
        central_ms_ssim: ms_ssim(x, &c)?,
        central_mr_ssim: mr_ssim(x, &c, &w)?,
    })
}

/// Per-image points for every PNG in `dir`, in file-name order. Images
/// too small for the five-scale metrics are logged and skipped.
pub fn evaluate_dataset(codec: &Codec, dir: impl AsRef<Path>) -> Result<Vec<RdPoint>> {
    let data = Dataset::load_dir(dir)?;
    let results: Vec<Result<RdPoint>> = data
        .images
        .par_iter()
        .zip(&data.paths)
        .map(|(x, path)| {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            evaluate_image(codec, &name, x)
        })
        .collect();
    let mut points = Vec::with_capacity(results.len());
    for (r, path) in results.into_iter().zip(&data.paths) {
        match r {
            Ok(p) => points.push(p),
            Err(MdcError::ImageTooSmall(msg)) => log::warn!("skipping {}: {msg}", path.display()),
            Err(e) => return Err(e),
        }
    }
    if points.is_empty() {
        return Err(MdcError::Dataset("no image in the directory could be evaluated".into()));
    }
    Ok(points)
}

/// Per-image rows followed by one `mean` row.
pub fn write_rd_csv(path: impl AsRef<Path>, points: &[RdPoint]) -> Result<()> {
    let mut out = String::from(RD_HEADER);
    out.push('\n');
    for p in points.iter().chain(RdPoint::mean(points).as_ref()) {
        out.push_str(&p.image.replace(',', "_"));
        for v in p.values() {
            write!(out, ",{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_rd_csv(path: impl AsRef<Path>) -> Result<Vec<RdPoint>> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RD_HEADER) {
        return Err(MdcError::invalid(format!("{} is not an RD table", path.as_ref().display())));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default().to_string();
        let nums: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| MdcError::invalid(format!("row {}: {e}", i + 2)))?;
        let v: [f64; 6] = nums
            .try_into()
            .map_err(|_| MdcError::invalid(format!("row {} does not have 7 columns", i + 2)))?;
        points.push(RdPoint::from_values(name, v));
    }
    Ok(points)
}
