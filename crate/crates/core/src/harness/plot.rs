//! SVG rate-distortion plots: bpp against MS-SSIM and MR-SSIM, side and
//! central series.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::eval::{read_rd_csv, RdPoint};
use crate::error::{MdcError, Result};

const SIDE: RGBColor = RGBColor(31, 119, 180);
const CENTRAL: RGBColor = RGBColor(214, 39, 40);

fn plot_err(e: impl std::fmt::Display) -> MdcError {
    MdcError::Plot(e.to_string())
}

fn draw(path: &Path, metric: &str, points: &[RdPoint], side: fn(&RdPoint) -> f64, central: fn(&RdPoint) -> f64) -> Result<()> {
    let (mut x_max, mut y_min, mut y_max) = (0.0f64, 1.0f64, 0.0f64);
    for p in points {
        x_max = x_max.max(p.bpp);
        for v in [side(p), central(p)] {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    let pad = ((y_max - y_min) * 0.1).max(0.01);
    let x_range = 0.0..(x_max * 1.1).max(1e-3);
    let y_range = (y_min - pad)..(y_max + pad).min(1.0 + pad);

    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} vs rate"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x_range, y_range)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("bpp").y_desc(metric).draw().map_err(plot_err)?;

    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    for (label, color, f) in [("side", SIDE, side), ("central", CENTRAL, central)] {
        chart
            .draw_series(sorted.iter().map(|p| Circle::new((p.bpp, f(p)), 3, color.filled())))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
        if let Some(m) = RdPoint::mean(points) {
            chart
                .draw_series(std::iter::once(TriangleMarker::new((m.bpp, f(&m)), 8, color.filled())))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `rd_ms_ssim.svg` and `rd_mr_ssim.svg` into `out_dir`. The mean
/// row of the table is drawn as a triangle, per-image rows as dots.
pub fn plot_rd(csv: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let points: Vec<RdPoint> = read_rd_csv(csv)?.into_iter().filter(|p| p.image != "mean").collect();
    if points.is_empty() {
        return Err(MdcError::invalid("RD table has no image rows"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let ms = out_dir.join("rd_ms_ssim.svg");
    let mr = out_dir.join("rd_mr_ssim.svg");
    draw(&ms, "MS-SSIM", &points, |p| p.side_ms_ssim, |p| p.central_ms_ssim)?;
    draw(&mr, "MR-SSIM", &points, |p| p.side_mr_ssim, |p| p.central_mr_ssim)?;
    Ok(vec![ms, mr])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::write_rd_csv;

    #[test]
    fn writes_two_svgs() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<RdPoint> = (0..4)
            .map(|i| RdPoint {
                image: format!("{i}.png"),
                bpp: 0.1 + 0.05 * i as f64,
                bpp_with_headers: 0.2 + 0.05 * i as f64,
                side_ms_ssim: 0.6 + 0.02 * i as f64,
                side_mr_ssim: 0.65,
                central_ms_ssim: 0.7 + 0.02 * i as f64,
                central_mr_ssim: 0.75,
            })
            .collect();
        let csv = dir.path().join("rd.csv");
        write_rd_csv(&csv, &pts).unwrap();
        let files = plot_rd(&csv, dir.path().join("plots")).unwrap();
        for f in files {
            let svg = fs::read_to_string(f).unwrap();
            assert!(svg.starts_with("<svg"));
            assert!(svg.contains("<circle"));
        }
    }
}
