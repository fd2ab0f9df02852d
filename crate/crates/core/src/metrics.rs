//! Distortion measures and the compressive objective.
//!
//! The SSIM family here is the usual Gaussian-window formulation (11 taps,
//! σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1). The multi-scale index
//! multiplies contrast-structure means at the four finer scales and the full
//! SSIM mean at the coarsest, each raised to its scale weight, and averages
//! the result over colour channels. Weight vectors decide which flavour is
//! computed: [`ScaleWeights::ms`] gives classic MS-SSIM, [`ScaleWeights::mr`]
//! weights each scale by its pixel share.
//!
//! At coarse scales of small images the window is cut to the largest odd
//! size that fits, so any image with both sides ≥ 16 has five scales.

use crate::error::{MdcError, Result};
use crate::image::Image;

pub const SCALES: usize = 5;
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Per-scale exponents of the multi-scale index, finest scale first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleWeights([f64; SCALES]);

impl ScaleWeights {
    pub const MR: [f64; SCALES] = [0.750, 0.188, 0.047, 0.012, 0.003];
    pub const MS: [f64; SCALES] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

    /// Rejects negative entries and sums further than 5e-4 from one (the
    /// published four-digit MS weights add up to 1.0001).
    pub fn new(w: [f64; SCALES]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MdcError::invalid(format!("scale weights must be non-negative: {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 5e-4 {
            return Err(MdcError::invalid(format!("scale weights sum to {s}, expected 1")));
        }
        Ok(ScaleWeights(w))
    }

    pub fn mr() -> Self {
        ScaleWeights(Self::MR)
    }

    pub fn ms() -> Self {
        ScaleWeights(Self::MS)
    }

    /// Pixel-share weights `4^-s / Σ 4^-s`.
    pub fn area_normalized() -> Self {
        let raw: Vec<f64> = (0..SCALES).map(|s| 4f64.powi(-(s as i32))).collect();
        let total: f64 = raw.iter().sum();
        let mut w = [0.0; SCALES];
        for (o, r) in w.iter_mut().zip(&raw) {
            *o = r / total;
        }
        ScaleWeights(w)
    }

    pub fn as_array(&self) -> &[f64; SCALES] {
        &self.0
    }
}

/// Normalized Gaussian taps, `size` odd.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn window_for(h: usize, w: usize) -> usize {
    let side = h.min(w).min(WINDOW);
    if side % 2 == 0 {
        side - 1
    } else {
        side
    }
}

/// Separable "valid" correlation with a square window.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let s = win.len();
    let (ho, wo) = (h + 1 - s, w + 1 - s);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut tmp[y * wo..(y + 1) * wo];
        for (x, o) in out.iter_mut().enumerate() {
            *o = win.iter().zip(&row[x..x + s]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        let o = &mut out[y * wo..(y + 1) * wo];
        for (t, &g) in win.iter().enumerate() {
            let r = &tmp[(y + t) * wo..(y + t + 1) * wo];
            for (ov, rv) in o.iter_mut().zip(r) {
                *ov += g * rv;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let s = win.len();
    let (ho, wo) = (h + 1 - s, w + 1 - s);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..ho {
        let gr = &g[y * wo..(y + 1) * wo];
        for (t, &gw) in win.iter().enumerate() {
            let r = &mut tmp[(y + t) * wo..(y + t + 1) * wo];
            for (rv, gv) in r.iter_mut().zip(gr) {
                *rv += gw * gv;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let tr = &tmp[y * wo..(y + 1) * wo];
        let o = &mut out[y * w..(y + 1) * w];
        for (x, &tv) in tr.iter().enumerate() {
            for (ov, &gw) in o[x..x + s].iter_mut().zip(win) {
                *ov += gw * tv;
            }
        }
    }
    out
}

/// Local statistics of one plane pair at one scale.
struct PlaneStats {
    h: usize,
    w: usize,
    win: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    lum: Vec<f64>,
    cs: Vec<f64>,
    cs_mean: f64,
    ssim_mean: f64,
}

fn plane_stats(x: &[f64], y: &[f64], h: usize, w: usize, win_size: usize) -> PlaneStats {
    let win = gaussian_window(win_size, WINDOW_SIGMA);
    let mu_x = filter_valid(x, h, w, &win);
    let mu_y = filter_valid(y, h, w, &win);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let exx = filter_valid(&sq(x, x), h, w, &win);
    let eyy = filter_valid(&sq(y, y), h, w, &win);
    let exy = filter_valid(&sq(x, y), h, w, &win);
    let n = mu_x.len();
    let (mut var_x, mut var_y, mut lum, mut cs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut cs_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        var_x[i] = exx[i] - mx * mx;
        var_y[i] = eyy[i] - my * my;
        let cov = exy[i] - mx * my;
        lum[i] = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        cs[i] = (2.0 * cov + C2) / (var_x[i] + var_y[i] + C2);
        cs_sum += cs[i];
        ssim_sum += lum[i] * cs[i];
    }
    PlaneStats {
        h,
        w,
        win,
        mu_x,
        mu_y,
        var_x,
        var_y,
        lum,
        cs,
        cs_mean: cs_sum / n as f64,
        ssim_mean: ssim_sum / n as f64,
    }
}

/// Gradients of `g_cs·cs_mean + g_ssim·ssim_mean` with respect to both planes.
fn plane_backward(st: &PlaneStats, x: &[f64], y: &[f64], g_cs: f64, g_ssim: f64) -> (Vec<f64>, Vec<f64>) {
    let n = st.mu_x.len();
    let inv = 1.0 / n as f64;
    let (mut d_mx, mut d_my) = (vec![0.0; n], vec![0.0; n]);
    let (mut d_exx, mut d_eyy, mut d_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (mx, my, l, cs) = (st.mu_x[i], st.mu_y[i], st.lum[i], st.cs[i]);
        let b1 = mx * mx + my * my + C1;
        let b2 = st.var_x[i] + st.var_y[i] + C2;
        let dcs = (g_cs + g_ssim * l) * inv;
        let dl = g_ssim * cs * inv;
        let d_cov = dcs * 2.0 / b2;
        let d_var = -dcs * cs / b2;
        d_exx[i] = d_var;
        d_eyy[i] = d_var;
        d_exy[i] = d_cov;
        d_mx[i] = dl * 2.0 * (my - l * mx) / b1 - 2.0 * mx * d_var - my * d_cov;
        d_my[i] = dl * 2.0 * (mx - l * my) / b1 - 2.0 * my * d_var - mx * d_cov;
    }
    let (h, w, win) = (st.h, st.w, &st.win);
    let a_mx = filter_valid_adjoint(&d_mx, h, w, win);
    let a_my = filter_valid_adjoint(&d_my, h, w, win);
    let a_xx = filter_valid_adjoint(&d_exx, h, w, win);
    let a_yy = filter_valid_adjoint(&d_eyy, h, w, win);
    let a_xy = filter_valid_adjoint(&d_exy, h, w, win);
    let dx = (0..h * w).map(|i| a_mx[i] + 2.0 * x[i] * a_xx[i] + y[i] * a_xy[i]).collect();
    let dy = (0..h * w).map(|i| a_my[i] + 2.0 * y[i] * a_yy[i] + x[i] * a_xy[i]).collect();
    (dx, dy)
}

fn pool2(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let a = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1];
            let b = src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
            out[y * wo + x] = 0.25 * (a + b);
        }
    }
    out
}

fn pool2_adjoint(g: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for y in 0..ho {
        for x in 0..wo {
            let v = 0.25 * g[y * wo + x];
            acc[2 * y * w + 2 * x] += v;
            acc[2 * y * w + 2 * x + 1] += v;
            acc[(2 * y + 1) * w + 2 * x] += v;
            acc[(2 * y + 1) * w + 2 * x + 1] += v;
        }
    }
}

/// `max(t, 0)^p` and its derivative.
fn pow_relu(t: f64, p: f64) -> (f64, f64) {
    if p == 0.0 {
        (1.0, 0.0)
    } else if t <= 0.0 {
        (0.0, 0.0)
    } else {
        let v = t.powf(p);
        (v, p * v / t)
    }
}

type PlaneGrad = Option<(Vec<f64>, Vec<f64>)>;

fn multiscale_plane(x: &[f64], y: &[f64], h: usize, w: usize, weights: &[f64; SCALES], grad: bool) -> (f64, PlaneGrad) {
    let mut xs = vec![x.to_vec()];
    let mut ys = vec![y.to_vec()];
    let mut dims = vec![(h, w)];
    for s in 1..SCALES {
        let (ph, pw) = dims[s - 1];
        xs.push(pool2(&xs[s - 1], ph, pw));
        ys.push(pool2(&ys[s - 1], ph, pw));
        dims.push((ph / 2, pw / 2));
    }
    let stats: Vec<PlaneStats> = (0..SCALES)
        .map(|s| {
            let (sh, sw) = dims[s];
            plane_stats(&xs[s], &ys[s], sh, sw, window_for(sh, sw))
        })
        .collect();
    let terms: Vec<(f64, f64)> = stats
        .iter()
        .enumerate()
        .map(|(s, st)| pow_relu(if s + 1 < SCALES { st.cs_mean } else { st.ssim_mean }, weights[s]))
        .collect();
    let value: f64 = terms.iter().map(|t| t.0).product();
    if !grad {
        return (value, None);
    }
    let mut gx: Vec<Vec<f64>> = dims.iter().map(|&(a, b)| vec![0.0; a * b]).collect();
    let mut gy = gx.clone();
    for s in (0..SCALES).rev() {
        let others: f64 = terms.iter().enumerate().filter(|(j, _)| *j != s).map(|(_, t)| t.0).product();
        let d_term = terms[s].1 * others;
        if d_term != 0.0 {
            let (g_cs, g_ssim) = if s + 1 < SCALES { (d_term, 0.0) } else { (0.0, d_term) };
            let (dx, dy) = plane_backward(&stats[s], &xs[s], &ys[s], g_cs, g_ssim);
            for (a, b) in gx[s].iter_mut().zip(&dx) {
                *a += b;
            }
            for (a, b) in gy[s].iter_mut().zip(&dy) {
                *a += b;
            }
        }
        if s > 0 {
            let (ph, pw) = dims[s - 1];
            let (cx, cy) = (std::mem::take(&mut gx[s]), std::mem::take(&mut gy[s]));
            pool2_adjoint(&cx, ph, pw, &mut gx[s - 1]);
            pool2_adjoint(&cy, ph, pw, &mut gy[s - 1]);
        }
    }
    let dx = std::mem::take(&mut gx[0]);
    let dy = std::mem::take(&mut gy[0]);
    (value, Some((dx, dy)))
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if !x.same_shape(y) {
        return Err(MdcError::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.channels(),
            x.height(),
            x.width(),
            y.channels(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

fn check_multiscale(x: &Image) -> Result<()> {
    let min_side = 1 << (SCALES - 1);
    if x.height() < min_side || x.width() < min_side {
        return Err(MdcError::ImageTooSmall(format!(
            "{}x{} has fewer than {SCALES} dyadic scales",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// Single-scale SSIM averaged over channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    check_pair(x, y)?;
    if x.height() < WINDOW || x.width() < WINDOW {
        return Err(MdcError::ImageTooSmall(format!("{}x{} is smaller than the {WINDOW}x{WINDOW} window", x.height(), x.width())));
    }
    let (h, w) = (x.height(), x.width());
    let total: f64 = (0..x.channels()).map(|c| plane_stats(x.plane(c), y.plane(c), h, w, WINDOW).ssim_mean).sum();
    Ok(total / x.channels() as f64)
}

/// Multi-scale structural similarity under the given scale weights.
pub fn multiscale_ssim(x: &Image, y: &Image, weights: &ScaleWeights) -> Result<f64> {
    Ok(multiscale_ssim_grad(x, y, weights, false, false)?.0)
}

/// The multi-resolution index `f_MR`; identical computation, pixel-share weights.
pub fn mr_ssim(x: &Image, y: &Image, weights: &ScaleWeights) -> Result<f64> {
    multiscale_ssim(x, y, weights)
}

/// Classic MS-SSIM.
pub fn ms_ssim(x: &Image, y: &Image) -> Result<f64> {
    multiscale_ssim(x, y, &ScaleWeights::ms())
}

/// Value and (optionally) gradients with respect to each argument.
pub fn multiscale_ssim_grad(
    x: &Image,
    y: &Image,
    weights: &ScaleWeights,
    need_x: bool,
    need_y: bool,
) -> Result<(f64, Option<Image>, Option<Image>)> {
    check_pair(x, y)?;
    check_multiscale(x)?;
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let grad = need_x || need_y;
    let mut value = 0.0;
    let mut dx = need_x.then(|| vec![0.0; c * h * w]);
    let mut dy = need_y.then(|| vec![0.0; c * h * w]);
    let inv_c = 1.0 / c as f64;
    for ch in 0..c {
        let (v, g) = multiscale_plane(x.plane(ch), y.plane(ch), h, w, &weights.0, grad);
        value += v * inv_c;
        if let Some((gx, gy)) = g {
            if let Some(dx) = dx.as_mut() {
                for (o, v) in dx[ch * h * w..(ch + 1) * h * w].iter_mut().zip(gx) {
                    *o = v * inv_c;
                }
            }
            if let Some(dy) = dy.as_mut() {
                for (o, v) in dy[ch * h * w..(ch + 1) * h * w].iter_mut().zip(gy) {
                    *o = v * inv_c;
                }
            }
        }
    }
    let wrap = |d: Option<Vec<f64>>| d.map(|d| Image::new(c, h, w, d)).transpose();
    Ok((value, wrap(dx)?, wrap(dy)?))
}

/// `(1/(H·W)) Σ_pixels ‖x_i − y_i‖₁` with the norm taken over channels.
pub fn mae_term(x: &Image, y: &Image) -> Result<f64> {
    check_pair(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / x.pixels() as f64)
}

/// Gradient of [`mae_term`] with respect to `y` (subgradient 0 at ties).
pub fn mae_term_grad(x: &Image, y: &Image) -> Result<Image> {
    check_pair(x, y)?;
    let inv = 1.0 / x.pixels() as f64;
    let d = x.data().iter().zip(y.data()).map(|(a, b)| if b > a { inv } else if b < a { -inv } else { 0.0 }).collect();
    Image::new(x.channels(), x.height(), x.width(), d)
}

/// Pixel-domain reconstruction loss summed over both side decodes and the central decode.
pub fn mae_recon_loss(x: &Image, ya: &Image, yb: &Image, y: &Image) -> Result<f64> {
    Ok(mae_term(x, ya)? + mae_term(x, yb)? + mae_term(x, y)?)
}

/// `−f(x, ya) − f(x, yb) − f(x, y)`.
pub fn structural_loss(x: &Image, ya: &Image, yb: &Image, y: &Image, weights: &ScaleWeights) -> Result<f64> {
    Ok(-mr_ssim(x, ya, weights)? - mr_ssim(x, yb, weights)? - mr_ssim(x, y, weights)?)
}

/// Similarity of the two side decodes; minimizing it pushes them apart.
pub fn distance_loss(ya: &Image, yb: &Image, weights: &ScaleWeights) -> Result<f64> {
    mr_ssim(ya, yb, weights)
}

/// Trade-off coefficients of the compressive loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// description diversity
    pub alpha: f64,
    /// weight decay
    pub beta: f64,
    /// rate
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.1, beta: 2e-4, gamma: 0.1 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MdcError::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(LossWeights { alpha, beta, gamma })
    }
}

/// Every term of the compressive loss. Rates are in bits per source pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub d_l1: f64,
    pub d_mr: f64,
    pub d_distance: f64,
    pub d_reg: f64,
    pub rate_a: f64,
    pub rate_b: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(d_l1: f64, d_mr: f64, d_distance: f64, d_reg: f64, rate_a: f64, rate_b: f64, lw: &LossWeights) -> Self {
        let mut b = LossBreakdown { d_l1, d_mr, d_distance, d_reg, rate_a, rate_b, total: 0.0 };
        b.total = b.recompose(lw);
        b
    }

    pub fn recompose(&self, lw: &LossWeights) -> f64 {
        (self.d_l1 + self.d_mr) + lw.alpha * self.d_distance + lw.beta * self.d_reg + lw.gamma * (self.rate_a + self.rate_b)
    }

    pub fn is_finite(&self) -> bool {
        [self.d_l1, self.d_mr, self.d_distance, self.d_reg, self.rate_a, self.rate_b, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Componentwise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.d_l1 += b.d_l1 / n;
            m.d_mr += b.d_mr / n;
            m.d_distance += b.d_distance / n;
            m.d_reg += b.d_reg / n;
            m.rate_a += b.rate_a / n;
            m.rate_b += b.rate_b / n;
            m.total += b.total / n;
        }
        m
    }
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    x: &Image,
    ya: &Image,
    yb: &Image,
    y: &Image,
    rate_a: f64,
    rate_b: f64,
    d_reg: f64,
    lw: &LossWeights,
    weights: &ScaleWeights,
) -> Result<LossBreakdown> {
    let lw = LossWeights::new(lw.alpha, lw.beta, lw.gamma)?;
    if rate_a < 0.0 || rate_b < 0.0 || d_reg < 0.0 {
        return Err(MdcError::invalid("rates and regularizer must be non-negative"));
    }
    Ok(LossBreakdown::assemble(
        mae_recon_loss(x, ya, yb, y)?,
        structural_loss(x, ya, yb, y, weights)?,
        distance_loss(ya, yb, weights)?,
        d_reg,
        rate_a,
        rate_b,
        &lw,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn blend(a: &Image, b: &Image, t: f64) -> Image {
        let d = a.data().iter().zip(b.data()).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        Image::new(a.channels(), a.height(), a.width(), d).unwrap()
    }

    #[test]
    fn weights_match_published_lists() {
        let round3 = |v: f64| (v * 1000.0).round() / 1000.0;
        // five-scale normalization leaves the finest weight at 0.7507
        let area = ScaleWeights::area_normalized();
        let rounded: Vec<f64> = area.as_array().iter().map(|&v| round3(v)).collect();
        assert_eq!(rounded, vec![0.751, 0.188, 0.047, 0.012, 0.003]);
        // the published list is 0.75·4^-s, the share of scale s in an unbounded pyramid
        for (s, p) in ScaleWeights::MR.iter().enumerate() {
            assert_eq!(round3(0.75 * 4f64.powi(-(s as i32))), *p);
        }
        assert!((ScaleWeights::MR.iter().sum::<f64>() - 1.0).abs() < 5e-4);
        assert!(ScaleWeights::new(ScaleWeights::MS).is_ok());
        assert!(ScaleWeights::new([0.5, 0.5, 0.5, 0.0, 0.0]).is_err());
        assert!(ScaleWeights::new([1.2, -0.2, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = noise(3, 24, 24, 1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let g = Image::filled(3, 16, 16, 0.5);
        assert!((ssim(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let a = Image::filled(1, 16, 16, 0.2);
        let b = Image::filled(1, 16, 16, 0.8);
        let expect = (2.0 * 0.2 * 0.8 + C1) / (0.04 + 0.64 + C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_checks_shapes() {
        let x = noise(3, 20, 22, 2);
        let y = noise(3, 20, 22, 3);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&x, &noise(3, 20, 21, 4)).is_err());
        assert!(matches!(ssim(&noise(1, 8, 8, 5), &noise(1, 8, 8, 6)), Err(MdcError::ImageTooSmall(_))));
    }

    #[test]
    fn multiscale_identity_symmetry_and_size_check() {
        let x = noise(3, 64, 48, 7);
        let y = blend(&x, &noise(3, 64, 48, 8), 0.4);
        for w in [ScaleWeights::mr(), ScaleWeights::ms()] {
            assert!((mr_ssim(&x, &x, &w).unwrap() - 1.0).abs() < 1e-6);
            let a = mr_ssim(&x, &y, &w).unwrap();
            let b = mr_ssim(&y, &x, &w).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a < 1.0);
        }
        assert!(matches!(
            mr_ssim(&noise(3, 15, 64, 1), &noise(3, 15, 64, 2), &ScaleWeights::mr()),
            Err(MdcError::ImageTooSmall(_))
        ));
    }

    #[test]
    fn multiscale_gradient_matches_finite_differences() {
        let x = noise(3, 32, 32, 11);
        let y = blend(&x, &noise(3, 32, 32, 12), 0.5);
        for w in [ScaleWeights::mr(), ScaleWeights::ms()] {
            let (_, gx, gy) = multiscale_ssim_grad(&x, &y, &w, true, true).unwrap();
            let (gx, gy) = (gx.unwrap(), gy.unwrap());
            let h = 1e-6;
            for idx in [0usize, 37, 500, 1023, 2047, 3071] {
                for (which, g) in [(0, &gx), (1, &gy)] {
                    let (mut p, mut m) = (x.clone(), x.clone());
                    let (mut py, mut my) = (y.clone(), y.clone());
                    if which == 0 {
                        p.data_mut()[idx] += h;
                        m.data_mut()[idx] -= h;
                    } else {
                        py.data_mut()[idx] += h;
                        my.data_mut()[idx] -= h;
                    }
                    let fd = (multiscale_ssim(&p, &py, &w).unwrap() - multiscale_ssim(&m, &my, &w).unwrap()) / (2.0 * h);
                    let an = g.data()[idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel < 1e-4, "idx {idx} arg {which}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn mae_examples() {
        let x = Image::filled(3, 16, 16, 0.0);
        assert_eq!(mae_recon_loss(&x, &x, &x, &x).unwrap(), 0.0);
        let half = Image::filled(3, 16, 16, 0.5);
        assert!((mae_recon_loss(&x, &half, &x, &x).unwrap() - 1.5).abs() < 1e-12);
        let big_x = Image::filled(3, 32, 16, 0.0);
        let big_half = Image::filled(3, 32, 16, 0.5);
        assert!((mae_recon_loss(&big_x, &big_half, &big_x, &big_x).unwrap() - 1.5).abs() < 1e-12);
        assert!(mae_term(&x, &big_x).is_err());
    }

    #[test]
    fn structural_and_distance_losses() {
        let x = noise(3, 32, 32, 21);
        let w = ScaleWeights::mr();
        assert!((structural_loss(&x, &x, &x, &x, &w).unwrap() + 3.0).abs() < 1e-9);
        let far = Image::filled(3, 32, 32, 1.0);
        assert!(structural_loss(&x, &x, &far, &far, &w).unwrap() > -3.0);
        let ya = blend(&x, &noise(3, 32, 32, 22), 0.3);
        let yb = blend(&x, &noise(3, 32, 32, 23), 0.6);
        let y = blend(&x, &noise(3, 32, 32, 24), 0.1);
        let by_terms = -(mr_ssim(&x, &ya, &w).unwrap() + mr_ssim(&x, &yb, &w).unwrap() + mr_ssim(&x, &y, &w).unwrap());
        assert_eq!(structural_loss(&x, &ya, &yb, &y, &w).unwrap(), by_terms);
        assert!((distance_loss(&ya, &ya, &w).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(distance_loss(&ya, &yb, &w).unwrap(), distance_loss(&yb, &ya, &w).unwrap());
        assert_eq!(distance_loss(&ya, &yb, &w).unwrap().to_bits(), mr_ssim(&ya, &yb, &w).unwrap().to_bits());
    }

    #[test]
    fn total_loss_assembly() {
        let x = noise(3, 32, 32, 31);
        let lw = LossWeights::default();
        assert_eq!((lw.alpha, lw.beta, lw.gamma), (0.1, 2e-4, 0.1));
        let w = ScaleWeights::mr();
        let b = total_loss(&x, &x, &x, &x, 0.0, 0.0, 0.0, &lw, &w).unwrap();
        assert!((b.total - (-3.0 + 0.1)).abs() < 1e-9);

        let ya = blend(&x, &noise(3, 32, 32, 32), 0.5);
        let no_rate = LossWeights::new(0.1, 2e-4, 0.0).unwrap();
        let t1 = total_loss(&x, &ya, &x, &x, 0.3, 0.2, 5.0, &no_rate, &w).unwrap();
        let t2 = total_loss(&x, &ya, &x, &x, 9.0, 4.0, 5.0, &no_rate, &w).unwrap();
        assert_eq!(t1.total, t2.total);
        assert!((t1.recompose(&no_rate) - t1.total).abs() < 1e-9);
        assert!(total_loss(&x, &x, &x, &x, 0.0, 0.0, 0.0, &LossWeights { alpha: -1.0, beta: 0.0, gamma: 0.0 }, &w).is_err());
    }
}
