//! Convolution kernels over single-sample CHW tensors.
//!
//! 2-D convolutions go through im2col + gemm, processed in bands of output
//! rows so the column buffer stays bounded on large images. The masked 3-D
//! convolution used by the entropy model works on position-major volumes and
//! is written as plain loops: its per-position routine is shared by the full
//! forward pass and by incremental decoding, so both produce bit-identical
//! values.

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, input: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        (input + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (self.out_dim(h, self.kh), self.out_dim(w, self.kw))
    }
}

const BAND_ELEMS: usize = 1 << 20;

fn band_rows(ck: usize, wo: usize, ho: usize) -> usize {
    (BAND_ELEMS / (ck * wo).max(1)).clamp(1, ho.max(1))
}

/// Column matrix `[c*kh*kw, (r1-r0)*wo]` for output rows `r0..r1`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    wo: usize,
    r0: usize,
    r1: usize,
    cols: &mut [f64],
) {
    let nb = (r1 - r0) * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * nb..(row + 1) * nb];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let drow = &mut dst[(oy - r0) * wo..(oy - r0 + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    wo: usize,
    r0: usize,
    r1: usize,
    x: &mut [f64],
) {
    let nb = (r1 - r0) * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * nb..(row + 1) * nb];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[(oy - r0) * wo..(oy - r0 + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the debug assertions above spell out the extent of every
    // operand; all callers derive strides from the slice shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Forward 2-D convolution. `w` is `[cout, cin, kh, kw]`, returns `[cout, ho, wo]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    g: &ConvGeom,
) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = g.out_hw(h, w);
    let ck = cin * g.kh * g.kw;
    let plane = ho * wo;
    let mut out = vec![0.0; cout * plane];
    for (co, b) in bias.iter().enumerate() {
        out[co * plane..(co + 1) * plane].fill(*b);
    }
    let rows = band_rows(ck, wo, ho);
    let mut cols = vec![0.0; ck * rows * wo];
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + rows).min(ho);
        let nb = (r1 - r0) * wo;
        im2col(x, cin, h, w, g, wo, r0, r1, &mut cols[..ck * nb]);
        gemm(cout, ck, nb, weight, ck, 1, &cols, nb, 1, 1.0, &mut out[r0 * wo..], plane);
        r0 = r1;
    }
    (out, ho, wo)
}

/// Gradients of a 2-D convolution. Returns `(dx, dw, db)`; `dx` is skipped
/// when `need_dx` is false.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    g: &ConvGeom,
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw(h, w);
    let ck = cin * g.kh * g.kw;
    let plane = ho * wo;
    let mut dw = vec![0.0; cout * ck];
    let db: Vec<f64> = (0..cout).map(|co| dy[co * plane..(co + 1) * plane].iter().sum()).collect();
    let mut dx = need_dx.then(|| vec![0.0; cin * h * w]);
    let rows = band_rows(ck, wo, ho);
    let mut cols = vec![0.0; ck * rows * wo];
    let mut dcols = if need_dx { vec![0.0; ck * rows * wo] } else { Vec::new() };
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + rows).min(ho);
        let nb = (r1 - r0) * wo;
        im2col(x, cin, h, w, g, wo, r0, r1, &mut cols[..ck * nb]);
        // dW += dY_band · colsᵀ
        gemm(cout, nb, ck, &dy[r0 * wo..], plane, 1, &cols, 1, nb, 1.0, &mut dw, ck);
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY_band
            gemm(ck, cout, nb, weight, 1, ck, &dy[r0 * wo..], plane, 1, 0.0, &mut dcols, nb);
            col2im(&dcols[..ck * nb], cin, h, w, g, wo, r0, r1, dx);
        }
        r0 = r1;
    }
    (dx, dw, db)
}

/// Output size of a transposed convolution.
pub fn conv_transpose_out(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

/// Forward transposed convolution. `w` is `[cin, cout, k, k]`, returns
/// `[cout, ho, wo]`. This is the adjoint of a `k×k`/`stride` convolution
/// mapping `[cout, ho, wo]` to `[cin, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = conv_transpose_out(h, k, stride, pad);
    let wo = conv_transpose_out(w, k, stride, pad);
    let g = ConvGeom { kh: k, kw: k, stride, pad, dilation: 1 };
    let ck = cout * k * k;
    let plane_in = h * w;
    let mut out = vec![0.0; cout * ho * wo];
    let rows = band_rows(ck, w, h);
    let mut cols = vec![0.0; ck * rows * w];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + rows).min(h);
        let nb = (r1 - r0) * w;
        // cols = W'ᵀ · X_band, W' viewed as [cin, ck]
        gemm(ck, cin, nb, weight, 1, ck, &x[r0 * w..], plane_in, 1, 0.0, &mut cols, nb);
        col2im(&cols[..ck * nb], cout, ho, wo, &g, w, r0, r1, &mut out);
        r0 = r1;
    }
    let plane = ho * wo;
    for (co, b) in bias.iter().enumerate() {
        for v in &mut out[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
    (out, ho, wo)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let ho = conv_transpose_out(h, k, stride, pad);
    let wo = conv_transpose_out(w, k, stride, pad);
    let g = ConvGeom { kh: k, kw: k, stride, pad, dilation: 1 };
    let ck = cout * k * k;
    let plane_in = h * w;
    let plane = ho * wo;
    let db: Vec<f64> = (0..cout).map(|co| dy[co * plane..(co + 1) * plane].iter().sum()).collect();
    let mut dw = vec![0.0; cin * ck];
    let mut dx = need_dx.then(|| vec![0.0; cin * plane_in]);
    let rows = band_rows(ck, w, h);
    let mut dcols = vec![0.0; ck * rows * w];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + rows).min(h);
        let nb = (r1 - r0) * w;
        im2col(dy, cout, ho, wo, &g, w, r0, r1, &mut dcols[..ck * nb]);
        // dW' += X_band · dcolsᵀ
        gemm(cin, nb, ck, &x[r0 * w..], plane_in, 1, &dcols, 1, nb, 1.0, &mut dw, ck);
        if let Some(dx) = dx.as_mut() {
            gemm(cin, ck, nb, weight, ck, 1, &dcols, nb, 1, 0.0, &mut dx[r0 * w..], plane_in);
        }
        r0 = r1;
    }
    (dx, dw, db)
}

/// Causal neighbourhood of a masked 3×3×3 convolution over a raster-ordered
/// `(m, n, k)` volume. Offsets are kept in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalTaps {
    offsets: Vec<[isize; 3]>,
}

impl CausalTaps {
    /// Offsets strictly before the centre (`include_centre == false`, first
    /// layer) or up to and including it.
    pub fn new(include_centre: bool) -> Self {
        let mut offsets = Vec::new();
        for dm in -1..=1isize {
            for dn in -1..=1isize {
                for dk in -1..=1isize {
                    let o = [dm, dn, dk];
                    let before = o < [0, 0, 0];
                    if before || (include_centre && o == [0, 0, 0]) {
                        offsets.push(o);
                    }
                }
            }
        }
        CausalTaps { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[[isize; 3]] {
        &self.offsets
    }
}

/// Volume extent `(m, n, k)`; position index is `(m*N + n)*K + k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl VolumeDims {
    pub fn positions(&self) -> usize {
        self.m * self.n * self.k
    }

    #[inline]
    fn neighbour(&self, p: usize, o: &[isize; 3]) -> Option<usize> {
        let k = (p % self.k) as isize + o[2];
        let n = ((p / self.k) % self.n) as isize + o[1];
        let m = (p / (self.k * self.n)) as isize + o[0];
        if m < 0 || n < 0 || k < 0 || m >= self.m as isize || n >= self.n as isize || k >= self.k as isize {
            None
        } else {
            Some(((m as usize * self.n) + n as usize) * self.k + k as usize)
        }
    }
}

/// Masked convolution output at one position. `x` is `[positions, cin]`,
/// `weight` is `[taps, cin, cout]`, `out` receives `cout` values.
#[allow(clippy::too_many_arguments)]
pub fn masked_conv3d_at(
    x: &[f64],
    dims: &VolumeDims,
    taps: &CausalTaps,
    weight: &[f64],
    bias: &[f64],
    cin: usize,
    cout: usize,
    p: usize,
    out: &mut [f64],
) {
    out.copy_from_slice(bias);
    for (t, o) in taps.offsets.iter().enumerate() {
        let Some(q) = dims.neighbour(p, o) else { continue };
        let xq = &x[q * cin..(q + 1) * cin];
        let wt = &weight[t * cin * cout..(t + 1) * cin * cout];
        for (ci, &xv) in xq.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wt[ci * cout..(ci + 1) * cout];
            for (acc, &wv) in out.iter_mut().zip(wrow) {
                *acc += xv * wv;
            }
        }
    }
}

pub fn masked_conv3d_forward(
    x: &[f64],
    dims: &VolumeDims,
    taps: &CausalTaps,
    weight: &[f64],
    bias: &[f64],
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let p_count = dims.positions();
    let mut out = vec![0.0; p_count * cout];
    for (p, row) in out.chunks_exact_mut(cout).enumerate() {
        masked_conv3d_at(x, dims, taps, weight, bias, cin, cout, p, row);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn masked_conv3d_backward(
    x: &[f64],
    dims: &VolumeDims,
    taps: &CausalTaps,
    weight: &[f64],
    cin: usize,
    cout: usize,
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p_count = dims.positions();
    let mut db = vec![0.0; cout];
    let mut dw = vec![0.0; weight.len()];
    let mut dx = need_dx.then(|| vec![0.0; p_count * cin]);
    for p in 0..p_count {
        let g = &dy[p * cout..(p + 1) * cout];
        for (d, v) in db.iter_mut().zip(g) {
            *d += v;
        }
        for (t, o) in taps.offsets.iter().enumerate() {
            let Some(q) = dims.neighbour(p, o) else { continue };
            let base = t * cin * cout;
            for ci in 0..cin {
                let xv = x[q * cin + ci];
                let wrow = &weight[base + ci * cout..base + (ci + 1) * cout];
                let dwrow = &mut dw[base + ci * cout..base + (ci + 1) * cout];
                let mut acc = 0.0;
                for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(g) {
                    *dwv += xv * gv;
                    acc += wv * gv;
                }
                if let Some(dx) = dx.as_mut() {
                    dx[q * cin + ci] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        cout: usize,
        g: &ConvGeom,
    ) -> Vec<f64> {
        let (ho, wo) = g.out_hw(h, w);
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * 0.7531 + seed).sin() * 1.3).fract()).collect()
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        for &(stride, pad, dilation, k) in &[(1, 1, 1, 3), (2, 2, 1, 5), (1, 3, 3, 3), (4, 2, 1, 5)] {
            let g = ConvGeom { kh: k, kw: k, stride, pad, dilation };
            let (cin, cout, h, w) = (3, 4, 13, 11);
            let x = ramp(cin * h * w, 0.1);
            let wt = ramp(cout * cin * k * k, 0.7);
            let (y, _, _) = conv2d_forward(&x, cin, h, w, &wt, &[0.0; 4], cout, &g);
            let expect = naive_conv(&x, cin, h, w, &wt, cout, &g);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_backward_is_adjoint() {
        let g = ConvGeom { kh: 3, kw: 3, stride: 2, pad: 1, dilation: 1 };
        let (cin, cout, h, w) = (2, 3, 9, 8);
        let x = ramp(cin * h * w, 0.3);
        let wt = ramp(cout * cin * 9, 0.9);
        let (y, _, _) = conv2d_forward(&x, cin, h, w, &wt, &[0.0; 3], cout, &g);
        let dy = ramp(y.len(), 1.7);
        let (dx, dw, _) = conv2d_backward(&x, cin, h, w, &wt, cout, &g, &dy, true);
        // <dy, conv(x)> is linear in both x and w
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        let (k, stride, pad) = (4, 2, 1);
        let g = ConvGeom { kh: k, kw: k, stride, pad, dilation: 1 };
        let (cin, cout, h, w) = (3, 2, 5, 6);
        let x = ramp(cin * h * w, 0.2);
        // transposed weight [cin, cout, k, k] doubles as a conv weight [cin(out), cout(in), k, k]
        let wt = ramp(cin * cout * k * k, 0.4);
        let (y, ho, wo) = conv_transpose2d_forward(&x, cin, h, w, &wt, &[0.0; 2], cout, k, stride, pad);
        assert_eq!((ho, wo), (10, 12));
        let u = ramp(cout * ho * wo, 2.2);
        let (cu, ch, cw) = conv2d_forward(&u, cout, ho, wo, &wt, &[0.0; 3], cin, &g);
        assert_eq!((ch, cw), (h, w));
        let lhs: f64 = y.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = cu.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let (dx, dw, _) = conv_transpose2d_backward(&x, cin, h, w, &wt, cout, k, stride, pad, &u, true);
        let via_x: f64 = dx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn causal_tap_counts() {
        assert_eq!(CausalTaps::new(false).len(), 13);
        assert_eq!(CausalTaps::new(true).len(), 14);
    }

    #[test]
    fn masked_conv3d_backward_is_adjoint() {
        let dims = VolumeDims { m: 3, n: 4, k: 2 };
        let taps = CausalTaps::new(true);
        let (cin, cout) = (3, 2);
        let x = ramp(dims.positions() * cin, 0.5);
        let wt = ramp(taps.len() * cin * cout, 0.8);
        let y = masked_conv3d_forward(&x, &dims, &taps, &wt, &[0.0; 2], cin, cout);
        let dy = ramp(y.len(), 3.1);
        let (dx, dw, _) = masked_conv3d_backward(&x, &dims, &taps, &wt, cin, cout, &dy, true);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
