//! Learnable scalar quantization.
//!
//! A feature tensor is gated channel-progressively by an importance map,
//! assigned softly to a set of learnable centers for gradient flow, and
//! hard-quantized to the nearest center for transmission. Tensors here use
//! the raster layout `(m, n, k)` with `k` fastest, which is also the symbol
//! order of the bitstream.

use crate::error::{MdcError, Result};
use crate::tensor::Tensor;

/// Quantization levels of one quantizer and the softmax sharpness `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterVector {
    centers: Vec<f64>,
    sigma: f64,
}

impl CenterVector {
    pub fn new(centers: Vec<f64>, sigma: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(MdcError::invalid(format!("need at least 2 centers, got {}", centers.len())));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(MdcError::invalid("centers must be finite"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(MdcError::invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(CenterVector { centers, sigma })
    }

    /// `levels` centers evenly spaced over `[-1, 1]`.
    pub fn uniform(levels: usize, sigma: f64) -> Result<Self> {
        if levels < 2 {
            return Err(MdcError::invalid(format!("need at least 2 centers, got {levels}")));
        }
        let step = 2.0 / (levels - 1) as f64;
        Self::new((0..levels).map(|i| -1.0 + step * i as f64).collect(), sigma)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn levels(&self) -> usize {
        self.centers.len()
    }
}

/// Real-valued `M×N×K` tensor in raster layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    m: usize,
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(m: usize, n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * n * k {
            return Err(MdcError::shape(format!("{m}x{n}x{k} tensor needs {} values, got {}", m * n * k, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MdcError::invalid("feature tensor has non-finite entries"));
        }
        Ok(FeatureTensor { m, n, k, data })
    }

    pub fn filled(m: usize, n: usize, k: usize, value: f64) -> Self {
        FeatureTensor { m, n, k, data: vec![value; m * n * k] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.n, self.k)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, m: usize, n: usize, k: usize) -> f64 {
        self.data[(m * self.n + n) * self.k + k]
    }

    /// From a network tensor laid out `[k, m, n]`.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let [k, m, n] = *t.shape() else {
            return Err(MdcError::shape(format!("expected [k, m, n], got {:?}", t.shape())));
        };
        Self::new(m, n, k, chw_to_hwc(t.data(), k, m, n))
    }

    /// To a network tensor laid out `[k, m, n]`.
    pub fn to_chw(&self) -> Tensor {
        Tensor::from_vec(&[self.k, self.m, self.n], hwc_to_chw(&self.data, self.k, self.m, self.n))
            .expect("dims are consistent")
    }
}

pub(crate) fn chw_to_hwc(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for p in 0..h * w {
            out[p * c + ci] = src[ci * h * w + p];
        }
    }
    out
}

pub(crate) fn hwc_to_chw(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for p in 0..h * w {
            out[ci * h * w + p] = src[p * c + ci];
        }
    }
    out
}

/// Per-location importance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(m: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * n {
            return Err(MdcError::shape(format!("{m}x{n} map needs {} values, got {}", m * n, data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MdcError::invalid(format!("importance value {bad} outside [0, 1]")));
        }
        Ok(ImportanceMap { m, n, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Symbol indices in `[0, L)`, raster layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTensor {
    m: usize,
    n: usize,
    k: usize,
    levels: usize,
    data: Vec<u16>,
}

impl IndexTensor {
    pub fn new(m: usize, n: usize, k: usize, levels: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != m * n * k {
            return Err(MdcError::shape(format!("{m}x{n}x{k} indices need {} values, got {}", m * n * k, data.len())));
        }
        if levels < 2 || levels > u16::MAX as usize + 1 {
            return Err(MdcError::invalid(format!("unsupported level count {levels}")));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= levels) {
            return Err(MdcError::corrupt(format!("index {bad} out of range for {levels} centers")));
        }
        Ok(IndexTensor { m, n, k, levels, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.n, self.k)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One-hot form of an [`IndexTensor`]: `M×N×K×L`, one set bit per symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotTensor {
    m: usize,
    n: usize,
    k: usize,
    levels: usize,
    data: Vec<u8>,
}

impl OneHotTensor {
    pub fn new(m: usize, n: usize, k: usize, levels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != m * n * k * levels {
            return Err(MdcError::shape("one-hot data length does not match dims"));
        }
        Ok(OneHotTensor { m, n, k, levels, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// As `[positions, L]` reals, the entropy model's input layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.m * self.n * self.k, self.levels],
            self.data.iter().map(|&b| b as f64).collect(),
        )
        .expect("dims are consistent")
    }
}

/// Channel-progressive mask: `mask[m][n][k] = clamp(K·d[m][n] − k, 0, 1)`.
pub fn expand_importance(map: &ImportanceMap, channels: usize) -> Result<FeatureTensor> {
    if channels < 1 {
        return Err(MdcError::invalid("channel count must be at least 1"));
    }
    let kf = channels as f64;
    let mut data = Vec::with_capacity(map.data.len() * channels);
    for &d in &map.data {
        data.extend((0..channels).map(|k| (kf * d - k as f64).clamp(0.0, 1.0)));
    }
    Ok(FeatureTensor { m: map.m, n: map.n, k: channels, data })
}

/// Derivative of one mask entry with respect to its importance value.
#[inline]
pub(crate) fn expand_importance_slope(d: f64, k: usize, channels: usize) -> f64 {
    let t = channels as f64 * d - k as f64;
    if t > 0.0 && t < 1.0 {
        channels as f64
    } else {
        0.0
    }
}

pub fn apply_importance(z: &FeatureTensor, mask: &FeatureTensor) -> Result<FeatureTensor> {
    if z.dims() != mask.dims() {
        return Err(MdcError::shape(format!("feature {:?} vs mask {:?}", z.dims(), mask.dims())));
    }
    let data = z.data.iter().zip(&mask.data).map(|(a, b)| a * b).collect();
    FeatureTensor::new(z.m, z.n, z.k, data)
}

/// Softmax weights `exp(−σ(z−c_j)²) / Σ_k exp(−σ(z−c_k)²)` written to `out`.
#[inline]
pub(crate) fn soft_assign_into(z: f64, centers: &[f64], sigma: f64, out: &mut [f64]) {
    let mut best = f64::NEG_INFINITY;
    for (o, &c) in out.iter_mut().zip(centers) {
        let s = -sigma * (z - c) * (z - c);
        *o = s;
        best = best.max(s);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - best).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn soft_assign(z: f64, q: &CenterVector) -> Vec<f64> {
    let mut out = vec![0.0; q.levels()];
    soft_assign_into(z, &q.centers, q.sigma, &mut out);
    out
}

/// Nearest center, ties to the smallest index.
#[inline]
pub fn nearest_center(z: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centers.iter().enumerate() {
        let d = (z - c) * (z - c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

pub fn hard_quantize(z: &FeatureTensor, q: &CenterVector) -> IndexTensor {
    let data = z.data.iter().map(|&v| nearest_center(v, &q.centers) as u16).collect();
    IndexTensor { m: z.m, n: z.n, k: z.k, levels: q.levels(), data }
}

/// `Σ_j softmax_j · c_j` per element.
pub fn soft_quantize(z: &FeatureTensor, q: &CenterVector) -> FeatureTensor {
    let mut w = vec![0.0; q.levels()];
    let data = z
        .data
        .iter()
        .map(|&v| {
            soft_assign_into(v, &q.centers, q.sigma, &mut w);
            w.iter().zip(&q.centers).map(|(a, c)| a * c).sum()
        })
        .collect();
    FeatureTensor { m: z.m, n: z.n, k: z.k, data }
}

/// Forward value of the straight-through combination: the hard values.
/// Gradients through it are those of `soft` (see [`crate::grad::Graph::straight_through`]).
pub fn ste_combine(hard: &FeatureTensor, soft: &FeatureTensor) -> Result<FeatureTensor> {
    if hard.dims() != soft.dims() {
        return Err(MdcError::shape(format!("hard {:?} vs soft {:?}", hard.dims(), soft.dims())));
    }
    Ok(hard.clone())
}

pub fn dequantize(v: &IndexTensor, q: &CenterVector) -> Result<FeatureTensor> {
    let mut data = Vec::with_capacity(v.data.len());
    for &i in &v.data {
        let c = q
            .centers
            .get(i as usize)
            .ok_or_else(|| MdcError::corrupt(format!("index {i} out of range for {} centers", q.levels())))?;
        data.push(*c);
    }
    Ok(FeatureTensor { m: v.m, n: v.n, k: v.k, data })
}

pub fn to_one_hot(v: &IndexTensor, levels: usize) -> Result<OneHotTensor> {
    if levels < v.levels {
        return Err(MdcError::invalid(format!("{levels} levels cannot hold indices of a {}-level tensor", v.levels)));
    }
    let mut data = vec![0u8; v.data.len() * levels];
    for (p, &i) in v.data.iter().enumerate() {
        data[p * levels + i as usize] = 1;
    }
    Ok(OneHotTensor { m: v.m, n: v.n, k: v.k, levels, data })
}

pub fn from_one_hot(vt: &OneHotTensor) -> Result<IndexTensor> {
    let mut data = Vec::with_capacity(vt.m * vt.n * vt.k);
    for (p, row) in vt.data.chunks_exact(vt.levels).enumerate() {
        let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
        if ones.len() != 1 || row[ones[0]] != 1 {
            return Err(MdcError::corrupt(format!("one-hot row {p} does not contain exactly one 1")));
        }
        data.push(ones[0] as u16);
    }
    IndexTensor::new(vt.m, vt.n, vt.k, vt.levels, data)
}
