//! Graph-free evaluation of the entropy networks, for rate measurement and
//! for the arithmetic coder, which re-runs the model one symbol at a time.

use std::sync::{Arc, OnceLock};

use super::params::{Description, ModelParams, LEAKY_SLOPE};
use crate::error::{MdcError, Result};
use crate::grad::kernels::{masked_conv3d_at, CausalTaps, VolumeDims};
use crate::quant::IndexTensor;

pub const ENTROPY_LAYERS: usize = 6;

/// Taps per layer: the first layer never sees the current position.
pub(crate) fn layer_taps() -> [Arc<CausalTaps>; ENTROPY_LAYERS] {
    static TAPS: OnceLock<(Arc<CausalTaps>, Arc<CausalTaps>)> = OnceLock::new();
    let (a, b) = TAPS.get_or_init(|| (Arc::new(CausalTaps::new(false)), Arc::new(CausalTaps::new(true))));
    [a.clone(), b.clone(), b.clone(), b.clone(), b.clone(), b.clone()]
}

#[inline]
fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// Softmax with max subtraction, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `log₂ softmax(logits)[j]`.
pub fn log2_prob(logits: &[f64], j: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    (logits[j] - lse) / std::f64::consts::LN_2
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    cin: usize,
    cout: usize,
}

/// Frozen weights of one entropy network.
pub struct EntropyModel {
    layers: Vec<Layer>,
    taps: [Arc<CausalTaps>; ENTROPY_LAYERS],
    levels: usize,
    width: usize,
    checksum: u32,
}

impl EntropyModel {
    pub fn from_params(p: &ModelParams, which: Description) -> Self {
        let layers = (1..=ENTROPY_LAYERS)
            .map(|i| {
                let w = p.get(&format!("ent_{}.l{i}.w", which.tag()));
                let b = p.get(&format!("ent_{}.l{i}.b", which.tag()));
                Layer { w: w.data().to_vec(), b: b.data().to_vec(), cin: w.dim(1), cout: w.dim(2) }
            })
            .collect();
        EntropyModel {
            layers,
            taps: layer_taps(),
            levels: p.config().levels,
            width: p.config().entropy_channels,
            checksum: p.description_checksum(which),
        }
    }

    /// Identifies the weights a stream was coded with.
    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Incremental evaluator over a `(m, n, k)` symbol volume.
    pub fn context(&self, dims: VolumeDims) -> Context<'_> {
        let pos = dims.positions();
        let e = self.width;
        Context {
            model: self,
            dims,
            x: vec![0.0; pos * self.levels],
            h1: vec![0.0; pos * e],
            t1: vec![0.0; pos * e],
            h2: vec![0.0; pos * e],
            t2: vec![0.0; pos * e],
            a3: vec![0.0; pos * e],
            logits: vec![0.0; self.levels],
            scratch: vec![0.0; e.max(self.levels)],
        }
    }

    /// Logits `[P, L]` for every position given all symbols.
    pub fn logits(&self, v: &IndexTensor) -> Result<Vec<f64>> {
        let mut ctx = self.begin(v)?;
        let l = self.levels;
        let mut out = vec![0.0; v.len() * l];
        for (p, &s) in v.data().iter().enumerate() {
            out[p * l..(p + 1) * l].copy_from_slice(ctx.logits_at(p));
            ctx.set_symbol(p, s as usize);
        }
        Ok(out)
    }

    /// Per-position distributions `[P, L]`.
    pub fn probabilities(&self, v: &IndexTensor) -> Result<Vec<f64>> {
        let l = self.levels;
        let logits = self.logits(v)?;
        let mut probs = vec![0.0; logits.len()];
        for (lg, pr) in logits.chunks_exact(l).zip(probs.chunks_exact_mut(l)) {
            softmax_into(lg, pr);
        }
        Ok(probs)
    }

    /// Estimated code length `−Σ log₂ p(v)` in bits.
    pub fn rate_bits(&self, v: &IndexTensor) -> Result<f64> {
        let l = self.levels;
        let logits = self.logits(v)?;
        Ok(-v.data().iter().enumerate().map(|(p, &s)| log2_prob(&logits[p * l..(p + 1) * l], s as usize)).sum::<f64>())
    }

    fn begin(&self, v: &IndexTensor) -> Result<Context<'_>> {
        if v.levels() != self.levels {
            return Err(MdcError::invalid(format!(
                "index tensor has {} levels, entropy model {}",
                v.levels(),
                self.levels
            )));
        }
        let (m, n, k) = v.dims();
        Ok(self.context(VolumeDims { m, n, k }))
    }
}

/// Layer activations filled in raster order. Every layer's output at `p`
/// depends only on inputs at positions before `p`, so [`Context::logits_at`]
/// can be called as soon as the preceding symbols are known.
pub struct Context<'a> {
    model: &'a EntropyModel,
    dims: VolumeDims,
    x: Vec<f64>,
    h1: Vec<f64>,
    t1: Vec<f64>,
    h2: Vec<f64>,
    t2: Vec<f64>,
    a3: Vec<f64>,
    logits: Vec<f64>,
    scratch: Vec<f64>,
}

impl Context<'_> {
    fn run(&mut self, layer: usize, input: &[f64], p: usize) {
        let ly = &self.model.layers[layer];
        let out = &mut self.scratch[..ly.cout];
        masked_conv3d_at(input, &self.dims, &self.model.taps[layer], &ly.w, &ly.b, ly.cin, ly.cout, p, out);
    }

    /// Logits at position `p`. Positions must be visited in order and each
    /// symbol set before the next call.
    pub fn logits_at(&mut self, p: usize) -> &[f64] {
        let e = self.model.width;
        let r = p * e..(p + 1) * e;
        let x = std::mem::take(&mut self.x);
        self.run(0, &x, p);
        self.x = x;
        for (d, &s) in self.h1[r.clone()].iter_mut().zip(&self.scratch) {
            *d = lrelu(s);
        }
        let h1 = std::mem::take(&mut self.h1);
        self.run(1, &h1, p);
        for (d, &s) in self.t1[r.clone()].iter_mut().zip(&self.scratch) {
            *d = lrelu(s);
        }
        let t1 = std::mem::take(&mut self.t1);
        self.run(2, &t1, p);
        self.t1 = t1;
        for ((d, &a), &s) in self.h2[r.clone()].iter_mut().zip(&h1[r.clone()]).zip(&self.scratch) {
            *d = a + s;
        }
        self.h1 = h1;
        let h2 = std::mem::take(&mut self.h2);
        self.run(3, &h2, p);
        for (d, &s) in self.t2[r.clone()].iter_mut().zip(&self.scratch) {
            *d = lrelu(s);
        }
        let t2 = std::mem::take(&mut self.t2);
        self.run(4, &t2, p);
        self.t2 = t2;
        for ((d, &a), &s) in self.a3[r.clone()].iter_mut().zip(&h2[r.clone()]).zip(&self.scratch) {
            *d = lrelu(a + s);
        }
        self.h2 = h2;
        let a3 = std::mem::take(&mut self.a3);
        self.run(5, &a3, p);
        self.a3 = a3;
        let l = self.model.levels;
        self.logits.copy_from_slice(&self.scratch[..l]);
        &self.logits
    }

    pub fn set_symbol(&mut self, p: usize, symbol: usize) {
        let l = self.model.levels;
        let row = &mut self.x[p * l..(p + 1) * l];
        row.fill(0.0);
        row[symbol] = 1.0;
    }
}
