//! Encoder, decoders and the entropy network expressed as graph ops.

use std::sync::Arc;

use super::entropy::layer_taps;
use super::params::{Description, ModelParams, DECONV_K, LEAKY_SLOPE};
use crate::error::{MdcError, Result};
use crate::grad::kernels::VolumeDims;
use crate::grad::{Graph, Var};

/// Graph handles for every parameter of a [`ModelParams`], index-aligned.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Trainable leaves tagged with the parameter index.
    pub fn leaves(g: &mut Graph, p: &ModelParams) -> Self {
        Bound { vars: p.tensors().iter().enumerate().map(|(i, t)| g.leaf(i, t.clone())).collect() }
    }

    pub fn constants(g: &mut Graph, p: &ModelParams) -> Self {
        Bound { vars: p.tensors().iter().map(|t| g.constant(t.clone())).collect() }
    }

    pub fn var(&self, p: &ModelParams, name: &str) -> Var {
        self.vars[p.index(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Ctx<'a> {
    p: &'a ModelParams,
    b: &'a Bound,
}

impl Ctx<'_> {
    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize, dilation: usize) -> Var {
        let w = self.b.var(self.p, &format!("{name}.w"));
        let bias = self.b.var(self.p, &format!("{name}.b"));
        let k = g.value(w).dim(2);
        let pad = dilation * (k - 1) / 2;
        g.conv2d(x, w, bias, stride, pad, dilation)
    }

    fn conv_act(&self, g: &mut Graph, x: Var, name: &str, stride: usize, dilation: usize) -> Var {
        let y = self.conv(g, x, name, stride, dilation);
        let a = g.leaky_relu(y, LEAKY_SLOPE);
        g.discard(y);
        a
    }

    fn deconv(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = self.b.var(self.p, &format!("{name}.w"));
        let bias = self.b.var(self.p, &format!("{name}.b"));
        g.conv_transpose2d(x, w, bias, 2, (DECONV_K - 2) / 2)
    }
}

/// Encoder outputs: `z` is `[K, M, N]`, the importance maps are `[1, M, N]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub z: Var,
    pub da: Var,
    pub db: Var,
}

/// `x: [3, H, W]` with `H`, `W` divisible by 8.
pub fn encoder(g: &mut Graph, p: &ModelParams, b: &Bound, x: Var) -> Result<EncoderVars> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(MdcError::shape(format!("encoder expects [3, H, W], got {shape:?}")));
    }
    if shape[1] % 8 != 0 || shape[2] % 8 != 0 || shape[1] == 0 || shape[2] == 0 {
        return Err(MdcError::shape(format!("encoder input {}x{} is not a positive multiple of 8", shape[1], shape[2])));
    }
    let c = Ctx { p, b };
    let rates = p.config().dilation_rates;
    let mut h = c.conv_act(g, x, "enc.stem", 1, 1);
    let mut taps = Vec::new();
    for blk in 1..=3 {
        for (i, &r) in rates.iter().enumerate() {
            let next = c.conv_act(g, h, &format!("enc.hdc{blk}.{i}"), 1, r);
            if i > 0 || blk == 1 {
                g.discard(h);
            }
            h = next;
        }
        let next = c.conv_act(g, h, &format!("enc.down{blk}"), 2, 1);
        g.discard(h);
        h = next;
        if blk < 3 {
            taps.push(h);
        }
    }
    let s1 = c.conv_act(g, taps[0], "enc.skip1", 4, 1);
    let s2 = c.conv_act(g, taps[1], "enc.skip2", 2, 1);
    g.discard(taps[0]);
    g.discard(taps[1]);
    let mut h = g.concat(&[h, s1, s2]);
    for i in 0..3 {
        let next = c.conv_act(g, h, &format!("enc.agg{i}"), 1, 1);
        g.discard(h);
        h = next;
    }
    let z = c.conv(g, h, "enc.z", 1, 1);
    let la = c.conv(g, h, "enc.da", 1, 1);
    let lb = c.conv(g, h, "enc.db", 1, 1);
    let da = g.sigmoid(la);
    let db = g.sigmoid(lb);
    Ok(EncoderVars { z, da, db })
}

/// Which decoder to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    SideA,
    SideB,
    Central,
}

impl DecoderKind {
    fn prefix(self) -> &'static str {
        match self {
            DecoderKind::SideA => "dec_a",
            DecoderKind::SideB => "dec_b",
            DecoderKind::Central => "dec_c",
        }
    }

    pub fn input_channels(self, feature_channels: usize) -> usize {
        match self {
            DecoderKind::Central => 2 * feature_channels,
            _ => feature_channels,
        }
    }
}

/// `q: [C, M, N]` (C = K for side decoders, 2K for the central one) to an
/// image tensor `[3, 8M, 8N]` in `[0, 1]`.
pub fn decoder(g: &mut Graph, p: &ModelParams, b: &Bound, kind: DecoderKind, q: Var) -> Result<Var> {
    let shape = g.value(q).shape().to_vec();
    let cin = kind.input_channels(p.config().feature_channels);
    if shape.len() != 3 || shape[0] != cin {
        return Err(MdcError::shape(format!("{kind:?} decoder expects [{cin}, M, N], got {shape:?}")));
    }
    let c = Ctx { p, b };
    let pre = kind.prefix();
    let mut h = c.deconv(g, q, &format!("{pre}.up1"));
    h = leaky(g, h);
    for blk in 1..=2 {
        for r in 0..p.config().resconv_per_block {
            let t = c.conv_act(g, h, &format!("{pre}.res{blk}.{r}.0"), 1, 1);
            let u = c.conv(g, t, &format!("{pre}.res{blk}.{r}.1"), 1, 1);
            g.discard(t);
            let next = g.add(h, u);
            g.discard(u);
            g.discard(h);
            h = next;
        }
        let up = if blk == 1 { "up2" } else { "up3" };
        let next = c.deconv(g, h, &format!("{pre}.{up}"));
        g.discard(h);
        h = if blk == 1 { leaky(g, next) } else { g.sigmoid(next) };
        g.discard(next);
    }
    Ok(h)
}

fn leaky(g: &mut Graph, x: Var) -> Var {
    let y = g.leaky_relu(x, LEAKY_SLOPE);
    g.discard(x);
    y
}

/// Entropy network on a `[P, L]` one-hot (or relaxed one-hot) volume;
/// returns `[P, L]` logits.
pub fn entropy_logits(g: &mut Graph, p: &ModelParams, b: &Bound, which: Description, x: Var, dims: VolumeDims) -> Var {
    let taps = layer_taps();
    let pre = format!("ent_{}", which.tag());
    let layer = |g: &mut Graph, x: Var, i: usize| {
        let w = b.var(p, &format!("{pre}.l{i}.w"));
        let bias = b.var(p, &format!("{pre}.l{i}.b"));
        g.masked_conv3d(x, w, bias, dims, Arc::clone(&taps[i - 1]))
    };
    let y1 = layer(g, x, 1);
    let h1 = g.leaky_relu(y1, LEAKY_SLOPE);
    let y2 = layer(g, h1, 2);
    let t1 = g.leaky_relu(y2, LEAKY_SLOPE);
    let y3 = layer(g, t1, 3);
    let h2 = g.add(h1, y3);
    let y4 = layer(g, h2, 4);
    let t2 = g.leaky_relu(y4, LEAKY_SLOPE);
    let y5 = layer(g, t2, 5);
    let h3 = g.add(h2, y5);
    let a3 = g.leaky_relu(h3, LEAKY_SLOPE);
    layer(g, a3, 6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;
    use crate::tensor::Tensor;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            base_channels: 4,
            feature_channels: 3,
            levels: 4,
            resconv_per_block: 1,
            entropy_channels: 4,
            ..Default::default()
        };
        ModelParams::init(cfg, 2).unwrap()
    }

    fn input(h: usize, w: usize) -> Tensor {
        let n = 3 * h * w;
        Tensor::from_vec(&[3, h, w], (0..n).map(|i| 0.5 + 0.4 * (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn encoder_reduces_by_eight() {
        let p = tiny();
        for (h, w) in [(64, 64), (160, 160), (16, 40)] {
            let mut g = Graph::inference();
            let b = Bound::constants(&mut g, &p);
            let x = g.constant(input(h, w));
            let e = encoder(&mut g, &p, &b, x).unwrap();
            assert_eq!(g.value(e.z).shape(), &[3, h / 8, w / 8]);
            for d in [e.da, e.db] {
                assert_eq!(g.value(d).shape(), &[1, h / 8, w / 8]);
                assert!(g.value(d).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        let mut g = Graph::inference();
        let b = Bound::constants(&mut g, &p);
        let x = g.constant(input(20, 16));
        assert!(encoder(&mut g, &p, &b, x).is_err());
    }

    #[test]
    fn decoders_restore_spatial_size() {
        let p = tiny();
        let mut g = Graph::inference();
        let b = Bound::constants(&mut g, &p);
        let q = g.constant(Tensor::zeros(&[3, 2, 5]));
        let q2 = g.constant(Tensor::zeros(&[6, 2, 5]));
        for (kind, input) in [(DecoderKind::SideA, q), (DecoderKind::SideB, q), (DecoderKind::Central, q2)] {
            let y = decoder(&mut g, &p, &b, kind, input).unwrap();
            assert_eq!(g.value(y).shape(), &[3, 16, 40]);
            assert!(g.value(y).data().iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
        }
        assert!(decoder(&mut g, &p, &b, DecoderKind::Central, q).is_err());
        assert!(decoder(&mut g, &p, &b, DecoderKind::SideA, q2).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = tiny();
        let run = || {
            let mut g = Graph::inference();
            let b = Bound::constants(&mut g, &p);
            let x = g.constant(input(32, 24));
            let e = encoder(&mut g, &p, &b, x).unwrap();
            g.value(e.z).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn recording_and_inference_agree() {
        let p = tiny();
        let mut gi = Graph::inference();
        let bi = Bound::constants(&mut gi, &p);
        let mut gr = Graph::new();
        let br = Bound::leaves(&mut gr, &p);
        let xi = gi.constant(input(16, 16));
        let xr = gr.constant(input(16, 16));
        let zi = encoder(&mut gi, &p, &bi, xi).unwrap().z;
        let zr = encoder(&mut gr, &p, &br, xr).unwrap().z;
        assert_eq!(gi.value(zi).data(), gr.value(zr).data());
    }
}
