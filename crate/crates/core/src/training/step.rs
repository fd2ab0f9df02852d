//! Loss evaluation and gradients for one image and for a batch.

use rayon::prelude::*;

use crate::error::{MdcError, Result};
use crate::grad::Graph;
use crate::image::Image;
use crate::metrics::{LossBreakdown, LossWeights, ScaleWeights};
use crate::networks::{forward, Bound, ModelParams, SteOffsets};
use crate::tensor::Tensor;

/// Loss of one image without the weight-decay term, its gradients (one per
/// parameter tensor) and the straight-through offsets that were used.
pub struct SampleLoss {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor>,
    pub offsets: SteOffsets,
}

/// `(d_l1 + d_mr) + α·d_distance + γ·(rate_a + rate_b)` for one image, with
/// rates in bits per pixel. `pinned` replaces the hard-minus-soft offsets.
pub fn sample_loss(
    p: &ModelParams,
    x: &Image,
    lw: &LossWeights,
    weights: ScaleWeights,
    pinned: Option<&SteOffsets>,
    need_grads: bool,
) -> Result<SampleLoss> {
    let mut g = if need_grads { Graph::new() } else { Graph::inference() };
    let b = Bound::leaves(&mut g, p);
    let xv = g.constant(x.to_tensor());
    let f = forward(&mut g, p, &b, xv, pinned)?;
    let mut l1 = Vec::new();
    let mut ss = Vec::new();
    for y in [f.y_a, f.y_b, f.y_central] {
        l1.push(g.mae_term(x, y));
        ss.push(g.multiscale_ssim(xv, y, weights));
    }
    let dist = g.multiscale_ssim(f.y_a, f.y_b, weights);
    let per_px = 1.0 / x.pixels() as f64;
    let rate_a = g.scale(f.bits_a, per_px);
    let rate_b = g.scale(f.bits_b, per_px);
    let mut terms: Vec<_> = l1.iter().map(|&v| (v, 1.0)).collect();
    terms.extend(ss.iter().map(|&v| (v, -1.0)));
    terms.extend([(dist, lw.alpha), (rate_a, lw.gamma), (rate_b, lw.gamma)]);
    let total = g.weighted_sum(&terms);

    let val = |v| g.value(v).item();
    let breakdown = LossBreakdown::assemble(
        l1.iter().map(|&v| val(v)).sum(),
        -ss.iter().map(|&v| val(v)).sum::<f64>(),
        val(dist),
        0.0,
        val(rate_a),
        val(rate_b),
        &LossWeights { beta: 0.0, ..*lw },
    );
    debug_assert!((breakdown.total - val(total)).abs() <= 1e-9 * (1.0 + val(total).abs()));
    let mut grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    if need_grads {
        for (id, gr) in g.backward(total).into_leaves() {
            grads[id] = gr;
        }
    }
    Ok(SampleLoss { breakdown, grads, offsets: f.offsets })
}

/// Batch-mean loss including `β·D_reg`, and its gradients.
pub fn batch_loss(
    p: &ModelParams,
    batch: &[Image],
    lw: &LossWeights,
    weights: ScaleWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(MdcError::invalid("empty batch"));
    }
    // samples may run in parallel; the reduction below is in batch order
    let samples: Vec<SampleLoss> =
        batch.par_iter().map(|x| sample_loss(p, x, lw, weights, None, true)).collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for s in &samples {
        for (acc, g) in grads.iter_mut().zip(&s.grads) {
            acc.add_assign(g);
        }
    }
    let d_reg = p.weight_decay();
    for (i, acc) in grads.iter_mut().enumerate() {
        acc.scale_assign(1.0 / n);
        if p.is_conv_weight(i) {
            acc.add_assign(&p.tensors()[i].map(|w| 2.0 * lw.beta * w));
        }
    }
    let mean = LossBreakdown::mean(&samples.iter().map(|s| s.breakdown).collect::<Vec<_>>());
    let breakdown = LossBreakdown::assemble(
        mean.d_l1,
        mean.d_mr,
        mean.d_distance,
        d_reg,
        mean.rate_a,
        mean.rate_b,
        lw,
    );
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;
    use crate::training::data::textures;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            base_channels: 4,
            feature_channels: 2,
            levels: 3,
            resconv_per_block: 1,
            entropy_channels: 4,
            ..Default::default()
        };
        let mut p = ModelParams::init(cfg, 11).unwrap();
        p.get_mut("enc.z.w").scale_assign(400.0);
        p
    }

    /// Loss with the straight-through offsets pinned, including weight decay.
    fn pinned_total(p: &ModelParams, x: &Image, lw: &LossWeights, pins: &SteOffsets) -> f64 {
        let s = sample_loss(p, x, lw, ScaleWeights::mr(), Some(pins), false).unwrap();
        s.breakdown.total + lw.beta * p.weight_decay()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = tiny();
        let x = &textures(1, 16, 16, 3)[0];
        let lw = LossWeights::default();
        let s = sample_loss(&p, x, &lw, ScaleWeights::mr(), None, true).unwrap();
        for (name, picks) in [("enc.stem.w", vec![0, 17, 50, 80]), ("centers_a", vec![0, 1, 2]), ("centers_b", vec![0, 2])] {
            let idx = p.index(name).unwrap();
            for &j in &picks {
                // small gradients: 1e-6 is already roundoff-bound
                let h = 1e-5;
                let mut plus = p.clone();
                plus.tensors_mut()[idx].data_mut()[j] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[idx].data_mut()[j] -= h;
                let fd = (pinned_total(&plus, x, &lw, &s.offsets) - pinned_total(&minus, x, &lw, &s.offsets)) / (2.0 * h);
                let an = s.grads[idx].data()[j] + 2.0 * lw.beta * if p.is_conv_weight(idx) { p.tensors()[idx].data()[j] } else { 0.0 };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{j}]: analytic {an}, numeric {fd}");
            }
        }
    }

    #[test]
    fn batch_is_mean_plus_decay() {
        let p = tiny();
        let imgs = textures(2, 16, 16, 4);
        let lw = LossWeights::default();
        let (b, grads) = batch_loss(&p, &imgs, &lw, ScaleWeights::mr()).unwrap();
        let s0 = sample_loss(&p, &imgs[0], &lw, ScaleWeights::mr(), None, true).unwrap();
        let s1 = sample_loss(&p, &imgs[1], &lw, ScaleWeights::mr(), None, true).unwrap();
        let expect = 0.5 * (s0.breakdown.total + s1.breakdown.total) + lw.beta * p.weight_decay();
        assert!((b.total - expect).abs() < 1e-12);
        assert!((b.recompose(&lw) - b.total).abs() < 1e-12);
        let i = p.index("centers_a").unwrap();
        assert!((grads[i].data()[1] - 0.5 * (s0.grads[i].data()[1] + s1.grads[i].data()[1])).abs() < 1e-15);
    }
}
