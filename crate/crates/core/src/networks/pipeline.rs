//! The full encode → quantize → rate/decode data flow.

use super::model::{decoder, encoder, entropy_logits, Bound, DecoderKind};
use super::params::{Description, ModelParams};
use crate::error::{MdcError, Result};
use crate::grad::kernels::VolumeDims;
use crate::grad::{Graph, Var};
use crate::image::Image;
use crate::quant::{self, FeatureTensor, ImportanceMap, IndexTensor};
use crate::tensor::Tensor;

/// Constant offsets that turn soft values into hard ones in the forward
/// pass (`hard − soft`). Pinning them makes the loss smooth, which finite
/// difference checks of the straight-through gradients rely on.
#[derive(Clone, Debug)]
pub struct SteOffsets {
    /// `[M, N, K]`, per description
    pub values: [Tensor; 2],
    /// `[P, L]`, per description
    pub one_hot: [Tensor; 2],
}

/// Graph handles and side products of one training forward pass.
pub struct Forward {
    pub y_a: Var,
    pub y_b: Var,
    pub y_central: Var,
    /// code length in bits
    pub bits_a: Var,
    pub bits_b: Var,
    pub indices: [IndexTensor; 2],
    pub offsets: SteOffsets,
}

struct Quantized {
    q_chw: Var,
    bits: Var,
    indices: IndexTensor,
    value_offset: Tensor,
    one_hot_offset: Tensor,
}

fn quantize_description(
    g: &mut Graph,
    p: &ModelParams,
    b: &Bound,
    which: Description,
    z_hwc: Var,
    importance: Var,
    pinned: Option<(&Tensor, &Tensor)>,
) -> Result<Quantized> {
    let [m, n, k] = *g.value(z_hwc).shape() else { unreachable!("z is [m, n, k]") };
    let levels = p.config().levels;
    let mask = g.expand_importance(importance, k);
    let zd = g.mul(z_hwc, mask);
    let centers = b.var(p, &format!("centers_{}", which.tag()));
    let weights = g.soft_assign(zd, centers, p.config().sigma);
    let soft = g.weighted_centers(weights, centers, &[m, n, k]);

    let cv = g.value(centers).data().to_vec();
    let idx: Vec<u16> = g.value(zd).data().iter().map(|&z| quant::nearest_center(z, &cv) as u16).collect();
    let indices = IndexTensor::new(m, n, k, levels, idx)?;
    let (value_offset, one_hot_offset) = match pinned {
        Some((v, o)) => (v.clone(), o.clone()),
        None => {
            let hard: Vec<f64> = indices.data().iter().map(|&i| cv[i as usize]).collect();
            let value_offset = Tensor::from_vec(&[m, n, k], hard)?.zip_map(g.value(soft), |h, s| h - s);
            let one_hot = quant::to_one_hot(&indices, levels)?.to_tensor();
            let one_hot_offset = one_hot.zip_map(g.value(weights), |h, s| h - s);
            (value_offset, one_hot_offset)
        }
    };
    let q = g.add_detached(soft, &value_offset);
    let v = g.add_detached(weights, &one_hot_offset);
    let logits = entropy_logits(g, p, b, which, v, VolumeDims { m, n, k });
    let bits = g.cross_entropy_bits(logits, v);
    let q_chw = g.hwc_to_chw(q);
    Ok(Quantized { q_chw, bits, indices, value_offset, one_hot_offset })
}

/// Training-time forward pass on one image tensor `[3, H, W]`.
pub fn forward(g: &mut Graph, p: &ModelParams, b: &Bound, x: Var, pinned: Option<&SteOffsets>) -> Result<Forward> {
    let enc = encoder(g, p, b, x)?;
    let z_hwc = g.chw_to_hwc(enc.z);
    let pin = |i: usize| pinned.map(|s| (&s.values[i], &s.one_hot[i]));
    let qa = quantize_description(g, p, b, Description::A, z_hwc, enc.da, pin(0))?;
    let qb = quantize_description(g, p, b, Description::B, z_hwc, enc.db, pin(1))?;
    let y_a = decoder(g, p, b, DecoderKind::SideA, qa.q_chw)?;
    let y_b = decoder(g, p, b, DecoderKind::SideB, qb.q_chw)?;
    let both = g.concat(&[qa.q_chw, qb.q_chw]);
    let y_central = decoder(g, p, b, DecoderKind::Central, both)?;
    Ok(Forward {
        y_a,
        y_b,
        y_central,
        bits_a: qa.bits,
        bits_b: qb.bits,
        offsets: SteOffsets {
            values: [qa.value_offset, qb.value_offset],
            one_hot: [qa.one_hot_offset, qb.one_hot_offset],
        },
        indices: [qa.indices, qb.indices],
    })
}

/// Encoder outputs as plain data.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub z: FeatureTensor,
    pub importance: [ImportanceMap; 2],
    pub indices: [IndexTensor; 2],
}

/// Encoder plus hard quantization of both descriptions. `x` must have
/// sides divisible by 8.
pub fn analyze(p: &ModelParams, x: &Image) -> Result<Analysis> {
    if x.channels() != 3 {
        return Err(MdcError::shape(format!("expected an RGB image, got {} channels", x.channels())));
    }
    let mut g = Graph::inference();
    let b = Bound::constants(&mut g, p);
    let xv = g.constant(x.to_tensor());
    let enc = encoder(&mut g, p, &b, xv)?;
    let z = FeatureTensor::from_chw(g.value(enc.z))?;
    let (m, n, k) = z.dims();
    let map = |v: Var| ImportanceMap::new(m, n, g.value(v).data().to_vec());
    let importance = [map(enc.da)?, map(enc.db)?];
    let mut indices = Vec::with_capacity(2);
    for (which, imp) in [Description::A, Description::B].into_iter().zip(&importance) {
        let mask = quant::expand_importance(imp, k)?;
        let zd = quant::apply_importance(&z, &mask)?;
        indices.push(quant::hard_quantize(&zd, &p.centers(which)?));
    }
    let [ia, ib]: [IndexTensor; 2] = indices.try_into().expect("two descriptions");
    Ok(Analysis { z, importance, indices: [ia, ib] })
}

/// Reconstruction from received index tensors. At least one must be given;
/// with both the central decoder is used.
pub fn synthesize(p: &ModelParams, a: Option<&IndexTensor>, b: Option<&IndexTensor>) -> Result<Image> {
    let k = p.config().feature_channels;
    let levels = p.config().levels;
    let mut g = Graph::inference();
    let bound = Bound::constants(&mut g, p);
    let mut dequant = |which: Description, v: &IndexTensor| -> Result<Var> {
        let (_, _, vk) = v.dims();
        if vk != k || v.levels() != levels {
            return Err(MdcError::shape(format!(
                "description has K={vk}, L={}; model expects K={k}, L={levels}",
                v.levels()
            )));
        }
        let q = quant::dequantize(v, &p.centers(which)?)?;
        Ok(g.constant(q.to_chw()))
    };
    let (kind, input) = match (a, b) {
        (Some(a), Some(b)) => {
            if a.dims() != b.dims() {
                return Err(MdcError::HeaderMismatch(format!("description dims {:?} vs {:?}", a.dims(), b.dims())));
            }
            let qa = dequant(Description::A, a)?;
            let qb = dequant(Description::B, b)?;
            (DecoderKind::Central, g.concat(&[qa, qb]))
        }
        (Some(a), None) => (DecoderKind::SideA, dequant(Description::A, a)?),
        (None, Some(b)) => (DecoderKind::SideB, dequant(Description::B, b)?),
        (None, None) => return Err(MdcError::invalid("no description to decode")),
    };
    let y = decoder(&mut g, p, &bound, kind, input)?;
    Image::from_tensor(g.value(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            base_channels: 4,
            feature_channels: 2,
            levels: 3,
            resconv_per_block: 1,
            entropy_channels: 4,
            ..Default::default()
        };
        let mut p = ModelParams::init(cfg, 5).unwrap();
        // a narrow untrained encoder yields |z| far below the center spacing
        p.get_mut("enc.z.w").scale_assign(400.0);
        p
    }

    fn picture(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| 0.5 + 0.45 * ((i % w) as f64 * 0.3 + (i / w) as f64 * 0.11).sin()).collect();
        Image::new(3, h, w, data).unwrap()
    }

    #[test]
    fn gradients_reach_encoder_and_centers() {
        let p = tiny();
        let x = picture(16, 16);
        let mut g = Graph::new();
        let b = Bound::leaves(&mut g, &p);
        let xv = g.constant(x.to_tensor());
        let f = forward(&mut g, &p, &b, xv, None).unwrap();
        let mut terms = vec![(f.bits_a, 1.0), (f.bits_b, 1.0)];
        for y in [f.y_a, f.y_b, f.y_central] {
            terms.push((g.mae_term(&x, y), 1.0));
        }
        let loss = g.weighted_sum(&terms);
        let grads = g.backward(loss);
        for name in ["enc.stem.w", "centers_a", "centers_b", "ent_a.l1.w", "dec_c.up1.w", "enc.da.w"] {
            let gr = grads.wrt(b.var(&p, name)).unwrap_or_else(|| panic!("{name} got no gradient"));
            assert!(gr.sum_sq() > 0.0, "{name} gradient is zero");
        }
        assert_eq!(f.indices[0].dims(), (2, 2, 2));
    }

    #[test]
    fn ste_forward_values_are_hard() {
        let p = tiny();
        let mut g = Graph::new();
        let b = Bound::leaves(&mut g, &p);
        let xv = g.constant(picture(16, 24).to_tensor());
        let f = forward(&mut g, &p, &b, xv, None).unwrap();
        let an = analyze(&p, &picture(16, 24)).unwrap();
        assert_eq!(f.indices[0], an.indices[0]);
        assert_eq!(f.indices[1], an.indices[1]);
        let direct = synthesize(&p, Some(&an.indices[0]), Some(&an.indices[1])).unwrap();
        let via_graph = Image::from_tensor(g.value(f.y_central)).unwrap();
        let worst = direct.data().iter().zip(via_graph.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn symmetric_model_gives_identical_descriptions() {
        let mut p = tiny();
        for suffix in ["w", "b"] {
            let a = p.get(&format!("enc.da.{suffix}")).clone();
            *p.get_mut(&format!("enc.db.{suffix}")) = a;
        }
        let c = p.get("centers_a").clone();
        *p.get_mut("centers_b") = c;
        let an = analyze(&p, &picture(24, 16)).unwrap();
        assert_eq!(an.indices[0].data(), an.indices[1].data());
    }

    #[test]
    fn synthesize_picks_decoder_by_availability() {
        let p = tiny();
        let an = analyze(&p, &picture(16, 16)).unwrap();
        let [a, b] = &an.indices;
        let central = synthesize(&p, Some(a), Some(b)).unwrap();
        let side_a = synthesize(&p, Some(a), None).unwrap();
        let side_b = synthesize(&p, None, Some(b)).unwrap();
        assert_eq!((central.height(), central.width()), (16, 16));
        assert_ne!(central, side_a);
        assert_ne!(side_a, side_b);
        assert!(synthesize(&p, None, None).is_err());
    }
}
