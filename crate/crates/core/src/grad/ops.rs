//! Differentiable operations recorded on a [`Graph`].

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::kernels::{self, CausalTaps, ConvGeom, VolumeDims};
use crate::image::Image;
use crate::metrics::{self, ScaleWeights};
use crate::quant;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).expect("op output shape")
}

impl Graph {
    /// `x: [cin, h, w]`, `weight: [cout, cin, kh, kw]`, `bias: [cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize, dilation: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let g = ConvGeom { kh: ws[2], kw: ws[3], stride, pad, dilation };
        let (out, ho, wo) = kernels::conv2d_forward(
            self.value(x).data(),
            cin,
            h,
            w,
            self.value(weight).data(),
            self.value(bias).data(),
            cout,
            &g,
        );
        self.push(
            t(&[cout, ho, wo], out),
            &[x, weight, bias],
            Box::new(move |gy, p, _, needs| {
                let (dx, dw, db) = kernels::conv2d_backward(p[0].data(), cin, h, w, p[1].data(), cout, &g, gy.data(), needs[0]);
                vec![dx.map(|d| t(&[cin, h, w], d)), Some(t(p[1].shape(), dw)), Some(t(&[cout], db))]
            }),
        )
    }

    /// `x: [cin, h, w]`, `weight: [cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws[0], xs[0], "conv_transpose2d channel mismatch");
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        let (out, ho, wo) = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            cin,
            h,
            w,
            self.value(weight).data(),
            self.value(bias).data(),
            cout,
            k,
            stride,
            pad,
        );
        self.push(
            t(&[cout, ho, wo], out),
            &[x, weight, bias],
            Box::new(move |gy, p, _, needs| {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    p[0].data(),
                    cin,
                    h,
                    w,
                    p[1].data(),
                    cout,
                    k,
                    stride,
                    pad,
                    gy.data(),
                    needs[0],
                );
                vec![dx.map(|d| t(&[cin, h, w], d)), Some(t(p[1].shape(), dw)), Some(t(&[cout], db))]
            }),
        )
    }

    /// `x: [positions, cin]` over `dims`, `weight: [taps, cin, cout]`.
    pub fn masked_conv3d(&mut self, x: Var, weight: Var, bias: Var, dims: VolumeDims, taps: Arc<CausalTaps>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(xs[0], dims.positions());
        assert_eq!(ws[0], taps.len());
        assert_eq!(ws[1], xs[1]);
        let (cin, cout) = (ws[1], ws[2]);
        let out = kernels::masked_conv3d_forward(
            self.value(x).data(),
            &dims,
            &taps,
            self.value(weight).data(),
            self.value(bias).data(),
            cin,
            cout,
        );
        self.push(
            t(&[dims.positions(), cout], out),
            &[x, weight, bias],
            Box::new(move |gy, p, _, needs| {
                let (dx, dw, db) =
                    kernels::masked_conv3d_backward(p[0].data(), &dims, &taps, p[1].data(), cin, cout, gy.data(), needs[0]);
                vec![dx.map(|d| t(p[0].shape(), d)), Some(t(p[1].shape(), dw)), Some(t(&[cout], db))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(
            out,
            &[x],
            Box::new(move |g, p, _, _| vec![Some(g.zip_map(p[0], |gv, xv| if xv > 0.0 { gv } else { slope * gv }))]),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, &[x], Box::new(|g, _, y, _| vec![Some(g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(p[1], |gv, bv| gv * bv)),
                    needs[1].then(|| g.zip_map(p[0], |gv, av| gv * av)),
                ]
            }),
        )
    }

    /// `x + offset` where `offset` carries no gradient. With
    /// `offset = hard − soft` this is the straight-through estimator:
    /// forward value `hard`, gradient of `soft`.
    pub fn add_detached(&mut self, x: Var, offset: &Tensor) -> Var {
        assert_eq!(self.value(x).shape(), offset.shape(), "offset shape mismatch");
        let out = self.value(x).zip_map(offset, |a, b| a + b);
        self.push(out, &[x], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    /// Straight-through combination of `soft` with constant `hard` values.
    pub fn straight_through(&mut self, soft: Var, hard: &Tensor) -> Var {
        let offset = hard.zip_map(self.value(soft), |h, s| h - s);
        self.add_detached(soft, &offset)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    /// `Σ coef_i · x_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let coefs: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(value),
            &vars,
            Box::new(move |g, _, _, _| coefs.iter().map(|c| Some(Tensor::scalar(c * g.item()))).collect()),
        )
    }

    /// Concatenate `[c_i, ...]` tensors along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += v.shape()[0];
            sizes.push((v.len(), v.shape().to_vec()));
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.push(
            t(&shape, data),
            parts,
            Box::new(move |g, _, _, _| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|(n, s)| {
                        let part = t(s, g.data()[off..off + n].to_vec());
                        off += n;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    /// `[c, h, w]` to position-major `[h, w, c]`.
    pub fn chw_to_hwc(&mut self, x: Var) -> Var {
        let [c, h, w] = *self.value(x).shape() else { panic!("chw_to_hwc expects [c, h, w]") };
        let out = quant::chw_to_hwc(self.value(x).data(), c, h, w);
        self.push(
            t(&[h, w, c], out),
            &[x],
            Box::new(move |g, _, _, _| vec![Some(t(&[c, h, w], quant::hwc_to_chw(g.data(), c, h, w)))]),
        )
    }

    pub fn hwc_to_chw(&mut self, x: Var) -> Var {
        let [h, w, c] = *self.value(x).shape() else { panic!("hwc_to_chw expects [h, w, c]") };
        let out = quant::hwc_to_chw(self.value(x).data(), c, h, w);
        self.push(
            t(&[c, h, w], out),
            &[x],
            Box::new(move |g, _, _, _| vec![Some(t(&[h, w, c], quant::chw_to_hwc(g.data(), c, h, w)))]),
        )
    }

    /// Importance map `[1, m, n]` to the channel-progressive mask `[m, n, k]`.
    pub fn expand_importance(&mut self, map: Var, channels: usize) -> Var {
        let [1, m, n] = *self.value(map).shape() else { panic!("importance map must be [1, m, n]") };
        let d = self.value(map).data();
        let kf = channels as f64;
        let mut out = Vec::with_capacity(m * n * channels);
        for &dv in d {
            out.extend((0..channels).map(|k| (kf * dv - k as f64).clamp(0.0, 1.0)));
        }
        self.push(
            t(&[m, n, channels], out),
            &[map],
            Box::new(move |g, p, _, _| {
                let d = p[0].data();
                let gd = d
                    .iter()
                    .enumerate()
                    .map(|(i, &dv)| {
                        (0..channels)
                            .map(|k| g.data()[i * channels + k] * quant::expand_importance_slope(dv, k, channels))
                            .sum()
                    })
                    .collect();
                vec![Some(t(&[1, m, n], gd))]
            }),
        )
    }

    /// Softmax center weights: `z` of any shape with `P` elements, `centers: [L]`,
    /// output `[P, L]`.
    pub fn soft_assign(&mut self, z: Var, centers: Var, sigma: f64) -> Var {
        let zv = self.value(z).data();
        let cv = self.value(centers).data();
        let levels = cv.len();
        let mut out = vec![0.0; zv.len() * levels];
        for (i, &zi) in zv.iter().enumerate() {
            quant::soft_assign_into(zi, cv, sigma, &mut out[i * levels..(i + 1) * levels]);
        }
        let positions = zv.len();
        self.push(
            t(&[positions, levels], out),
            &[z, centers],
            Box::new(move |g, p, wts, _| {
                let zs = p[0].data();
                let cs = p[1].data();
                let mut dz = vec![0.0; zs.len()];
                let mut dc = vec![0.0; levels];
                for (i, &zi) in zs.iter().enumerate() {
                    let w = &wts.data()[i * levels..(i + 1) * levels];
                    let gw = &g.data()[i * levels..(i + 1) * levels];
                    let mean: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
                    for j in 0..levels {
                        // d logit_j, logit_j = −σ (z − c_j)²
                        let ds = w[j] * (gw[j] - mean);
                        let diff = zi - cs[j];
                        dz[i] -= ds * 2.0 * sigma * diff;
                        dc[j] += ds * 2.0 * sigma * diff;
                    }
                }
                vec![Some(t(p[0].shape(), dz)), Some(t(&[levels], dc))]
            }),
        )
    }

    /// `Σ_j w[p, j] · c_j`, reshaped to `shape`.
    pub fn weighted_centers(&mut self, weights: Var, centers: Var, shape: &[usize]) -> Var {
        let [positions, levels] = *self.value(weights).shape() else { panic!("weights must be [p, l]") };
        let w = self.value(weights).data();
        let c = self.value(centers).data();
        let out: Vec<f64> =
            (0..positions).map(|i| w[i * levels..(i + 1) * levels].iter().zip(c).map(|(a, b)| a * b).sum()).collect();
        self.push(
            t(shape, out),
            &[weights, centers],
            Box::new(move |g, p, _, _| {
                let w = p[0].data();
                let c = p[1].data();
                let mut dw = vec![0.0; positions * levels];
                let mut dc = vec![0.0; levels];
                for (i, &gv) in g.data().iter().enumerate() {
                    for j in 0..levels {
                        dw[i * levels + j] = gv * c[j];
                        dc[j] += gv * w[i * levels + j];
                    }
                }
                vec![Some(t(&[positions, levels], dw)), Some(t(&[levels], dc))]
            }),
        )
    }

    /// Code length in bits, `−Σ_p Σ_l target[p,l] · log₂ softmax(logits[p])_l`.
    pub fn cross_entropy_bits(&mut self, logits: Var, target: Var) -> Var {
        let [positions, levels] = *self.value(logits).shape() else { panic!("logits must be [p, l]") };
        assert_eq!(self.value(target).shape(), self.value(logits).shape());
        let lg = self.value(logits).data();
        let tg = self.value(target).data();
        let mut log_probs = vec![0.0; positions * levels];
        let mut bits = 0.0;
        for i in 0..positions {
            let row = &lg[i * levels..(i + 1) * levels];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..levels {
                let lp = row[j] - lse;
                log_probs[i * levels + j] = lp;
                bits -= tg[i * levels + j] * lp;
            }
        }
        let inv_ln2 = 1.0 / std::f64::consts::LN_2;
        self.push(
            Tensor::scalar(bits * inv_ln2),
            &[logits, target],
            Box::new(move |g, p, _, needs| {
                let gs = g.item() * inv_ln2;
                let tg = p[1].data();
                let d_logits = needs[0].then(|| {
                    let mut d = vec![0.0; positions * levels];
                    for i in 0..positions {
                        let tsum: f64 = tg[i * levels..(i + 1) * levels].iter().sum();
                        for j in 0..levels {
                            let prob = log_probs[i * levels + j].exp();
                            d[i * levels + j] = gs * (prob * tsum - tg[i * levels + j]);
                        }
                    }
                    t(&[positions, levels], d)
                });
                let d_target = needs[1].then(|| t(&[positions, levels], log_probs.iter().map(|lp| -gs * lp).collect()));
                vec![d_logits, d_target]
            }),
        )
    }

    /// Pixel-domain L1 term between a reference image and `y`.
    pub fn mae_term(&mut self, reference: &Image, y: Var) -> Var {
        let yi = Image::from_tensor(self.value(y)).expect("image tensor");
        let value = metrics::mae_term(reference, &yi).expect("matching image shapes");
        let reference = reference.clone();
        self.push(
            Tensor::scalar(value),
            &[y],
            Box::new(move |g, p, _, _| {
                let yi = Image::from_tensor(p[0]).expect("image tensor");
                let mut d = metrics::mae_term_grad(&reference, &yi).expect("matching image shapes").to_tensor();
                d.scale_assign(g.item());
                vec![Some(d)]
            }),
        )
    }

    /// Multi-scale structural similarity between two image vars.
    pub fn multiscale_ssim(&mut self, a: Var, b: Var, weights: ScaleWeights) -> Var {
        let ai = Image::from_tensor(self.value(a)).expect("image tensor");
        let bi = Image::from_tensor(self.value(b)).expect("image tensor");
        let need_a = self.is_recording() && self.requires_grad(a);
        let need_b = self.is_recording() && self.requires_grad(b);
        let (value, ga, gb) =
            metrics::multiscale_ssim_grad(&ai, &bi, &weights, need_a, need_b).expect("multiscale ssim inputs");
        let ga = ga.map(|i| i.to_tensor());
        let gb = gb.map(|i| i.to_tensor());
        self.push(
            Tensor::scalar(value),
            &[a, b],
            Box::new(move |g, _, _, _| {
                let s = g.item();
                let scaled = |x: &Option<Tensor>| {
                    x.as_ref().map(|x| {
                        let mut x = x.clone();
                        x.scale_assign(s);
                        x
                    })
                };
                vec![scaled(&ga), scaled(&gb)]
            }),
        )
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_sq();
        self.push(Tensor::scalar(value), &[x], Box::new(|g, p, _, _| vec![Some(p[0].map(|v| 2.0 * v * g.item()))]))
    }
}
