//! Dynamic tape: every op records its parents and a backward closure that
//! maps the output gradient to parent gradients. Gradients accumulate in
//! fixed topological order, so a fixed graph always produces bit-identical
//! results.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rayon::prelude::*;

pub type TensorId = usize;

type BackwardFn = Box<
    dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>, &[bool]) -> Vec<Option<ArrayD<f64>>>,
>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<TensorId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<TensorId>,
        backward: Option<BackwardFn>,
    ) -> TensorId {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Insert an input tensor. Only leaves with `requires_grad` collect
    /// gradients.
    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Reverse pass from a scalar root; returns per-node gradients (None for
    /// nodes the root does not depend on or that do not require gradients).
    pub fn backward(&self, root: TensorId) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));
        for id in (0..=root).rev() {
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            let Some(back) = &node.backward else {
                continue;
            };
            let inputs: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = back(&gout, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }

    // ---------------------------------------------------------------- ops

    fn unary<F, G>(&mut self, x: TensorId, f: F, df: G) -> TensorId
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64 + 'static,
    {
        let value = self.nodes[x].value.mapv(&f);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gout, inputs, _, _| {
                let mut gx = gout.clone();
                gx.zip_mut_with(inputs[0], |g, &xi| *g *= df(xi));
                vec![Some(gx)]
            })),
        )
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), |xi| if xi > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |xi| if xi > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.tanh(), |xi| 1.0 - xi.tanh().powi(2))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| 1.0 / (1.0 + (-v).exp()),
            |xi| {
                let s = 1.0 / (1.0 + (-xi).exp());
                s * (1.0 - s)
            },
        )
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| v.abs(),
            |xi| {
                if xi > 0.0 {
                    1.0
                } else if xi < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// Hard clamp; zero gradient outside the open interval.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(
            x,
            move |v| v.clamp(lo, hi),
            move |xi| if xi > lo && xi < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|gout, _, _, _| {
                vec![Some(gout.clone()), Some(gout.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|gout, _, _, _| {
                vec![Some(gout.clone()), Some(-gout.clone())]
            })),
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|gout, inputs, _, _| {
                vec![Some(gout * inputs[1]), Some(gout * inputs[0])]
            })),
        )
    }

    pub fn mul_scalar(&mut self, x: TensorId, s: f64) -> TensorId {
        let value = self.nodes[x].value.mapv(|v| v * s);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gout, _, _, _| vec![Some(gout.mapv(|g| g * s))])),
        )
    }

    pub fn add_scalar(&mut self, x: TensorId, s: f64) -> TensorId {
        let value = self.nodes[x].value.mapv(|v| v + s);
        self.push(
            value,
            vec![x],
            Some(Box::new(|gout, _, _, _| vec![Some(gout.clone())])),
        )
    }

    /// Elementwise product with a constant weight array (no grad to weights).
    pub fn mul_const(&mut self, x: TensorId, w: ArrayD<f64>) -> TensorId {
        let value = &self.nodes[x].value * &w;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gout, _, _, _| vec![Some(gout * &w)])),
        )
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x].value.sum();
        let shape = self.nodes[x].value.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![x],
            Some(Box::new(move |gout, _, _, _| {
                let g = gout.iter().next().copied().unwrap();
                vec![Some(ArrayD::from_elem(shape.clone(), g))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x].value.len() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Binary cross-entropy of predictions in (0,1) against a constant
    /// target, with predictions clamped at `eps`.
    pub fn bce_loss(&mut self, pred: TensorId, target: ArrayD<f64>, eps: f64) -> TensorId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.raw_dim(), target.raw_dim(), "bce shape mismatch");
        let n = p.len() as f64;
        let mut total = 0.0;
        ndarray::Zip::from(p).and(&target).for_each(|&pv, &tv| {
            let pc = pv.clamp(eps, 1.0 - eps);
            total -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        });
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total / n),
            vec![pred],
            Some(Box::new(move |gout, inputs, _, _| {
                let g = gout.iter().next().copied().unwrap();
                let mut gp = inputs[0].clone();
                ndarray::Zip::from(&mut gp).and(&target).for_each(|gpv, &tv| {
                    let pv = *gpv;
                    *gpv = if pv > eps && pv < 1.0 - eps {
                        g * (-tv / pv + (1.0 - tv) / (1.0 - pv)) / n
                    } else {
                        0.0
                    };
                });
                vec![Some(gp)]
            })),
        )
    }

    /// Weighted binary cross-entropy: sum(w_i * bce_i) / sum(w).
    pub fn bce_loss_weighted(
        &mut self,
        pred: TensorId,
        target: ArrayD<f64>,
        weights: ArrayD<f64>,
        eps: f64,
    ) -> TensorId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.raw_dim(), target.raw_dim(), "bce shape mismatch");
        assert_eq!(p.raw_dim(), weights.raw_dim(), "bce weight shape mismatch");
        let wsum: f64 = weights.sum();
        let mut total = 0.0;
        ndarray::Zip::from(p)
            .and(&target)
            .and(&weights)
            .for_each(|&pv, &tv, &wv| {
                let pc = pv.clamp(eps, 1.0 - eps);
                total -= wv * (tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln());
            });
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total / wsum),
            vec![pred],
            Some(Box::new(move |gout, inputs, _, _| {
                let g = gout.iter().next().copied().unwrap();
                let mut gp = inputs[0].clone();
                ndarray::Zip::from(&mut gp)
                    .and(&target)
                    .and(&weights)
                    .for_each(|gpv, &tv, &wv| {
                        let pv = *gpv;
                        *gpv = if pv > eps && pv < 1.0 - eps {
                            g * wv * (-tv / pv + (1.0 - tv) / (1.0 - pv)) / wsum
                        } else {
                            0.0
                        };
                    });
                vec![Some(gp)]
            })),
        )
    }

    /// Slice one channel of an NCHW tensor, keeping the channel axis.
    pub fn slice_channel(&mut self, x: TensorId, channel: usize) -> TensorId {
        let v4 = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("slice_channel expects NCHW");
        let value = v4
            .slice(ndarray::s![.., channel..channel + 1, .., ..])
            .to_owned()
            .into_dyn();
        let full_shape = self.nodes[x].value.raw_dim();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |gout, _, _, _| {
                let mut gx = ArrayD::<f64>::zeros(full_shape.clone());
                {
                    let mut gx4 = gx
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap();
                    let go4 = gout.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    gx4.slice_mut(ndarray::s![.., channel..channel + 1, .., ..])
                        .assign(&go4);
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("concat expects NCHW");
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("concat expects NCHW");
        let ca = av.shape()[1];
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat shapes")
            .into_dyn();
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |gout, _, _, _| {
                let g4 = gout.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let ga = g4.slice(ndarray::s![.., ..ca, .., ..]).to_owned().into_dyn();
                let gb = g4.slice(ndarray::s![.., ca.., .., ..]).to_owned().into_dyn();
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// Nearest-neighbor 2x upsample of an NCHW tensor.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> TensorId {
        let v = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("upsample expects NCHW");
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let mut out = Array4::<f64>::zeros((n, c, h * 2, w * 2));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let val = v[(ni, ci, y, xx)];
                        out[(ni, ci, 2 * y, 2 * xx)] = val;
                        out[(ni, ci, 2 * y + 1, 2 * xx)] = val;
                        out[(ni, ci, 2 * y, 2 * xx + 1)] = val;
                        out[(ni, ci, 2 * y + 1, 2 * xx + 1)] = val;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |gout, _, _, _| {
                let g = gout.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[(ni, ci, y, xx)] = g[(ni, ci, 2 * y, 2 * xx)]
                                    + g[(ni, ci, 2 * y + 1, 2 * xx)]
                                    + g[(ni, ci, 2 * y, 2 * xx + 1)]
                                    + g[(ni, ci, 2 * y + 1, 2 * xx + 1)];
                            }
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            })),
        )
    }

    /// 2D convolution on NCHW input with OIHW weights, zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d input NCHW");
        let wv = self.nodes[w]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d weight OIHW");
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv2d bias 1-D");
        let (n, c, h, wdt) = (
            xv.shape()[0],
            xv.shape()[1],
            xv.shape()[2],
            xv.shape()[3],
        );
        let (f, ck, kh, kw) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        assert_eq!(c, ck, "conv2d channel mismatch");
        assert_eq!(bv.len(), f, "conv2d bias length");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;

        let w_mat = wv.to_owned().into_shape_with_order((f, c * kh * kw)).unwrap();
        // Per-sample im2col + GEMM, parallel over the batch; each sample
        // writes its own output slice, so the result is deterministic.
        let bv_owned = bv.to_owned();
        let per_sample: Vec<(Array2<f64>, Array2<f64>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let col = im2col(&xv.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
                let mut o = Array2::<f64>::zeros((f, oh * ow));
                ndarray::linalg::general_mat_mul(1.0, &w_mat, &col, 0.0, &mut o);
                (col, o)
            })
            .collect();
        let mut out = Array4::<f64>::zeros((n, f, oh, ow));
        let mut cols: Vec<Array2<f64>> = Vec::with_capacity(n);
        for (ni, (col, o)) in per_sample.into_iter().enumerate() {
            for fi in 0..f {
                for p in 0..oh * ow {
                    out[(ni, fi, p / ow, p % ow)] = o[(fi, p)] + bv_owned[fi];
                }
            }
            cols.push(col);
        }

        let (kh_c, kw_c, stride_c, pad_c) = (kh, kw, stride, pad);
        self.push(
            out.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |gout, inputs, _, needs| {
                let g4 = gout.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let wv = inputs[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let w_mat = wv
                    .to_owned()
                    .into_shape_with_order((f, c * kh_c * kw_c))
                    .unwrap();
                let need_gx = needs[0];

                // Per-sample partials in parallel; reduce in index order so
                // the weight gradient is bit-reproducible.
                let partials: Vec<(Array2<f64>, Array1<f64>, ndarray::Array3<f64>)> = (0..n)
                    .into_par_iter()
                    .map(|ni| {
                        let go = g4
                            .index_axis(Axis(0), ni)
                            .to_owned()
                            .into_shape_with_order((f, oh * ow))
                            .unwrap();
                        let mut gw_p = Array2::<f64>::zeros((f, c * kh_c * kw_c));
                        ndarray::linalg::general_mat_mul(1.0, &go, &cols[ni].t(), 0.0, &mut gw_p);
                        let mut gb_p = Array1::<f64>::zeros(f);
                        for fi in 0..f {
                            gb_p[fi] = go.row(fi).sum();
                        }
                        let mut gx_p = ndarray::Array3::<f64>::zeros((c, h, wdt));
                        if need_gx {
                            let mut gcol = Array2::<f64>::zeros((c * kh_c * kw_c, oh * ow));
                            ndarray::linalg::general_mat_mul(1.0, &w_mat.t(), &go, 0.0, &mut gcol);
                            col2im(
                                &gcol,
                                &mut gx_p.view_mut(),
                                kh_c,
                                kw_c,
                                stride_c,
                                pad_c,
                                oh,
                                ow,
                            );
                        }
                        (gw_p, gb_p, gx_p)
                    })
                    .collect();
                let mut gw = Array2::<f64>::zeros((f, c * kh_c * kw_c));
                let mut gb = Array1::<f64>::zeros(f);
                let mut gx = Array4::<f64>::zeros((n, c, h, wdt));
                for (ni, (gw_p, gb_p, gx_p)) in partials.into_iter().enumerate() {
                    gw += &gw_p;
                    gb += &gb_p;
                    if need_gx {
                        gx.index_axis_mut(Axis(0), ni).assign(&gx_p);
                    }
                }
                let gw4 = gw
                    .into_shape_with_order((f, c, kh_c, kw_c))
                    .unwrap()
                    .into_dyn();
                vec![
                    if need_gx { Some(gx.into_dyn()) } else { None },
                    Some(gw4),
                    Some(gb.into_dyn()),
                ]
            })),
        )
    }

    /// Instance normalization with per-channel affine parameters.
    pub fn instance_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorId {
        let xv = self.nodes[x]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("instance_norm NCHW");
        let gv = self.nodes[gamma]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let bv = self.nodes[beta]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let (n, c, h, w) = (
            xv.shape()[0],
            xv.shape()[1],
            xv.shape()[2],
            xv.shape()[3],
        );
        let hw = (h * w) as f64;

        let mut out = Array4::<f64>::zeros((n, c, h, w));
        let mut mean = Array2::<f64>::zeros((n, c));
        let mut inv_std = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.slice(ndarray::s![ni, ci, .., ..]);
                let mu = plane.sum() / hw;
                let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / hw;
                let is = 1.0 / (var + eps).sqrt();
                mean[(ni, ci)] = mu;
                inv_std[(ni, ci)] = is;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ni, ci, y, xx)] = (plane[(y, xx)] - mu) * is * gv[ci] + bv[ci];
                    }
                }
            }
        }

        self.push(
            out.into_dyn(),
            vec![x, gamma, beta],
            Some(Box::new(move |gout, inputs, _, _| {
                let g4 = gout.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xv = inputs[0]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let gv = inputs[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let mu = mean[(ni, ci)];
                        let is = inv_std[(ni, ci)];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for y in 0..h {
                            for xx in 0..w {
                                let dy = g4[(ni, ci, y, xx)];
                                let xhat = (xv[(ni, ci, y, xx)] - mu) * is;
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                                ggamma[ci] += dy * xhat;
                                gbeta[ci] += dy;
                            }
                        }
                        let m_dy = sum_dy / hw;
                        let m_dy_xhat = sum_dy_xhat / hw;
                        for y in 0..h {
                            for xx in 0..w {
                                let dy = g4[(ni, ci, y, xx)];
                                let xhat = (xv[(ni, ci, y, xx)] - mu) * is;
                                gx[(ni, ci, y, xx)] =
                                    gv[ci] * is * (dy - m_dy - xhat * m_dy_xhat);
                            }
                        }
                    }
                }
                vec![
                    Some(gx.into_dyn()),
                    Some(ggamma.into_dyn()),
                    Some(gbeta.into_dyn()),
                ]
            })),
        )
    }
}

/// Unfold one CHW image into a (C*kh*kw, OH*OW) matrix with zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ci * kh * kw + ky * kw + kx;
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[(row, oy * ow + ox)] = x[(ci, sy as usize, sx as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the unfolded gradient back onto the CHW input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ci * kh * kw + ky * kw + kx;
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        gx[(ci, sy as usize, sx as usize)] += gcol[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on a scalar-valued graph builder.
    fn grad_check<F>(build: F, leaves: &[ArrayD<f64>], tol: f64)
    where
        F: Fn(&mut Tape, &[TensorId]) -> TensorId,
    {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = leaves.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads[ids[li]].as_ref().expect("leaf gradient");
            // Probe a handful of positions per leaf.
            let len = leaf.len();
            let mut rng = ChaCha8Rng::seed_from_u64(li as u64);
            for _ in 0..5.min(len) {
                let flat = rng.gen_range(0..len);
                let mut plus = leaves.to_vec();
                let mut minus = leaves.to_vec();
                plus[li].as_slice_mut().unwrap()[flat] += h;
                minus[li].as_slice_mut().unwrap()[flat] -= h;
                let eval = |vals: &[ArrayD<f64>]| {
                    let mut t = Tape::new();
                    let ids: Vec<TensorId> =
                        vals.iter().map(|v| t.leaf(v.clone(), false)).collect();
                    let r = build(&mut t, &ids);
                    t.scalar_value(r)
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.as_slice().unwrap()[flat];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "leaf {li} idx {flat}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        grad_check(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1);
                t.mean_all(y)
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-6,
        );
        // Strided, unpadded variant.
        grad_check(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 2, 0);
                let y = t.tanh(y);
                t.mean_all(y)
            },
            &[x, w, b],
            1e-6,
        );
    }

    #[test]
    fn instance_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 5, 5], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        grad_check(
            |t, ids| {
                let y = t.instance_norm(ids[0], ids[1], ids[2], 1e-5);
                let y = t.sigmoid(y);
                t.mean_all(y)
            },
            &[x, gamma, beta],
            1e-5,
        );
    }

    #[test]
    fn activation_and_arith_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        grad_check(
            |t, ids| {
                let x = t.leaky_relu(ids[0], 0.2);
                let y = t.mul(x, ids[1]);
                let y = t.add(y, ids[0]);
                let y = t.mul_scalar(y, 0.7);
                let y = t.add_scalar(y, 0.1);
                t.mean_all(y)
            },
            &[a.clone(), b.clone()],
            1e-6,
        );
        grad_check(|t, ids| t.l1_loss(ids[0], ids[1]), &[a, b], 1e-6);
    }

    #[test]
    fn upsample_and_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[1, 3, 4, 4], &mut rng);
        grad_check(
            |t, ids| {
                let y = t.upsample_nearest2(ids[0]);
                let y = t.slice_channel(y, 1);
                t.mean_all(y)
            },
            &[x.clone()],
            1e-6,
        );
        let b = rand_tensor(&[1, 2, 4, 4], &mut rng);
        grad_check(
            |t, ids| {
                let y = t.concat_channels(ids[0], ids[1]);
                let y = t.tanh(y);
                t.mean_all(y)
            },
            &[x, b],
            1e-6,
        );
    }

    #[test]
    fn bce_matches_closed_forms() {
        let mut tape = Tape::new();
        let half = tape.leaf(ArrayD::from_elem(IxDyn(&[4]), 0.5), true);
        let ones = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let zeros = ArrayD::from_elem(IxDyn(&[4]), 0.0);
        let l1 = tape.bce_loss(half, ones.clone(), 1e-7);
        let l0 = tape.bce_loss(half, zeros, 1e-7);
        assert!((tape.scalar_value(l1) - 2f64.ln()).abs() < 1e-12);
        assert!((tape.scalar_value(l0) - 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ArrayD::from_shape_fn(IxDyn(&[6]), |_| rng.gen_range(0.05..0.95));
        let t = ArrayD::from_shape_fn(IxDyn(&[6]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        grad_check(
            |tape, ids| tape.bce_loss(ids[0], t.clone(), 1e-7),
            &[p],
            1e-6,
        );
        let _ = ones;
    }

    #[test]
    fn clamp_passes_gradient_inside_only() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![-2.0, 0.3, 2.0]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x, true);
        let y = tape.clamp(id, -1.0, 1.0);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        let g = grads[id].as_ref().unwrap();
        assert_eq!(g.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.5), true);
        let y = tape.add(x, x);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert_eq!(
            grads[x].as_ref().unwrap().as_slice().unwrap(),
            &[2.0, 2.0]
        );
    }
}
