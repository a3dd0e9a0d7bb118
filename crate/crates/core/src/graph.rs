//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves created with
//! `requires_grad = false` (inputs, frozen parameters) never receive gradients and
//! operations whose parents are all constant skip their backward pass entirely.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

type BackwardFn<F> = Box<dyn Fn(&BackwardCtx<'_, F>) -> Vec<Option<Tensor<F>>>>;

/// Everything a backward closure sees: upstream gradient, parent values, own output.
pub struct BackwardCtx<'a, F> {
    pub grad: &'a Tensor<F>,
    pub inputs: Vec<&'a Tensor<F>>,
    pub output: &'a Tensor<F>,
    pub needs: Vec<bool>,
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn<F>>,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Batch statistics observed by a training-mode batch norm, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance over the batch.
    pub var: Vec<F>,
    pub count: usize,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, parents: vec![], backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, parents: Vec<Var>, backward: BackwardFn<F>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        self.nodes.push(Node { value, requires_grad, parents, backward });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = &self.nodes[output.0];
        assert_eq!(out.value.len(), 1, "backward needs a scalar output");
        grads[output.0] = Some(Tensor::full(out.value.shape(), F::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.push(
            value,
            vec![x],
            Box::new(|ctx| {
                vec![Some(ctx.grad.zip_map(ctx.output, |g, y| if y > F::zero() { g } else { F::zero() }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(
            value,
            vec![x],
            Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, s| g * s * (F::one() - s)))]),
        )
    }

    /// Elementwise maximum; the gradient follows the larger operand (ties go to `a`).
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| if x >= y { x } else { y });
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = Tensor::zeros(ctx.grad.shape());
                let mut gb = Tensor::zeros(ctx.grad.shape());
                for i in 0..a.len() {
                    if a[i] >= b[i] {
                        ga.data_mut()[i] = ctx.grad.data()[i];
                    } else {
                        gb.data_mut()[i] = ctx.grad.data()[i];
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `x[n,c,h,w] * s[n,0,h,w]`.
    pub fn mul_spatial(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(s).shape(), &[n, 1, h, w], "mul_spatial gate shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        {
            let sv = self.value(s).data();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        od[base + p] *= sv[ni * hw + p];
                    }
                }
            }
        }
        self.push(
            out,
            vec![x, s],
            Box::new(move |ctx| {
                let (xv, sv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                let mut gs = Tensor::zeros(ctx.inputs[1].shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            gx.data_mut()[base + p] = g[base + p] * sv[ni * hw + p];
                            gs.data_mut()[ni * hw + p] += g[base + p] * xv[base + p];
                        }
                    }
                }
                vec![Some(gx), Some(gs)]
            }),
        )
    }

    /// `x[n,c,h,w] * s[n,c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(s).shape(), &[n, c], "mul_channel gate shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        {
            let sv = self.value(s).data();
            for (nc, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let k = sv[nc];
                chunk.iter_mut().for_each(|v| *v *= k);
            }
        }
        self.push(
            out,
            vec![x, s],
            Box::new(move |ctx| {
                let (xv, sv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                let mut gs = Tensor::zeros(ctx.inputs[1].shape());
                for nc in 0..n * c {
                    let range = nc * hw..(nc + 1) * hw;
                    let mut acc = F::zero();
                    for p in range {
                        gx.data_mut()[p] = g[p] * sv[nc];
                        acc += g[p] * xv[p];
                    }
                    gs.data_mut()[nc] = acc;
                }
                vec![Some(gx), Some(gs)]
            }),
        )
    }

    // ------------------------------------------------------------------
    // shape manipulation and pooling

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        for ni in 0..n {
            let dst = out.sample_mut(ni);
            dst[..ca * hw].copy_from_slice(self.nodes[a.0].value.sample(ni));
            dst[ca * hw..].copy_from_slice(self.nodes[b.0].value.sample(ni));
        }
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |ctx| {
                let mut ga = Tensor::zeros(&[n, ca, h, w]);
                let mut gb = Tensor::zeros(&[n, cb, h, w]);
                for ni in 0..n {
                    let src = ctx.grad.sample(ni);
                    ga.sample_mut(ni).copy_from_slice(&src[..ca * hw]);
                    gb.sample_mut(ni).copy_from_slice(&src[ca * hw..]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InputSize { height: h, width: w, divisor: 2 });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for nc in 0..n * c {
                let plane = &xv[nc * h * w..(nc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (2 * oy) * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                        let o = nc * oh * ow + oy * ow + ox;
                        od[o] = plane[best];
                        argmax[o] = best as u32;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = gx.data_mut();
                for (o, &g) in ctx.grad.data().iter().enumerate() {
                    let nc = o / (oh * ow);
                    gd[nc * h * w + argmax[o] as usize] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over spatial positions: `[N,C,H,W]` → `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = F::one() / F::from_usize(hw).unwrap();
        let data: Vec<F> =
            self.value(x).data().chunks(hw).map(|ch| ch.iter().copied().sum::<F>() * inv).collect();
        let out = Tensor::from_vec(&[n, c], data).unwrap();
        self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for (nc, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let g = ctx.grad.data()[nc] * inv;
                    chunk.iter_mut().for_each(|v| *v = g);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = resize_bilinear(self.value(x), out_h, out_w);
        let ys = interp_table(h, out_h);
        let xs = interp_table(w, out_w);
        self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = gx.data_mut();
                let g = ctx.grad.data();
                for nc in 0..n * c {
                    let src = nc * h * w;
                    let dst = nc * out_h * out_w;
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let gv = g[dst + oy * out_w + ox];
                            let one = F::one();
                            gd[src + y0 * w + x0] += gv * (one - ly) * (one - lx);
                            gd[src + y0 * w + x1] += gv * (one - ly) * lx;
                            gd[src + y1 * w + x0] += gv * ly * (one - lx);
                            gd[src + y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    // ------------------------------------------------------------------
    // linear layers

    /// `x [N,In] · wᵀ` with `w [Out,In]`, no bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Dimension(format!("linear {xs:?} with weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, fout]);
        gemm(
            MatRef::new(self.value(x).data(), n, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            out.data_mut(),
            false,
        );
        Ok(self.push(
            out,
            vec![x, w],
            Box::new(move |ctx| {
                let g = MatRef::new(ctx.grad.data(), n, fout);
                let gx = ctx.needs[0].then(|| {
                    let mut gx = Tensor::zeros(&[n, fin]);
                    gemm(g, MatRef::new(ctx.inputs[1].data(), fout, fin), gx.data_mut(), false);
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = Tensor::zeros(&[fout, fin]);
                    gemm(g.t(), MatRef::new(ctx.inputs[0].data(), n, fin), gw.data_mut(), false);
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Stride-1 "same" convolution with an odd square kernel.
    /// `x [N,Cin,H,W]`, `w [Cout,Cin,k,k]`, optional `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d input {:?} with kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = Tensor::zeros(&[n, cout, h, wd]);
        let mut cols = if k == 1 { Vec::new() } else { vec![F::zero(); kk * hw] };
        for ni in 0..n {
            let xin = self.nodes[x.0].value.sample(ni);
            let colref = if k == 1 {
                xin
            } else {
                im2col(xin, cin, h, wd, k, &mut cols);
                &cols
            };
            gemm(
                MatRef::new(self.nodes[w.0].value.data(), cout, kk),
                MatRef::new(colref, kk, hw),
                out.sample_mut(ni),
                false,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for (nc, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let bv = bias[nc % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            out,
            parents,
            Box::new(move |ctx| {
                let xv = ctx.inputs[0];
                let wv = ctx.inputs[1].data();
                let mut gx = ctx.needs[0].then(|| Tensor::zeros(&[n, cin, h, wd]));
                let mut gw = ctx.needs[1].then(|| Tensor::zeros(&[cout, cin, k, k]));
                let mut cols = vec![F::zero(); if k == 1 { 0 } else { kk * hw }];
                let mut dcols = vec![F::zero(); if k == 1 { 0 } else { kk * hw }];
                for ni in 0..n {
                    let gout = MatRef::new(ctx.grad.sample(ni), cout, hw);
                    if let Some(gw) = gw.as_mut() {
                        let colref = if k == 1 {
                            xv.sample(ni)
                        } else {
                            im2col(xv.sample(ni), cin, h, wd, k, &mut cols);
                            &cols
                        };
                        gemm(gout, MatRef::new(colref, kk, hw).t(), gw.data_mut(), true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        if k == 1 {
                            gemm(MatRef::new(wv, cout, kk).t(), gout, gx.sample_mut(ni), false);
                        } else {
                            gemm(MatRef::new(wv, cout, kk).t(), gout, &mut dcols, false);
                            col2im(&dcols, cin, h, wd, k, gx.sample_mut(ni));
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| channel_sums(ctx.grad, cout)));
                }
                grads
            }),
        ))
    }

    /// 2×2 stride-2 transposed convolution. `x [N,Cin,H,W]`, `w [Cin,Cout,2,2]`, `b [Cout]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (wcin, cout, k1, k2) = self.value(w).dims4();
        if wcin != cin || k1 != 2 || k2 != 2 {
            return Err(Error::Dimension(format!(
                "transposed conv input {:?} with kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let hw = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let bias = self.value(b).data().to_vec();
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        let mut y = vec![F::zero(); cout * 4 * hw];
        for ni in 0..n {
            gemm(
                MatRef::new(self.nodes[w.0].value.data(), cin, cout * 4).t(),
                MatRef::new(self.nodes[x.0].value.sample(ni), cin, hw),
                &mut y,
                false,
            );
            let dst = out.sample_mut(ni);
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &y[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for iy in 0..h {
                            for ix in 0..wd {
                                dst[co * oh * ow + (2 * iy + a) * ow + 2 * ix + bb] =
                                    row[iy * wd + ix] + bias[co];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, w, b],
            Box::new(move |ctx| {
                let xv = ctx.inputs[0];
                let wv = ctx.inputs[1].data();
                let mut gx = ctx.needs[0].then(|| Tensor::zeros(&[n, cin, h, wd]));
                let mut gw = ctx.needs[1].then(|| Tensor::zeros(&[cin, cout, 2, 2]));
                let mut dy = vec![F::zero(); cout * 4 * hw];
                for ni in 0..n {
                    let src = ctx.grad.sample(ni);
                    for co in 0..cout {
                        for a in 0..2 {
                            for bb in 0..2 {
                                let row = &mut dy[(co * 4 + a * 2 + bb) * hw..][..hw];
                                for iy in 0..h {
                                    for ix in 0..wd {
                                        row[iy * wd + ix] =
                                            src[co * oh * ow + (2 * iy + a) * ow + 2 * ix + bb];
                                    }
                                }
                            }
                        }
                    }
                    let dym = MatRef::new(&dy, cout * 4, hw);
                    if let Some(gw) = gw.as_mut() {
                        gemm(MatRef::new(xv.sample(ni), cin, hw), dym.t(), gw.data_mut(), true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(MatRef::new(wv, cin, cout * 4), dym, gx.sample_mut(ni), false);
                    }
                }
                vec![gx, gw, ctx.needs[2].then(|| channel_sums(ctx.grad, cout))]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // normalization

    /// Training-mode batch norm over (N, H, W); returns the batch statistics too.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> (Var, BatchStats<F>) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let count = n * hw;
        let m = F::from_usize(count).unwrap();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        {
            let xv = self.value(x).data();
            for ci in 0..c {
                let mut s = F::zero();
                for ni in 0..n {
                    s += xv[(ni * c + ci) * hw..][..hw].iter().copied().sum::<F>();
                }
                let mu = s / m;
                let mut ss = F::zero();
                for ni in 0..n {
                    for &v in &xv[(ni * c + ci) * hw..][..hw] {
                        ss += (v - mu) * (v - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = ss / m;
            }
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut out = self.value(x).clone();
        {
            let g = self.value(gamma).data().to_vec();
            let bt = self.value(beta).data().to_vec();
            for (nc, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let ci = nc % c;
                for v in chunk.iter_mut() {
                    *v = (*v - mean[ci]) * inv_std[ci] * g[ci] + bt[ci];
                }
            }
        }
        let stats = BatchStats { mean: mean.clone(), var, count };
        let var = self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let xv = ctx.inputs[0].data();
                let gam = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for ci in 0..c {
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            let xhat = (xv[base + p] - mean[ci]) * inv_std[ci];
                            dgamma[ci] += g[base + p] * xhat;
                            dbeta[ci] += g[base + p];
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                    let gd = gx.data_mut();
                    for ci in 0..c {
                        // dxhat = g * gamma; dx = inv_std/M * (M dxhat - sum dxhat - xhat sum(dxhat xhat))
                        let sum_dxhat = dbeta[ci] * gam[ci];
                        let sum_dxhat_xhat = dgamma[ci] * gam[ci];
                        let k = inv_std[ci] / m;
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                let xhat = (xv[base + p] - mean[ci]) * inv_std[ci];
                                let dxhat = g[base + p] * gam[ci];
                                gd[base + p] = k * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    ctx.needs[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        );
        (var, stats)
    }

    /// Evaluation-mode batch norm using stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let scale: Vec<F> = (0..c)
            .map(|ci| self.value(gamma).data()[ci] / (running_var[ci] + eps).sqrt())
            .collect();
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let mut out = self.value(x).clone();
        {
            let bt = self.value(beta).data();
            for (nc, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let ci = nc % c;
                for v in chunk.iter_mut() {
                    *v = (*v - mean[ci]) * scale[ci] + bt[ci];
                }
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let xv = ctx.inputs[0].data();
                let g = ctx.grad.data();
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for (nc, chunk) in g.chunks(hw).enumerate() {
                    let ci = nc % c;
                    for (p, &gv) in chunk.iter().enumerate() {
                        let idx = nc * hw + p;
                        gx.data_mut()[idx] = gv * scale[ci];
                        dgamma[ci] += gv * (xv[idx] - mean[ci]) * inv_std[ci];
                        dbeta[ci] += gv;
                    }
                }
                vec![
                    ctx.needs[0].then_some(gx),
                    ctx.needs[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        )
    }

    // ------------------------------------------------------------------
    // losses

    /// Per-sample scaled softmax cross-entropy against soft targets.
    ///
    /// Returns `(1/N) Σ_n scale_n · [-(1/P) Σ_p Σ_c w_c y log softmax(z)]` where `P` is the
    /// number of pixels per sample.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        target: &Tensor<F>,
        sample_scale: &[F],
        class_weights: Option<&[F]>,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4();
        if target.shape() != self.value(logits).shape() {
            return Err(Error::Dimension(format!(
                "target {:?} vs logits {:?}",
                target.shape(),
                self.value(logits).shape()
            )));
        }
        if sample_scale.len() != n {
            return Err(Error::Dimension(format!(
                "{} sample scales for batch of {n}",
                sample_scale.len()
            )));
        }
        if let Some(cw) = class_weights {
            if cw.len() != c {
                return Err(Error::Dimension(format!("{} class weights for {c} classes", cw.len())));
            }
        }
        let hw = h * w;
        let cw: Vec<F> = class_weights.map(|c| c.to_vec()).unwrap_or_else(|| vec![F::one(); c]);
        let probs = softmax_channels(self.value(logits));
        let norm = F::one() / F::from_usize(n * hw).unwrap();
        let mut total = F::zero();
        {
            let z = self.value(logits).data();
            let y = target.data();
            for ni in 0..n {
                let mut s = F::zero();
                for p in 0..hw {
                    // log-softmax via max shift
                    let mut mx = F::neg_infinity();
                    for ci in 0..c {
                        mx = mx.max(z[(ni * c + ci) * hw + p]);
                    }
                    let mut lse = F::zero();
                    for ci in 0..c {
                        lse += (z[(ni * c + ci) * hw + p] - mx).exp();
                    }
                    let lse = lse.ln() + mx;
                    for ci in 0..c {
                        let idx = (ni * c + ci) * hw + p;
                        if y[idx] != F::zero() {
                            s -= cw[ci] * y[idx] * (z[idx] - lse);
                        }
                    }
                }
                total += sample_scale[ni] * s;
            }
        }
        let target = target.clone();
        let scale = sample_scale.to_vec();
        Ok(self.push(
            Tensor::scalar(total * norm),
            vec![logits],
            Box::new(move |ctx| {
                let g = ctx.grad.item() * norm;
                let y = target.data();
                let pr = probs.data();
                let mut gz = Tensor::zeros(&[n, c, h, w]);
                let gd = gz.data_mut();
                for ni in 0..n {
                    let k = g * scale[ni];
                    for p in 0..hw {
                        let mut wy = F::zero();
                        for ci in 0..c {
                            wy += cw[ci] * y[(ni * c + ci) * hw + p];
                        }
                        for ci in 0..c {
                            let idx = (ni * c + ci) * hw + p;
                            gd[idx] = k * (pr[idx] * wy - cw[ci] * y[idx]);
                        }
                    }
                }
                vec![Some(gz)]
            }),
        ))
    }

    /// `Σ_i v_i · loss_i` where `v = softmax(raw)` (`bounded = false`) or
    /// `v = softmax(raw)/2 + 1/(2K)` (`bounded = true`), `K = raw.len()`.
    pub fn eta_weighted_sum(&mut self, raw: Var, losses: &[Var], bounded: bool) -> Result<Var> {
        let k = self.value(raw).len();
        if k != losses.len() {
            return Err(Error::Dimension(format!(
                "{} weight logits for {} block losses",
                k,
                losses.len()
            )));
        }
        let eta = softmax_vec(self.value(raw).data());
        let weights = if bounded { bound_eta(&eta) } else { eta.clone() };
        let mut total = F::zero();
        for (wv, l) in weights.iter().zip(losses) {
            total += *wv * self.value(*l).item();
        }
        let mut parents = vec![raw];
        parents.extend_from_slice(losses);
        let slope = if bounded { F::lit(0.5) } else { F::one() };
        Ok(self.push(
            Tensor::scalar(total),
            parents,
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let ls: Vec<F> = ctx.inputs[1..].iter().map(|t| t.item()).collect();
                let mean: F = eta.iter().zip(&ls).map(|(&e, &l)| e * l).sum();
                let graw: Vec<F> =
                    eta.iter().zip(&ls).map(|(&e, &l)| g * slope * e * (l - mean)).collect();
                let mut out = vec![Some(Tensor::from_vec(&[k], graw).unwrap())];
                out.extend(weights.iter().map(|&wv| Some(Tensor::scalar(g * wv))));
                out
            }),
        ))
    }
}

#[inline]
pub fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn softmax_vec<F: Real>(raw: &[F]) -> Vec<F> {
    let mx = raw.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<F> = raw.iter().map(|&v| (v - mx).exp()).collect();
    let s: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `η/2 + 1/(2K)` applied elementwise.
pub fn bound_eta<F: Real>(eta: &[F]) -> Vec<F> {
    let floor = F::one() / (F::lit(2.0) * F::from_usize(eta.len()).unwrap());
    eta.iter().map(|&e| e / F::lit(2.0) + floor).collect()
}

/// Per-pixel softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = logits.dims4();
    let hw = h * w;
    let z = logits.data();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    for ni in 0..n {
        for p in 0..hw {
            let mut mx = F::neg_infinity();
            for ci in 0..c {
                mx = mx.max(z[(ni * c + ci) * hw + p]);
            }
            let mut s = F::zero();
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + p;
                let e = (z[idx] - mx).exp();
                od[idx] = e;
                s += e;
            }
            for ci in 0..c {
                od[(ni * c + ci) * hw + p] /= s;
            }
        }
    }
    out
}

/// For each output index: (lower source index, upper source index, upper weight).
fn interp_table<F: Real>(in_len: usize, out_len: usize) -> Vec<(usize, usize, F)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, F::lit(src - i0 as f64))
        })
        .collect()
}

/// Bilinear resize of an NCHW tensor (half-pixel centres, edge clamped).
pub fn resize_bilinear<F: Real>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ys = interp_table::<F>(h, out_h);
    let xs = interp_table::<F>(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let od = out.data_mut();
    let xv = x.data();
    let one = F::one();
    for nc in 0..n * c {
        let src = &xv[nc * h * w..][..h * w];
        let dst = &mut od[nc * out_h * out_w..][..out_h * out_w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (one - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (one - lx) + src[y1 * w + x1] * lx;
                dst[oy * out_w + ox] = top * (one - ly) + bot * ly;
            }
        }
    }
    out
}

fn channel_sums<F: Real>(t: &Tensor<F>, c: usize) -> Tensor<F> {
    let (_, _, h, w) = t.dims4();
    let mut sums = vec![F::zero(); c];
    for (nc, chunk) in t.data().chunks(h * w).enumerate() {
        sums[nc % c] += chunk.iter().copied().sum::<F>();
    }
    Tensor::from_vec(&[c], sums).unwrap()
}

/// Unfolds one `[C,H,W]` sample into `[C·k·k, H·W]` columns with zero padding `k/2`.
fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, k: usize, cols: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let dst = &mut row[y * w..][..w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    dst[..x_lo].iter_mut().for_each(|v| *v = F::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    dst[x_hi..].iter_mut().for_each(|v| *v = F::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; overwrites `x`.
fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, k: usize, x: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    x.iter_mut().for_each(|v| *v = F::zero());
    for ci in 0..c {
        let plane = &mut x[ci * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, &v) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}
