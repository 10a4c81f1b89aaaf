//! Image-shaped operations on `[N, C, H, W]` tensors.

use std::sync::Mutex;

use super::float::{gemm, MatRef};
use super::{Float, NumericsError, Result, Tensor};

/// Convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0 }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn direct(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(x: &[T], g: &Geom, cols: &mut [T]) {
    let hw = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let hw = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dx[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            drow[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Tensor<T> {
    /// Cross-correlation of `self[N, C, H, W]` (or `[C, H, W]`) with
    /// `weight[O, C, kh, kw]` and an optional `bias[O]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Self> {
        let squeeze = self.rank() == 3;
        let x = if squeeze {
            let mut s = vec![1];
            s.extend_from_slice(self.shape());
            self.reshape(&s)?
        } else {
            self.clone()
        };
        let out = x.conv2d_batched(weight, bias, spec)?;
        if squeeze {
            out.reshape(&out.shape()[1..])
        } else {
            Ok(out)
        }
    }

    fn conv2d_batched(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Self> {
        let mismatch = || NumericsError::Shape {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        if self.rank() != 4 || weight.rank() != 4 || weight.shape()[1] != self.shape()[1] {
            return Err(mismatch());
        }
        if spec.stride == 0 {
            return Err(NumericsError::Contract("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(mismatch());
            }
        }
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh > ph || kw > pw {
            return Err(NumericsError::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw} (input {:?}, weight {:?})",
                self.shape(),
                weight.shape()
            )));
        }
        let g = Geom {
            c,
            h,
            w,
            kh,
            kw,
            oh: (ph - kh) / spec.stride + 1,
            ow: (pw - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let (hw, ckk, chw) = (g.oh * g.ow, c * kh * kw, c * h * w);
        let mut out = vec![T::zero(); n * o * hw];
        let mut cols = if g.direct() { Vec::new() } else { vec![T::zero(); ckk * hw] };
        for i in 0..n {
            let xi = &self.data()[i * chw..(i + 1) * chw];
            let src: &[T] = if g.direct() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            let dst = &mut out[i * o * hw..(i + 1) * o * hw];
            gemm(o, ckk, hw, T::one(), MatRef::rm(weight.data(), ckk), MatRef::rm(src, hw), T::zero(), dst);
            if let Some(b) = bias {
                for (oc, row) in dst.chunks_exact_mut(hw).enumerate() {
                    let bv = b.data()[oc];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, wt, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        let bias_grad = bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(Tensor::from_op(
            out,
            vec![n, o, g.oh, g.ow],
            "conv2d",
            parents,
            Box::new(move |gr: &[T], _: &[T]| {
                let mut gx = x.requires_grad().then(|| vec![T::zero(); n * chw]);
                let mut gw = wt.requires_grad().then(|| vec![T::zero(); o * ckk]);
                let mut cols = if g.direct() { Vec::new() } else { vec![T::zero(); ckk * hw] };
                let mut dcols = if g.direct() { Vec::new() } else { vec![T::zero(); ckk * hw] };
                for i in 0..n {
                    let gy = &gr[i * o * hw..(i + 1) * o * hw];
                    let xi = &x.data()[i * chw..(i + 1) * chw];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[T] = if g.direct() {
                            xi
                        } else {
                            im2col(xi, &g, &mut cols);
                            &cols
                        };
                        gemm(o, hw, ckk, T::one(), MatRef::rm(gy, hw), MatRef::rm_t(src, hw), T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[i * chw..(i + 1) * chw];
                        if g.direct() {
                            gemm(ckk, o, hw, T::one(), MatRef::rm_t(wt.data(), ckk), MatRef::rm(gy, hw), T::zero(), dst);
                        } else {
                            gemm(ckk, o, hw, T::one(), MatRef::rm_t(wt.data(), ckk), MatRef::rm(gy, hw), T::zero(), &mut dcols);
                            col2im(&dcols, &g, dst);
                        }
                    }
                }
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(bias_grad.then(|| {
                        let mut gb = vec![0f64; o];
                        for i in 0..n {
                            for (oc, row) in gr[i * o * hw..(i + 1) * o * hw].chunks_exact(hw).enumerate() {
                                gb[oc] += row.iter().map(|v| v.f64()).sum::<f64>();
                            }
                        }
                        gb.into_iter().map(T::lit).collect()
                    }));
                }
                res
            }),
        ))
    }

    /// 2x2 average pooling with stride 2. Odd extents keep a partial last
    /// window averaged over its in-bounds elements, so the output is
    /// `ceil(H/2) x ceil(W/2)`.
    pub fn avg_pool2d(&self) -> Result<Self> {
        if self.rank() != 4 {
            return Err(NumericsError::Dimension(format!(
                "avg_pool2d needs [N,C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let planes = n * c;
        let mut out = vec![T::zero(); planes * oh * ow];
        let count = move |oi: usize, oj: usize| ((h - 2 * oi).min(2) * (w - 2 * oj).min(2)) as f64;
        for p in 0..planes {
            let src = &self.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / 2) * ow + j / 2] += src[i * w + j];
                }
            }
            for oi in 0..oh {
                for oj in 0..ow {
                    dst[oi * ow + oj] /= T::lit(count(oi, oj));
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            "avg_pool2d",
            vec![self.clone()],
            Box::new(move |g: &[T], _: &[T]| {
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let (oi, oj) = (i / 2, j / 2);
                            dst[i * w + j] = gs[oi * ow + oj] / T::lit(count(oi, oj));
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Batch normalization over the channel axis of `[N, C, H, W]`.
    ///
    /// In training mode the batch statistics are used and `running` is
    /// updated as `running = momentum * running + (1 - momentum) * batch`
    /// (unbiased variance); in eval mode `running` is used as is.
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: &Mutex<RunningStats>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        if self.rank() != 4 {
            return Err(NumericsError::Dimension(format!(
                "batch_norm2d needs [N,C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(NumericsError::Shape {
                op: "batch_norm2d",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let x = self.data();
        let (mean, inv_std) = {
            let mut stats = running.lock().expect("running stats lock");
            if stats.mean.len() != c {
                return Err(NumericsError::Dimension(format!(
                    "running stats for {} channels, input has {c}",
                    stats.mean.len()
                )));
            }
            if train {
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for ch in 0..c {
                    let mut s = 0f64;
                    for i in 0..n {
                        s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0f64;
                    for i in 0..n {
                        q += x[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v.f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                    let unbiased = if count > 1.0 { q / (count - 1.0) } else { var[ch] };
                    stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * m;
                    stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * unbiased;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv)
            } else {
                (stats.mean.clone(), stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect())
            }
        };
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (gv, bv) = (gamma.data()[ch], beta.data()[ch]);
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                    *xh = T::lit((v.f64() - m) * is);
                    *o = *xh * gv + bv;
                }
            }
        }
        let (gm, bt, nx) = (gamma.clone(), beta.clone(), self.requires_grad());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "batch_norm2d",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g: &[T], _: &[T]| {
                let mut dgamma = vec![0f64; c];
                let mut dbeta = vec![0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                        for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            dgamma[ch] += gv.f64() * xh.f64();
                            dbeta[ch] += gv.f64();
                        }
                    }
                }
                let gx = nx.then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let scale = gm.data()[ch].f64() * inv_std[ch];
                        let (m1, m2) = if train {
                            (dbeta[ch] / count, dgamma[ch] / count)
                        } else {
                            (0.0, 0.0)
                        };
                        for i in 0..n {
                            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                            for ((d, &gv), &xh) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *d = T::lit(scale * (gv.f64() - m1 - xh.f64() * m2));
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    gm.requires_grad().then(|| dgamma.into_iter().map(T::lit).collect()),
                    bt.requires_grad().then(|| dbeta.into_iter().map(T::lit).collect()),
                ]
            }),
        ))
    }
}

/// Running mean and variance tracked by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}
