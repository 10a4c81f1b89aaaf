//! Differentiable tensor operations used by the model.

use std::sync::Arc;

use super::float::{gemm, MatRef};
use super::tensor::BackwardFn;
use super::{Float, NumericsError, Result, Tensor};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn bw<T: Float>(
    f: impl Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
) -> BackwardFn<T> {
    Box::new(f)
}

/// Which softmax entries are visible, for attention score tensors laid out
/// as `[groups, rows, cols]`.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Every entry visible (explicit `-inf` inputs still map to zero).
    None,
    /// Entry `(i, j)` visible iff `j <= i + offset`.
    Causal { offset: usize },
    /// `valid[b * cols + j]` gates column `j` for every group `g` with
    /// `g / groups_per_row == b`.
    Keys { valid: Arc<Vec<bool>>, groups_per_row: usize },
}

impl AttnMask {
    #[inline]
    fn visible(&self, group: usize, row: usize, col: usize, cols: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal { offset } => col <= row + offset,
            AttnMask::Keys { valid, groups_per_row } => {
                valid[(group / groups_per_row) * cols + col]
            }
        }
    }
}

impl<T: Float> Tensor<T> {
    // ----- shape plumbing -------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(self.with_shape_shared(shape.to_vec(), "reshape"))
    }

    /// Axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::Dimension(format!(
                "permute {perm:?} invalid for shape {:?}",
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let mut inv = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            "permute",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| vec![Some(permute_data(g, &out_shape_c, &inv))]),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(NumericsError::Dimension(format!(
                "transpose needs rank 2, got {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(NumericsError::Dimension(format!("concat axis {axis} >= rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                data.extend_from_slice(&p.data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(
            data,
            shape,
            "concat",
            parts.to_vec(),
            bw(move |g: &[T], _: &[T]| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(chunks.len());
                for (i, &c) in chunks.iter().enumerate() {
                    if needs[i] {
                        let mut gi = Vec::with_capacity(outer * c);
                        for o in 0..outer {
                            let s = o * row + offset;
                            gi.extend_from_slice(&g[s..s + c]);
                        }
                        out.push(Some(gi));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }),
        ))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let rows = *self.shape().first().unwrap_or(&1);
        if self.rank() == 0 || len == 0 || start + len > rows {
            return Err(NumericsError::Range { what: "narrow rows", index: start + len, bound: rows });
        }
        let inner = self.numel() / rows;
        let data = self.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            "narrow",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| {
                let mut gi = vec![T::zero(); total];
                gi[start * inner..(start + len) * inner].copy_from_slice(g);
                vec![Some(gi)]
            }),
        ))
    }

    /// Selects rows along axis 0 (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let rows = *self.shape().first().unwrap_or(&1);
        if self.rank() == 0 || index.is_empty() {
            return Err(NumericsError::Contract("gather_rows on scalar or empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::Range { what: "gather row", index: bad, bound: rows });
        }
        let inner = self.numel() / rows;
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            data.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        let index = index.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            "gather_rows",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| {
                let mut gi = vec![T::zero(); total];
                for (k, &i) in index.iter().enumerate() {
                    for (a, &b) in gi[i * inner..(i + 1) * inner].iter_mut().zip(&g[k * inner..(k + 1) * inner]) {
                        *a += b;
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self.shape(), other.shape()));
        }
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add",
            vec![self.clone(), other.clone()],
            bw(move |g: &[T], _: &[T]| vec![na.then(|| g.to_vec()), nb.then(|| g.to_vec())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(shape_err("mul", self.shape(), other.shape()));
        }
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "mul",
            vec![self.clone(), other.clone()],
            bw(move |g: &[T], _: &[T]| {
                vec![
                    a.requires_grad().then(|| g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect()),
                    b.requires_grad().then(|| g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect()),
                ]
            }),
        ))
    }

    /// Adds `bias[n]` to every row of `self[..., n]`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Self> {
        let n = bias.numel();
        if bias.rank() != 1 || self.shape().last() != Some(&n) {
            return Err(shape_err("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let (nx, nb) = (self.requires_grad(), bias.requires_grad());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add_bias",
            vec![self.clone(), bias.clone()],
            bw(move |g: &[T], _: &[T]| {
                let gb = nb.then(|| {
                    let mut acc = vec![0f64; n];
                    for row in g.chunks_exact(n) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v.f64();
                        }
                    }
                    acc.into_iter().map(T::lit).collect()
                });
                vec![nx.then(|| g.to_vec()), gb]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        let s = T::lit(s);
        let data = self.data().iter().map(|&x| x * s).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "scale",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| vec![Some(g.iter().map(|&v| v * s).collect())]),
        ))
    }

    pub fn relu(&self) -> Result<Self> {
        let data = self.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "relu",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }),
        ))
    }

    /// Inverted dropout with an explicit keep mask: kept entries are scaled
    /// by `1 / (1 - p)`, dropped entries become zero.
    pub fn dropout(&self, keep: &[bool], p: f64) -> Result<Self> {
        if keep.len() != self.numel() {
            return Err(shape_err("dropout", self.shape(), &[keep.len()]));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        let s = T::lit(1.0 / (1.0 - p));
        let data = self
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x * s } else { T::zero() })
            .collect();
        let keep = keep.to_vec();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "dropout",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| {
                vec![Some(g.iter().zip(&keep).map(|(&g, &k)| if k { g * s } else { T::zero() }).collect())]
            }),
        ))
    }

    pub fn sum(&self) -> Result<Self> {
        let s: f64 = self.data().iter().map(|v| v.f64()).sum();
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![T::lit(s)],
            Vec::new(),
            "sum",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| vec![Some(vec![g[0]; n])]),
        ))
    }

    pub fn mean(&self) -> Result<Self> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    // ----- linear algebra -------------------------------------------------

    /// `self[..., k] x rhs[k, n] -> [..., n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.matmul_impl(rhs, false)
    }

    /// `self[..., k] x rhs[n, k]^T -> [..., n]`.
    pub fn matmul_t(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Tensor<T>, rhs_t: bool) -> Result<Self> {
        if self.rank() < 2 && !(self.rank() == 1 && rhs.rank() == 2) || rhs.rank() != 2 {
            return Err(shape_err("matmul", self.shape(), rhs.shape()));
        }
        let k = *self.shape().last().unwrap();
        let (rk, n) = if rhs_t {
            (rhs.shape()[1], rhs.shape()[0])
        } else {
            (rhs.shape()[0], rhs.shape()[1])
        };
        if rk != k {
            return Err(shape_err("matmul", self.shape(), rhs.shape()));
        }
        let m = self.numel() / k;
        let bm = if rhs_t { MatRef::rm_t(rhs.data(), k) } else { MatRef::rm(rhs.data(), n) };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), MatRef::rm(self.data(), k), bm, T::zero(), &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            "matmul",
            vec![self.clone(), rhs.clone()],
            bw(move |g: &[T], _: &[T]| {
                // dA = G B^T ; dB = A^T G (or G^T A when B is stored transposed)
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    let bt = if rhs_t { MatRef::rm(b.data(), k) } else { MatRef::rm_t(b.data(), n) };
                    gemm(m, n, k, T::one(), MatRef::rm(g, n), bt, T::zero(), &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    if rhs_t {
                        gemm(n, m, k, T::one(), MatRef::rm_t(g, n), MatRef::rm(a.data(), k), T::zero(), &mut gb);
                    } else {
                        gemm(k, m, n, T::one(), MatRef::rm_t(a.data(), k), MatRef::rm(g, n), T::zero(), &mut gb);
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `self[g, m, k] x rhs[g, k, n]`, or `rhs[g, n, k]`
    /// transposed when `rhs_t`.
    pub fn bmm(&self, rhs: &Tensor<T>, rhs_t: bool) -> Result<Self> {
        if self.rank() != 3 || rhs.rank() != 3 || self.shape()[0] != rhs.shape()[0] {
            return Err(shape_err("bmm", self.shape(), rhs.shape()));
        }
        let (groups, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (rk, n) = if rhs_t {
            (rhs.shape()[2], rhs.shape()[1])
        } else {
            (rhs.shape()[1], rhs.shape()[2])
        };
        if rk != k {
            return Err(shape_err("bmm", self.shape(), rhs.shape()));
        }
        let (sa, sb, sc) = (m * k, k * n, m * n);
        let mut out = vec![T::zero(); groups * sc];
        for gi in 0..groups {
            let bd = &rhs.data()[gi * sb..(gi + 1) * sb];
            let bm = if rhs_t { MatRef::rm_t(bd, k) } else { MatRef::rm(bd, n) };
            gemm(
                m,
                k,
                n,
                T::one(),
                MatRef::rm(&self.data()[gi * sa..(gi + 1) * sa], k),
                bm,
                T::zero(),
                &mut out[gi * sc..(gi + 1) * sc],
            );
        }
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            out,
            vec![groups, m, n],
            "bmm",
            vec![self.clone(), rhs.clone()],
            bw(move |g: &[T], _: &[T]| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); groups * sa];
                    for gi in 0..groups {
                        let bd = &b.data()[gi * sb..(gi + 1) * sb];
                        let bt = if rhs_t { MatRef::rm(bd, k) } else { MatRef::rm_t(bd, n) };
                        gemm(m, n, k, T::one(), MatRef::rm(&g[gi * sc..(gi + 1) * sc], n), bt, T::zero(), &mut ga[gi * sa..(gi + 1) * sa]);
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); groups * sb];
                    for gi in 0..groups {
                        let ad = &a.data()[gi * sa..(gi + 1) * sa];
                        let gd = &g[gi * sc..(gi + 1) * sc];
                        let dst = &mut gb[gi * sb..(gi + 1) * sb];
                        if rhs_t {
                            gemm(n, m, k, T::one(), MatRef::rm_t(gd, n), MatRef::rm(ad, k), T::zero(), dst);
                        } else {
                            gemm(k, m, n, T::one(), MatRef::rm_t(ad, k), MatRef::rm(gd, n), T::zero(), dst);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    // ----- normalizations and losses --------------------------------------

    /// Softmax over the last axis.
    ///
    /// Max-subtracted; `-inf` entries map to exactly zero and a row with no
    /// finite entry becomes all zeros.
    pub fn softmax(&self) -> Result<Self> {
        self.softmax_masked(&AttnMask::None)
    }

    /// Softmax over the last axis of `[groups, rows, cols]` scores with
    /// hidden entries treated as `-inf`.
    pub fn softmax_masked(&self, mask: &AttnMask) -> Result<Self> {
        let cols = *self
            .shape()
            .last()
            .ok_or_else(|| NumericsError::Dimension("softmax of a scalar".into()))?;
        let rows_per_group = match mask {
            AttnMask::None => 1,
            _ if self.rank() >= 2 => self.shape()[self.rank() - 2],
            _ => return Err(NumericsError::Dimension("masked softmax needs rank >= 2".into())),
        };
        if let AttnMask::Keys { valid, groups_per_row } = mask {
            let groups = self.numel() / cols / rows_per_group;
            if *groups_per_row == 0 || valid.len() != groups.div_ceil(*groups_per_row) * cols {
                return Err(shape_err("softmax_masked", self.shape(), &[valid.len()]));
            }
        }
        let mut out = vec![T::zero(); self.numel()];
        for (r, (row, dst)) in self.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let (gidx, i) = (r / rows_per_group, r % rows_per_group);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if mask.visible(gidx, i, j, cols) && v.f64() > mx {
                    mx = v.f64();
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0f64;
            for (j, (&v, o)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if mask.visible(gidx, i, j, cols) {
                    let e = (v.f64() - mx).exp();
                    s += e;
                    *o = T::lit(e);
                }
            }
            let inv = 1.0 / s;
            for o in dst.iter_mut() {
                *o = T::lit(o.f64() * inv);
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            bw(move |g: &[T], y: &[T]| {
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), dr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                    let dot = T::lit(dot);
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Self> {
        let n = *self.shape().last().unwrap_or(&0);
        if n == 0 || gamma.shape() != [n] || beta.shape() != [n] {
            return Err(shape_err("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / n;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![0f64; rows];
        for (r, (row, dst)) in self.data().chunks_exact(n).zip(xhat.chunks_exact_mut(n)).enumerate() {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = T::lit((v.f64() - mean) * is);
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out = xhat
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((&x, &g), &b)| x * g + b))
            .collect();
        let (gm, bt, nx) = (gamma.clone(), beta.clone(), self.requires_grad());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            bw(move |g: &[T], _: &[T]| {
                let gdat = gm.data();
                let mut dgamma = vec![0f64; n];
                let mut dbeta = vec![0f64; n];
                let mut gx = nx.then(|| vec![T::zero(); rows * n]);
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = 0f64;
                    let mut m2 = 0f64;
                    for j in 0..n {
                        let gv = gr[j].f64();
                        dgamma[j] += gv * xr[j].f64();
                        dbeta[j] += gv;
                        let dx = gv * gdat[j].f64();
                        m1 += dx;
                        m2 += dx * xr[j].f64();
                    }
                    if let Some(gx) = gx.as_mut() {
                        let (m1, m2) = (m1 / n as f64, m2 / n as f64);
                        for j in 0..n {
                            let dx = gr[j].f64() * gdat[j].f64();
                            gx[r * n + j] = T::lit(inv_std[r] * (dx - m1 - xr[j].f64() * m2));
                        }
                    }
                }
                vec![
                    gx,
                    gm.requires_grad().then(|| dgamma.into_iter().map(T::lit).collect()),
                    bt.requires_grad().then(|| dbeta.into_iter().map(T::lit).collect()),
                ]
            }),
        ))
    }

    /// Rows of `self[vocab, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(NumericsError::Dimension(format!(
                "embedding table must be rank 2, got {:?}",
                self.shape()
            )));
        }
        let vocab = self.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::Range { what: "token id", index: bad, bound: vocab });
        }
        let t = self.gather_rows(ids)?;
        Ok(t)
    }

    /// Sum over rows of `w_i * -log softmax(self[i])[targets[i]]` for
    /// `self[n, vocab]`. Rows with zero weight are skipped entirely.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f64]) -> Result<Self> {
        let v = *self.shape().last().unwrap_or(&0);
        let rows = if v == 0 { 0 } else { self.numel() / v };
        if rows != targets.len() || rows != weights.len() {
            return Err(shape_err("cross_entropy", self.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); self.numel()];
        let mut total = 0f64;
        for (r, row) in self.data().chunks_exact(v).enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(NumericsError::Range { what: "target id", index: t, bound: v });
            }
            let mx = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x.f64() - mx).exp()).sum();
            let lse = mx + s.ln();
            total += weights[r] * (lse - row[t].f64());
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = T::lit((x.f64() - lse).exp());
            }
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        Ok(Tensor::from_op(
            vec![T::lit(total)],
            Vec::new(),
            "cross_entropy",
            vec![self.clone()],
            bw(move |g: &[T], _: &[T]| {
                let g0 = g[0].f64();
                let mut gx = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    let s = g0 * w;
                    for (d, &p) in gx[r * v..(r + 1) * v].iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d = T::lit(s * p.f64());
                    }
                    gx[r * v + t] -= T::lit(s);
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Row-major permutation of `data` with `shape`; `perm[i]` is the source
/// axis of output axis `i`.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut src_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        src_strides[d] = src_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // Innermost axis is copied with a strided loop; outer axes via odometer.
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_s == 1 {
            out.extend_from_slice(&data[base..base + inner_n]);
        } else {
            out.extend((0..inner_n).map(|j| data[base + j * inner_s]));
        }
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
