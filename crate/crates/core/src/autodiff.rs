//! Reverse-mode differentiation over an explicit tape.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, so the record is already topologically sorted. [`Tape::backward`]
//! walks it once in reverse. Trainable parameters enter through
//! [`Tape::param`], which binds each [`Param`] to a single leaf so weights
//! shared across several uses accumulate into one gradient. A fresh tape is
//! built for every training step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound of the probability clamp used by the focal loss.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mask: Option<Vec<bool>>,
        train: bool,
    },
    MaxOverAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Scatter {
        src: Var,
        /// Output plane offset for each source row.
        targets: Vec<usize>,
        scale: f64,
    },
    BilinearSample {
        map: Var,
        /// Per batch item and output pixel: up to four (source pixel, weight) taps.
        taps: Vec<Vec<(usize, f64)>>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    GatherPixels {
        x: Var,
        /// Flat index into `x` for every output element.
        indices: Vec<usize>,
    },
    FocalLoss {
        pred: Var,
        target: Vec<f64>,
        alpha: f64,
        beta: f64,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Normalize by the statistics of the current batch.
    Batch,
    /// Normalize by stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch mean and unbiased variance, returned in batch mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records a leaf. Gradients are accumulated only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter to a trainable leaf, reusing the leaf on repeat calls.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), true);
        self.params.insert(p.id(), v);
        v
    }

    pub fn param_grad(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|&v| self.grad(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("same length");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.numel().max(1) as f64;
        let s = v.data().iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat: {s:?} incompatible with {first:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(&[a, b], 1)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) out of range on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(src).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(src);
        Ok(self.push(t, Op::Narrow { src, axis, start }, rg))
    }

    /// `x[M, in] @ w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = match self.shape(x) {
            &[m, k] => (m, k),
            s => return Err(Error::shape(format!("linear input must be 2-D, got {s:?}"))),
        };
        let n = match self.shape(w) {
            &[n, kk] if kk == k => n,
            s => {
                return Err(Error::shape(format!(
                    "linear weight {s:?} does not match input width {k}"
                )))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear bias must be [out]"));
            }
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new([m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[F,C,kh,kw]` (odd kernels).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (f, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d weight expects {wc} input channels, input has {c}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::shape("conv2d bias must be [F]"));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, padding)?;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * f * ncols];
        let xin = self.value(x).data();
        let wdata = self.value(w).data();
        for i in 0..n {
            let col = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
            im2col(&xin[i * c * h * wd..(i + 1) * c * h * wd], &geom, col);
            gemm(
                f,
                rows,
                ncols,
                wdata,
                false,
                col,
                false,
                &mut out[i * f * ncols..(i + 1) * f * ncols],
                false,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for i in 0..n {
                for (fi, &bv) in bias.iter().enumerate() {
                    let base = (i * f + fi) * ncols;
                    out[base..base + ncols].iter_mut().for_each(|o| *o += bv);
                }
            }
        }
        let t = Tensor::new([n, f, geom.oh, geom.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Batch normalization over every axis except axis 1 (channels).
    ///
    /// With a `mask` (one flag per `(n, spatial)` position) only flagged
    /// positions contribute to statistics; unflagged outputs are zero.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f64,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm needs at least [N, C]"));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm affine parameters must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if let Some(m) = mask {
            if m.len() != n * spatial {
                return Err(Error::shape("batch_norm mask length mismatch"));
            }
        }
        let on = |i: usize, s: usize| mask.is_none_or(|m| m[i * spatial + s]);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut count = vec![0usize; c];
        let train = matches!(stats, BnStats::Batch);
        match stats {
            BnStats::Batch => {
                for ch in 0..c {
                    let mut sum = 0.0;
                    let mut cnt = 0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for s in 0..spatial {
                            if on(i, s) {
                                sum += xv[base + s];
                                cnt += 1;
                            }
                        }
                    }
                    let m = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
                    let mut sq = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for s in 0..spatial {
                            if on(i, s) {
                                let d = xv[base + s] - m;
                                sq += d * d;
                            }
                        }
                    }
                    mean[ch] = m;
                    var[ch] = if cnt > 0 { sq / cnt as f64 } else { 0.0 };
                    count[ch] = cnt;
                }
            }
            BnStats::Running { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("running statistics length mismatch"));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for s in 0..spatial {
                    if on(i, s) {
                        let xh = (xv[base + s] - mean[ch]) * inv_std[ch];
                        xhat[base + s] = xh;
                        out[base + s] = g[ch] * xh + bt[ch];
                    }
                }
            }
        }
        let moments = train.then(|| BatchMoments {
            var: var
                .iter()
                .zip(&count)
                .map(|(v, &k)| if k > 1 { v * k as f64 / (k - 1) as f64 } else { *v })
                .collect(),
            mean: mean.clone(),
        });
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mask: mask.map(<[bool]>::to_vec),
                train,
            },
            rg,
        );
        Ok((v, moments))
    }

    /// Masked max over axis 1 of `x[P, N, C]`: row `p` considers only its
    /// first `counts[p]` entries. Empty rows produce zeros.
    pub fn max_over_axis(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let (p, n, c) = match self.shape(x) {
            &[p, n, c] => (p, n, c),
            s => return Err(Error::shape(format!("max_over_axis expects 3-D, got {s:?}"))),
        };
        if counts.len() != p || counts.iter().any(|&k| k > n) {
            return Err(Error::shape("max_over_axis counts do not match input"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; p * c];
        let mut argmax = vec![usize::MAX; p * c];
        for pi in 0..p {
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                for ni in 0..counts[pi] {
                    let idx = (pi * n + ni) * c + ci;
                    if xv[idx] > best {
                        best = xv[idx];
                        argmax[pi * c + ci] = idx;
                    }
                }
                if counts[pi] > 0 {
                    out[pi * c + ci] = best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([p, c], out)?, Op::MaxOverAxis { x, argmax }, rg))
    }

    /// Writes rows of `features[P, C]` into a zero `[1, C, H, W]` grid at
    /// `coords` (`(x, y)` cell indices). Coordinates must be unique.
    pub fn scatter_to_grid(
        &mut self,
        features: Var,
        coords: &[(usize, usize)],
        dims: (usize, usize),
    ) -> Result<Var> {
        let (w, h) = dims;
        let mut seen = vec![false; w * h];
        for &(x, y) in coords {
            if x >= w || y >= h {
                return Err(Error::Index(format!(
                    "scatter coord ({x}, {y}) outside {w}x{h} grid"
                )));
            }
            if std::mem::replace(&mut seen[y * w + x], true) {
                return Err(Error::Index(format!("duplicate scatter coord ({x}, {y})")));
            }
        }
        self.scatter_impl(features, coords, dims, 1.0)
    }

    /// Like [`Tape::scatter_to_grid`] but sums duplicate coordinates, scaling
    /// every contribution by `scale` (mean pooling when `scale = 1/k`).
    pub fn scatter_add_to_grid(
        &mut self,
        features: Var,
        coords: &[(usize, usize)],
        dims: (usize, usize),
        scale: f64,
    ) -> Result<Var> {
        let (w, h) = dims;
        if let Some(&(x, y)) = coords.iter().find(|&&(x, y)| x >= w || y >= h) {
            return Err(Error::Index(format!(
                "scatter coord ({x}, {y}) outside {w}x{h} grid"
            )));
        }
        self.scatter_impl(features, coords, dims, scale)
    }

    fn scatter_impl(
        &mut self,
        features: Var,
        coords: &[(usize, usize)],
        dims: (usize, usize),
        scale: f64,
    ) -> Result<Var> {
        let (w, h) = dims;
        let (p, c) = match self.shape(features) {
            &[p, c] => (p, c),
            s => return Err(Error::shape(format!("scatter expects [P, C], got {s:?}"))),
        };
        if coords.len() != p {
            return Err(Error::shape(format!(
                "scatter has {} coords for {p} rows",
                coords.len()
            )));
        }
        let targets: Vec<usize> = coords.iter().map(|&(x, y)| y * w + x).collect();
        let fv = self.value(features).data();
        let plane = w * h;
        let mut out = vec![0.0; c * plane];
        for (row, &t) in targets.iter().enumerate() {
            for ch in 0..c {
                out[ch * plane + t] += scale * fv[row * c + ch];
            }
        }
        let rg = self.rg(features);
        Ok(self.push(
            Tensor::new([1, c, h, w], out)?,
            Op::Scatter {
                src: features,
                targets,
                scale,
            },
            rg,
        ))
    }

    /// Samples `map[N, C, H, W]` at pixel coordinates `grid[N, Ho, Wo, 2]`
    /// holding `(x, y)` per output pixel. Taps outside the map read zero.
    /// Differentiable with respect to `map` only.
    pub fn bilinear_sample(&mut self, map: Var, grid: &Tensor) -> Result<Var> {
        let (n, c, h, w) = self.value(map).dims4()?;
        let (gn, oh, ow) = match grid.shape() {
            &[gn, oh, ow, 2] => (gn, oh, ow),
            s => {
                return Err(Error::shape(format!(
                    "sample grid must be [N, Ho, Wo, 2], got {s:?}"
                )))
            }
        };
        if gn != n {
            return Err(Error::shape("sample grid batch does not match map"));
        }
        let gd = grid.data();
        let mut taps = Vec::with_capacity(n * oh * ow);
        for i in 0..n * oh * ow {
            let (sx, sy) = (gd[2 * i], gd[2 * i + 1]);
            let mut t = Vec::with_capacity(4);
            if sx.is_finite() && sy.is_finite() {
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let wgt = wy * wx;
                        let (xi, yi) = (x0 + dx, y0 + dy);
                        if wgt != 0.0
                            && xi >= 0.0
                            && yi >= 0.0
                            && xi < w as f64
                            && yi < h as f64
                        {
                            t.push((yi as usize * w + xi as usize, wgt));
                        }
                    }
                }
            }
            taps.push(t);
        }
        let mv = self.value(map).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                let src = &mv[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let dst = &mut out[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
                for (pix, d) in dst.iter_mut().enumerate() {
                    *d = taps[b * oh * ow + pix]
                        .iter()
                        .map(|&(s, wgt)| wgt * src[s])
                        .sum();
                }
            }
        }
        let rg = self.rg(map);
        Ok(self.push(
            Tensor::new([n, c, oh, ow], out)?,
            Op::BilinearSample { map, taps },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(plane * oh + oy) * ow + ox] =
                        xv[(plane * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([n, c, oh, ow], out)?,
            Op::UpsampleNearest { x, factor },
            rg,
        ))
    }

    /// Gathers the channel vectors of `x[N, C, H, W]` at `(n, y, x)` pixels
    /// into an `[M, C]` tensor.
    pub fn gather_pixels(&mut self, x: Var, pixels: &[(usize, usize, usize)]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut indices = Vec::with_capacity(pixels.len() * c);
        for &(b, y, xx) in pixels {
            if b >= n || y >= h || xx >= w {
                return Err(Error::Index(format!(
                    "gather pixel ({b}, {y}, {xx}) outside [{n}, {c}, {h}, {w}]"
                )));
            }
            for ch in 0..c {
                indices.push(((b * c + ch) * h + y) * w + xx);
            }
        }
        let xv = self.value(x).data();
        let data = indices.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([pixels.len(), c], data)?,
            Op::GatherPixels { x, indices },
            rg,
        ))
    }

    /// Penalty-reduced pixelwise focal loss over a probability map.
    ///
    /// `-(1/norm) * sum( y == 1 ? (1-z)^a log z : (1-y)^b z^a log(1-z) )`
    /// with `z` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn focal_loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        alpha: f64,
        beta: f64,
        norm: f64,
    ) -> Result<Var> {
        check_same_shape(self.value(pred), target, "focal_loss")?;
        if !(norm > 0.0) {
            return Err(Error::Usage("focal normalizer must be positive".into()));
        }
        let mut total = 0.0;
        for (&z, &y) in self.value(pred).data().iter().zip(target.data()) {
            let z = z.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total += if y == 1.0 {
                (1.0 - z).powf(alpha) * z.ln()
            } else {
                (1.0 - y).powf(beta) * z.powf(alpha) * (1.0 - z).ln()
            };
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(-total / norm),
            Op::FocalLoss {
                pred,
                target: target.data().to_vec(),
                alpha,
                beta,
                norm,
            },
            rg,
        ))
    }

    /// Propagates gradients from the scalar `loss` to every trainable leaf.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        let acc = accumulate(&mut grads[v.0], numel(v));
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let acc = accumulate(&mut grads[v.0], numel(v));
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let acc = accumulate(&mut grads[a.0], av.len());
                    for k in 0..acc.len() {
                        acc[k] += g[k] * bv[k];
                    }
                }
                if wants(*b) {
                    let acc = accumulate(&mut grads[b.0], bv.len());
                    for k in 0..acc.len() {
                        acc[k] += g[k] * av[k];
                    }
                }
            }
            Op::Scale(a, s) => {
                let acc = accumulate(&mut grads[a.0], numel(*a));
                acc.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let acc = accumulate(&mut grads[a.0], numel(*a));
                acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                let acc = accumulate(&mut grads[a.0], av.len());
                for k in 0..acc.len() {
                    let s = if av[k] > 0.0 {
                        1.0
                    } else if av[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    acc[k] += s * g[k];
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let acc = accumulate(&mut grads[a.0], av.len());
                for k in 0..acc.len() {
                    if av[k] > 0.0 {
                        acc[k] += g[k];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let acc = accumulate(&mut grads[a.0], out.len());
                for k in 0..acc.len() {
                    acc[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }
            Op::Sum(a) => {
                let acc = accumulate(&mut grads[a.0], numel(*a));
                acc.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = numel(*a);
                let acc = accumulate(&mut grads[a.0], n);
                let d = g[0] / n.max(1) as f64;
                acc.iter_mut().for_each(|x| *x += d);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if wants(p) {
                        let acc = accumulate(&mut grads[p.0], numel(p));
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut acc[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { src, axis, start } => {
                let src_shape = self.shape(*src);
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let full = src_shape[*axis];
                let len = node.value.shape()[*axis];
                let acc = accumulate(&mut grads[src.0], numel(*src));
                for o in 0..outer {
                    let dst = &mut acc[(o * full + start) * inner..][..len * inner];
                    let s = &g[o * len * inner..][..len * inner];
                    dst.iter_mut().zip(s).for_each(|(x, y)| *x += y);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[0];
                if wants(*x) {
                    let acc = accumulate(&mut grads[x.0], m * k);
                    gemm(m, n, k, g, false, self.value(*w).data(), false, acc, true);
                }
                if wants(*w) {
                    let acc = accumulate(&mut grads[w.0], n * k);
                    gemm(n, m, k, g, true, self.value(*x).data(), false, acc, true);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let acc = accumulate(&mut grads[b.0], n);
                        for row in g.chunks(n) {
                            acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = self.shape(*x)[0];
                let f = self.shape(*w)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img = geom.c * geom.h * geom.w;
                if wants(*w) {
                    let acc = accumulate(&mut grads[w.0], f * rows);
                    for i in 0..n {
                        gemm(
                            f,
                            ncols,
                            rows,
                            &g[i * f * ncols..(i + 1) * f * ncols],
                            false,
                            &cols[i * rows * ncols..(i + 1) * rows * ncols],
                            true,
                            acc,
                            true,
                        );
                    }
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let acc = accumulate(&mut grads[b.0], f);
                        for i in 0..n {
                            for (fi, a) in acc.iter_mut().enumerate() {
                                *a += g[(i * f + fi) * ncols..(i * f + fi + 1) * ncols]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                    }
                }
                if wants(*x) {
                    let wdata = self.value(*w).data();
                    let mut dcols = vec![0.0; rows * ncols];
                    let acc = accumulate(&mut grads[x.0], n * img);
                    for i in 0..n {
                        gemm(
                            rows,
                            f,
                            ncols,
                            wdata,
                            true,
                            &g[i * f * ncols..(i + 1) * f * ncols],
                            false,
                            &mut dcols,
                            false,
                        );
                        col2im(&dcols, geom, &mut acc[i * img..(i + 1) * img]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mask,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let on = |i: usize, s: usize| mask.as_ref().is_none_or(|m| m[i * spatial + s]);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = if wants(*x) {
                    Some(vec![0.0; n * c * spatial])
                } else {
                    None
                };
                for ch in 0..c {
                    let (mut sum_dy, mut sum_dy_xhat, mut cnt) = (0.0, 0.0, 0usize);
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for s in 0..spatial {
                            if on(i, s) {
                                sum_dy += g[base + s];
                                sum_dy_xhat += g[base + s] * xhat[base + s];
                                cnt += 1;
                            }
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gm[ch] * inv_std[ch];
                        let m = cnt.max(1) as f64;
                        for i in 0..n {
                            let base = (i * c + ch) * spatial;
                            for s in 0..spatial {
                                if !on(i, s) {
                                    continue;
                                }
                                let k = base + s;
                                dx[k] = if *train {
                                    scale * (g[k] - sum_dy / m - xhat[k] * sum_dy_xhat / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    let acc = accumulate(&mut grads[x.0], dx.len());
                    acc.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
                }
                if wants(*gamma) {
                    let acc = accumulate(&mut grads[gamma.0], c);
                    acc.iter_mut().zip(&dgamma).for_each(|(a, d)| *a += d);
                }
                if wants(*beta) {
                    let acc = accumulate(&mut grads[beta.0], c);
                    acc.iter_mut().zip(&dbeta).for_each(|(a, d)| *a += d);
                }
            }
            Op::MaxOverAxis { x, argmax } => {
                let acc = accumulate(&mut grads[x.0], numel(*x));
                for (k, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        acc[src] += g[k];
                    }
                }
            }
            Op::Scatter {
                src,
                targets,
                scale,
            } => {
                let c = self.shape(*src)[1];
                let plane = node.value.shape()[2] * node.value.shape()[3];
                let acc = accumulate(&mut grads[src.0], numel(*src));
                for (row, &t) in targets.iter().enumerate() {
                    for ch in 0..c {
                        acc[row * c + ch] += scale * g[ch * plane + t];
                    }
                }
            }
            Op::BilinearSample { map, taps } => {
                let (n, c, h, w) = self.value(*map).dims4().expect("4-D");
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let acc = accumulate(&mut grads[map.0], n * c * h * w);
                for b in 0..n {
                    for ch in 0..c {
                        let dst = &mut acc[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        let gs = &g[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
                        for (pix, &gv) in gs.iter().enumerate() {
                            for &(s, wgt) in &taps[b * oh * ow + pix] {
                                dst[s] += wgt * gv;
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-D");
                let (oh, ow) = (h * factor, w * factor);
                let acc = accumulate(&mut grads[x.0], n * c * h * w);
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            acc[(plane * h + oy / factor) * w + ox / factor] +=
                                g[(plane * oh + oy) * ow + ox];
                        }
                    }
                }
            }
            Op::GatherPixels { x, indices } => {
                let acc = accumulate(&mut grads[x.0], numel(*x));
                for (k, &src) in indices.iter().enumerate() {
                    acc[src] += g[k];
                }
            }
            Op::FocalLoss {
                pred,
                target,
                alpha,
                beta,
                norm,
            } => {
                let zs = self.value(*pred).data();
                let acc = accumulate(&mut grads[pred.0], zs.len());
                for k in 0..zs.len() {
                    let z = zs[k];
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&z) {
                        continue;
                    }
                    let y = target[k];
                    let d = if y == 1.0 {
                        -alpha * (1.0 - z).powf(alpha - 1.0) * z.ln() + (1.0 - z).powf(*alpha) / z
                    } else {
                        (1.0 - y).powf(*beta)
                            * (alpha * z.powf(alpha - 1.0) * (1.0 - z).ln()
                                - z.powf(*alpha) / (1.0 - z))
                    };
                    acc[k] += -g[0] * d / norm;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn([2, 3], |i| i as f64), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_input() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn([4], |i| i as f64 - 1.5), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        let expect: Vec<f64> = t.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full([3], 2.0), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0; 3]);
        t.zero_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([2]), true);
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).item(), 0.5);
        let big = t.constant(Tensor::new([2], vec![-800.0, 800.0]).unwrap());
        let sb = t.sigmoid(big);
        assert!(t.value(sb).all_finite());
    }

    #[test]
    fn identity_kernel_conv_reproduces_input() {
        let mut t = Tape::new();
        let c = 3;
        let x = t.constant(Tensor::from_fn([2, c, 4, 5], |i| (i as f64 * 0.7).sin()));
        let w = t.constant(Tensor::from_fn([c, c, 1, 1], |i| {
            if i / c == i % c {
                1.0
            } else {
                0.0
            }
        }));
        let b = t.constant(Tensor::zeros([c]));
        let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn ones_kernel_counts_neighbors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(
            t.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_shape_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(t.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
        let even = t.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(matches!(t.conv2d(x, even, None, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn strided_conv_output_size() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 1, 9, 8]));
        let w = t.constant(Tensor::zeros([2, 1, 3, 3]));
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 5, 4]);
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([2, 3, 4, 4], |i| {
            (i as f64 * 1.3).sin() * 5.0 + i as f64 * 0.01
        }));
        let g = t.constant(Tensor::full([3], 1.0));
        let b = t.constant(Tensor::zeros([3]));
        let (y, m) = t.batch_norm(x, g, b, BnStats::Batch, 1e-5, None).unwrap();
        assert!(m.is_some());
        let v = t.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..16).map(move |s| (n, s)))
                .map(|(n, s)| v.data()[(n * 3 + ch) * 16 + s])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([1, 2, 3, 3], |i| i as f64 - 9.0));
        let g = t.constant(Tensor::full([2], 1.0));
        let b = t.constant(Tensor::zeros([2]));
        let eps = 1e-5;
        let (y, m) = t
            .batch_norm(
                x,
                g,
                b,
                BnStats::Running {
                    mean: &[0.0, 0.0],
                    var: &[1.0, 1.0],
                },
                eps,
                None,
            )
            .unwrap();
        assert!(m.is_none());
        let s = 1.0 / (1.0 + eps).sqrt();
        for (o, i) in t.value(y).data().iter().zip(t.value(x).data()) {
            assert_eq!(*o, i * s);
        }
    }

    #[test]
    fn batch_norm_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2, 3, 3]));
        let g = t.constant(Tensor::full([3], 1.0));
        let b = t.constant(Tensor::zeros([3]));
        assert!(matches!(
            t.batch_norm(x, g, b, BnStats::Batch, 1e-5, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn scatter_then_gather_recovers_rows() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::from_fn([3, 2], |i| i as f64 + 1.0));
        let coords = [(0, 0), (3, 1), (2, 4)];
        let grid = t.scatter_to_grid(f, &coords, (5, 6)).unwrap();
        assert_eq!(t.shape(grid), &[1, 2, 6, 5]);
        let px: Vec<_> = coords.iter().map(|&(x, y)| (0, y, x)).collect();
        let back = t.gather_pixels(grid, &px).unwrap();
        assert_eq!(t.value(back), t.value(f));
        let nonzero = t.value(grid).data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 6);
    }

    #[test]
    fn scatter_rejects_bad_coords() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::zeros([2, 1]));
        assert!(matches!(
            t.scatter_to_grid(f, &[(0, 0), (5, 0)], (5, 5)),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            t.scatter_to_grid(f, &[(1, 1), (1, 1)], (5, 5)),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn identity_grid_sampling_is_exact() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::from_fn([2, 3, 4, 5], |i| (i as f64 * 0.91).cos()));
        let grid = Tensor::from_fn([2, 4, 5, 2], |i| {
            let pix = (i / 2) % 20;
            if i % 2 == 0 {
                (pix % 5) as f64
            } else {
                (pix / 5) as f64
            }
        });
        let s = t.bilinear_sample(m, &grid).unwrap();
        assert_eq!(t.value(s), t.value(m));
    }

    #[test]
    fn bilinear_half_pixel_averages() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let grid = Tensor::new([1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let s = t.bilinear_sample(m, &grid).unwrap();
        assert_eq!(t.value(s).item(), 1.5);
        // Fully outside reads zero.
        let far = Tensor::new([1, 1, 1, 2], vec![-3.0, 7.0]).unwrap();
        let z = t.bilinear_sample(m, &far).unwrap();
        assert_eq!(t.value(z).item(), 0.0);
    }

    #[test]
    fn masked_max_ignores_padding() {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new([2, 3, 1], vec![1.0, -2.0, 9.0, -1.0, -3.0, 0.0]).unwrap(),
        );
        let m = t.max_over_axis(x, &[2, 0]).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_and_narrow_invert() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
        let b = t.constant(Tensor::from_fn([2, 1, 3], |i| 100.0 + i as f64));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 3]);
        let a2 = t.narrow(c, 1, 0, 2).unwrap();
        let b2 = t.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(t.value(a2), t.value(a));
        assert_eq!(t.value(b2), t.value(b));
    }

    #[test]
    fn focal_hand_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.5));
        let pos = t.focal_loss(z, &Tensor::scalar(1.0), 2.0, 4.0, 1.0).unwrap();
        assert!((t.value(pos).item() - 0.25 * 2f64.ln()).abs() < 1e-15);
        let neg = t.focal_loss(z, &Tensor::scalar(0.5), 2.0, 4.0, 1.0).unwrap();
        assert!((t.value(neg).item() - 0.0625 * 0.25 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn scaled_loss_scales_gradients_exactly() {
        let build = |t: &mut Tape, alpha: f64| {
            let x = t.leaf(Tensor::from_fn([5], |i| i as f64 * 0.3 - 0.6), true);
            let s = t.sigmoid(x);
            let sq = t.mul(s, s).unwrap();
            let l = t.sum(sq);
            let l = t.scale(l, alpha);
            t.backward(l).unwrap();
            t.grad(x).unwrap().clone()
        };
        let g1 = build(&mut Tape::new(), 1.0);
        let g4 = build(&mut Tape::new(), 4.0);
        for (a, b) in g1.data().iter().zip(g4.data()) {
            assert_eq!(4.0 * a, *b);
        }
    }
}
