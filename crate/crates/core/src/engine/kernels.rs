//! Raw forward/backward kernels on [`Tensor`] values.
//!
//! Nothing here records onto a graph; [`super::Graph`] wraps these with
//! bookkeeping. Shape checks live here so both paths share them.

use super::tensor::split_dims;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Strided matrix product `c (+)= a * b`.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each given as
/// (row stride, column stride). Panics if a stride pattern would reach
/// outside its slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = T::zero();
                }
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: out out of bounds");
    // SAFETY: the asserts above bound every index the kernel can touch.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::invalid(
                "conv2d",
                format!("expected rank-4 input and kernel, got {:?} and {:?}", x, k),
            ));
        }
        if x[1] != k[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (kh, kw) = (k[2], k[3]);
        if x[2] + 2 * pad < kh || x[3] + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("padded input {:?} (pad {}) smaller than kernel {:?}", x, pad, k),
            ));
        }
        Ok(Self {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: k[0],
            kh,
            kw,
            stride,
            pad,
            ho: (x[2] + 2 * pad - kh) / stride + 1,
            wo: (x[3] + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    pub fn flops(&self) -> u64 {
        2 * (self.n * self.cout * self.cin * self.kh * self.kw * self.ho * self.wo) as u64
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range along one axis for kernel tap `tap`.
    fn valid_range(&self, tap: usize, extent: usize, out: usize) -> (usize, usize) {
        // input coordinate = o * stride + tap - pad must lie in [0, extent)
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        let hi = if extent + self.pad > tap {
            ((extent + self.pad - tap - 1) / s + 1).min(out)
        } else {
            0
        };
        if hi > lo {
            (lo, hi)
        } else {
            (0, 0)
        }
    }

    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.ho * self.wo;
        cols.fill(T::zero());
        for ci in 0..self.cin {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let srow = &src[iy * self.w..(iy + 1) * self.w];
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if self.stride == 1 {
                            let ix0 = ox0 + kx - self.pad;
                            drow[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] = srow[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], gx: &mut [T]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.cin {
            let dst = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let drow = &mut dst[iy * self.w..(iy + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in ox0..ox1 {
                            drow[ox * self.stride + kx - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: kernel.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let plane = g.ho * g.wo;
    let rows = g.rows();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for n in 0..g.n {
        let xn = &x.data()[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            g.im2col(xn, &mut cols);
            &cols
        };
        let on = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(
            g.cout,
            rows,
            plane,
            kernel.data(),
            (rows, 1),
            src,
            (plane, 1),
            on,
            (plane, 1),
            bias.is_some(),
        );
    }
    Tensor::new(g.out_shape(), out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Conv2dGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    let plane = g.ho * g.wo;
    let rows = g.rows();
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); kernel.numel()];
    let mut gb = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); rows * plane];
    let mut gcols = vec![T::zero(); rows * plane];
    for n in 0..g.n {
        let xn = &x.data()[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let gon = &grad_out.data()[n * g.cout * plane..(n + 1) * g.cout * plane];
        for (co, chunk) in gon.chunks(plane).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            g.im2col(xn, &mut cols);
            &cols
        };
        // dK += dY * cols^T
        gemm(
            g.cout,
            plane,
            rows,
            gon,
            (plane, 1),
            src,
            (1, plane),
            &mut gw,
            (rows, 1),
            true,
        );
        let gxn = &mut gx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        if g.is_pointwise() {
            // dX += K^T * dY
            gemm(
                rows,
                g.cout,
                plane,
                kernel.data(),
                (1, rows),
                gon,
                (plane, 1),
                gxn,
                (plane, 1),
                true,
            );
        } else {
            gemm(
                rows,
                g.cout,
                plane,
                kernel.data(),
                (1, rows),
                gon,
                (plane, 1),
                &mut gcols,
                (plane, 1),
                false,
            );
            g.col2im(&gcols, gxn);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct MatmulGeometry {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    /// `b` is a single matrix shared across the batch.
    pub shared_rhs: bool,
}

impl MatmulGeometry {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, p) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &a[..a.len() - 2];
        let lead_b = &b[..b.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(mismatch());
        }
        Ok(Self {
            batch: lead_a.iter().product(),
            m,
            k,
            p,
            shared_rhs,
        })
    }

    pub fn flops(&self) -> u64 {
        2 * (self.batch * self.m * self.k * self.p) as u64
    }
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let g = MatmulGeometry::new(a.shape(), b.shape())?;
    let (m, k, p) = (g.m, g.k, g.p);
    let mut out = vec![T::zero(); g.batch * m * p];
    for i in 0..g.batch {
        let ab = &a.data()[i * m * k..(i + 1) * m * k];
        let bb = if g.shared_rhs {
            b.data()
        } else {
            &b.data()[i * k * p..(i + 1) * k * p]
        };
        gemm(
            m,
            k,
            p,
            ab,
            (k, 1),
            bb,
            (p, 1),
            &mut out[i * m * p..(i + 1) * m * p],
            (p, 1),
            false,
        );
    }
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(p);
    Tensor::new(shape, out)
}

pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = MatmulGeometry::new(a.shape(), b.shape())?;
    let (m, k, p) = (g.m, g.k, g.p);
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for i in 0..g.batch {
        let ab = &a.data()[i * m * k..(i + 1) * m * k];
        let go = &grad_out.data()[i * m * p..(i + 1) * m * p];
        let (bb, gbb) = if g.shared_rhs {
            (b.data(), &mut gb[..])
        } else {
            (
                &b.data()[i * k * p..(i + 1) * k * p],
                &mut gb[i * k * p..(i + 1) * k * p],
            )
        };
        // dA = dY * B^T ; dB += A^T * dY
        gemm(
            m,
            p,
            k,
            go,
            (p, 1),
            bb,
            (1, p),
            &mut ga[i * m * k..(i + 1) * m * k],
            (k, 1),
            false,
        );
        gemm(k, m, p, ab, (1, k), go, (p, 1), gbb, (p, 1), true);
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

/// `y = x * W^T + b` over the last axis of `x`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, din, dout) = linear_dims(x, weight, bias)?;
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = bias {
        for chunk in out.chunks_mut(dout) {
            chunk.copy_from_slice(b.data());
        }
    }
    gemm(
        rows,
        din,
        dout,
        x.data(),
        (din, 1),
        weight.data(),
        (1, din),
        &mut out,
        (dout, 1),
        bias.is_some(),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, din, dout) = linear_dims(x, weight, None)?;
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); dout];
    gemm(
        rows,
        dout,
        din,
        go,
        (dout, 1),
        weight.data(),
        (din, 1),
        &mut gx,
        (din, 1),
        false,
    );
    gemm(
        dout,
        rows,
        din,
        go,
        (1, dout),
        x.data(),
        (din, 1),
        &mut gw,
        (din, 1),
        false,
    );
    for chunk in go.chunks(dout) {
        for (acc, &v) in gb.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![dout], gb)?,
    ))
}

fn linear_dims<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    let mismatch = |rhs: &[usize]| Error::ShapeMismatch {
        op: "linear",
        lhs: x.shape().to_vec(),
        rhs: rhs.to_vec(),
    };
    if x.rank() == 0 || weight.rank() != 2 || *x.shape().last().unwrap() != weight.shape()[1] {
        return Err(mismatch(weight.shape()));
    }
    let (dout, din) = (weight.shape()[0], weight.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(mismatch(b.shape()));
        }
    }
    Ok((x.numel() / din.max(1), din, dout))
}

/// Softmax over the trailing axis with max subtraction.
pub fn softmax_last<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let t = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("softmax_last", "rank-0 input"))?;
    if t == 0 {
        return Err(Error::invalid("softmax_last", "empty trailing axis"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(t) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of softmax given its output `y`: `y * (g - sum(g * y))` per row.
pub fn softmax_last_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let t = *y.shape().last().unwrap();
    let mut gx = vec![T::zero(); y.numel()];
    for ((yr, gr), out) in y.data().chunks(t).zip(grad_out.data().chunks(t)).zip(gx.chunks_mut(t)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("shape preserved")
}

/// Same-rank broadcast: every axis must agree or be 1 on one side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && out[ax] != 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}

/// Visits every output index of a broadcast, passing (out, a, b) offsets.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..numel {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn sum_to_shape<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let st = broadcast_strides(shape, g.shape());
    let zeros = vec![0; shape.len()];
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), &st, &zeros, |o, it, _| out[it] += gd[o]);
    Tensor::new(shape.to_vec(), out).expect("target shape")
}

/// Elementwise product of `g` with the other operand, broadcast, then reduced.
pub fn broadcast_grad<T: Element>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    target: &[usize],
    f: impl Fn(T, T, T) -> T,
) -> Tensor<T> {
    let out = g.shape();
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let st = broadcast_strides(target, out);
    let numel: usize = out.iter().product();
    let mut acc = vec![T::zero(); target.iter().product()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob, mut ot) = (0usize, 0usize, 0usize);
    for &gv in &gd[..numel] {
        acc[ot] += f(gv, ad[oa], bd[ob]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            ot += st[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            ot -= st[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(target.to_vec(), acc).expect("target shape")
}

fn reduced_shape(shape: &[usize], axis: usize, keep: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keep {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    Ok(())
}

pub fn mean_axis<T: Element>(x: &Tensor<T>, axis: usize, keep: bool) -> Result<Tensor<T>> {
    check_axis("mean_axis", x.shape(), axis)?;
    let (outer, len, inner) = split_dims(x.shape(), axis);
    let scale = T::one() / T::from_f64(len as f64);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(reduced_shape(x.shape(), axis, keep), out)
}

pub fn mean_axis_backward<T: Element>(input_shape: &[usize], axis: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = split_dims(input_shape, axis);
    let scale = T::one() / T::from_f64(len as f64);
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let g = &grad_out.data()[o * inner..(o + 1) * inner];
        for l in 0..len {
            for (dst, &v) in gx[(o * len + l) * inner..(o * len + l + 1) * inner].iter_mut().zip(g) {
                *dst = v * scale;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("input shape")
}

/// Max along `axis`; also returns the arg-max position (first on ties).
pub fn max_axis<T: Element>(x: &Tensor<T>, axis: usize, keep: bool) -> Result<(Tensor<T>, Vec<usize>)> {
    check_axis("max_axis", x.shape(), axis)?;
    let (outer, len, inner) = split_dims(x.shape(), axis);
    if len == 0 {
        return Err(Error::invalid("max_axis", "empty axis"));
    }
    let mut out = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let v = x.data()[(o * len + l) * inner + i];
                if v > out[o * inner + i] {
                    out[o * inner + i] = v;
                    arg[o * inner + i] = l;
                }
            }
        }
    }
    Ok((Tensor::new(reduced_shape(x.shape(), axis, keep), out)?, arg))
}

pub fn max_axis_backward<T: Element>(
    input_shape: &[usize],
    axis: usize,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (outer, len, inner) = split_dims(input_shape, axis);
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for i in 0..inner {
            let l = argmax[o * inner + i];
            gx[(o * len + l) * inner + i] = grad_out.data()[o * inner + i];
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("input shape")
}

pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no parts"))?;
    check_axis("concat", first.shape(), axis)?;
    for p in &parts[1..] {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = split_dims(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis("narrow", x.shape(), axis)?;
    let (outer, full, inner) = split_dims(x.shape(), axis);
    if start + len > full {
        return Err(Error::invalid(
            "narrow",
            format!("range {}..{} exceeds extent {}", start, start + len, full),
        ));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

/// Scatters a narrowed gradient back into a zero tensor of `input_shape`.
pub fn narrow_backward<T: Element>(
    input_shape: &[usize],
    axis: usize,
    start: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (outer, full, inner) = split_dims(input_shape, axis);
    let len = grad_out.shape()[axis];
    let mut gx = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        gx[(o * full + start) * inner..(o * full + start + len) * inner]
            .copy_from_slice(&grad_out.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(input_shape.to_vec(), gx).expect("input shape")
}

fn check_rank4<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(
            op,
            format!("expected rank-4 input, got {:?}", x.shape()),
        )),
    }
}

/// `[N, C*s*s, H, W] -> [N, C, H*s, W*s]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, cs, h, w] = check_rank4("pixel_shuffle", x)?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channels {} not divisible by {}^2", cs, s),
        ));
    }
    let c = cs / (s * s);
    let mut out = vec![T::zero(); x.numel()];
    let (ho, wo) = (h * s, w * s);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let src_c = (b * cs + ch * s * s + i * s + j) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            out[((b * c + ch) * ho + y * s + i) * wo + xx * s + j] = x.data()[src_c + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Inverse of [`pixel_shuffle`]: `[N, C, H*s, W*s] -> [N, C*s*s, H, W]`.
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = check_rank4("pixel_unshuffle", x)?;
    if s == 0 || ho % s != 0 || wo % s != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial extents {}x{} not divisible by {}", ho, wo, s),
        ));
    }
    let (h, w, cs) = (ho / s, wo / s, c * s * s);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let dst_c = (b * cs + ch * s * s + i * s + j) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            out[dst_c + y * w + xx] = x.data()[((b * c + ch) * ho + y * s + i) * wo + xx * s + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cs, h, w], out)
}

/// Nearest-neighbour upsampling of the last two axes by an integer factor.
pub fn upsample_nearest<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
    }
    let r = x.rank();
    if r < 2 {
        return Err(Error::invalid("upsample_nearest", "rank must be >= 2"));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.numel() / (h * w).max(1);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            let row = &src[(y / factor) * w..(y / factor + 1) * w];
            for xx in 0..wo {
                out.push(row[xx / factor]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

pub fn upsample_nearest_backward<T: Element>(input_shape: &[usize], factor: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let (ho, wo) = (h * factor, w * factor);
    let planes = grad_out.numel() / (ho * wo).max(1);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / factor) * w + xx / factor] += g[y * wo + xx];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("input shape")
}

/// 2x2 mean pooling over the last two axes; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::invalid("avg_pool2", "rank must be >= 2"));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::invalid(
            "avg_pool2",
            format!("spatial extent {}x{} too small", h, w),
        ));
    }
    let planes = x.numel() / (h * w);
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let s = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                out.push((s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

pub fn avg_pool2_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let (ho, wo) = (h / 2, w / 2);
    let planes = input_shape.iter().product::<usize>() / (h * w);
    let quarter = T::from_f64(0.25);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = g[y * wo + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                d[i] = v;
                d[i + 1] = v;
                d[i + w] = v;
                d[i + w + 1] = v;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("input shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_box_sum() {
        let x = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let y = conv2d(&x, &k, Some(&Tensor::zeros(vec![1])), 1, 1).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(&[0, 0, r, c]), 4.0);
        }
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn(vec![2, 1, 4, 5], |i| (i[0] * 31 + i[2] * 7 + i[3]) as f64 * 0.1);
        let k = Tensor::<f64>::ones(vec![1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(vec![3, 3, 3, 3]);
        let err = conv2d(&x, &k, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_stride2_shape() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 16, 12]);
        let k = Tensor::<f32>::zeros(vec![5, 3, 3, 3]);
        assert_eq!(conv2d(&x, &k, None, 2, 1).unwrap().shape(), &[1, 5, 8, 6]);
        let k1 = Tensor::<f32>::zeros(vec![5, 3, 1, 1]);
        assert_eq!(conv2d(&x, &k1, None, 2, 0).unwrap().shape(), &[1, 5, 8, 6]);
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        assert!(matmul(&a, &t(&[3, 1], &[0.0; 3])).is_err());
    }

    #[test]
    fn softmax_values() {
        let y = softmax_last(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
        let u = softmax_last(&t(&[4], &[0.0; 4])).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[1, 3], &[10.0, 20.0, 30.0]);
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        assert_eq!(sum_to_shape(&c, &[2, 1]).data(), &[63.0, 66.0]);
    }

    #[test]
    fn mean_rows() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean_axis(&x, 0, false).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(mean_axis(&x, 1, true).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn pixel_shuffle_index_map() {
        let x = t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        assert!(pixel_shuffle(&t(&[1, 3, 1, 1], &[0.0; 3]), 2).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(avg_pool2(&y).unwrap(), x);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = Tensor::<f64>::from_fn(vec![2, 3, 2], |i| (i[0] * 6 + i[1] * 2 + i[2]) as f64);
        let b = Tensor::<f64>::from_fn(vec![2, 1, 2], |i| -((i[0] * 2 + i[2]) as f64));
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        assert_eq!(narrow(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(narrow(&c, 1, 3, 1).unwrap(), b);
        assert!(concat(&[&a, &Tensor::zeros(vec![3, 1, 2])], 1).is_err());
    }
}
