//! Dense row-major tensors and the raw kernels the autodiff ops are built on.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Immutable, cheaply clonable n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "{} elements cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Panicking constructor for internal kernels whose sizes are correct by construction.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self::raw(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Shape as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination with numpy-style broadcasting.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let out_shape = broadcast_shapes(&self.shape, &other.shape)?;
        Ok(binary_broadcast(self, other, &out_shape, f))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).unwrap())
                .collect(),
        )
    }

    /// One item of the leading (batch) axis, keeping a batch axis of 1.
    pub fn batch_item(&self, index: usize) -> Self {
        narrow(self, 0, index, 1)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        concat(parts, axis)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (left padded), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 && out[i + offset] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Collapses adjacent axes that are contiguous for every operand.
fn collapse(shape: &[usize], strides: &[Vec<usize>]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut dims: Vec<usize> = Vec::new();
    let mut st: Vec<Vec<usize>> = vec![Vec::new(); strides.len()];
    for axis in 0..shape.len() {
        if shape[axis] == 1 {
            continue;
        }
        if let Some(&last) = dims.last() {
            let mergeable = strides
                .iter()
                .zip(&st)
                .all(|(s, acc)| acc.last().copied() == Some(s[axis] * shape[axis]));
            if mergeable {
                let n = dims.len() - 1;
                dims[n] = last * shape[axis];
                for (k, s) in strides.iter().enumerate() {
                    st[k][n] = s[axis];
                }
                continue;
            }
        }
        dims.push(shape[axis]);
        for (k, s) in strides.iter().enumerate() {
            st[k].push(s[axis]);
        }
    }
    if dims.is_empty() {
        dims.push(1);
        for s in st.iter_mut() {
            s.push(0);
        }
    }
    (dims, st)
}

/// Visits every output position with the matching offsets of two operands.
///
/// `inner` receives `(out_offset, a_offset, a_stride, b_offset, b_stride, len)`
/// for each run along the innermost collapsed axis.
fn visit2(
    out_shape: &[usize],
    sa: Vec<usize>,
    sb: Vec<usize>,
    mut inner: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let contiguous = {
        let mut acc = 1;
        let mut s = vec![0; out_shape.len()];
        for i in (0..out_shape.len()).rev() {
            s[i] = acc;
            acc *= out_shape[i];
        }
        s
    };
    let strides = [contiguous, sa, sb];
    let (dims, st) = collapse(out_shape, &strides);
    let rank = dims.len();
    let last = rank - 1;
    let len = dims[last];
    let outer: usize = dims[..last].iter().product();
    let mut counter = vec![0usize; rank];
    let (mut o, mut a, mut b) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        inner(o, a, st[1][last], b, st[2][last], len);
        // advance the multi-index over the outer axes
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            counter[axis] += 1;
            o += st[0][axis];
            a += st[1][axis];
            b += st[2][axis];
            if counter[axis] < dims[axis] {
                break;
            }
            o -= st[0][axis] * dims[axis];
            a -= st[1][axis] * dims[axis];
            b -= st[2][axis] * dims[axis];
            counter[axis] = 0;
        }
    }
}

pub(crate) fn binary_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let n = numel(out_shape);
    if a.shape == b.shape && a.shape == out_shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::raw(out_shape.to_vec(), data);
    }
    let mut out = vec![T::zero(); n];
    let sa = broadcast_strides(&a.shape, out_shape);
    let sb = broadcast_strides(&b.shape, out_shape);
    let (ad, bd) = (a.data(), b.data());
    visit2(out_shape, sa, sb, |o, ia, sa, ib, sb, len| {
        let dst = &mut out[o..o + len];
        match (sa, sb) {
            (1, 0) => {
                let y = bd[ib];
                for (d, &x) in dst.iter_mut().zip(&ad[ia..ia + len]) {
                    *d = f(x, y);
                }
            }
            (0, 1) => {
                let x = ad[ia];
                for (d, &y) in dst.iter_mut().zip(&bd[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&ad[ia..ia + len]).zip(&bd[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[ia + k * sa], bd[ib + k * sb]);
                }
            }
        }
    });
    Tensor::raw(out_shape.to_vec(), out)
}

/// Broadcasts `src` to `shape`.
pub fn broadcast_to<T: Scalar>(src: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if src.shape == shape {
        return src.clone();
    }
    let zero = Tensor::<T>::scalar(T::zero());
    binary_broadcast(src, &zero, shape, |x, _| x)
}

/// Sums `src` down to `shape` (the adjoint of [`broadcast_to`]).
pub fn sum_to<T: Scalar>(src: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if src.shape == shape {
        return src.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let s_src = broadcast_strides(&src.shape, &src.shape);
    let s_dst = broadcast_strides(shape, &src.shape);
    let sd = src.data();
    visit2(&src.shape, s_src, s_dst, |_, is, ss, id, sdst, len| {
        if sdst == 0 {
            let mut acc = T::zero();
            for k in 0..len {
                acc = acc + sd[is + k * ss];
            }
            out[id] = out[id] + acc;
        } else {
            for k in 0..len {
                out[id + k * sdst] = out[id + k * sdst] + sd[is + k * ss];
            }
        }
    });
    Tensor::raw(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Matrix products

/// Batched `op(a) @ op(b)` where `op` optionally transposes the last two axes.
///
/// Leading (batch) axes must be equal, or one operand must be a plain matrix
/// that is shared across the other's batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (ab, am) = a.shape.split_at(a.rank() - 2);
    let (bb, bm) = b.shape.split_at(b.rank() - 2);
    let (m, ka) = if ta { (am[1], am[0]) } else { (am[0], am[1]) };
    let (kb, n) = if tb { (bm[1], bm[0]) } else { (bm[0], bm[1]) };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape,
            if ta { "^T" } else { "" },
            b.shape,
            if tb { "^T" } else { "" }
        )));
    }
    let batch: Vec<usize> = if ab.is_empty() {
        bb.to_vec()
    } else if bb.is_empty() || ab == bb {
        ab.to_vec()
    } else {
        return Err(Error::Shape(format!(
            "matmul batch axes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    };
    let nb = numel(&batch);
    let k = ka;
    let mut out = vec![T::zero(); nb * m * n];
    // row/col strides of a single matrix
    let (rsa, csa) = if ta { (1, am[1] as isize) } else { (am[1] as isize, 1) };
    let (rsb, csb) = if tb { (1, bm[1] as isize) } else { (bm[1] as isize, 1) };
    let a_step = if ab.is_empty() { 0 } else { am[0] * am[1] };
    let b_step = if bb.is_empty() { 0 } else { bm[0] * bm[1] };
    for i in 0..nb {
        if m == 0 || n == 0 {
            break;
        }
        let pa = a.data[i * a_step..].as_ptr();
        let pb = b.data[i * b_step..].as_ptr();
        let pc = out[i * m * n..].as_mut_ptr();
        // SAFETY: each matrix lies within its buffer; output slices are disjoint.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                pa,
                rsa,
                csa,
                pb,
                rsb,
                csb,
                T::zero(),
                pc,
                n as isize,
                1,
            );
        }
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Ok(Tensor::raw(shape, out))
}

// ---------------------------------------------------------------------------
// Convolution helpers

/// Geometry of a square-kernel 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// `[B, C, H, W] -> [B, C*k*k, Ho*Wo]` patch matrix with zero padding.
pub fn im2col<T: Scalar>(x: &Tensor<T>, win: Window) -> Tensor<T> {
    let [b, c, h, w] = x.dims4().expect("im2col input is 4-d");
    let (ho, wo) = (win.output_size(h), win.output_size(w));
    let kk = win.kernel * win.kernel;
    let l = ho * wo;
    let mut out = vec![T::zero(); b * c * kk * l];
    let xd = x.data();
    for bi in 0..b {
        for ci in 0..c {
            let src = &xd[(bi * c + ci) * h * w..][..h * w];
            for ky in 0..win.kernel {
                for kx in 0..win.kernel {
                    let row = (bi * c * kk) + ci * kk + ky * win.kernel + kx;
                    let dst = &mut out[row * l..][..l];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..][..w];
                        let drow = &mut dst[oy * wo..][..wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::raw(vec![b, c * kk, l], out)
}

/// Scatter-add adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &Tensor<T>, image_shape: [usize; 4], win: Window) -> Tensor<T> {
    let [b, c, h, w] = image_shape;
    let (ho, wo) = (win.output_size(h), win.output_size(w));
    let kk = win.kernel * win.kernel;
    let l = ho * wo;
    assert_eq!(cols.shape(), &[b, c * kk, l], "col2im geometry");
    let mut out = vec![T::zero(); b * c * h * w];
    let cd = cols.data();
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * h * w..][..h * w];
            for ky in 0..win.kernel {
                for kx in 0..win.kernel {
                    let row = (bi * c * kk) + ci * kk + ky * win.kernel + kx;
                    let src = &cd[row * l..][..l];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..][..w];
                        let srow = &src[oy * wo..][..wo];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] = drow[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::raw(image_shape.to_vec(), out)
}

/// Non-overlapping `factor x factor` block means.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "pooling factor {factor} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![T::zero(); b * c * ho * wo];
    let xd = x.data();
    let inv = T::one() / T::from_usize(factor * factor).unwrap();
    for plane in 0..b * c {
        let src = &xd[plane * h * w..][..h * w];
        let dst = &mut out[plane * ho * wo..][..ho * wo];
        for y in 0..h {
            let drow = &mut dst[(y / factor) * wo..][..wo];
            let srow = &src[y * w..][..w];
            for (ox, d) in drow.iter_mut().enumerate() {
                let mut acc = T::zero();
                for &v in &srow[ox * factor..(ox + 1) * factor] {
                    acc = acc + v;
                }
                *d = *d + acc;
            }
        }
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    Ok(Tensor::raw(vec![b, c, ho, wo], out))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [b, c, h, w] = x.dims4().expect("upsample input is 4-d");
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); b * c * ho * wo];
    let xd = x.data();
    for plane in 0..b * c {
        let src = &xd[plane * h * w..][..h * w];
        let dst = &mut out[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / factor) * w..][..w];
            let drow = &mut dst[oy * wo..][..wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    Tensor::raw(vec![b, c, ho, wo], out)
}

// ---------------------------------------------------------------------------
// Slicing

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// `len` entries of `axis` starting at `start`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, dim, inner) = split_axis(&x.shape, axis);
    assert!(start + len <= dim, "narrow {start}+{len} beyond axis of {dim}");
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data[(o * dim + start) * inner..][..len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Tensor::raw(shape, out)
}

/// Zero tensor with `x` written at `start` along `axis` (adjoint of [`narrow`]).
pub fn embed<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, total: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    assert!(start + len <= total);
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        out[(o * total + start) * inner..][..len * inner]
            .copy_from_slice(&x.data[o * len * inner..][..len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = total;
    Tensor::raw(shape, out)
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::Shape(format!(
                "cannot concat {:?} with {:?} on axis {axis}",
                first.shape, p.shape
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * len..][..len]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::raw(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_add_row_and_column() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[1, 3], &[10.0, 20.0, 30.0]);
        let c = a.zip_map(&b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        assert!(broadcast_shapes(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn sum_to_reduces_broadcast_axes() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let s = sum_to(&x, &[1, 3, 1]);
        for c in 0..3 {
            let mut want = 0.0;
            for b in 0..2 {
                for k in 0..4 {
                    want += x.at(&[b, c, k]);
                }
            }
            assert_eq!(s.at(&[0, c, 0]), want);
        }
        let total = sum_to(&x, &[]);
        assert_eq!(total.item(), (0..24).sum::<usize>() as f64);
    }

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin());
        let b = Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.3).cos());
        let c = matmul(&a, &b, false, false).unwrap();
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| a.at(&[bi, i, k]) * b.at(&[bi, k, j])).sum();
                    assert!((c.at(&[bi, i, j]) - want).abs() < 1e-12);
                }
            }
        }
        let bt = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.7).cos());
        let c2 = matmul(&a, &bt, false, true).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.at(&[1, i, k]) * bt.at(&[1, j, k])).sum();
                assert!((c2.at(&[1, i, j]) - want).abs() < 1e-12);
            }
        }
        let shared = Tensor::from_fn(&[4, 3], |i| i as f64);
        let c3 = matmul(&shared, &b, true, false).unwrap();
        assert_eq!(c3.shape(), &[2, 3, 5]);
        let want: f64 = (0..4).map(|k| shared.at(&[k, 2]) * b.at(&[1, k, 4])).sum();
        assert!((c3.at(&[1, 2, 4]) - want).abs() < 1e-12);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let win = Window { kernel: 3, stride: 2, padding: 1 };
        let x = Tensor::from_fn(&[2, 3, 5, 6], |i| ((i * 7919) % 13) as f64 - 6.0);
        let cols = im2col(&x, win);
        let y = Tensor::from_fn(cols.shape(), |i| ((i * 104729) % 17) as f64 - 8.0);
        let back = col2im(&y, [2, 3, 5, 6], win);
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_and_nearest_are_adjoint_up_to_scale() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let y = Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f64).sqrt());
        let lhs: f64 = avg_pool(&x, 2).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(upsample_nearest(&y, 2).data()).map(|(a, b)| a * b).sum();
        assert!((lhs * 4.0 - rhs).abs() < 1e-9);
    }

    #[test]
    fn narrow_embed_concat() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let n = narrow(&x, 1, 1, 2);
        assert_eq!(n.shape(), &[2, 2, 2]);
        assert_eq!(n.at(&[1, 0, 1]), x.at(&[1, 1, 1]));
        let e = embed(&n, 1, 1, 3);
        assert_eq!(e.at(&[1, 0, 1]), 0.0);
        assert_eq!(e.at(&[1, 2, 0]), x.at(&[1, 2, 0]));
        let head = narrow(&x, 1, 0, 1);
        let joined = concat(&[&head, &n], 1).unwrap();
        assert_eq!(joined, x);
    }
}
