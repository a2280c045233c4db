//! Dense row-major tensors and the value-level kernels used by the graph ops.
//!
//! All 4-d tensors are NCHW. Data is shared behind an `Arc` so cloning a
//! tensor (and detaching a graph node) never copies the buffer.

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `C <- alpha * A B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(max_offset(m, k, rsa, csa) < a.len().max(1));
                debug_assert!(max_offset(k, n, rsb, csb) < b.len().max(1));
                debug_assert!(max_offset(m, n, rsc, csc) < c.len());
                // SAFETY: the asserted extents keep every strided access in bounds.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// Geometry of a square-kernel 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a convolution along one axis, or `None` if the
    /// kernel does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data.as_slice())?;
        }
        Ok(())
    }
}

// Bounded working-set for im2col buffers; conv batches are split into chunks
// whose column matrix stays below this many elements.
const COLS_BUDGET: usize = 1 << 24;

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape {shape:?}"
        );
        Self {
            data: Arc::new(data),
            shape: shape.to_vec(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            self.numel(),
            shape.iter().product::<usize>(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        Self {
            data: Arc::clone(&self.data),
            shape: shape.to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(self.data.iter().map(|&v| f(v)).collect(), &self.shape)
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self::from_vec(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            &self.shape,
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            &self.shape,
        )
    }

    fn split_axis(&self, axis: usize) -> (usize, usize, usize) {
        assert!(axis < self.shape.len(), "axis {axis} out of range for {:?}", self.shape);
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Sums over every axis except `axis`, producing a 1-d tensor.
    pub fn sum_keep_axis(&self, axis: usize) -> Self {
        let (outer, len, inner) = self.split_axis(axis);
        let mut out = vec![T::zero(); len];
        for o in 0..outer {
            for (a, acc) in out.iter_mut().enumerate() {
                let base = (o * len + a) * inner;
                *acc = self.data[base..base + inner]
                    .iter()
                    .fold(*acc, |s, &v| s + v);
            }
        }
        Self::from_vec(out, &[len])
    }

    /// Repeats a 1-d tensor along every axis of `shape` except `axis`.
    pub fn broadcast_axis(&self, axis: usize, shape: &[usize]) -> Self {
        assert_eq!(self.shape.len(), 1, "broadcast source must be 1-d");
        assert_eq!(shape[axis], self.shape[0], "broadcast length mismatch");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for _ in 0..outer {
            for &v in self.data.iter() {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        Self::from_vec(out, shape)
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let n = parts[0].shape[0];
        let rest = &parts[0].shape[2..];
        let inner: usize = rest.iter().product();
        for p in parts {
            assert_eq!(p.shape[0], n, "concat batch mismatch");
            assert_eq!(&p.shape[2..], rest, "concat spatial mismatch");
        }
        let channels: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let block = p.shape[1] * inner;
                out.extend_from_slice(&p.data[b * block..(b + 1) * block]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend_from_slice(rest);
        Self::from_vec(out, &shape)
    }

    /// Channels `[start, start + len)` along axis 1.
    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let n = self.shape[0];
        let c = self.shape[1];
        assert!(start + len <= c, "channel slice out of range");
        let inner: usize = self.shape[2..].iter().product();
        let mut out = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let base = (b * c + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Self::from_vec(out, &shape)
    }

    /// Places `self` at channel offset `start` inside a zero tensor with
    /// `total` channels. Adjoint of [`Tensor::slice_channels`].
    pub fn pad_channels(&self, start: usize, total: usize) -> Self {
        let n = self.shape[0];
        let len = self.shape[1];
        assert!(start + len <= total);
        let inner: usize = self.shape[2..].iter().product();
        let mut out = vec![T::zero(); n * total * inner];
        for b in 0..n {
            let dst = (b * total + start) * inner;
            out[dst..dst + len * inner]
                .copy_from_slice(&self.data[b * len * inner..(b + 1) * len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = total;
        Self::from_vec(out, &shape)
    }

    /// Selects rows (axis-0 slices) by index.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let row: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < self.shape[0], "row index {i} out of range");
            out.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::from_vec(out, &shape)
    }

    /// Adds row `k` of `self` into row `indices[k]` of a zero tensor with
    /// `rows` rows. Adjoint of [`Tensor::gather_rows`].
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Self {
        assert_eq!(indices.len(), self.shape[0]);
        let row: usize = self.shape[1..].iter().product();
        let mut out = vec![T::zero(); rows * row];
        for (k, &i) in indices.iter().enumerate() {
            let dst = &mut out[i * row..(i + 1) * row];
            for (d, &s) in dst.iter_mut().zip(&self.data[k * row..(k + 1) * row]) {
                *d = *d + s;
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Self::from_vec(out, &shape)
    }

    pub fn transpose2d(&self) -> Self {
        assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec(out, &[c, r])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(other.shape.len(), 2);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Self::from_vec(out, &[m, n])
    }

    /// Cross-correlation of `self` (`[N, Ci, H, W]`) with `weight`
    /// (`[Co, Ci, k, k]`).
    pub fn conv2d(&self, weight: &Self, geom: ConvGeometry) -> Self {
        let (n, ci, h, w) = dims4(&self.shape);
        let (co, wci, kh, kw) = dims4(&weight.shape);
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert!(kh == geom.kernel && kw == geom.kernel, "kernel size mismatch");
        let ho = geom.output_len(h).expect("conv kernel larger than input");
        let wo = geom.output_len(w).expect("conv kernel larger than input");
        let p = ho * wo;
        let k = ci * geom.kernel * geom.kernel;
        let mut out = vec![T::zero(); n * co * p];
        for (start, end) in chunks(n, k * p) {
            let cols = im2col(&self.data, (start, end), (ci, h, w), (ho, wo), geom);
            let l = (end - start) * p;
            let mut mat = vec![T::zero(); co * l];
            T::gemm(
                co,
                k,
                l,
                T::one(),
                &weight.data,
                k as isize,
                1,
                &cols,
                l as isize,
                1,
                T::zero(),
                &mut mat,
                l as isize,
                1,
            );
            for b in start..end {
                for c in 0..co {
                    let src = c * l + (b - start) * p;
                    let dst = (b * co + c) * p;
                    out[dst..dst + p].copy_from_slice(&mat[src..src + p]);
                }
            }
        }
        Self::from_vec(out, &[n, co, ho, wo])
    }

    /// Adjoint of [`Tensor::conv2d`] with respect to its input. `self` is
    /// `[N, Co, Ho, Wo]`, `weight` is `[Co, Ci, k, k]`, and the result is
    /// `[N, Ci, out_h, out_w]`.
    pub fn conv_transpose2d(&self, weight: &Self, geom: ConvGeometry, out_hw: (usize, usize)) -> Self {
        let (n, co, ho, wo) = dims4(&self.shape);
        let (wco, ci, _, _) = dims4(&weight.shape);
        assert_eq!(co, wco, "conv_transpose2d channel mismatch");
        let (h, w) = out_hw;
        assert_eq!(geom.output_len(h), Some(ho), "output height inconsistent");
        assert_eq!(geom.output_len(w), Some(wo), "output width inconsistent");
        let p = ho * wo;
        let k = ci * geom.kernel * geom.kernel;
        let mut out = vec![T::zero(); n * ci * h * w];
        for (start, end) in chunks(n, k * p) {
            let l = (end - start) * p;
            let rows = gather_channel_major(&self.data, (start, end), co, p);
            let mut cols = vec![T::zero(); k * l];
            // cols = W^T rows
            T::gemm(
                k,
                co,
                l,
                T::one(),
                &weight.data,
                1,
                k as isize,
                &rows,
                l as isize,
                1,
                T::zero(),
                &mut cols,
                l as isize,
                1,
            );
            col2im(&cols, &mut out, (start, end), (ci, h, w), (ho, wo), geom);
        }
        Self::from_vec(out, &[n, ci, h, w])
    }

    /// Gradient of `<conv2d(self, W), grad_out>` with respect to `W`.
    pub fn conv2d_weight_grad(&self, grad_out: &Self, geom: ConvGeometry) -> Self {
        let (n, ci, h, w) = dims4(&self.shape);
        let (gn, co, ho, wo) = dims4(&grad_out.shape);
        assert_eq!(n, gn, "weight-grad batch mismatch");
        assert_eq!(geom.output_len(h), Some(ho));
        assert_eq!(geom.output_len(w), Some(wo));
        let p = ho * wo;
        let k = ci * geom.kernel * geom.kernel;
        let mut out = vec![T::zero(); co * k];
        for (start, end) in chunks(n, k * p) {
            let l = (end - start) * p;
            let cols = im2col(&self.data, (start, end), (ci, h, w), (ho, wo), geom);
            let rows = gather_channel_major(&grad_out.data, (start, end), co, p);
            T::gemm(
                co,
                l,
                k,
                T::one(),
                &rows,
                l as isize,
                1,
                &cols,
                1,
                l as isize,
                T::one(),
                &mut out,
                k as isize,
                1,
            );
        }
        Self::from_vec(out, &[co, ci, geom.kernel, geom.kernel])
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a 4-d tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

fn chunks(n: usize, per_item: usize) -> Vec<(usize, usize)> {
    let step = (COLS_BUDGET / per_item.max(1)).clamp(1, n.max(1));
    (0..n).step_by(step).map(|s| (s, (s + step).min(n))).collect()
}

/// `[N, C, P]` rows `start..end` rearranged as a `[C, (end-start)*P]` matrix.
fn gather_channel_major<T: Scalar>(data: &[T], (start, end): (usize, usize), c: usize, p: usize) -> Vec<T> {
    let l = (end - start) * p;
    let mut rows = vec![T::zero(); c * l];
    for b in start..end {
        for ch in 0..c {
            let src = (b * c + ch) * p;
            let dst = ch * l + (b - start) * p;
            rows[dst..dst + p].copy_from_slice(&data[src..src + p]);
        }
    }
    rows
}

fn im2col<T: Scalar>(
    x: &[T],
    (start, end): (usize, usize),
    (c, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
    geom: ConvGeometry,
) -> Vec<T> {
    let k = geom.kernel;
    let p = ho * wo;
    let l = (end - start) * p;
    let mut cols = vec![T::zero(); c * k * k * l];
    for b in start..end {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst = &mut cols[row * l + (b - start) * p..row * l + (b - start + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kj) as isize - geom.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &[T],
    out: &mut [T],
    (start, end): (usize, usize),
    (c, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
    geom: ConvGeometry,
) {
    let k = geom.kernel;
    let p = ho * wo;
    let l = (end - start) * p;
    for b in start..end {
        for ch in 0..c {
            let plane = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src = &cols[row * l + (b - start) * p..row * l + (b - start + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &s) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * geom.stride + kj) as isize - geom.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                let d = &mut dst_row[ix as usize];
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}
