//! Dense row-major `f64` tensors and the convolution kernels the autodiff
//! graph is built on.
//!
//! Five-dimensional activations use the `[batch, channel, depth, height, width]`
//! layout. Convolutions are lowered to GEMM through an explicit column buffer
//! (`im2col`), and the transposed convolution reuses the same buffer through
//! its adjoint (`col2im`).

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits a 5-D shape into `(batch, channels, [d, h, w])`.
    pub fn dims5(&self) -> (usize, usize, [usize; 3]) {
        assert_eq!(self.shape.len(), 5, "expected a 5-D tensor, got {:?}", self.shape);
        (
            self.shape[0],
            self.shape[1],
            [self.shape[2], self.shape[3], self.shape[4]],
        )
    }
}

/// Geometry of a cubic-kernel 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a forward convolution, `None` if the kernel does
    /// not fit.
    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        Some([
            self.out_len(dims[0])?,
            self.out_len(dims[1])?,
            self.out_len(dims[2])?,
        ])
    }

    /// Output extent of the transposed convolution with `out_pad` extra
    /// trailing voxels.
    pub fn transposed_len(&self, n: usize, out_pad: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel + out_pad).checked_sub(2 * self.pad)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lowers one sample `[c, d, h, w]` to a `[c*k^3, od*oh*ow]` column matrix.
pub fn im2col(
    x: &[f64],
    channels: usize,
    dims: [usize; 3],
    geom: ConvGeom,
    out: [usize; 3],
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let plane = od * oh * ow;
    debug_assert_eq!(cols.len(), channels * k * k * k * plane);
    let mut row = 0;
    for c in 0..channels {
        let src = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * geom.stride + kd) as isize - geom.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            dst[idx..idx + oh * ow].fill(0.0);
                            idx += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * geom.stride + kh) as isize - geom.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                dst[idx..idx + ow].fill(0.0);
                                idx += ow;
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            for xo in 0..ow {
                                let ix = (xo * geom.stride + kw) as isize - geom.pad as isize;
                                dst[idx] = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    src[base + ix as usize]
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) columns back into `x`.
pub fn col2im(
    cols: &[f64],
    channels: usize,
    dims: [usize; 3],
    geom: ConvGeom,
    out: [usize; 3],
    x: &mut [f64],
) {
    let k = geom.kernel;
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * plane..(row + 1) * plane];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * geom.stride + kd) as isize - geom.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * geom.stride + kh) as isize - geom.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            for xo in 0..ow {
                                let ix = (xo * geom.stride + kw) as isize - geom.pad as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    dst[base + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the slices cover the full strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
