use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a batched 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub t_out: usize,
}

impl ConvDims {
    pub fn infer(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, c_in, t_in) = match *input {
            [c, t] => (1, c, t),
            [n, c, t] => (n, c, t),
            _ => {
                return Err(Error::invalid(format!(
                    "conv1d input must be C x T or N x C x T, got {input:?}"
                )))
            }
        };
        let [c_out, kc, k] = *kernels else {
            return Err(Error::invalid(format!(
                "conv1d kernels must be C_out x C_in x K, got {kernels:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::invalid(format!(
                "conv1d channel mismatch: input has {c_in}, kernels expect {kc}"
            )));
        }
        if stride == 0 || k == 0 {
            return Err(Error::invalid(
                "conv1d stride and kernel width must be positive",
            ));
        }
        if t_in + 2 * padding < k {
            return Err(Error::invalid(format!(
                "conv1d output length < 1 (T={t_in}, padding={padding}, K={k})"
            )));
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            t_in,
            c_out,
            k,
            stride,
            padding,
            t_out,
        })
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.t_out]
        } else {
            vec![self.c_out, self.t_out]
        }
    }

    fn source_index(&self, to: usize, kk: usize) -> Option<usize> {
        let pos = (to * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }

    /// Unfolds one sample (`C_in x T`) into a `(C_in*K) x T_out` column matrix.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let t_out = self.t_out;
        for ci in 0..self.c_in {
            let row_in = &x[ci * self.t_in..(ci + 1) * self.t_in];
            for kk in 0..self.k {
                let row = &mut cols[(ci * self.k + kk) * t_out..(ci * self.k + kk + 1) * t_out];
                for (to, slot) in row.iter_mut().enumerate() {
                    *slot = self.source_index(to, kk).map_or(0.0, |p| row_in[p]);
                }
            }
        }
    }

    /// Folds a column-gradient matrix back onto one sample, accumulating.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let t_out = self.t_out;
        for ci in 0..self.c_in {
            let row_out = &mut dx[ci * self.t_in..(ci + 1) * self.t_in];
            for kk in 0..self.k {
                let row = &cols[(ci * self.k + kk) * t_out..(ci * self.k + kk + 1) * t_out];
                for (to, &g) in row.iter().enumerate() {
                    if let Some(p) = self.source_index(to, kk) {
                        row_out[p] += g;
                    }
                }
            }
        }
    }
}

/// 1-D cross-correlation with zero padding. Accepts `C_in x T` or a batch
/// `N x C_in x T`; kernels are `C_out x C_in x K`.
pub fn conv1d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let dims = ConvDims::infer(input.shape(), kernels.shape(), stride, padding)?;
    let out = conv1d_raw(&dims, input.data(), kernels.data());
    Tensor::new(dims.out_shape(input.ndim() == 3), out)
}

pub(crate) fn conv1d_raw(dims: &ConvDims, x: &[f64], w: &[f64]) -> Vec<f64> {
    let ck = dims.c_in * dims.k;
    let mut cols = vec![0.0; ck * dims.t_out];
    let mut out = vec![0.0; dims.batch * dims.c_out * dims.t_out];
    let in_stride = dims.c_in * dims.t_in;
    let out_stride = dims.c_out * dims.t_out;
    for n in 0..dims.batch {
        dims.im2col(&x[n * in_stride..(n + 1) * in_stride], &mut cols);
        gemm(
            dims.c_out,
            ck,
            dims.t_out,
            w,
            false,
            &cols,
            false,
            &mut out[n * out_stride..(n + 1) * out_stride],
            0.0,
        );
    }
    out
}

/// Gradients of a convolution with respect to input and kernels.
pub(crate) fn conv1d_backward(
    dims: &ConvDims,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ck = dims.c_in * dims.k;
    let mut cols = vec![0.0; ck * dims.t_out];
    let mut dcols = vec![0.0; ck * dims.t_out];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let in_stride = dims.c_in * dims.t_in;
    let out_stride = dims.c_out * dims.t_out;
    for n in 0..dims.batch {
        let xs = &x[n * in_stride..(n + 1) * in_stride];
        let gs = &grad_out[n * out_stride..(n + 1) * out_stride];
        dims.im2col(xs, &mut cols);
        // dW += dOut * cols^T
        gemm(
            dims.c_out, dims.t_out, ck, gs, false, &cols, true, &mut dw, 1.0,
        );
        // dcols = W^T * dOut
        gemm(
            ck, dims.c_out, dims.t_out, w, true, gs, false, &mut dcols, 0.0,
        );
        dims.col2im(&dcols, &mut dx[n * in_stride..(n + 1) * in_stride]);
    }
    (dx, dw)
}

/// Affine map `weights * input + bias`. `input` may be a vector of length
/// `N_in` or a batch `B x N_in`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, n_in) = dense_dims(input.shape(), weights.shape(), bias.shape())?;
    let m = weights.shape()[0];
    let out = dense_raw(batch, n_in, m, input.data(), weights.data(), bias.data());
    let shape = if input.ndim() == 2 {
        vec![batch, m]
    } else {
        vec![m]
    };
    Tensor::new(shape, out)
}

pub(crate) fn dense_dims(
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
) -> Result<(usize, usize)> {
    let (batch, n_in) = match *input {
        [n] => (1, n),
        [b, n] => (b, n),
        _ => {
            return Err(Error::invalid(format!(
                "dense input must be 1-D or 2-D, got {input:?}"
            )))
        }
    };
    let [m, wn] = *weights else {
        return Err(Error::invalid(format!(
            "dense weights must be M x N, got {weights:?}"
        )));
    };
    if wn != n_in {
        return Err(Error::invalid(format!(
            "dense shape mismatch: input has {n_in} features, weights expect {wn}"
        )));
    }
    if bias != [m] {
        return Err(Error::invalid(format!(
            "dense bias must be [{m}], got {bias:?}"
        )));
    }
    Ok((batch, n_in))
}

pub(crate) fn dense_raw(
    batch: usize,
    n_in: usize,
    m: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    gemm(batch, n_in, m, x, false, w, true, &mut out, 1.0);
    out
}
