//! Dense row-major `f64` tensors and the spatial kernels the network is built from.
//!
//! Convolution goes through an explicit patch gather (`im2col`) followed by a dense
//! product, so one pair of kernels serves the forward pass and both backward passes.
//! Cross-correlation is the same kernel with the template standing in for the filter bank.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents as `[C, H, W]`; rank-2 tensors are read as a single channel.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            [h, w] => Ok((1, h, w)),
            _ => Err(Error::shape(format!("expected [C,H,W], got {:?}", self.dims))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{what}: dims {:?} and {:?} differ",
                self.dims, other.dims
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// In-place `self += other`; dims must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "accumulate: dims {:?} and {:?} differ",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh_op(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.hadamard(b)
}

/// `c = a · b + beta · c` over strided row-major views; `a` is `m × k`, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        for v in c.iter_mut().take(m * n) {
            *v *= beta;
        }
        return;
    }
    // SAFETY: every slice covers the extents implied by its dims and strides; the
    // output is a dense row-major m×n block that does not alias the inputs.
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

/// Dense `[m,k] · [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match *a.dims() {
        [m, k] => (m, k),
        _ => return Err(Error::shape(format!("matmul lhs must be rank 2, got {:?}", a.dims()))),
    };
    let (k2, n) = match *b.dims() {
        [k2, n] => (k2, n),
        _ => return Err(Error::shape(format!("matmul rhs must be rank 2, got {:?}", b.dims()))),
    };
    if k != k2 {
        return Err(Error::shape(format!("matmul inner axes differ: {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Output extent of a strided window sweep over a padded axis.
pub fn out_extent(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry shared by the patch gather and its adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        let out_h = out_extent(height, kh, stride, padding).ok_or_else(|| {
            Error::shape(format!("height axis: padded extent {} < kernel {kh}", height + 2 * padding))
        })?;
        let out_w = out_extent(width, kw, stride, padding).ok_or_else(|| {
            Error::shape(format!("width axis: padded extent {} < kernel {kw}", width + 2 * padding))
        })?;
        Ok(PatchGeometry { channels, height, width, kh, kw, stride, padding, out_h, out_w })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Gathers every receptive field into a column: `[C·kh·kw, H'·W']`, zero padded.
pub fn im2col(input: &[f64], g: &PatchGeometry) -> Vec<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + dx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im(cols: &[f64], g: &PatchGeometry) -> Vec<f64> {
    let ncols = g.cols();
    let mut out = vec![0.0; g.channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + dx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward result of a convolution, keeping the gathered patches for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvForward {
    pub output: Tensor,
    pub cols: Vec<f64>,
    pub geometry: PatchGeometry,
}

fn check_conv_shapes(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let (cin, _, _) = input.chw()?;
    let (cout, kcin, kh, kw) = match *kernels.dims() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape(format!("kernels must be [Cout,Cin,kh,kw], got {:?}", kernels.dims()))),
    };
    if kcin != cin {
        return Err(Error::shape(format!(
            "channel axis: input has Cin={cin}, kernels expect Cin={kcin}"
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::shape(format!("bias axis: expected [{cout}], got {:?}", b.dims())));
        }
    }
    Ok((cout, kh, kw))
}

pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<ConvForward> {
    let (cout, kh, kw) = check_conv_shapes(input, kernels, bias)?;
    let g = PatchGeometry::new(input.chw()?, (kh, kw), stride, padding)?;
    let cols = im2col(input.data(), &g);
    let p = g.cols();
    let mut out = vec![0.0; cout * p];
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[c]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(cout, g.rows(), p, kernels.data(), (g.rows(), 1), &cols, (p, 1), beta, &mut out);
    let output = Tensor::new(vec![cout, g.out_h, g.out_w], out)?;
    Ok(ConvForward { output, cols, geometry: g })
}

/// `out[c,y,x] = bias[c] + Σ in_padded[c', y·s+dy, x·s+dx] · kernels[c,c',dy,dx]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(conv2d_forward(input, kernels, Some(bias), stride, padding)?.output)
}

/// Gradients of a convolution with respect to its input and its kernels.
pub fn conv2d_backward(grad_out: &Tensor, kernels: &Tensor, cols: &[f64], g: &PatchGeometry) -> (Tensor, Tensor) {
    let cout = kernels.dims()[0];
    let p = g.cols();
    let r = g.rows();
    let mut dk = vec![0.0; cout * r];
    // dK = dOut · colsᵀ
    gemm(cout, p, r, grad_out.data(), (p, 1), cols, (1, p), 0.0, &mut dk);
    // dcols = Kᵀ · dOut
    let mut dcols = vec![0.0; r * p];
    gemm(r, cout, p, kernels.data(), (1, r), grad_out.data(), (p, 1), 0.0, &mut dcols);
    let dinput = col2im(&dcols, g);
    (
        Tensor { dims: vec![g.channels, g.height, g.width], data: dinput },
        Tensor { dims: kernels.dims().to_vec(), data: dk },
    )
}

/// Per-channel sums of an output gradient, i.e. the bias gradient.
pub fn channel_sums(grad_out: &Tensor) -> Tensor {
    let c = grad_out.dims()[0];
    let per = grad_out.len() / c.max(1);
    let data = grad_out.data().chunks(per.max(1)).map(|ch| ch.iter().sum()).collect();
    Tensor { dims: vec![c], data }
}

#[derive(Clone, Debug)]
pub struct PoolForward {
    pub output: Tensor,
    /// Flat input index selected by each output cell.
    pub argmax: Vec<usize>,
    pub input_dims: Vec<usize>,
}

pub fn max_pool2d_forward(input: &Tensor, window: usize, stride: usize) -> Result<PoolForward> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    if h < window || w < window {
        return Err(Error::shape(format!("pool window {window} exceeds input {h}x{w}")));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let d = input.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolForward {
        output: Tensor { dims: vec![c, oh, ow], data: out },
        argmax,
        input_dims: input.dims().to_vec(),
    })
}

pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(max_pool2d_forward(input, window, stride)?.output)
}

/// Dense similarity map between a template and every placement inside a search window.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    values: Tensor,
}

impl CorrelationMap {
    pub fn new(values: Tensor) -> Result<Self> {
        match *values.dims() {
            [1, h, w] if h >= 1 && w >= 1 => Ok(CorrelationMap { values }),
            _ => Err(Error::shape(format!("correlation map must be [1,H,W], got {:?}", values.dims()))),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values.data()[y * self.width() + x]
    }
}

pub(crate) fn check_correlate_shapes(search: &Tensor, template: &Tensor) -> Result<()> {
    let (cs, hs, ws) = search.chw()?;
    let (ct, ht, wt) = template.chw()?;
    if cs != ct {
        return Err(Error::shape(format!("channel axis: search has {cs}, template has {ct}")));
    }
    if ht > hs || wt > ws {
        return Err(Error::shape(format!("template {ht}x{wt} larger than search window {hs}x{ws}")));
    }
    Ok(())
}

/// Template as a single-output filter bank `[1, C, Ht, Wt]`.
pub(crate) fn template_as_kernel(template: &Tensor) -> Result<Tensor> {
    let (c, h, w) = template.chw()?;
    template.reshape(&[1, c, h, w])
}

/// Valid-mode correlation: `C(p) = Σ_{c,q} search[c, p+q] · template[c, q]`.
pub fn cross_correlate(search: &Tensor, template: &Tensor) -> Result<CorrelationMap> {
    check_correlate_shapes(search, template)?;
    let kernel = template_as_kernel(template)?;
    let fwd = conv2d_forward(search, &kernel, None, 1, 0)?;
    CorrelationMap::new(fwd.output)
}

/// Row-major position of the maximum; the first occurrence wins ties.
pub fn argmax2d(map: &CorrelationMap) -> (usize, usize) {
    let w = map.width();
    let mut best = 0;
    for (i, &v) in map.values.data().iter().enumerate() {
        if v > map.values.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn conv_oracle(input: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cin, h, w) = input.chw().unwrap();
        let [cout, _, kh, kw] = *k.dims() else { panic!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for c in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b.data()[c];
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (x * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * k.data()[((c * cin + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[(c * oh + y) * ow + x] = acc;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_counts_overlapping_ones() {
        let out = conv2d(&Tensor::ones(&[1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(out.dims(), &[1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out.data()[corner], 4.0);
        }
    }

    #[test]
    fn conv_zero_kernels_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 5], &mut rng);
        let out = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = random(&[2, 5, 5], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let got = conv2d(&x, &k, &b, stride, pad).unwrap();
            let want = conv_oracle(&x, &k, &b, stride, pad);
            assert_eq!(got.dims(), want.dims());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_same_padding_keeps_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 5] {
            let x = random(&[2, 7, 6], &mut rng);
            let out = conv2d(&x, &random(&[4, 2, k, k], &mut rng), &Tensor::zeros(&[4]), 1, k / 2).unwrap();
            assert_eq!(out.dims(), &[4, 7, 6]);
        }
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let err = conv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("channel"), "{err}");
        let err = conv2d(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn pool_picks_max() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[2, 4, 4], 1.5);
        assert!(max_pool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(max_pool2d(&Tensor::zeros(&[1, 1, 3]), 2, 2).is_err());
    }

    #[test]
    fn pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 6, 6], &mut rng);
        let got = max_pool2d(&x, 2, 2).unwrap();
        for y in 0..3 {
            for xx in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * y + dy) * 6 + 2 * xx + dx]);
                    }
                }
                assert_eq!(got.data()[y * 3 + xx], m);
            }
        }
    }

    #[test]
    fn elementwise_closed_forms() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(tanh_op(&Tensor::scalar(0.0)).item(), 0.0);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(hadamard(&a, &Tensor::ones(&[3])).unwrap(), a);
        assert!(hadamard(&a, &Tensor::ones(&[2])).is_err());
        let big = Tensor::new(vec![4], vec![-800.0, -30.0, 30.0, 800.0]).unwrap();
        let s = sigmoid(&big);
        assert!(s.is_finite() && s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn correlation_identity_and_zero_template() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random(&[1, 4, 5], &mut rng);
        let m = cross_correlate(&s, &Tensor::ones(&[1, 1, 1])).unwrap();
        assert_eq!(m.values().data(), s.data());
        let z = cross_correlate(&s, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(z.values().data().iter().all(|&v| v == 0.0));
        assert!(cross_correlate(&s, &Tensor::zeros(&[1, 5, 2])).is_err());
        assert!(cross_correlate(&s, &Tensor::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn argmax_rules() {
        let mut v = Tensor::zeros(&[1, 3, 4]);
        v.data_mut()[4 + 2] = 5.0;
        let m = CorrelationMap::new(v).unwrap();
        assert_eq!(argmax2d(&m), (1, 2));
        let c = CorrelationMap::new(Tensor::full(&[1, 3, 3], 2.0)).unwrap();
        assert_eq!(argmax2d(&c), (0, 0));
    }
}
