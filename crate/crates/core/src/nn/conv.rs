use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            velocity: self.velocity.cast(),
        }
    }
}

/// 2-D convolution with square `1×1` or `3×3` kernels and stride 1 or 2.
#[derive(Clone, Debug)]
pub struct ConvLayer<T = f32> {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Param<T>,
    /// `[out_ch]`
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    /// Zero-initialised layer; padding defaults to `k / 2` ("same" for stride 1).
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::validation("kernel", format!("{kernel} not in {{1, 3}}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::validation("stride", format!("{stride} not in {{1, 2}}")));
        }
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::validation("channels", "must be positive"));
        }
        Ok(ConvLayer {
            weight: Param::new(Tensor::zeros(&[out_ch, in_ch, kernel, kernel])),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            stride,
            padding: kernel / 2,
        })
    }

    /// He-style uniform init scaled by fan-in; bias set to `bias`.
    pub fn init_he(&mut self, rng: &mut impl Rng, bias: f64) {
        let fan_in = (self.in_channels() * self.kernel() * self.kernel()) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in self.weight.value.data_mut() {
            *w = T::lit(rng.random_range(-bound..bound));
        }
        self.bias.value.fill(T::lit(bias));
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// `floor((extent + 2·pad − k) / stride) + 1`, or `None` when the kernel does not fit.
    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<Geometry> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape {
                context: "conv2d input channels",
                expected: vec![n, self.in_channels(), h, w],
                actual: input.shape().to_vec(),
            });
        }
        let (Some(oh), Some(ow)) = (self.out_extent(h), self.out_extent(w)) else {
            return Err(Error::Shape {
                context: "conv2d input smaller than kernel",
                expected: vec![n, c, self.kernel(), self.kernel()],
                actual: input.shape().to_vec(),
            });
        };
        Ok(Geometry {
            n,
            c,
            h,
            w,
            oh,
            ow,
            k: self.kernel(),
            stride: self.stride,
            pad: self.padding,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded conv reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let g = layer.geometry(input)?;
    let out_ch = layer.out_channels();
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[g.n, out_ch, g.oh, g.ow]);
    let mut scratch = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let in_stride = g.c * g.h * g.w;
    let weights = layer.weight.value.data();
    let bias = layer.bias.value.data();
    for b in 0..g.n {
        let src = &input.data()[b * in_stride..(b + 1) * in_stride];
        let col: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut scratch);
            &scratch
        };
        let dst = &mut out.data_mut()[b * out_ch * cols..(b + 1) * out_ch * cols];
        for (row, &bv) in dst.chunks_exact_mut(cols).zip(bias) {
            row.fill(bv);
        }
        gemm_nn(weights, col, dst, out_ch, rows, cols);
    }
    Ok(out)
}

/// Accumulates weight/bias gradients into `layer` and returns the gradient w.r.t. `input`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &mut ConvLayer<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    backward_impl(input, layer, upstream, true).map(|g| g.expect("input grad requested"))
}

/// Like [`conv2d_backward`] but skips the input gradient (first layer of a network).
pub fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    layer: &mut ConvLayer<T>,
    upstream: &Tensor<T>,
) -> Result<()> {
    backward_impl(input, layer, upstream, false).map(|_| ())
}

fn backward_impl<T: Scalar>(
    input: &Tensor<T>,
    layer: &mut ConvLayer<T>,
    upstream: &Tensor<T>,
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let g = layer.geometry(input)?;
    let out_ch = layer.out_channels();
    upstream.expect_shape("conv2d upstream gradient", &[g.n, out_ch, g.oh, g.ow])?;
    let (rows, cols) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut scratch = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let mut dcol = vec![T::zero(); if want_input_grad { rows * cols } else { 0 }];
    let mut input_grad = want_input_grad.then(|| Tensor::zeros(input.shape()));

    for b in 0..g.n {
        let up = &upstream.data()[b * out_ch * cols..(b + 1) * out_ch * cols];
        let src = &input.data()[b * in_stride..(b + 1) * in_stride];
        let col: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut scratch);
            &scratch
        };
        gemm_nt(up, col, layer.weight.grad.data_mut(), out_ch, cols, rows);
        for (bg, row) in layer.bias.grad.data_mut().iter_mut().zip(up.chunks_exact(cols)) {
            *bg += row.iter().fold(T::zero(), |acc, &v| acc + v);
        }
        if let Some(ig) = input_grad.as_mut() {
            dcol.fill(T::zero());
            gemm_tn(layer.weight.value.data(), up, &mut dcol, out_ch, rows, cols);
            let dst = &mut ig.data_mut()[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                dst.copy_from_slice(&dcol);
            } else {
                col2im(&dcol, &g, dst);
            }
        }
    }
    Ok(input_grad)
}

fn im2col<T: Scalar>(src: &[T], g: &Geometry, col: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, dst: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Column block width for the GEMM kernels; keeps the active rows of `b` and `c` in L1.
const BLOCK_N: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`, four output rows per pass over a column block of `b`.
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + BLOCK_N).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (
                &mut c0[j0..j1],
                &mut c1[j0..j1],
                &mut c2[j0..j1],
                &mut c3[j0..j1],
            );
            for p in 0..k {
                let (a0, a1, a2, a3) = (
                    a[i * k + p],
                    a[(i + 1) * k + p],
                    a[(i + 2) * k + p],
                    a[(i + 3) * k + p],
                );
                let bp = &b[p * n + j0..p * n + j1];
                for ((((x0, x1), x2), x3), &bv) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(bp)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let ci = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                axpy(ci, a[i * k + p], &b[p * n + j0..p * n + j1]);
            }
        }
        j0 = j1;
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(ai, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    gemm_nn(&at, b, c, k, m, n);
}

/// Row-major `rows×cols` → `cols×rows`.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Sixteen independent partial sums so the reduction vectorises; the summation order is fixed,
/// so results are bitwise reproducible.
#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let full = x.len() / LANES * LANES;
    for (xc, yc) in x[..full].chunks_exact(LANES).zip(y[..full].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += xc[l] * yc[l];
        }
    }
    let mut tail = T::zero();
    for j in full..x.len() {
        tail += x[j] * y[j];
    }
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] += acc[l + width];
        }
        width /= 2;
    }
    acc[0] + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop convolution.
    fn conv_oracle(input: &Tensor<f64>, layer: &ConvLayer<f64>) -> Tensor<f64> {
        let (n, c, h, w) = input.dims4().unwrap();
        let (oc, k, s, p) = (
            layer.out_channels(),
            layer.kernel(),
            layer.stride,
            layer.padding as isize,
        );
        let oh = (h + 2 * layer.padding - k) / s + 1;
        let ow = (w + 2 * layer.padding - k) / s + 1;
        let wt = layer.weight.value.data();
        let mut out = Tensor::zeros(&[n, oc, oh, ow]);
        for b in 0..n {
            for o in 0..oc {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = layer.bias.value.data()[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - p;
                                    let ix = (x * s + kx) as isize - p;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += wt[((o * c + ci) * k + ky) * k + kx]
                                            * input.data()
                                                [((b * c + ci) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * oc + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_pointwise() {
        let mut layer = ConvLayer::<f32>::new(1, 1, 1, 1).unwrap();
        layer.weight.value.fill(1.0);
        let input = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(conv2d_forward(&input, &layer).unwrap(), input);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, s) in &[(1, 1), (1, 2), (3, 1), (3, 2)] {
            for h in 1..8 {
                let mut layer = ConvLayer::<f64>::new(2, 3, k, s).unwrap();
                layer.init_he(&mut rng, 0.1);
                let input = random_tensor(&mut rng, &[2, 2, h, h + 1]);
                let got = conv2d_forward(&input, &layer).unwrap();
                let want = conv_oracle(&input, &layer);
                assert_eq!(got.shape(), want.shape(), "k={k} s={s} h={h}");
                for (a, b) in got.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let layer = ConvLayer::<f32>::new(3, 4, 3, 1).unwrap();
        let err = conv2d_forward(&Tensor::zeros(&[1, 2, 5, 5]), &layer).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 5, 5]") && msg.contains("[1, 2, 5, 5]"), "{msg}");
    }

    #[test]
    fn rejects_unsupported_kernels() {
        assert!(ConvLayer::<f32>::new(1, 1, 5, 1).is_err());
        assert!(ConvLayer::<f32>::new(1, 1, 3, 3).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = ConvLayer::<f64>::new(2, 2, 3, 2).unwrap();
        layer.init_he(&mut rng, 0.0);
        let input = random_tensor(&mut rng, &[1, 2, 6, 6]);
        let up = Tensor::zeros(&[1, 2, 3, 3]);
        let ig = conv2d_backward(&input, &mut layer, &up).unwrap();
        assert!(ig.data().iter().all(|&v| v == 0.0));
        assert!(layer.weight.grad.data().iter().all(|&v| v == 0.0));
        assert!(layer.bias.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_weight_gradient_is_input() {
        let mut layer = ConvLayer::<f64>::new(1, 1, 1, 1).unwrap();
        layer.weight.value.fill(0.7);
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let up = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let ig = conv2d_backward(&input, &mut layer, &up).unwrap();
        assert_eq!(layer.weight.grad.data(), &[2.5]);
        assert_eq!(layer.bias.grad.data(), &[1.0]);
        assert_eq!(ig.data(), &[0.7]);
    }

    #[test]
    fn paper_head_shape() {
        let layer = ConvLayer::<f32>::new(2048, 256, 3, 2).unwrap();
        assert_eq!(layer.out_extent(32), Some(16));
    }
}
