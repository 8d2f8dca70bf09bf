//! Minimal CPU neural network: convolution, batch norm, residual blocks,
//! fully connected layers, and SGD/Adam.
//!
//! Tensors are NCHW. Layers cache what their backward pass needs during a
//! training forward pass; gradients accumulate until [`Network::zero_grad`].
//! Everything is single-threaded, so results do not depend on the machine.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;

    /// `c = alpha * a * b + beta * c` with explicit row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    /// `[n, c, h, w]`; fully connected activations use `h = w = 1`.
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }
}

fn kaiming<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| T::from_f64(dist.sample(rng))).collect()
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(value: Vec<T>) -> Self {
        let grad = vec![T::ZERO; value.len()];
        Self { value, grad }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    /// `[out_c, in_c * k * k]`.
    pub weight: Param<T>,
    pub b: Param<T>,
    /// Whether backward must produce the input gradient.
    pub input_grad: bool,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            bias,
            weight: Param::new(kaiming(rng, fan_in, out_c * fan_in)),
            b: Param::new(vec![T::ZERO; if bias { out_c } else { 0 }]),
            input_grad: true,
            input: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w as isize { T::ZERO } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let kk = self.in_c * self.kernel * self.kernel;
        let p = oh * ow;
        let mut out = Tensor::zeros([n, self.out_c, oh, ow]);
        let mut cols = vec![T::ZERO; kk * p];
        for i in 0..n {
            self.im2col(x.sample(i), h, w, &mut cols);
            let o = &mut out.data[i * self.out_c * p..(i + 1) * self.out_c * p];
            if self.bias {
                for (oc, chunk) in o.chunks_mut(p).enumerate() {
                    chunk.fill(self.b.value[oc]);
                }
            }
            let beta = if self.bias { T::ONE } else { T::ZERO };
            T::gemm(self.out_c, kk, p, T::ONE, &self.weight.value, kk, 1, &cols, p, 1, beta, o, p, 1);
        }
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Option<Tensor<T>> {
        let x = self.input.take().expect("conv backward without training forward");
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_size(h, w);
        let kk = self.in_c * self.kernel * self.kernel;
        let p = oh * ow;
        let mut cols = vec![T::ZERO; kk * p];
        let mut dcols = vec![T::ZERO; kk * p];
        let mut dx = self.input_grad.then(|| Tensor::zeros(x.shape));
        for i in 0..n {
            let g = &grad.data[i * self.out_c * p..(i + 1) * self.out_c * p];
            if self.bias {
                for (oc, chunk) in g.chunks(p).enumerate() {
                    let mut s = T::ZERO;
                    for &v in chunk {
                        s += v;
                    }
                    self.b.grad[oc] += s;
                }
            }
            self.im2col(x.sample(i), h, w, &mut cols);
            // dW += g * cols^T
            T::gemm(self.out_c, p, kk, T::ONE, g, p, 1, &cols, 1, p, T::ONE, &mut self.weight.grad, kk, 1);
            if let Some(dx) = dx.as_mut() {
                // dcols = W^T * g
                T::gemm(kk, self.out_c, p, T::ONE, &self.weight.value, 1, kk, g, p, 1, T::ZERO, &mut dcols, p, 1);
                let len = x.sample_len();
                self.col2im(&dcols, h, w, &mut dx.data[i * len..(i + 1) * len]);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`.
    pub weight: Param<T>,
    pub b: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(kaiming(rng, inputs, inputs * outputs)),
            b: Param::new(vec![T::ZERO; outputs]),
            input: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.inputs, "linear input width");
        let mut out = Tensor::zeros([n, self.outputs, 1, 1]);
        for row in out.data.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.b.value);
        }
        // out[n, o] += x[n, i] * W[o, i]^T
        T::gemm(
            n,
            self.inputs,
            self.outputs,
            T::ONE,
            &x.data,
            self.inputs,
            1,
            &self.weight.value,
            1,
            self.inputs,
            T::ONE,
            &mut out.data,
            self.outputs,
            1,
        );
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("linear backward without training forward");
        let n = x.batch();
        for row in grad.data.chunks(self.outputs) {
            for (g, &v) in self.b.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        // dW[o, i] += g[n, o]^T * x[n, i]
        T::gemm(
            self.outputs,
            n,
            self.inputs,
            T::ONE,
            &grad.data,
            1,
            self.outputs,
            &x.data,
            self.inputs,
            1,
            T::ONE,
            &mut self.weight.grad,
            self.inputs,
            1,
        );
        let mut dx = Tensor::zeros(x.shape);
        T::gemm(
            n,
            self.outputs,
            self.inputs,
            T::ONE,
            &grad.data,
            self.outputs,
            1,
            &self.weight.value,
            self.inputs,
            1,
            T::ZERO,
            &mut dx.data,
            self.inputs,
            1,
        );
        dx
    }
}

/// Per-channel batch normalisation with learned scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![T::ONE; channels]),
            beta: Param::new(vec![T::ZERO; channels]),
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let p = h * w;
        let mut out = Tensor::zeros(x.shape);
        let eps = T::from_f64(self.eps);
        if !train {
            for i in 0..n {
                for ch in 0..c {
                    let inv = T::ONE / (self.running_var[ch] + eps).sqrt();
                    let (g, b, m) = (self.gamma.value[ch], self.beta.value[ch], self.running_mean[ch]);
                    let o = (i * c + ch) * p;
                    for k in o..o + p {
                        out.data[k] = (x.data[k] - m) * inv * g + b;
                    }
                }
            }
            return out;
        }
        let count = T::from_f64((n * p) as f64);
        let mut xhat = Tensor::zeros(x.shape);
        let mut inv_std = vec![T::ZERO; c];
        for ch in 0..c {
            let mut mean = T::ZERO;
            for i in 0..n {
                let o = (i * c + ch) * p;
                for &v in &x.data[o..o + p] {
                    mean += v;
                }
            }
            mean = mean / count;
            let mut var = T::ZERO;
            for i in 0..n {
                let o = (i * c + ch) * p;
                for &v in &x.data[o..o + p] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var = var / count;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[ch] = inv;
            for i in 0..n {
                let o = (i * c + ch) * p;
                for k in o..o + p {
                    let xh = (x.data[k] - mean) * inv;
                    xhat.data[k] = xh;
                    out.data[k] = xh * self.gamma.value[ch] + self.beta.value[ch];
                }
            }
            let m = T::from_f64(self.momentum);
            let unbiased = if n * p > 1 {
                var * count / (count - T::ONE)
            } else {
                var
            };
            self.running_mean[ch] = self.running_mean[ch] * (T::ONE - m) + mean * m;
            self.running_var[ch] = self.running_var[ch] * (T::ONE - m) + unbiased * m;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without training forward");
        let [n, c, h, w] = xhat.shape;
        let p = h * w;
        let count = T::from_f64((n * p) as f64);
        let mut dx = Tensor::zeros(xhat.shape);
        for ch in 0..c {
            let (mut sg, mut sgx) = (T::ZERO, T::ZERO);
            for i in 0..n {
                let o = (i * c + ch) * p;
                for k in o..o + p {
                    sg += grad.data[k];
                    sgx += grad.data[k] * xhat.data[k];
                }
            }
            self.beta.grad[ch] += sg;
            self.gamma.grad[ch] += sgx;
            let scale = self.gamma.value[ch] * inv_std[ch] / count;
            for i in 0..n {
                let o = (i * c + ch) * p;
                for k in o..o + p {
                    dx.data[k] = scale * (count * grad.data[k] - sg - xhat.data[k] * sgx);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool {
    fn forward<T: Real>(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0usize; out.data.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let k = base + iy as usize * w + ix as usize;
                            if best.is_none_or(|(v, _)| x.data[k] > v) {
                                best = Some((x.data[k], k));
                            }
                        }
                    }
                    let (v, k) = best.expect("pool window overlaps the input");
                    let o = (plane * oh + oy) * ow + ox;
                    out.data[o] = v;
                    arg[o] = k;
                }
            }
        }
        if train {
            self.argmax = Some((arg, x.shape));
        }
        out
    }

    fn backward<T: Real>(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (arg, shape) = self.argmax.take().expect("pool backward without training forward");
        let mut dx = Tensor::zeros(shape);
        for (o, &k) in arg.iter().enumerate() {
            dx.data[k] += grad.data[o];
        }
        dx
    }
}

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub body: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
    mask: Option<Vec<bool>>,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let body = vec![
            Layer::Conv(Conv2d::new(in_c, out_c, 3, stride, 1, false, rng)),
            Layer::BatchNorm(BatchNorm::new(out_c)),
            Layer::Relu(Relu::default()),
            Layer::Conv(Conv2d::new(out_c, out_c, 3, 1, 1, false, rng)),
            Layer::BatchNorm(BatchNorm::new(out_c)),
        ];
        let shortcut = if stride != 1 || in_c != out_c {
            vec![
                Layer::Conv(Conv2d::new(in_c, out_c, 1, stride, 0, false, rng)),
                Layer::BatchNorm(BatchNorm::new(out_c)),
            ]
        } else {
            Vec::new()
        };
        Self {
            body,
            shortcut,
            mask: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut a = forward_seq(&mut self.body, x, train);
        let s = if self.shortcut.is_empty() {
            x.clone()
        } else {
            forward_seq(&mut self.shortcut, x, train)
        };
        let mut mask = Vec::with_capacity(a.data.len());
        for (v, &b) in a.data.iter_mut().zip(&s.data) {
            *v += b;
            let on = *v > T::ZERO;
            if !on {
                *v = T::ZERO;
            }
            mask.push(on);
        }
        if train {
            self.mask = Some(mask);
        }
        a
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("block backward without training forward");
        let mut g = grad.clone();
        for (v, on) in g.data.iter_mut().zip(mask) {
            if !on {
                *v = T::ZERO;
            }
        }
        let mut dx = backward_seq(&mut self.body, &g).expect("block body passes gradients");
        let ds = if self.shortcut.is_empty() {
            g
        } else {
            backward_seq(&mut self.shortcut, &g).expect("shortcut passes gradients")
        };
        for (a, b) in dx.data.iter_mut().zip(ds.data) {
            *a += b;
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    MaxPool(MaxPool),
    /// Mean over the spatial dimensions.
    GlobalAvgPool(Option<[usize; 4]>),
    /// Reshape `[n, c, h, w]` to `[n, c*h*w, 1, 1]`.
    Flatten(Option<[usize; 4]>),
    Residual(Box<BasicBlock<T>>),
    /// Fixed map of a stacked `(a, b)` pair (3 channels each) to
    /// `(gain * (b - a), a)`. Not trainable.
    PairDifference(f64),
}

impl<T: Real> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::Linear(l) => l.forward(x, train),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::MaxPool(l) => l.forward(x, train),
            Layer::Residual(b) => b.forward(x, train),
            Layer::Relu(r) => {
                let mut out = x.clone();
                let mut mask = Vec::new();
                for v in out.data.iter_mut() {
                    let on = *v > T::ZERO;
                    if !on {
                        *v = T::ZERO;
                    }
                    if train {
                        mask.push(on);
                    }
                }
                if train {
                    r.mask = Some(mask);
                }
                out
            }
            Layer::GlobalAvgPool(shape) => {
                let [n, c, h, w] = x.shape;
                let p = h * w;
                let inv = T::ONE / T::from_f64(p as f64);
                let mut out = Tensor::zeros([n, c, 1, 1]);
                for (o, plane) in out.data.iter_mut().zip(x.data.chunks(p)) {
                    let mut s = T::ZERO;
                    for &v in plane {
                        s += v;
                    }
                    *o = s * inv;
                }
                if train {
                    *shape = Some(x.shape);
                }
                out
            }
            Layer::Flatten(shape) => {
                if train {
                    *shape = Some(x.shape);
                }
                Tensor::from_vec([x.batch(), x.sample_len(), 1, 1], x.data.clone())
            }
            Layer::PairDifference(gain) => {
                let half = x.sample_len() / 2;
                let g = T::from_f64(*gain);
                let mut out = x.clone();
                for (o, s) in out.data.chunks_mut(2 * half).zip(x.data.chunks(2 * half)) {
                    let (a, b) = s.split_at(half);
                    let (oa, ob) = o.split_at_mut(half);
                    for k in 0..half {
                        oa[k] = g * (b[k] - a[k]);
                        ob[k] = a[k];
                    }
                }
                out
            }
        }
    }

    /// Input gradient, or `None` for a first layer that does not need one.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Option<Tensor<T>> {
        Some(match self {
            Layer::Conv(l) => return l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::Residual(b) => b.backward(grad),
            Layer::Relu(r) => {
                let mask = r.mask.take().expect("relu backward without training forward");
                let mut g = grad.clone();
                for (v, on) in g.data.iter_mut().zip(mask) {
                    if !on {
                        *v = T::ZERO;
                    }
                }
                g
            }
            Layer::GlobalAvgPool(shape) => {
                let shape = shape.take().expect("pool backward without training forward");
                let p = shape[2] * shape[3];
                let inv = T::ONE / T::from_f64(p as f64);
                let mut dx = Tensor::zeros(shape);
                for (plane, &g) in dx.data.chunks_mut(p).zip(&grad.data) {
                    plane.fill(g * inv);
                }
                dx
            }
            Layer::Flatten(shape) => {
                let shape = shape.take().expect("flatten backward without training forward");
                Tensor::from_vec(shape, grad.data.clone())
            }
            Layer::PairDifference(gain) => {
                let half = grad.sample_len() / 2;
                let g = T::from_f64(*gain);
                let mut dx = grad.clone();
                for (o, s) in dx.data.chunks_mut(2 * half).zip(grad.data.chunks(2 * half)) {
                    let (ga, gb) = s.split_at(half);
                    let (oa, ob) = o.split_at_mut(half);
                    for k in 0..half {
                        oa[k] = gb[k] - g * ga[k];
                        ob[k] = g * ga[k];
                    }
                }
                dx
            }
        })
    }

    /// Visits trainable parameters in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Conv(l) => {
                f(&mut l.weight);
                if l.bias {
                    f(&mut l.b);
                }
            }
            Layer::Linear(l) => {
                f(&mut l.weight);
                f(&mut l.b);
            }
            Layer::BatchNorm(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
            }
            Layer::Residual(b) => {
                for l in b.body.iter_mut().chain(b.shortcut.iter_mut()) {
                    l.visit_params(f);
                }
            }
            _ => {}
        }
    }

    /// Visits non-trainable state (batch-norm running statistics).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        match self {
            Layer::BatchNorm(l) => {
                f(&mut l.running_mean);
                f(&mut l.running_var);
            }
            Layer::Residual(b) => {
                for l in b.body.iter_mut().chain(b.shortcut.iter_mut()) {
                    l.visit_buffers(f);
                }
            }
            _ => {}
        }
    }
}

fn forward_seq<T: Real>(layers: &mut [Layer<T>], x: &Tensor<T>, train: bool) -> Tensor<T> {
    let mut h = x.clone();
    for l in layers {
        h = l.forward(&h, train);
    }
    h
}

fn backward_seq<T: Real>(layers: &mut [Layer<T>], grad: &Tensor<T>) -> Option<Tensor<T>> {
    let mut g = grad.clone();
    for l in layers.iter_mut().rev() {
        g = l.backward(&g)?;
    }
    Some(g)
}

/// Encoder architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    /// Strided convolution blocks, each conv + ReLU. The first block uses a
    /// 4x4 stride-4 kernel, the rest 3x3 stride 2.
    Strided { widths: Vec<usize> },
    /// 18-layer residual encoder with batch norm and global average pooling.
    ResNet18 { width: usize },
}

impl Backbone {
    pub fn desk() -> Self {
        Backbone::Strided {
            widths: vec![12, 24, 32, 32],
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Backbone::Strided { widths } => format!("strided{widths:?}"),
            Backbone::ResNet18 { width } => format!("resnet18-w{width}"),
        }
    }
}

/// Encoder followed by the 512-256 regression head.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
    pub input_shape: [usize; 3],
    pub outputs: usize,
}

pub const HEAD_WIDTHS: [usize; 2] = [512, 256];

impl<T: Real> Network<T> {
    pub fn new(backbone: &Backbone, input_shape: [usize; 3], outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = input_shape;
        let mut layers: Vec<Layer<T>> = Vec::new();
        let features = match backbone {
            Backbone::Strided { widths } => {
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for (k, &out) in widths.iter().enumerate() {
                    let conv = if k == 0 {
                        Conv2d::new(ch, out, 4, 4, 0, true, &mut rng)
                    } else {
                        Conv2d::new(ch, out, 3, 2, 1, true, &mut rng)
                    };
                    (hh, ww) = conv.out_size(hh, ww);
                    ch = out;
                    layers.push(Layer::Conv(conv));
                    layers.push(Layer::Relu(Relu::default()));
                }
                layers.push(Layer::Flatten(None));
                ch * hh * ww
            }
            Backbone::ResNet18 { width } => {
                let wd = *width;
                layers.push(Layer::Conv(Conv2d::new(c, wd, 7, 2, 3, false, &mut rng)));
                layers.push(Layer::BatchNorm(BatchNorm::new(wd)));
                layers.push(Layer::Relu(Relu::default()));
                layers.push(Layer::MaxPool(MaxPool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                    argmax: None,
                }));
                let mut ch = wd;
                for (stage, mult) in [1usize, 2, 4, 8].iter().enumerate() {
                    let out = wd * mult;
                    for b in 0..2 {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        layers.push(Layer::Residual(Box::new(BasicBlock::new(ch, out, stride, &mut rng))));
                        ch = out;
                    }
                }
                layers.push(Layer::GlobalAvgPool(None));
                ch
            }
        };
        if let Some(Layer::Conv(first)) = layers.first_mut() {
            first.input_grad = false;
        }
        layers.push(Layer::Linear(Linear::new(features, HEAD_WIDTHS[0], &mut rng)));
        layers.push(Layer::Relu(Relu::default()));
        layers.push(Layer::Linear(Linear::new(HEAD_WIDTHS[0], HEAD_WIDTHS[1], &mut rng)));
        layers.push(Layer::Relu(Relu::default()));
        layers.push(Layer::Linear(Linear::new(HEAD_WIDTHS[1], outputs, &mut rng)));
        Self {
            layers,
            input_shape,
            outputs,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        forward_seq(&mut self.layers, x, train)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) {
        let _ = backward_seq(&mut self.layers, grad);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(T::ZERO));
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        for l in &mut self.layers {
            l.visit_buffers(f);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    /// Parameters followed by buffers, flattened.
    pub fn state(&mut self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        self.visit_buffers(&mut |b| out.extend_from_slice(b));
        out
    }

    /// Inverse of [`state`](Self::state). Returns false on a length mismatch.
    pub fn set_state(&mut self, values: &[T]) -> bool {
        let mut expected = 0;
        self.visit_params(&mut |p| expected += p.value.len());
        self.visit_buffers(&mut |b| expected += b.len());
        if expected != values.len() {
            return false;
        }
        let mut at = 0;
        self.visit_params(&mut |p| {
            let n = p.value.len();
            p.value.copy_from_slice(&values[at..at + n]);
            at += n;
        });
        self.visit_buffers(&mut |b| {
            let n = b.len();
            b.copy_from_slice(&values[at..at + n]);
            at += n;
        });
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state, one slot per parameter tensor in visit order.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Decoupled decay: each step scales weights by `1 - lr * decay`.
    pub weight_decay: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay: 0.0,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>) {
        self.steps += 1;
        let lr = self.learning_rate;
        let kind = self.kind;
        let t = self.steps as i32;
        let shrink = T::from_f64(1.0 - lr * self.weight_decay);
        let decay = self.weight_decay > 0.0;
        let mut slot = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        net.visit_params(&mut |p| {
            if first.len() <= slot {
                first.push(vec![T::ZERO; p.value.len()]);
                second.push(vec![T::ZERO; p.value.len()]);
            }
            if decay {
                for w in p.value.iter_mut() {
                    *w *= shrink;
                }
            }
            let m = &mut first[slot];
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::from_f64(momentum);
                    let lr = T::from_f64(lr);
                    for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                        *v = *v * mu + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v2 = &mut second[slot];
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let step = T::from_f64(lr * c2.sqrt() / c1);
                    let eps = T::from_f64(eps * c2.sqrt());
                    for (((w, &g), a), b) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v2.iter_mut()) {
                        *a = *a * b1 + g * (T::ONE - b1);
                        *b = *b * b2 + g * g * (T::ONE - b2);
                        *w -= step * *a / (b.sqrt() + eps);
                    }
                }
            }
            slot += 1;
        });
    }
}

/// Sum over outputs of the masked mean squared error, and its gradient.
///
/// `mask[i * outputs + j]` selects which targets count; each output's error
/// is averaged over the samples where it is present.
pub fn masked_mse<T: Real>(pred: &Tensor<T>, target: &[T], mask: &[bool]) -> (f64, Tensor<T>) {
    let n = pred.batch();
    let k = pred.sample_len();
    let mut counts = vec![0usize; k];
    for i in 0..n {
        for j in 0..k {
            if mask[i * k + j] {
                counts[j] += 1;
            }
        }
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape);
    for i in 0..n {
        for j in 0..k {
            let idx = i * k + j;
            if !mask[idx] {
                continue;
            }
            let c = counts[j] as f64;
            let d = pred.data[idx] - target[idx];
            loss += d.to_f64() * d.to_f64() / c;
            grad.data[idx] = d * T::from_f64(2.0 / c);
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect())
    }

    /// Compares analytic gradients of every parameter tensor (a sample of
    /// entries each) with central differences.
    fn gradient_check(backbone: Backbone, input: [usize; 3], batch: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net: Network<f64> = Network::new(&backbone, input, 8, 3);
        let x = random_batch(&mut rng, [batch, input[0], input[1], input[2]]);
        let target: Vec<f64> = (0..batch * 8).map(|_| rng.random::<f64>()).collect();
        let mask: Vec<bool> = (0..batch * 8).map(|i| i % 5 != 4).collect();

        net.zero_grad();
        let out = net.forward(&x, true);
        let (_, g) = masked_mse(&out, &target, &mask);
        net.backward(&g);
        let mut analytic: Vec<Vec<f64>> = Vec::new();
        net.visit_params(&mut |p| analytic.push(p.grad.clone()));

        // Batch norm mixes samples, so the loss is evaluated in training mode.
        let loss = |net: &mut Network<f64>| {
            let mut probe = net.clone();
            let out = probe.forward(&x, true);
            masked_mse(&out, &target, &mask).0
        };
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (slot, grads) in analytic.iter().enumerate() {
            let picks: Vec<usize> = (0..6).map(|_| rng.random_range(0..grads.len())).collect();
            for idx in picks {
                let bump = |net: &mut Network<f64>, delta: f64| {
                    let mut k = 0;
                    net.visit_params(&mut |p| {
                        if k == slot {
                            p.value[idx] += delta;
                        }
                        k += 1;
                    });
                };
                bump(&mut net, eps);
                let up = loss(&mut net);
                bump(&mut net, -2.0 * eps);
                let down = loss(&mut net);
                bump(&mut net, eps);
                let numeric = (up - down) / (2.0 * eps);
                let a = grads[idx];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-3, "slot {slot} idx {idx}: analytic {a} numeric {numeric}");
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences_strided() {
        gradient_check(Backbone::Strided { widths: vec![4, 6] }, [6, 16, 16], 10);
    }

    #[test]
    fn gradients_match_finite_differences_residual() {
        gradient_check(Backbone::ResNet18 { width: 2 }, [6, 32, 32], 3);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv: Conv2d<f64> = Conv2d::new(2, 3, 3, 2, 1, true, &mut rng);
        conv.b.value = vec![0.1, -0.2, 0.3];
        let x = random_batch(&mut rng, [2, 2, 7, 6]);
        let y = conv.forward(&x, false);
        let (oh, ow) = conv.out_size(7, 6);
        assert_eq!(y.shape, [2, 3, oh, ow]);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = conv.b.value[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * 2 + c) * 3 + ky) * 3 + kx];
                                    s += wv * x.data[((n * 2 + c) * 7 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                        let got = y.data[((n * 3 + o) * oh + oy) * ow + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn desk_encoder_shapes() {
        let mut net: Network<f32> = Network::new(&Backbone::desk(), [6, 224, 224], 8, 0);
        let Some(Layer::Linear(first_fc)) = net.layers.iter().find(|l| matches!(l, Layer::Linear(_))) else {
            panic!("no head");
        };
        assert_eq!(first_fc.inputs, 32 * 7 * 7);
        let x = Tensor::zeros([2, 6, 224, 224]);
        assert_eq!(net.forward(&x, false).shape, [2, 8, 1, 1]);
    }

    #[test]
    fn state_round_trip() {
        let mut a: Network<f32> = Network::new(&Backbone::ResNet18 { width: 2 }, [6, 32, 32], 8, 1);
        let mut b: Network<f32> = Network::new(&Backbone::ResNet18 { width: 2 }, [6, 32, 32], 8, 2);
        let s = a.state();
        assert!(b.set_state(&s));
        assert_eq!(b.state(), s);
        assert!(!b.set_state(&s[1..]));
    }
}
