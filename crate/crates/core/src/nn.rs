//! Minimal double-precision neural-network layers with explicit backward
//! passes, and the Adam optimizer.
//!
//! Every layer exposes `forward`, which returns its output together with the
//! cache that `backward` needs, and `backward`, which accumulates parameter
//! gradients into caller-provided buffers and returns the input gradient.
//! Convolutions lower to GEMM through an im2col buffer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named, shaped parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// He-uniform initialization for a weight with the given fan-in.
    pub fn he_uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Anything that owns an ordered list of parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Gradient buffers aligned with [`Module::params`].
    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Copies parameter values from `arrays`, matched by name and shape.
    fn load_params(&mut self, arrays: &[Param]) -> Result<()> {
        for p in self.params_mut() {
            let src = arrays
                .iter()
                .find(|a| a.name == p.name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing array `{}`", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("array `{}` has shape {:?}, expected {:?}", p.name, src.shape, p.shape),
                ));
            }
            p.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

pub fn add_grads(acc: &mut [Vec<f64>], other: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn scale_grads(grads: &mut [Vec<f64>], factor: f64) {
    for g in grads.iter_mut() {
        for x in g.iter_mut() {
            *x *= factor;
        }
    }
}

/// `C = A * B (+ C)`, with `A` m x k and `B` k x n after optional transposes.
/// Row-major storage throughout; `trans_a` means `a` holds `A^T` (k x m).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// 2-D convolution with square kernel, zero padding and uniform stride.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            weight: Param::he_uniform(format!("{name}.weight"), &[out_c, in_c, k, k], fan_in, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_c]),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        if k == 1 && s == 1 && p == 0 {
            return x.data.clone();
        }
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_c * k * k * n];
        for c in 0..self.in_c {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < x.w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], cache: &ConvCache) -> Tensor {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let (oh, ow) = (cache.out_h, cache.out_w);
        if k == 1 && s == 1 && p == 0 {
            return Tensor {
                c: self.in_c,
                h: cache.in_h,
                w: cache.in_w,
                data: cols.to_vec(),
            };
        }
        let n = oh * ow;
        let mut dx = Tensor::zeros(self.in_c, cache.in_h, cache.in_w);
        let (h, w) = (cache.in_h, cache.in_w);
        for c in 0..self.in_c {
            let plane = dx.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.output_size(x.h, x.w);
        let cols = self.im2col(x, oh, ow);
        let n = oh * ow;
        let rows = self.in_c * self.k * self.k;
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        for o in 0..self.out_c {
            y.plane_mut(o).fill(self.bias.data[o]);
        }
        gemm(self.out_c, rows, n, &self.weight.data, false, &cols, false, &mut y.data, true);
        let cache = ConvCache {
            cols,
            in_h: x.h,
            in_w: x.w,
            out_h: oh,
            out_w: ow,
        };
        (y, cache)
    }

    /// Accumulates into `gw`/`gb`; returns the input gradient when `want_dx`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Tensor,
        gw: &mut [f64],
        gb: &mut [f64],
        want_dx: bool,
    ) -> Option<Tensor> {
        let n = cache.out_h * cache.out_w;
        let rows = self.in_c * self.k * self.k;
        for o in 0..self.out_c {
            gb[o] += dy.plane(o).iter().sum::<f64>();
        }
        gemm(self.out_c, n, rows, &dy.data, false, &cache.cols, true, gw, true);
        if !want_dx {
            return None;
        }
        let mut dcols = vec![0.0; rows * n];
        gemm(rows, self.out_c, n, &self.weight.data, true, &dy.data, false, &mut dcols, false);
        Some(self.col2im(&dcols, cache))
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    /// Stored as `[in_c, out_c, 2, 2]`.
    pub weight: Param,
    pub bias: Param,
    pub in_c: usize,
    pub out_c: usize,
}

#[derive(Debug)]
pub struct UpCache {
    input: Tensor,
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng + ?Sized>(name: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        ConvTranspose2x2 {
            weight: Param::he_uniform(format!("{name}.weight"), &[in_c, out_c, 2, 2], in_c, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_c]),
            in_c,
            out_c,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, UpCache) {
        let hw = x.plane_len();
        let rows = self.out_c * 4;
        let mut packed = vec![0.0; rows * hw];
        gemm(rows, self.in_c, hw, &self.weight.data, true, &x.data, false, &mut packed, false);
        let (oh, ow) = (x.h * 2, x.w * 2);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        for o in 0..self.out_c {
            let b = self.bias.data[o];
            for a in 0..2 {
                for bx in 0..2 {
                    let src = &packed[(o * 4 + a * 2 + bx) * hw..][..hw];
                    for i in 0..x.h {
                        for j in 0..x.w {
                            *y.at_mut(o, 2 * i + a, 2 * j + bx) = src[i * x.w + j] + b;
                        }
                    }
                }
            }
        }
        (y, UpCache { input: x.clone() })
    }

    pub fn backward(&self, cache: &UpCache, dy: &Tensor, gw: &mut [f64], gb: &mut [f64]) -> Tensor {
        let x = &cache.input;
        let hw = x.plane_len();
        let rows = self.out_c * 4;
        let mut packed = vec![0.0; rows * hw];
        for o in 0..self.out_c {
            gb[o] += dy.plane(o).iter().sum::<f64>();
            for a in 0..2 {
                for bx in 0..2 {
                    let dst = &mut packed[(o * 4 + a * 2 + bx) * hw..][..hw];
                    for i in 0..x.h {
                        for j in 0..x.w {
                            dst[i * x.w + j] = dy.at(o, 2 * i + a, 2 * j + bx);
                        }
                    }
                }
            }
        }
        gemm(self.in_c, hw, rows, &x.data, false, &packed, true, gw, true);
        let mut dx = Tensor::zeros(self.in_c, x.h, x.w);
        gemm(self.in_c, rows, hw, &self.weight.data, false, &packed, false, &mut dx.data, false);
        dx
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::he_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.bias.data.clone();
        gemm(self.out_dim, self.in_dim, 1, &self.weight.data, false, x, false, &mut y, true);
        y
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        for (g, d) in gb.iter_mut().zip(dy) {
            *g += d;
        }
        gemm(self.out_dim, 1, self.in_dim, dy, false, x, false, gw, true);
        let mut dx = vec![0.0; self.in_dim];
        gemm(self.in_dim, self.out_dim, 1, &self.weight.data, true, dy, false, &mut dx, false);
        dx
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the post-activation `out` is not positive.
pub fn relu_backward_inplace(out: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn leaky_relu(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| if x > 0.0 { x } else { LEAKY_SLOPE * x })
        .collect()
}

/// `pre` is the pre-activation input.
pub fn leaky_relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        if x <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Param]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.output_size(x.h, x.w);
        let mut y = Tensor::zeros(conv.out_c, oh, ow);
        for o in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.data[o];
                    for c in 0..conv.in_c {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * conv.in_c + c) * conv.k + ky) * conv.k + kx;
                                acc += conv.weight.data[wi] * x.at(c, iy as usize, ix as usize);
                            }
                        }
                    }
                    *y.at_mut(o, oy, ox) = acc;
                }
            }
        }
        y
    }

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = substream(seed, "t");
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = substream(1, "conv");
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let mut conv = Conv2d::new("c", 3, 4, k, s, p, &mut rng);
            conv.bias.data = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(3, 7, 6, 2);
            let (y, _) = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Loss = sum(y * r) for fixed random r, so dL/dy = r.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = substream(3, "conv");
        let conv = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = random_tensor(2, 6, 5, 4);
        let (y, cache) = conv.forward(&x);
        let r = random_tensor(y.c, y.h, y.w, 5);
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x).0.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; conv.bias.len()];
        let dx = conv.backward(&cache, &r, &mut gw, &mut gb, true).unwrap();
        let h = 1e-6;
        for i in [0, 7, 20, 53] {
            let mut c2 = conv.clone();
            c2.weight.data[i] += h;
            let up = loss(&c2, &x);
            c2.weight.data[i] -= 2.0 * h;
            let dn = loss(&c2, &x);
            assert!(((up - dn) / (2.0 * h) - gw[i]).abs() < 1e-7);
        }
        for i in [0, 13, 41] {
            let mut x2 = x.clone();
            x2.data[i] += h;
            let up = loss(&conv, &x2);
            x2.data[i] -= 2.0 * h;
            let dn = loss(&conv, &x2);
            assert!(((up - dn) / (2.0 * h) - dx.data[i]).abs() < 1e-7);
        }
        let total: f64 = r.data.chunks(y.plane_len()).next().unwrap().iter().sum();
        assert!((gb[0] - total).abs() < 1e-12);
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = substream(6, "up");
        let up = ConvTranspose2x2::new("u", 3, 2, &mut rng);
        let x = random_tensor(3, 3, 4, 7);
        let (y, cache) = up.forward(&x);
        assert_eq!((y.c, y.h, y.w), (2, 6, 8));
        let r = random_tensor(2, 6, 8, 8);
        let loss = |up: &ConvTranspose2x2, x: &Tensor| -> f64 {
            up.forward(x).0.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; up.weight.len()];
        let mut gb = vec![0.0; up.bias.len()];
        let dx = up.backward(&cache, &r, &mut gw, &mut gb);
        let h = 1e-6;
        for i in [0, 5, 17, 23] {
            let mut u2 = up.clone();
            u2.weight.data[i] += h;
            let a = loss(&u2, &x);
            u2.weight.data[i] -= 2.0 * h;
            let b = loss(&u2, &x);
            assert!(((a - b) / (2.0 * h) - gw[i]).abs() < 1e-7);
        }
        for i in [0, 11, 35] {
            let mut x2 = x.clone();
            x2.data[i] += h;
            let a = loss(&up, &x2);
            x2.data[i] -= 2.0 * h;
            let b = loss(&up, &x2);
            assert!(((a - b) / (2.0 * h) - dx.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward() {
        let mut rng = substream(9, "lin");
        let lin = Linear::new("l", 4, 3, &mut rng);
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let dy = vec![1.0, -2.0, 0.5];
        let mut gw = vec![0.0; 12];
        let mut gb = vec![0.0; 3];
        let dx = lin.backward(&x, &dy, &mut gw, &mut gb);
        assert_eq!(gb, dy);
        assert_eq!(gw[4 + 2], dy[1] * x[2]);
        let want: f64 = (0..3).map(|o| lin.weight.data[o * 4 + 1] * dy[o]).sum();
        assert!((dx[1] - want).abs() < 1e-14);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Param {
            name: "x".into(),
            shape: vec![2],
            data: vec![3.0, -2.0],
        };
        let mut opt = Adam::new(0.1, &[&p]);
        for _ in 0..500 {
            let g = vec![p.data.iter().map(|x| 2.0 * x).collect::<Vec<_>>()];
            opt.step(vec![&mut p], &g);
        }
        assert!(p.data.iter().all(|x| x.abs() < 1e-2));
    }
}
