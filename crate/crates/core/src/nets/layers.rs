//! Layer primitives with hand-written backward passes.
//!
//! Parameters live in one flat buffer owned by the model; each layer only
//! records its offsets. Backward passes accumulate into an optional gradient
//! buffer of the same length, so a frozen network can propagate input
//! gradients without ever touching parameter storage.

use crate::real::Real;

use super::tensor::Tensor;

/// Offset and shape of one named parameter tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight initialisation scheme, resolved when the flat buffer is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Constant(f64),
}

#[derive(Debug, Default)]
pub(crate) struct LayoutBuilder {
    pub specs: Vec<ParamSpec>,
    pub inits: Vec<Init>,
    pub total: usize,
}

impl LayoutBuilder {
    pub fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let spec = ParamSpec {
            name,
            shape,
            offset,
        };
        self.total += spec.len();
        self.specs.push(spec);
        self.inits.push(init);
        offset
    }
}

fn accumulate_bias<T: Real>(grads: &mut [T], offset: usize, dy: &Tensor<T>) {
    for c in 0..dy.channels {
        grads[offset + c] += dy.channel(c).iter().copied().sum::<T>();
    }
}

/// Square convolution, stride 1, zero "same" padding. Kernel size 1 or 3.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    weight: usize,
    bias: usize,
}

pub(crate) struct ConvCache<T> {
    col: Vec<T>,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn new(
        layout: &mut LayoutBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "unsupported kernel size");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = layout.push(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            Init::Normal((2.0 / fan_in).sqrt()),
        );
        let bias = layout.push(format!("{name}.bias"), vec![out_channels], Init::Constant(0.0));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>) -> Vec<T> {
        let (h, w) = (x.height, x.width);
        let plane = h * w;
        if self.kernel == 1 {
            return x.data.clone();
        }
        let mut col = vec![T::zero(); self.taps() * plane];
        for ci in 0..self.in_channels {
            let src = x.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 3 + ky) * 3 + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        match kx {
                            0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                            1 => drow.copy_from_slice(srow),
                            _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T], h: usize, w: usize) -> Tensor<T> {
        let plane = h * w;
        if self.kernel == 1 {
            return Tensor::from_vec(self.in_channels, h, w, col.to_vec());
        }
        let mut dx = Tensor::zeros(self.in_channels, h, w);
        for ci in 0..self.in_channels {
            let dst = dx.channel_mut(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 3 + ky) * 3 + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let crow = &src[y * w..(y + 1) * w];
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        let (d, c) = match kx {
                            0 => (&mut drow[..w - 1], &crow[1..]),
                            1 => (&mut drow[..], &crow[..]),
                            _ => (&mut drow[1..], &crow[..w - 1]),
                        };
                        for (a, b) in d.iter_mut().zip(c) {
                            *a += *b;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        debug_assert_eq!(x.channels, self.in_channels);
        let plane = x.plane();
        let col = self.im2col(x);
        let mut out = Tensor::zeros(self.out_channels, x.height, x.width);
        let wt = &params[self.weight..self.weight + self.out_channels * self.taps()];
        T::gemm(
            self.out_channels,
            self.taps(),
            plane,
            wt,
            false,
            &col,
            false,
            &mut out.data,
            false,
        );
        for co in 0..self.out_channels {
            let b = params[self.bias + co];
            for v in out.channel_mut(co) {
                *v += b;
            }
        }
        (
            out,
            ConvCache {
                col,
                height: x.height,
                width: x.width,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: Option<&mut [T]>,
        cache: ConvCache<T>,
        dy: &Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let plane = cache.height * cache.width;
        let taps = self.taps();
        if let Some(g) = grads {
            let gw = &mut g[self.weight..self.weight + self.out_channels * taps];
            T::gemm(
                self.out_channels,
                plane,
                taps,
                &dy.data,
                false,
                &cache.col,
                true,
                gw,
                true,
            );
            accumulate_bias(g, self.bias, dy);
        }
        if !need_input_grad {
            return None;
        }
        let wt = &params[self.weight..self.weight + self.out_channels * taps];
        let mut dcol = cache.col;
        T::gemm(
            taps,
            self.out_channels,
            plane,
            wt,
            true,
            &dy.data,
            false,
            &mut dcol,
            false,
        );
        Some(self.col2im(&dcol, cache.height, cache.width))
    }
}

/// 2x2 stride-2 transposed convolution (the U-Net "up-conv").
#[derive(Debug, Clone)]
pub(crate) struct UpConv {
    pub in_channels: usize,
    pub out_channels: usize,
    weight: usize,
    bias: usize,
}

impl UpConv {
    pub fn new(
        layout: &mut LayoutBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        // Rows are (out_channel, dy, dx), columns input channels.
        let weight = layout.push(
            format!("{name}.weight"),
            vec![out_channels, 2, 2, in_channels],
            Init::Normal((2.0 / in_channels as f64).sqrt()),
        );
        let bias = layout.push(format!("{name}.bias"), vec![out_channels], Init::Constant(0.0));
        Self {
            in_channels,
            out_channels,
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (h, w) = (x.height, x.width);
        let plane = h * w;
        let rows = self.out_channels * 4;
        let wt = &params[self.weight..self.weight + rows * self.in_channels];
        let mut z = vec![T::zero(); rows * plane];
        T::gemm(rows, self.in_channels, plane, wt, false, &x.data, false, &mut z, false);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        for co in 0..self.out_channels {
            let b = params[self.bias + co];
            let dst = out.channel_mut(co);
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let src = &z[(co * 4 + d) * plane..(co * 4 + d + 1) * plane];
                for i in 0..h {
                    for j in 0..w {
                        dst[(2 * i + dy) * ow + 2 * j + dx] = src[i * w + j] + b;
                    }
                }
            }
        }
        (out, x.clone())
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: Option<&mut [T]>,
        input: Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (h, w) = (input.height, input.width);
        let plane = h * w;
        let rows = self.out_channels * 4;
        let ow = 2 * w;
        let mut dz = vec![T::zero(); rows * plane];
        for co in 0..self.out_channels {
            let src = dy.channel(co);
            for d in 0..4 {
                let (ddy, ddx) = (d / 2, d % 2);
                let dst = &mut dz[(co * 4 + d) * plane..(co * 4 + d + 1) * plane];
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = src[(2 * i + ddy) * ow + 2 * j + ddx];
                    }
                }
            }
        }
        if let Some(g) = grads {
            let gw = &mut g[self.weight..self.weight + rows * self.in_channels];
            T::gemm(rows, plane, self.in_channels, &dz, false, &input.data, true, gw, true);
            accumulate_bias(g, self.bias, dy);
        }
        let wt = &params[self.weight..self.weight + rows * self.in_channels];
        let mut dx = input;
        T::gemm(self.in_channels, rows, plane, wt, true, &dz, false, &mut dx.data, false);
        dx
    }
}

/// Group normalisation with per-channel affine parameters.
#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: usize,
    beta: usize,
}

pub(crate) struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut LayoutBuilder, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "groups must divide channels");
        let gamma = layout.push(format!("{name}.gamma"), vec![channels], Init::Constant(1.0));
        let beta = layout.push(format!("{name}.beta"), vec![channels], Init::Constant(0.0));
        Self {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    fn group_range(&self, g: usize, plane: usize) -> std::ops::Range<usize> {
        let per = self.channels / self.groups;
        g * per * plane..(g + 1) * per * plane
    }

    pub fn forward<T: Real>(&self, params: &[T], mut x: Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let plane = x.plane();
        let per = self.channels / self.groups;
        let n = T::from_usize(per * plane).unwrap();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let seg = &mut x.data[self.group_range(g, plane)];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            for v in seg.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let xhat = x.clone();
        for c in 0..self.channels {
            let (gm, bt) = (params[self.gamma + c], params[self.beta + c]);
            for v in x.channel_mut(c) {
                *v = *v * gm + bt;
            }
        }
        (x, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        mut grads: Option<&mut [T]>,
        cache: NormCache<T>,
        mut dy: Tensor<T>,
    ) -> Tensor<T> {
        let plane = dy.plane();
        let per = self.channels / self.groups;
        let n = T::from_usize(per * plane).unwrap();
        for c in 0..self.channels {
            let xh = cache.xhat.channel(c);
            let dyc = dy.channel_mut(c);
            if let Some(g) = grads.as_deref_mut() {
                let mut dg = T::zero();
                let mut db = T::zero();
                for (&d, &xv) in dyc.iter().zip(xh) {
                    dg += d * xv;
                    db += d;
                }
                g[self.gamma + c] += dg;
                g[self.beta + c] += db;
            }
            let gm = params[self.gamma + c];
            for d in dyc.iter_mut() {
                *d *= gm;
            }
        }
        // dy now holds d(loss)/d(xhat).
        for g in 0..self.groups {
            let range = self.group_range(g, plane);
            let xh = &cache.xhat.data[range.clone()];
            let dxh = &mut dy.data[range];
            let sum_d = dxh.iter().copied().sum::<T>();
            let sum_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            let inv = cache.inv_std[g];
            for (d, &xv) in dxh.iter_mut().zip(xh) {
                *d = inv / n * (n * *d - sum_d - xv * sum_dx);
            }
        }
        dy
    }
}

pub(crate) fn relu_forward<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    x
}

pub(crate) fn relu_backward<T: Real>(output: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for (d, &y) in dy.data.iter_mut().zip(&output.data) {
        if y <= T::zero() {
            *d = T::zero();
        }
    }
    dy
}

/// 2x2 max pooling; ties resolve to the first element in raster order.
pub(crate) fn maxpool_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    let mut idx = vec![0u32; x.channels * h * w];
    for c in 0..x.channels {
        let src = x.channel(c);
        for i in 0..h {
            for j in 0..w {
                let mut best = (2 * i) * x.width + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = (2 * i + di) * x.width + 2 * j + dj;
                    if src[k] > src[best] {
                        best = k;
                    }
                }
                let o = c * h * w + i * w + j;
                out.data[o] = src[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool_backward<T: Real>(
    idx: &[u32],
    dy: &Tensor<T>,
    height: usize,
    width: usize,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.channels, height, width);
    let plane = dy.plane();
    for c in 0..dy.channels {
        let dst = dx.channel_mut(c);
        for (k, &d) in dy.channel(c).iter().enumerate() {
            dst[idx[c * plane + k] as usize] += d;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_params(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Checks d<probe, f(x)>/dx against central differences on a few coordinates.
    fn check_input_grad(
        f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
        analytic: &Tensor<f64>,
        x: &Tensor<f64>,
        probe: &Tensor<f64>,
    ) {
        let h = 1e-6;
        for k in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[k] += h;
            let mut xm = x.clone();
            xm.data[k] -= h;
            let fd = (dot(&f(&xp).data, &probe.data) - dot(&f(&xm).data, &probe.data)) / (2.0 * h);
            let an = analytic.data[k];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "coord {k}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layout = LayoutBuilder::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 3, 3);
        let params = random_params(layout.total, &mut rng);
        let x = random_tensor(2, 5, 6, &mut rng);
        let (y, _) = conv.forward(&params, &x);
        for co in 0..3 {
            for i in 0..5 {
                for j in 0..6 {
                    let mut acc = params[conv.bias + co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if si < 0 || sj < 0 || si >= 5 || sj >= 6 {
                                    continue;
                                }
                                let wv = params[conv.weight + ((co * 2 + ci) * 3 + ky) * 3 + kx];
                                acc += wv * x.channel(ci)[si as usize * 6 + sj as usize];
                            }
                        }
                    }
                    assert!((acc - y.channel(co)[i * 6 + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kernel in [1, 3] {
            let mut layout = LayoutBuilder::default();
            let conv = Conv2d::new(&mut layout, "c", 3, 2, kernel);
            let params = random_params(layout.total, &mut rng);
            let x = random_tensor(3, 4, 5, &mut rng);
            let probe = random_tensor(2, 4, 5, &mut rng);
            let (_, cache) = conv.forward(&params, &x);
            let mut grads = vec![0.0; layout.total];
            let dx = conv
                .backward(&params, Some(&mut grads), cache, &probe, true)
                .unwrap();
            check_input_grad(&|t| conv.forward(&params, t).0, &dx, &x, &probe);
            let h = 1e-6;
            for k in 0..layout.total {
                let mut pp = params.clone();
                pp[k] += h;
                let mut pm = params.clone();
                pm[k] -= h;
                let fd = (dot(&conv.forward(&pp, &x).0.data, &probe.data)
                    - dot(&conv.forward(&pm, &x).0.data, &probe.data))
                    / (2.0 * h);
                assert!((fd - grads[k]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn upconv_and_norm_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layout = LayoutBuilder::default();
        let up = UpConv::new(&mut layout, "u", 3, 2);
        let norm = GroupNorm::new(&mut layout, "n", 2, 1);
        let params = random_params(layout.total, &mut rng);
        let x = random_tensor(3, 3, 2, &mut rng);
        let probe = random_tensor(2, 6, 4, &mut rng);
        let f = |t: &Tensor<f64>| norm.forward(&params, up.forward(&params, t).0).0;
        let (u, inp) = up.forward(&params, &x);
        let (_, nc) = norm.forward(&params, u);
        let mut grads = vec![0.0; layout.total];
        let du = norm.backward(&params, Some(&mut grads), nc, probe.clone());
        let dx = up.backward(&params, Some(&mut grads), inp, &du);
        check_input_grad(&f, &dx, &x, &probe);
        let h = 1e-6;
        for k in 0..layout.total {
            let mut pp = params.clone();
            pp[k] += h;
            let mut pm = params.clone();
            pm[k] -= h;
            let eval = |p: &Vec<f64>| dot(&norm.forward(p, up.forward(p, &x).0).0.data, &probe.data);
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            assert!((fd - grads[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}");
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 2, 2, vec![0.1, 0.7, 0.7, -1.0]);
        let (y, idx) = maxpool_forward(&x);
        assert_eq!(y.data, vec![0.7]);
        let dx = maxpool_backward(&idx, &Tensor::from_vec(1, 1, 1, vec![2.0]), 2, 2);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }
}
