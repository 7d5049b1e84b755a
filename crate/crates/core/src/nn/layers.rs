//! Convolution and dense layers over flat parameter slices.
//!
//! Layers own only their geometry and the offsets of their weights inside
//! a network's flat parameter vector, so optimizers, EMA updates and
//! finite-difference checks all operate on plain `&[f64]`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        (in_h, in_w): (usize, usize),
        offset: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return None;
        }
        Some(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
            offset,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let (w, b) = self.split_mut(params);
        for v in w {
            let z: f64 = StandardNormal.sample(rng);
            *v = z * std;
        }
        b.fill(0.0);
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let p = &params[self.offset..self.offset + self.param_len()];
        p.split_at(self.weight_len())
    }

    fn split_mut<'a>(&self, params: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let p = &mut params[self.offset..self.offset + self.param_len()];
        p.split_at_mut(self.weight_len())
    }

    /// Valid output index range `[lo, hi)` for kernel tap `k` along an axis.
    #[inline]
    fn tap_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // input = o * stride + k - padding must lie in [0, in_len)
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride)
        };
        let hi_num = in_len + self.padding;
        let hi = if hi_num > k {
            ((hi_num - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Linear response (no activation).
    pub fn forward(&self, params: &[f64], input: &[f64], out: &mut [f64]) {
        let (w, b) = self.split(params);
        let (oh, ow, ih, iw) = (self.out_h, self.out_w, self.in_h, self.in_w);
        let k = self.kernel;
        for o in 0..self.out_channels {
            let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
            out_o.fill(b[o]);
            for c in 0..self.in_channels {
                let in_c = &input[c * ih * iw..(c + 1) * ih * iw];
                for ky in 0..k {
                    let (y_lo, y_hi) = self.tap_range(ky, ih, oh);
                    for kx in 0..k {
                        let wv = w[((o * self.in_channels + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x_lo, x_hi) = self.tap_range(kx, iw, ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * self.stride + ky - self.padding;
                            let row_in = &in_c[iy * iw..(iy + 1) * iw];
                            let row_out = &mut out_o[oy * ow..(oy + 1) * ow];
                            for ox in x_lo..x_hi {
                                let ix = ox * self.stride + kx - self.padding;
                                row_out[ox] += wv * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (when given) and writes
    /// the input gradient into `d_input` (when given).
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        d_out: &[f64],
        grads: Option<&mut [f64]>,
        d_input: Option<&mut [f64]>,
    ) {
        let (oh, ow, ih, iw) = (self.out_h, self.out_w, self.in_h, self.in_w);
        let k = self.kernel;
        if let Some(grads) = grads {
            let (gw, gb) = self.split_mut(grads);
            for o in 0..self.out_channels {
                let d_o = &d_out[o * oh * ow..(o + 1) * oh * ow];
                gb[o] += d_o.iter().sum::<f64>();
                for c in 0..self.in_channels {
                    let in_c = &input[c * ih * iw..(c + 1) * ih * iw];
                    for ky in 0..k {
                        let (y_lo, y_hi) = self.tap_range(ky, ih, oh);
                        for kx in 0..k {
                            let (x_lo, x_hi) = self.tap_range(kx, iw, ow);
                            let mut acc = 0.0;
                            for oy in y_lo..y_hi {
                                let iy = oy * self.stride + ky - self.padding;
                                let row_in = &in_c[iy * iw..(iy + 1) * iw];
                                let row_d = &d_o[oy * ow..(oy + 1) * ow];
                                for ox in x_lo..x_hi {
                                    acc += row_d[ox] * row_in[ox * self.stride + kx - self.padding];
                                }
                            }
                            gw[((o * self.in_channels + c) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }
        if let Some(d_input) = d_input {
            let (w, _) = self.split(params);
            d_input.fill(0.0);
            for o in 0..self.out_channels {
                let d_o = &d_out[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..self.in_channels {
                    let d_c = &mut d_input[c * ih * iw..(c + 1) * ih * iw];
                    for ky in 0..k {
                        let (y_lo, y_hi) = self.tap_range(ky, ih, oh);
                        for kx in 0..k {
                            let wv = w[((o * self.in_channels + c) * k + ky) * k + kx];
                            let (x_lo, x_hi) = self.tap_range(kx, iw, ow);
                            for oy in y_lo..y_hi {
                                let iy = oy * self.stride + ky - self.padding;
                                let row_d = &d_o[oy * ow..(oy + 1) * ow];
                                let row_in = &mut d_c[iy * iw..(iy + 1) * iw];
                                for ox in x_lo..x_hi {
                                    row_in[ox * self.stride + kx - self.padding] += wv * row_d[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub offset: usize,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, offset: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            offset,
        }
    }

    pub fn param_len(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// Normal init with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut Rng) {
        let std = gain / (self.in_dim as f64).sqrt();
        let (w, b) = self.split_mut(params);
        for v in w {
            let z: f64 = StandardNormal.sample(rng);
            *v = z * std;
        }
        b.fill(0.0);
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        self.split(params).0
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        self.split(params).1
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let p = &params[self.offset..self.offset + self.param_len()];
        p.split_at(self.in_dim * self.out_dim)
    }

    fn split_mut<'a>(&self, params: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let p = &mut params[self.offset..self.offset + self.param_len()];
        p.split_at_mut(self.in_dim * self.out_dim)
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let (w, b) = self.split(params);
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        d_out: &[f64],
        grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        if let Some(grads) = grads {
            let (gw, gb) = self.split_mut(grads);
            for (o, &d) in d_out.iter().enumerate() {
                gb[o] += d;
                for (g, x) in gw[o * self.in_dim..(o + 1) * self.in_dim].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
        }
        let (w, _) = self.split(params);
        let mut d_in = vec![0.0; self.in_dim];
        for (o, &d) in d_out.iter().enumerate() {
            for (di, a) in d_in.iter_mut().zip(&w[o * self.in_dim..(o + 1) * self.in_dim]) {
                *di += d * a;
            }
        }
        d_in
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the (post-ReLU) activation is not positive.
pub fn relu_backward_in_place(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Two-layer perceptron `Linear -> [BatchNorm] -> ReLU -> Linear`.
///
/// With batch normalization the hidden layer is normalized with the
/// statistics of the batch being processed, so the batched entry points
/// must be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    /// Offset of the `gamma | beta` block when batch-normalized.
    pub norm: Option<usize>,
    pub output: Linear,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// Cached values of a batched forward pass; rows are samples.
#[derive(Debug, Clone)]
pub struct MlpBatchTrace {
    pub inputs: Vec<Vec<f64>>,
    /// Normalized pre-activations (`x_hat`), present with batch norm.
    pub normalized: Vec<Vec<f64>>,
    pub inv_std: Vec<f64>,
    /// Post-ReLU hidden activations.
    pub hidden: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, offset: usize) -> Self {
        Self::with_norm(in_dim, hidden_dim, out_dim, false, offset)
    }

    pub fn with_norm(in_dim: usize, hidden_dim: usize, out_dim: usize, batch_norm: bool, offset: usize) -> Self {
        let hidden = Linear::new(in_dim, hidden_dim, offset);
        let after_hidden = offset + hidden.param_len();
        let norm = batch_norm.then_some(after_hidden);
        let out_offset = after_hidden + if batch_norm { 2 * hidden_dim } else { 0 };
        let output = Linear::new(hidden_dim, out_dim, out_offset);
        Self { hidden, norm, output }
    }

    pub fn param_len(&self) -> usize {
        self.end() - self.hidden.offset
    }

    pub fn end(&self) -> usize {
        self.output.offset + self.output.param_len()
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng) {
        self.hidden.init(params, 2f64.sqrt(), rng);
        if let Some(at) = self.norm {
            let h = self.hidden.out_dim;
            params[at..at + h].fill(1.0);
            params[at + h..at + 2 * h].fill(0.0);
        }
        self.output.init(params, 1.0, rng);
    }

    /// Single-sample forward pass; only valid without batch norm.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> MlpTrace {
        assert!(self.norm.is_none(), "batch-normalized MLP needs forward_batch");
        let mut hidden = self.hidden.forward(params, input);
        relu_in_place(&mut hidden);
        let output = self.output.forward(params, &hidden);
        MlpTrace {
            input: input.to_vec(),
            hidden,
            output,
        }
    }

    pub fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        d_out: &[f64],
        mut grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let mut d_hidden = self
            .output
            .backward(params, &trace.hidden, d_out, grads.as_deref_mut());
        relu_backward_in_place(&trace.hidden, &mut d_hidden);
        self.hidden.backward(params, &trace.input, &d_hidden, grads)
    }

    pub fn forward_batch(&self, params: &[f64], inputs: &[Vec<f64>]) -> MlpBatchTrace {
        let b = inputs.len();
        let h = self.hidden.out_dim;
        let mut pre: Vec<Vec<f64>> = inputs.iter().map(|x| self.hidden.forward(params, x)).collect();
        let mut normalized = Vec::new();
        let mut inv_std = Vec::new();
        if let Some(at) = self.norm {
            let (gamma, beta) = params[at..at + 2 * h].split_at(h);
            let mut mean = vec![0.0; h];
            for row in &pre {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / b as f64);
            }
            let mut var = vec![0.0; h];
            for row in &pre {
                for j in 0..h {
                    var[j] += (row[j] - mean[j]).powi(2) / b as f64;
                }
            }
            inv_std = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
            for row in &mut pre {
                let xh: Vec<f64> = (0..h).map(|j| (row[j] - mean[j]) * inv_std[j]).collect();
                for j in 0..h {
                    row[j] = gamma[j] * xh[j] + beta[j];
                }
                normalized.push(xh);
            }
        }
        for row in &mut pre {
            relu_in_place(row);
        }
        let outputs = pre.iter().map(|a| self.output.forward(params, a)).collect();
        MlpBatchTrace {
            inputs: inputs.to_vec(),
            normalized,
            inv_std,
            hidden: pre,
            outputs,
        }
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to every input row.
    pub fn backward_batch(
        &self,
        params: &[f64],
        trace: &MlpBatchTrace,
        d_out: &[Vec<f64>],
        mut grads: Option<&mut [f64]>,
    ) -> Vec<Vec<f64>> {
        let b = trace.inputs.len();
        let h = self.hidden.out_dim;
        let mut d_hidden: Vec<Vec<f64>> = trace
            .hidden
            .iter()
            .zip(d_out)
            .map(|(a, d)| {
                let mut g = self.output.backward(params, a, d, grads.as_deref_mut());
                relu_backward_in_place(a, &mut g);
                g
            })
            .collect();
        if let Some(at) = self.norm {
            let gamma = &params[at..at + h];
            let mut d_gamma = vec![0.0; h];
            let mut d_beta = vec![0.0; h];
            let mut sum_dxh = vec![0.0; h];
            let mut sum_dxh_xh = vec![0.0; h];
            for (dy, xh) in d_hidden.iter().zip(&trace.normalized) {
                for j in 0..h {
                    d_gamma[j] += dy[j] * xh[j];
                    d_beta[j] += dy[j];
                    let dxh = dy[j] * gamma[j];
                    sum_dxh[j] += dxh;
                    sum_dxh_xh[j] += dxh * xh[j];
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                for j in 0..h {
                    g[at + j] += d_gamma[j];
                    g[at + h + j] += d_beta[j];
                }
            }
            let bf = b as f64;
            for (dy, xh) in d_hidden.iter_mut().zip(&trace.normalized) {
                for j in 0..h {
                    let dxh = dy[j] * gamma[j];
                    dy[j] = trace.inv_std[j] / bf * (bf * dxh - sum_dxh[j] - xh[j] * sum_dxh_xh[j]);
                }
            }
        }
        trace
            .inputs
            .iter()
            .zip(&d_hidden)
            .map(|(x, d)| self.hidden.backward(params, x, d, grads.as_deref_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    /// Central finite difference of `f` w.r.t. `params[i]`.
    fn fd(f: &dyn Fn(&[f64]) -> f64, params: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut p = params.to_vec();
        p[i] += h;
        let up = f(&p);
        p[i] -= 2.0 * h;
        let down = f(&p);
        (up - down) / (2.0 * h)
    }

    fn assert_close(a: f64, b: f64, what: &str) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        assert!(rel < 1e-5, "{what}: analytic {a} vs numeric {b}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (stride, padding) in [(1, 0), (2, 1), (1, 1)] {
            let conv = Conv2d::new(2, 3, 3, stride, padding, (7, 6), 0).unwrap();
            let mut rng = from_seed(stride as u64 + 10 * padding as u64);
            let mut params = vec![0.0; conv.param_len()];
            conv.init(&mut params, &mut rng);
            for b in &mut params[conv.weight_len()..] {
                *b = 0.1;
            }
            let input: Vec<f64> = (0..conv.in_len()).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4).collect();
            let probe: Vec<f64> = (0..conv.out_len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let loss = |p: &[f64], x: &[f64]| {
                let mut out = vec![0.0; conv.out_len()];
                conv.forward(p, x, &mut out);
                out.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut grads = vec![0.0; conv.param_len()];
            let mut d_in = vec![0.0; conv.in_len()];
            conv.backward(&params, &input, &probe, Some(&mut grads), Some(&mut d_in));
            for i in 0..conv.param_len() {
                let num = fd(&|p| loss(p, &input), &params, i);
                assert_close(grads[i], num, &format!("param {i}"));
            }
            for i in 0..conv.in_len() {
                let num = fd(&|x| loss(&params, x), &input, i);
                assert_close(d_in[i], num, &format!("input {i}"));
            }
        }
    }

    #[test]
    fn conv_output_geometry() {
        let c = Conv2d::new(1, 4, 3, 2, 1, (64, 64), 0).unwrap();
        assert_eq!((c.out_h, c.out_w), (32, 32));
        let c = Conv2d::new(1, 4, 5, 2, 2, (208, 256), 0).unwrap();
        assert_eq!((c.out_h, c.out_w), (104, 128));
        assert!(Conv2d::new(1, 1, 5, 1, 0, (3, 3), 0).is_none());
    }

    #[test]
    fn batch_norm_mlp_gradients_match_finite_differences() {
        let mlp = Mlp::with_norm(3, 5, 2, true, 0);
        let mut params = vec![0.0; mlp.param_len()];
        mlp.init(&mut params, &mut from_seed(4));
        for (i, p) in params[mlp.norm.unwrap()..mlp.output.offset].iter_mut().enumerate() {
            *p += 0.1 * (i as f64 % 3.0 - 1.0);
        }
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..3).map(|c| ((r * 7 + c * 3) % 5) as f64 * 0.4 - 0.8).collect())
            .collect();
        let probe: Vec<Vec<f64>> = (0..4).map(|r| vec![1.0 - r as f64 * 0.3, 0.5 + r as f64]).collect();
        let loss = |p: &[f64], xs: &[Vec<f64>]| {
            let t = mlp.forward_batch(p, xs);
            t.outputs.iter().zip(&probe).map(|(o, q)| o.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
        };
        let t = mlp.forward_batch(&params, &xs);
        let mut grads = vec![0.0; mlp.param_len()];
        let d_in = mlp.backward_batch(&params, &t, &probe, Some(&mut grads));
        for i in 0..params.len() {
            assert_close(grads[i], fd(&|p| loss(p, &xs), &params, i), &format!("bn param {i}"));
        }
        for r in 0..4 {
            for c in 0..3 {
                let f = |v: &[f64]| {
                    let mut x = xs.clone();
                    x[r][c] = v[0];
                    loss(&params, &x)
                };
                assert_close(d_in[r][c], fd(&f, &[xs[r][c]], 0), &format!("bn input {r},{c}"));
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mlp = Mlp::new(4, 6, 3, 0);
        let mut params = vec![0.0; mlp.param_len()];
        mlp.init(&mut params, &mut from_seed(3));
        let x = [0.3, -0.7, 1.1, 0.2];
        let probe = [1.0, -2.0, 0.5];
        let loss = |p: &[f64]| {
            let t = mlp.forward(p, &x);
            t.output.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads = vec![0.0; mlp.param_len()];
        let t = mlp.forward(&params, &x);
        mlp.backward(&params, &t, &probe, Some(&mut grads));
        for i in 0..params.len() {
            assert_close(grads[i], fd(&loss, &params, i), &format!("mlp param {i}"));
        }
    }
}
