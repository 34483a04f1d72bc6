//! Same-padded 2-D convolution with hand-written backward pass.

use rand::Rng;

use crate::tensor::TensorField;

/// Weights laid out `(out, in, k, k)`; padding `k / 2` keeps spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Unfolded receptive fields (`im2col`): row `(i, ky, kx)` holds the input
/// channel `i` shifted by `(ky - k/2, kx - k/2)`, zero outside the image.
pub(crate) struct Columns {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Columns {
    pub fn new(input: &TensorField, kernel: usize) -> Self {
        let (c, h, w) = input.shape();
        let n = h * w;
        let p = (kernel / 2) as isize;
        let mut data = vec![0.0; c * kernel * kernel * n];
        for ch in 0..c {
            let src = input.channel(ch);
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = ((ch * kernel + ky) * kernel + kx) * n;
                    let (dy, dx) = (ky as isize - p, kx as isize - p);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        // destination x range whose source x = x + dx is inside
                        let lo = (-dx).max(0) as usize;
                        let hi = (w as isize - dx).min(w as isize) as usize;
                        let s0 = sy as usize * w;
                        let d0 = row + y * w;
                        for x in lo..hi {
                            data[d0 + x] = src[s0 + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        Self { h, w, data }
    }

    fn rows(&self) -> usize {
        self.data.len() / (self.h * self.w)
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n` given as strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover every index reached with the given strides
    // (checked by the callers' shapes); `c` is exclusively borrowed.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Weights of one output channel.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Uniform `(-bound, bound)` draws for the given output channel, in layout order.
    pub(crate) fn fill_filter(&mut self, out: usize, bound: f64, rng: &mut impl Rng) {
        let n = self.filter_len();
        for w in &mut self.weight[out * n..(out + 1) * n] {
            *w = rng.random_range(-bound..bound);
        }
    }

    /// Weight for output `o`, input `i` at kernel offset `(ky, kx)`.
    #[inline]
    pub fn weight_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&self, input: &TensorField) -> TensorField {
        let (_, h, w) = input.shape();
        self.forward_columns(&Columns::new(input, self.kernel), h, w)
    }

    pub(crate) fn forward_columns(&self, cols: &Columns, h: usize, w: usize) -> TensorField {
        let (n, r) = (h * w, self.filter_len());
        assert_eq!(cols.rows(), r, "column matrix does not match the filter");
        let mut out = TensorField::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            out.channel_mut(o).fill(self.bias[o]);
        }
        gemm_acc(self.out_channels, r, n, &self.weight, r, 1, &cols.data, n, 1, out.data_mut());
        out
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `want_input` is set.
    pub(crate) fn backward_columns(
        &self,
        cols: &Columns,
        grad_out: &TensorField,
        grads: &mut Conv2d,
        want_input: bool,
    ) -> Option<TensorField> {
        let (_, h, w) = grad_out.shape();
        let (n, r, k) = (h * w, self.filter_len(), self.kernel);
        let g = grad_out.data();
        for o in 0..self.out_channels {
            grads.bias[o] += grad_out.channel(o).iter().sum::<f64>();
        }
        // dW += G * C^T
        gemm_acc(self.out_channels, n, r, g, n, 1, &cols.data, 1, n, &mut grads.weight);
        if !want_input {
            return None;
        }
        // dC = W^T * G, then fold the shifted rows back onto the input grid
        let mut dcols = vec![0.0; r * n];
        gemm_acc(r, self.out_channels, n, &self.weight, 1, r, g, n, 1, &mut dcols);
        let p = (k / 2) as isize;
        let mut out = TensorField::zeros(self.in_channels, h, w);
        for i in 0..self.in_channels {
            let plane = out.channel_mut(i);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &dcols[((i * k + ky) * k + kx) * n..][..n];
                    let (dy, dx) = (ky as isize - p, kx as isize - p);
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = sy as usize * w;
                        for x in lo..hi {
                            plane[s0 + (x as isize + dx) as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
        Some(out)
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}
