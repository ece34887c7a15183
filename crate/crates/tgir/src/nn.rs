//! Minimal CPU neural-net kernels for the patch denoiser: CHW tensors,
//! zero-padded 3x3 convolutions, linear layers, ReLU, and Adam.
//!
//! Parallel paths write disjoint output planes and merge per-sample
//! gradients in index order, so results are bit-identical to the sequential
//! loop at any thread count.

use rayon::prelude::*;

/// Channel-major (CHW) f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[oc] = bias[oc] + sum_ic conv(in[ic], w[oc][ic])` with zero padding.
/// Weights are laid out `[out_c][in_c][3][3]`.
pub fn conv3x3_forward(weight: &[f32], bias: &[f32], in_c: usize, out_c: usize, x: &Tensor3) -> Tensor3 {
    assert_eq!(x.c, in_c);
    assert_eq!(weight.len(), out_c * in_c * 9);
    assert_eq!(bias.len(), out_c);
    let (h, w) = (x.h, x.w);
    let mut out = Tensor3::zeros(out_c, h, w);
    out.data.par_chunks_mut(h * w).enumerate().for_each(|(oc, plane)| {
        plane.fill(bias[oc]);
        for ic in 0..in_c {
            let src = x.plane(ic);
            let wbase = (oc * in_c + ic) * 9;
            for ky in 0..3usize {
                let y_lo = 1usize.saturating_sub(ky);
                let y_hi = (h + 1).saturating_sub(ky).min(h);
                for kx in 0..3usize {
                    let cw = weight[wbase + ky * 3 + kx];
                    if cw == 0.0 {
                        continue;
                    }
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1).saturating_sub(kx).min(w);
                    for y in y_lo..y_hi {
                        let src_row = (y + ky - 1) * w;
                        let dst_row = y * w;
                        for xx in x_lo..x_hi {
                            plane[dst_row + xx] += cw * src[src_row + xx + kx - 1];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Backward pass of the 3x3 convolution: accumulates weight and bias
/// gradients into the provided slices and returns the input gradient.
pub fn conv3x3_backward(
    weight: &[f32],
    in_c: usize,
    out_c: usize,
    x: &Tensor3,
    gout: &Tensor3,
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
) -> Tensor3 {
    let (h, w) = (x.h, x.w);
    assert_eq!(gout.c, out_c);
    assert_eq!((gout.h, gout.w), (h, w));

    // Weight/bias gradients: parallel over output channels, each task owns
    // its own weight block.
    grad_weight.par_chunks_mut(in_c * 9).zip(grad_bias.par_iter_mut()).enumerate().for_each(
        |(oc, (gw, gb))| {
            let go = gout.plane(oc);
            *gb += go.iter().sum::<f32>();
            for ic in 0..in_c {
                let src = x.plane(ic);
                for ky in 0..3usize {
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1).saturating_sub(ky).min(h);
                    for kx in 0..3usize {
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1).saturating_sub(kx).min(w);
                        let mut acc = 0.0f32;
                        for y in y_lo..y_hi {
                            let src_row = (y + ky - 1) * w;
                            let go_row = y * w;
                            for xx in x_lo..x_hi {
                                acc += go[go_row + xx] * src[src_row + xx + kx - 1];
                            }
                        }
                        gw[ic * 9 + ky * 3 + kx] += acc;
                    }
                }
            }
        },
    );

    // Input gradient: scatter each output-gradient plane back through the
    // kernels, parallel over input channels.
    let mut gin = Tensor3::zeros(in_c, h, w);
    gin.data.par_chunks_mut(h * w).enumerate().for_each(|(ic, plane)| {
        for oc in 0..out_c {
            let go = gout.plane(oc);
            let wbase = (oc * in_c + ic) * 9;
            for ky in 0..3usize {
                let y_lo = 1usize.saturating_sub(ky);
                let y_hi = (h + 1).saturating_sub(ky).min(h);
                for kx in 0..3usize {
                    let cw = weight[wbase + ky * 3 + kx];
                    if cw == 0.0 {
                        continue;
                    }
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1).saturating_sub(kx).min(w);
                    for y in y_lo..y_hi {
                        let go_row = y * w;
                        let gin_row = (y + ky - 1) * w;
                        for xx in x_lo..x_hi {
                            plane[gin_row + xx + kx - 1] += cw * go[go_row + xx];
                        }
                    }
                }
            }
        }
    });
    gin
}

/// `out = W x + b`, weights `[out_f][in_f]`.
pub fn linear_forward(weight: &[f32], bias: &[f32], in_f: usize, out_f: usize, x: &[f32]) -> Vec<f32> {
    assert_eq!(x.len(), in_f);
    assert_eq!(weight.len(), out_f * in_f);
    (0..out_f)
        .map(|o| {
            let row = &weight[o * in_f..(o + 1) * in_f];
            bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
        })
        .collect()
}

/// Backward for a linear layer whose input is constant (the time features):
/// only parameter gradients are needed.
pub fn linear_backward_params(
    in_f: usize,
    out_f: usize,
    x: &[f32],
    gout: &[f32],
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
) {
    assert_eq!(gout.len(), out_f);
    for o in 0..out_f {
        grad_bias[o] += gout[o];
        let row = &mut grad_weight[o * in_f..(o + 1) * in_f];
        for (gw, v) in row.iter_mut().zip(x) {
            *gw += gout[o] * v;
        }
    }
}

pub fn relu_inplace(t: &mut Tensor3) {
    for v in t.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given the pre-activation values.
pub fn relu_backward(pre: &Tensor3, gout: &mut Tensor3) {
    for (g, p) in gout.data.iter_mut().zip(pre.data.iter()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Sinusoidal step embedding: `[sin(t w_0), cos(t w_0), ...]` with
/// geometrically spaced frequencies.
pub fn time_features(t: usize, dim: usize) -> Vec<f32> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin() as f32);
        out.push(arg.cos() as f32);
    }
    out
}

/// Adam over a flat f32 parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f32, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Adam over f64 slices, used by the texel-space optimizer baseline.
#[derive(Debug, Clone)]
pub struct AdamF64 {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamF64 {
    pub fn new(lr: f64, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (in_c, out_c, h, w) = (3, 4, 6, 5);
        let weight: Vec<f32> = (0..out_c * in_c * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..out_c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = rand_tensor(&mut rng, in_c, h, w);
        let out = conv3x3_forward(&weight, &bias, in_c, out_c, &x);
        for oc in 0..out_c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..in_c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y as isize + ky - 1;
                                let sx = xx as isize + kx - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = weight[(oc * in_c + ic) * 9 + (ky * 3 + kx) as usize];
                                acc += wv * x.plane(ic)[sy as usize * w + sx as usize];
                            }
                        }
                    }
                    let got = out.plane(oc)[y * w + xx];
                    assert!((got - acc).abs() < 1e-4, "({oc},{y},{xx}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (in_c, out_c, h, w) = (2, 3, 5, 4);
        let weight: Vec<f32> = (0..out_c * in_c * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bias: Vec<f32> = (0..out_c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = rand_tensor(&mut rng, in_c, h, w);
        // Scalar loss: outputs dotted with fixed random weights.
        let lw: Vec<f32> = (0..out_c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |weight: &[f32], bias: &[f32], x: &Tensor3| -> f32 {
            let out = conv3x3_forward(weight, bias, in_c, out_c, x);
            out.data.iter().zip(&lw).map(|(o, l)| o * l).sum()
        };
        let gout = Tensor3::from_vec(out_c, h, w, lw.clone());
        let mut gw = vec![0.0f32; weight.len()];
        let mut gb = vec![0.0f32; bias.len()];
        let gin = conv3x3_backward(&weight, in_c, out_c, &x, &gout, &mut gw, &mut gb);

        let h_fd = 1e-2f32;
        for i in (0..weight.len()).step_by(17) {
            let mut wp = weight.clone();
            wp[i] += h_fd;
            let mut wm = weight.clone();
            wm[i] -= h_fd;
            let fd = (loss(&wp, &bias, &x) - loss(&wm, &bias, &x)) / (2.0 * h_fd);
            assert!((fd - gw[i]).abs() < 2e-2, "w[{i}]: fd {fd} vs {}", gw[i]);
        }
        for i in (0..x.data.len()).step_by(13) {
            let mut xp = x.clone();
            xp.data[i] += h_fd;
            let mut xm = x.clone();
            xm.data[i] -= h_fd;
            let fd = (loss(&weight, &bias, &xp) - loss(&weight, &bias, &xm)) / (2.0 * h_fd);
            assert!((fd - gin.data[i]).abs() < 2e-2, "x[{i}]: fd {fd} vs {}", gin.data[i]);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = vec![5.0f32, -3.0];
        let mut adam = Adam::new(0.1, 2);
        for _ in 0..500 {
            let grads: Vec<f32> = params.iter().map(|p| 2.0 * p).collect();
            adam.step(&mut params, &grads);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2), "{params:?}");
    }

    #[test]
    fn time_features_are_bounded_and_distinct() {
        let a = time_features(1, 32);
        let b = time_features(900, 32);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
