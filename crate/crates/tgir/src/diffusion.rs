//! DDPM machinery: the noise schedule, forward noising, the reverse step,
//! the clean-state estimate, and the denoiser abstraction. A closed-form
//! Gaussian-prior denoiser doubles as an exact oracle in tests and as the
//! desk-scale prior for solves.

use crate::error::{Error, Result};
use crate::uvfield::UvField;

pub const DEFAULT_STEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Per-step schedule constants for `t = 1..=T`, derived from a linear beta
/// ramp. `alpha_bar` is strictly decreasing; `sigma` is the reverse-step
/// posterior noise scale with `sigma_1 = 0`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidInput(format!("schedule needs T >= 2, got {steps}")));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut sigmas = Vec::with_capacity(steps);
        let mut bar = 1.0;
        for i in 0..steps {
            let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64;
            let alpha = 1.0 - beta;
            let prev_bar = bar;
            bar *= alpha;
            betas.push(beta);
            alphas.push(alpha);
            alpha_bars.push(bar);
            // sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, with
            // abar_0 = 1 so the final step is deterministic.
            sigmas.push(((1.0 - prev_bar) / (1.0 - bar) * beta).sqrt());
        }
        Ok(Self { betas, alphas, alpha_bars, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }
}

/// Forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn q_sample(x0: &UvField, t: usize, noise: &UvField, sched: &DiffusionSchedule) -> UvField {
    assert!(x0.same_dims(noise), "q_sample shape mismatch");
    let ab = sched.alpha_bar(t);
    let (s0, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, n)| s0 * x + sn * n).collect();
    UvField::from_vec(x0.height(), x0.width(), x0.channels(), data).expect("finite q_sample")
}

/// Clean-state estimate from a noisy state and a noise prediction:
/// `xhat_t = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn estimate_x0(x_t: &UvField, t: usize, eps_hat: &UvField, sched: &DiffusionSchedule) -> UvField {
    assert!(x_t.same_dims(eps_hat), "estimate_x0 shape mismatch");
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(x, e)| (x - sn * e) / sa).collect();
    UvField::from_vec(x_t.height(), x_t.width(), x_t.channels(), data).expect("finite estimate")
}

/// One ancestral reverse step:
/// `x_{t-1} = (x_t - (1 - alpha_t)/sqrt(1 - abar_t) eps) / sqrt(alpha_t) + sigma_t z`.
/// `z` is ignored at `t = 1` where `sigma` is zero.
pub fn reverse_step(
    x_t: &UvField,
    t: usize,
    eps_hat: &UvField,
    z: &UvField,
    sched: &DiffusionSchedule,
) -> UvField {
    assert!(x_t.same_dims(eps_hat) && x_t.same_dims(z), "reverse_step shape mismatch");
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t) };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((x, e), n)| inv_sqrt_alpha * (x - coef * e) + sigma * n)
        .collect();
    UvField::from_vec(x_t.height(), x_t.width(), x_t.channels(), data).expect("finite reverse step")
}

/// A noise predictor: given a noisy state, the step index, and a 2-channel
/// UV-coordinate condition field, produce the predicted noise at the same
/// shape. Implementations must be deterministic and resolution-agnostic.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &UvField, t: usize, cond: &UvField, sched: &DiffusionSchedule) -> UvField;

    /// Per-channel diagonal of `d xhat_t / d x_t` when a closed form exists.
    /// `None` means callers fall back to the local approximation
    /// `1 / sqrt(abar_t)`.
    fn x0_jacobian_diag(&self, _t: usize, _sched: &DiffusionSchedule) -> Option<Vec<f64>> {
        None
    }
}

/// Mean of a Gaussian prior: either one value per channel (resolution
/// agnostic) or a full field.
#[derive(Debug, Clone)]
pub enum GaussianMean {
    PerChannel(Vec<f64>),
    Field(UvField),
}

/// Exact denoiser for an independent Gaussian prior `N(mu, s2)` per channel.
/// The posterior mean of `x0` given `x_t` is available in closed form, which
/// makes this both a test oracle and a usable desk-scale prior.
#[derive(Debug, Clone)]
pub struct GaussianPriorDenoiser {
    mu: GaussianMean,
    s2: Vec<f64>,
}

impl GaussianPriorDenoiser {
    pub fn new(mu: GaussianMean, s2: Vec<f64>) -> Result<Self> {
        if s2.is_empty() || s2.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("prior variance must be positive".into()));
        }
        Ok(Self { mu, s2 })
    }

    fn s2_for(&self, channel: usize) -> f64 {
        if self.s2.len() == 1 {
            self.s2[0]
        } else {
            self.s2[channel]
        }
    }
}

/// Closed-form noise prediction under a Gaussian prior: the posterior mean
/// is `m = (s2 sqrt(abar) x + (1 - abar) mu) / (abar s2 + 1 - abar)` and
/// `eps = (x - sqrt(abar) m) / sqrt(1 - abar)`.
pub fn gaussian_denoiser_eps(
    x_t: &UvField,
    t: usize,
    mu: &GaussianMean,
    s2: &[f64],
    sched: &DiffusionSchedule,
) -> UvField {
    let ab = sched.alpha_bar(t);
    let sa = ab.sqrt();
    let sn = (1.0 - ab).sqrt();
    let c = x_t.channels();
    if let GaussianMean::Field(f) = mu {
        assert!(f.same_dims(x_t), "gaussian mean field shape mismatch");
    }
    let s2_for = |ch: usize| if s2.len() == 1 { s2[0] } else { s2[ch] };
    let data = x_t
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| {
            let ch = idx % c;
            let mu_v = match mu {
                GaussianMean::PerChannel(m) => {
                    if m.len() == 1 {
                        m[0]
                    } else {
                        m[ch]
                    }
                }
                GaussianMean::Field(f) => f.data()[idx],
            };
            let s2v = s2_for(ch);
            let m = (s2v * sa * x + (1.0 - ab) * mu_v) / (ab * s2v + 1.0 - ab);
            (x - sa * m) / sn
        })
        .collect();
    UvField::from_vec(x_t.height(), x_t.width(), c, data).expect("finite eps")
}

impl Denoiser for GaussianPriorDenoiser {
    fn predict_noise(&self, x_t: &UvField, t: usize, _cond: &UvField, sched: &DiffusionSchedule) -> UvField {
        gaussian_denoiser_eps(x_t, t, &self.mu, &self.s2, sched)
    }

    fn x0_jacobian_diag(&self, t: usize, sched: &DiffusionSchedule) -> Option<Vec<f64>> {
        // xhat equals the posterior mean, so d xhat / d x_t is diagonal:
        // s2 sqrt(abar) / (abar s2 + 1 - abar) per channel.
        let ab = sched.alpha_bar(t);
        let sa = ab.sqrt();
        let n = self.s2.len().max(1);
        Some((0..n).map(|ch| self.s2_for(ch) * sa / (ab * self.s2_for(ch) + 1.0 - ab)).collect())
    }
}

/// The 2-channel UV-coordinate condition field at texel centers, values in
/// `(0, 1)`.
pub fn uv_condition_field(height: usize, width: usize) -> UvField {
    let mut data = Vec::with_capacity(height * width * 2);
    for v in 0..height {
        for u in 0..width {
            data.push((u as f64 + 0.5) / width as f64);
            data.push((v as f64 + 0.5) / height as f64);
        }
    }
    UvField::from_vec(height, width, 2, data).expect("finite uv field")
}
