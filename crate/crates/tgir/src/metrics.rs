//! Image-quality metrics: PSNR (whole or masked), mean SSIM with an 11x11
//! Gaussian window, and mask IoU.

use crate::error::{Error, Result};
use crate::uvfield::UvField;

/// PSNR is capped here so identical inputs report a finite value.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Whole,
    Masked,
}

impl Region {
    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Whole => "whole",
            Region::Masked => "masked",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: Option<f64>,
    pub region: Region,
    pub pixel_count: usize,
}

/// `10 log10(1 / MSE)` over texels where the optional mask exceeds 0.5,
/// capped at [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr(a: &UvField, b: &UvField, mask: Option<&UvField>) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch("psnr inputs differ in shape".into()));
    }
    if let Some(m) = mask {
        if (m.height(), m.width()) != (a.height(), a.width()) || m.channels() != 1 {
            return Err(Error::DimMismatch("psnr mask shape mismatch".into()));
        }
    }
    let c = a.channels();
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, (ta, tb)) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)).enumerate() {
        if let Some(m) = mask {
            if m.data()[i] <= 0.5 {
                continue;
            }
        }
        for ch in 0..c {
            let d = ta[ch] - tb[ch];
            se += d * d;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("psnr mask selects no texels"));
    }
    let mse = se / (n * c) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as isize - half;
            let dy = y as isize - half;
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = g;
            sum += g;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all fully-contained 11x11 windows
/// (Gaussian weighted, sigma 1.5, k1 = 0.01, k2 = 0.03, dynamic range 1),
/// averaged across channels. Signals are expected in `[0, 1]`.
pub fn ssim(a: &UvField, b: &UvField) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch("ssim inputs differ in shape".into()));
    }
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} input, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let mut total = 0.0;
    let mut count = 0usize;
    for v0 in 0..=(h - SSIM_WINDOW) {
        for u0 in 0..=(w - SSIM_WINDOW) {
            for c in 0..ch {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = window[dy * SSIM_WINDOW + dx];
                        let xa = a.texel(u0 + dx, v0 + dy)[c];
                        let xb = b.texel(u0 + dx, v0 + dy)[c];
                        mu_a += wgt * xa;
                        mu_b += wgt * xb;
                        aa += wgt * xa * xa;
                        bb += wgt * xb * xb;
                        ab += wgt * xa * xb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `|a AND b| / |a OR b|` for binary masks; both-empty counts as 1.
pub fn mask_iou(a: &UvField, b: &UvField) -> Result<f64> {
    if !a.same_dims(b) || a.channels() != 1 {
        return Err(Error::DimMismatch("iou needs matching 1-channel masks".into()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_constant_offset_and_cap() {
        let a = UvField::filled(8, 8, 3, 0.4);
        let b = a.map(|v| v + 0.1);
        // MSE = 0.01 -> 20 dB.
        assert_relative_eq!(psnr(&a, &b, None).unwrap(), 20.0, max_relative = 1e-10);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data_a: Vec<f64> = (0..192).map(|_| rng.random_range(0.0..1.0)).collect();
        let data_b: Vec<f64> = (0..192).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = UvField::from_vec(8, 8, 3, data_a.clone()).unwrap();
        let b = UvField::from_vec(8, 8, 3, data_b.clone()).unwrap();
        let mse: f64 =
            data_a.iter().zip(&data_b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 192.0;
        assert_relative_eq!(psnr(&a, &b, None).unwrap(), 10.0 * (1.0 / mse).log10(), max_relative = 1e-12);
    }

    #[test]
    fn psnr_is_symmetric_and_masked_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = UvField::from_vec(4, 4, 1, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let b = UvField::from_vec(4, 4, 1, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        let empty = UvField::zeros(4, 4, 1);
        assert!(psnr(&a, &b, Some(&empty)).is_err());
        let mut mask = UvField::zeros(4, 4, 1);
        mask.texel_mut(1, 1)[0] = 1.0;
        let expected = {
            let d = a.texel(1, 1)[0] - b.texel(1, 1)[0];
            10.0 * (1.0 / (d * d)).log10()
        };
        assert_relative_eq!(psnr(&a, &b, Some(&mask)).unwrap(), expected.min(99.0), max_relative = 1e-12);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = UvField::filled(16, 16, 3, 0.5);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = a.map(|v| v + rng.random_range(-1.0..1.0) * sigma);
            let p = psnr(&a, &noisy, None).unwrap();
            assert!(p < last, "psnr should fall as noise grows");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let a = UvField::from_vec(
            16,
            16,
            3,
            (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-9);
        let b = a.map(|v| (v + 0.2).min(1.0));
        assert_relative_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn ssim_inverted_high_contrast_is_low() {
        // Checkerboard vs its inverse.
        let (h, w) = (16, 16);
        let mut data = Vec::with_capacity(h * w * 3);
        for v in 0..h {
            for u in 0..w {
                let x = ((u + v) % 2) as f64;
                data.extend_from_slice(&[x, x, x]);
            }
        }
        let a = UvField::from_vec(h, w, 3, data).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.2);
    }

    #[test]
    fn ssim_constant_shift_closed_form() {
        // Zero-variance fields: only the luminance term survives.
        let mu = 0.4;
        let delta = 0.2;
        let a = UvField::filled(12, 12, 3, mu);
        let b = UvField::filled(12, 12, 3, mu + delta);
        let c1 = 0.01f64.powi(2);
        let expect = (2.0 * mu * (mu + delta) + c1) / (mu * mu + (mu + delta) * (mu + delta) + c1);
        assert_relative_eq!(ssim(&a, &b).unwrap(), expect, max_relative = 1e-9);
    }

    #[test]
    fn ssim_rejects_small_inputs() {
        let a = UvField::zeros(8, 8, 3);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn iou_cases() {
        let ones = UvField::filled(4, 4, 1, 1.0);
        let zeros = UvField::zeros(4, 4, 1);
        assert_eq!(mask_iou(&ones, &ones).unwrap(), 1.0);
        assert_eq!(mask_iou(&zeros, &zeros).unwrap(), 1.0);
        // Disjoint masks.
        let mut a = UvField::zeros(4, 4, 1);
        let mut b = UvField::zeros(4, 4, 1);
        a.texel_mut(0, 0)[0] = 1.0;
        b.texel_mut(3, 3)[0] = 1.0;
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
        // Half-overlapping equal squares: 2x4 each, overlap 1x4 -> 4 / 12.
        let mut a = UvField::zeros(4, 4, 1);
        let mut b = UvField::zeros(4, 4, 1);
        for v in 0..4 {
            for u in 0..2 {
                a.texel_mut(u, v)[0] = 1.0;
                b.texel_mut(u + 1, v)[0] = 1.0;
            }
        }
        assert_relative_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0, max_relative = 1e-12);
    }
}
