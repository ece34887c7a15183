//! Order-2 real spherical harmonics and Lambertian shading.
//!
//! Coefficient vectors hold 27 values in basis-major layout, `index = 3b + c`
//! for basis `b` in band order `Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21,
//! Y22` and channel `c` in RGB. Shading may legitimately go negative: the
//! texel-grid light expresses local dark lights, so nothing clamps here.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::uvfield::UvField;

pub const BASIS_COUNT: usize = 9;
pub const COEFF_COUNT: usize = 27;

/// Band index of each basis function.
pub const BASIS_BAND: [usize; BASIS_COUNT] = [0, 1, 1, 1, 2, 2, 2, 2, 2];

/// Lambertian transfer coefficients per band: convolution of the clamped
/// cosine kernel, `B_0 = pi`, `B_1 = 2pi/3`, `B_2 = pi/4`.
pub const LAMBERT_BAND: [f64; 3] = [PI, 2.0 * PI / 3.0, PI / 4.0];

const Y00: f64 = 0.282_094_791_773_878_14;
const Y1: f64 = 0.488_602_511_902_919_9;
const Y2_CROSS: f64 = 1.092_548_430_592_079_2;
const Y20: f64 = 0.315_391_565_252_520_05;
const Y22: f64 = 0.546_274_215_296_039_6;

/// A 27-vector of SH lighting coefficients (9 basis functions x RGB).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShCoeffs(pub [f64; COEFF_COUNT]);

impl ShCoeffs {
    pub fn zeros() -> Self {
        Self([0.0; COEFF_COUNT])
    }

    /// DC-only lighting with the given per-channel band-0 coefficients.
    pub fn dc(rgb: [f64; 3]) -> Self {
        let mut c = [0.0; COEFF_COUNT];
        c[0..3].copy_from_slice(&rgb);
        Self(c)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != COEFF_COUNT {
            return Err(Error::DimMismatch(format!("expected 27 coefficients, got {}", values.len())));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite SH coefficients".into()));
        }
        let mut c = [0.0; COEFF_COUNT];
        c.copy_from_slice(values);
        Ok(Self(c))
    }

    #[inline]
    pub fn get(&self, basis: usize, channel: usize) -> f64 {
        self.0[3 * basis + channel]
    }

    pub fn add(&self, other: &ShCoeffs) -> ShCoeffs {
        let mut out = self.0;
        for (o, v) in out.iter_mut().zip(other.0.iter()) {
            *o += v;
        }
        ShCoeffs(out)
    }

    pub fn scale(&self, s: f64) -> ShCoeffs {
        let mut out = self.0;
        for o in out.iter_mut() {
            *o *= s;
        }
        ShCoeffs(out)
    }

    /// Serialize as a 1x1x27 field.
    pub fn as_field(&self) -> UvField {
        UvField::from_vec(1, 1, COEFF_COUNT, self.0.to_vec()).expect("finite coeffs")
    }
}

/// Evaluate the 9 order-2 basis functions at a unit direction. Inputs off
/// unit length are renormalized (flagged in debug builds).
pub fn sh_basis(n: [f64; 3]) -> [f64; BASIS_COUNT] {
    let len2 = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
    let [x, y, z] = if (len2 - 1.0).abs() > 1e-6 {
        if cfg!(debug_assertions) {
            log::debug!("sh_basis: renormalizing input of length {}", len2.sqrt());
        }
        let inv = 1.0 / len2.sqrt().max(1e-12);
        [n[0] * inv, n[1] * inv, n[2] * inv]
    } else {
        n
    };
    [
        Y00,
        Y1 * y,
        Y1 * z,
        Y1 * x,
        Y2_CROSS * x * y,
        Y2_CROSS * y * z,
        Y20 * (3.0 * z * z - 1.0),
        Y2_CROSS * x * z,
        Y22 * (x * x - y * y),
    ]
}

/// Lambertian SH shading of one texel:
/// `c_ch = (a_ch / pi) * sum_b B_band(b) * gamma[3b + ch] * Y_b(n)`.
#[inline]
pub fn shade_texel(albedo: [f64; 3], n: [f64; 3], gamma: &ShCoeffs) -> [f64; 3] {
    let basis = sh_basis(n);
    shade_texel_with_basis(albedo, &basis, gamma)
}

/// Shading with a precomputed basis evaluation (hot path of the renderer).
#[inline]
pub fn shade_texel_with_basis(albedo: [f64; 3], basis: &[f64; BASIS_COUNT], gamma: &ShCoeffs) -> [f64; 3] {
    let mut irradiance = [0.0f64; 3];
    for b in 0..BASIS_COUNT {
        let w = LAMBERT_BAND[BASIS_BAND[b]] * basis[b];
        irradiance[0] += w * gamma.0[3 * b];
        irradiance[1] += w * gamma.0[3 * b + 1];
        irradiance[2] += w * gamma.0[3 * b + 2];
    }
    [
        albedo[0] / PI * irradiance[0],
        albedo[1] / PI * irradiance[1],
        albedo[2] / PI * irradiance[2],
    ]
}

/// Irradiance-only variant without albedo and without the 1/pi factor:
/// `s_ch = sum_b B_band(b) * gamma[3b + ch] * Y_b(n)`. Used by the
/// negative-shading regularizer.
#[inline]
pub fn shading_no_albedo(basis: &[f64; BASIS_COUNT], gamma: &ShCoeffs) -> [f64; 3] {
    let mut s = [0.0f64; 3];
    for b in 0..BASIS_COUNT {
        let w = LAMBERT_BAND[BASIS_BAND[b]] * basis[b];
        s[0] += w * gamma.0[3 * b];
        s[1] += w * gamma.0[3 * b + 1];
        s[2] += w * gamma.0[3 * b + 2];
    }
    s
}

/// Dense shading: applies `shade_texel` at every texel with a per-texel
/// coefficient provider. Deterministic, identical to the naive loop.
pub fn shade_field(
    albedo: &UvField,
    normals: &UvField,
    mut gamma_at: impl FnMut(usize, usize) -> ShCoeffs,
) -> Result<UvField> {
    if albedo.channels() != 3 || normals.channels() != 3 {
        return Err(Error::DimMismatch("shade_field needs 3-channel albedo and normals".into()));
    }
    if (albedo.height(), albedo.width()) != (normals.height(), normals.width()) {
        return Err(Error::DimMismatch(format!(
            "albedo {}x{} vs normals {}x{}",
            albedo.height(),
            albedo.width(),
            normals.height(),
            normals.width()
        )));
    }
    let (h, w) = (albedo.height(), albedo.width());
    let mut out = UvField::zeros(h, w, 3);
    for v in 0..h {
        for u in 0..w {
            let a = albedo.texel(u, v);
            let n = normals.texel(u, v);
            let c = shade_texel([a[0], a[1], a[2]], [n[0], n[1], n[2]], &gamma_at(u, v));
            out.texel_mut(u, v).copy_from_slice(&c);
        }
    }
    Ok(out)
}
