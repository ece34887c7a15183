//! Dense UV-space fields: the carrier type for textures, masks, normal maps
//! and reflectance stacks.
//!
//! A field is a `height x width x channels` grid of finite `f64` values in
//! row-major, channel-interleaved order. Values are linear (non-gamma)
//! unless the field is a mask. Fields are immutable in the hot paths and
//! safe to share across threads.

use crate::error::{Error, Result};

/// Channel layout of a reflectance stack.
pub const ALBEDO_CHANNELS: std::ops::Range<usize> = 0..3;
pub const NORMAL_CHANNELS: std::ops::Range<usize> = 3..6;
pub const SPECULAR_CHANNEL: usize = 6;
pub const STACK_CHANNELS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct UvField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl UvField {
    /// Constant-filled field.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "degenerate field dims");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Build from raw row-major channel-interleaved data. Rejects length
    /// mismatches and non-finite values.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput("field dims must be positive".into()));
        }
        let expect = height * width * channels;
        if data.len() != expect {
            return Err(Error::DimMismatch(format!(
                "data length {} != {}x{}x{} = {}",
                data.len(),
                height,
                width,
                channels,
                expect
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("field contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &UvField) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        debug_assert!(u < self.width && v < self.height);
        (v * self.width + u) * self.channels
    }

    /// Channel slice of the texel at integer coordinates `(u, v)`.
    #[inline]
    pub fn texel(&self, u: usize, v: usize) -> &[f64] {
        let i = self.index(u, v);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn texel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = self.index(u, v);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Bilinear sample at continuous coordinates, texel centers at
    /// `(i + 0.5, j + 0.5)`, edge-clamped. Out-of-range coordinates clamp
    /// rather than error.
    pub fn bilinear_sample(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_sample_into(u, v, &mut out);
        out
    }

    pub fn bilinear_sample_into(&self, u: f64, v: f64, out: &mut [f64]) {
        assert_eq!(out.len(), self.channels);
        let (x0, x1, fx) = axis_taps(u, self.width);
        let (y0, y1, fy) = axis_taps(v, self.height);
        let t00 = self.texel(x0, y0);
        let t10 = self.texel(x1, y0);
        let t01 = self.texel(x0, y1);
        let t11 = self.texel(x1, y1);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for c in 0..self.channels {
            out[c] = w00 * t00[c] + w10 * t10[c] + w01 * t01[c] + w11 * t11[c];
        }
    }

    /// Copy a contiguous channel range into a new field.
    pub fn extract_channels(&self, range: std::ops::Range<usize>) -> UvField {
        assert!(range.end <= self.channels);
        let nc = range.len();
        let mut data = Vec::with_capacity(self.height * self.width * nc);
        for texel in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&texel[range.clone()]);
        }
        UvField { height: self.height, width: self.width, channels: nc, data }
    }

    /// Overwrite a contiguous channel range from a field of matching dims.
    pub fn set_channels(&mut self, range: std::ops::Range<usize>, src: &UvField) {
        assert!(range.end <= self.channels);
        assert_eq!(src.channels, range.len());
        assert_eq!((src.height, src.width), (self.height, self.width));
        let nc = self.channels;
        for (dst, s) in self.data.chunks_exact_mut(nc).zip(src.data.chunks_exact(src.channels)) {
            dst[range.clone()].copy_from_slice(s);
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> UvField {
        UvField {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean value of one channel over texels where `mask > 0.5`.
    pub fn masked_channel_mean(&self, channel: usize, mask: &UvField) -> Result<f64> {
        assert!(channel < self.channels);
        if (mask.height, mask.width) != (self.height, self.width) || mask.channels != 1 {
            return Err(Error::DimMismatch("mask dims do not match field".into()));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (texel, m) in self.data.chunks_exact(self.channels).zip(mask.data.iter()) {
            if *m > 0.5 {
                sum += texel[channel];
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("mask selects no texels"));
        }
        Ok(sum / n as f64)
    }
}

/// One-axis bilinear taps for a length-`n` axis with samples at `i + 0.5`:
/// returns the two clamped texel indices and the interpolation fraction.
#[inline]
pub(crate) fn axis_taps(coord: f64, n: usize) -> (usize, usize, f64) {
    let x = coord - 0.5;
    if x <= 0.0 || n == 1 {
        return (0, 0, 0.0);
    }
    let last = (n - 1) as f64;
    if x >= last {
        return (n - 1, n - 1, 0.0);
    }
    let i0 = x.floor() as usize;
    (i0, i0 + 1, x - i0 as f64)
}

/// A 7-channel UV field: `[albedo r,g,b | detail normal x,y,z | specular]`.
/// The jointly-sampled state variable of the posterior sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceStack(UvField);

impl ReflectanceStack {
    pub fn new(field: UvField) -> Result<Self> {
        if field.channels() != STACK_CHANNELS {
            return Err(Error::DimMismatch(format!(
                "reflectance stack must have {} channels, got {}",
                STACK_CHANNELS,
                field.channels()
            )));
        }
        Ok(Self(field))
    }

    pub fn field(&self) -> &UvField {
        &self.0
    }

    pub fn field_mut(&mut self) -> &mut UvField {
        &mut self.0
    }

    pub fn into_field(self) -> UvField {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn albedo(&self) -> UvField {
        self.0.extract_channels(ALBEDO_CHANNELS)
    }

    pub fn detail_normal(&self) -> UvField {
        self.0.extract_channels(NORMAL_CHANNELS)
    }

    pub fn specular(&self) -> UvField {
        self.0.extract_channels(SPECULAR_CHANNEL..SPECULAR_CHANNEL + 1)
    }

    /// Post-sampling cleanup: clamp albedo and specular to `[0, 1]` and
    /// renormalize the detail-normal channels to unit vectors. Degenerate
    /// normals fall back to +z.
    pub fn finalize(&mut self) {
        let c = self.0.channels();
        for texel in self.0.data_mut().chunks_exact_mut(c) {
            for ch in ALBEDO_CHANNELS {
                texel[ch] = texel[ch].clamp(0.0, 1.0);
            }
            texel[SPECULAR_CHANNEL] = texel[SPECULAR_CHANNEL].clamp(0.0, 1.0);
            let n = &mut texel[NORMAL_CHANNELS];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 1e-9 {
                n[0] /= len;
                n[1] /= len;
                n[2] /= len;
            } else {
                n.copy_from_slice(&[0.0, 0.0, 1.0]);
            }
        }
    }

    /// Mean albedo over texels where `mask > 0.5`; the skin-tone descriptor
    /// used for reference selection.
    pub fn tone(&self, mask: &UvField) -> Result<[f64; 3]> {
        Ok([
            self.0.masked_channel_mean(0, mask)?,
            self.0.masked_channel_mean(1, mask)?,
            self.0.masked_channel_mean(2, mask)?,
        ])
    }
}
