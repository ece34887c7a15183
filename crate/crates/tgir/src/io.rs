//! Bit-exact file I/O for UV fields.
//!
//! The `UVF` container is the pipeline's interchange format: magic `UVF1`,
//! little-endian u32 `height`, `width`, `channels`, dtype code `0` (f32),
//! then the row-major channel-interleaved f32 payload. PNG (8/16-bit,
//! grayscale or RGB, linearly mapped to `[0, 1]`) is kept for masks and
//! human-viewable previews.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::uvfield::UvField;

pub const UVF_MAGIC: &[u8; 4] = b"UVF1";
pub const UVF_DTYPE_F32: u32 = 0;
/// Magic + three dims + dtype code.
pub const UVF_HEADER_LEN: usize = 20;

/// Write `bytes` to `path` atomically: a temp file in the same directory is
/// renamed into place, so an interrupted run never leaves a partial file
/// that parses successfully.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize a field into UVF container bytes.
pub fn uvf_bytes(field: &UvField) -> Vec<u8> {
    let mut out = Vec::with_capacity(UVF_HEADER_LEN + field.data().len() * 4);
    out.extend_from_slice(UVF_MAGIC);
    out.extend_from_slice(&(field.height() as u32).to_le_bytes());
    out.extend_from_slice(&(field.width() as u32).to_le_bytes());
    out.extend_from_slice(&(field.channels() as u32).to_le_bytes());
    out.extend_from_slice(&UVF_DTYPE_F32.to_le_bytes());
    for &v in field.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_uvf(field: &UvField, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidInput("empty output path".into()));
    }
    atomic_write(path, &uvf_bytes(field))
}

/// Decode UVF container bytes; `path` only labels errors.
pub fn uvf_from_bytes(bytes: &[u8], path: &str) -> Result<UvField> {
    if bytes.len() < UVF_HEADER_LEN {
        return Err(Error::Truncated { path: path.into(), need: UVF_HEADER_LEN, have: bytes.len() });
    }
    if &bytes[0..4] != UVF_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "UVF1" });
    }
    let rd = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let height = rd(4) as usize;
    let width = rd(8) as usize;
    let channels = rd(12) as usize;
    let dtype = rd(16);
    if dtype != UVF_DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::InvalidInput(format!("degenerate dims {height}x{width}x{channels} in {path}")));
    }
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::InvalidInput(format!("dim overflow in {path}")))?;
    let need = UVF_HEADER_LEN + count * 4;
    if bytes.len() < need {
        return Err(Error::Truncated { path: path.into(), need, have: bytes.len() });
    }
    let mut data = Vec::with_capacity(count);
    for chunk in bytes[UVF_HEADER_LEN..need].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    UvField::from_vec(height, width, channels, data)
}

pub fn read_uvf(path: &Path) -> Result<UvField> {
    let bytes = fs::read(path)?;
    uvf_from_bytes(&bytes, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

/// Read an 8/16-bit grayscale or RGB PNG; integer codes map linearly onto
/// `[0, 1]`. Other color types are rejected.
pub fn read_png(path: &Path) -> Result<UvField> {
    let img = image::open(path).map_err(|e| Error::UnsupportedPng(format!("{}: {e}", path.display())))?;
    use image::DynamicImage::*;
    let (h, w): (usize, usize) = (img.height() as usize, img.width() as usize);
    match img {
        ImageLuma8(buf) => {
            let data = buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            UvField::from_vec(h, w, 1, data)
        }
        ImageLuma16(buf) => {
            let data = buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            UvField::from_vec(h, w, 1, data)
        }
        ImageRgb8(buf) => {
            let data = buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            UvField::from_vec(h, w, 3, data)
        }
        ImageRgb16(buf) => {
            let data = buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            UvField::from_vec(h, w, 3, data)
        }
        other => Err(Error::UnsupportedPng(format!(
            "{}: color type {:?} (need 8/16-bit gray or rgb)",
            path.display(),
            other.color()
        ))),
    }
}

/// Write a 1- or 3-channel field as PNG at the requested bit depth, values
/// clamped to `[0, 1]` and quantized linearly.
pub fn write_png(field: &UvField, path: &Path, depth: PngDepth) -> Result<()> {
    let (h, w) = (field.height() as u32, field.width() as u32);
    let encode = |bytes: Vec<u8>, color: image::ExtendedColorType| -> Result<()> {
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(enc, &bytes, w, h, color)
            .map_err(|e| Error::UnsupportedPng(format!("{}: {e}", path.display())))?;
        atomic_write(path, &out)
    };
    let q8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let q16 = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    use image::ExtendedColorType as Ct;
    match (field.channels(), depth) {
        (1, PngDepth::Eight) => encode(field.data().iter().map(|&v| q8(v)).collect(), Ct::L8),
        (3, PngDepth::Eight) => encode(field.data().iter().map(|&v| q8(v)).collect(), Ct::Rgb8),
        (1, PngDepth::Sixteen) => {
            encode(field.data().iter().flat_map(|&v| q16(v).to_ne_bytes()).collect(), Ct::L16)
        }
        (3, PngDepth::Sixteen) => {
            encode(field.data().iter().flat_map(|&v| q16(v).to_ne_bytes()).collect(), Ct::Rgb16)
        }
        (c, _) => Err(Error::DimMismatch(format!("png export needs 1 or 3 channels, got {c}"))),
    }
}

/// Preview export: the one place gamma is applied. Linear values are
/// clamped, raised to 1/2.2 and written as 8-bit PNG.
pub fn write_png_preview(field: &UvField, path: &Path) -> Result<()> {
    let gamma = field.map(|v| v.clamp(0.0, 1.0).powf(1.0 / 2.2));
    write_png(&gamma, path, PngDepth::Eight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn uvf_roundtrip_small() {
        let d = tmpdir();
        let p = d.path().join("f.uvf");
        let f = UvField::filled(2, 2, 3, 0.5);
        write_uvf(&f, &p).unwrap();
        assert_eq!(read_uvf(&p).unwrap(), f);
    }

    #[test]
    fn uvf_header_layout() {
        // 3x5x2 field: header reads (3, 5, 2, 0); 1x1x1 file is a 20-byte
        // header plus one f32.
        let bytes = uvf_bytes(&UvField::zeros(3, 5, 2));
        assert_eq!(&bytes[0..4], b"UVF1");
        let rd = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        assert_eq!((rd(4), rd(8), rd(12), rd(16)), (3, 5, 2, 0));

        let one = uvf_bytes(&UvField::filled(1, 1, 1, 1.0));
        assert_eq!(one.len(), UVF_HEADER_LEN + 4);
        assert_eq!(&one[UVF_HEADER_LEN..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn uvf_decode_errors_are_distinct() {
        let d = tmpdir();
        let good = uvf_bytes(&UvField::filled(2, 2, 1, 0.25));

        let p = d.path().join("magic.uvf");
        let mut bad = good.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        atomic_write(&p, &bad).unwrap();
        assert!(matches!(read_uvf(&p), Err(Error::BadMagic { .. })));

        let p = d.path().join("trunc.uvf");
        atomic_write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_uvf(&p), Err(Error::Truncated { .. })));

        let p = d.path().join("dtype.uvf");
        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&7u32.to_le_bytes());
        atomic_write(&p, &bad).unwrap();
        assert!(matches!(read_uvf(&p), Err(Error::UnsupportedDtype(7))));
    }

    #[test]
    fn uvf_empty_path_errors() {
        assert!(write_uvf(&UvField::zeros(1, 1, 1), Path::new("")).is_err());
    }

    #[test]
    fn uvf_roundtrip_large_stack_bit_exact() {
        // Random f32-representable stack at full working size: the payload
        // must survive a write/read cycle with max abs diff 0.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 1024 * 1024 * 7;
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f32>() as f64).collect();
        let f = UvField::from_vec(1024, 1024, 7, data).unwrap();
        let d = tmpdir();
        let p = d.path().join("stack.uvf");
        write_uvf(&f, &p).unwrap();
        let g = read_uvf(&p).unwrap();
        assert_eq!(f, g);
        // And the serialized bytes are reproduced exactly.
        assert_eq!(uvf_bytes(&g), std::fs::read(&p).unwrap());
    }

    #[test]
    fn png16_extremes_and_png8_midpoint() {
        let d = tmpdir();
        let p = d.path().join("x.png");
        write_png(&UvField::filled(1, 2, 1, 1.0), &p, PngDepth::Sixteen).unwrap();
        assert_eq!(read_png(&p).unwrap().data()[0], 1.0);

        let f = UvField::from_vec(1, 1, 1, vec![128.0 / 255.0]).unwrap();
        write_png(&f, &p, PngDepth::Eight).unwrap();
        assert_eq!(read_png(&p).unwrap().data()[0], 128.0 / 255.0);
    }

    #[test]
    fn png8_roundtrip_error_bounded_exhaustive() {
        // Every 8-bit code plus jittered in-between values: quantization
        // error must stay within 1/510.
        let d = tmpdir();
        let p = d.path().join("codes.png");
        let mut vals = Vec::new();
        for code in 0..256 {
            vals.push(code as f64 / 255.0);
            vals.push(((code as f64 + 0.49) / 255.0).min(1.0));
        }
        let f = UvField::from_vec(1, vals.len(), 1, vals.clone()).unwrap();
        write_png(&f, &p, PngDepth::Eight).unwrap();
        let g = read_png(&p).unwrap();
        for (a, b) in vals.iter().zip(g.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn png_rgb_roundtrip() {
        let d = tmpdir();
        let p = d.path().join("rgb.png");
        let f = UvField::from_vec(2, 1, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]).unwrap();
        write_png(&f, &p, PngDepth::Sixteen).unwrap();
        let g = read_png(&p).unwrap();
        assert_eq!(g.channels(), 3);
        for (a, b) in f.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 1.0 / 131070.0);
        }
    }
}
