//! Automatic shadow-mask extraction.
//!
//! Per view: threshold the luminance difference between a raw image and its
//! shadow-softened counterpart, median-filter, drop small connected
//! components. The per-view masks are then lifted into UV space by
//! visibility-weighted voting over the texel correspondences and finally
//! dilated so the mask comfortably covers the artifact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::texture::ViewSample;
use crate::uvfield::UvField;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct MaskConfig {
    /// Luminance difference (softened minus raw) above which a pixel votes
    /// shadow.
    pub diff_threshold: f64,
    /// Median filter half-width in pixels; the window is `2r + 1` square.
    pub median_radius: usize,
    /// Connected components smaller than this pixel count are dropped.
    pub min_area: usize,
    /// Disk radius of the final UV-space dilation.
    pub dilation_radius: usize,
    /// Fraction of the visibility-weighted vote required to mark a texel.
    pub uv_vote_threshold: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            diff_threshold: 0.08,
            median_radius: 3,
            min_area: 64,
            dilation_radius: 8,
            uv_vote_threshold: 0.3,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.diff_threshold) {
            return Err(Error::Config("diff-threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.uv_vote_threshold) {
            return Err(Error::Config("uv-vote-threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn luminance(rgb: &[f64]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Pixels brighten when a shadow is softened; mark where
/// `lum(softened) - lum(raw) > diff_threshold`.
pub fn detect_view_shadow(raw: &UvField, softened: &UvField, cfg: &MaskConfig) -> Result<UvField> {
    cfg.validate()?;
    if !raw.same_dims(softened) || raw.channels() != 3 {
        return Err(Error::DimMismatch("raw/softened views must be matching 3-channel images".into()));
    }
    let (h, w) = (raw.height(), raw.width());
    let mut mask = UvField::zeros(h, w, 1);
    for v in 0..h {
        for u in 0..w {
            let diff = luminance(softened.texel(u, v)) - luminance(raw.texel(u, v));
            if diff > cfg.diff_threshold {
                mask.texel_mut(u, v)[0] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// Median filter over a `(2r+1)` square window with edge clamping; for a
/// binary mask this is a majority vote over the window.
pub fn median_filter(mask: &UvField, radius: usize) -> UvField {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let r = radius as isize;
    let mut out = UvField::zeros(h, w, 1);
    for v in 0..h {
        for u in 0..w {
            let mut ones = 0usize;
            let mut total = 0usize;
            for dv in -r..=r {
                for du in -r..=r {
                    let uu = (u as isize + du).clamp(0, w as isize - 1) as usize;
                    let vv = (v as isize + dv).clamp(0, h as isize - 1) as usize;
                    if mask.texel(uu, vv)[0] > 0.5 {
                        ones += 1;
                    }
                    total += 1;
                }
            }
            if 2 * ones > total {
                out.texel_mut(u, v)[0] = 1.0;
            }
        }
    }
    out
}

/// 4-connected component labels of the nonzero pixels, plus per-label areas.
/// Label 0 means background.
pub fn label_components(mask: &UvField) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut areas = vec![0usize]; // index 0: background, unused count
    let mut stack = Vec::new();
    let mut next = 1u32;
    for start in 0..h * w {
        if mask.data()[start] <= 0.5 || labels[start] != 0 {
            continue;
        }
        let label = next;
        next += 1;
        let mut area = 0usize;
        stack.push(start);
        labels[start] = label;
        while let Some(idx) = stack.pop() {
            area += 1;
            let (u, v) = (idx % w, idx / w);
            let mut visit = |uu: usize, vv: usize| {
                let j = vv * w + uu;
                if mask.data()[j] > 0.5 && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            };
            if u > 0 {
                visit(u - 1, v);
            }
            if u + 1 < w {
                visit(u + 1, v);
            }
            if v > 0 {
                visit(u, v - 1);
            }
            if v + 1 < h {
                visit(u, v + 1);
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Median filter then drop 4-connected components below `min_area`.
pub fn clean_mask(mask: &UvField, cfg: &MaskConfig) -> Result<UvField> {
    if mask.channels() != 1 {
        return Err(Error::DimMismatch("clean_mask expects a 1-channel mask".into()));
    }
    let mut filtered = median_filter(mask, cfg.median_radius);
    let (labels, areas) = label_components(&filtered);
    for (idx, value) in filtered.data_mut().iter_mut().enumerate() {
        let label = labels[idx] as usize;
        if label != 0 && areas[label] < cfg.min_area {
            *value = 0.0;
        }
    }
    Ok(filtered)
}

/// Lift per-view masks into UV space by visibility-weighted voting: a texel
/// is shadow when the weighted vote fraction reaches the threshold among
/// views that see it; uncovered texels stay zero.
pub fn lift_to_uv(view_masks: &[UvField], views: &[ViewSample], cfg: &MaskConfig) -> Result<UvField> {
    if view_masks.is_empty() || view_masks.len() != views.len() {
        return Err(Error::Empty("lift_to_uv needs one mask per view"));
    }
    let (h, w) = views[0].texture_dims();
    for (mask, view) in view_masks.iter().zip(views) {
        if view.texture_dims() != (h, w) {
            return Err(Error::DimMismatch("views disagree on texture dims".into()));
        }
        if (mask.height(), mask.width()) != (view.image.height(), view.image.width()) {
            return Err(Error::DimMismatch("view mask dims must match the view image".into()));
        }
    }
    let mut out = UvField::zeros(h, w, 1);
    let mut vote_buf = [0.0f64; 1];
    for v in 0..h {
        for u in 0..w {
            let mut vote = 0.0;
            let mut weight = 0.0;
            for (mask, view) in view_masks.iter().zip(views) {
                let c = view.correspondence.texel(u, v);
                if c[2] <= 0.0 {
                    continue;
                }
                mask.bilinear_sample_into(c[0], c[1], &mut vote_buf);
                vote += c[2] * vote_buf[0];
                weight += c[2];
            }
            if weight > 0.0 && vote / weight >= cfg.uv_vote_threshold {
                out.texel_mut(u, v)[0] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Morphological dilation with a disk structuring element
/// (`dx^2 + dy^2 <= r^2`); radius 0 is the identity.
pub fn dilate_mask(mask: &UvField, radius: usize) -> UvField {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let r = radius as isize;
    // Precompute the disk offsets once.
    let mut offsets = Vec::new();
    for dv in -r..=r {
        for du in -r..=r {
            if du * du + dv * dv <= r * r {
                offsets.push((du, dv));
            }
        }
    }
    let mut out = UvField::zeros(h, w, 1);
    for v in 0..h {
        for u in 0..w {
            if mask.texel(u, v)[0] <= 0.5 {
                continue;
            }
            for &(du, dv) in &offsets {
                let uu = u as isize + du;
                let vv = v as isize + dv;
                if uu >= 0 && vv >= 0 && uu < w as isize && vv < h as isize {
                    out.texel_mut(uu as usize, vv as usize)[0] = 1.0;
                }
            }
        }
    }
    out
}

/// The full pipeline over one scene's views: detect, clean, lift, dilate.
pub fn detect_shadow_mask(
    pairs: &[(UvField, UvField)],
    views: &[ViewSample],
    cfg: &MaskConfig,
) -> Result<UvField> {
    if pairs.len() != views.len() {
        return Err(Error::DimMismatch("need one (raw, softened) pair per view".into()));
    }
    let mut view_masks = Vec::with_capacity(pairs.len());
    for (raw, soft) in pairs {
        let detected = detect_view_shadow(raw, soft, cfg)?;
        view_masks.push(clean_mask(&detected, cfg)?);
    }
    let lifted = lift_to_uv(&view_masks, views, cfg)?;
    Ok(dilate_mask(&lifted, cfg.dilation_radius))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_mask(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> UvField {
        let mut m = UvField::zeros(h, w, 1);
        for v in 0..h {
            for u in 0..w {
                let dx = u as f64 - cx;
                let dy = v as f64 - cy;
                if dx * dx + dy * dy <= r * r {
                    m.texel_mut(u, v)[0] = 1.0;
                }
            }
        }
        m
    }

    #[test]
    fn detect_zero_when_images_equal_or_threshold_max() {
        let cfg = MaskConfig::default();
        let img = UvField::filled(8, 8, 3, 0.5);
        let mask = detect_view_shadow(&img, &img, &cfg).unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0));

        let brighter = img.map(|v| (v + 0.4).min(1.0));
        let all = MaskConfig { diff_threshold: 1.0, ..cfg };
        let mask = detect_view_shadow(&img, &brighter, &all).unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn detect_planted_darkened_disk() {
        let cfg = MaskConfig::default();
        let (h, w) = (32, 32);
        let soft = UvField::filled(h, w, 3, 0.6);
        let mut raw = soft.clone();
        let disk = disk_mask(h, w, 16.0, 16.0, 8.0);
        for v in 0..h {
            for u in 0..w {
                if disk.texel(u, v)[0] > 0.5 {
                    for ch in 0..3 {
                        raw.texel_mut(u, v)[ch] -= 0.3;
                    }
                }
            }
        }
        let mask = detect_view_shadow(&raw, &soft, &cfg).unwrap();
        // The detection covers the disk interior exactly here.
        for v in 0..h {
            for u in 0..w {
                if disk.texel(u, v)[0] > 0.5 {
                    assert_eq!(mask.texel(u, v)[0], 1.0, "missed disk texel ({u},{v})");
                }
            }
        }
    }

    #[test]
    fn detection_is_antitone_in_threshold() {
        let (h, w) = (16, 16);
        let soft = UvField::filled(h, w, 3, 0.7);
        let mut raw = soft.clone();
        for (i, texel) in raw.data_mut().chunks_exact_mut(3).enumerate() {
            let dip = (i % 7) as f64 * 0.04;
            for c in texel.iter_mut() {
                *c -= dip;
            }
        }
        let mut last = usize::MAX;
        for thr in [0.02, 0.08, 0.15, 0.3] {
            let cfg = MaskConfig { diff_threshold: thr, ..MaskConfig::default() };
            let mask = detect_view_shadow(&raw, &soft, &cfg).unwrap();
            let area = mask.data().iter().filter(|&&m| m > 0.5).count();
            assert!(area <= last, "mask grew as threshold grew");
            last = area;
        }
    }

    #[test]
    fn clean_removes_isolated_pixels_keeps_squares() {
        let cfg = MaskConfig { median_radius: 1, min_area: 16, ..MaskConfig::default() };
        let (h, w) = (64, 64);
        let mut mask = UvField::zeros(h, w, 1);
        mask.texel_mut(3, 3)[0] = 1.0; // isolated pixel
        for v in 10..60 {
            for u in 10..60 {
                mask.texel_mut(u, v)[0] = 1.0; // 50x50 block
            }
        }
        let cleaned = clean_mask(&mask, &cfg).unwrap();
        assert_eq!(cleaned.texel(3, 3)[0], 0.0);
        // Interior of the square survives; only corners may erode by up to
        // the median radius.
        for v in 12..58 {
            for u in 12..58 {
                assert_eq!(cleaned.texel(u, v)[0], 1.0);
            }
        }
        // Nothing appears outside the dilated-by-radius envelope.
        for v in 0..h {
            for u in 0..w {
                if cleaned.texel(u, v)[0] > 0.5 {
                    let inside =
                        (9..61).contains(&u) && (9..61).contains(&v) || (u == 3 && v == 3);
                    assert!(inside, "spurious pixel at ({u},{v})");
                }
            }
        }
    }

    #[test]
    fn clean_preserves_all_ones() {
        let cfg = MaskConfig::default();
        let ones = UvField::filled(32, 32, 1, 1.0);
        assert_eq!(clean_mask(&ones, &cfg).unwrap(), ones);
    }

    #[test]
    fn components_are_four_connected() {
        // Two diagonal pixels are separate components under 4-connectivity.
        let mut mask = UvField::zeros(4, 4, 1);
        mask.texel_mut(0, 0)[0] = 1.0;
        mask.texel_mut(1, 1)[0] = 1.0;
        let (_, areas) = label_components(&mask);
        assert_eq!(areas.len() - 1, 2);
    }

    #[test]
    fn dilation_identity_disk_and_monotone() {
        let mut mask = UvField::zeros(16, 16, 1);
        mask.texel_mut(8, 8)[0] = 1.0;
        assert_eq!(dilate_mask(&mask, 0), mask);
        // Single pixel at radius 3 grows to the 29-pixel digital disk.
        let grown = dilate_mask(&mask, 3);
        let area = grown.data().iter().filter(|&&m| m > 0.5).count();
        assert_eq!(area, 29);
        // Area never decreases under dilation.
        let more = dilate_mask(&grown, 2);
        let area2 = more.data().iter().filter(|&&m| m > 0.5).count();
        assert!(area2 >= area);
    }

    #[test]
    fn lift_single_full_visibility_view_resamples_mask() {
        // Identity correspondence: the UV mask equals the view mask.
        let (h, w) = (16, 16);
        let vmask = disk_mask(h, w, 8.0, 8.0, 5.0);
        let mut corr = UvField::zeros(h, w, 3);
        for v in 0..h {
            for u in 0..w {
                let c = corr.texel_mut(u, v);
                c[0] = u as f64 + 0.5;
                c[1] = v as f64 + 0.5;
                c[2] = 1.0;
            }
        }
        let view =
            ViewSample::new(UvField::zeros(h, w, 3), corr, 0).unwrap();
        let cfg = MaskConfig::default();
        let lifted = lift_to_uv(&[vmask.clone()], &[view], &cfg).unwrap();
        assert_eq!(lifted, vmask);
    }

    #[test]
    fn lift_all_zero_votes_gives_empty_mask() {
        let (h, w) = (8, 8);
        let mut corr = UvField::zeros(h, w, 3);
        for texel in corr.data_mut().chunks_exact_mut(3) {
            texel[0] = 0.5;
            texel[1] = 0.5;
            texel[2] = 1.0;
        }
        let view = ViewSample::new(UvField::zeros(h, w, 3), corr, 0).unwrap();
        let cfg = MaskConfig::default();
        let lifted = lift_to_uv(&[UvField::zeros(h, w, 1)], &[view], &cfg).unwrap();
        assert!(lifted.data().iter().all(|&m| m == 0.0));
        assert!(lift_to_uv(&[], &[], &cfg).is_err());
    }

    #[test]
    fn closed_loop_planted_shadow_iou() {
        // Plant a shadow in a synthetic scene, run the full pipeline, and
        // compare against the ground-truth UV mask.
        let spec = crate::synthetic::SceneSpec {
            resolution: 64,
            seed: 12,
            grid_cell_size: 8,
            ..Default::default()
        };
        let scene = crate::synthetic::generate_scene(&spec).unwrap();
        // Desk-scale config: the defaults target full-resolution textures,
        // so the morphology radii shrink with the scene.
        let cfg = MaskConfig {
            median_radius: 1,
            min_area: 16,
            dilation_radius: 1,
            ..MaskConfig::default()
        };
        let detected = detect_shadow_mask(&scene.shadow_pairs, &scene.views, &cfg).unwrap();
        let iou = crate::metrics::mask_iou(&detected, &scene.mask).unwrap();
        assert!(iou >= 0.8, "closed-loop IoU {iou} < 0.8");
    }
}
