//! Building the UV-space observation from per-view images.
//!
//! Each calibrated view supplies a precomputed correspondence map: for every
//! UV texel, the continuous pixel position it projects to plus a visibility
//! weight (zero where unseen). Blending is a visibility-weighted average
//! favoring confident views; an optional gradient-domain refinement pulls
//! the blend toward the per-view image gradients to keep fine detail that
//! plain averaging washes out.

use crate::error::{Error, Result};
use crate::uvfield::UvField;

/// Exponent applied to visibility weights during blending; higher values
/// favor frontal views.
pub const BLEND_WEIGHT_POWER: f64 = 4.0;

/// One calibrated view: a delighted image and its texel correspondence map
/// over the target texture dims, channels `(pixel_x, pixel_y, weight)`.
#[derive(Debug, Clone)]
pub struct ViewSample {
    pub image: UvField,
    pub correspondence: UvField,
    pub id: usize,
}

impl ViewSample {
    pub fn new(image: UvField, correspondence: UvField, id: usize) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::DimMismatch("view image must be 3-channel".into()));
        }
        if correspondence.channels() != 3 {
            return Err(Error::DimMismatch(
                "correspondence must be 3-channel (pixel_x, pixel_y, weight)".into(),
            ));
        }
        let (iw, ih) = (image.width() as f64, image.height() as f64);
        for texel in correspondence.data().chunks_exact(3) {
            let (px, py, w) = (texel[0], texel[1], texel[2]);
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidInput("visibility weight outside [0, 1]".into()));
            }
            if w > 0.0 && !(px >= 0.0 && px < iw && py >= 0.0 && py < ih) {
                return Err(Error::InvalidInput(format!(
                    "visible texel maps outside the image: ({px}, {py})"
                )));
            }
        }
        Ok(Self { image, correspondence, id })
    }

    pub fn texture_dims(&self) -> (usize, usize) {
        (self.correspondence.height(), self.correspondence.width())
    }

    /// The view image resampled onto the texture grid; weight-zero texels
    /// come back as zero.
    pub fn resample_to_uv(&self) -> UvField {
        let (h, w) = self.texture_dims();
        let mut out = UvField::zeros(h, w, 3);
        let mut sample = [0.0; 3];
        for v in 0..h {
            for u in 0..w {
                let c = self.correspondence.texel(u, v);
                if c[2] > 0.0 {
                    self.image.bilinear_sample_into(c[0], c[1], &mut sample);
                    out.texel_mut(u, v).copy_from_slice(&sample);
                }
            }
        }
        out
    }
}

/// Weighted per-texel blend of all views. Returns the texture and the
/// validity mask (1 where any view has positive weight). Views are folded
/// in ascending id order so the result is independent of input order.
pub fn blend_texture(views: &[ViewSample]) -> Result<(UvField, UvField)> {
    if views.is_empty() {
        return Err(Error::Empty("blend_texture needs at least one view"));
    }
    let dims = views[0].texture_dims();
    for view in views {
        if view.texture_dims() != dims {
            return Err(Error::DimMismatch("views disagree on texture dims".into()));
        }
    }
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| views[i].id);

    let (h, w) = dims;
    let mut texture = UvField::zeros(h, w, 3);
    let mut valid = UvField::zeros(h, w, 1);
    let mut sample = [0.0; 3];
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0.0f64; 3];
            let mut wsum = 0.0;
            let mut coverage = 0.0;
            for &i in &order {
                let view = &views[i];
                let c = view.correspondence.texel(u, v);
                let weight = c[2];
                if weight <= 0.0 {
                    continue;
                }
                coverage += weight;
                let wp = weight.powf(BLEND_WEIGHT_POWER);
                view.image.bilinear_sample_into(c[0], c[1], &mut sample);
                for ch in 0..3 {
                    acc[ch] += wp * sample[ch];
                }
                wsum += wp;
            }
            if coverage > 0.0 {
                let t = texture.texel_mut(u, v);
                for ch in 0..3 {
                    t[ch] = acc[ch] / wsum;
                }
                valid.texel_mut(u, v)[0] = 1.0;
            }
        }
    }
    Ok((texture, valid))
}

const CHARBONNIER_EPS: f64 = 1e-3;
const REFINE_LR: f64 = 0.5;
const BLEND_ANCHOR_WEIGHT: f64 = 0.1;

fn charbonnier(z: f64) -> f64 {
    (z * z + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt()
}

fn charbonnier_deriv(z: f64) -> f64 {
    z / (z * z + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt()
}

/// Forward differences along u and v for one channel; zero at far edges.
fn grad_at(f: &UvField, u: usize, v: usize, ch: usize) -> (f64, f64) {
    let here = f.texel(u, v)[ch];
    let gx = if u + 1 < f.width() { f.texel(u + 1, v)[ch] - here } else { 0.0 };
    let gy = if v + 1 < f.height() { f.texel(u, v + 1)[ch] - here } else { 0.0 };
    (gx, gy)
}

struct RefineObjective<'a> {
    resampled: Vec<UvField>,
    weights: Vec<&'a UvField>,
    blend: &'a UvField,
    valid: &'a UvField,
}

impl RefineObjective<'_> {
    /// Charbonnier gradient-matching against each view plus a quadratic
    /// anchor on the blend; returns (objective, d objective / d texture).
    fn eval(&self, tex: &UvField) -> (f64, UvField) {
        let (h, w) = (tex.height(), tex.width());
        let mut obj = 0.0;
        let mut grad = UvField::zeros(h, w, 3);
        for (res, corr) in self.resampled.iter().zip(self.weights.iter()) {
            for v in 0..h {
                for u in 0..w {
                    let vw = corr.texel(u, v)[2];
                    if vw <= 0.0 || self.valid.texel(u, v)[0] <= 0.5 {
                        continue;
                    }
                    for ch in 0..3 {
                        let (tx, ty) = grad_at(tex, u, v, ch);
                        let (rx, ry) = grad_at(res, u, v, ch);
                        let (dx, dy) = (tx - rx, ty - ry);
                        obj += vw * (charbonnier(dx) + charbonnier(dy));
                        let ddx = vw * charbonnier_deriv(dx);
                        let ddy = vw * charbonnier_deriv(dy);
                        // d(t[u+1] - t[u]) spreads +/- onto the two texels.
                        if u + 1 < w {
                            grad.texel_mut(u, v)[ch] -= ddx;
                            grad.texel_mut(u + 1, v)[ch] += ddx;
                        }
                        if v + 1 < h {
                            grad.texel_mut(u, v)[ch] -= ddy;
                            grad.texel_mut(u, v + 1)[ch] += ddy;
                        }
                    }
                }
            }
        }
        for v in 0..h {
            for u in 0..w {
                if self.valid.texel(u, v)[0] <= 0.5 {
                    continue;
                }
                for ch in 0..3 {
                    let d = tex.texel(u, v)[ch] - self.blend.texel(u, v)[ch];
                    obj += BLEND_ANCHOR_WEIGHT * d * d;
                    grad.texel_mut(u, v)[ch] += 2.0 * BLEND_ANCHOR_WEIGHT * d;
                }
            }
        }
        (obj, grad)
    }
}

/// Gradient-domain refinement of a blended texture. Descends the objective
/// with step `0.5`, halving the step on any iteration that would increase
/// it, so the objective trace is non-increasing. `iters = 0` is the
/// identity. Returns the refined texture and the objective trace.
pub fn gradient_refine(
    texture: &UvField,
    views: &[ViewSample],
    valid: &UvField,
    iters: usize,
) -> Result<(UvField, Vec<f64>)> {
    if views.is_empty() {
        return Err(Error::Empty("gradient_refine needs at least one view"));
    }
    if texture.channels() != 3 {
        return Err(Error::DimMismatch("texture must be 3-channel".into()));
    }
    let mut tex = texture.clone();
    let mut trace = Vec::with_capacity(iters + 1);
    if iters == 0 {
        return Ok((tex, trace));
    }
    let objective = RefineObjective {
        resampled: views.iter().map(|v| v.resample_to_uv()).collect(),
        weights: views.iter().map(|v| &v.correspondence).collect(),
        blend: texture,
        valid,
    };
    let (mut obj, mut grad) = objective.eval(&tex);
    trace.push(obj);
    for _ in 0..iters {
        let mut step = REFINE_LR;
        let mut accepted = false;
        for _ in 0..8 {
            let candidate = step_field(&tex, &grad, step);
            let (cobj, cgrad) = objective.eval(&candidate);
            if cobj <= obj {
                tex = candidate;
                obj = cobj;
                grad = cgrad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(obj);
        if !accepted {
            break;
        }
    }
    Ok((tex, trace))
}

fn step_field(tex: &UvField, grad: &UvField, lr: f64) -> UvField {
    let data = tex.data().iter().zip(grad.data()).map(|(t, g)| t - lr * g).collect();
    UvField::from_vec(tex.height(), tex.width(), tex.channels(), data).expect("finite step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_view(image: UvField, id: usize) -> ViewSample {
        let (h, w) = (image.height(), image.width());
        let mut corr = UvField::zeros(h, w, 3);
        for v in 0..h {
            for u in 0..w {
                let c = corr.texel_mut(u, v);
                c[0] = u as f64 + 0.5;
                c[1] = v as f64 + 0.5;
                c[2] = 1.0;
            }
        }
        ViewSample::new(image, corr, id).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> UvField {
        UvField::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn single_identity_view_reproduces_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img = random_image(&mut rng, 8, 8);
        let (tex, valid) = blend_texture(&[identity_view(img.clone(), 0)]).unwrap();
        assert_eq!(tex, img);
        assert!(valid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_views_blend_to_same_texture_regardless_of_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let img = random_image(&mut rng, 8, 8);
        let mut a = identity_view(img.clone(), 0);
        let b = identity_view(img.clone(), 1);
        for texel in a.correspondence.data_mut().chunks_exact_mut(3) {
            texel[2] = 0.3;
        }
        let (tex, _) = blend_texture(&[a, b]).unwrap();
        for (x, y) in tex.data().iter().zip(img.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn blend_is_view_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a = identity_view(random_image(&mut rng, 6, 6), 0);
        let mut b = identity_view(random_image(&mut rng, 6, 6), 1);
        for texel in b.correspondence.data_mut().chunks_exact_mut(3) {
            texel[2] = 0.7;
        }
        let (t1, _) = blend_texture(&[a.clone(), b.clone()]).unwrap();
        let (t2, _) = blend_texture(&[b, a]).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn blend_output_in_convex_hull_and_valid_is_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut a = identity_view(random_image(&mut rng, 8, 8), 0);
        let mut b = identity_view(random_image(&mut rng, 8, 8), 1);
        for (i, texel) in a.correspondence.data_mut().chunks_exact_mut(3).enumerate() {
            texel[2] = if i % 3 == 0 { 0.0 } else { rng.random_range(0.0..1.0) };
        }
        for (i, texel) in b.correspondence.data_mut().chunks_exact_mut(3).enumerate() {
            texel[2] = if i % 2 == 0 { 0.0 } else { rng.random_range(0.0..1.0) };
        }
        let (tex, valid) = blend_texture(&[a.clone(), b.clone()]).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                let wa = a.correspondence.texel(u, v)[2];
                let wb = b.correspondence.texel(u, v)[2];
                let covered = wa + wb > 0.0;
                assert_eq!(valid.texel(u, v)[0] == 1.0, covered);
                if !covered {
                    assert_eq!(tex.texel(u, v), &[0.0, 0.0, 0.0]);
                    continue;
                }
                let sa = a.image.texel(u, v);
                let sb = b.image.texel(u, v);
                for ch in 0..3 {
                    let x = tex.texel(u, v)[ch];
                    if wa == 0.0 {
                        assert_relative_eq!(x, sb[ch], epsilon = 1e-12);
                    } else if wb == 0.0 {
                        assert_relative_eq!(x, sa[ch], epsilon = 1e-12);
                    } else {
                        let lo = sa[ch].min(sb[ch]) - 1e-12;
                        let hi = sa[ch].max(sb[ch]) + 1e-12;
                        assert!(x >= lo && x <= hi);
                    }
                }
            }
        }
    }

    #[test]
    fn blend_rejects_empty_input() {
        assert!(blend_texture(&[]).is_err());
    }

    #[test]
    fn refine_identity_at_zero_iters() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let img = random_image(&mut rng, 8, 8);
        let view = identity_view(img.clone(), 0);
        let valid = UvField::filled(8, 8, 1, 1.0);
        let (out, trace) = gradient_refine(&img, &[view], &valid, 0).unwrap();
        assert_eq!(out, img);
        assert!(trace.is_empty());
    }

    #[test]
    fn refine_objective_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let img = random_image(&mut rng, 12, 12);
        let view = identity_view(img.clone(), 0);
        // Start from a corrupted blend so there is something to do.
        let corrupted = img.map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        let valid = UvField::filled(12, 12, 1, 1.0);
        let (_, trace) = gradient_refine(&corrupted, &[view], &valid, 30).unwrap();
        assert!(trace.len() >= 2);
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "objective increased: {pair:?}");
        }
    }

    #[test]
    fn single_view_data_term_zero_at_resampled_init() {
        // With one identity view and the texture equal to the resampled
        // view, the gradient-matching term contributes only the charbonnier
        // floor and the anchor is zero.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let img = random_image(&mut rng, 8, 8);
        let view = identity_view(img.clone(), 0);
        let valid = UvField::filled(8, 8, 1, 1.0);
        let (_, trace) = gradient_refine(&img, &[view], &valid, 1).unwrap();
        let baseline = 8.0 * 8.0 * 2.0 * 3.0 * CHARBONNIER_EPS;
        assert!(trace[0] <= baseline * 1.0001);
    }
}
