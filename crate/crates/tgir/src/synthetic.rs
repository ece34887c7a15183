//! Procedural ground truth: face-like reflectance stacks, coarse normals,
//! texel-grid lighting with planted dark regions, rendered observations,
//! synthetic multi-view projections, and raw/softened shadow pairs.
//! Everything is a pure function of `(SceneSpec, seed)`, so every test and
//! acceptance scenario is reproducible from the spec alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::light::TexelGridLight;
use crate::sh::{sh_basis, shading_no_albedo, ShCoeffs};
use crate::texture::ViewSample;
use crate::uvfield::{ReflectanceStack, UvField, NORMAL_CHANNELS, SPECULAR_CHANNEL, STACK_CHANNELS};

/// Planted grid shading must be at least this dark at every masked texel.
pub const MIN_PLANTED_DARKNESS: f64 = 0.05;
/// Grid attenuation used to fabricate "softened" counterpart views.
pub const SOFTEN_ATTENUATION: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum MaskShape {
    /// Center and radius as fractions of the resolution.
    Disk { center: [f64; 2], radius: f64 },
    /// Regular polygon: center/radius as fractions, `sides >= 3`.
    Polygon { center: [f64; 2], radius: f64, sides: usize, rotation: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ShadowSpec {
    pub shape: MaskShape,
    /// Per-channel target darkness (positive magnitudes) of the planted
    /// grid shading inside the mask.
    pub darkening: [f64; 3],
    /// Relative strength of the directional (band-1) component of the
    /// planted coefficients.
    pub tilt: f64,
    /// Feather width (in texels) of the modulation mask written for
    /// solvers; the ground-truth mask stays binary.
    pub softness: f64,
}

impl Default for ShadowSpec {
    fn default() -> Self {
        Self {
            shape: MaskShape::Disk { center: [0.42, 0.55], radius: 0.2 },
            darkening: [0.3, 0.32, 0.28],
            tilt: 0.15,
            softness: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct SceneSpec {
    pub resolution: usize,
    pub seed: u64,
    pub base_tone: [f64; 3],
    /// Amplitude of the multi-octave albedo value noise.
    pub albedo_noise: f64,
    /// Expected darker blotches per texel; the count is `density * H * W`.
    pub blemish_density: f64,
    pub shadow: Option<ShadowSpec>,
    /// Ground-truth lighting grid cell size in texels.
    pub grid_cell_size: usize,
    pub view_count: usize,
    /// View image resolution relative to the texture resolution.
    pub view_scale: f64,
    /// Gaussian noise sigma added to the rendered observation.
    pub observation_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            resolution: 128,
            seed: 0,
            base_tone: [0.62, 0.47, 0.38],
            albedo_noise: 0.02,
            blemish_density: 0.0006,
            shadow: Some(ShadowSpec::default()),
            grid_cell_size: 16,
            view_count: 4,
            view_scale: 1.3,
            observation_noise: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || !(32..=512).contains(&self.resolution) {
            return Err(Error::Config(format!(
                "resolution must be a power of two in [32, 512], got {}",
                self.resolution
            )));
        }
        if self.grid_cell_size == 0 {
            return Err(Error::Config("grid-cell-size must be >= 1".into()));
        }
        if self.view_count == 0 {
            return Err(Error::Config("view-count must be >= 1".into()));
        }
        if !(1.0..8.0).contains(&self.view_scale) {
            return Err(Error::Config("view-scale must lie in [1, 8)".into()));
        }
        Ok(())
    }
}

/// A generated scene: ground truth plus derived observations.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub stack: ReflectanceStack,
    pub coarse_normals: UvField,
    pub light: TexelGridLight,
    pub mask: UvField,
    pub target: UvField,
    pub valid: UvField,
    pub views: Vec<ViewSample>,
    /// Per-view (raw, softened) image pairs for shadow detection.
    pub shadow_pairs: Vec<(UvField, UvField)>,
    /// A different-seed stack with a nearby tone, the warm-start reference.
    pub reference: ReflectanceStack,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in roughly [-1, 1]: random lattice values per
/// octave, smoothstep-interpolated, amplitudes halving.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, base_cell: usize, octaves: usize) -> UvField {
    let mut out = vec![0.0f64; h * w];
    let mut amp = 1.0;
    let mut total_amp = 0.0;
    for o in 0..octaves {
        let cell = (base_cell >> o).max(2);
        let gw = w / cell + 2;
        let gh = h / cell + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
        for v in 0..h {
            let gy = v as f64 / cell as f64;
            let j = gy as usize;
            let fy = smoothstep(gy - j as f64);
            for u in 0..w {
                let gx = u as f64 / cell as f64;
                let i = gx as usize;
                let fx = smoothstep(gx - i as f64);
                let a = lattice[j * gw + i];
                let b = lattice[j * gw + i + 1];
                let c = lattice[(j + 1) * gw + i];
                let d = lattice[(j + 1) * gw + i + 1];
                let val = a * (1.0 - fx) * (1.0 - fy)
                    + b * fx * (1.0 - fy)
                    + c * (1.0 - fx) * fy
                    + d * fx * fy;
                out[v * w + u] += amp * val;
            }
        }
        total_amp += amp;
        amp *= 0.5;
    }
    for v in out.iter_mut() {
        *v /= total_amp;
    }
    UvField::from_vec(h, w, 1, out).expect("finite noise")
}

/// Procedural reflectance: base tone plus smooth value noise plus sparse
/// darker blotches; detail normals from a height field; smooth specular in
/// [0.2, 0.6]. Deterministic in the seed.
pub fn gen_reflectance(spec: &SceneSpec) -> Result<ReflectanceStack> {
    spec.validate()?;
    gen_reflectance_seeded(spec, spec.seed)
}

fn gen_reflectance_seeded(spec: &SceneSpec, seed: u64) -> Result<ReflectanceStack> {
    let res = spec.resolution;
    let mut rng = stream_rng(seed, 1);
    let shared = value_noise(&mut rng, res, res, res / 8, 4);
    let per_ch: Vec<UvField> =
        (0..3).map(|_| value_noise(&mut rng, res, res, res / 16, 3)).collect();

    let mut data = vec![0.0f64; res * res * STACK_CHANNELS];
    for v in 0..res {
        for u in 0..res {
            let base = (v * res + u) * STACK_CHANNELS;
            let n0 = shared.texel(u, v)[0];
            for ch in 0..3 {
                let tint = per_ch[ch].texel(u, v)[0];
                data[base + ch] =
                    (spec.base_tone[ch] + spec.albedo_noise * (n0 + 0.3 * tint)).clamp(0.02, 0.98);
            }
        }
    }

    // Darker blotches with smooth falloff.
    let count = (spec.blemish_density * (res * res) as f64).round() as usize;
    let scale = res as f64 / 64.0;
    for _ in 0..count {
        let cx: f64 = rng.random_range(0.0..res as f64);
        let cy: f64 = rng.random_range(0.0..res as f64);
        let radius: f64 = rng.random_range(1.5..4.0) * scale;
        let strength: f64 = rng.random_range(0.2..0.5);
        let r_ceil = radius.ceil() as isize;
        for dv in -r_ceil..=r_ceil {
            for du in -r_ceil..=r_ceil {
                let u = cx as isize + du;
                let v = cy as isize + dv;
                if u < 0 || v < 0 || u >= res as isize || v >= res as isize {
                    continue;
                }
                let d = ((du * du + dv * dv) as f64).sqrt();
                if d >= radius {
                    continue;
                }
                let fall = smoothstep(1.0 - d / radius);
                let base = (v as usize * res + u as usize) * STACK_CHANNELS;
                for ch in 0..3 {
                    data[base + ch] *= 1.0 - strength * fall;
                }
            }
        }
    }

    // Detail normals from height-field gradients.
    let height = value_noise(&mut rng, res, res, res / 8, 4);
    let slope = 1.2;
    for v in 0..res {
        for u in 0..res {
            let h00 = height.texel(u, v)[0];
            let hx = if u + 1 < res { height.texel(u + 1, v)[0] } else { h00 };
            let hy = if v + 1 < res { height.texel(u, v + 1)[0] } else { h00 };
            let n = [-(hx - h00) * slope, -(hy - h00) * slope, 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let base = (v * res + u) * STACK_CHANNELS;
            for (k, ch) in NORMAL_CHANNELS.enumerate() {
                data[base + ch] = n[k] / len;
            }
        }
    }

    // Smooth specular in [0.2, 0.6].
    let spec_noise = value_noise(&mut rng, res, res, res / 4, 2);
    for v in 0..res {
        for u in 0..res {
            let base = (v * res + u) * STACK_CHANNELS;
            data[base + SPECULAR_CHANNEL] = 0.4 + 0.2 * spec_noise.texel(u, v)[0].clamp(-1.0, 1.0);
        }
    }

    ReflectanceStack::new(UvField::from_vec(res, res, STACK_CHANNELS, data)?)
}

/// Smooth coarse normal map: a dome with low-frequency wobble, covering a
/// wide enough cone of directions to keep SH fitting well-posed.
pub fn gen_coarse_normals(spec: &SceneSpec) -> Result<UvField> {
    spec.validate()?;
    let res = spec.resolution;
    let mut rng = stream_rng(spec.seed, 2);
    let nx = value_noise(&mut rng, res, res, res / 4, 2);
    let ny = value_noise(&mut rng, res, res, res / 4, 2);
    let mut data = Vec::with_capacity(res * res * 3);
    for v in 0..res {
        for u in 0..res {
            let fu = (u as f64 + 0.5) / res as f64 - 0.5;
            let fv = (v as f64 + 0.5) / res as f64 - 0.5;
            let n = [
                fu * 1.1 + 0.35 * nx.texel(u, v)[0],
                fv * 1.1 + 0.35 * ny.texel(u, v)[0],
                1.0,
            ];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            data.extend_from_slice(&[n[0] / len, n[1] / len, n[2] / len]);
        }
    }
    UvField::from_vec(res, res, 3, data)
}

fn rasterize_mask(shape: &MaskShape, res: usize) -> UvField {
    let mut mask = UvField::zeros(res, res, 1);
    let r = res as f64;
    for v in 0..res {
        for u in 0..res {
            let x = (u as f64 + 0.5) / r;
            let y = (v as f64 + 0.5) / r;
            let inside = match shape {
                MaskShape::Disk { center, radius } => {
                    let dx = x - center[0];
                    let dy = y - center[1];
                    dx * dx + dy * dy <= radius * radius
                }
                MaskShape::Polygon { center, radius, sides, rotation } => {
                    // Regular convex polygon: inside all edge half-planes.
                    let sides = (*sides).max(3);
                    let dx = x - center[0];
                    let dy = y - center[1];
                    let apothem = radius * (std::f64::consts::PI / sides as f64).cos();
                    (0..sides).all(|k| {
                        let a = rotation + (k as f64 + 0.5) * std::f64::consts::TAU / sides as f64;
                        dx * a.cos() + dy * a.sin() <= apothem
                    })
                }
            };
            if inside {
                mask.texel_mut(u, v)[0] = 1.0;
            }
        }
    }
    mask
}

/// Ground-truth lighting: a bright low-frequency global term, a grid that is
/// zero outside the planted mask and strictly dark inside it. Returns the
/// light together with the binary planted mask.
pub fn gen_lighting(spec: &SceneSpec, normals: &UvField) -> Result<(TexelGridLight, UvField)> {
    spec.validate()?;
    let res = spec.resolution;
    let mut rng = stream_rng(spec.seed, 3);

    // Global term: a render multiplier around 1 with a gentle directional
    // tilt. The rendered texel is albedo * s / pi, so unit response needs a
    // DC coefficient of pi / (B_0 Y_00).
    let dc_unit = std::f64::consts::PI / (crate::sh::LAMBERT_BAND[0] * sh_basis([0.0, 0.0, 1.0])[0]);
    let mut gamma = [0.0f64; 27];
    for ch in 0..3 {
        let brightness: f64 = rng.random_range(0.95..1.05);
        gamma[ch] = brightness * dc_unit;
    }
    for basis in 1..4 {
        for ch in 0..3 {
            gamma[3 * basis + ch] = rng.random_range(-0.08..0.08) * dc_unit;
        }
    }
    let gamma_global = ShCoeffs(gamma);

    let (mask, dark_cells, light) = match &spec.shadow {
        None => {
            let mask = UvField::zeros(res, res, 1);
            let light = TexelGridLight::new(gamma_global, spec.grid_cell_size, mask.clone())?;
            (mask, Vec::new(), light)
        }
        Some(shadow) => {
            let mask = rasterize_mask(&shadow.shape, res);
            let light = TexelGridLight::new(gamma_global, spec.grid_cell_size, mask.clone())?;
            // Mark every grid cell whose padded support touches the mask so
            // bilinear interpolation stays at full strength inside it.
            let g = spec.grid_cell_size;
            let (gh, gw) = light.grid_dims();
            let mut cells = Vec::new();
            for j in 0..gh {
                for i in 0..gw {
                    let u_lo = i.saturating_mul(g).saturating_sub(g);
                    let v_lo = j.saturating_mul(g).saturating_sub(g);
                    let u_hi = ((i + 2) * g).min(res);
                    let v_hi = ((j + 2) * g).min(res);
                    let mut touches = false;
                    'scan: for v in v_lo..v_hi {
                        for u in u_lo..u_hi {
                            if mask.texel(u, v)[0] > 0.5 {
                                touches = true;
                                break 'scan;
                            }
                        }
                    }
                    if touches {
                        cells.push((i, j));
                    }
                }
            }
            (mask, cells, light)
        }
    };
    let mut light = light;

    if let Some(shadow) = &spec.shadow {
        let dc_unit =
            std::f64::consts::PI / (crate::sh::LAMBERT_BAND[0] * sh_basis([0.0, 0.0, 1.0])[0]);
        let mut dark = [0.0f64; 27];
        for ch in 0..3 {
            // Darkening is specified as a render-multiplier drop.
            dark[ch] = -shadow.darkening[ch] * dc_unit;
        }
        let tilt_mag = shadow.tilt * shadow.darkening[0] * dc_unit;
        for ch in 0..3 {
            // Band-1 z component: keeps the planted light directional but
            // still strictly dark after the rescale below.
            dark[3 * 2 + ch] = -tilt_mag * rng.random_range(0.2..1.0);
        }
        let coeffs = ShCoeffs(dark);
        for &(i, j) in &dark_cells {
            light.set_cell(i, j, coeffs);
        }

        // Verify and rescale: planted shading of the modulated grid term
        // must stay at or below -MIN_PLANTED_DARKNESS at every masked texel.
        let mut max_shading = f64::NEG_INFINITY;
        for v in 0..res {
            for u in 0..res {
                if mask.texel(u, v)[0] <= 0.5 {
                    continue;
                }
                let local = light.local_coeffs(u, v);
                let modulated = local.add(&light.gamma_global().scale(-1.0));
                let n = normals.texel(u, v);
                let s = shading_no_albedo(&sh_basis([n[0], n[1], n[2]]), &modulated);
                for ch in 0..3 {
                    max_shading = max_shading.max(s[ch]);
                }
            }
        }
        if max_shading > -MIN_PLANTED_DARKNESS {
            let scale = if max_shading >= 0.0 {
                return Err(Error::InvalidInput(
                    "planted grid produced non-negative shading; tilt too strong".into(),
                ));
            } else {
                (MIN_PLANTED_DARKNESS * 1.2) / -max_shading
            };
            for &(i, j) in &dark_cells {
                let scaled = light.cell(i, j).scale(scale.max(1.0));
                light.set_cell(i, j, scaled);
            }
        }
    }

    Ok((light, mask))
}

/// Render the ground-truth observation: the lit albedo plus optional
/// Gaussian pixel noise, with a full validity mask.
pub fn gen_observation(
    stack: &ReflectanceStack,
    light: &TexelGridLight,
    normals: &UvField,
    spec: &SceneSpec,
) -> Result<(UvField, UvField)> {
    let albedo = stack.albedo();
    let mut target = light.render(&albedo, normals)?;
    if spec.observation_noise > 0.0 {
        let mut rng = stream_rng(spec.seed, 4);
        let sigma = spec.observation_noise;
        for v in target.data_mut().iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    let valid = UvField::filled(target.height(), target.width(), 1, 1.0);
    Ok((target, valid))
}

/// One synthetic camera: an invertible affine map from UV texel coordinates
/// to image pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct AffineView {
    // p = m * q + t, with q in texel coords and p in pixel coords.
    m: [[f64; 2]; 2],
    t: [f64; 2],
    inv: [[f64; 2]; 2],
    inv_t: [f64; 2],
    image_h: usize,
    image_w: usize,
    gaze: [f64; 2],
    falloff: f64,
}

impl AffineView {
    fn forward(&self, q: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * q[0] + self.m[0][1] * q[1] + self.t[0],
            self.m[1][0] * q[0] + self.m[1][1] * q[1] + self.t[1],
        ]
    }

    fn backward(&self, p: [f64; 2]) -> [f64; 2] {
        let x = p[0] - self.t[0];
        let y = p[1] - self.t[1];
        [
            self.inv[0][0] * x + self.inv[0][1] * y + self.inv_t[0],
            self.inv[1][0] * x + self.inv[1][1] * y + self.inv_t[1],
        ]
    }
}

fn make_view(rng: &mut ChaCha8Rng, index: usize, count: usize, res: usize, view_scale: f64) -> AffineView {
    let identity = count == 1;
    let angle: f64 = if identity { 0.0 } else { rng.random_range(-0.18..0.18) };
    let scale: f64 = if identity { 1.0 } else { view_scale * rng.random_range(0.92..1.08) };
    let (s, c) = angle.sin_cos();
    let m = [[c * scale, -s * scale], [s * scale, c * scale]];
    // Map the texture corners, size the image to the bounding box.
    let corners = [[0.0, 0.0], [res as f64, 0.0], [0.0, res as f64], [res as f64, res as f64]];
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for q in corners {
        let p = [m[0][0] * q[0] + m[0][1] * q[1], m[1][0] * q[0] + m[1][1] * q[1]];
        for k in 0..2 {
            min[k] = min[k].min(p[k]);
            max[k] = max[k].max(p[k]);
        }
    }
    let margin = 2.0;
    let t = [margin - min[0], margin - min[1]];
    let image_w = (max[0] - min[0] + 2.0 * margin).ceil() as usize;
    let image_h = (max[1] - min[1] + 2.0 * margin).ceil() as usize;
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let phase = index as f64 / count as f64 * std::f64::consts::TAU;
    let gaze = [
        res as f64 * (0.5 + 0.28 * phase.cos()),
        res as f64 * (0.5 + 0.28 * phase.sin()),
    ];
    AffineView { m, t, inv, inv_t: [0.0, 0.0], image_h, image_w, gaze, falloff: res as f64 * 1.1 }
}

fn project_uv_image(view: &AffineView, uv_image: &UvField) -> UvField {
    let res = uv_image.width() as f64;
    let mut out = UvField::zeros(view.image_h, view.image_w, 3);
    let mut sample = [0.0; 3];
    for py in 0..view.image_h {
        for px in 0..view.image_w {
            let q = view.backward([px as f64 + 0.5, py as f64 + 0.5]);
            if q[0] < 0.0 || q[1] < 0.0 || q[0] >= res || q[1] >= uv_image.height() as f64 {
                continue;
            }
            uv_image.bilinear_sample_into(q[0], q[1], &mut sample);
            out.texel_mut(px, py).copy_from_slice(&sample);
        }
    }
    out
}

fn correspondence_map(view: &AffineView, res: usize) -> UvField {
    let mut corr = UvField::zeros(res, res, 3);
    for v in 0..res {
        for u in 0..res {
            let q = [u as f64 + 0.5, v as f64 + 0.5];
            let p = view.forward(q);
            let in_bounds = p[0] >= 0.0
                && p[1] >= 0.0
                && p[0] < view.image_w as f64
                && p[1] < view.image_h as f64;
            let c = corr.texel_mut(u, v);
            if in_bounds {
                let dx = q[0] - view.gaze[0];
                let dy = q[1] - view.gaze[1];
                let d2 = (dx * dx + dy * dy) / (view.falloff * view.falloff);
                c[0] = p[0];
                c[1] = p[1];
                c[2] = (0.15 + 0.85 * (1.0 - d2).max(0.0)).min(1.0);
            }
        }
    }
    corr
}

/// Synthesize calibrated views of the lit scene plus (raw, softened) pairs:
/// raw views see the full planted grid, softened views see it attenuated.
pub fn gen_views(
    spec: &SceneSpec,
    stack: &ReflectanceStack,
    light: &TexelGridLight,
    normals: &UvField,
) -> Result<(Vec<ViewSample>, Vec<(UvField, UvField)>)> {
    spec.validate()?;
    let res = spec.resolution;
    let albedo = stack.albedo();
    let raw_uv = light.render(&albedo, normals)?;
    let mut soft_light = light.clone();
    let (gh, gw) = soft_light.grid_dims();
    for j in 0..gh {
        for i in 0..gw {
            let scaled = soft_light.cell(i, j).scale(SOFTEN_ATTENUATION);
            soft_light.set_cell(i, j, scaled);
        }
    }
    let soft_uv = soft_light.render(&albedo, normals)?;

    let mut rng = stream_rng(spec.seed, 5);
    let mut views = Vec::with_capacity(spec.view_count);
    let mut pairs = Vec::with_capacity(spec.view_count);
    for k in 0..spec.view_count {
        let view = make_view(&mut rng, k, spec.view_count, res, spec.view_scale);
        let raw_img = project_uv_image(&view, &raw_uv);
        let soft_img = project_uv_image(&view, &soft_uv);
        let corr = correspondence_map(&view, res);
        views.push(ViewSample::new(raw_img.clone(), corr, k)?);
        pairs.push((raw_img, soft_img));
    }
    Ok((views, pairs))
}

/// Generate the full scene: ground truth, observation, views, shadow pairs,
/// and a tone-matched different-seed reference stack.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let stack = gen_reflectance(spec)?;
    let coarse_normals = gen_coarse_normals(spec)?;
    let (light, mask) = gen_lighting(spec, &coarse_normals)?;
    let (target, valid) = gen_observation(&stack, &light, &coarse_normals, spec)?;
    let (views, shadow_pairs) = gen_views(spec, &stack, &light, &coarse_normals)?;
    // Reference: a different procedural identity with a nearby tone.
    let mut ref_rng = stream_rng(spec.seed, 6);
    let mut ref_spec = spec.clone();
    ref_spec.seed = spec.seed.wrapping_add(0x5eed);
    for ch in 0..3 {
        ref_spec.base_tone[ch] =
            (spec.base_tone[ch] + ref_rng.random_range(-0.03..0.03)).clamp(0.05, 0.95);
    }
    let reference = gen_reflectance_seeded(&ref_spec, ref_spec.seed)?;
    Ok(Scene {
        spec: spec.clone(),
        stack,
        coarse_normals,
        light,
        mask,
        target,
        valid,
        views,
        shadow_pairs,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec { resolution: 64, seed, grid_cell_size: 8, ..SceneSpec::default() }
    }

    #[test]
    fn reflectance_defaults_and_determinism() {
        let spec = small_spec(3);
        let a = gen_reflectance(&spec).unwrap();
        let b = gen_reflectance(&spec).unwrap();
        assert_eq!(a, b);
        // Normals are unit length.
        for texel in a.field().data().chunks_exact(STACK_CHANNELS) {
            let n = &texel[3..6];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert_relative_eq!(len, 1.0, epsilon = 1e-9);
            let s = texel[6];
            assert!((0.2..=0.6).contains(&s), "specular {s} out of range");
        }
    }

    #[test]
    fn flat_spec_gives_constant_albedo() {
        let spec = SceneSpec {
            albedo_noise: 0.0,
            blemish_density: 0.0,
            ..small_spec(4)
        };
        let stack = gen_reflectance(&spec).unwrap();
        for texel in stack.field().data().chunks_exact(STACK_CHANNELS) {
            for ch in 0..3 {
                assert_eq!(texel[ch], spec.base_tone[ch]);
            }
        }
    }

    #[test]
    fn albedo_mean_tracks_base_tone() {
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            let spec = small_spec(seed);
            let stack = gen_reflectance(&spec).unwrap();
            let full = UvField::filled(64, 64, 1, 1.0);
            let tone = stack.tone(&full).unwrap();
            for ch in 0..3 {
                worst = worst.max((tone[ch] - spec.base_tone[ch]).abs());
            }
        }
        assert!(worst < 0.02, "albedo mean drifted {worst} from base tone");
    }

    #[test]
    fn lighting_without_shadow_is_global_only() {
        let spec = SceneSpec { shadow: None, ..small_spec(5) };
        let normals = gen_coarse_normals(&spec).unwrap();
        let (light, mask) = gen_lighting(&spec, &normals).unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0));
        let field = light.grid_as_field();
        assert!(field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_shading_is_strictly_dark_inside_mask() {
        for seed in [0, 1, 2] {
            let spec = small_spec(seed);
            let normals = gen_coarse_normals(&spec).unwrap();
            let (light, mask) = gen_lighting(&spec, &normals).unwrap();
            let mut masked = 0;
            for v in 0..64 {
                for u in 0..64 {
                    if mask.texel(u, v)[0] <= 0.5 {
                        continue;
                    }
                    masked += 1;
                    let modulated = light.local_coeffs(u, v).add(&light.gamma_global().scale(-1.0));
                    let n = normals.texel(u, v);
                    let s = shading_no_albedo(&sh_basis([n[0], n[1], n[2]]), &modulated);
                    for ch in 0..3 {
                        assert!(
                            s[ch] <= -MIN_PLANTED_DARKNESS,
                            "seed {seed}: shading {} at ({u},{v})",
                            s[ch]
                        );
                    }
                }
            }
            assert!(masked > 100, "mask unexpectedly small");
        }
    }

    #[test]
    fn observation_reproduces_render_without_noise() {
        let spec = small_spec(6);
        let scene = generate_scene(&spec).unwrap();
        let render = scene.light.render(&scene.stack.albedo(), &scene.coarse_normals).unwrap();
        assert_eq!(scene.target, render);
        // Masked texels are strictly darker than the same albedo would be
        // under the global light alone.
        let global_only =
            crate::sh::shade_field(&scene.stack.albedo(), &scene.coarse_normals, |_, _| {
                *scene.light.gamma_global()
            })
            .unwrap();
        for v in 0..64 {
            for u in 0..64 {
                if scene.mask.texel(u, v)[0] > 0.5 {
                    for ch in 0..3 {
                        assert!(scene.target.texel(u, v)[ch] < global_only.texel(u, v)[ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn observation_noise_statistics() {
        // With ground-truth parameters the photometric loss equals
        // 3 sigma^2 within 5%.
        let spec = SceneSpec { observation_noise: 0.05, ..small_spec(7) };
        let scene = generate_scene(&spec).unwrap();
        let loss = scene
            .light
            .photometric_loss(&scene.stack.albedo(), &scene.coarse_normals, &scene.target, &scene.valid)
            .unwrap();
        assert_relative_eq!(loss, 3.0 * 0.05 * 0.05, max_relative = 0.05);
    }

    #[test]
    fn single_view_is_identity() {
        let spec = SceneSpec { view_count: 1, ..small_spec(8) };
        let scene = generate_scene(&spec).unwrap();
        let view = &scene.views[0];
        // The identity view has image dims = texture dims plus margins; the
        // resampled image must equal the UV render where visible.
        let resampled = view.resample_to_uv();
        let mut max_err: f64 = 0.0;
        for v in 0..64 {
            for u in 0..64 {
                if view.correspondence.texel(u, v)[2] > 0.0 {
                    for ch in 0..3 {
                        max_err =
                            max_err.max((resampled.texel(u, v)[ch] - scene.target.texel(u, v)[ch]).abs());
                    }
                }
            }
        }
        assert!(max_err < 1e-9, "identity view drifted {max_err}");
    }

    #[test]
    fn scene_is_fully_deterministic() {
        let spec = small_spec(9);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.target, b.target);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.views.len(), b.views.len());
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.correspondence, y.correspondence);
        }
    }

    #[test]
    fn ground_truth_satisfies_regularizers() {
        // L_neg at the planted parameters is exactly zero and TV is finite.
        let spec = small_spec(10);
        let scene = generate_scene(&spec).unwrap();
        let (neg, _) = scene.light.neg_shading_loss_and_grad(&scene.coarse_normals, 1).unwrap();
        assert_eq!(neg, 0.0);
        let (tv, _) = scene.light.tv_loss_and_grad(&scene.coarse_normals, 1).unwrap();
        assert!(tv.is_finite());
    }

    #[test]
    fn blend_closed_loop_recovers_texture() {
        let spec = small_spec(11);
        let scene = generate_scene(&spec).unwrap();
        let (blended, valid) = crate::texture::blend_texture(&scene.views).unwrap();
        assert!(valid.data().iter().all(|&v| v == 1.0), "full coverage expected");
        let p = crate::metrics::psnr(&blended, &scene.target, None).unwrap();
        assert!(p >= 35.0, "blend closed-loop psnr {p} < 35 dB");
    }
}
