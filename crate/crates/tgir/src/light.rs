//! Texel-grid lighting: a global SH light plus a coarse UV grid of SH
//! coefficient vectors, bilinearly interpolated per texel and added only
//! inside a modulation mask. The grid gives the renderer enough local
//! expressive power to explain baked-in dark artifacts as lighting.
//!
//! Rendering is linear in both the coefficients and the albedo, so every
//! gradient here is analytic and exact.

use crate::error::{Error, Result};
use crate::sh::{
    sh_basis, shade_texel_with_basis, shading_no_albedo, ShCoeffs, BASIS_BAND, BASIS_COUNT,
    COEFF_COUNT, LAMBERT_BAND,
};
use crate::uvfield::{axis_taps, UvField};
use std::f64::consts::PI;

/// Weight of the smoothness term inside [`TexelGridLight::reg_loss_and_grad`].
pub const TV_WEIGHT: f64 = 0.1;
/// Default lattice stride for the regularizers.
pub const DEFAULT_REG_STRIDE: usize = 4;

#[derive(Debug, Clone)]
pub struct TexelGridLight {
    gamma_global: ShCoeffs,
    grid: Vec<ShCoeffs>,
    grid_w: usize,
    grid_h: usize,
    cell_size: usize,
    mask: UvField,
}

/// Gradient of a scalar loss with respect to the lighting parameters.
#[derive(Debug, Clone)]
pub struct LightingGradient {
    pub d_global: [f64; COEFF_COUNT],
    pub d_grid: Vec<[f64; COEFF_COUNT]>,
}

impl LightingGradient {
    pub fn zeros(light: &TexelGridLight) -> Self {
        Self { d_global: [0.0; COEFF_COUNT], d_grid: vec![[0.0; COEFF_COUNT]; light.grid.len()] }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &LightingGradient, s: f64) {
        assert_eq!(self.d_grid.len(), other.d_grid.len());
        for (a, b) in self.d_global.iter_mut().zip(other.d_global.iter()) {
            *a += s * b;
        }
        for (cell, ocell) in self.d_grid.iter_mut().zip(other.d_grid.iter()) {
            for (a, b) in cell.iter_mut().zip(ocell.iter()) {
                *a += s * b;
            }
        }
    }

    pub fn zero_grid(&mut self) {
        for cell in self.d_grid.iter_mut() {
            *cell = [0.0; COEFF_COUNT];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_global.iter().all(|v| v.is_finite())
            && self.d_grid.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Bilinear footprint of a texel on the grid: four cell indices and weights.
#[derive(Debug, Clone, Copy)]
struct GridTaps {
    cells: [usize; 4],
    weights: [f64; 4],
}

impl TexelGridLight {
    /// Zero-initialized grid sized `ceil(H/g) x ceil(W/g)` for the mask's
    /// texture dims.
    pub fn new(gamma_global: ShCoeffs, cell_size: usize, mask: UvField) -> Result<Self> {
        if cell_size == 0 {
            return Err(Error::InvalidInput("grid cell size must be >= 1".into()));
        }
        if mask.channels() != 1 {
            return Err(Error::DimMismatch("modulation mask must be 1-channel".into()));
        }
        if mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::InvalidInput("mask values must lie in [0, 1]".into()));
        }
        let grid_w = mask.width().div_ceil(cell_size);
        let grid_h = mask.height().div_ceil(cell_size);
        Ok(Self {
            gamma_global,
            grid: vec![ShCoeffs::zeros(); grid_w * grid_h],
            grid_w,
            grid_h,
            cell_size,
            mask,
        })
    }

    /// Rebuild from serialized parts: a 1x1x27 global field and a
    /// `grid_h x grid_w x 27` grid field.
    pub fn from_fields(
        global: &UvField,
        grid: &UvField,
        cell_size: usize,
        mask: UvField,
    ) -> Result<Self> {
        if global.channels() != COEFF_COUNT || global.width() != 1 || global.height() != 1 {
            return Err(Error::DimMismatch("global light must be a 1x1x27 field".into()));
        }
        if grid.channels() != COEFF_COUNT {
            return Err(Error::DimMismatch("lighting grid field must have 27 channels".into()));
        }
        let mut light = Self::new(ShCoeffs::from_slice(global.data())?, cell_size, mask)?;
        if (grid.height(), grid.width()) != (light.grid_h, light.grid_w) {
            return Err(Error::DimMismatch(format!(
                "grid {}x{} inconsistent with texture {}x{} at cell size {}",
                grid.height(),
                grid.width(),
                light.height(),
                light.width(),
                cell_size
            )));
        }
        for j in 0..light.grid_h {
            for i in 0..light.grid_w {
                light.grid[j * light.grid_w + i] = ShCoeffs::from_slice(grid.texel(i, j))?;
            }
        }
        Ok(light)
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn mask(&self) -> &UvField {
        &self.mask
    }

    pub fn gamma_global(&self) -> &ShCoeffs {
        &self.gamma_global
    }

    pub fn set_gamma_global(&mut self, gamma: ShCoeffs) {
        self.gamma_global = gamma;
    }

    pub fn cell(&self, col: usize, row: usize) -> &ShCoeffs {
        &self.grid[row * self.grid_w + col]
    }

    pub fn set_cell(&mut self, col: usize, row: usize, coeffs: ShCoeffs) {
        self.grid[row * self.grid_w + col] = coeffs;
    }

    /// Grid parameters as a `grid_h x grid_w x 27` field for serialization.
    pub fn grid_as_field(&self) -> UvField {
        let mut data = Vec::with_capacity(self.grid.len() * COEFF_COUNT);
        for cell in &self.grid {
            data.extend_from_slice(&cell.0);
        }
        UvField::from_vec(self.grid_h, self.grid_w, COEFF_COUNT, data).expect("finite grid")
    }

    pub fn global_as_field(&self) -> UvField {
        self.gamma_global.as_field()
    }

    /// Bilinear taps of texel `(u, v)` on the grid. Cell centers sit at
    /// `((i + 0.5) * g, (j + 0.5) * g)` in texel coordinates, edge-clamped.
    fn grid_taps(&self, u: usize, v: usize) -> GridTaps {
        let gx = (u as f64 + 0.5) / self.cell_size as f64;
        let gy = (v as f64 + 0.5) / self.cell_size as f64;
        let (x0, x1, fx) = axis_taps(gx, self.grid_w);
        let (y0, y1, fy) = axis_taps(gy, self.grid_h);
        GridTaps {
            cells: [
                y0 * self.grid_w + x0,
                y0 * self.grid_w + x1,
                y1 * self.grid_w + x0,
                y1 * self.grid_w + x1,
            ],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    /// The mask-modulated local term `gamma^V(u, v) * M[v][u]`.
    fn local_grid_term(&self, taps: &GridTaps, modulation: f64) -> ShCoeffs {
        let mut out = [0.0; COEFF_COUNT];
        if modulation != 0.0 {
            for (cell, w) in taps.cells.iter().zip(taps.weights.iter()) {
                if *w == 0.0 {
                    continue;
                }
                let src = &self.grid[*cell].0;
                let wm = w * modulation;
                for k in 0..COEFF_COUNT {
                    out[k] += wm * src[k];
                }
            }
        }
        ShCoeffs(out)
    }

    /// Effective coefficients at a texel:
    /// `gamma = gamma_global + interp(grid)(u, v) * M[v][u]`.
    pub fn local_coeffs(&self, u: usize, v: usize) -> ShCoeffs {
        let taps = self.grid_taps(u, v);
        let m = self.mask.texel(u, v)[0];
        self.gamma_global.add(&self.local_grid_term(&taps, m))
    }

    /// Forward render of an albedo/normal pair under this light.
    pub fn render(&self, albedo: &UvField, normals: &UvField) -> Result<UvField> {
        self.check_dims(albedo, "albedo")?;
        self.check_dims(normals, "normals")?;
        crate::sh::shade_field(albedo, normals, |u, v| self.local_coeffs(u, v))
    }

    /// Shading field: the per-texel lighting response at unit albedo.
    pub fn shading(&self, normals: &UvField) -> Result<UvField> {
        let ones = UvField::filled(self.height(), self.width(), 3, 1.0);
        self.render(&ones, normals)
    }

    fn check_dims(&self, field: &UvField, name: &str) -> Result<()> {
        if (field.height(), field.width()) != (self.height(), self.width()) {
            return Err(Error::DimMismatch(format!(
                "{name} is {}x{}, light is {}x{}",
                field.height(),
                field.width(),
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    fn count_valid(valid: &UvField) -> Result<usize> {
        let n = valid.data().iter().filter(|&&m| m > 0.5).count();
        if n == 0 {
            return Err(Error::Empty("no valid texels in photometric loss"));
        }
        Ok(n)
    }

    /// Mean squared color error between the render and `target` over texels
    /// where `valid > 0.5`.
    pub fn photometric_loss(
        &self,
        albedo: &UvField,
        normals: &UvField,
        target: &UvField,
        valid: &UvField,
    ) -> Result<f64> {
        self.check_dims(albedo, "albedo")?;
        self.check_dims(normals, "normals")?;
        self.check_dims(target, "target")?;
        self.check_dims(valid, "valid")?;
        let n_valid = Self::count_valid(valid)?;
        let (h, w) = (self.height(), self.width());
        let mut loss = 0.0;
        for v in 0..h {
            for u in 0..w {
                if valid.texel(u, v)[0] <= 0.5 {
                    continue;
                }
                let a = albedo.texel(u, v);
                let n = normals.texel(u, v);
                let basis = sh_basis([n[0], n[1], n[2]]);
                let gamma = self.local_coeffs(u, v);
                let c = shade_texel_with_basis([a[0], a[1], a[2]], &basis, &gamma);
                let t = target.texel(u, v);
                for ch in 0..3 {
                    let r = c[ch] - t[ch];
                    loss += r * r;
                }
            }
        }
        Ok(loss / n_valid as f64)
    }

    /// Photometric loss plus analytic gradients with respect to the lighting
    /// parameters and the albedo. The loss chain rule contributes
    /// `2 (render - target) / n_valid` per channel; rendering is linear in
    /// the coefficients and in the albedo, so both gradients are exact.
    pub fn loss_gradients(
        &self,
        albedo: &UvField,
        normals: &UvField,
        target: &UvField,
        valid: &UvField,
    ) -> Result<(LightingGradient, UvField, f64)> {
        self.check_dims(albedo, "albedo")?;
        self.check_dims(normals, "normals")?;
        self.check_dims(target, "target")?;
        self.check_dims(valid, "valid")?;
        let n_valid = Self::count_valid(valid)? as f64;
        let (h, w) = (self.height(), self.width());
        let mut grad = LightingGradient::zeros(self);
        let mut albedo_grad = UvField::zeros(h, w, 3);
        let mut loss = 0.0;
        for v in 0..h {
            for u in 0..w {
                if valid.texel(u, v)[0] <= 0.5 {
                    continue;
                }
                let a = albedo.texel(u, v);
                let n = normals.texel(u, v);
                let basis = sh_basis([n[0], n[1], n[2]]);
                let taps = self.grid_taps(u, v);
                let m = self.mask.texel(u, v)[0];
                let gamma = self.gamma_global.add(&self.local_grid_term(&taps, m));
                let c = shade_texel_with_basis([a[0], a[1], a[2]], &basis, &gamma);
                let t = target.texel(u, v);

                let mut dldc = [0.0f64; 3];
                for ch in 0..3 {
                    let r = c[ch] - t[ch];
                    loss += r * r;
                    dldc[ch] = 2.0 * r / n_valid;
                }

                // d c_ch / d gamma[3b + ch] = (a_ch / pi) * B_b * Y_b(n)
                for b in 0..BASIS_COUNT {
                    let bw = LAMBERT_BAND[BASIS_BAND[b]] * basis[b];
                    for ch in 0..3 {
                        let k = dldc[ch] * a[ch] / PI * bw;
                        if k == 0.0 {
                            continue;
                        }
                        grad.d_global[3 * b + ch] += k;
                        if m != 0.0 {
                            for (cell, tw) in taps.cells.iter().zip(taps.weights.iter()) {
                                grad.d_grid[*cell][3 * b + ch] += k * tw * m;
                            }
                        }
                    }
                }

                // d c_ch / d a_ch = (1 / pi) * sum_b B_b * gamma[3b+ch] * Y_b(n)
                let s = shading_no_albedo(&basis, &gamma);
                let ag = albedo_grad.texel_mut(u, v);
                for ch in 0..3 {
                    ag[ch] = dldc[ch] * s[ch] / PI;
                }
            }
        }
        Ok((grad, albedo_grad, loss / n_valid))
    }

    /// Smoothness of the effective local coefficients over a strided texel
    /// lattice: squared differences against the up and left lattice
    /// neighbors. The global term cancels in every difference.
    pub fn tv_loss_and_grad(&self, normals: &UvField, stride: usize) -> Result<(f64, LightingGradient)> {
        self.check_dims(normals, "normals")?;
        let stride = stride.max(1);
        let (h, w) = (self.height(), self.width());
        let mut grad = LightingGradient::zeros(self);
        let mut loss = 0.0;
        let mut lattice = Vec::new();
        for v in (0..h).step_by(stride) {
            for u in (0..w).step_by(stride) {
                lattice.push((u, v));
            }
        }
        for &(u, v) in &lattice {
            let here = self.local_coeffs(u, v);
            if v >= stride {
                loss += self.tv_pair(&here, u, v, u, v - stride, &mut grad);
            }
            if u >= stride {
                loss += self.tv_pair(&here, u, v, u - stride, v, &mut grad);
            }
        }
        Ok((loss, grad))
    }

    fn tv_pair(
        &self,
        here: &ShCoeffs,
        u: usize,
        v: usize,
        nu: usize,
        nv: usize,
        grad: &mut LightingGradient,
    ) -> f64 {
        let there = self.local_coeffs(nu, nv);
        let mut diff = [0.0; COEFF_COUNT];
        let mut loss = 0.0;
        for k in 0..COEFF_COUNT {
            diff[k] = here.0[k] - there.0[k];
            loss += diff[k] * diff[k];
        }
        let mut dd = [0.0; COEFF_COUNT];
        for k in 0..COEFF_COUNT {
            dd[k] = 2.0 * diff[k];
        }
        self.accumulate_coeff_grad(u, v, &dd, 1.0, grad);
        self.accumulate_coeff_grad(nu, nv, &dd, -1.0, grad);
        loss
    }

    /// Scatter `scale * d(loss)/d(gamma_local(u, v))` into the parameter
    /// gradient: weight 1 on the global term, bilinear weight times mask on
    /// each supporting grid cell.
    fn accumulate_coeff_grad(
        &self,
        u: usize,
        v: usize,
        dgamma: &[f64; COEFF_COUNT],
        scale: f64,
        grad: &mut LightingGradient,
    ) {
        for k in 0..COEFF_COUNT {
            grad.d_global[k] += scale * dgamma[k];
        }
        let m = self.mask.texel(u, v)[0];
        if m == 0.0 {
            return;
        }
        let taps = self.grid_taps(u, v);
        for (cell, tw) in taps.cells.iter().zip(taps.weights.iter()) {
            let wm = scale * tw * m;
            if wm == 0.0 {
                continue;
            }
            for k in 0..COEFF_COUNT {
                grad.d_grid[*cell][k] += wm * dgamma[k];
            }
        }
    }

    /// Penalizes positive shading of the mask-modulated grid term: on the
    /// strided lattice, `sum_ch max(0, s_ch)^2` where `s` is the SH shading
    /// of `gamma^V * M` at the texel's normal, without albedo and without
    /// the 1/pi factor. Keeps the local lights dark.
    pub fn neg_shading_loss_and_grad(
        &self,
        normals: &UvField,
        stride: usize,
    ) -> Result<(f64, LightingGradient)> {
        self.check_dims(normals, "normals")?;
        let stride = stride.max(1);
        let (h, w) = (self.height(), self.width());
        let mut grad = LightingGradient::zeros(self);
        let mut loss = 0.0;
        for v in (0..h).step_by(stride) {
            for u in (0..w).step_by(stride) {
                let m = self.mask.texel(u, v)[0];
                if m == 0.0 {
                    continue;
                }
                let taps = self.grid_taps(u, v);
                let modulated = self.local_grid_term(&taps, m);
                let n = normals.texel(u, v);
                let basis = sh_basis([n[0], n[1], n[2]]);
                let s = shading_no_albedo(&basis, &modulated);
                for ch in 0..3 {
                    if s[ch] <= 0.0 {
                        continue;
                    }
                    loss += s[ch] * s[ch];
                    let f = 2.0 * s[ch];
                    for b in 0..BASIS_COUNT {
                        let dds = LAMBERT_BAND[BASIS_BAND[b]] * basis[b];
                        for (cell, tw) in taps.cells.iter().zip(taps.weights.iter()) {
                            grad.d_grid[*cell][3 * b + ch] += f * dds * tw * m;
                        }
                    }
                }
            }
        }
        Ok((loss, grad))
    }

    /// Combined regularizer `0.1 * tv + neg` with its gradient.
    pub fn reg_loss_and_grad(&self, normals: &UvField, stride: usize) -> Result<(f64, LightingGradient)> {
        let (l_tv, g_tv) = self.tv_loss_and_grad(normals, stride)?;
        let (l_neg, mut grad) = self.neg_shading_loss_and_grad(normals, stride)?;
        grad.add_scaled(&g_tv, TV_WEIGHT);
        Ok((TV_WEIGHT * l_tv + l_neg, grad))
    }

    /// Gradient-descent step `theta -= lr * grad`. The mask and cell size
    /// never change here.
    pub fn apply_step(&mut self, grad: &LightingGradient, lr: f64) {
        assert_eq!(grad.d_grid.len(), self.grid.len());
        for k in 0..COEFF_COUNT {
            self.gamma_global.0[k] -= lr * grad.d_global[k];
        }
        for (cell, g) in self.grid.iter_mut().zip(grad.d_grid.iter()) {
            for k in 0..COEFF_COUNT {
                cell.0[k] -= lr * g[k];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gamma_global.0.iter().all(|v| v.is_finite())
            && self.grid.iter().all(|c| c.0.iter().all(|v| v.is_finite()))
    }
}
