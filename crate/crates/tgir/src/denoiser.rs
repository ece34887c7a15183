//! A tiny fully-convolutional residual denoiser trained on procedural
//! reflectance patches: the desk-scale learned prior.
//!
//! The network maps a noisy 7-channel stack plus a 2-channel UV-coordinate
//! condition to a noise prediction of the same spatial shape. Three
//! residual levels at constant width, each with a sinusoidal step embedding
//! added as a per-channel bias; no downsampling, so one set of weights runs
//! at any resolution at or above its receptive field.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::nn::{
    conv3x3_backward, conv3x3_forward, linear_backward_params, linear_forward, relu_backward,
    relu_inplace, time_features, Adam, Tensor3,
};
use crate::synthetic::{gen_reflectance, SceneSpec};
use crate::uvfield::{UvField, STACK_CHANNELS};

pub const INPUT_CHANNELS: usize = STACK_CHANNELS + 2;
const WEIGHTS_MAGIC: &[u8; 4] = b"TGDN";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserArch {
    pub width: usize,
    pub levels: usize,
    pub emb_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { width: 32, levels: 3, emb_dim: 32 }
    }
}

#[derive(Debug, Clone)]
struct LayoutEntry {
    name: String,
    offset: usize,
    len: usize,
}

fn build_layout(arch: &DenoiserArch) -> (Vec<LayoutEntry>, usize) {
    let c = arch.width;
    let e = arch.emb_dim;
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, len: usize, offset: &mut usize, entries: &mut Vec<LayoutEntry>| {
        entries.push(LayoutEntry { name, offset: *offset, len });
        *offset += len;
    };
    push("conv_in.w".into(), c * INPUT_CHANNELS * 9, &mut offset, &mut entries);
    push("conv_in.b".into(), c, &mut offset, &mut entries);
    for l in 0..arch.levels {
        push(format!("block{l}.temb.w"), c * e, &mut offset, &mut entries);
        push(format!("block{l}.temb.b"), c, &mut offset, &mut entries);
        push(format!("block{l}.conv_a.w"), c * c * 9, &mut offset, &mut entries);
        push(format!("block{l}.conv_a.b"), c, &mut offset, &mut entries);
        push(format!("block{l}.conv_b.w"), c * c * 9, &mut offset, &mut entries);
        push(format!("block{l}.conv_b.b"), c, &mut offset, &mut entries);
    }
    push("conv_out.w".into(), STACK_CHANNELS * c * 9, &mut offset, &mut entries);
    push("conv_out.b".into(), STACK_CHANNELS, &mut offset, &mut entries);
    (entries, offset)
}

#[derive(Debug, Clone)]
pub struct PatchDenoiser {
    arch: DenoiserArch,
    params: Vec<f32>,
    layout: Vec<LayoutEntry>,
}

struct ForwardCache {
    input: Tensor3,
    pre_in: Tensor3,
    block_inputs: Vec<Tensor3>,
    pre_act: Vec<Tensor3>,
    act: Vec<Tensor3>,
    h_final: Tensor3,
    tfeat: Vec<f32>,
}

impl PatchDenoiser {
    /// He-initialized network; the output convolution starts at zero so the
    /// untrained model predicts zero noise.
    pub fn init(arch: DenoiserArch, seed: u64) -> Self {
        let (layout, total) = build_layout(&arch);
        let mut params = vec![0.0f32; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in &layout {
            if entry.name == "conv_out.w" || entry.name.ends_with(".b") {
                continue;
            }
            let fan_in = if entry.name.contains("temb") {
                arch.emb_dim
            } else if entry.name == "conv_in.w" {
                INPUT_CHANNELS * 9
            } else {
                arch.width * 9
            };
            let std = (2.0 / fan_in as f64).sqrt();
            for v in params[entry.offset..entry.offset + entry.len].iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (z * std) as f32;
            }
        }
        Self { arch, params, layout }
    }

    pub fn arch(&self) -> &DenoiserArch {
        self.arch_ref()
    }

    fn arch_ref(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn slice(&self, name: &str) -> &[f32] {
        let e = self.layout.iter().find(|e| e.name == name).expect("layout entry");
        &self.params[e.offset..e.offset + e.len]
    }

    fn grad_slice<'a>(&self, grads: &'a mut [f32], name: &str) -> &'a mut [f32] {
        let e = self.layout.iter().find(|e| e.name == name).expect("layout entry");
        &mut grads[e.offset..e.offset + e.len]
    }

    /// Forward pass; `input` carries the noisy stack plus condition
    /// channels.
    pub fn forward(&self, input: &Tensor3, t: usize) -> Tensor3 {
        self.forward_impl(input, t, false).0
    }

    fn forward_impl(&self, input: &Tensor3, t: usize, keep: bool) -> (Tensor3, Option<ForwardCache>) {
        assert_eq!(input.c, INPUT_CHANNELS);
        let c = self.arch.width;
        let tfeat = time_features(t, self.arch.emb_dim);

        let pre_in = conv3x3_forward(self.slice("conv_in.w"), self.slice("conv_in.b"), INPUT_CHANNELS, c, input);
        let mut h = pre_in.clone();
        relu_inplace(&mut h);

        let mut block_inputs = Vec::new();
        let mut pre_act = Vec::new();
        let mut act = Vec::new();
        for l in 0..self.arch.levels {
            if keep {
                block_inputs.push(h.clone());
            }
            let temb = linear_forward(
                self.slice(&format!("block{l}.temb.w")),
                self.slice(&format!("block{l}.temb.b")),
                self.arch.emb_dim,
                c,
                &tfeat,
            );
            let mut ya = conv3x3_forward(
                self.slice(&format!("block{l}.conv_a.w")),
                self.slice(&format!("block{l}.conv_a.b")),
                c,
                c,
                &h,
            );
            for ch in 0..c {
                let bias = temb[ch];
                for v in ya.plane_mut(ch) {
                    *v += bias;
                }
            }
            let mut a = ya.clone();
            relu_inplace(&mut a);
            let yb = conv3x3_forward(
                self.slice(&format!("block{l}.conv_b.w")),
                self.slice(&format!("block{l}.conv_b.b")),
                c,
                c,
                &a,
            );
            for (hv, yv) in h.data.iter_mut().zip(yb.data.iter()) {
                *hv += yv;
            }
            if keep {
                pre_act.push(ya);
                act.push(a);
            }
        }
        let out = conv3x3_forward(self.slice("conv_out.w"), self.slice("conv_out.b"), c, STACK_CHANNELS, &h);
        let cache = keep.then(|| ForwardCache {
            input: input.clone(),
            pre_in,
            block_inputs,
            pre_act,
            act,
            h_final: h,
            tfeat,
        });
        (out, cache)
    }

    /// Backward pass from the output gradient; parameter gradients
    /// accumulate into `grads` (same layout as the flat parameter vector).
    fn backward(&self, cache: &ForwardCache, grad_out: &Tensor3, grads: &mut [f32]) {
        let c = self.arch.width;
        let mut g_h = {
            let (gw, gb) = grad_pair(&self.layout, grads, "conv_out.w", "conv_out.b");
            conv3x3_backward(self.slice("conv_out.w"), c, STACK_CHANNELS, &cache.h_final, grad_out, gw, gb)
        };
        for l in (0..self.arch.levels).rev() {
            // h_out = h_in + conv_b(relu(conv_a(h_in) + temb))
            let mut g_a = {
                let (gw, gb) =
                    grad_pair(&self.layout, grads, &format!("block{l}.conv_b.w"), &format!("block{l}.conv_b.b"));
                conv3x3_backward(
                    self.slice(&format!("block{l}.conv_b.w")),
                    c,
                    c,
                    &cache.act[l],
                    &g_h,
                    gw,
                    gb,
                )
            };
            relu_backward(&cache.pre_act[l], &mut g_a);
            // Time-embedding bias gradient: per-channel sum.
            let temb_gout: Vec<f32> = (0..c).map(|ch| g_a.plane(ch).iter().sum()).collect();
            {
                let (gw, gb) =
                    grad_pair(&self.layout, grads, &format!("block{l}.temb.w"), &format!("block{l}.temb.b"));
                linear_backward_params(self.arch.emb_dim, c, &cache.tfeat, &temb_gout, gw, gb);
            }
            let g_through = {
                let (gw, gb) =
                    grad_pair(&self.layout, grads, &format!("block{l}.conv_a.w"), &format!("block{l}.conv_a.b"));
                conv3x3_backward(
                    self.slice(&format!("block{l}.conv_a.w")),
                    c,
                    c,
                    &cache.block_inputs[l],
                    &g_a,
                    gw,
                    gb,
                )
            };
            for (h, t) in g_h.data.iter_mut().zip(g_through.data.iter()) {
                *h += t;
            }
        }
        relu_backward(&cache.pre_in, &mut g_h);
        let (gw, gb) = grad_pair(&self.layout, grads, "conv_in.w", "conv_in.b");
        let _ = conv3x3_backward(self.slice("conv_in.w"), INPUT_CHANNELS, c, &cache.input, &g_h, gw, gb);
    }

    /// Serialize into the versioned weight container: magic, version, arch,
    /// a named tensor table, then the f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        for v in [
            WEIGHTS_VERSION,
            self.arch.width as u32,
            self.arch.levels as u32,
            self.arch.emb_dim as u32,
            self.layout.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.layout {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.offset as u32).to_le_bytes());
            out.extend_from_slice(&(e.len as u32).to_le_bytes());
        }
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], label: &str) -> Result<Self> {
        let need = |need: usize, have: usize| Error::Truncated { path: label.into(), need, have };
        if bytes.len() < 24 {
            return Err(need(24, bytes.len()));
        }
        if &bytes[0..4] != WEIGHTS_MAGIC {
            return Err(Error::BadMagic { path: label.into(), expected: "TGDN" });
        }
        let rd = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if rd(4) != WEIGHTS_VERSION {
            return Err(Error::InvalidInput(format!("unsupported weights version {}", rd(4))));
        }
        let arch = DenoiserArch {
            width: rd(8) as usize,
            levels: rd(12) as usize,
            emb_dim: rd(16) as usize,
        };
        let n_entries = rd(20) as usize;
        let (layout, total) = build_layout(&arch);
        if n_entries != layout.len() {
            return Err(Error::InvalidInput(format!(
                "weight table has {n_entries} entries, arch expects {}",
                layout.len()
            )));
        }
        let mut pos = 24usize;
        for expect in &layout {
            if bytes.len() < pos + 4 {
                return Err(need(pos + 4, bytes.len()));
            }
            let name_len = rd(pos) as usize;
            pos += 4;
            if bytes.len() < pos + name_len + 8 {
                return Err(need(pos + name_len + 8, bytes.len()));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| Error::InvalidInput("bad tensor name".into()))?;
            pos += name_len;
            let offset = rd(pos) as usize;
            let len = rd(pos + 4) as usize;
            pos += 8;
            if name != expect.name || offset != expect.offset || len != expect.len {
                return Err(Error::InvalidInput(format!(
                    "weight table mismatch at {name}: ({offset}, {len}) vs ({}, {})",
                    expect.offset, expect.len
                )));
            }
        }
        let payload_need = pos + total * 4;
        if bytes.len() < payload_need {
            return Err(need(payload_need, bytes.len()));
        }
        let params: Vec<f32> = bytes[pos..payload_need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite weights".into()));
        }
        Ok(Self { arch, params, layout })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Disjoint (weight, bias) gradient views for one layer; the bias entry is
/// laid out directly after its weight.
fn grad_pair<'g>(
    layout: &[LayoutEntry],
    grads: &'g mut [f32],
    wname: &str,
    bname: &str,
) -> (&'g mut [f32], &'g mut [f32]) {
    let we = layout.iter().find(|e| e.name == wname).expect("weight entry");
    let be = layout.iter().find(|e| e.name == bname).expect("bias entry");
    assert_eq!(we.offset + we.len, be.offset, "bias must follow its weight");
    let region = &mut grads[we.offset..be.offset + be.len];
    region.split_at_mut(we.len)
}

impl Denoiser for PatchDenoiser {
    fn predict_noise(&self, x_t: &UvField, t: usize, cond: &UvField, _sched: &DiffusionSchedule) -> UvField {
        assert_eq!(x_t.channels(), STACK_CHANNELS, "denoiser expects a 7-channel stack");
        assert_eq!(cond.channels(), 2, "condition must be the 2-channel UV field");
        let (h, w) = (x_t.height(), x_t.width());
        let mut data = vec![0.0f32; INPUT_CHANNELS * h * w];
        let hw = h * w;
        for (i, texel) in x_t.data().chunks_exact(STACK_CHANNELS).enumerate() {
            for ch in 0..STACK_CHANNELS {
                data[ch * hw + i] = texel[ch] as f32;
            }
        }
        for (i, texel) in cond.data().chunks_exact(2).enumerate() {
            data[STACK_CHANNELS * hw + i] = texel[0] as f32;
            data[(STACK_CHANNELS + 1) * hw + i] = texel[1] as f32;
        }
        let input = Tensor3::from_vec(INPUT_CHANNELS, h, w, data);
        let out = self.forward(&input, t);
        let mut field = vec![0.0f64; STACK_CHANNELS * h * w];
        for ch in 0..STACK_CHANNELS {
            let plane = out.plane(ch);
            for i in 0..hw {
                field[i * STACK_CHANNELS + ch] = plane[i] as f64;
            }
        }
        UvField::from_vec(h, w, STACK_CHANNELS, field).expect("finite denoiser output")
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: DenoiserArch,
    /// Patch side length, 32 or 64.
    pub patch: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    /// Diffusion schedule length used to draw noising steps.
    pub schedule_steps: usize,
    /// Training and held-out identity counts.
    pub pool: usize,
    pub holdout: usize,
    /// Resolution of the procedural source stacks patches are cropped from.
    pub source_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: DenoiserArch::default(),
            patch: 32,
            batch: 8,
            steps: 300,
            lr: 1e-3,
            seed: 0,
            schedule_steps: 1000,
            pool: 12,
            holdout: 4,
            source_resolution: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    /// Held-out denoising MSE of the trained network.
    pub holdout_trained: f64,
    /// Same metric for the freshly initialized network.
    pub holdout_untrained: f64,
    /// Baseline that predicts the noisy input itself.
    pub holdout_identity: f64,
}

struct PatchSet {
    inputs: Vec<Tensor3>,
    noises: Vec<Tensor3>,
    ts: Vec<usize>,
}

fn identity_stacks(cfg: &TrainConfig, first_seed: u64, count: usize) -> Result<Vec<(UvField, usize)>> {
    let mut out = Vec::with_capacity(count);
    let mut rng = ChaCha8Rng::seed_from_u64(first_seed);
    for i in 0..count {
        let tone = [
            rng.random_range(0.35..0.75),
            rng.random_range(0.3..0.6),
            rng.random_range(0.25..0.55),
        ];
        let spec = SceneSpec {
            resolution: cfg.source_resolution,
            seed: first_seed.wrapping_add(i as u64 * 7919),
            base_tone: tone,
            shadow: None,
            ..SceneSpec::default()
        };
        out.push((gen_reflectance(&spec)?.into_field(), cfg.source_resolution));
    }
    Ok(out)
}

fn draw_patches(
    rng: &mut ChaCha8Rng,
    stacks: &[(UvField, usize)],
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    count: usize,
) -> PatchSet {
    let p = cfg.patch;
    let mut inputs = Vec::with_capacity(count);
    let mut noises = Vec::with_capacity(count);
    let mut ts = Vec::with_capacity(count);
    for _ in 0..count {
        let (stack, res) = &stacks[rng.random_range(0..stacks.len())];
        let res = *res;
        let oy = rng.random_range(0..=res - p);
        let ox = rng.random_range(0..=res - p);
        let t = rng.random_range(1..=cfg.schedule_steps);
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let hw = p * p;
        let mut input = Tensor3::zeros(INPUT_CHANNELS, p, p);
        let mut noise = Tensor3::zeros(STACK_CHANNELS, p, p);
        for y in 0..p {
            for x in 0..p {
                let texel = stack.texel(ox + x, oy + y);
                let i = y * p + x;
                for ch in 0..STACK_CHANNELS {
                    let z: f64 = StandardNormal.sample(rng);
                    let z = z as f32;
                    noise.data[ch * hw + i] = z;
                    input.data[ch * hw + i] = sa * texel[ch] as f32 + sn * z;
                }
                input.data[STACK_CHANNELS * hw + i] = ((ox + x) as f32 + 0.5) / res as f32;
                input.data[(STACK_CHANNELS + 1) * hw + i] = ((oy + y) as f32 + 0.5) / res as f32;
            }
        }
        inputs.push(input);
        noises.push(noise);
        ts.push(t);
    }
    PatchSet { inputs, noises, ts }
}

fn eval_mse(model: &PatchDenoiser, set: &PatchSet) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((input, noise), &t) in set.inputs.iter().zip(&set.noises).zip(&set.ts) {
        let out = model.forward(input, t);
        total += out
            .data
            .iter()
            .zip(&noise.data)
            .map(|(a, b)| ((a - b) as f64) * ((a - b) as f64))
            .sum::<f64>();
        n += out.data.len();
    }
    total / n as f64
}

/// MSE of the baseline that predicts the noisy stack itself.
fn identity_mse(set: &PatchSet) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (input, noise) in set.inputs.iter().zip(&set.noises) {
        let hw = input.h * input.w;
        let stack = &input.data[0..STACK_CHANNELS * hw];
        total += stack
            .iter()
            .zip(&noise.data)
            .map(|(a, b)| ((a - b) as f64) * ((a - b) as f64))
            .sum::<f64>();
        n += noise.data.len();
    }
    total / n as f64
}

/// Train the patch denoiser on procedural reflectance patches by Adam on
/// the noise-prediction MSE. Deterministic in the seed; errors out if the
/// loss goes non-finite.
pub fn train_patch_denoiser(cfg: &TrainConfig) -> Result<(PatchDenoiser, TrainReport)> {
    if cfg.patch != 32 && cfg.patch != 64 {
        return Err(Error::Config("patch size must be 32 or 64".into()));
    }
    if cfg.patch > cfg.source_resolution {
        return Err(Error::Config("patch larger than source stacks".into()));
    }
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::Config("batch and steps must be positive".into()));
    }
    let sched = DiffusionSchedule::new(cfg.schedule_steps)?;
    let train_stacks = identity_stacks(cfg, cfg.seed.wrapping_add(101), cfg.pool)?;
    let holdout_stacks = identity_stacks(cfg, cfg.seed.wrapping_add(90001), cfg.holdout)?;

    let mut holdout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7));
    let holdout_set = draw_patches(&mut holdout_rng, &holdout_stacks, cfg, &sched, 64);

    let mut model = PatchDenoiser::init(cfg.arch, cfg.seed.wrapping_add(13));
    let holdout_untrained = eval_mse(&model, &holdout_set);
    let holdout_identity = identity_mse(&holdout_set);

    let mut adam = Adam::new(cfg.lr, model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(29));
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_patches(&mut rng, &train_stacks, cfg, &sched, cfg.batch);
        // Per-sample forward/backward in parallel; gradients merged in
        // sample order keep the run bit-deterministic.
        let results: Vec<(Vec<f32>, f64)> = (0..cfg.batch)
            .into_par_iter()
            .map(|i| {
                let input = &batch.inputs[i];
                let noise = &batch.noises[i];
                let (out, cache) = model.forward_impl(input, batch.ts[i], true);
                let cache = cache.expect("cache requested");
                let numel = out.data.len() as f64;
                let mut grad_out = Tensor3::zeros(out.c, out.h, out.w);
                let mut loss = 0.0;
                for (k, (o, e)) in out.data.iter().zip(&noise.data).enumerate() {
                    let d = (o - e) as f64;
                    loss += d * d;
                    grad_out.data[k] = (2.0 * d / numel) as f32;
                }
                let mut grads = vec![0.0f32; model.param_count()];
                model.backward(&cache, &grad_out, &mut grads);
                (grads, loss / numel)
            })
            .collect();
        let mut grads = vec![0.0f32; model.param_count()];
        let mut loss = 0.0;
        for (g, l) in &results {
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b / cfg.batch as f32;
            }
            loss += l / cfg.batch as f64;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(&mut model.params, &grads);
        loss_curve.push(loss);
    }
    let holdout_trained = eval_mse(&model, &holdout_set);
    Ok((model, TrainReport { loss_curve, holdout_trained, holdout_untrained, holdout_identity }))
}
