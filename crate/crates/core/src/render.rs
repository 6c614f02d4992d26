//! End-to-end rendering and training.
//!
//! A chunk of rays goes through: sampling, density lookup and opacity,
//! masking, feature lookup plus view embedding, packing (or duplication /
//! Poisson encoding), the spiking MLP, and compositing over the background.
//! [`ChunkTrace`] keeps every intermediate so the backward pass can walk the
//! same path in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{activate_density, activate_density_grad, sigmoid, Aabb, DensityActivation, DensityGrid, FeatureGrid, GridGradient};
use crate::metrics::{count_ops_snn, psnr, OpCount};
use crate::pack::{self, occupancy_stats, unpack_scatter, OccupancyStats, PackedBatch, PackingMode};
use crate::rays::{apply_mask, compute_alpha, compute_transmittance, leftover_transmittance, sample_along_ray, Camera, MaskedRay, MaskedSamples, Ray, RaySamples};
use crate::snn::{
    direct_encode, mean_decode, poisson_encode, smlp_backward, smlp_forward, ForwardTape, LifConfig, MlpGradients, Neuron,
    SpikeFn, SpikingMlp, SurrogateConfig,
};
use crate::tensor::Tensor3;
use crate::{Error, Result, Vec3};

/// RGB image with interleaved channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect(),
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &[[f64; 3]]) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Shape(format!("{} pixels for {width}x{height}", pixels.len())));
        }
        Ok(Self {
            width,
            height,
            data: pixels.iter().flat_map(|p| p.iter().map(|v| v.clamp(0.0, 1.0))).collect(),
        })
    }

    pub fn pixel(&self, index: usize) -> [f64; 3] {
        [self.data[3 * index], self.data[3 * index + 1], self.data[3 * index + 2]]
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixel(y as usize * self.width as usize + x as usize)
    }
}

/// A posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: ImageBuffer,
}

/// How samples fill the network's time axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// One survivor per time step along the ray.
    #[default]
    Aligned,
    /// Each survivor repeated for `T` steps, outputs averaged.
    Direct(usize),
    /// Each survivor turned into `T` Bernoulli spike vectors of `sigmoid(input)`.
    Poisson(usize),
}

impl Encoder {
    pub fn steps(&self) -> usize {
        match *self {
            Encoder::Aligned => 1,
            Encoder::Direct(t) | Encoder::Poisson(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Minimum transmittance for a sample to be queried.
    pub lambda1: f64,
    /// Minimum opacity for a sample to be queried.
    pub lambda2: f64,
    /// World-space step; half a voxel when unset.
    pub step_size: Option<f64>,
    pub packing: PackingMode,
    pub flip: bool,
    /// Order TCP rows by survivor count.
    pub sort: bool,
    pub encoder: Encoder,
    pub background: [f64; 3],
    pub chunk_size: usize,
    /// Seeds Poisson encoding during rendering.
    pub seed: u64,
    #[serde(skip)]
    pub spike_fn: SpikeFn,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1e-4,
            step_size: None,
            packing: PackingMode::Tcp,
            flip: false,
            sort: false,
            encoder: Encoder::Aligned,
            background: [1.0; 3],
            chunk_size: 4096,
            seed: 42,
            spike_fn: SpikeFn::Heaviside,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("mask thresholds must be >= 0".into()));
        }
        if self.step_size.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("step_size must be > 0".into()));
        }
        if self.encoder.steps() < 1 {
            return Err(Error::Config("encoder needs at least one time step".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be > 0".into()));
        }
        Ok(())
    }

    pub fn step_for(&self, scene: &Scene) -> f64 {
        self.step_size.unwrap_or(0.5 * scene.density.voxel_size())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    #[default]
    Lif,
    Relu,
    Identity,
}

/// Scene parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub aabb: Aabb,
    pub grid_dims: [usize; 3],
    pub feature_channels: usize,
    pub hidden: Vec<usize>,
    pub neuron: NeuronKind,
    pub lif: LifConfig,
    pub surrogate: SurrogateConfig,
    pub detach_reset: bool,
    /// Sinusoidal frequencies of the view-direction embedding.
    pub view_freqs: usize,
    pub density_activation: DensityActivation,
    /// Half-width of the uniform feature initialization.
    pub feature_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            aabb: Aabb::cube(1.0),
            grid_dims: [32; 3],
            feature_channels: 12,
            hidden: vec![32, 32],
            neuron: NeuronKind::Lif,
            lif: LifConfig::default(),
            surrogate: SurrogateConfig::default(),
            detach_reset: false,
            view_freqs: 4,
            density_activation: DensityActivation::default(),
            feature_init: 1e-2,
        }
    }
}

impl ModelConfig {
    pub fn neuron(&self) -> Neuron {
        match self.neuron {
            NeuronKind::Lif => Neuron::Lif(self.lif),
            NeuronKind::Relu => Neuron::Relu,
            NeuronKind::Identity => Neuron::Identity,
        }
    }
}

/// Width of [`view_embedding`].
pub fn view_embedding_width(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// `[d, sin(2^k d), cos(2^k d)]` for `k < freqs`.
pub fn view_embedding(dir: Vec3, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(view_embedding_width(freqs));
    out.extend_from_slice(&dir);
    for k in 0..freqs {
        let f = (1u64 << k) as f64;
        out.extend(dir.iter().map(|d| (f * d).sin()));
        out.extend(dir.iter().map(|d| (f * d).cos()));
    }
    out
}

/// Grids plus the colour network.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub density: DensityGrid,
    pub features: FeatureGrid,
    pub mlp: SpikingMlp,
    pub view_freqs: usize,
}

impl Scene {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let density = DensityGrid::zeros(cfg.grid_dims, cfg.aabb, cfg.density_activation)?;
        let features = FeatureGrid::random(cfg.grid_dims, cfg.feature_channels, cfg.aabb, cfg.feature_init, rng)?;
        let in_width = cfg.feature_channels + view_embedding_width(cfg.view_freqs);
        let mut mlp = SpikingMlp::new(in_width, &cfg.hidden, 3, cfg.neuron(), cfg.surrogate, rng)?;
        mlp.detach_reset = cfg.detach_reset;
        Ok(Self {
            density,
            features,
            mlp,
            view_freqs: cfg.view_freqs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if self.density.dims != self.features.dims || self.density.aabb != self.features.aabb {
            return Err(Error::Shape("density and feature grids disagree".into()));
        }
        let want = self.features.channels + view_embedding_width(self.view_freqs);
        if self.mlp.in_width() != want || self.mlp.out_width() != 3 {
            return Err(Error::Shape(format!(
                "network maps {} -> {}, scene needs {want} -> 3",
                self.mlp.in_width(),
                self.mlp.out_width()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.mlp.in_width()
    }

    pub fn zero_gradient(&self) -> SceneGradient {
        SceneGradient {
            density: self.density.gradient(),
            features: self.features.gradient(),
            mlp: self.mlp.zero_gradients(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradient {
    pub density: GridGradient,
    pub features: GridGradient,
    pub mlp: MlpGradients,
}

/// Per-ray record of the geometric stage.
#[derive(Clone, Debug)]
pub struct RayTrace {
    pub samples: RaySamples,
    pub raw_density: Vec<f64>,
    pub alphas: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub leftover: f64,
    pub masked: MaskedRay,
    /// `survivors x input_width` network inputs.
    pub inputs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum NetTrace {
    Aligned { batch: PackedBatch, tape: ForwardTape },
    /// Survivors flattened in ray order, one row each.
    Encoded { tape: ForwardTape, poisson: bool },
}

/// Everything produced while rendering one chunk.
#[derive(Clone, Debug)]
pub struct ChunkTrace {
    pub rays: Vec<RayTrace>,
    pub net: NetTrace,
    /// Per ray, `survivors x 3` colours.
    pub colors: Vec<Vec<f64>>,
    pub rgb: Vec<[f64; 3]>,
}

impl ChunkTrace {
    pub fn tape(&self) -> &ForwardTape {
        match &self.net {
            NetTrace::Aligned { tape, .. } | NetTrace::Encoded { tape, .. } => tape,
        }
    }

    pub fn queries(&self) -> usize {
        self.rays.iter().map(|r| r.masked.len()).sum()
    }

    pub fn packed(&self) -> Option<&PackedBatch> {
        match &self.net {
            NetTrace::Aligned { batch, .. } => Some(batch),
            NetTrace::Encoded { .. } => None,
        }
    }

    pub fn masked(&self) -> MaskedSamples {
        MaskedSamples {
            rays: self.rays.iter().map(|r| r.masked.clone()).collect(),
        }
    }
}

fn trace_geometry(scene: &Scene, ray: &Ray, cfg: &RenderConfig, step: f64) -> Result<RayTrace> {
    let samples = sample_along_ray(ray, &scene.density.aabb, step)?;
    let mut raw_density = Vec::with_capacity(samples.count());
    let mut alphas = Vec::with_capacity(samples.count());
    for (p, &d) in samples.positions.iter().zip(&samples.deltas) {
        let raw = scene.density.interp(*p)?;
        raw_density.push(raw);
        alphas.push(compute_alpha(activate_density(raw, scene.density.activation), d));
    }
    let transmittance = compute_transmittance(&alphas)?;
    let leftover = leftover_transmittance(&alphas);
    let masked = apply_mask(&samples, &alphas, &transmittance, cfg.lambda1, cfg.lambda2)?;
    let c = scene.features.channels;
    let width = scene.input_width();
    let view = view_embedding(ray.direction, scene.view_freqs);
    let mut inputs = vec![0.0; masked.len() * width];
    for (k, p) in masked.positions.iter().enumerate() {
        let row = &mut inputs[k * width..(k + 1) * width];
        scene.features.interp_into(&scene.features.stencil(*p)?, &mut row[..c]);
        row[c..].copy_from_slice(&view);
    }
    Ok(RayTrace {
        samples,
        raw_density,
        alphas,
        transmittance,
        leftover,
        masked,
        inputs,
    })
}

/// Renders one chunk and keeps the trace needed for backward.
pub fn forward_chunk<R: Rng>(scene: &Scene, rays: &[Ray], cfg: &RenderConfig, rng: &mut R) -> Result<ChunkTrace> {
    let step = cfg.step_for(scene);
    let traces: Vec<RayTrace> = rays
        .par_iter()
        .map(|r| trace_geometry(scene, r, cfg, step))
        .collect::<Result<_>>()?;
    let width = scene.input_width();
    let (net, colors) = match cfg.encoder {
        Encoder::Aligned => {
            let masked = MaskedSamples {
                rays: traces.iter().map(|t| t.masked.clone()).collect(),
            };
            let inputs: Vec<Vec<f64>> = traces.iter().map(|t| t.inputs.clone()).collect();
            let mut batch = pack::pack(cfg.packing, &masked, &inputs, width, cfg.sort)?;
            if cfg.flip {
                batch = pack::temporal_flip(&batch);
            }
            let tape = smlp_forward(&scene.mlp, &batch.data, &batch.occupancy, cfg.spike_fn)?;
            let colors = unpack_scatter(&tape.outputs, &batch)?;
            (NetTrace::Aligned { batch, tape }, colors)
        }
        Encoder::Direct(steps) | Encoder::Poisson(steps) => {
            let flat: Vec<f64> = traces.iter().flat_map(|t| t.inputs.iter().copied()).collect();
            let poisson = matches!(cfg.encoder, Encoder::Poisson(_));
            let encoded = if poisson {
                let probs: Vec<f64> = flat.iter().map(|&x| sigmoid(x)).collect();
                poisson_encode(&probs, width, steps, rng)?
            } else {
                direct_encode(&flat, width, steps)?
            };
            let occupancy = vec![true; encoded.dims()[0] * steps];
            let tape = smlp_forward(&scene.mlp, &encoded, &occupancy, cfg.spike_fn)?;
            let decoded = mean_decode(&tape.outputs);
            let mut colors = Vec::with_capacity(traces.len());
            let mut at = 0;
            for t in &traces {
                let n = t.masked.len() * 3;
                colors.push(decoded[at..at + n].to_vec());
                at += n;
            }
            (NetTrace::Encoded { tape, poisson }, colors)
        }
    };
    let rgb = traces
        .iter()
        .zip(&colors)
        .map(|(t, c)| composite(c, &survivor_weights(&t.masked), cfg.background, t.leftover))
        .collect();
    Ok(ChunkTrace {
        rays: traces,
        net,
        colors,
        rgb,
    })
}

/// `T_i * alpha_i` for every survivor.
pub fn survivor_weights(m: &MaskedRay) -> Vec<f64> {
    m.transmittance.iter().zip(&m.alphas).map(|(t, a)| t * a).collect()
}

/// `sum_i w_i c_i + leftover * background`; `colors` is `n x 3`.
pub fn composite(colors: &[f64], weights: &[f64], background: [f64; 3], leftover: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, &w) in colors.chunks_exact(3).zip(weights) {
        for k in 0..3 {
            out[k] += w * c[k];
        }
    }
    for k in 0..3 {
        out[k] += leftover * background[k];
    }
    out
}

/// `(1/|R|) sum ||pred - target||^2`.
pub fn mse_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Accumulates `dL/d params` of one chunk given `dL/d rgb` per ray.
pub fn backward_chunk(scene: &Scene, trace: &ChunkTrace, cfg: &RenderConfig, d_rgb: &[[f64; 3]], grad: &mut SceneGradient) -> Result<()> {
    if d_rgb.len() != trace.rays.len() {
        return Err(Error::Shape(format!("{} gradients for {} rays", d_rgb.len(), trace.rays.len())));
    }
    let c = scene.features.channels;
    let width = scene.input_width();

    // Compositing: colour and opacity gradients.
    let mut d_colors: Vec<Vec<f64>> = Vec::with_capacity(trace.rays.len());
    for ((rt, colors), g) in trace.rays.iter().zip(&trace.colors).zip(d_rgb) {
        let weights = survivor_weights(&rt.masked);
        d_colors.push(weights.iter().flat_map(|&w| g.map(|gk| gk * w)).collect());

        let k_all = rt.alphas.len();
        let mut color_of = vec![None; k_all];
        for (rank, &i) in rt.masked.indices.iter().enumerate() {
            color_of[i] = Some(&colors[3 * rank..3 * rank + 3]);
        }
        // Radiance seen from just behind sample k.
        let mut behind = cfg.background;
        for k in (0..k_all).rev() {
            let a = rt.alphas[k];
            let ck = color_of[k].map_or([0.0; 3], |s| [s[0], s[1], s[2]]);
            let d_alpha: f64 = rt.transmittance[k] * (0..3).map(|j| g[j] * (ck[j] - behind[j])).sum::<f64>();
            for j in 0..3 {
                behind[j] = a * ck[j] + (1.0 - a) * behind[j];
            }
            if d_alpha == 0.0 {
                continue;
            }
            let raw = rt.raw_density[k];
            let delta = rt.samples.deltas[k];
            let d_raw = d_alpha * delta * (1.0 - a) * activate_density_grad(raw, scene.density.activation);
            if d_raw != 0.0 {
                let s = scene.density.stencil(rt.samples.positions[k])?;
                grad.density.scatter(&s, &[d_raw])?;
            }
        }
    }

    // Network.
    let d_inputs: Vec<Vec<f64>> = match &trace.net {
        NetTrace::Aligned { batch, tape } => {
            let upstream = batch.gather(&d_colors, 3)?;
            let g = smlp_backward(&scene.mlp, Some(tape), &upstream)?;
            add_mlp(&mut grad.mlp, &g.params);
            unpack_scatter(&g.input, batch)?
        }
        NetTrace::Encoded { tape, poisson } => {
            let [rows, steps, _] = tape.outputs.dims();
            let flat: Vec<f64> = d_colors.iter().flatten().copied().collect();
            let mut upstream = Tensor3::zeros([rows, steps, 3]);
            for r in 0..rows {
                for t in 0..steps {
                    for (u, d) in upstream.at_mut(r, t).iter_mut().zip(&flat[3 * r..3 * r + 3]) {
                        *u = d / steps as f64;
                    }
                }
            }
            let g = smlp_backward(&scene.mlp, Some(tape), &upstream)?;
            add_mlp(&mut grad.mlp, &g.params);
            let mut per_row = vec![0.0; rows * width];
            for r in 0..rows {
                for t in 0..steps {
                    for (d, v) in per_row[r * width..(r + 1) * width].iter_mut().zip(g.input.at(r, t)) {
                        *d += v;
                    }
                }
            }
            let inputs: Vec<f64> = trace.rays.iter().flat_map(|t| t.inputs.iter().copied()).collect();
            if *poisson {
                // Straight-through estimator for the Bernoulli draw.
                for (d, &x) in per_row.iter_mut().zip(&inputs) {
                    let s = sigmoid(x);
                    *d *= s * (1.0 - s);
                }
            }
            let mut out = Vec::with_capacity(trace.rays.len());
            let mut at = 0;
            for t in &trace.rays {
                let n = t.masked.len() * width;
                out.push(per_row[at..at + n].to_vec());
                at += n;
            }
            out
        }
    };

    for (rt, d_in) in trace.rays.iter().zip(&d_inputs) {
        for (k, p) in rt.masked.positions.iter().enumerate() {
            let s = scene.features.stencil(*p)?;
            grad.features.scatter(&s, &d_in[k * width..k * width + c])?;
        }
    }
    Ok(())
}

fn add_mlp(acc: &mut MlpGradients, g: &MlpGradients) {
    for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
        a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
        a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
    }
}

/// Loss of a ray batch and its gradient with respect to every parameter.
pub fn loss_and_gradient<R: Rng>(
    scene: &Scene,
    rays: &[Ray],
    targets: &[[f64; 3]],
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<(f64, SceneGradient)> {
    let trace = forward_chunk(scene, rays, cfg, rng)?;
    let loss = mse_loss(&trace.rgb, targets)?;
    let n = rays.len().max(1) as f64;
    let d_rgb: Vec<[f64; 3]> = trace
        .rgb
        .iter()
        .zip(targets)
        .map(|(p, t)| [0, 1, 2].map(|k| 2.0 * (p[k] - t[k]) / n))
        .collect();
    let mut grad = scene.zero_gradient();
    backward_chunk(scene, &trace, cfg, &d_rgb, &mut grad)?;
    Ok((loss, grad))
}

/// Output of [`render_rays`].
#[derive(Clone, Debug, Default)]
pub struct RenderOutput {
    pub rgb: Vec<[f64; 3]>,
    /// Operation counts of the network queries.
    pub ops: OpCount,
    /// Samples sent to the network.
    pub queries: usize,
    /// Packing statistics per chunk (aligned encoder only).
    pub chunks: Vec<OccupancyStats>,
}

/// Renders rays chunk by chunk.
pub fn render_rays(scene: &Scene, rays: &[Ray], cfg: &RenderConfig) -> Result<RenderOutput> {
    cfg.validate()?;
    let mut out = RenderOutput::default();
    for (i, chunk) in rays.chunks(cfg.chunk_size).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let trace = forward_chunk(scene, chunk, cfg, &mut rng)?;
        let binary = matches!(cfg.encoder, Encoder::Poisson(_));
        out.ops.merge(&count_ops_snn(&scene.mlp, trace.tape(), binary)?);
        out.queries += trace.queries();
        if let Some(b) = trace.packed() {
            out.chunks.push(occupancy_stats(b));
        }
        out.rgb.extend(trace.rgb);
    }
    Ok(out)
}

pub fn render_image(scene: &Scene, camera: &Camera, cfg: &RenderConfig) -> Result<ImageBuffer> {
    let out = render_rays(scene, &camera.all_rays(), cfg)?;
    ImageBuffer::from_pixels(camera.width, camera.height, &out.rgb)
}

/// Mean PSNR over views.
pub fn evaluate_psnr(scene: &Scene, views: &[View], cfg: &RenderConfig) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::InvalidValue("no views to evaluate".into()));
    }
    let mut total = 0.0;
    for v in views {
        total += psnr(&render_image(scene, &v.camera, cfg)?, &v.image)?;
    }
    Ok(total / views.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    /// Learning rates shrink by 10x every this many iterations.
    pub lr_decay_steps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// PSNR on held-out views every this many iterations (0 = only at the end).
    pub eval_every: usize,
    /// Checkpoint callback period (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_rays: 1024,
            lr_grid: 0.1,
            lr_mlp: 1e-3,
            lr_decay_steps: 1000.0,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            eval_every: 500,
            checkpoint_every: 0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::Config("batch_rays must be > 0".into()));
        }
        if !(self.lr_grid >= 0.0 && self.lr_mlp >= 0.0 && self.lr_decay_steps > 0.0) {
            return Err(Error::Config("learning rates must be >= 0 and decay steps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam moments for one flat parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected update at step `t` (1-based).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let step = lr / c1;
        let c2_sqrt = c2.sqrt();
        params
            .par_iter_mut()
            .zip(grads.par_iter())
            .zip(self.m.par_iter_mut().zip(self.v.par_iter_mut()))
            .with_min_len(4096)
            .for_each(|((p, &g), (m, v))| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() / c2_sqrt + cfg.eps);
            });
    }
}

/// Optimizer state plus the scene being trained.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub scene: Scene,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    density_opt: Adam,
    feature_opt: Adam,
    mlp_opt: Vec<(Adam, Adam)>,
}

impl Trainer {
    pub fn new(scene: Scene, seed: u64) -> Self {
        Self::resume(scene, 0, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Continues from a saved iteration and RNG (moments restart at zero).
    pub fn resume(scene: Scene, iteration: usize, rng: ChaCha8Rng) -> Self {
        let density_opt = Adam::new(scene.density.values.len());
        let feature_opt = Adam::new(scene.features.values.len());
        let mlp_opt = scene
            .mlp
            .layers
            .iter()
            .map(|l| (Adam::new(l.weights.len()), Adam::new(l.bias.len())))
            .collect();
        Self {
            scene,
            iteration,
            rng,
            density_opt,
            feature_opt,
            mlp_opt,
        }
    }

    /// One optimizer update on a ray batch; returns the batch loss.
    pub fn train_step(&mut self, rays: &[Ray], targets: &[[f64; 3]], cfg: &RenderConfig, train: &TrainConfig) -> Result<f64> {
        let (loss, grad) = loss_and_gradient(&self.scene, rays, targets, cfg, &mut self.rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("loss {loss} on {} rays", rays.len()),
            });
        }
        self.iteration += 1;
        let t = self.iteration as u64;
        let decay = 0.1f64.powf(self.iteration as f64 / train.lr_decay_steps);
        let lr_grid = train.lr_grid * decay;
        let lr_mlp = train.lr_mlp * decay;
        self.density_opt.step(&mut self.scene.density.values, &grad.density.values, lr_grid, t, train);
        self.feature_opt.step(&mut self.scene.features.values, &grad.features.values, lr_grid, t, train);
        for ((layer, g), (wo, bo)) in self.scene.mlp.layers.iter_mut().zip(&grad.mlp.layers).zip(&mut self.mlp_opt) {
            wo.step(&mut layer.weights, &g.weights, lr_mlp, t, train);
            bo.step(&mut layer.bias, &g.bias, lr_mlp, t, train);
        }
        Ok(loss)
    }
}

/// All rays of a view set with their target colours.
#[derive(Clone, Debug, Default)]
pub struct RaySet {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
}

impl RaySet {
    pub fn from_views(views: &[View]) -> Self {
        let mut set = RaySet::default();
        for v in views {
            for (i, r) in v.camera.all_rays().into_iter().enumerate() {
                set.rays.push(r);
                set.targets.push(v.image.pixel(i));
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
}

/// Trains for `train.iterations` steps on random ray batches.
/// `checkpoint` is called every `checkpoint_every` iterations and at the end.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &RaySet,
    eval_views: &[View],
    cfg: &RenderConfig,
    train: &TrainConfig,
    mut checkpoint: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    train.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidValue("training set has no rays".into()));
    }
    let eval_cfg = RenderConfig { chunk_size: cfg.chunk_size.max(4096), ..cfg.clone() };
    let mut history = Vec::new();
    let mut batch_rays = Vec::with_capacity(train.batch_rays);
    let mut batch_targets = Vec::with_capacity(train.batch_rays);
    let start = trainer.iteration;
    for it in 1..=train.iterations {
        batch_rays.clear();
        batch_targets.clear();
        for _ in 0..train.batch_rays {
            let i = trainer.rng.gen_range(0..data.len());
            batch_rays.push(data.rays[i]);
            batch_targets.push(data.targets[i]);
        }
        let loss = trainer.train_step(&batch_rays, &batch_targets, cfg, train)?;
        let last = it == train.iterations;
        let eval_now = !eval_views.is_empty() && (last || (train.eval_every > 0 && it % train.eval_every == 0));
        let psnr = if eval_now {
            Some(evaluate_psnr(&trainer.scene, eval_views, &eval_cfg)?)
        } else {
            None
        };
        history.push(MetricsRow {
            iteration: start + it,
            loss,
            psnr,
        });
        if last || (train.checkpoint_every > 0 && it % train.checkpoint_every == 0) {
            checkpoint(trainer)?;
        }
    }
    Ok(history)
}
