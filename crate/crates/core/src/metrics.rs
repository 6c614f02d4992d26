//! Synaptic operation counting, theoretical energy and image quality.
//!
//! Energy follows the usual accounting for spiking networks: a layer fed by
//! real values costs one multiply-accumulate (MAC) per synapse, a layer fed by
//! binary spikes costs one accumulate (AC) per synapse of every neuron that
//! actually fired. Grid interpolation and compositing are left out of both
//! totals since the spiking and conventional pipelines share them.

use serde::{Deserialize, Serialize};

use crate::render::ImageBuffer;
use crate::snn::{ForwardTape, SpikingMlp};
use crate::{Error, Result};

/// Per-operation energies in picojoules. Defaults are the 45 nm figures
/// commonly used for this comparison (4.6 pJ per 32-bit MAC, 0.9 pJ per AC).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_mac_pj: 4.6,
            e_ac_pj: 0.9,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac_pj > self.e_ac_pj && self.e_ac_pj > 0.0) {
            return Err(Error::Config(format!(
                "energy model needs e_mac > e_ac > 0 (got {} / {})",
                self.e_mac_pj, self.e_ac_pj
            )));
        }
        Ok(())
    }

    /// Spike rate below which an AC layer is cheaper than its MAC twin.
    pub fn breakeven_rate(&self) -> f64 {
        self.e_mac_pj / self.e_ac_pj
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub macs: u64,
    pub acs: u64,
    pub bias_adds: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCount {
    pub macs: u64,
    /// Synaptic accumulates triggered by spikes.
    pub acs: u64,
    /// Bias additions of spike-fed layers, charged at the AC rate.
    pub bias_adds: u64,
    pub layers: Vec<LayerOps>,
    /// Per hidden spiking layer.
    pub spike_rates: Vec<f64>,
    pub occupied_slots: u64,
}

impl OpCount {
    fn with_layers(n: usize) -> Self {
        Self {
            layers: vec![LayerOps::default(); n],
            ..Self::default()
        }
    }

    fn total(&mut self) {
        self.macs = self.layers.iter().map(|l| l.macs).sum();
        self.acs = self.layers.iter().map(|l| l.acs).sum();
        self.bias_adds = self.layers.iter().map(|l| l.bias_adds).sum();
    }

    /// Adds counts of another batch run through the same network.
    pub fn merge(&mut self, other: &OpCount) {
        if self.layers.is_empty() {
            *self = other.clone();
            return;
        }
        let (a, b) = (self.occupied_slots as f64, other.occupied_slots as f64);
        for (r, o) in self.spike_rates.iter_mut().zip(&other.spike_rates) {
            *r = if a + b > 0.0 { (*r * a + o * b) / (a + b) } else { 0.0 };
        }
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.macs += o.macs;
            l.acs += o.acs;
            l.bias_adds += o.bias_adds;
        }
        self.occupied_slots += other.occupied_slots;
        self.total();
    }
}

/// Fired spikes over `neurons x occupied slots`, per hidden spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRates {
    pub rates: Vec<f64>,
    /// Set when no slot was occupied; rates are then reported as zero.
    pub no_occupied_slots: bool,
}

pub fn measure_spike_rate(mlp: &SpikingMlp, tape: &ForwardTape) -> Result<SpikeRates> {
    check_tape(mlp, tape)?;
    let steps = tape.input.dims()[1];
    let hidden = &mlp.layers[..mlp.layers.len() - 1];
    let mut fired = vec![0u64; hidden.len()];
    let mut slots = 0u64;
    for (r, rt) in tape.rows.iter().enumerate() {
        for t in 0..rt.len {
            if !tape.occupancy[r * steps + t] {
                continue;
            }
            slots += 1;
            for (l, layer) in hidden.iter().enumerate() {
                let w = layer.out_width;
                fired[l] += rt.activations[l][t * w..(t + 1) * w].iter().filter(|&&s| s != 0.0).count() as u64;
            }
        }
    }
    let rates = hidden
        .iter()
        .zip(&fired)
        .filter(|(l, _)| l.neuron.is_some_and(|n| n.is_spiking()))
        .map(|(l, &f)| if slots == 0 { 0.0 } else { f as f64 / (l.out_width as u64 * slots) as f64 })
        .collect();
    Ok(SpikeRates {
        rates,
        no_occupied_slots: slots == 0,
    })
}

fn check_tape(mlp: &SpikingMlp, tape: &ForwardTape) -> Result<()> {
    let rows = tape.input.dims()[0];
    if tape.rows.len() != rows {
        return Err(Error::MissingTape("spike record does not cover every row".into()));
    }
    let n_hidden = mlp.layers.len() - 1;
    if tape.rows.iter().any(|r| r.activations.len() != n_hidden) {
        return Err(Error::MissingTape("spike record has the wrong number of layers".into()));
    }
    Ok(())
}

/// Counts operations of a recorded forward pass. `binary_input` marks
/// spike-encoded network inputs (their first layer is then AC as well).
pub fn count_ops_snn(mlp: &SpikingMlp, tape: &ForwardTape, binary_input: bool) -> Result<OpCount> {
    check_tape(mlp, tape)?;
    let [_, steps, channels] = tape.input.dims();
    let mut c = OpCount::with_layers(mlp.layers.len());
    for (r, rt) in tape.rows.iter().enumerate() {
        let input = tape.input.row(r);
        for t in 0..rt.len {
            if !tape.occupancy[r * steps + t] {
                continue;
            }
            c.occupied_slots += 1;
            for (l, layer) in mlp.layers.iter().enumerate() {
                let ops = &mut c.layers[l];
                let (x, spike_fed) = if l == 0 {
                    (&input[t * channels..(t + 1) * channels], binary_input)
                } else {
                    let prev = &mlp.layers[l - 1];
                    let w = prev.out_width;
                    (
                        &rt.activations[l - 1][t * w..(t + 1) * w],
                        prev.neuron.is_some_and(|n| n.is_spiking()),
                    )
                };
                if spike_fed {
                    let active = x.iter().filter(|&&v| v != 0.0).count() as u64;
                    ops.acs += active * layer.out_width as u64;
                    if l > 0 {
                        ops.bias_adds += layer.out_width as u64;
                    }
                } else {
                    ops.macs += (layer.in_width * layer.out_width) as u64;
                }
            }
        }
    }
    c.spike_rates = measure_spike_rate(mlp, tape)?.rates;
    c.total();
    Ok(c)
}

/// Conventional network of the same topology: one MAC per synapse per sample.
pub fn count_ops_ann(mlp: &SpikingMlp, samples: u64) -> OpCount {
    let mut c = OpCount::with_layers(mlp.layers.len());
    for (ops, layer) in c.layers.iter_mut().zip(&mlp.layers) {
        ops.macs = samples * (layer.in_width * layer.out_width) as u64;
    }
    c.occupied_slots = samples;
    c.total();
    c
}

/// Joules for the given counts.
pub fn estimate_energy(counts: &OpCount, model: &EnergyModel) -> f64 {
    let pj = counts.macs as f64 * model.e_mac_pj + (counts.acs + counts.bias_adds) as f64 * model.e_ac_pj;
    pj * 1e-12
}

/// Spiking vs conventional estimate on the same queried samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub macs: u64,
    /// Accumulates including bias additions.
    pub acs: u64,
    pub spike_rates: Vec<f64>,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub ann_mj: f64,
    pub snn_mj: f64,
    pub ratio: f64,
    pub ann_macs: u64,
    pub samples: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub scene: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub config: String,
}

impl EnergyReport {
    pub fn new(snn: &OpCount, ann: &OpCount, model: &EnergyModel) -> Self {
        let snn_j = estimate_energy(snn, model);
        let ann_j = estimate_energy(ann, model);
        Self {
            macs: snn.macs,
            acs: snn.acs + snn.bias_adds,
            spike_rates: snn.spike_rates.clone(),
            e_mac_pj: model.e_mac_pj,
            e_ac_pj: model.e_ac_pj,
            ann_mj: ann_j * 1e3,
            snn_mj: snn_j * 1e3,
            ratio: if ann_j > 0.0 { snn_j / ann_j } else { 0.0 },
            ann_macs: ann.macs,
            samples: ann.occupied_slots,
            scene: String::new(),
            config: String::new(),
        }
    }
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at 99 dB.
pub fn psnr(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    check_same(pred, target)?;
    let n = pred.data.len() as f64;
    let mse = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

pub const PSNR_CAP_DB: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "image {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(plane: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            horiz[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity (11x11 Gaussian window, sigma 1.5), computed
/// per channel and averaged.
pub fn ssim(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    check_same(pred, target)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = pred.data.iter().skip(c).step_by(3).copied().collect();
        let y: Vec<f64> = target.data.iter().skip(c).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        let n = mx.len() as f64;
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / n;
    }
    Ok(total / 3.0)
}
