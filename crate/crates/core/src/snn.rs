//! Leaky integrate-and-fire neurons and the spiking colour MLP.
//!
//! A [`SpikingMlp`] consumes a `[row, time, channel]` batch. Hidden layers
//! carry membrane state across the time steps of one row and never across
//! rows; the last layer is a real-valued readout squashed by a sigmoid at
//! every step. [`smlp_backward`] runs backpropagation through time over the
//! recorded [`ForwardTape`], replacing the Heaviside derivative with a
//! surrogate.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::sigmoid;
use crate::tensor::Tensor3;
use crate::{Error, Result};

/// Rows handled by one reduction task in the backward pass. Fixed so the
/// summation order does not depend on the thread count.
const ROWS_PER_TASK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifConfig {
    /// Membrane time constant in steps.
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("lif tau {} must be >= 1", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Config(format!(
                "lif v_th {} must exceed v_reset {}",
                self.v_th, self.v_reset
            )));
        }
        Ok(())
    }

    /// One neuron update: returns `(U, S, V)`.
    #[inline]
    fn update(&self, v: f64, x: f64) -> (f64, f64, f64) {
        let u = v + (x - v + self.v_reset) / self.tau;
        let s = if u >= self.v_th { 1.0 } else { 0.0 };
        (u, s, u * (1.0 - s) + self.v_reset * s)
    }
}

/// Membrane potentials after reset.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Vec<f64>,
}

impl LifState {
    pub fn zeros(width: usize) -> Self {
        Self { v: vec![0.0; width] }
    }
}

/// Advances a layer of LIF neurons by one step.
pub fn lif_step(state: &LifState, x: &[f64], cfg: &LifConfig) -> Result<(Vec<f64>, LifState)> {
    if x.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "input of width {} for {} neurons",
            x.len(),
            state.v.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite LIF input".into()));
    }
    let mut spikes = Vec::with_capacity(x.len());
    let mut next = Vec::with_capacity(x.len());
    for (&v, &xi) in state.v.iter().zip(x) {
        let (_, s, v2) = cfg.update(v, xi);
        spikes.push(s);
        next.push(v2);
    }
    Ok((spikes, LifState { v: next }))
}

/// Shape of the surrogate used in place of `dH/dx`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateForm {
    /// `dH/dx = 1 / (1 + exp(-alpha x))`.
    #[default]
    Sigmoid,
    /// `dH/dx = alpha * s(alpha x) * (1 - s(alpha x))` with `s` the logistic function.
    SigmoidDerivative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub alpha_sg: f64,
    #[serde(default)]
    pub form: SurrogateForm,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            alpha_sg: 4.0,
            form: SurrogateForm::Sigmoid,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_sg > 0.0) || !self.alpha_sg.is_finite() {
            return Err(Error::Config(format!("alpha_sg {} must be > 0", self.alpha_sg)));
        }
        Ok(())
    }
}

/// Surrogate for `dH/dx` evaluated at `x = U - V_th`.
#[inline]
pub fn surrogate_derivative(x: f64, cfg: &SurrogateConfig) -> f64 {
    match cfg.form {
        SurrogateForm::Sigmoid => sigmoid(cfg.alpha_sg * x),
        SurrogateForm::SigmoidDerivative => {
            let s = sigmoid(cfg.alpha_sg * x);
            cfg.alpha_sg * s * (1.0 - s)
        }
    }
}

/// Antiderivative of [`surrogate_derivative`]; the smooth stand-in for `H`
/// used by [`SpikeFn::Relaxed`].
#[inline]
pub fn surrogate_primitive(x: f64, cfg: &SurrogateConfig) -> f64 {
    let a = cfg.alpha_sg;
    match cfg.form {
        SurrogateForm::Sigmoid => {
            let z = a * x;
            let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            sp / a
        }
        SurrogateForm::SigmoidDerivative => sigmoid(a * x),
    }
}

/// Firing nonlinearity used by the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeFn {
    #[default]
    Heaviside,
    /// `S = surrogate_primitive(U - V_th)`; makes the network smooth so the
    /// surrogate backward becomes its exact gradient.
    Relaxed,
}

/// Neuron model of a hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neuron {
    Lif(LifConfig),
    Relu,
    Identity,
}

impl Neuron {
    pub fn is_spiking(&self) -> bool {
        matches!(self, Neuron::Lif(_))
    }
}

/// Fully connected layer. `weights` is `[in, out]` row-major so a spike on
/// input `i` adds one contiguous row.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub in_width: usize,
    pub out_width: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `None` for the sigmoid readout.
    pub neuron: Option<Neuron>,
}

impl Layer {
    pub fn zeros(in_width: usize, out_width: usize, neuron: Option<Neuron>) -> Self {
        Self {
            in_width,
            out_width,
            weights: vec![0.0; in_width * out_width],
            bias: vec![0.0; out_width],
            neuron,
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, o: usize) -> f64 {
        self.weights[i * self.out_width + o]
    }

    #[inline]
    pub fn weight_mut(&mut self, i: usize, o: usize) -> &mut f64 {
        &mut self.weights[i * self.out_width + o]
    }

    /// `out = bias + x W`, skipping zero inputs.
    #[inline]
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.out_width..(i + 1) * self.out_width];
            if xi == 1.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w;
                }
            } else {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += xi * w;
                }
            }
        }
    }
}

/// The colour network: spiking (or ANN debug) hidden layers and a sigmoid readout.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingMlp {
    pub layers: Vec<Layer>,
    pub surrogate: SurrogateConfig,
    /// Treat the reset gate as a constant during backward.
    pub detach_reset: bool,
}

impl SpikingMlp {
    /// Uniform `±1/sqrt(fan_in)` initialization of weights and biases.
    pub fn new<R: Rng>(
        in_width: usize,
        hidden: &[usize],
        out_width: usize,
        neuron: Neuron,
        surrogate: SurrogateConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 || hidden.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        let mut widths = vec![in_width];
        widths.extend_from_slice(hidden);
        widths.push(out_width);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let kind = (l < hidden.len()).then_some(neuron);
                let mut layer = Layer::zeros(w[0], w[1], kind);
                let bound = 1.0 / (w[0] as f64).sqrt();
                layer.weights.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
                layer.bias.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
                layer
            })
            .collect();
        let mlp = Self {
            layers,
            surrogate,
            detach_reset: false,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        let Some(last) = self.layers.last() else {
            return Err(Error::Shape("network without layers".into()));
        };
        if last.neuron.is_some() {
            return Err(Error::Shape("last layer must be the readout".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.in_width * layer.out_width
                || layer.bias.len() != layer.out_width
            {
                return Err(Error::Shape(format!("layer {l} has inconsistent storage")));
            }
            if l + 1 < self.layers.len() {
                match layer.neuron {
                    None => return Err(Error::Shape(format!("hidden layer {l} has no neuron"))),
                    Some(Neuron::Lif(cfg)) => cfg.validate()?,
                    Some(_) => {}
                }
                if self.layers[l + 1].in_width != layer.out_width {
                    return Err(Error::Shape(format!(
                        "layer {l} outputs {} but layer {} takes {}",
                        layer.out_width,
                        l + 1,
                        self.layers[l + 1].in_width
                    )));
                }
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_width)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_width).collect()
    }

    /// Same weights with every hidden neuron replaced.
    pub fn with_neuron(&self, neuron: Neuron) -> Self {
        let mut out = self.clone();
        let n = out.layers.len();
        for layer in &mut out.layers[..n - 1] {
            layer.neuron = Some(neuron);
        }
        out
    }

    pub fn is_spiking(&self) -> bool {
        self.layers.iter().any(|l| l.neuron.is_some_and(|n| n.is_spiking()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn zero_gradients(&self) -> MlpGradients {
        MlpGradients {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

/// Recorded activity of one row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowTape {
    /// Steps actually simulated (last occupied slot + 1).
    pub len: usize,
    /// Per hidden layer `[len, width]`: membrane `U` for LIF, pre-activation otherwise.
    pub potentials: Vec<Vec<f64>>,
    /// Per hidden layer `[len, width]`: spikes `S` for LIF, activations otherwise.
    pub activations: Vec<Vec<f64>>,
}

/// Everything [`smlp_backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub input: Tensor3,
    pub occupancy: Vec<bool>,
    pub rows: Vec<RowTape>,
    /// Sigmoid readout `[row, time, out]`; zero at unoccupied slots.
    pub outputs: Tensor3,
    pub spike_fn: SpikeFn,
}

impl ForwardTape {
    pub fn occupied(&self, row: usize, t: usize) -> bool {
        self.occupancy[row * self.input.dims()[1] + t]
    }

    pub fn occupied_slots(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }
}

fn check_occupancy(input: &Tensor3, occupancy: &[bool]) -> Result<()> {
    let [rows, steps, _] = input.dims();
    if occupancy.len() != rows * steps {
        return Err(Error::Shape(format!(
            "occupancy of length {} for {rows}x{steps} slots",
            occupancy.len()
        )));
    }
    Ok(())
}

/// Runs the network over every row of `input`, carrying hidden state along the time axis.
pub fn smlp_forward(
    mlp: &SpikingMlp,
    input: &Tensor3,
    occupancy: &[bool],
    spike_fn: SpikeFn,
) -> Result<ForwardTape> {
    let [rows, steps, channels] = input.dims();
    if channels != mlp.in_width() {
        return Err(Error::Shape(format!(
            "input has {channels} channels, network expects {}",
            mlp.in_width()
        )));
    }
    check_occupancy(input, occupancy)?;
    let out_w = mlp.out_width();
    let results: Vec<(RowTape, Vec<f64>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let occ = &occupancy[r * steps..(r + 1) * steps];
            let len = occ.iter().rposition(|&o| o).map_or(0, |p| p + 1);
            forward_row(mlp, input.row(r), channels, len, spike_fn)
        })
        .collect();
    let mut outputs = Tensor3::zeros([rows, steps, out_w]);
    let mut tapes = Vec::with_capacity(rows);
    for (r, (tape, y)) in results.into_iter().enumerate() {
        let dst = outputs.row_mut(r);
        for t in 0..tape.len {
            if occupancy[r * steps + t] {
                dst[t * out_w..(t + 1) * out_w].copy_from_slice(&y[t * out_w..(t + 1) * out_w]);
            }
        }
        tapes.push(tape);
    }
    Ok(ForwardTape {
        input: input.clone(),
        occupancy: occupancy.to_vec(),
        rows: tapes,
        outputs,
        spike_fn,
    })
}

fn forward_row(
    mlp: &SpikingMlp,
    input: &[f64],
    channels: usize,
    len: usize,
    spike_fn: SpikeFn,
) -> (RowTape, Vec<f64>) {
    let hidden = &mlp.layers[..mlp.layers.len() - 1];
    let readout = mlp.layers.last().expect("validated");
    let mut potentials: Vec<Vec<f64>> = hidden.iter().map(|l| vec![0.0; len * l.out_width]).collect();
    let mut activations = potentials.clone();
    let mut membrane: Vec<Vec<f64>> = hidden.iter().map(|l| vec![0.0; l.out_width]).collect();
    let mut y = vec![0.0; len * readout.out_width];
    let mut x = Vec::new();
    for t in 0..len {
        for (l, layer) in hidden.iter().enumerate() {
            let w = layer.out_width;
            x.resize(w, 0.0);
            {
                let inp = if l == 0 {
                    &input[t * channels..(t + 1) * channels]
                } else {
                    let pw = hidden[l - 1].out_width;
                    &activations[l - 1][t * pw..(t + 1) * pw]
                };
                layer.affine(inp, &mut x);
            }
            let u_out = &mut potentials[l][t * w..(t + 1) * w];
            let s_out = &mut activations[l][t * w..(t + 1) * w];
            match layer.neuron.expect("hidden layer") {
                Neuron::Lif(cfg) => {
                    for n in 0..w {
                        let v = membrane[l][n];
                        let u = v + (x[n] - v + cfg.v_reset) / cfg.tau;
                        let s = match spike_fn {
                            SpikeFn::Heaviside => {
                                if u >= cfg.v_th {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            SpikeFn::Relaxed => surrogate_primitive(u - cfg.v_th, &mlp.surrogate),
                        };
                        membrane[l][n] = u * (1.0 - s) + cfg.v_reset * s;
                        u_out[n] = u;
                        s_out[n] = s;
                    }
                }
                Neuron::Relu => {
                    for n in 0..w {
                        u_out[n] = x[n];
                        s_out[n] = x[n].max(0.0);
                    }
                }
                Neuron::Identity => {
                    u_out.copy_from_slice(&x);
                    s_out.copy_from_slice(&x);
                }
            }
        }
        let ow = readout.out_width;
        let last = match hidden.last() {
            Some(h) => &activations[hidden.len() - 1][t * h.out_width..(t + 1) * h.out_width],
            None => &input[t * channels..(t + 1) * channels],
        };
        let yt = &mut y[t * ow..(t + 1) * ow];
        readout.affine(last, yt);
        yt.iter_mut().for_each(|v| *v = sigmoid(*v));
    }
    (
        RowTape {
            len,
            potentials,
            activations,
        },
        y,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<LayerGradient>,
}

impl MlpGradients {
    fn add(&mut self, other: &MlpGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= k);
        }
    }

    /// Flattened view, layer by layer (weights then bias).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }
}

/// Gradients produced by [`smlp_backward`].
#[derive(Clone, Debug)]
pub struct SmlpGradients {
    pub params: MlpGradients,
    /// `dL/d input`, shaped like the packed input.
    pub input: Tensor3,
}

/// Parameter gradients of a row chunk plus `dL/d input` per row.
type ChunkGradients = (MlpGradients, Vec<(usize, Vec<f64>)>);

/// Backpropagation through time. `upstream` is `dL/d output` shaped like
/// `tape.outputs`; entries at unoccupied slots are ignored.
pub fn smlp_backward(mlp: &SpikingMlp, tape: Option<&ForwardTape>, upstream: &Tensor3) -> Result<SmlpGradients> {
    let tape = tape.ok_or_else(|| Error::MissingTape("smlp_backward needs a forward tape".into()))?;
    if upstream.dims() != tape.outputs.dims() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs outputs {:?}",
            upstream.dims(),
            tape.outputs.dims()
        )));
    }
    if tape.rows.len() != tape.input.dims()[0] {
        return Err(Error::MissingTape("tape rows do not match input".into()));
    }
    let [rows, steps, channels] = tape.input.dims();
    let row_ids: Vec<usize> = (0..rows).collect();
    let partials: Vec<ChunkGradients> = row_ids
        .par_chunks(ROWS_PER_TASK)
        .map(|chunk| {
            let mut acc = mlp.zero_gradients();
            let mut ins = Vec::with_capacity(chunk.len());
            for &r in chunk {
                let g_in = backward_row(mlp, tape, upstream, r, &mut acc);
                ins.push((r, g_in));
            }
            (acc, ins)
        })
        .collect();
    let mut params = mlp.zero_gradients();
    let mut input = Tensor3::zeros([rows, steps, channels]);
    for (acc, ins) in partials {
        params.add(&acc);
        for (r, g) in ins {
            input.row_mut(r)[..g.len()].copy_from_slice(&g);
        }
    }
    Ok(SmlpGradients { params, input })
}

fn backward_row(
    mlp: &SpikingMlp,
    tape: &ForwardTape,
    upstream: &Tensor3,
    r: usize,
    acc: &mut MlpGradients,
) -> Vec<f64> {
    let [_, steps, channels] = tape.input.dims();
    let rt = &tape.rows[r];
    let len = rt.len;
    let n_hidden = mlp.layers.len() - 1;
    let readout = &mlp.layers[n_hidden];
    let ow = readout.out_width;
    let input = &tape.input.row(r)[..len * channels];
    let y = tape.outputs.row(r);
    let gy = upstream.row(r);

    // Gradient w.r.t. the readout's input at each step.
    let top_w = readout.in_width;
    let mut g_act = vec![0.0; len * top_w];
    let mut gz = vec![0.0; ow];
    for t in 0..len {
        if !tape.occupancy[r * steps + t] {
            continue;
        }
        for o in 0..ow {
            let yo = y[t * ow + o];
            gz[o] = gy[t * ow + o] * yo * (1.0 - yo);
        }
        let last = if n_hidden == 0 {
            &input[t * channels..(t + 1) * channels]
        } else {
            &rt.activations[n_hidden - 1][t * top_w..(t + 1) * top_w]
        };
        accumulate_layer(readout, &mut acc.layers[n_hidden], last, &gz, &mut g_act[t * top_w..(t + 1) * top_w]);
    }

    for l in (0..n_hidden).rev() {
        let layer = &mlp.layers[l];
        let w = layer.out_width;
        let iw = layer.in_width;
        let mut g_in = vec![0.0; len * iw];
        let mut gx = vec![0.0; w];
        match layer.neuron.expect("hidden layer") {
            Neuron::Lif(cfg) => {
                let mut gv_next = vec![0.0; w];
                let leak = 1.0 - 1.0 / cfg.tau;
                for t in (0..len).rev() {
                    let u = &rt.potentials[l][t * w..(t + 1) * w];
                    let s = &rt.activations[l][t * w..(t + 1) * w];
                    let gs = &g_act[t * w..(t + 1) * w];
                    for n in 0..w {
                        let h = surrogate_derivative(u[n] - cfg.v_th, &mlp.surrogate);
                        let reset = if mlp.detach_reset { 0.0 } else { (cfg.v_reset - u[n]) * h };
                        let gu = gs[n] * h + gv_next[n] * ((1.0 - s[n]) + reset);
                        gx[n] = gu / cfg.tau;
                        gv_next[n] = leak * gu;
                    }
                    let inp = layer_input(rt, input, l, t, iw);
                    accumulate_layer(layer, &mut acc.layers[l], inp, &gx, &mut g_in[t * iw..(t + 1) * iw]);
                }
            }
            neuron => {
                for t in 0..len {
                    let u = &rt.potentials[l][t * w..(t + 1) * w];
                    let gs = &g_act[t * w..(t + 1) * w];
                    for n in 0..w {
                        gx[n] = match neuron {
                            Neuron::Relu if u[n] <= 0.0 => 0.0,
                            _ => gs[n],
                        };
                    }
                    let inp = layer_input(rt, input, l, t, iw);
                    accumulate_layer(layer, &mut acc.layers[l], inp, &gx, &mut g_in[t * iw..(t + 1) * iw]);
                }
            }
        }
        g_act = g_in;
    }
    g_act
}

#[inline]
fn layer_input<'a>(rt: &'a RowTape, input: &'a [f64], l: usize, t: usize, iw: usize) -> &'a [f64] {
    if l == 0 {
        &input[t * iw..(t + 1) * iw]
    } else {
        &rt.activations[l - 1][t * iw..(t + 1) * iw]
    }
}

/// Adds `x ⊗ gx` to the weight gradient and writes `W gx` into `g_x`.
#[inline]
fn accumulate_layer(layer: &Layer, grad: &mut LayerGradient, x: &[f64], gx: &[f64], g_x: &mut [f64]) {
    let ow = layer.out_width;
    for (b, g) in grad.bias.iter_mut().zip(gx) {
        *b += g;
    }
    for (i, &xi) in x.iter().enumerate() {
        let wrow = &layer.weights[i * ow..(i + 1) * ow];
        if xi != 0.0 {
            let grow = &mut grad.weights[i * ow..(i + 1) * ow];
            for (gw, g) in grow.iter_mut().zip(gx) {
                *gw += xi * g;
            }
        }
        g_x[i] = wrow.iter().zip(gx).map(|(w, g)| w * g).sum();
    }
}

/// Binary spike raster `[time, neurons]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTrain {
    pub steps: usize,
    pub neurons: usize,
    pub spikes: Vec<u8>,
}

impl SpikeTrain {
    pub fn count(&self) -> usize {
        self.spikes.iter().map(|&s| s as usize).sum()
    }
}

impl ForwardTape {
    /// Spike raster of hidden layer `layer` for `row`, over its simulated steps.
    pub fn spike_train(&self, row: usize, layer: usize) -> SpikeTrain {
        let rt = &self.rows[row];
        let acts = &rt.activations[layer];
        let neurons = acts.len().checked_div(rt.len).unwrap_or(0);
        SpikeTrain {
            steps: rt.len,
            neurons,
            spikes: acts.iter().map(|&a| u8::from(a != 0.0)).collect(),
        }
    }
}

/// Repeats each `[batch, channel]` row `steps` times along a new time axis.
pub fn direct_encode(x: &[f64], channels: usize, steps: usize) -> Result<Tensor3> {
    if steps < 1 {
        return Err(Error::InvalidValue("direct encoding needs T >= 1".into()));
    }
    if channels == 0 || !x.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!("{} values are not rows of {channels}", x.len())));
    }
    let batch = x.len() / channels;
    let mut out = Tensor3::zeros([batch, steps, channels]);
    for b in 0..batch {
        let src = &x[b * channels..(b + 1) * channels];
        for t in 0..steps {
            out.at_mut(b, t).copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Independent Bernoulli draws with the input as firing probability.
pub fn poisson_encode<R: Rng>(x: &[f64], channels: usize, steps: usize, rng: &mut R) -> Result<Tensor3> {
    if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidValue(format!("poisson rate {bad} outside [0, 1]")));
    }
    let mut out = direct_encode(x, channels, steps)?;
    for p in out.data_mut() {
        *p = if rng.gen::<f64>() < *p { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Mean over the time axis: `[batch, T, channel] -> [batch, channel]`.
pub fn mean_decode(y: &Tensor3) -> Vec<f64> {
    let [batch, steps, channels] = y.dims();
    let mut out = vec![0.0; batch * channels];
    if steps == 0 {
        return out;
    }
    for b in 0..batch {
        let dst = &mut out[b * channels..(b + 1) * channels];
        for t in 0..steps {
            for (d, v) in dst.iter_mut().zip(y.at(b, t)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= steps as f64);
    }
    out
}
