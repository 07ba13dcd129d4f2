//! Floating-point reference semantics for the exponential-decay (v-LIF) and
//! linear-decay (LD-LIF) neurons.
//!
//! Both neuron types share the same step contract: take the stored potential
//! and the summed synaptic current for one timestep, produce the new stored
//! potential and the spike vector. Spiking is `v_pre >= theta` followed by a
//! hard reset to zero, which is the rule the CIM macro implements with its
//! sign bit.

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Result};

/// Closed-form free decay of a leaky membrane: `v0 * exp(-t / tau_m)`.
pub fn exact_decay(v0: f64, t: f64, tau_m: f64) -> Result<f64> {
    if !(tau_m > 0.0) {
        return Err(param(format!("tau_m must be positive, got {tau_m}")));
    }
    if !(t >= 0.0) {
        return Err(param(format!("t must be non-negative, got {t}")));
    }
    Ok(v0 * (-t / tau_m).exp())
}

/// Parameters of the Forward-Euler discretised LIF neuron.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VLifParams {
    pub tau_m: f64,
    pub dt: f64,
    pub theta: f64,
}

impl Default for VLifParams {
    fn default() -> Self {
        Self {
            tau_m: 5.0,
            dt: 1.0,
            theta: 1.0,
        }
    }
}

impl VLifParams {
    pub fn new(tau_m: f64, dt: f64, theta: f64) -> Result<Self> {
        let p = Self { tau_m, dt, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 0.0) || !self.tau_m.is_finite() {
            return Err(param(format!("tau_m must be positive, got {}", self.tau_m)));
        }
        if !(self.dt > 0.0 && self.dt <= self.tau_m) {
            return Err(param(format!(
                "dt must satisfy 0 < dt <= tau_m, got dt={} tau_m={}",
                self.dt, self.tau_m
            )));
        }
        if !(self.theta > 0.0) {
            return Err(param(format!("theta must be positive, got {}", self.theta)));
        }
        Ok(())
    }

    /// Multiplicative decay factor `1 - dt/tau_m`.
    pub fn alpha(&self) -> f64 {
        1.0 - self.gain()
    }

    /// Input gain `dt/tau_m`.
    pub fn gain(&self) -> f64 {
        self.dt / self.tau_m
    }
}

/// Parameters of the linear-decay neuron. `beta` is shared by every neuron of
/// a layer and may be negative, in which case the potential grows each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdLifParams {
    pub beta: f64,
    pub theta: f64,
    pub beta_learnable: bool,
}

/// `beta = 0.2`, `theta = 1.0`, learnable.
impl Default for LdLifParams {
    fn default() -> Self {
        Self {
            beta: 0.2,
            theta: 1.0,
            beta_learnable: true,
        }
    }
}

impl LdLifParams {
    pub fn new(beta: f64, theta: f64) -> Result<Self> {
        let p = Self {
            beta,
            theta,
            beta_learnable: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(param(format!("theta must be positive, got {}", self.theta)));
        }
        if !self.beta.is_finite() {
            return Err(param(format!("beta must be finite, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NeuronParams {
    VLif(VLifParams),
    LdLif(LdLifParams),
}

impl NeuronParams {
    pub fn theta(&self) -> f64 {
        match self {
            NeuronParams::VLif(p) => p.theta,
            NeuronParams::LdLif(p) => p.theta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NeuronParams::VLif(p) => p.validate(),
            NeuronParams::LdLif(p) => p.validate(),
        }
    }

    /// Advances one timestep with whichever neuron model `self` holds.
    pub fn step(&self, v: &MembraneState, i: &[f64]) -> Result<(MembraneState, SpikeVector)> {
        match self {
            NeuronParams::VLif(p) => v_lif_step(v, p, i),
            NeuronParams::LdLif(p) => ld_lif_step(v, p, i),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState {
    pub v: Vec<f64>,
}

impl MembraneState {
    pub fn zeros(n: usize) -> Self {
        Self { v: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

impl From<Vec<f64>> for MembraneState {
    fn from(v: Vec<f64>) -> Self {
        Self { v }
    }
}

/// One bit per neuron for a single timestep.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SpikeVector {
    pub s: Vec<bool>,
}

impl SpikeVector {
    pub fn zeros(n: usize) -> Self {
        Self { s: vec![false; n] }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            s: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn count(&self) -> usize {
        self.s.iter().filter(|&&b| b).count()
    }

    /// Indices of the neurons that spiked.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.s
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }
}

impl From<Vec<bool>> for SpikeVector {
    fn from(s: Vec<bool>) -> Self {
        Self { s }
    }
}

/// A `T x width` binary train; `frames[t]` is the spike vector at step `t`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpikeTrain {
    pub width: usize,
    pub frames: Vec<SpikeVector>,
}

impl SpikeTrain {
    pub fn empty(width: usize) -> Self {
        Self {
            width,
            frames: Vec::new(),
        }
    }

    pub fn zeros(width: usize, steps: usize) -> Self {
        Self {
            width,
            frames: vec![SpikeVector::zeros(width); steps],
        }
    }

    pub fn new(width: usize, frames: Vec<SpikeVector>) -> Result<Self> {
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != width) {
            return Err(shape(format!(
                "frame {t} has {} neurons, expected {width}",
                f.len()
            )));
        }
        Ok(Self { width, frames })
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn total_spikes(&self) -> usize {
        self.frames.iter().map(SpikeVector::count).sum()
    }

    /// Spike count per neuron summed over all timesteps.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.width];
        for f in &self.frames {
            for i in f.active() {
                c[i] += 1;
            }
        }
        c
    }
}

/// Dense row-major matrix; rows are output neurons, columns input neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(param("weight matrix contains non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `w * s` for a binary `s`: a masked row sum, no multiplies.
pub fn synaptic_current(w: &WeightMatrix, s: &SpikeVector) -> Result<Vec<f64>> {
    if w.cols != s.len() {
        return Err(shape(format!(
            "weight matrix has {} columns but spike vector has {} entries",
            w.cols,
            s.len()
        )));
    }
    let active: Vec<usize> = s.active().collect();
    Ok((0..w.rows)
        .map(|r| {
            let row = w.row(r);
            active.iter().map(|&c| row[c]).sum()
        })
        .collect())
}

fn check_len(v: &MembraneState, i: &[f64]) -> Result<()> {
    if v.len() != i.len() {
        return Err(shape(format!(
            "membrane has {} neurons but current has {}",
            v.len(),
            i.len()
        )));
    }
    Ok(())
}

fn fire_and_reset(mut v_pre: Vec<f64>, theta: f64) -> (MembraneState, SpikeVector) {
    let mut s = Vec::with_capacity(v_pre.len());
    for v in v_pre.iter_mut() {
        let fired = *v >= theta;
        if fired {
            *v = 0.0;
        }
        s.push(fired);
    }
    (MembraneState { v: v_pre }, SpikeVector { s })
}

/// Forward-Euler LIF step: `v' = (1 - dt/tau) v + (dt/tau) i`, then
/// threshold and reset. `i` is the raw summed synaptic current.
pub fn v_lif_step(
    v: &MembraneState,
    params: &VLifParams,
    i: &[f64],
) -> Result<(MembraneState, SpikeVector)> {
    check_len(v, i)?;
    let (alpha, gain) = (params.alpha(), params.gain());
    let v_pre =
        v.v.iter()
            .zip(i)
            .map(|(&v, &i)| alpha * v + gain * i)
            .collect();
    Ok(fire_and_reset(v_pre, params.theta))
}

/// Linear-decay step: subtract `beta`, add the input, then threshold and
/// reset.
pub fn ld_lif_step(
    v: &MembraneState,
    params: &LdLifParams,
    i: &[f64],
) -> Result<(MembraneState, SpikeVector)> {
    check_len(v, i)?;
    let v_pre =
        v.v.iter()
            .zip(i)
            .map(|(&v, &i)| (v - params.beta) + i)
            .collect();
    Ok(fire_and_reset(v_pre, params.theta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub spikes: SpikeTrain,
    /// Post-reset potentials per timestep, present only when requested.
    pub trace: Option<Vec<MembraneState>>,
}

/// Runs one layer over a whole input train starting from `v = 0`.
pub fn layer_forward(
    w: &WeightMatrix,
    params: &NeuronParams,
    input: &SpikeTrain,
    retain_trace: bool,
) -> Result<LayerOutput> {
    params.validate()?;
    if input.width != w.cols {
        return Err(shape(format!(
            "input train has width {} but layer expects {}",
            input.width, w.cols
        )));
    }
    let mut v = MembraneState::zeros(w.rows);
    let mut frames = Vec::with_capacity(input.steps());
    let mut trace = retain_trace.then(|| Vec::with_capacity(input.steps()));
    for s_in in &input.frames {
        let i = synaptic_current(w, s_in)?;
        let (next, s) = params.step(&v, &i)?;
        v = next;
        if let Some(t) = trace.as_mut() {
            t.push(v.clone());
        }
        frames.push(s);
    }
    Ok(LayerOutput {
        spikes: SpikeTrain {
            width: w.rows,
            frames,
        },
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    #[default]
    Rectangular,
    #[serde(rename = "arctan")]
    ArcTan,
    Sigmoid,
}

/// Pseudo-derivative used in place of the Heaviside step during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Rectangular,
            width: 1.0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(param(format!(
                "surrogate width must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }

    /// Smooth spike function whose derivative is `grad`. Only defined for the
    /// kinds that have a bounded smooth primitive.
    pub fn activation(&self, v_pre: f64, theta: f64) -> f64 {
        let x = (v_pre - theta) / self.width;
        match self.kind {
            SurrogateKind::Sigmoid => sigmoid(x),
            SurrogateKind::ArcTan => 0.5 + x.atan() / std::f64::consts::PI,
            SurrogateKind::Rectangular => (x + 0.5).clamp(0.0, 1.0),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Surrogate derivative of the spike nonlinearity at `v_pre`. Each kind
/// integrates to one over the real line and peaks at `theta`.
pub fn surrogate_grad(v_pre: f64, theta: f64, cfg: &SurrogateConfig) -> f64 {
    let w = cfg.width;
    let x = (v_pre - theta) / w;
    match cfg.kind {
        SurrogateKind::Rectangular => {
            if x.abs() <= 0.5 {
                1.0 / w
            } else {
                0.0
            }
        }
        SurrogateKind::ArcTan => 1.0 / (std::f64::consts::PI * w * (1.0 + x * x)),
        SurrogateKind::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s) / w
        }
    }
}
