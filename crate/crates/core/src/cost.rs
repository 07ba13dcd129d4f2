//! Latency and energy model: parallel in-memory membrane update against a
//! serial digital baseline, plus SOP energy accounting.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::neuron::SpikeTrain;

/// The two published efficiency figures for the macro, which disagree with
/// each other. Kept for documentation; `tops_per_watt` does not target either.
pub const PUBLISHED_TOPS_PER_W: [f64; 2] = [20.7, 21.6];
/// Measured LIF-module energy improvement over a synthesized digital LIF.
/// Circuit-level; not derived by this model.
pub const PUBLISHED_LIF_ENERGY_GAIN: f64 = 5.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub parallel_cycle_ns: f64,
    pub parallel_cycles_per_update: u32,
    pub serial_freq_mhz: f64,
    pub serial_cycles_per_neuron: u32,
    pub sop_energy_pj: f64,
    pub ops_per_sop: u32,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            parallel_cycle_ns: 7.0,
            parallel_cycles_per_update: 3,
            serial_freq_mhz: 200.0,
            serial_cycles_per_neuron: 4,
            sop_energy_pj: 0.09,
            ops_per_sop: 2,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.parallel_cycle_ns)
            || !pos(self.serial_freq_mhz)
            || !pos(self.sop_energy_pj)
            || self.parallel_cycles_per_update == 0
            || self.serial_cycles_per_neuron == 0
            || self.ops_per_sop == 0
        {
            return Err(param(format!(
                "cost parameters must all be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Flat summary; times in ns, energy in pJ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_neurons: usize,
    pub parallel_latency_ns: f64,
    pub serial_latency_ns: f64,
    pub latency_ratio: f64,
    pub total_sops: u64,
    pub total_energy_pj: f64,
    pub tops_per_watt: f64,
    pub sop_energy_pj: f64,
    pub ops_per_sop: u32,
}

/// All lanes update at once, so lane count does not appear.
pub fn parallel_latency(p: &CostParams) -> f64 {
    p.parallel_cycles_per_update as f64 * p.parallel_cycle_ns
}

pub fn serial_latency(n_neurons: usize, p: &CostParams) -> f64 {
    n_neurons as f64 * p.serial_cycles_per_neuron as f64 * (1000.0 / p.serial_freq_mhz)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub total_sops: u64,
    pub total_energy_pj: f64,
    pub tops_per_watt: f64,
}

/// `ops_per_sop / (E_sop * 1e-12 J) / 1e12` reduces to `ops_per_sop / E_sop`
/// with `E_sop` in pJ.
pub fn tops_per_watt(p: &CostParams) -> f64 {
    p.ops_per_sop as f64 / p.sop_energy_pj
}

pub fn energy_report(sop_count: u64, p: &CostParams) -> EnergyReport {
    EnergyReport {
        total_sops: sop_count,
        total_energy_pj: sop_count as f64 * p.sop_energy_pj,
        tops_per_watt: tops_per_watt(p),
    }
}

pub fn cost_report(n_neurons: usize, sop_count: u64, p: &CostParams) -> Result<CostReport> {
    p.validate()?;
    if n_neurons == 0 {
        return Err(param("serial baseline needs at least one neuron"));
    }
    let par = parallel_latency(p);
    let ser = serial_latency(n_neurons, p);
    let e = energy_report(sop_count, p);
    Ok(CostReport {
        n_neurons,
        parallel_latency_ns: par,
        serial_latency_ns: ser,
        latency_ratio: ser / par,
        total_sops: e.total_sops,
        total_energy_pj: e.total_energy_pj,
        tops_per_watt: e.tops_per_watt,
        sop_energy_pj: p.sop_energy_pj,
        ops_per_sop: p.ops_per_sop,
    })
}

/// Spike traffic of one evaluated network: what each layer received and
/// how many synapses every input of that layer drives.
#[derive(Clone, Debug, PartialEq)]
pub struct SopTrace {
    pub layers: Vec<LayerSopTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSopTrace {
    pub input: SpikeTrain,
    /// Fan-out per input neuron; length equals `input.width`.
    pub fan_out: Vec<u64>,
}

/// One SOP per (input spike, synapse it reaches).
pub fn count_sops(trace: Option<&SopTrace>) -> Result<u64> {
    let trace = trace.ok_or_else(|| Error::State("no spike trace was retained".into()))?;
    let mut total = 0u64;
    for (l, layer) in trace.layers.iter().enumerate() {
        if layer.fan_out.len() != layer.input.width {
            return Err(Error::Shape(format!(
                "layer {l}: fan-out has {} entries for {} inputs",
                layer.fan_out.len(),
                layer.input.width
            )));
        }
        for frame in &layer.input.frames {
            total += frame.active().map(|i| layer.fan_out[i]).sum::<u64>();
        }
    }
    Ok(total)
}
