//! Cycle-level model of the SRAM compute-in-memory macro.
//!
//! The macro has `lanes` MAC blocks. Each block holds one weight column of
//! `rows` signed words, gates it with one-bit inputs and sums it through an
//! adder tree. The sum goes through the scaler into a VMEM cell, which keeps
//! the membrane word in two copies (A and B) and updates it in three cycles
//! with a single full-adder chain:
//!
//! 1. `v_mid = v_init + MAC`, written to the idle copy.
//! 2. `v'_mid = v_mid + (-(DCY + TH))`, written back to the first copy. The
//!    sign bit of `v'_mid` is the spike decision: clear means a spike.
//! 3. No spike: `v_final = v'_mid + TH`. Spike: the zero word is driven
//!    instead of the adder output. Written to the idle copy again.
//!
//! Every addition wraps at the word width, like a ripple-carry chain.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::neuron::{SpikeTrain, SpikeVector};
use crate::quant::{
    scale_wide, to_fixed, weight_range, FixedLayer, FixedPointFormat, ScalerConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroConfig {
    pub lanes: usize,
    pub rows: usize,
    pub weight_bits: u32,
    pub vmem_bits: u32,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            lanes: 32,
            rows: 256,
            weight_bits: 4,
            vmem_bits: 10,
        }
    }
}

impl MacroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 || self.rows == 0 {
            return Err(param("macro needs at least one lane and one row"));
        }
        if !(2..=8).contains(&self.weight_bits) {
            return Err(param(format!(
                "weight_bits must be in 2..=8, got {}",
                self.weight_bits
            )));
        }
        if self.vmem_bits < self.weight_bits || self.vmem_bits > 32 {
            return Err(param(format!(
                "vmem_bits must be in weight_bits..=32, got {}",
                self.vmem_bits
            )));
        }
        Ok(())
    }

    /// Integer VMEM word; only the width matters inside the macro.
    pub fn vmem_format(&self) -> FixedPointFormat {
        FixedPointFormat {
            total_bits: self.vmem_bits,
            frac_bits: 0,
        }
    }

    /// Exact range of one block's adder-tree output.
    pub fn mac_range(&self) -> (i64, i64) {
        let (lo, hi) = weight_range(self.weight_bits);
        (lo as i64 * self.rows as i64, hi as i64 * self.rows as i64)
    }
}

/// Per-layer constant operands fed to the VMEM multiplexer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroLayerConstants {
    pub dcy: i32,
    pub th: i32,
    /// `-(dcy + th)` reduced to the word width.
    pub dcy_plus_th: i32,
}

impl MacroLayerConstants {
    pub fn new(dcy: i32, th: i32, fmt: &FixedPointFormat) -> Self {
        Self {
            dcy,
            th,
            dcy_plus_th: fmt.wrap(-(dcy as i64 + th as i64)),
        }
    }

    pub fn from_real(beta: f64, theta: f64, fmt: &FixedPointFormat) -> Self {
        Self::new(to_fixed(beta, fmt), to_fixed(theta, fmt), fmt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VmemCopy {
    #[default]
    A,
    B,
}

impl VmemCopy {
    pub fn other(self) -> Self {
        match self {
            VmemCopy::A => VmemCopy::B,
            VmemCopy::B => VmemCopy::A,
        }
    }
}

/// The two storage words of one VMEM cell and which one is live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VmemCellState {
    pub word_a: i32,
    pub word_b: i32,
    pub active: VmemCopy,
}

impl VmemCellState {
    pub fn read(&self, c: VmemCopy) -> i32 {
        match c {
            VmemCopy::A => self.word_a,
            VmemCopy::B => self.word_b,
        }
    }

    fn write(&mut self, c: VmemCopy, v: i32) {
        match c {
            VmemCopy::A => self.word_a = v,
            VmemCopy::B => self.word_b = v,
        }
    }

    pub fn live(&self) -> i32 {
        self.read(self.active)
    }
}

/// Which operand the multiplexer routes to the adder's B port.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MuxSelect {
    Mac = 0,
    NegDcyTh = 1,
    Th = 2,
    /// The spike circuit drives the zero word; the adder output is unused.
    SpikeReset = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub select: MuxSelect,
    pub adder_a: i32,
    pub adder_b: i32,
    /// Word written back this cycle.
    pub sum: i32,
    pub written_to: VmemCopy,
    /// Signed overflow in the adder chain.
    pub wrapped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmemCellTrace {
    pub v_init: i32,
    pub v_mid: i32,
    pub v_mid_prime: i32,
    pub v_final: i32,
    pub spike: bool,
    pub cycles: [CycleRecord; 3],
}

impl VmemCellTrace {
    pub fn wrapped(&self) -> bool {
        self.cycles.iter().any(|c| c.wrapped)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LaneMask {
    pub enabled: Vec<bool>,
}

impl LaneMask {
    pub fn all(lanes: usize) -> Self {
        Self {
            enabled: vec![true; lanes],
        }
    }

    pub fn none(lanes: usize) -> Self {
        Self {
            enabled: vec![false; lanes],
        }
    }

    /// First `n` lanes enabled.
    pub fn first(lanes: usize, n: usize) -> Self {
        Self {
            enabled: (0..lanes).map(|l| l < n).collect(),
        }
    }
}

/// Input bits and one lane's weight column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacStimulus {
    pub input_bits: Vec<bool>,
    pub weight_column: Vec<i8>,
}

/// Ripple-carry addition of two `bits`-wide words. Returns the wrapped sum
/// and whether signed overflow occurred.
pub fn ripple_add(a: i32, b: i32, bits: u32) -> (i32, bool) {
    let (a, b) = (a as u32 as u64, b as u32 as u64);
    let mut carry = 0u64;
    let mut carry_into_msb = 0u64;
    let mut out = 0u64;
    for k in 0..bits {
        let x = (a >> k) & 1;
        let y = (b >> k) & 1;
        if k == bits - 1 {
            carry_into_msb = carry;
        }
        out |= (x ^ y ^ carry) << k;
        carry = (x & y) | (carry & (x ^ y));
    }
    let shift = 64 - bits;
    (
        ((out << shift) as i64 >> shift) as i32,
        carry_into_msb != carry,
    )
}

/// One weight cell: each stored bit is read inverted and NORed with the
/// inverted input, which yields `weight` when the input is 1 and 0 otherwise.
pub fn gate_multiply(weight: i8, in_bit: bool) -> i8 {
    const BITS: u32 = 8;
    let wb = !(weight as u8);
    let inb: u8 = if in_bit { 0 } else { 0xff };
    let mut out = 0u8;
    for k in 0..BITS {
        let nor = !(((wb >> k) & 1) | (inb & 1)) & 1;
        out |= nor << k;
    }
    out as i8
}

/// Pairwise adder tree over the gated products; exact, no intermediate
/// truncation.
pub fn mac_block_slices(input_bits: &[bool], weights: &[i8]) -> i32 {
    let mut level: Vec<i32> = input_bits
        .iter()
        .zip(weights)
        .map(|(&b, &w)| gate_multiply(w, b) as i32)
        .collect();
    while level.len() > 1 {
        level = level.chunks(2).map(|p| p.iter().sum()).collect();
    }
    level.first().copied().unwrap_or(0)
}

pub fn mac_block(stim: &MacStimulus) -> i32 {
    mac_block_slices(&stim.input_bits, &stim.weight_column)
}

/// Three-cycle ping-pong update of one VMEM cell. `mac` is already in VMEM
/// units (scaler output).
pub fn vmem_update_3cycle(
    state: &VmemCellState,
    mac: i32,
    k: &MacroLayerConstants,
    fmt: &FixedPointFormat,
) -> (VmemCellState, bool, VmemCellTrace) {
    let bits = fmt.total_bits;
    let mut next = *state;
    let home = state.active;
    let away = home.other();
    let v_init = state.read(home);

    // cycle 1
    let (v_mid, w1) = ripple_add(v_init, mac, bits);
    next.write(away, v_mid);
    let c1 = CycleRecord {
        select: MuxSelect::Mac,
        adder_a: v_init,
        adder_b: mac,
        sum: v_mid,
        written_to: away,
        wrapped: w1,
    };

    // cycle 2
    let (v_mid_prime, w2) = ripple_add(next.read(away), k.dcy_plus_th, bits);
    next.write(home, v_mid_prime);
    let spike = !fmt.sign_bit(v_mid_prime);
    let c2 = CycleRecord {
        select: MuxSelect::NegDcyTh,
        adder_a: v_mid,
        adder_b: k.dcy_plus_th,
        sum: v_mid_prime,
        written_to: home,
        wrapped: w2,
    };

    // cycle 3
    let c3 = if spike {
        CycleRecord {
            select: MuxSelect::SpikeReset,
            adder_a: v_mid_prime,
            adder_b: 0,
            sum: 0,
            written_to: away,
            wrapped: false,
        }
    } else {
        let (s, w3) = ripple_add(next.read(home), k.th, bits);
        CycleRecord {
            select: MuxSelect::Th,
            adder_a: v_mid_prime,
            adder_b: k.th,
            sum: s,
            written_to: away,
            wrapped: w3,
        }
    };
    let v_final = c3.sum;
    next.write(away, v_final);
    next.active = away;

    let trace = VmemCellTrace {
        v_init,
        v_mid,
        v_mid_prime,
        v_final,
        spike,
        cycles: [c1, c2, c3],
    };
    (next, spike, trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroStep {
    pub lanes: Vec<VmemCellState>,
    pub spikes: SpikeVector,
    /// `None` for disabled lanes.
    pub traces: Vec<Option<VmemCellTrace>>,
}

fn scale_checked(acc: i64, cfg: &MacroConfig, scaler: &ScalerConfig) -> Result<i32> {
    let (lo, hi) = cfg.mac_range();
    if acc < lo || acc > hi {
        return Err(Error::Contract(format!(
            "MAC sum {acc} outside [{lo}, {hi}]"
        )));
    }
    Ok(scale_wide(acc, scaler, &cfg.vmem_format()))
}

/// Updates every enabled lane from its already-scaled MAC value. Lanes never
/// read each other's state.
fn update_lanes(
    cfg: &MacroConfig,
    lanes: &[VmemCellState],
    macs: &[i32],
    k: &MacroLayerConstants,
    mask: &LaneMask,
) -> MacroStep {
    let fmt = cfg.vmem_format();
    let mut out = Vec::with_capacity(lanes.len());
    let mut spikes = Vec::with_capacity(lanes.len());
    let mut traces = Vec::with_capacity(lanes.len());
    for ((state, &mac), &en) in lanes.iter().zip(macs).zip(&mask.enabled) {
        if en {
            let (next, s, tr) = vmem_update_3cycle(state, mac, k, &fmt);
            out.push(next);
            spikes.push(s);
            traces.push(Some(tr));
        } else {
            out.push(*state);
            spikes.push(false);
            traces.push(None);
        }
    }
    MacroStep {
        lanes: out,
        spikes: spikes.into(),
        traces,
    }
}

/// One timestep across all lanes: MAC block, scaler, then the VMEM update.
/// Disabled lanes keep their state and emit no spike.
pub fn macro_timestep(
    cfg: &MacroConfig,
    lanes: &[VmemCellState],
    stimuli: &[MacStimulus],
    k: &MacroLayerConstants,
    scaler: &ScalerConfig,
    mask: &LaneMask,
) -> Result<MacroStep> {
    cfg.validate()?;
    scaler.validate()?;
    if lanes.len() != cfg.lanes || stimuli.len() != cfg.lanes || mask.enabled.len() != cfg.lanes {
        return Err(shape(format!(
            "expected {} lanes, got states={} stimuli={} mask={}",
            cfg.lanes,
            lanes.len(),
            stimuli.len(),
            mask.enabled.len()
        )));
    }
    let (wlo, whi) = weight_range(cfg.weight_bits);
    let mut macs = vec![0i32; cfg.lanes];
    for (l, stim) in stimuli.iter().enumerate() {
        if !mask.enabled[l] {
            continue;
        }
        if stim.input_bits.len() != cfg.rows || stim.weight_column.len() != cfg.rows {
            return Err(shape(format!(
                "lane {l}: stimulus must have {} rows, got inputs={} weights={}",
                cfg.rows,
                stim.input_bits.len(),
                stim.weight_column.len()
            )));
        }
        if stim
            .weight_column
            .iter()
            .any(|&w| (w as i32) < wlo || (w as i32) > whi)
        {
            return Err(param(format!(
                "lane {l}: weight outside the {}-bit range",
                cfg.weight_bits
            )));
        }
        macs[l] = scale_checked(mac_block(stim) as i64, cfg, scaler)?;
    }
    Ok(update_lanes(cfg, lanes, &macs, k, mask))
}

/// How a layer is cut into macro tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    /// Output neurons per lane group, at most `MacroConfig::lanes`.
    pub lane_group: usize,
    /// Inputs per row group, at most `MacroConfig::rows`.
    pub row_group: usize,
}

impl Tiling {
    pub fn full(cfg: &MacroConfig) -> Self {
        Self {
            lane_group: cfg.lanes,
            row_group: cfg.rows,
        }
    }
}

/// One trace row set: `(timestep, output neuron, cell trace)`.
pub type LaneTrace = (usize, usize, VmemCellTrace);

#[derive(Clone, Debug, PartialEq)]
pub struct MacroLayerRun {
    pub spikes: SpikeTrain,
    pub traces: Option<Vec<LaneTrace>>,
}

/// Maps a layer of any size onto the macro. Output neurons are split into
/// lane groups and inputs into row groups; row-group sums are accumulated as
/// exact integers and scaled once.
pub fn run_layer_on_macro(
    cfg: &MacroConfig,
    layer: &FixedLayer,
    input: &SpikeTrain,
    scaler: &ScalerConfig,
    tiling: &Tiling,
    record_trace: bool,
) -> Result<MacroLayerRun> {
    cfg.validate()?;
    scaler.validate()?;
    let w = &layer.weights;
    if w.bits != cfg.weight_bits {
        return Err(param(format!(
            "weights quantized at {} bits but macro stores {}-bit words",
            w.bits, cfg.weight_bits
        )));
    }
    if input.width != w.cols {
        return Err(shape(format!(
            "input train has width {} but layer expects {}",
            input.width, w.cols
        )));
    }
    if tiling.lane_group == 0 || tiling.lane_group > cfg.lanes {
        return Err(param(format!("lane group must be in 1..={}", cfg.lanes)));
    }
    if tiling.row_group == 0 || tiling.row_group > cfg.rows {
        return Err(param(format!("row group must be in 1..={}", cfg.rows)));
    }

    let fmt = cfg.vmem_format();
    let k = MacroLayerConstants::new(layer.dcy, layer.th, &fmt);
    let steps = input.steps();
    let mut out = vec![vec![false; w.rows]; steps];
    let mut traces = record_trace.then(Vec::new);

    let row_groups: Vec<(usize, usize)> = (0..w.cols)
        .step_by(tiling.row_group)
        .map(|r0| (r0, (r0 + tiling.row_group).min(w.cols)))
        .collect();

    for lane0 in (0..w.rows).step_by(tiling.lane_group) {
        let n = (lane0 + tiling.lane_group).min(w.rows) - lane0;
        let mask = LaneMask::first(cfg.lanes, n);

        // SRAM contents per row group: one zero-padded column per lane.
        let columns: Vec<Vec<Vec<i8>>> = row_groups
            .iter()
            .map(|&(r0, r1)| {
                (0..cfg.lanes)
                    .map(|l| {
                        let mut col = vec![0i8; cfg.rows];
                        if l < n {
                            for (dst, c) in col.iter_mut().zip(r0..r1) {
                                *dst = w.get(lane0 + l, c);
                            }
                        }
                        col
                    })
                    .collect()
            })
            .collect();

        let mut states = vec![VmemCellState::default(); cfg.lanes];
        let mut bits = vec![false; cfg.rows];
        for (t, frame) in input.frames.iter().enumerate() {
            let mut acc = vec![0i64; cfg.lanes];
            for (g, &(r0, r1)) in row_groups.iter().enumerate() {
                bits.iter_mut().for_each(|b| *b = false);
                bits[..r1 - r0].copy_from_slice(&frame.s[r0..r1]);
                for l in 0..n {
                    acc[l] += mac_block_slices(&bits, &columns[g][l]) as i64;
                }
            }
            let macs: Vec<i32> = acc.iter().map(|&a| scale_wide(a, scaler, &fmt)).collect();
            let step = update_lanes(cfg, &states, &macs, &k, &mask);
            for l in 0..n {
                out[t][lane0 + l] = step.spikes.s[l];
                if let (Some(tr), Some(rec)) = (traces.as_mut(), step.traces[l]) {
                    tr.push((t, lane0 + l, rec));
                }
            }
            states = step.lanes;
        }
    }

    if let Some(tr) = traces.as_mut() {
        tr.sort_by_key(|&(t, lane, _)| (t, lane));
    }
    Ok(MacroLayerRun {
        spikes: SpikeTrain {
            width: w.rows,
            frames: out.into_iter().map(SpikeVector::from).collect(),
        },
        traces,
    })
}

pub const TRACE_CSV_HEADER: &str = "timestep,lane,cycle,mux_select,adder_a,adder_b,sum,spike";

/// One CSV row per `(timestep, lane, cycle)`; cycles are numbered 1 to 3 and
/// `spike` repeats the lane's decision for that timestep on each row.
pub fn write_trace_csv<W: Write>(mut w: W, rows: &[LaneTrace]) -> Result<()> {
    writeln!(w, "{TRACE_CSV_HEADER}")?;
    for (t, lane, tr) in rows {
        for (c, rec) in tr.cycles.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                t,
                lane,
                c + 1,
                rec.select as u8,
                rec.adder_a,
                rec.adder_b,
                rec.sum,
                tr.spike as u8
            )?;
        }
    }
    Ok(())
}
