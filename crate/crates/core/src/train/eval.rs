//! Inference in three interchangeable paths, post-training quantization, and
//! spike-rate statistics.
//!
//! * float: the neuron reference on unquantized weights;
//! * quantized: the straight-line fixed-point reference;
//! * macro: the cycle-level CIM macro simulation.
//!
//! The quantized and macro paths must agree bit for bit.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cim::{run_layer_on_macro, LaneTrace, MacroConfig, Tiling};
use crate::cost::{LayerSopTrace, SopTrace};
use crate::data::Sample;
use crate::error::{param, shape, Error, Result};
use crate::neuron::{layer_forward, NeuronParams, SpikeTrain};
use crate::quant::{
    fixed_layer_forward, quantize_weights, FixedLayer, FixedPointFormat, QuantizedWeights,
    ScalerConfig,
};

use super::bptt::predict;
use super::network::{NetworkParams, NetworkSpec};

/// Post-training quantization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtqConfig {
    pub bits: u32,
    pub scaler: ScalerConfig,
    pub vmem_bits: u32,
}

impl Default for PtqConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            scaler: ScalerConfig {
                shift: 0,
                ..ScalerConfig::default()
            },
            vmem_bits: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub fixed: FixedLayer,
    /// Potential represented by one raw VMEM step: `scale * 2^shift`.
    pub lsb: f64,
    pub beta: f64,
    pub theta: f64,
    pub fan_out: Vec<u64>,
}

/// An LD-LIF network ready for integer inference.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedNetwork {
    pub spec_hash: [u8; 32],
    pub layers: Vec<QuantizedLayer>,
    pub scaler: ScalerConfig,
    pub vmem: FixedPointFormat,
}

impl QuantizedNetwork {
    pub fn bits(&self) -> u32 {
        self.layers.first().map_or(0, |l| l.fixed.weights.bits)
    }

    /// Rebuilds the raw constants from per-layer weights, decay and
    /// threshold. Used both after PTQ and when loading a checkpoint.
    pub fn from_parts(
        spec: &NetworkSpec,
        parts: Vec<(QuantizedWeights, f64, f64)>,
        cfg: &PtqConfig,
    ) -> Result<Self> {
        spec.validate()?;
        cfg.scaler.validate()?;
        let vmem = FixedPointFormat::new(cfg.vmem_bits, 0)?;
        if parts.len() != spec.layers.len() {
            return Err(shape(format!(
                "{} quantized layers for a {}-layer spec",
                parts.len(),
                spec.layers.len()
            )));
        }
        let layers = spec
            .layers
            .iter()
            .zip(parts)
            .enumerate()
            .map(|(l, (ls, (weights, beta, theta)))| {
                if weights.rows != ls.out_dim || weights.cols != ls.in_dim {
                    return Err(shape(format!(
                        "layer {l}: {}x{} weights for a {}x{} layer",
                        weights.rows, weights.cols, ls.out_dim, ls.in_dim
                    )));
                }
                if weights.bits != cfg.bits {
                    return Err(param(format!(
                        "layer {l}: weights have {} bits, expected {}",
                        weights.bits, cfg.bits
                    )));
                }
                let lsb = weights.scale * (cfg.scaler.shift as f64).exp2();
                let raw = |x: f64| vmem.saturate((x / lsb).round() as i64);
                Ok(QuantizedLayer {
                    fixed: FixedLayer {
                        dcy: raw(beta),
                        th: raw(theta),
                        weights,
                    },
                    lsb,
                    beta,
                    theta,
                    fan_out: ls.lowering().fan_out(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec_hash: spec.hash(),
            layers,
            scaler: cfg.scaler,
            vmem,
        })
    }
}

/// Per-layer symmetric PTQ of a trained LD-LIF network. Decay and threshold
/// are frozen and expressed in units of the layer's VMEM step.
pub fn ptq(
    spec: &NetworkSpec,
    params: &NetworkParams,
    cfg: &PtqConfig,
) -> Result<QuantizedNetwork> {
    params.check(spec)?;
    let parts = spec
        .layers
        .iter()
        .zip(&params.layers)
        .enumerate()
        .map(|(l, (ls, lp))| {
            let NeuronParams::LdLif(n) = lp.neuron else {
                return Err(param(format!(
                    "layer {l} is not LD-LIF; only LD-LIF layers map to the macro"
                )));
            };
            let lowering = ls.lowering();
            let kernel = crate::neuron::WeightMatrix {
                rows: 1,
                cols: lp.weights.len(),
                data: lp.weights.clone(),
            };
            let qk = quantize_weights(&kernel, cfg.bits)?;
            let q = QuantizedWeights::new(
                ls.out_dim,
                ls.in_dim,
                lowering.expand(&qk.q),
                qk.scale,
                cfg.bits,
            )?;
            Ok((q, n.beta, n.theta))
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedNetwork::from_parts(spec, parts, cfg)
}

/// Output spike train of every layer for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkRun {
    pub layers: Vec<SpikeTrain>,
}

impl NetworkRun {
    pub fn output_counts(&self) -> Vec<f64> {
        self.layers
            .last()
            .map(|t| t.counts().into_iter().map(|c| c as f64).collect())
            .unwrap_or_default()
    }

    pub fn prediction(&self) -> usize {
        predict(&self.output_counts())
    }
}

pub fn run_float(
    spec: &NetworkSpec,
    params: &NetworkParams,
    input: &SpikeTrain,
) -> Result<NetworkRun> {
    params.check(spec)?;
    let mut x = input.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (m, lp) in params.matrices(spec).iter().zip(&params.layers) {
        x = layer_forward(m, &lp.neuron, &x, false)?.spikes;
        layers.push(x.clone());
    }
    Ok(NetworkRun { layers })
}

pub fn run_quantized(net: &QuantizedNetwork, input: &SpikeTrain) -> Result<NetworkRun> {
    let mut x = input.clone();
    let mut layers = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        x = fixed_layer_forward(&l.fixed, &net.scaler, &net.vmem, &x)?;
        layers.push(x.clone());
    }
    Ok(NetworkRun { layers })
}

fn check_macro(net: &QuantizedNetwork, cfg: &MacroConfig) -> Result<()> {
    if net.bits() != cfg.weight_bits {
        return Err(param(format!(
            "network quantized at {} bits, macro holds {}-bit weights",
            net.bits(),
            cfg.weight_bits
        )));
    }
    if net.vmem.total_bits != cfg.vmem_bits {
        return Err(param(format!(
            "network uses {}-bit VMEM words, macro has {}",
            net.vmem.total_bits, cfg.vmem_bits
        )));
    }
    Ok(())
}

/// Runs every layer on the macro model. With `traces`, the per-cell cycle
/// traces of each layer are returned alongside.
pub fn run_macro(
    net: &QuantizedNetwork,
    cfg: &MacroConfig,
    input: &SpikeTrain,
    traces: bool,
) -> Result<(NetworkRun, Vec<Vec<LaneTrace>>)> {
    check_macro(net, cfg)?;
    let mut x = input.clone();
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut all = Vec::new();
    for l in &net.layers {
        let r = run_layer_on_macro(cfg, &l.fixed, &x, &net.scaler, &Tiling::full(cfg), traces)?;
        if let Some(t) = r.traces {
            all.push(t);
        }
        x = r.spikes;
        layers.push(x.clone());
    }
    Ok((NetworkRun { layers }, all))
}

#[derive(Clone, Copy, Debug)]
pub enum Model<'a> {
    Float {
        spec: &'a NetworkSpec,
        params: &'a NetworkParams,
    },
    Quantized(&'a QuantizedNetwork),
    Macro(&'a QuantizedNetwork, MacroConfig),
}

impl Model<'_> {
    pub fn run(&self, input: &SpikeTrain) -> Result<NetworkRun> {
        match *self {
            Model::Float { spec, params } => run_float(spec, params, input),
            Model::Quantized(net) => run_quantized(net, input),
            Model::Macro(net, cfg) => Ok(run_macro(net, &cfg, input, false)?.0),
        }
    }

    fn fan_outs(&self) -> Vec<Vec<u64>> {
        match *self {
            Model::Float { spec, .. } => {
                spec.layers.iter().map(|l| l.lowering().fan_out()).collect()
            }
            Model::Quantized(net) | Model::Macro(net, _) => {
                net.layers.iter().map(|l| l.fan_out.clone()).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Per-sample layer spike trains, retained on request.
    pub runs: Option<Vec<NetworkRun>>,
    pub fan_outs: Vec<Vec<u64>>,
}

/// Samples are evaluated in parallel on the current rayon pool; results keep
/// dataset order.
pub fn evaluate(model: &Model<'_>, data: &[Sample], retain_traces: bool) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(param("accuracy is undefined on an empty dataset"));
    }
    if let Model::Macro(net, cfg) = model {
        check_macro(net, cfg)?;
    }
    let runs = data
        .par_iter()
        .map(|s| model.run(&s.train))
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<usize> = runs.iter().map(NetworkRun::prediction).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let correct = predictions
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        predictions,
        labels,
        runs: retain_traces.then_some(runs),
        fan_outs: model.fan_outs(),
    })
}

/// SOP trace of one evaluated sample: layer 0 sees the sample, layer `l`
/// sees layer `l - 1`'s output.
pub fn sop_trace(report: &EvalReport, data: &[Sample], sample: usize) -> Result<SopTrace> {
    let runs = report
        .runs
        .as_ref()
        .ok_or_else(|| Error::State("evaluation did not retain traces".into()))?;
    let run = runs
        .get(sample)
        .ok_or_else(|| param(format!("no sample {sample}")))?;
    let mut layers = Vec::with_capacity(run.layers.len());
    for (l, fan_out) in report.fan_outs.iter().enumerate() {
        let input = if l == 0 {
            data[sample].train.clone()
        } else {
            run.layers[l - 1].clone()
        };
        layers.push(LayerSopTrace {
            input,
            fan_out: fan_out.clone(),
        });
    }
    Ok(SopTrace { layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRates {
    pub sample: usize,
    pub label: usize,
    /// `rates[layer][t]`: fraction of the layer's neurons spiking at `t`.
    pub rates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeRateStats {
    pub samples: Vec<SampleRates>,
}

pub fn spike_rate_stats(report: &EvalReport) -> Result<SpikeRateStats> {
    let runs = report
        .runs
        .as_ref()
        .ok_or_else(|| Error::State("evaluation did not retain traces".into()))?;
    let samples = runs
        .iter()
        .zip(&report.labels)
        .enumerate()
        .map(|(sample, (run, &label))| SampleRates {
            sample,
            label,
            rates: run
                .layers
                .iter()
                .map(|train| {
                    train
                        .frames
                        .iter()
                        .map(|f| f.count() as f64 / train.width as f64)
                        .collect()
                })
                .collect(),
        })
        .collect();
    Ok(SpikeRateStats { samples })
}

impl SpikeRateStats {
    pub const CSV_HEADER: &'static str = "sample,label,layer,t,rate";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for s in &self.samples {
            for (layer, rates) in s.rates.iter().enumerate() {
                for (t, r) in rates.iter().enumerate() {
                    writeln!(w, "{},{},{},{},{}", s.sample, s.label, layer, t, r)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{LdLifParams, SpikeVector, VLifParams};
    use crate::train::network::{ConvShape, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ld(beta: f64) -> NeuronParams {
        NeuronParams::LdLif(LdLifParams::new(beta, 1.0).unwrap())
    }

    fn samples(width: usize, steps: usize, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| Sample {
                train: SpikeTrain {
                    width,
                    frames: (0..steps)
                        .map(|_| {
                            SpikeVector::from(
                                (0..width).map(|_| rng.gen_bool(0.3)).collect::<Vec<_>>(),
                            )
                        })
                        .collect(),
                },
                label: k % 3,
            })
            .collect()
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(2, 3, ld(0.1))],
            timesteps: 3,
        };
        let params = NetworkParams::init(&spec, 1.0, 0).unwrap();
        let m = Model::Float {
            spec: &spec,
            params: &params,
        };
        assert!(evaluate(&m, &[], false).is_err());
    }

    #[test]
    fn quantized_and_macro_agree_with_conv_and_wide_layers() {
        let conv = ConvShape {
            in_channels: 1,
            height: 6,
            width: 6,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::conv(conv, ld(0.1)),
                LayerSpec::dense(32, 40, ld(-0.05)),
                LayerSpec::dense(40, 3, ld(0.2)),
            ],
            timesteps: 15,
        };
        let params = NetworkParams::init(&spec, 4.0, 3).unwrap();
        let net = ptq(&spec, &params, &PtqConfig::default()).unwrap();
        let data = samples(36, 15, 12, 1);
        let q = evaluate(&Model::Quantized(&net), &data, true).unwrap();
        let m = evaluate(&Model::Macro(&net, MacroConfig::default()), &data, true).unwrap();
        assert_eq!(q.runs, m.runs);
        assert_eq!(q.predictions, m.predictions);
        assert!(q
            .runs
            .unwrap()
            .iter()
            .any(|r| r.layers[1].total_spikes() > 0));
    }

    #[test]
    fn ptq_rejects_vlif_and_macro_rejects_bit_mismatch() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(
                2,
                2,
                NeuronParams::VLif(VLifParams::new(2.0, 1.0, 1.0).unwrap()),
            )],
            timesteps: 3,
        };
        let params = NetworkParams::init(&spec, 1.0, 0).unwrap();
        assert!(ptq(&spec, &params, &PtqConfig::default()).is_err());

        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(2, 2, ld(0.1))],
            timesteps: 3,
        };
        let params = NetworkParams::init(&spec, 1.0, 0).unwrap();
        let net3 = ptq(
            &spec,
            &params,
            &PtqConfig {
                bits: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let data = samples(2, 3, 2, 0);
        let r = evaluate(&Model::Macro(&net3, MacroConfig::default()), &data, false);
        assert!(matches!(r, Err(Error::Parameter(_))));
        let cfg3 = MacroConfig {
            weight_bits: 3,
            ..MacroConfig::default()
        };
        evaluate(&Model::Macro(&net3, cfg3), &data, false).unwrap();
    }

    #[test]
    fn ptq_constants_are_in_vmem_steps() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(2, 1, ld(0.2))],
            timesteps: 3,
        };
        let params = NetworkParams {
            layers: vec![crate::train::network::LayerParams {
                weights: vec![0.7, -0.3],
                neuron: ld(0.2),
            }],
        };
        let net = ptq(&spec, &params, &PtqConfig::default()).unwrap();
        let l = &net.layers[0];
        assert_eq!(l.fixed.weights.q, vec![7, -3]);
        assert!((l.lsb - 0.1).abs() < 1e-15);
        assert_eq!((l.fixed.dcy, l.fixed.th), (2, 10));
    }

    #[test]
    fn spike_rates() {
        let report = EvalReport {
            accuracy: 1.0,
            predictions: vec![0],
            labels: vec![4],
            runs: Some(vec![NetworkRun {
                layers: vec![
                    SpikeTrain::zeros(3, 5),
                    SpikeTrain::new(
                        2,
                        vec![
                            SpikeVector::from_bits(&[0, 0]),
                            SpikeVector::from_bits(&[1, 0]),
                            SpikeVector::from_bits(&[0, 0]),
                            SpikeVector::from_bits(&[1, 1]),
                        ],
                    )
                    .unwrap(),
                ],
            }]),
            fan_outs: vec![],
        };
        let stats = spike_rate_stats(&report).unwrap();
        let s = &stats.samples[0];
        assert_eq!(s.label, 4);
        assert!(s.rates[0].iter().all(|&r| r == 0.0));
        assert_eq!(s.rates[1], vec![0.0, 0.5, 0.0, 1.0]);

        let mut csv = Vec::new();
        stats.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("sample,label,layer,t,rate\n0,4,0,0,0\n"));
        assert!(text.contains("\n0,4,1,3,1\n"));

        let none = EvalReport {
            runs: None,
            ..report
        };
        assert!(matches!(spike_rate_stats(&none), Err(Error::State(_))));
    }
}
