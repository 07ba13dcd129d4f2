//! Network topology, trainable parameters and the lowering of every layer to
//! a dense weight matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{param, shape, Result};
use crate::neuron::{NeuronParams, WeightMatrix};

/// Valid-or-padded 2-D convolution on a `channels x height x width` input,
/// flattened channel-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn one() -> usize {
    1
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
            || self.height + 2 * self.padding < self.kernel
            || self.width + 2 * self.padding < self.kernel
        {
            return Err(param(format!("invalid convolution shape {self:?}")));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_dim(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_dim(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// `(row, col, kernel index)` for every connection of the lowered matrix.
    fn connections(&self) -> Vec<(u32, u32, u32)> {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let mut out = Vec::new();
        for oc in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (oc * oh + oy) * ow + ox;
                    for ic in 0..self.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy as usize >= self.height
                                    || ix as usize >= self.width
                                {
                                    continue;
                                }
                                let col =
                                    (ic * self.height + iy as usize) * self.width + ix as usize;
                                let p = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                                out.push((row as u32, col as u32, p as u32));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Conv(ConvShape),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub neuron: NeuronParams,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, neuron: NeuronParams) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            neuron,
        }
    }

    pub fn conv(c: ConvShape, neuron: NeuronParams) -> Self {
        Self {
            kind: LayerKind::Conv(c),
            in_dim: c.in_dim(),
            out_dim: c.out_dim(),
            neuron,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim,
            LayerKind::Conv(c) => c.param_count(),
        }
    }

    /// Inputs feeding one output neuron, used for initialisation.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim,
            LayerKind::Conv(c) => c.in_channels * c.kernel * c.kernel,
        }
    }

    pub fn lowering(&self) -> Lowering {
        match self.kind {
            LayerKind::Dense => Lowering {
                rows: self.out_dim,
                cols: self.in_dim,
                connections: None,
            },
            LayerKind::Conv(c) => Lowering {
                rows: self.out_dim,
                cols: self.in_dim,
                connections: Some(c.connections()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub timesteps: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(param("timesteps must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(param("network has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.neuron.validate()?;
            if layer.in_dim == 0 || layer.out_dim == 0 {
                return Err(param(format!("layer {l} has a zero dimension")));
            }
            if let LayerKind::Conv(c) = layer.kind {
                c.validate()?;
                if c.in_dim() != layer.in_dim || c.out_dim() != layer.out_dim {
                    return Err(shape(format!(
                        "layer {l}: convolution maps {} -> {}, declared {} -> {}",
                        c.in_dim(),
                        c.out_dim(),
                        layer.in_dim,
                        layer.out_dim
                    )));
                }
            }
            if l > 0 && self.layers[l - 1].out_dim != layer.in_dim {
                return Err(shape(format!(
                    "layer {} outputs {} but layer {l} expects {}",
                    l - 1,
                    self.layers[l - 1].out_dim,
                    layer.in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("network spec serializes");
        Sha256::digest(&json).into()
    }
}

/// How a layer's parameter vector expands into its dense weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Lowering {
    pub rows: usize,
    pub cols: usize,
    /// `None` for dense layers, whose parameters are the row-major matrix.
    connections: Option<Vec<(u32, u32, u32)>>,
}

impl Lowering {
    pub fn expand<T: Copy + Default>(&self, params: &[T]) -> Vec<T> {
        match &self.connections {
            None => params.to_vec(),
            Some(conns) => {
                let mut m = vec![T::default(); self.rows * self.cols];
                for &(r, c, p) in conns {
                    m[r as usize * self.cols + c as usize] = params[p as usize];
                }
                m
            }
        }
    }

    pub fn matrix(&self, params: &[f64]) -> WeightMatrix {
        WeightMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.expand(params),
        }
    }

    /// Sums a dense-matrix gradient back onto the shared parameters.
    pub fn gather_grad(&self, dense: &[f64], n_params: usize) -> Vec<f64> {
        match &self.connections {
            None => dense.to_vec(),
            Some(conns) => {
                let mut g = vec![0.0; n_params];
                for &(r, c, p) in conns {
                    g[p as usize] += dense[r as usize * self.cols + c as usize];
                }
                g
            }
        }
    }

    /// Synapses driven by each input neuron.
    pub fn fan_out(&self) -> Vec<u64> {
        match &self.connections {
            None => vec![self.rows as u64; self.cols],
            Some(conns) => {
                let mut f = vec![0u64; self.cols];
                for &(_, c, _) in conns {
                    f[c as usize] += 1;
                }
                f
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub neuron: NeuronParams,
}

impl LayerParams {
    pub fn beta(&self) -> Option<f64> {
        match self.neuron {
            NeuronParams::LdLif(p) => Some(p.beta),
            NeuronParams::VLif(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    /// Uniform weights in `±init_scale / sqrt(fan_in)`; neuron parameters
    /// come from the spec.
    pub fn init(spec: &NetworkSpec, init_scale: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let a = init_scale / (l.fan_in() as f64).sqrt();
                LayerParams {
                    weights: (0..l.param_count())
                        .map(|_| rng.gen_range(-a..=a))
                        .collect(),
                    neuron: l.neuron,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn matrices(&self, spec: &NetworkSpec) -> Vec<WeightMatrix> {
        spec.layers
            .iter()
            .zip(&self.layers)
            .map(|(l, p)| l.lowering().matrix(&p.weights))
            .collect()
    }

    pub fn betas(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(LayerParams::beta).collect()
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(shape(format!(
                "{} parameter layers for a {}-layer spec",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (l, (s, p)) in spec.layers.iter().zip(&self.layers).enumerate() {
            if p.weights.len() != s.param_count() {
                return Err(shape(format!(
                    "layer {l}: {} weights, expected {}",
                    p.weights.len(),
                    s.param_count()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::LdLifParams;

    fn ld() -> NeuronParams {
        NeuronParams::LdLif(LdLifParams::new(0.2, 1.0).unwrap())
    }

    #[test]
    fn conv_lowering_matches_direct_convolution() {
        let c = ConvShape {
            in_channels: 2,
            height: 5,
            width: 4,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let spec = LayerSpec::conv(c, ld());
        let kernel: Vec<f64> = (0..c.param_count())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let input: Vec<f64> = (0..c.in_dim()).map(|i| ((i * 7) % 5) as f64).collect();
        let m = spec.lowering().matrix(&kernel);

        let (oh, ow) = (c.out_height(), c.out_width());
        assert_eq!((oh, ow), (5, 4));
        for oc in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut direct = 0.0;
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) =
                                    (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                let w = kernel[((oc * 2 + ic) * 3 + ky) * 3 + kx];
                                direct += w * input[(ic * 5 + iy as usize) * 4 + ix as usize];
                            }
                        }
                    }
                    let row = (oc * oh + oy) * ow + ox;
                    let lowered: f64 = (0..c.in_dim()).map(|i| m.get(row, i) * input[i]).sum();
                    assert!((direct - lowered).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_fan_out_counts_connections() {
        let c = ConvShape {
            in_channels: 1,
            height: 3,
            width: 3,
            out_channels: 2,
            kernel: 2,
            stride: 1,
            padding: 0,
        };
        let f = LayerSpec::conv(c, ld()).lowering().fan_out();
        // corner pixel reaches one window per channel, centre pixel four
        assert_eq!(f[0], 2);
        assert_eq!(f[4], 8);
        assert_eq!(f.iter().sum::<u64>() as usize, 2 * 4 * 4);
    }

    #[test]
    fn spec_validation() {
        let good = NetworkSpec {
            layers: vec![LayerSpec::dense(4, 3, ld()), LayerSpec::dense(3, 2, ld())],
            timesteps: 5,
        };
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.layers[1].in_dim = 4;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.timesteps = 0;
        assert!(bad.validate().is_err());
        assert_ne!(good.hash(), bad.hash());
        assert_eq!(good.hash(), good.clone().hash());
    }

    #[test]
    fn init_is_seeded() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(4, 3, ld())],
            timesteps: 5,
        };
        let a = NetworkParams::init(&spec, 1.0, 3).unwrap();
        assert_eq!(a, NetworkParams::init(&spec, 1.0, 3).unwrap());
        assert_ne!(a, NetworkParams::init(&spec, 1.0, 4).unwrap());
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= 0.5));
    }
}
