//! Backpropagation through time with surrogate spike gradients.
//!
//! Every neuron follows `v_pre = a * v + b + g * I` with `a = 1, b = -beta,
//! g = 1` for LD-LIF and `a = 1 - dt/tau, b = 0, g = dt/tau` for v-LIF, then
//! `s = spike(v_pre)` and `v = v_pre * (1 - s)`. The readout is the spike
//! count of each output neuron over the window, fed to a softmax
//! cross-entropy.
//!
//! In the default hard mode `spike` is the Heaviside step and its derivative
//! is replaced by the surrogate. In relaxed mode `spike` is the surrogate's
//! smooth primitive, so the returned gradients are exact derivatives of the
//! relaxed loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{param, shape, Error, Result};
use crate::neuron::{surrogate_grad, NeuronParams, SpikeTrain, SurrogateConfig};

use super::network::{NetworkParams, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_beta: f64,
    pub seed: u64,
    pub surrogate: SurrogateConfig,
    /// Weight init half-width times `sqrt(fan_in)`.
    pub init_scale: f64,
    /// Use the smooth surrogate primitive as the forward spike function.
    pub relaxed: bool,
    /// Treat the reset factor `(1 - s)` as a constant in the backward pass.
    pub detach_reset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_weights: 0.05,
            lr_beta: 0.01,
            seed: 0,
            surrogate: SurrogateConfig::default(),
            init_scale: 2.0,
            relaxed: false,
            detach_reset: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(param("batch size must be positive"));
        }
        if !(self.lr_weights >= 0.0) || !(self.lr_beta >= 0.0) {
            return Err(param("learning rates must be non-negative"));
        }
        if !(self.init_scale >= 0.0) {
            return Err(param("init_scale must be non-negative"));
        }
        self.surrogate.validate()
    }
}

/// Per-layer coefficients of the shared update form.
#[derive(Clone, Copy, Debug)]
struct Dynamics {
    a: f64,
    b: f64,
    g: f64,
    theta: f64,
    learn_beta: bool,
}

impl Dynamics {
    fn of(n: &NeuronParams) -> Self {
        match n {
            NeuronParams::LdLif(p) => Self {
                a: 1.0,
                b: -p.beta,
                g: 1.0,
                theta: p.theta,
                learn_beta: p.beta_learnable,
            },
            NeuronParams::VLif(p) => Self {
                a: p.alpha(),
                b: 0.0,
                g: p.gain(),
                theta: p.theta,
                learn_beta: false,
            },
        }
    }
}

struct LayerCache {
    /// Activations entering the layer, `T x in`.
    input: Vec<Vec<f64>>,
    v_pre: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

/// Column-major copy of a dense matrix so a single input's fan-out is
/// contiguous.
struct Transposed {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Transposed {
    fn new(rows: usize, cols: usize, row_major: &[f64]) -> Self {
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = row_major[r * cols + c];
            }
        }
        Self { rows, cols, data }
    }

    fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }
}

struct Prepared {
    weights: Vec<Transposed>,
    dynamics: Vec<Dynamics>,
}

fn prepare(spec: &NetworkSpec, params: &NetworkParams) -> Result<Prepared> {
    params.check(spec)?;
    let weights = spec
        .layers
        .iter()
        .zip(&params.layers)
        .map(|(l, p)| {
            let m = l.lowering().matrix(&p.weights);
            Transposed::new(m.rows, m.cols, &m.data)
        })
        .collect();
    let dynamics = params
        .layers
        .iter()
        .map(|p| Dynamics::of(&p.neuron))
        .collect();
    Ok(Prepared { weights, dynamics })
}

fn forward(
    prep: &Prepared,
    input: &SpikeTrain,
    surrogate: Option<&SurrogateConfig>,
) -> Vec<LayerCache> {
    let mut x: Vec<Vec<f64>> = input
        .frames
        .iter()
        .map(|f| f.s.iter().map(|&b| b as u8 as f64).collect())
        .collect();
    let mut caches = Vec::with_capacity(prep.weights.len());
    for (w, d) in prep.weights.iter().zip(&prep.dynamics) {
        let mut v = vec![0.0; w.rows];
        let mut v_pre_all = Vec::with_capacity(x.len());
        let mut s_all = Vec::with_capacity(x.len());
        for xt in &x {
            let mut cur = vec![0.0; w.rows];
            for (c, &xc) in xt.iter().enumerate() {
                if xc != 0.0 {
                    for (acc, &wv) in cur.iter_mut().zip(w.col(c)) {
                        *acc += wv * xc;
                    }
                }
            }
            let mut v_pre = vec![0.0; w.rows];
            let mut s = vec![0.0; w.rows];
            for r in 0..w.rows {
                let vp = d.a * v[r] + d.b + d.g * cur[r];
                let sr = match surrogate {
                    Some(cfg) => cfg.activation(vp, d.theta),
                    None => (vp >= d.theta) as u8 as f64,
                };
                v_pre[r] = vp;
                s[r] = sr;
                v[r] = vp * (1.0 - sr);
            }
            v_pre_all.push(v_pre);
            s_all.push(s);
        }
        let next = s_all.clone();
        caches.push(LayerCache {
            input: std::mem::replace(&mut x, next),
            v_pre: v_pre_all,
            s: s_all,
        });
    }
    caches
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// Index of the largest count; ties go to the lowest index.
pub fn predict(counts: &[f64]) -> usize {
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

fn output_counts(cache: &LayerCache) -> Vec<f64> {
    let width = cache.s.first().map_or(0, Vec::len);
    let mut counts = vec![0.0; width];
    for st in &cache.s {
        for (c, &s) in counts.iter_mut().zip(st) {
            *c += s;
        }
    }
    counts
}

/// Gradients of the summed per-sample loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    /// `None` for layers without a learnable decay.
    pub betas: Vec<Option<f64>>,
}

impl Gradients {
    fn zeros(spec: &NetworkSpec, params: &NetworkParams) -> Self {
        Self {
            weights: spec
                .layers
                .iter()
                .map(|l| vec![0.0; l.param_count()])
                .collect(),
            betas: params
                .layers
                .iter()
                .map(|p| Dynamics::of(&p.neuron).learn_beta.then_some(0.0))
                .collect(),
        }
    }
}

struct SampleOutcome {
    loss: f64,
    correct: bool,
}

fn sample_loss_and_grad(
    spec: &NetworkSpec,
    prep: &Prepared,
    sample: &Sample,
    cfg: &TrainConfig,
    grads: &mut Gradients,
) -> Result<SampleOutcome> {
    let n_out = spec.output_dim();
    if sample.label >= n_out {
        return Err(param(format!(
            "label {} with only {n_out} outputs",
            sample.label
        )));
    }
    if sample.train.width != spec.input_dim() {
        return Err(shape(format!(
            "sample width {} but network input is {}",
            sample.train.width,
            spec.input_dim()
        )));
    }
    let act = cfg.relaxed.then_some(&cfg.surrogate);
    let caches = forward(prep, &sample.train, act);
    let counts = output_counts(caches.last().expect("at least one layer"));
    let p = softmax(&counts);
    let loss = -p[sample.label].ln();
    let correct = predict(&counts) == sample.label;

    let steps = sample.train.steps();
    let d_logit: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| pk - (k == sample.label) as u8 as f64)
        .collect();
    let mut g_s: Vec<Vec<f64>> = vec![d_logit; steps];

    for l in (0..caches.len()).rev() {
        let cache = &caches[l];
        let w = &prep.weights[l];
        let d = prep.dynamics[l];
        let lowering = spec.layers[l].lowering();
        let mut g_dense = vec![0.0; w.rows * w.cols];
        let mut g_beta = 0.0;
        let mut g_v_next = vec![0.0; w.rows];
        let mut g_in = if l > 0 {
            vec![vec![0.0; w.cols]; steps]
        } else {
            Vec::new()
        };
        let mut g_cur = vec![0.0; w.rows];

        for t in (0..steps).rev() {
            for r in 0..w.rows {
                let vp = cache.v_pre[t][r];
                let s = cache.s[t][r];
                let fp = surrogate_grad(vp, d.theta, &cfg.surrogate);
                let dv_dvp = if cfg.detach_reset {
                    1.0 - s
                } else {
                    (1.0 - s) - vp * fp
                };
                let g_vp = g_s[t][r] * fp + g_v_next[r] * dv_dvp;
                g_v_next[r] = g_vp * d.a;
                g_beta -= g_vp;
                g_cur[r] = g_vp * d.g;
            }
            let x = &cache.input[t];
            for (c, &xc) in x.iter().enumerate() {
                if xc != 0.0 {
                    for r in 0..w.rows {
                        g_dense[r * w.cols + c] += g_cur[r] * xc;
                    }
                }
            }
            if l > 0 {
                for (c, gi) in g_in[t].iter_mut().enumerate() {
                    *gi = w.col(c).iter().zip(&g_cur).map(|(wv, g)| wv * g).sum();
                }
            }
        }

        let gp = lowering.gather_grad(&g_dense, grads.weights[l].len());
        for (acc, g) in grads.weights[l].iter_mut().zip(gp) {
            *acc += g;
        }
        if let Some(b) = grads.betas[l].as_mut() {
            *b += g_beta;
        }
        g_s = g_in;
    }
    Ok(SampleOutcome { loss, correct })
}

/// Summed loss over `samples` and its gradient with respect to every weight
/// and learnable decay.
pub fn loss_and_gradients(
    spec: &NetworkSpec,
    params: &NetworkParams,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    spec.validate()?;
    let prep = prepare(spec, params)?;
    let mut grads = Gradients::zeros(spec, params);
    let mut loss = 0.0;
    for s in samples {
        loss += sample_loss_and_grad(spec, &prep, s, cfg, &mut grads)?.loss;
    }
    Ok((loss, grads))
}

/// Summed loss only, under the same forward semantics as training.
pub fn loss(
    spec: &NetworkSpec,
    params: &NetworkParams,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<f64> {
    spec.validate()?;
    let prep = prepare(spec, params)?;
    let act = cfg.relaxed.then_some(&cfg.surrogate);
    let mut total = 0.0;
    for s in samples {
        let caches = forward(&prep, &s.train, act);
        let p = softmax(&output_counts(caches.last().expect("at least one layer")));
        total -= p[s.label].ln();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub betas: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub params: NetworkParams,
    pub betas: Vec<Option<f64>>,
    pub loss_curve: Vec<f64>,
    pub accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
}

/// Minibatch SGD over `epochs` passes; sample order is reshuffled each epoch
/// from `cfg.seed`. Weights start from `NetworkParams::init`.
pub fn bptt_train(spec: &NetworkSpec, data: &[Sample], cfg: &TrainConfig) -> Result<TrainResult> {
    let init = NetworkParams::init(spec, cfg.init_scale, cfg.seed)?;
    bptt_train_from(spec, init, data, cfg)
}

pub fn bptt_train_from(
    spec: &NetworkSpec,
    mut params: NetworkParams,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    spec.validate()?;
    cfg.validate()?;
    params.check(spec)?;
    if data.is_empty() {
        return Err(param("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let prep = prepare(spec, &params)?;
            let mut grads = Gradients::zeros(spec, &params);
            for &i in batch {
                let o = sample_loss_and_grad(spec, &prep, &data[i], cfg, &mut grads)?;
                total += o.loss;
                correct += o.correct as usize;
            }
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss became {total}"),
                });
            }
            let n = batch.len() as f64;
            for (layer, (gw, gb)) in params
                .layers
                .iter_mut()
                .zip(grads.weights.iter().zip(&grads.betas))
            {
                for (w, g) in layer.weights.iter_mut().zip(gw) {
                    *w -= cfg.lr_weights * g / n;
                }
                if let (NeuronParams::LdLif(p), Some(g)) = (&mut layer.neuron, gb) {
                    p.beta -= cfg.lr_beta * g / n;
                }
            }
            if params.layers.iter().any(|l| {
                l.weights.iter().any(|w| !w.is_finite()) || l.beta().is_some_and(|b| !b.is_finite())
            }) {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite parameter after update".into(),
                });
            }
        }
        epochs.push(EpochMetrics {
            epoch,
            loss: total / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            betas: params.betas(),
        });
    }

    let accuracy = epochs.last().map_or(0.0, |e| e.train_accuracy);
    Ok(TrainResult {
        betas: params.betas(),
        loss_curve: epochs.iter().map(|e| e.loss).collect(),
        accuracy,
        epochs,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{layer_forward, LdLifParams, SpikeVector, SurrogateKind, VLifParams};
    use crate::train::network::LayerSpec;
    use rand::Rng;

    fn ld(beta: f64) -> NeuronParams {
        NeuronParams::LdLif(LdLifParams::new(beta, 1.0).unwrap())
    }

    fn random_sample(rng: &mut ChaCha8Rng, width: usize, steps: usize, label: usize) -> Sample {
        let frames = (0..steps)
            .map(|_| SpikeVector::from((0..width).map(|_| rng.gen_bool(0.3)).collect::<Vec<_>>()))
            .collect();
        Sample {
            train: SpikeTrain { width, frames },
            label,
        }
    }

    #[test]
    fn hard_forward_matches_neuron_reference() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::dense(6, 5, ld(0.1)),
                LayerSpec::dense(
                    5,
                    3,
                    NeuronParams::VLif(VLifParams::new(2.0, 1.0, 1.0).unwrap()),
                ),
            ],
            timesteps: 12,
        };
        let params = NetworkParams::init(&spec, 3.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sample(&mut rng, 6, 12, 0);
        let prep = prepare(&spec, &params).unwrap();
        let caches = forward(&prep, &s.train, None);
        let mut x = s.train.clone();
        for (l, m) in params.matrices(&spec).iter().enumerate() {
            let out = layer_forward(m, &params.layers[l].neuron, &x, false).unwrap();
            for (t, f) in out.spikes.frames.iter().enumerate() {
                let bits: Vec<bool> = caches[l].s[t].iter().map(|&v| v == 1.0).collect();
                assert_eq!(f.s, bits);
            }
            x = out.spikes;
        }
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::dense(6, 4, ld(0.2)),
                LayerSpec::dense(4, 2, ld(0.2)),
            ],
            timesteps: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Sample> = (0..6)
            .map(|k| random_sample(&mut rng, 6, 8, k % 2))
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr_weights: 0.0,
            lr_beta: 0.0,
            ..TrainConfig::default()
        };
        let init = NetworkParams::init(&spec, cfg.init_scale, cfg.seed).unwrap();
        let res = bptt_train(&spec, &data, &cfg).unwrap();
        assert_eq!(res.params, init);
        assert_eq!(res.epochs.len(), 3);
    }

    #[test]
    fn empty_data_is_rejected() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(2, 2, ld(0.2))],
            timesteps: 3,
        };
        assert!(bptt_train(&spec, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(4, 2, ld(0.0))],
            timesteps: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<Sample> = (0..4)
            .map(|k| random_sample(&mut rng, 4, 6, k % 2))
            .collect();
        let cfg = TrainConfig {
            epochs: 5,
            lr_weights: f64::MAX,
            lr_beta: f64::MAX,
            relaxed: true,
            surrogate: SurrogateConfig {
                kind: SurrogateKind::Sigmoid,
                width: 1.0,
            },
            ..TrainConfig::default()
        };
        match bptt_train(&spec, &data, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn overfits_a_single_pattern() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::dense(8, 6, ld(0.2)),
                LayerSpec::dense(6, 3, ld(0.2)),
            ],
            timesteps: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = vec![random_sample(&mut rng, 8, 10, 2)];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            lr_weights: 0.1,
            // A silent output layer sits far below threshold, where the
            // rectangular window has no gradient; the arctan tail does.
            surrogate: SurrogateConfig {
                kind: SurrogateKind::ArcTan,
                width: 1.0,
            },
            ..TrainConfig::default()
        };
        let res = bptt_train(&spec, &data, &cfg).unwrap();
        let first_hit = res.epochs.iter().position(|e| e.train_accuracy == 1.0);
        assert!(first_hit.is_some(), "never fit the pattern");
    }

    #[test]
    fn weight_gradient_matches_finite_difference_in_relaxed_mode() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::dense(5, 4, ld(0.1)),
                LayerSpec::dense(
                    4,
                    3,
                    NeuronParams::VLif(VLifParams::new(3.0, 1.0, 1.0).unwrap()),
                ),
            ],
            timesteps: 7,
        };
        let cfg = TrainConfig {
            relaxed: true,
            detach_reset: false,
            surrogate: SurrogateConfig {
                kind: SurrogateKind::Sigmoid,
                width: 0.5,
            },
            ..TrainConfig::default()
        };
        let params = NetworkParams::init(&spec, 3.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<Sample> = (0..3).map(|k| random_sample(&mut rng, 5, 7, k)).collect();
        let (_, g) = loss_and_gradients(&spec, &params, &data, &cfg).unwrap();
        let eps = 1e-6;
        for l in 0..2 {
            for j in [0, 3, 7, 11] {
                let mut p = params.clone();
                p.layers[l].weights[j] += eps;
                let up = loss(&spec, &p, &data, &cfg).unwrap();
                p.layers[l].weights[j] -= 2.0 * eps;
                let down = loss(&spec, &p, &data, &cfg).unwrap();
                let fd = (up - down) / (2.0 * eps);
                let an = g.weights[l][j];
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1e-3),
                    "layer {l} w{j}: {an} vs {fd}"
                );
            }
        }
        assert!(g.betas[1].is_none());
    }

    #[test]
    fn seed_determinism() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::dense(6, 4, ld(0.2)),
                LayerSpec::dense(4, 2, ld(0.2)),
            ],
            timesteps: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<Sample> = (0..10)
            .map(|k| random_sample(&mut rng, 6, 8, k % 2))
            .collect();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = bptt_train(&spec, &data, &cfg).unwrap();
        let b = bptt_train(&spec, &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(
            serde_json::to_string(&a.epochs).unwrap(),
            serde_json::to_string(&b.epochs).unwrap()
        );
    }

    #[test]
    fn decay_gradient_pushes_spurious_neuron_towards_silence() {
        // Output 0 is the target and receives nothing; output 1 is driven and
        // its spikes only add loss. Descent must never lower the decay.
        let spec = NetworkSpec {
            layers: vec![LayerSpec::dense(3, 2, ld(0.0))],
            timesteps: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Sample> = (0..5).map(|_| random_sample(&mut rng, 3, 20, 0)).collect();
        let cfg = TrainConfig::default();
        let at = |beta: f64| NetworkParams {
            layers: vec![crate::train::network::LayerParams {
                weights: vec![0.0, 0.0, 0.0, 0.6, 0.4, 0.7],
                neuron: ld(beta),
            }],
        };
        let mut saw_signal = false;
        for k in 0..=40 {
            let beta = k as f64 * 0.025;
            let (_, g) = loss_and_gradients(&spec, &at(beta), &data, &cfg).unwrap();
            let gb = g.betas[0].unwrap();
            assert!(gb <= 0.0, "beta {beta}: gradient {gb}");
            saw_signal |= gb < 0.0;
        }
        assert!(saw_signal);
        let silent = loss(&spec, &at(1.0), &data, &cfg).unwrap();
        assert!(silent < loss(&spec, &at(0.0), &data, &cfg).unwrap());
    }
}
