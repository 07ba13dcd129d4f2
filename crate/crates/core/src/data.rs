//! Labeled spike-train samples and the synthetic pattern-classification task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::neuron::{SpikeTrain, SpikeVector};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub train: SpikeTrain,
    pub label: usize,
}

/// Each class owns a contiguous block of `width / classes` input neurons
/// that fire at `rate_high`; every other neuron fires at `rate_low`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub width: usize,
    pub steps: usize,
    pub samples_per_class: usize,
    pub rate_high: f64,
    pub rate_low: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            width: 64,
            steps: 50,
            samples_per_class: 50,
            rate_high: 0.4,
            rate_low: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.width < self.classes {
            return Err(param(format!(
                "need 1 <= classes <= width, got classes={} width={}",
                self.classes, self.width
            )));
        }
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.rate_high) || !ok(self.rate_low) || self.rate_high <= self.rate_low {
            return Err(param(format!(
                "rates must lie in [0, 1] with rate_low < rate_high, got low={} high={}",
                self.rate_low, self.rate_high
            )));
        }
        Ok(())
    }

    /// Input neurons that carry class `c`'s pattern.
    pub fn class_neurons(&self, c: usize) -> std::ops::Range<usize> {
        let g = self.width / self.classes;
        c * g..(c + 1) * g
    }
}

/// Deterministic in `cfg.seed`. Samples cycle through the labels
/// `0, 1, ..., classes - 1, 0, ...`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.classes * cfg.samples_per_class;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let label = k % cfg.classes;
        let hot = cfg.class_neurons(label);
        let frames = (0..cfg.steps)
            .map(|_| {
                let s: Vec<bool> = (0..cfg.width)
                    .map(|i| {
                        let p = if hot.contains(&i) {
                            cfg.rate_high
                        } else {
                            cfg.rate_low
                        };
                        rng.gen_bool(p)
                    })
                    .collect();
                SpikeVector::from(s)
            })
            .collect();
        out.push(Sample {
            train: SpikeTrain {
                width: cfg.width,
                frames,
            },
            label,
        });
    }
    Ok(out)
}
