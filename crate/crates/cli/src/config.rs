//! Run configuration, read from TOML. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use ldlif_core::cim::MacroConfig;
use ldlif_core::cost::CostParams;
use ldlif_core::data::{gen_synthetic, Sample, SyntheticConfig};
use ldlif_core::events::load_dataset;
use ldlif_core::neuron::SurrogateConfig;
use ldlif_core::train::{load_checkpoint, NetworkSpec, PtqConfig, QuantizedNetwork, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
    MacroSim,
    Cost,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Inline network spec; exclusive with `network_file`.
    pub network: Option<NetworkSpec>,
    /// JSON or TOML file holding a network spec.
    pub network_file: Option<PathBuf>,
    pub dataset: Option<DatasetConfig>,
    /// Quantized checkpoint read by `eval`, `macro-sim` and `cost`.
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ptq: PtqConfig,
    #[serde(default, rename = "macro")]
    pub macro_config: MacroConfig,
    #[serde(default)]
    pub cost: CostSection,
    /// Write per-layer macro cycle traces for sample 0 in `macro-sim`.
    #[serde(default = "yes")]
    pub trace: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticSource),
    Files(FileSource),
}

/// The training split uses `seed`; the test split uses `seed + 1`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub classes: usize,
    pub width: usize,
    pub steps: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub rate_high: f64,
    pub rate_low: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            classes: d.classes,
            width: d.width,
            steps: d.steps,
            samples_per_class: d.samples_per_class,
            test_samples_per_class: 25,
            rate_high: d.rate_high,
            rate_low: d.rate_low,
            seed: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// `TrainConfig` without the seed, which comes from the run.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_beta: f64,
    pub surrogate: SurrogateConfig,
    pub init_scale: f64,
    pub relaxed: bool,
    pub detach_reset: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_weights: d.lr_weights,
            lr_beta: d.lr_beta,
            surrogate: d.surrogate,
            init_scale: d.init_scale,
            relaxed: d.relaxed,
            detach_reset: d.detach_reset,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_weights: self.lr_weights,
            lr_beta: self.lr_beta,
            seed,
            surrogate: self.surrogate,
            init_scale: self.init_scale,
            relaxed: self.relaxed,
            detach_reset: self.detach_reset,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    /// Neurons updated per timestep, for the latency comparison.
    pub n_neurons: usize,
    /// Fixed SOP count. Without it, SOPs are counted by running the
    /// checkpoint over the test split, or taken as zero if there is none.
    pub sop_count: Option<u64>,
    pub params: CostParams,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            n_neurons: 32,
            sop_count: None,
            params: CostParams::default(),
        }
    }
}

/// A fully loaded and checked run. Building one touches no output files.
pub struct Job {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub spec: Option<NetworkSpec>,
    pub train_data: Option<Vec<Sample>>,
    pub test_data: Option<Vec<Sample>>,
    pub checkpoint: Option<QuantizedNetwork>,
    pub train: TrainConfig,
    pub ptq: PtqConfig,
    pub macro_config: MacroConfig,
    pub cost: CostSection,
    pub trace: bool,
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse(text: &str) -> Result<RunConfig> {
    Ok(toml::from_str(text)?)
}

/// Reads `path` and resolves every relative path in it against the config
/// file's directory.
pub fn load(path: &Path, overrides: &Overrides) -> Result<Job> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(cfg, base, overrides)
}

fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(spec)
}

fn load_split(base: &Path, p: &Path) -> Result<Vec<Sample>> {
    let p = base.join(p);
    load_dataset(&p).with_context(|| format!("loading dataset {}", p.display()))
}

pub fn resolve(cfg: RunConfig, base: &Path, overrides: &Overrides) -> Result<Job> {
    let seed = overrides.seed.unwrap_or(cfg.seed);
    let out_dir = overrides
        .out_dir
        .clone()
        .unwrap_or_else(|| base.join(&cfg.out_dir));

    let spec = match (cfg.network, &cfg.network_file) {
        (Some(_), Some(_)) => bail!("set either `network` or `network_file`, not both"),
        (Some(s), None) => Some(s),
        (None, Some(p)) => Some(read_spec(&base.join(p))?),
        (None, None) => None,
    };
    if let Some(s) = &spec {
        s.validate().context("invalid network")?;
    }

    let (train_data, test_data) = match &cfg.dataset {
        None => (None, None),
        Some(DatasetConfig::Synthetic(s)) => {
            let seed = s.seed.unwrap_or(seed);
            let split = |n: usize, seed: u64| {
                gen_synthetic(&SyntheticConfig {
                    classes: s.classes,
                    width: s.width,
                    steps: s.steps,
                    samples_per_class: n,
                    rate_high: s.rate_high,
                    rate_low: s.rate_low,
                    seed,
                })
            };
            let train = split(s.samples_per_class, seed).context("invalid synthetic dataset")?;
            let test = split(s.test_samples_per_class, seed.wrapping_add(1))?;
            (Some(train), (!test.is_empty()).then_some(test))
        }
        Some(DatasetConfig::Files(f)) => (
            f.train
                .as_deref()
                .map(|p| load_split(base, p))
                .transpose()?,
            f.test.as_deref().map(|p| load_split(base, p)).transpose()?,
        ),
    };

    let train = cfg.train.with_seed(seed);
    train.validate().context("invalid [train] section")?;
    cfg.macro_config
        .validate()
        .context("invalid [macro] section")?;
    cfg.ptq
        .scaler
        .validate()
        .context("invalid [ptq.scaler] section")?;
    cfg.cost
        .params
        .validate()
        .context("invalid [cost.params] section")?;
    if cfg.cost.n_neurons == 0 {
        bail!("cost.n_neurons must be positive");
    }

    let checkpoint = match (&cfg.checkpoint, cfg.mode) {
        (Some(_), Mode::Train) => {
            bail!("train writes its checkpoint to the output directory; remove `checkpoint`")
        }
        (Some(p), _) => {
            let spec = spec
                .as_ref()
                .context("`checkpoint` needs the network it was trained with")?;
            let p = base.join(p);
            let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            Some(
                load_checkpoint(bytes.as_slice(), spec, &cfg.ptq)
                    .with_context(|| format!("loading {}", p.display()))?,
            )
        }
        (None, _) => None,
    };

    let job = Job {
        mode: cfg.mode,
        seed,
        out_dir,
        spec,
        train_data,
        test_data,
        checkpoint,
        train,
        ptq: cfg.ptq,
        macro_config: cfg.macro_config,
        cost: cfg.cost,
        trace: cfg.trace,
    };
    job.check_requirements()?;
    Ok(job)
}

impl Job {
    fn check_requirements(&self) -> Result<()> {
        let need_data = |what: &str| format!("mode {:?} needs {what}", self.mode);
        match self.mode {
            Mode::Train => {
                self.spec.as_ref().with_context(|| need_data("a network"))?;
                self.train_data
                    .as_ref()
                    .with_context(|| need_data("a training split in [dataset]"))?;
            }
            Mode::Eval | Mode::MacroSim => {
                self.spec.as_ref().with_context(|| need_data("a network"))?;
                self.checkpoint
                    .as_ref()
                    .with_context(|| need_data("a `checkpoint`"))?;
                self.test_data
                    .as_ref()
                    .with_context(|| need_data("a test split in [dataset]"))?;
            }
            Mode::Cost => {}
        }
        if let Some(spec) = &self.spec {
            for (name, data) in [("training", &self.train_data), ("test", &self.test_data)] {
                if let Some(first) = data.as_ref().and_then(|d| d.first()) {
                    if first.train.width != spec.input_dim() {
                        bail!(
                            "{name} samples are {} wide but the network takes {}",
                            first.train.width,
                            spec.input_dim()
                        );
                    }
                }
            }
        }
        Ok(())
    }
}
