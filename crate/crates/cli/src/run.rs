//! Mode dispatch. Every artifact is built in memory first and only written
//! once the whole job has succeeded.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use ldlif_core::cim::write_trace_csv;
use ldlif_core::cost::{cost_report, count_sops, CostReport, PUBLISHED_TOPS_PER_W};
use ldlif_core::data::Sample;
use ldlif_core::neuron::NeuronParams;
use ldlif_core::train::{
    bptt_train, evaluate, ptq, run_macro, save_checkpoint, sop_trace, spike_rate_stats, EvalReport,
    Model, NetworkSpec, QuantizedNetwork,
};

use crate::config::{Job, Mode};

pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            bytes,
        }
    }

    fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        Ok(Self::new(name, bytes))
    }
}

pub const PREDICTIONS: &str = "predictions.csv";
pub const SPIKE_RATES: &str = "spike_rates.csv";
pub const CHECKPOINT: &str = "model.ckpt";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn predictions_csv(report: &EvalReport) -> Artifact {
    let mut s = String::from("sample,label,prediction\n");
    for (k, (l, p)) in report.labels.iter().zip(&report.predictions).enumerate() {
        let _ = writeln!(s, "{k},{l},{p}");
    }
    Artifact::new(PREDICTIONS, s.into_bytes())
}

fn rates_csv(report: &EvalReport) -> Result<Artifact> {
    let mut bytes = Vec::new();
    spike_rate_stats(report)?.write_csv(&mut bytes)?;
    Ok(Artifact::new(SPIKE_RATES, bytes))
}

fn total_sops(report: &EvalReport, data: &[Sample]) -> Result<u64> {
    let mut total = 0;
    for k in 0..data.len() {
        total += count_sops(Some(&sop_trace(report, data, k)?))?;
    }
    Ok(total)
}

#[derive(Serialize)]
struct TrainSummary {
    mode: &'static str,
    seed: u64,
    spec_hash: String,
    epochs: usize,
    final_loss: Option<f64>,
    train_accuracy: f64,
    test_accuracy: Option<f64>,
    quantized_test_accuracy: Option<f64>,
    betas: Vec<Option<f64>>,
    checkpoint: Option<&'static str>,
}

#[derive(Serialize)]
struct EvalSummary {
    mode: &'static str,
    spec_hash: String,
    samples: usize,
    accuracy: f64,
    total_sops: u64,
}

#[derive(Serialize)]
struct CostSummary {
    #[serde(flatten)]
    report: CostReport,
    sop_source: &'static str,
    published_tops_per_watt: [f64; 2],
}

fn all_ld_lif(spec: &NetworkSpec) -> bool {
    spec.layers
        .iter()
        .all(|l| matches!(l.neuron, NeuronParams::LdLif(_)))
}

fn train(job: &Job) -> Result<Vec<Artifact>> {
    let spec = job.spec.as_ref().expect("checked");
    let data = job.train_data.as_deref().expect("checked");
    let res = bptt_train(spec, data, &job.train).context("training failed")?;

    let mut out = Vec::new();
    let mut lines = Vec::new();
    for e in &res.epochs {
        serde_json::to_writer(&mut lines, e)?;
        lines.push(b'\n');
    }
    out.push(Artifact::new("metrics.jsonl", lines));
    out.push(Artifact::json("params.json", &res.params)?);

    let eval_set = job.test_data.as_deref().unwrap_or(data);
    let float = evaluate(
        &Model::Float {
            spec,
            params: &res.params,
        },
        eval_set,
        true,
    )?;
    out.push(rates_csv(&float)?);

    // Only LD-LIF networks map onto the macro.
    let quantized = if all_ld_lif(spec) {
        let q = ptq(spec, &res.params, &job.ptq)?;
        let mut blob = Vec::new();
        save_checkpoint(&mut blob, &q)?;
        out.push(Artifact::new(CHECKPOINT, blob));
        Some(evaluate(&Model::Quantized(&q), eval_set, false)?.accuracy)
    } else {
        None
    };

    let has_test = job.test_data.is_some();
    out.push(Artifact::json(
        "summary.json",
        &TrainSummary {
            mode: "train",
            seed: job.seed,
            spec_hash: hex(&spec.hash()),
            epochs: res.epochs.len(),
            final_loss: res.loss_curve.last().copied(),
            train_accuracy: res.accuracy,
            test_accuracy: has_test.then_some(float.accuracy),
            quantized_test_accuracy: quantized.filter(|_| has_test),
            betas: res.betas,
            checkpoint: quantized.map(|_| CHECKPOINT),
        },
    )?);
    Ok(out)
}

fn eval_like(job: &Job) -> Result<Vec<Artifact>> {
    let spec = job.spec.as_ref().expect("checked");
    let net = job.checkpoint.as_ref().expect("checked");
    let data = job.test_data.as_deref().expect("checked");
    let on_macro = job.mode == Mode::MacroSim;
    let model = if on_macro {
        Model::Macro(net, job.macro_config)
    } else {
        Model::Quantized(net)
    };
    let report = evaluate(&model, data, true)?;
    let mut out = vec![predictions_csv(&report), rates_csv(&report)?];
    out.push(Artifact::json(
        "metrics.json",
        &EvalSummary {
            mode: if on_macro { "macro-sim" } else { "eval" },
            spec_hash: hex(&spec.hash()),
            samples: data.len(),
            accuracy: report.accuracy,
            total_sops: total_sops(&report, data)?,
        },
    )?);
    if on_macro && job.trace {
        let (_, traces) = run_macro(net, &job.macro_config, &data[0].train, true)?;
        for (l, rows) in traces.iter().enumerate() {
            let mut bytes = Vec::new();
            write_trace_csv(&mut bytes, rows)?;
            out.push(Artifact::new(format!("macro_trace_layer{l}.csv"), bytes));
        }
    }
    Ok(out)
}

fn counted_sops(net: &QuantizedNetwork, data: &[Sample]) -> Result<u64> {
    let report = evaluate(&Model::Quantized(net), data, true)?;
    total_sops(&report, data)
}

fn cost(job: &Job) -> Result<Vec<Artifact>> {
    let (sops, source) = match (job.cost.sop_count, &job.checkpoint, &job.test_data) {
        (Some(n), _, _) => (n, "config"),
        (None, Some(net), Some(data)) => (counted_sops(net, data)?, "checkpoint-on-test-split"),
        _ => (0, "none"),
    };
    let report = cost_report(job.cost.n_neurons, sops, &job.cost.params)?;
    Ok(vec![Artifact::json(
        "cost_report.json",
        &CostSummary {
            report,
            sop_source: source,
            published_tops_per_watt: PUBLISHED_TOPS_PER_W,
        },
    )?])
}

pub fn execute(job: &Job) -> Result<Vec<Artifact>> {
    match job.mode {
        Mode::Train => train(job),
        Mode::Eval | Mode::MacroSim => eval_like(job),
        Mode::Cost => cost(job),
    }
}

pub fn write_all(dir: &Path, artifacts: &[Artifact]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for a in artifacts {
        let p = dir.join(&a.name);
        std::fs::write(&p, &a.bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
