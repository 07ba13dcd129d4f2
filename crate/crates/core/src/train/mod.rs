//! Surrogate-gradient training, quantized evaluation and checkpoints.

pub mod bptt;
pub mod checkpoint;
pub mod eval;
pub mod network;

pub use bptt::{
    bptt_train, bptt_train_from, loss, loss_and_gradients, predict, EpochMetrics, Gradients,
    TrainConfig, TrainResult,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use eval::{
    evaluate, ptq, run_float, run_macro, run_quantized, sop_trace, spike_rate_stats, EvalReport,
    Model, NetworkRun, PtqConfig, QuantizedLayer, QuantizedNetwork, SampleRates, SpikeRateStats,
};
pub use network::{
    ConvShape, LayerKind, LayerParams, LayerSpec, Lowering, NetworkParams, NetworkSpec,
};
