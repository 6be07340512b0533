//! Metrics, cost accounting, throughput benchmarks, configuration sweeps,
//! skyline extraction and entropy reports.

mod cost;
mod metrics;
mod run;
mod skyline;

pub use cost::CostModel;
pub use metrics::{argmax_rows, miou, ConfusionMatrix, MiouReport};
pub use run::{
    bench_throughput, entropy_report, eval_pool, evaluate, miou_of, predict, skyline, sweep, write_entropy_csv,
    write_tradeoff_csv, DecodeMode, EntropyRow, EvalOptions, Selection, SweepOptions, Throughput, TradeoffPoint,
    THREADS_ENV,
};
pub use skyline::skyline_indices;
