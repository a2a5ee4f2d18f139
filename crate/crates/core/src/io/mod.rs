//! File formats, the synthetic benchmark task and the fusion latency bench.

mod bench;
mod dataset;
mod model;
mod synth;

pub use bench::{median, run_bench, BenchConfig, BenchReport, BenchRow, MIN_RUNS, MIN_WARMUP};
pub use dataset::{Dataset, DATASET_HEADER_LEN, DATASET_MAGIC};
pub use model::{model_dtype, ModelFile, MODEL_MAGIC, MODEL_VERSION};
pub use synth::{generate, SynthConfig};
