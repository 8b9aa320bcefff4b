//! Diagnostics over tuned scales: weight change ratios, structural audits,
//! storage accounting, a pixel-statistics sample metric and a dequantized
//! matmul benchmark.

mod bench;
mod frechet;
mod ratio;
mod storage;

pub use bench::{bench_dequant_matmul, BenchRow};
pub use frechet::frechet_pixel_distance;
pub use ratio::{
    audit, change_ratio_map, channel_stats, layer_change_ratio, quartiles, rank1_check, row_constancy, Axis,
    AuditReport, BoxStats, ChangeRatioMap, LayerAudit, RATIO_EPS,
};
pub use storage::{storage_report, StorageReport};
