//! Evaluation: directed margins, SSR / PA, correlation aggregation, kernel
//! PCA and the protocol that ties them to a synthetic world.

pub mod kpca;
pub mod margins;
pub mod protocol;
pub mod stats;

pub use kpca::{kpca_project, Kernel, Projection};
pub use margins::{directed_margins, pool_sources, ssr_pa, Direction, MarginRecord};
pub use protocol::{
    evaluate, EditScore, Encoder, EvalOptions, EvalReport, Frozen, Hierarchy, Histogram, ProjectionReport,
    SourceFilter, SourceStats,
};
pub use stats::{alignment, fisher_mean, fisher_mean_counted, oracle_score, pearson, Alignment};
