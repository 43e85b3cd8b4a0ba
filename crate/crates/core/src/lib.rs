//! Semi-supervised regression with an auxiliary ranking classifier (ARC)
//! and regression distribution alignment (RDA).
//!
//! The crate is organised as one module per concern: [`data`] handles
//! ingestion, splits, scaling and augmentation; [`model`] holds the
//! two-head MLP and its optimiser; [`losses`] and [`rda`] implement the
//! objectives; [`trainer`] wires them into training runs; [`metrics`]
//! scores predictions; [`check`] carries the self-check suites.

pub mod check;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rda;
pub mod trainer;

pub use data::{
    AugmentConfig, AugmentKind, Dataset, LabelScaler, LabeledSet, SplitSpec, SyntheticTask, TestSet, UnlabeledSet,
};
pub use error::{Error, Result};
pub use losses::{ArcLossConfig, RegressionKind};
pub use metrics::{AggregateMetrics, MeanStd, MetricsReport};
pub use model::{Checkpoint, Layout, TwoHeadModel};
pub use rda::{PseudoLabelTable, RdaConfig};
pub use trainer::{
    run_protocol, train, DataSource, DataSpec, Method, ProtocolReport, RunRecord, TrainConfig, TrainData,
};
