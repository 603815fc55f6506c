// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod model;
pub mod pretrain;
pub mod probe;
pub mod signal;

pub use diff::{Real, Tensor};
pub use error::{Error, Result};
pub use flow::{FlowConfig, VarianceSchedule};
pub use model::{FlowTransformer, ModelConfig, TimeInjection};
pub use pretrain::{TrainConfig, TrainLog};
pub use probe::{GridConfig, GridSearchResult, Metric, Pooling, ProbeData};
pub use signal::{Dataset, Label, Spectrogram, Split, SynthConfig, Task, TimeSeries};
