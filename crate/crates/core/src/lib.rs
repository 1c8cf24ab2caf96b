//! Open-world learning on fixed feature vectors.
//!
//! Two learners share one interface: an Extreme Value Machine over the raw
//! features and a one-hidden-layer perceptron head trained with exemplar
//! rehearsal. An [`OwlAgent`] wraps either one, rejects low-confidence
//! samples as unknown, and enrolls classes once they are annotated. The
//! [`protocol`] module drives phased incremental and open-world runs and
//! scores them with the measures in [`metrics`].

pub mod agent;
pub mod config;
pub mod error;
pub mod evm;
pub mod features;
pub mod metrics;
pub mod perceptron;
pub mod protocol;
pub mod rng;
pub mod scores;
pub mod sweep;
pub mod weibull;

mod codec;

pub use agent::{Decision, Learner, LearnerConfig, LearnerKind, OwlAgent, Verdict};
pub use config::{LearnerChoice, PhaseSpec, ProtocolConfig};
pub use error::{Error, ErrorKind, Result};
pub use evm::{EvmHyperParams, EvmModel};
pub use features::{
    read_features, write_features, ClassId, Dataset, FeatureVector, LabeledSample, Observation,
    Split, SynthSpec,
};
pub use metrics::{MetricRecord, REJECT_ALL};
pub use perceptron::{PerceptronModel, TrainConfig};
pub use protocol::{Mode, PhaseReport, PhaseSchedule, ProtocolRun, RunOutput, RunSettings, Threshold};
pub use scores::ClassScores;
pub use weibull::WeibullParams;
