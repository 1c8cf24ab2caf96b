//! The open-world agent: one learner behind a thresholded accept/reject
//! rule, a buffer of rejected samples, and class enrollment.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evm::{EvmHyperParams, EvmModel};
use crate::features::{herding_select, ClassId, FeatureVector, Observation};
use crate::metrics::REJECT_ALL;
use crate::perceptron::{PerceptronModel, TrainConfig, EXEMPLARS_PER_CLASS};
use crate::scores::ClassScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Known(ClassId),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub decision: Decision,
    /// Highest class probability.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    /// Extreme Value Machine on the fixed features.
    Evm,
    /// Two-layer perceptron head adapting the features.
    Perceptron,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Learner {
    Evm(EvmModel),
    Perceptron(PerceptronModel),
}

impl Learner {
    pub fn kind(&self) -> LearnerKind {
        match self {
            Learner::Evm(_) => LearnerKind::Evm,
            Learner::Perceptron(_) => LearnerKind::Perceptron,
        }
    }

    pub fn predict(&self, query: &FeatureVector) -> Result<ClassScores> {
        match self {
            Learner::Evm(m) => m.predict(query),
            Learner::Perceptron(m) => m.predict(query),
        }
    }

    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        match self {
            Learner::Evm(m) => m.class_ids().collect(),
            Learner::Perceptron(m) => m.class_ids().iter().copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Learner::Evm(m) => m.dim(),
            Learner::Perceptron(m) => m.input_dim(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Learner::Evm(m) => m.save(path),
            Learner::Perceptron(m) => m.save(path),
        }
    }

    /// Loads either model format, dispatching on the file's magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        match bytes.get(..4) {
            Some(b"OWLE") => EvmModel::from_bytes(&bytes).map(Learner::Evm),
            Some(b"OWLP") => PerceptronModel::from_bytes(&bytes).map(Learner::Perceptron),
            _ => Err(Error::Format(format!(
                "{} is not a model file (bad magic)",
                path.display()
            ))),
        }
    }

    /// File extension used for this learner's model files.
    pub fn file_extension(&self) -> &'static str {
        match self {
            Learner::Evm(_) => "owle",
            Learner::Perceptron(_) => "owlp",
        }
    }
}

/// Learner settings. Only the block matching the learner kind is used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnerConfig {
    pub evm: EvmHyperParams,
    pub mlp: TrainConfig,
}

/// Closed-world argmax plus rejection: known when the top score reaches
/// `delta` (ties to the lowest class id), unknown otherwise.
pub fn threshold_decision(scores: &ClassScores, delta: f64) -> Verdict {
    match scores.argmax() {
        Some((class, score)) if score >= delta => Verdict {
            decision: Decision::Known(class),
            score,
        },
        Some((_, score)) => Verdict {
            decision: Decision::Unknown,
            score,
        },
        None => Verdict {
            decision: Decision::Unknown,
            score: 0.0,
        },
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&delta) || delta == REJECT_ALL {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "threshold must lie in [0, 1] (or be the reject-all sentinel), got {delta}"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct OwlAgent {
    learner: Learner,
    delta: f64,
    buffer: Vec<Observation>,
    buffered: HashSet<String>,
    /// Every sample id ever buffered; enrollment may only use these.
    detected: HashSet<String>,
    /// Herding-selected rehearsal features per class (perceptron learner only).
    exemplars: BTreeMap<ClassId, Vec<FeatureVector>>,
    config: LearnerConfig,
    increments: usize,
}

impl OwlAgent {
    /// Trains the initial learner on all labeled data of the starting classes.
    pub fn initialize(
        kind: LearnerKind,
        class_data: &BTreeMap<ClassId, Vec<Observation>>,
        config: LearnerConfig,
        delta: f64,
    ) -> Result<Self> {
        check_delta(delta)?;
        if class_data.is_empty() {
            return Err(Error::MissingData("no initial classes".into()));
        }
        if let Some((c, _)) = class_data.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::MissingData(format!("initial class {c} has no samples")));
        }
        let mut exemplars = BTreeMap::new();
        let learner = match kind {
            LearnerKind::Evm => Learner::Evm(EvmModel::fit(class_data, config.evm)?),
            LearnerKind::Perceptron => {
                let dim = class_data.values().next().expect("non-empty")[0].features.dim();
                let ids: Vec<ClassId> = class_data.keys().copied().collect();
                let model = PerceptronModel::init(dim, &ids, config.mlp.rng_seed)?;
                let model = model.train(&flatten(class_data), &config.mlp, 0)?;
                add_exemplars(&mut exemplars, class_data)?;
                Learner::Perceptron(model)
            }
        };
        Ok(OwlAgent {
            learner,
            delta,
            buffer: Vec::new(),
            buffered: HashSet::new(),
            detected: HashSet::new(),
            exemplars,
            config,
            increments: 0,
        })
    }

    /// Wraps an existing learner (for example one loaded from disk).
    pub fn from_learner(learner: Learner, config: LearnerConfig, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(OwlAgent {
            learner,
            delta,
            buffer: Vec::new(),
            buffered: HashSet::new(),
            detected: HashSet::new(),
            exemplars: BTreeMap::new(),
            config,
            increments: 0,
        })
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        check_delta(delta)?;
        self.delta = delta;
        Ok(())
    }

    pub fn known_classes(&self) -> BTreeSet<ClassId> {
        self.learner.class_ids()
    }

    pub fn buffer(&self) -> &[Observation] {
        &self.buffer
    }

    pub fn exemplars(&self) -> &BTreeMap<ClassId, Vec<FeatureVector>> {
        &self.exemplars
    }

    /// Class probabilities for `query`.
    pub fn predict(&self, query: &FeatureVector) -> Result<ClassScores> {
        self.learner.predict(query)
    }

    /// Read-only decision; never touches the buffer.
    pub fn score(&self, query: &FeatureVector) -> Result<Verdict> {
        Ok(threshold_decision(&self.learner.predict(query)?, self.delta))
    }

    /// Decides on `sample` and buffers it when it is rejected as unknown.
    pub fn decide(&mut self, sample: &Observation) -> Result<Verdict> {
        let verdict = self.score(&sample.features)?;
        self.record(sample, verdict)?;
        Ok(verdict)
    }

    /// Buffers `sample` if `verdict` (from [`OwlAgent::score`]) rejected it.
    pub fn record(&mut self, sample: &Observation, verdict: Verdict) -> Result<()> {
        if verdict.decision == Decision::Unknown {
            if !self.buffered.insert(sample.sample_id.clone()) {
                return Err(Error::DuplicateSample(sample.sample_id.clone()));
            }
            self.detected.insert(sample.sample_id.clone());
            self.buffer.push(sample.clone());
        }
        Ok(())
    }

    /// Empties the buffer, handing its contents over (to the annotator).
    pub fn drain_buffer(&mut self) -> Vec<Observation> {
        self.buffered.clear();
        std::mem::take(&mut self.buffer)
    }

    /// Learns annotated classes whose samples were all detected as unknown
    /// by this agent, then clears the buffer.
    pub fn enroll(&mut self, labeled: &BTreeMap<ClassId, Vec<Observation>>) -> Result<()> {
        if labeled.values().all(Vec::is_empty) {
            return Err(Error::EmptyEnrollment);
        }
        if let Some(o) = labeled
            .values()
            .flatten()
            .find(|o| !self.detected.contains(&o.sample_id))
        {
            return Err(Error::UnknownSample(o.sample_id.clone()));
        }
        self.learn_classes(labeled)?;
        self.drain_buffer();
        Ok(())
    }

    /// Learns new labeled classes directly (incremental learning, no detection).
    pub fn learn_classes(&mut self, labeled: &BTreeMap<ClassId, Vec<Observation>>) -> Result<()> {
        if labeled.is_empty() {
            return Err(Error::EmptyEnrollment);
        }
        let known = self.known_classes();
        if let Some(&c) = labeled.keys().find(|c| known.contains(c)) {
            return Err(Error::ClassCollision(c));
        }
        if let Some((c, _)) = labeled.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::MissingData(format!("class {c} has no samples")));
        }
        let phase = self.increments + 1;
        let learner = match &self.learner {
            Learner::Evm(m) => Learner::Evm(m.append_classes(labeled)?),
            Learner::Perceptron(m) => {
                let new_ids: Vec<ClassId> = labeled.keys().copied().collect();
                let expanded =
                    m.expand_classes(&new_ids, self.exemplars.clone(), self.config.mlp.rng_seed)?;
                let trained = expanded.train(&flatten(labeled), &self.config.mlp, phase)?;
                add_exemplars(&mut self.exemplars, labeled)?;
                Learner::Perceptron(trained)
            }
        };
        self.learner = learner;
        self.increments = phase;
        Ok(())
    }
}

fn flatten(class_data: &BTreeMap<ClassId, Vec<Observation>>) -> Vec<(ClassId, &FeatureVector)> {
    class_data
        .iter()
        .flat_map(|(&c, obs)| obs.iter().map(move |o| (c, &o.features)))
        .collect()
}

fn add_exemplars(
    store: &mut BTreeMap<ClassId, Vec<FeatureVector>>,
    class_data: &BTreeMap<ClassId, Vec<Observation>>,
) -> Result<()> {
    for (&class, obs) in class_data {
        let features: Vec<FeatureVector> = obs.iter().map(|o| o.features.clone()).collect();
        let picks = herding_select(&features, EXEMPLARS_PER_CLASS.min(features.len()))?;
        store.insert(class, picks.into_iter().map(|i| features[i].clone()).collect());
    }
    Ok(())
}
