//! Phase driver for incremental and open-world runs.
//!
//! A run starts with an initialization phase that trains the agent on the
//! initial classes. Each later phase either hands the new classes' training
//! data straight to the learner (incremental mode) or streams known and
//! unknown training samples through the agent, sends the rejected ones to a
//! simulated annotator and enrolls the classes it labels (open-world mode).
//! After the initialization and after every phase the agent is evaluated on
//! validation samples of the known classes plus, in open-world mode, the
//! classes that will be introduced next.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{LearnerConfig, LearnerKind, OwlAgent, Verdict};
use crate::error::{Error, Result};
use crate::features::{ClassId, Dataset, LabeledSample, Observation, Split};
use crate::metrics::{
    average_incremental_accuracy, calibrate_threshold, compute_metrics, MetricRecord,
    ScoredSample, Truth,
};
use crate::rng::{derive_seed, stream, SeededRng};

/// Default minimum number of labeled samples before a class is enrolled.
pub const MIN_SAMPLES_PER_CLASS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every phase's new classes arrive fully labeled.
    Incremental,
    /// New classes must first be detected as unknown, then annotated.
    OpenWorld,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub initial_classes: Vec<ClassId>,
    /// New (unknown) classes introduced in phases 1, 2, ...
    pub phases: Vec<Vec<ClassId>>,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 50 initial classes, then the other 50 of a 100-class pool.
    Ow100,
    /// OW-100 continued with more phases up to 500 classes.
    Ow500,
}

impl Preset {
    pub fn total_classes(self) -> usize {
        match self {
            Preset::Ow100 => 100,
            Preset::Ow500 => 500,
        }
    }
}

impl PhaseSchedule {
    /// Shuffles `classes` with `order_seed`, takes `initial` of them to start
    /// and cuts the next `phases * step` into consecutive phases.
    pub fn shaped(
        classes: &[ClassId],
        initial: usize,
        step: usize,
        phases: usize,
        mode: Mode,
        order_seed: u64,
    ) -> Result<Self> {
        if initial == 0 || (phases > 0 && step == 0) {
            return Err(Error::InvalidArgument(
                "schedule needs initial classes and a positive step".into(),
            ));
        }
        let needed = initial + step * phases;
        if classes.len() < needed {
            return Err(Error::InvalidArgument(format!(
                "schedule needs {needed} classes, pool has {}",
                classes.len()
            )));
        }
        let mut order = classes.to_vec();
        SeededRng::substream(order_seed, stream::CLASS_ORDER).shuffle(&mut order);
        let initial_classes = order[..initial].to_vec();
        let phases = order[initial..needed]
            .chunks(step)
            .map(<[ClassId]>::to_vec)
            .collect();
        Ok(PhaseSchedule {
            initial_classes,
            phases,
            mode,
        })
    }

    /// OW-100 / OW-500 shape: 50 initial classes, then `step` classes per phase.
    pub fn preset(
        preset: Preset,
        classes: &[ClassId],
        step: usize,
        mode: Mode,
        order_seed: u64,
    ) -> Result<Self> {
        let rest = preset.total_classes() - 50;
        if step == 0 || !rest.is_multiple_of(step) {
            return Err(Error::InvalidArgument(format!(
                "step {step} does not divide the {rest} incremental classes"
            )));
        }
        Self::shaped(classes, 50, step, rest / step, mode, order_seed)
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.initial_classes.is_empty() {
            return Err(Error::Config("schedule has no initial classes".into()));
        }
        let train = dataset.by_class(Split::Train);
        let mut seen = HashSet::new();
        for &c in self.initial_classes.iter().chain(self.phases.iter().flatten()) {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class {c} appears twice in the schedule")));
            }
            if !train.contains_key(&c) {
                return Err(Error::MissingData(format!("class {c} has no training samples")));
            }
        }
        Ok(())
    }
}

/// Simulated annotator: reveals true labels of buffered samples, drops
/// samples of already-known classes, and holds back classes with too few
/// samples until a later call.
#[derive(Debug, Clone)]
pub struct Annotator {
    truth: HashMap<String, ClassId>,
    min_samples_per_class: usize,
    withheld: BTreeMap<ClassId, Vec<Observation>>,
}

impl Annotator {
    pub fn new(truth: HashMap<String, ClassId>, min_samples_per_class: usize) -> Self {
        Annotator {
            truth,
            min_samples_per_class,
            withheld: BTreeMap::new(),
        }
    }

    pub fn from_dataset(dataset: &Dataset, min_samples_per_class: usize) -> Self {
        Self::new(
            dataset
                .samples()
                .iter()
                .map(|s| (s.sample_id.clone(), s.class_id))
                .collect(),
            min_samples_per_class,
        )
    }

    pub fn withheld(&self) -> &BTreeMap<ClassId, Vec<Observation>> {
        &self.withheld
    }

    pub fn annotate(
        &mut self,
        buffer: Vec<Observation>,
        known: &BTreeSet<ClassId>,
    ) -> Result<BTreeMap<ClassId, Vec<Observation>>> {
        let mut labeled = std::mem::take(&mut self.withheld);
        for o in buffer {
            let class = *self
                .truth
                .get(&o.sample_id)
                .ok_or_else(|| Error::UnknownSample(o.sample_id.clone()))?;
            if !known.contains(&class) {
                labeled.entry(class).or_default().push(o);
            }
        }
        let (ready, waiting): (BTreeMap<_, _>, BTreeMap<_, _>) = labeled
            .into_iter()
            .filter(|(c, _)| !known.contains(c))
            .partition(|(_, v)| v.len() >= self.min_samples_per_class);
        self.withheld = waiting;
        Ok(ready)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    /// 0 for the initialization phase.
    pub phase: usize,
    /// Classes known when this evaluation ran.
    pub known_classes: Vec<ClassId>,
    /// Classes introduced in this phase (empty for phase 0).
    pub unknown_classes: Vec<ClassId>,
    /// Samples rejected as unknown during the operational phase.
    pub detected: usize,
    /// Classes learned in this phase.
    pub enrolled: Vec<ClassId>,
    /// Threshold in force during the evaluation.
    pub delta: f64,
    pub metrics: MetricRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    /// Mean CwCA over evaluation points.
    pub average_incremental_top1: Option<f64>,
    pub average_owca: Option<f64>,
    pub average_uda: Option<f64>,
}

impl RunSummary {
    fn from_reports(reports: &[PhaseReport]) -> Self {
        let mean = |f: fn(&MetricRecord) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(|r| f(&r.metrics)).collect();
            average_incremental_accuracy(&v).ok()
        };
        RunSummary {
            average_incremental_top1: mean(|m| m.cwca),
            average_owca: mean(|m| m.owca),
            average_uda: mean(|m| m.uda),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<PhaseReport>,
    pub summary: RunSummary,
    pub agent: OwlAgent,
}

/// How a run sets the rejection threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    /// Recalibrated at every evaluation so the evaluation's unknowns are
    /// rejected at this rate; the calibrated value then stays in force for
    /// the following operational phase.
    TargetUda(f64),
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub learner: LearnerKind,
    pub config: LearnerConfig,
    pub threshold: Threshold,
    pub seed: u64,
    pub min_samples_per_class: usize,
}

/// The protocol state machine over one dataset and schedule.
pub struct ProtocolRun<'a> {
    dataset: &'a Dataset,
    schedule: &'a PhaseSchedule,
    settings: RunSettings,
    train: BTreeMap<ClassId, Vec<&'a LabeledSample>>,
    val: BTreeMap<ClassId, Vec<&'a LabeledSample>>,
    annotator: Annotator,
    trained_ids: HashSet<String>,
}

impl<'a> ProtocolRun<'a> {
    pub fn new(
        dataset: &'a Dataset,
        schedule: &'a PhaseSchedule,
        settings: RunSettings,
    ) -> Result<Self> {
        schedule.validate(dataset)?;
        let (Threshold::Fixed(d) | Threshold::TargetUda(d)) = settings.threshold;
        if !d.is_finite() || d < 0.0 {
            return Err(Error::Config(format!("invalid threshold setting {d}")));
        }
        Ok(ProtocolRun {
            dataset,
            schedule,
            annotator: Annotator::from_dataset(dataset, settings.min_samples_per_class),
            settings,
            train: dataset.by_class(Split::Train),
            val: dataset.by_class(Split::Val),
            trained_ids: HashSet::new(),
        })
    }

    fn observations(&self, class: ClassId) -> Vec<Observation> {
        self.train
            .get(&class)
            .map(|v| v.iter().map(|s| Observation::from(*s)).collect())
            .unwrap_or_default()
    }

    fn initial_delta(&self) -> f64 {
        match self.settings.threshold {
            Threshold::Fixed(d) => d,
            Threshold::TargetUda(_) => 0.0,
        }
    }

    /// Trains the initial agent on every training sample of the initial classes.
    pub fn run_initialization(&mut self) -> Result<OwlAgent> {
        let data: BTreeMap<ClassId, Vec<Observation>> = self
            .schedule
            .initial_classes
            .iter()
            .map(|&c| (c, self.observations(c)))
            .collect();
        self.note_trained(data.values().flatten());
        OwlAgent::initialize(
            self.settings.learner,
            &data,
            self.settings.config.clone(),
            self.initial_delta(),
        )
    }

    fn note_trained<'o>(&mut self, obs: impl Iterator<Item = &'o Observation>) {
        self.trained_ids.extend(obs.map(|o| o.sample_id.clone()));
    }

    /// Runs operational phase `n` (1-based) and returns the detected count
    /// and the classes learned.
    pub fn run_operational_phase(
        &mut self,
        agent: &mut OwlAgent,
        n: usize,
    ) -> Result<(usize, Vec<ClassId>)> {
        let unknown = self
            .schedule
            .phases
            .get(n.wrapping_sub(1))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "phase {n} out of range 1..={}",
                    self.schedule.phases.len()
                ))
            })?
            .clone();

        if self.schedule.mode == Mode::Incremental {
            let data: BTreeMap<ClassId, Vec<Observation>> =
                unknown.iter().map(|&c| (c, self.observations(c))).collect();
            agent.learn_classes(&data)?;
            self.note_trained(data.values().flatten());
            return Ok((0, unknown));
        }

        let known = agent.known_classes();
        let mut stream: Vec<Observation> = known
            .iter()
            .chain(&unknown)
            .flat_map(|&c| self.observations(c))
            .collect();
        let mut rng = SeededRng::new(derive_seed(
            derive_seed(self.settings.seed, stream::PROTOCOL_STREAM),
            n as u64,
        ));
        rng.shuffle(&mut stream);
        decide_stream(agent, &stream)?;

        let buffer = agent.drain_buffer();
        let detected = buffer.len();
        let labeled = self.annotator.annotate(buffer, &known)?;
        let enrolled: Vec<ClassId> = labeled.keys().copied().collect();
        if !labeled.is_empty() {
            agent.enroll(&labeled)?;
            self.note_trained(labeled.values().flatten());
        }
        Ok((detected, enrolled))
    }

    /// Scores the validation samples of the known classes plus `unknown`
    /// classes without touching the agent's buffer.
    pub fn run_evaluation_phase(
        &self,
        agent: &OwlAgent,
        unknown: &[ClassId],
    ) -> Result<(MetricRecord, Vec<f64>)> {
        let known = agent.known_classes();
        let mut eval: Vec<(Truth, &LabeledSample)> = Vec::new();
        for &c in &known {
            eval.extend(self.val.get(&c).into_iter().flatten().map(|s| (Truth::Known(c), *s)));
        }
        for &c in unknown {
            eval.extend(self.val.get(&c).into_iter().flatten().map(|s| (Truth::Unknown, *s)));
        }
        if let Some((_, s)) = eval.iter().find(|(_, s)| self.trained_ids.contains(&s.sample_id)) {
            return Err(Error::Format(format!(
                "sample {} used for both training and evaluation",
                s.sample_id
            )));
        }
        let verdicts: Vec<Verdict> = eval
            .par_iter()
            .map(|(_, s)| agent.score(&s.features))
            .collect::<Result<_>>()?;
        let scored: Vec<ScoredSample> = eval
            .iter()
            .zip(&verdicts)
            .map(|((truth, _), v)| ScoredSample {
                truth: *truth,
                verdict: *v,
            })
            .collect();
        let unknown_scores = scored
            .iter()
            .filter(|s| s.truth == Truth::Unknown)
            .map(|s| s.verdict.score)
            .collect();
        Ok((compute_metrics(&scored), unknown_scores))
    }

    /// Evaluation point `n`: unknowns are the classes of phase `n + 1` (open-world mode).
    fn evaluate(&self, agent: &mut OwlAgent, n: usize) -> Result<(MetricRecord, f64)> {
        let next_unknown: &[ClassId] = match self.schedule.mode {
            Mode::OpenWorld => self.schedule.phases.get(n).map_or(&[], Vec::as_slice),
            Mode::Incremental => &[],
        };
        if let Threshold::TargetUda(target) = self.settings.threshold {
            if !next_unknown.is_empty() {
                let (_, unknown_scores) = self.run_evaluation_phase(agent, next_unknown)?;
                agent.set_delta(calibrate_threshold(&unknown_scores, target)?)?;
            }
        }
        let (metrics, _) = self.run_evaluation_phase(agent, next_unknown)?;
        Ok((metrics, agent.delta()))
    }

    pub fn run_full(mut self) -> Result<RunOutput> {
        let mut agent = self.run_initialization()?;
        let mut reports = Vec::with_capacity(self.schedule.phases.len() + 1);
        let (metrics, delta) = self.evaluate(&mut agent, 0)?;
        reports.push(PhaseReport {
            phase: 0,
            known_classes: agent.known_classes().into_iter().collect(),
            unknown_classes: Vec::new(),
            detected: 0,
            enrolled: Vec::new(),
            delta,
            metrics,
        });
        for n in 1..=self.schedule.phases.len() {
            let (detected, enrolled) = self.run_operational_phase(&mut agent, n)?;
            let (metrics, delta) = self.evaluate(&mut agent, n)?;
            reports.push(PhaseReport {
                phase: n,
                known_classes: agent.known_classes().into_iter().collect(),
                unknown_classes: self.schedule.phases[n - 1].clone(),
                detected,
                enrolled,
                delta,
                metrics,
            });
        }
        Ok(RunOutput {
            summary: RunSummary::from_reports(&reports),
            reports,
            agent,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }
}

/// Scores a stream in parallel, then buffers rejections in stream order.
fn decide_stream(agent: &mut OwlAgent, stream: &[Observation]) -> Result<()> {
    let verdicts: Vec<Verdict> = stream
        .par_iter()
        .map(|o| agent.score(&o.features))
        .collect::<Result<_>>()?;
    for (o, v) in stream.iter().zip(verdicts) {
        agent.record(o, v)?;
    }
    Ok(())
}

pub const REPORT_HEADER: &str = "phase,n_known,n_unknown,cwca,uda,owca,detected,enrolled";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Report CSV: one row per evaluation point; absent metrics are empty fields.
/// `n_known`/`n_unknown` count evaluation samples, `enrolled` counts classes.
pub fn report_csv(reports: &[PhaseReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.phase,
            m.n_known_samples,
            m.n_unknown_samples,
            opt(m.cwca),
            opt(m.uda),
            opt(m.owca),
            r.detected,
            r.enrolled.len()
        );
    }
    out
}

/// One parsed row of a report CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportRow {
    pub phase: usize,
    pub n_known: usize,
    pub n_unknown: usize,
    pub cwca: Option<f64>,
    pub uda: Option<f64>,
    pub owca: Option<f64>,
    pub detected: usize,
    pub enrolled: usize,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("report header: {e}")))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != REPORT_HEADER {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("report row: {e}"))))
        .collect()
}

/// Fixed-width text table of a report in percent, ending with the run averages.
pub fn render_table(rows: &[ReportRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5} | {:>8} | {:>8} | {:>7} | {:>7} | {:>7} | {:>8} | {:>8}",
        "phase", "n_known", "n_unkn", "UDA", "OwCA", "CwCA", "detected", "enrolled"
    );
    let _ = writeln!(out, "{}", "-".repeat(84));
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5} | {:>8} | {:>8} | {:>7} | {:>7} | {:>7} | {:>8} | {:>8}",
            r.phase,
            r.n_known,
            r.n_unknown,
            pct(r.uda),
            pct(r.owca),
            pct(r.cwca),
            r.detected,
            r.enrolled
        );
    }
    let mean = |f: fn(&ReportRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        average_incremental_accuracy(&v).ok()
    };
    let _ = writeln!(out, "{}", "-".repeat(84));
    let _ = writeln!(
        out,
        "{:>5} | {:>8} | {:>8} | {:>7} | {:>7} | {:>7} |",
        "avg",
        "",
        "",
        pct(mean(|r| r.uda)),
        pct(mean(|r| r.owca)),
        pct(mean(|r| r.cwca))
    );
    out
}
