//! Grid search over EVM hyperparameters on a held-out part of the train split.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::agent::LearnerKind;
use crate::config::ProtocolConfig;
use crate::error::{Error, Result};
use crate::features::{Dataset, LabeledSample, Split};
use crate::protocol::{Mode, ProtocolRun, Threshold};
use crate::rng::{stream, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub dm: Vec<f64>,
    pub ct: Vec<f64>,
    /// Empty means the config's tailsize only.
    pub tailsize: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub dm: f64,
    pub ct: f64,
    pub tailsize: usize,
    pub average_accuracy: f64,
    pub best: bool,
}

/// Rebuilds `dataset` from its train split only: a `fraction` of each class's
/// train samples (at least one, never all) becomes the val split.
pub fn holdout(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = SeededRng::substream(seed, stream::SWEEP_HOLDOUT);
    let mut samples = Vec::new();
    for (class, mut train) in dataset.by_class(Split::Train) {
        if train.len() < 2 {
            return Err(Error::MissingData(format!(
                "class {class} needs two train samples for a holdout"
            )));
        }
        rng.shuffle(&mut train);
        let n_val = ((train.len() as f64 * fraction).round() as usize).clamp(1, train.len() - 1);
        for (i, s) in train.into_iter().enumerate() {
            samples.push(LabeledSample {
                split: if i < n_val { Split::Val } else { Split::Train },
                ..s.clone()
            });
        }
    }
    Dataset::new(dataset.dim(), samples)
}

/// Runs the EVM incremental pipeline of `config`'s schedule once per grid
/// cell, in parallel, and returns rows in grid order (dm, then ct, then
/// tailsize). The first cell with the highest average accuracy is marked best.
pub fn sweep(config: &ProtocolConfig, dataset: &Dataset, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    if grid.dm.is_empty() || grid.ct.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let tails = if grid.tailsize.is_empty() {
        vec![config.evm.tailsize]
    } else {
        grid.tailsize.clone()
    };
    let mut cells = Vec::new();
    for &dm in &grid.dm {
        for &ct in &grid.ct {
            for &tailsize in &tails {
                cells.push((dm, ct, tailsize));
            }
        }
    }
    let mut schedule = config.schedule();
    schedule.mode = Mode::Incremental;
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(dm, ct, tailsize)| {
            let mut settings = config.settings();
            settings.learner = LearnerKind::Evm;
            settings.threshold = Threshold::Fixed(0.0);
            settings.config.evm.dm = dm;
            settings.config.evm.ct = ct;
            settings.config.evm.tailsize = tailsize;
            settings.config.evm.validate()?;
            let out = ProtocolRun::new(dataset, &schedule, settings)?.run_full()?;
            let average_accuracy = out
                .summary
                .average_incremental_top1
                .ok_or_else(|| Error::MissingData("no validation samples in the holdout".into()))?;
            Ok(SweepRow {
                dm,
                ct,
                tailsize,
                average_accuracy,
                best: false,
            })
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.average_accuracy > rows[best].average_accuracy {
            best = i;
        }
    }
    rows[best].best = true;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("dm,ct,tailsize,average_accuracy,best\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.dm, r.ct, r.tailsize, r.average_accuracy, r.best
        );
    }
    out
}
