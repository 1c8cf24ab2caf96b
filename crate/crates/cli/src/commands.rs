use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use owl_core::agent::{threshold_decision, Learner};
use owl_core::error::{Error, Result};
use owl_core::features::{generate_synthetic, manifest_path, read_features, write_features, SynthSpec};
use owl_core::metrics::{calibrate_threshold, rejection_rate};
use owl_core::protocol::{parse_report_csv, render_table, report_csv, ProtocolRun};
use owl_core::sweep::{holdout, sweep as run_sweep, sweep_csv, SweepGrid};
use owl_core::{ClassId, Dataset, ProtocolConfig, Split};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CalibrateArgs, Global, ReportArgs, SweepArgs, SynthArgs};

/// Files written by a command; removed again unless the command finishes.
struct Outputs {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    done: bool,
}

impl Outputs {
    fn in_dir(dir: &Path) -> Result<Self> {
        let created_dir = (!dir.exists()).then(|| dir.to_path_buf());
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            files: Vec::new(),
            created_dir,
            done: false,
        })
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    fn write(&mut self, path: PathBuf, contents: &str) -> Result<PathBuf> {
        let path = self.track(path);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn finish(mut self) {
        self.done = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(dir) = &self.created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
}

pub fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        dim: a.dim,
        train_per_class: a.train,
        val_per_class: a.val,
        mean_radius: a.radius,
        within_class_stddev: a.stddev,
        rng_seed: g.seed.unwrap_or(0),
    };
    let dataset = generate_synthetic(&spec)?;
    let dir = g.out_dir();
    let mut out = Outputs::in_dir(&dir)?;
    let path = out.track(dir.join("features.owlf"));
    out.track(manifest_path(&path));
    write_features(&dataset, &path)?;
    out.finish();
    println!("{}", path.display());
    println!("{}", manifest_path(&path).display());
    Ok(())
}

/// Loads the config with `--seed` folded in and the feature path resolved:
/// `--features` as given, a config path relative to the config file.
fn load_config(g: &Global) -> Result<(ProtocolConfig, Dataset)> {
    let path = g.require_config()?;
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut config = ProtocolConfig::load(path, &overrides)?;
    let features = match (&g.features, &config.features_path) {
        (Some(f), _) => f.clone(),
        (None, Some(f)) => path.parent().unwrap_or(Path::new("")).join(f),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "no feature file: pass --features or set features_path".into(),
            ))
        }
    };
    let dataset = read_features(&features)?;
    config.features_path = Some(features);
    Ok((config, dataset))
}

#[derive(Serialize)]
struct RunManifest {
    config_hash: String,
    engine_version: &'static str,
    started_at: String,
    output_dir: PathBuf,
}

pub fn config_hash(config: &ProtocolConfig) -> String {
    Sha256::digest(config.to_toml().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn run(g: &Global) -> Result<()> {
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let (config, dataset) = load_config(g)?;
    let schedule = config.schedule();
    let result = ProtocolRun::new(&dataset, &schedule, config.settings())?.run_full()?;

    let dir = g.out_dir();
    let mut out = Outputs::in_dir(&dir)?;
    let report = out.write(dir.join("report.csv"), &report_csv(&result.reports))?;
    let learner = result.agent.learner();
    let model = out.track(dir.join(format!("model.{}", learner.file_extension())));
    learner.save(&model)?;
    let manifest = RunManifest {
        config_hash: config_hash(&config),
        engine_version: env!("CARGO_PKG_VERSION"),
        started_at,
        output_dir: dir.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_file = out.write(dir.join("manifest.json"), &json)?;
    out.finish();

    print!("{}", render_table(&parse_report_csv(&report_csv(&result.reports))?));
    if let Some(avg) = result.summary.average_incremental_top1 {
        println!("average incremental top-1: {avg:.4}");
    }
    for p in [&report, &model, &manifest_file] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn sweep(g: &Global, a: &SweepArgs) -> Result<()> {
    let (config, dataset) = load_config(g)?;
    let held = holdout(&dataset, a.holdout, config.seed)?;
    let grid = SweepGrid {
        dm: a.dm.clone(),
        ct: a.ct.clone(),
        tailsize: a.tailsize.clone(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("OWL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("OWL_THREADS={v:?} is not a positive integer")))?;
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let rows = pool.install(|| run_sweep(&config, &held, &grid))?;

    let dir = g.out_dir();
    let mut out = Outputs::in_dir(&dir)?;
    let csv = sweep_csv(&rows);
    let path = out.write(dir.join("sweep.csv"), &csv)?;
    out.finish();
    print!("{csv}");
    if let Some(best) = rows.iter().find(|r| r.best) {
        println!(
            "best: dm={} ct={} tailsize={} ({:.4})",
            best.dm, best.ct, best.tailsize, best.average_accuracy
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn unknown_scores(g: &Global, model: &Path, classes: &[ClassId]) -> Result<Vec<f64>> {
    let learner = Learner::load(model)?;
    let features = g
        .features
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--model needs --features".into()))?;
    let dataset = read_features(features)?;
    let known = learner.class_ids();
    let unknown: BTreeSet<ClassId> = if classes.is_empty() {
        dataset.class_ids().difference(&known).copied().collect()
    } else {
        classes.iter().copied().collect()
    };
    if let Some(c) = unknown.iter().find(|c| known.contains(c)) {
        return Err(Error::InvalidArgument(format!("class {c} is known to the model")));
    }
    dataset
        .split_samples(Split::Val)
        .filter(|s| unknown.contains(&s.class_id))
        .map(|s| Ok(threshold_decision(&learner.predict(&s.features)?, 0.0).score))
        .collect()
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad score {l:?} in {}", path.display())))
        })
        .collect()
}

pub fn calibrate(g: &Global, a: &CalibrateArgs) -> Result<()> {
    let scores = match (&a.model, &a.scores) {
        (Some(m), None) => unknown_scores(g, m, &a.unknown_classes)?,
        (None, Some(s)) => read_scores(s)?,
        _ => return Err(Error::InvalidArgument("pass --model or --scores".into())),
    };
    let delta = calibrate_threshold(&scores, a.target_uda)?;
    let dir = g.out_dir();
    let mut out = Outputs::in_dir(&dir)?;
    let fragment = format!(
        "# rejects {} of {} unknown scores (target {})\ndelta = {delta:?}\n",
        rejection_rate(&scores, delta),
        scores.len(),
        a.target_uda
    );
    let path = out.write(dir.join("calibrated.toml"), &fragment)?;
    out.finish();
    println!("{delta}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn report(g: &Global, a: &ReportArgs) -> Result<()> {
    let path = a.path.clone().unwrap_or_else(|| g.out_dir().join("report.csv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    print!("{}", render_table(&parse_report_csv(&text)?));
    Ok(())
}
