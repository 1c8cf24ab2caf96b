//! Feature-vector datasets: the in-memory types, the on-disk format, a
//! seeded synthetic generator, and herding exemplar selection.
//!
//! On disk a dataset is two files in one directory. The feature file is
//! little-endian: magic `OWLF`, `u32` version (1), `u32` count, `u32` dim,
//! then `count × dim` float32 values in row-major order. Its sibling
//! `manifest.csv` has the header `sample_id,class_id,split,row_index` and one
//! row per sample.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};

pub type ClassId = u32;

const FEATURE_MAGIC: &[u8; 4] = b"OWLF";
const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_FILE_NAME: &str = "manifest.csv";

/// A dense, finite feature vector stored as float32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "feature vector needs at least one dimension".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value at index {i}")));
        }
        Ok(FeatureVector(values))
    }

    /// Rounds each entry to float32.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

/// Euclidean distance accumulated in f64.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    pub features: FeatureVector,
    pub class_id: ClassId,
    pub split: Split,
}

/// A feature vector carrying the id of the sample it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub sample_id: String,
    pub features: FeatureVector,
}

impl From<&LabeledSample> for Observation {
    fn from(s: &LabeledSample) -> Self {
        Observation {
            sample_id: s.sample_id.clone(),
            features: s.features.clone(),
        }
    }
}

/// Immutable collection of labeled samples sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(dim: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dataset dim must be positive".into()));
        }
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: s.features.dim(),
                });
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::DuplicateSample(s.sample_id.clone()));
            }
        }
        Ok(Dataset { dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All class ids, in ascending order.
    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// Samples of one split grouped by class, each group in dataset order.
    pub fn by_class(&self, split: Split) -> BTreeMap<ClassId, Vec<&LabeledSample>> {
        let mut out: BTreeMap<ClassId, Vec<&LabeledSample>> = BTreeMap::new();
        for s in self.samples.iter().filter(|s| s.split == split) {
            out.entry(s.class_id).or_default().push(s);
        }
        out
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Path of the manifest that accompanies a feature file.
pub fn manifest_path(features_path: &Path) -> PathBuf {
    features_path.with_file_name(MANIFEST_FILE_NAME)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: String,
    class_id: ClassId,
    split: Split,
    row_index: u64,
}

pub fn write_features(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.len_u32(dataset.len())?;
    w.len_u32(dataset.dim())?;
    for s in dataset.samples() {
        for &v in s.features.as_slice() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sample {}", s.sample_id)));
            }
            w.f32(v);
        }
    }
    std::fs::write(path, w.into_inner()).map_err(|e| Error::io(path, e))?;

    let mpath = manifest_path(path);
    let mut csv_out = csv::Writer::from_path(&mpath).map_err(|e| csv_error(&mpath, e))?;
    for (row_index, s) in dataset.samples().iter().enumerate() {
        csv_out
            .serialize(ManifestRow {
                sample_id: s.sample_id.clone(),
                class_id: s.class_id,
                split: s.split,
                row_index: row_index as u64,
            })
            .map_err(|e| csv_error(&mpath, e))?;
    }
    if dataset.is_empty() {
        // csv only emits the header alongside the first record.
        csv_out
            .write_record(["sample_id", "class_id", "split", "row_index"])
            .map_err(|e| csv_error(&mpath, e))?;
    }
    csv_out.flush().map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    r.header(FEATURE_MAGIC, FEATURE_VERSION)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::Format("feature file declares dim 0".into()));
    }
    let expected = (count as u64) * (dim as u64) * 4;
    if r.remaining() as u64 != expected {
        return Err(Error::Format(format!(
            "count/dim inconsistency: {count} x {dim} float32 needs {expected} bytes, payload has {}",
            r.remaining()
        )));
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(r.f32()?);
        }
        rows.push(row);
    }
    r.finish()?;

    let mpath = manifest_path(path);
    let mut reader = csv::Reader::from_path(&mpath).map_err(|e| csv_error(&mpath, e))?;
    let mut slots: Vec<Option<LabeledSample>> = vec![None; count];
    let mut ids = HashSet::with_capacity(count);
    for rec in reader.deserialize::<ManifestRow>() {
        let row = rec.map_err(|e| csv_error(&mpath, e))?;
        let idx = usize::try_from(row.row_index)
            .ok()
            .filter(|&i| i < count)
            .ok_or_else(|| {
                Error::Format(format!(
                    "manifest row_index {} out of range [0, {count})",
                    row.row_index
                ))
            })?;
        if !ids.insert(row.sample_id.clone()) {
            return Err(Error::DuplicateSample(row.sample_id));
        }
        let slot = &mut slots[idx];
        if slot.is_some() {
            return Err(Error::Format(format!("row_index {idx} referenced twice")));
        }
        let features = FeatureVector::new(std::mem::take(&mut rows[idx]))
            .map_err(|e| Error::Format(format!("row {idx}: {e}")))?;
        *slot = Some(LabeledSample {
            sample_id: row.sample_id,
            features,
            class_id: row.class_id,
            split: row.split,
        });
    }
    let samples = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Format(format!("row {i} missing from manifest"))))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dim, samples)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Parameters of a synthetic Gaussian-cluster world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: u32,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub mean_radius: f64,
    pub within_class_stddev: f64,
    pub rng_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive_reals = self.mean_radius > 0.0
            && self.mean_radius.is_finite()
            && self.within_class_stddev > 0.0
            && self.within_class_stddev.is_finite();
        if self.num_classes == 0
            || self.dim == 0
            || self.train_per_class == 0
            || self.val_per_class == 0
            || !positive_reals
        {
            return Err(Error::InvalidArgument(format!(
                "synthetic spec fields must be strictly positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Class means uniform on a sphere of `mean_radius`, samples isotropic
/// Gaussian around them. Per class, train samples precede val samples.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut mean_rng = SeededRng::substream(spec.rng_seed, stream::SYNTH_MEANS);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| loop {
            let g: Vec<f64> = (0..spec.dim).map(|_| mean_rng.gaussian()).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                break g.iter().map(|v| v / norm * spec.mean_radius).collect();
            }
        })
        .collect();

    let mut sample_rng = SeededRng::substream(spec.rng_seed, stream::SYNTH_SAMPLES);
    let per_class = spec.train_per_class + spec.val_per_class;
    let mut samples = Vec::with_capacity(per_class * spec.num_classes as usize);
    for (class, mean) in (0..spec.num_classes).zip(&means) {
        for i in 0..per_class {
            let (split, idx) = if i < spec.train_per_class {
                (Split::Train, i)
            } else {
                (Split::Val, i - spec.train_per_class)
            };
            let values: Vec<f64> = mean
                .iter()
                .map(|m| m + spec.within_class_stddev * sample_rng.gaussian())
                .collect();
            samples.push(LabeledSample {
                sample_id: format!("c{class}-{split}-{idx}"),
                features: FeatureVector::from_f64(&values)?,
                class_id: class,
                split,
            });
        }
    }
    Dataset::new(spec.dim, samples)
}

/// Greedy herding: each step adds the sample that brings the running mean of
/// the selection closest to the full-set mean. Ties go to the lowest index.
pub fn herding_select(samples: &[FeatureVector], budget: usize) -> Result<Vec<usize>> {
    if budget > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "herding budget {budget} exceeds {} samples",
            samples.len()
        )));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }
    let dim = samples[0].dim();
    if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(FeatureVector::to_f64).collect();
    let n = rows.len() as f64;
    let mut target = vec![0.0; dim];
    for r in &rows {
        for (t, v) in target.iter_mut().zip(r) {
            *t += v;
        }
    }
    target.iter_mut().for_each(|t| *t /= n);

    let mut chosen = vec![false; rows.len()];
    let mut running = vec![0.0; dim];
    let mut order = Vec::with_capacity(budget);
    for step in 1..=budget {
        let k = step as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let err: f64 = target
                .iter()
                .zip(&running)
                .zip(r)
                .map(|((t, s), v)| {
                    let d = t - (s + v) / k;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, e)| err < e) {
                best = Some((i, err));
            }
        }
        let (pick, _) = best.expect("budget <= sample count leaves a candidate");
        chosen[pick] = true;
        for (s, v) in running.iter_mut().zip(&rows[pick]) {
            *s += v;
        }
        order.push(pick);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f32]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn sample(id: &str, v: &[f32], class: ClassId, split: Split) -> LabeledSample {
        LabeledSample {
            sample_id: id.into(),
            features: fv(v),
            class_id: class,
            split,
        }
    }

    #[test]
    fn feature_vector_rejects_bad_values() {
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(matches!(
            FeatureVector::new(vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(FeatureVector::new(vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn dataset_rejects_duplicates_and_dim_mismatch() {
        let a = sample("a", &[1.0, 2.0], 0, Split::Train);
        let b = sample("a", &[1.0, 2.0], 1, Split::Val);
        assert!(matches!(
            Dataset::new(2, vec![a.clone(), b]),
            Err(Error::DuplicateSample(_))
        ));
        assert!(matches!(
            Dataset::new(3, vec![a]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.owlf");
        let d = Dataset::new(8, vec![]).unwrap();
        write_features(&d, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"OWLF");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(read_features(&path).unwrap(), d);
    }

    #[test]
    fn single_sample_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.owlf");
        let d = Dataset::new(2, vec![sample("s0", &[1.0, -2.5], 3, Split::Val)]).unwrap();
        write_features(&d, &path).unwrap();
        let back = read_features(&path).unwrap();
        let vals = back.samples()[0].features.as_slice();
        assert_eq!(vals[0].to_bits(), 1.0f32.to_bits());
        assert_eq!(vals[1].to_bits(), (-2.5f32).to_bits());
        assert_eq!(back, d);
    }

    #[test]
    fn manifest_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.owlf");
        let d = Dataset::new(
            1,
            vec![
                sample("x", &[0.5], 1, Split::Train),
                sample("y", &[1.5], 2, Split::Val),
            ],
        )
        .unwrap();
        write_features(&d, &path).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(
            text,
            "sample_id,class_id,split,row_index\nx,1,train,0\ny,2,val,1\n"
        );
    }

    fn write_raw(dir: &Path, header: (&[u8], u32, u32, u32), payload_floats: usize, manifest: &str) -> PathBuf {
        let path = dir.join("features.owlf");
        let mut bytes = header.0.to_vec();
        bytes.extend_from_slice(&header.1.to_le_bytes());
        bytes.extend_from_slice(&header.2.to_le_bytes());
        bytes.extend_from_slice(&header.3.to_le_bytes());
        for i in 0..payload_floats {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        std::fs::write(dir.join("manifest.csv"), manifest).unwrap();
        path
    }

    const HEADER: &str = "sample_id,class_id,split,row_index\n";

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = format!("{HEADER}a,0,train,0\nb,0,train,1\n");
        let path = write_raw(dir.path(), (b"OWLF", 1, 2, 3), 5, &m);
        let err = read_features(&path).unwrap_err().to_string();
        assert!(err.contains("count/dim inconsistency"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let m = format!("{HEADER}a,0,train,0\n");
        let path = write_raw(dir.path(), (b"OWLX", 1, 1, 1), 1, &m);
        assert!(read_features(&path).unwrap_err().to_string().contains("bad magic"));
        let path = write_raw(dir.path(), (b"OWLF", 2, 1, 1), 1, &m);
        assert!(read_features(&path)
            .unwrap_err()
            .to_string()
            .contains("version mismatch"));
    }

    #[test]
    fn row_index_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let m = format!("{HEADER}a,0,train,0\nb,0,train,2\n");
        let path = write_raw(dir.path(), (b"OWLF", 1, 2, 1), 2, &m);
        let err = read_features(&path).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
    }

    #[test]
    fn duplicate_sample_id_in_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = format!("{HEADER}a,0,train,0\na,0,train,1\n");
        let path = write_raw(dir.path(), (b"OWLF", 1, 2, 1), 2, &m);
        assert!(matches!(
            read_features(&path),
            Err(Error::DuplicateSample(_))
        ));
    }

    #[test]
    fn synth_validation() {
        let mut spec = SynthSpec {
            num_classes: 3,
            dim: 4,
            train_per_class: 5,
            val_per_class: 2,
            mean_radius: 1.0,
            within_class_stddev: 0.1,
            rng_seed: 1,
        };
        assert!(generate_synthetic(&spec).is_ok());
        spec.num_classes = 0;
        assert!(generate_synthetic(&spec).is_err());
        spec.num_classes = 3;
        spec.within_class_stddev = 0.0;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn synth_degenerate_spread_collapses_to_mean() {
        let spec = SynthSpec {
            num_classes: 4,
            dim: 6,
            train_per_class: 5,
            val_per_class: 3,
            mean_radius: 10.0,
            within_class_stddev: 1e-12,
            rng_seed: 11,
        };
        let d = generate_synthetic(&spec).unwrap();
        for (_, group) in d.by_class(Split::Train) {
            let first = &group[0].features;
            let norm = first.to_f64().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 10.0).abs() < 1e-5, "mean not on sphere: {norm}");
            for s in &group {
                assert_eq!(&s.features, first);
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            num_classes: 5,
            dim: 7,
            train_per_class: 4,
            val_per_class: 2,
            mean_radius: 3.0,
            within_class_stddev: 0.5,
            rng_seed: 99,
        };
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
        let other = SynthSpec { rng_seed: 100, ..spec.clone() };
        assert_ne!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    /// Plain re-statement of the greedy herding rule: evaluates every
    /// candidate subset extension from scratch.
    fn herding_oracle(points: &[[f64; 2]], budget: usize) -> Vec<usize> {
        let n = points.len() as f64;
        let mu = [
            points.iter().map(|p| p[0]).sum::<f64>() / n,
            points.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let mut selected: Vec<usize> = Vec::new();
        for _ in 0..budget {
            let mut best = usize::MAX;
            let mut best_err = f64::INFINITY;
            for cand in 0..points.len() {
                if selected.contains(&cand) {
                    continue;
                }
                let mut set = selected.clone();
                set.push(cand);
                let m = set.len() as f64;
                let mx = set.iter().map(|&i| points[i][0]).sum::<f64>() / m;
                let my = set.iter().map(|&i| points[i][1]).sum::<f64>() / m;
                let err = ((mu[0] - mx).powi(2) + (mu[1] - my).powi(2)).sqrt();
                if err < best_err {
                    best_err = err;
                    best = cand;
                }
            }
            selected.push(best);
        }
        selected
    }

    #[test]
    fn herding_matches_oracle_on_six_points() {
        let pts = [
            [0.0, 0.0],
            [4.0, 1.0],
            [1.0, 3.0],
            [-2.0, 0.5],
            [3.0, -1.5],
            [0.5, 2.0],
        ];
        let fvs: Vec<FeatureVector> = pts
            .iter()
            .map(|p| fv(&[p[0] as f32, p[1] as f32]))
            .collect();
        let expected = herding_oracle(&pts, 3);
        assert_eq!(herding_select(&fvs, 3).unwrap(), expected);
    }

    #[test]
    fn herding_first_pick_is_nearest_to_mean() {
        let fvs = vec![fv(&[5.0]), fv(&[1.0]), fv(&[2.2]), fv(&[-1.0])];
        // mean = 1.8, nearest is 2.2 at index 2
        assert_eq!(herding_select(&fvs, 1).unwrap(), vec![2]);
    }

    #[test]
    fn herding_full_budget_and_errors() {
        let fvs = vec![fv(&[1.0]), fv(&[1.0]), fv(&[3.0])];
        let mut all = herding_select(&fvs, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(herding_select(&fvs, 4).is_err());
        // exact tie between indices 0 and 1 resolves to the lower one
        let tie = vec![fv(&[1.0]), fv(&[-1.0])];
        assert_eq!(herding_select(&tie, 1).unwrap(), vec![0]);
    }
}
