//! Extreme Value Machine over fixed feature vectors.
//!
//! Each class keeps a reduced set of its training points (extreme vectors).
//! Every extreme vector carries a Weibull model fitted to its smallest
//! scaled margins against other classes, and scores a query by the
//! probability of inclusion at the query's Euclidean distance. Classes are
//! only ever appended: fitting a new class never touches stored ones.
//!
//! Model files are little-endian: magic `OWLE`, `u32` version (1), the
//! hyperparameters (`f64` dm, `f64` ct, `u32` tailsize, `u32` exemplars),
//! `u32` dim, `u32` class count, then per class its `u32` id, `u32` extreme
//! vector count and, per extreme vector, the source sample id (`u32` length +
//! UTF-8), `dim` float32 features, and `f64` shape and scale.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::features::{euclidean, ClassId, FeatureVector, Observation};
use crate::scores::ClassScores;
use crate::weibull::{fit_mle, WeibullParams};

const MODEL_MAGIC: &[u8; 4] = b"OWLE";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvmHyperParams {
    /// Multiplier applied to distances before the tail fit.
    #[serde(default = "default_dm")]
    pub dm: f64,
    /// Probability of inclusion at which one point covers another during model reduction.
    #[serde(default = "default_ct")]
    pub ct: f64,
    /// Number of smallest margins fed to each Weibull fit (capped by the negatives available).
    #[serde(default = "default_tailsize")]
    pub tailsize: usize,
    /// Extreme vectors per existing class lent as negatives to new classes; 0 disables.
    #[serde(default = "default_exemplars", rename = "exemplars")]
    pub exemplars_per_class: usize,
}

fn default_dm() -> f64 {
    0.7
}
fn default_ct() -> f64 {
    0.8
}
fn default_tailsize() -> usize {
    75
}
fn default_exemplars() -> usize {
    20
}

impl Default for EvmHyperParams {
    fn default() -> Self {
        EvmHyperParams {
            dm: default_dm(),
            ct: default_ct(),
            tailsize: default_tailsize(),
            exemplars_per_class: default_exemplars(),
        }
    }
}

impl EvmHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dm.is_finite() && self.dm > 0.0) {
            return Err(Error::InvalidArgument(format!("dm must be positive, got {}", self.dm)));
        }
        if !(self.ct > 0.0 && self.ct <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ct must lie in (0, 1], got {}",
                self.ct
            )));
        }
        if self.tailsize < 2 {
            return Err(Error::InvalidArgument(format!(
                "tailsize must be at least 2, got {}",
                self.tailsize
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtremeVector {
    pub features: FeatureVector,
    pub weibull: WeibullParams,
    pub source_sample_id: String,
}

impl ExtremeVector {
    #[inline]
    fn inclusion(&self, query: &[f32]) -> f64 {
        self.weibull
            .psi_unchecked(euclidean(self.features.as_slice(), query))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvmClassModel {
    pub class_id: ClassId,
    /// In greedy-cover selection order.
    pub extreme_vectors: Vec<ExtremeVector>,
}

impl EvmClassModel {
    /// Max probability of inclusion over this class's extreme vectors.
    pub fn score(&self, query: &[f32]) -> f64 {
        self.extreme_vectors
            .iter()
            .map(|ev| ev.inclusion(query))
            .fold(0.0, f64::max)
    }
}

/// Fits one class against the given negatives and reduces it to extreme vectors.
pub fn fit_class(
    class_id: ClassId,
    positives: &[Observation],
    negatives: &[&FeatureVector],
    params: &EvmHyperParams,
) -> Result<EvmClassModel> {
    params.validate()?;
    let Some(first) = positives.first() else {
        return Err(Error::MissingData(format!("class {class_id} has no positives")));
    };
    let dim = first.features.dim();
    for v in positives
        .iter()
        .map(|p| &p.features)
        .chain(negatives.iter().copied())
    {
        if v.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
    }
    if negatives.len() < 2 {
        return Err(Error::InsufficientNegatives {
            class: class_id,
            available: negatives.len(),
        });
    }
    let tail = params.tailsize.min(negatives.len());

    let mut weibulls = Vec::with_capacity(positives.len());
    let mut margins = vec![0.0f64; negatives.len()];
    for p in positives {
        let x = p.features.as_slice();
        for (m, neg) in margins.iter_mut().zip(negatives) {
            *m = params.dm * euclidean(x, neg.as_slice());
        }
        margins.select_nth_unstable_by(tail - 1, f64::total_cmp);
        let smallest = &mut margins[..tail];
        smallest.sort_unstable_by(f64::total_cmp);
        if smallest[0] <= 0.0 {
            return Err(Error::Degenerate(format!(
                "sample {} of class {class_id} coincides with a negative",
                p.sample_id
            )));
        }
        let fit = fit_mle(smallest).map_err(|e| match e {
            Error::Degenerate(msg) => Error::Degenerate(format!(
                "margins of sample {} in class {class_id}: {msg}",
                p.sample_id
            )),
            other => other,
        })?;
        weibulls.push(fit.params);
    }

    let kept = greedy_cover(positives, &weibulls, params.ct);
    let extreme_vectors = kept
        .into_iter()
        .map(|i| ExtremeVector {
            features: positives[i].features.clone(),
            weibull: weibulls[i],
            source_sample_id: positives[i].sample_id.clone(),
        })
        .collect();
    Ok(EvmClassModel {
        class_id,
        extreme_vectors,
    })
}

/// Greedy set cover: repeatedly keep the candidate covering the most
/// still-uncovered positives (lowest index on ties). Point `i` covers `k`
/// when `psi_i(|x_i - x_k|) >= ct`; every point covers itself.
fn greedy_cover(positives: &[Observation], weibulls: &[WeibullParams], ct: f64) -> Vec<usize> {
    let n = positives.len();
    let covers: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let xi = positives[i].features.as_slice();
            (0..n)
                .filter(|&k| {
                    k == i
                        || weibulls[i]
                            .includes_at(euclidean(xi, positives[k].features.as_slice()), ct)
                })
                .collect()
        })
        .collect();

    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut kept = Vec::new();
    while remaining > 0 {
        let mut best = (usize::MAX, 0usize);
        for (i, cov) in covers.iter().enumerate() {
            let gain = cov.iter().filter(|&&k| !covered[k]).count();
            if gain > best.1 {
                best = (i, gain);
            }
        }
        let (pick, gain) = best;
        assert!(gain > 0, "an uncovered point always covers itself");
        for &k in &covers[pick] {
            covered[k] = true;
        }
        remaining -= gain;
        kept.push(pick);
    }
    for (k, p) in positives.iter().enumerate() {
        let xk = p.features.as_slice();
        assert!(
            kept.iter().any(|&i| i == k
                || weibulls[i].includes_at(euclidean(positives[i].features.as_slice(), xk), ct)),
            "positive {k} left uncovered"
        );
    }
    kept
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvmModel {
    classes: BTreeMap<ClassId, EvmClassModel>,
    dim: usize,
    params: EvmHyperParams,
}

impl EvmModel {
    /// Initial fit: every class is fitted against all other classes' samples.
    pub fn fit(
        class_data: &BTreeMap<ClassId, Vec<Observation>>,
        params: EvmHyperParams,
    ) -> Result<Self> {
        params.validate()?;
        let dim = common_dim(class_data)?
            .ok_or_else(|| Error::MissingData("no classes to fit".into()))?;
        let classes = fit_many(class_data, &params, |class| {
            class_data
                .iter()
                .filter(|(c, _)| **c != class)
                .flat_map(|(_, obs)| obs.iter().map(|o| &o.features))
                .collect()
        })?;
        Ok(EvmModel {
            classes,
            dim,
            params,
        })
    }

    /// Builds a model from already-fitted class models.
    pub fn from_parts(
        dim: usize,
        params: EvmHyperParams,
        class_models: Vec<EvmClassModel>,
    ) -> Result<Self> {
        params.validate()?;
        let mut classes = BTreeMap::new();
        for cm in class_models {
            if cm.extreme_vectors.is_empty() {
                return Err(Error::Format(format!(
                    "class {} has no extreme vectors",
                    cm.class_id
                )));
            }
            if let Some(ev) = cm.extreme_vectors.iter().find(|ev| ev.features.dim() != dim) {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: ev.features.dim(),
                });
            }
            let id = cm.class_id;
            if classes.insert(id, cm).is_some() {
                return Err(Error::ClassCollision(id));
            }
        }
        Ok(EvmModel {
            classes,
            dim,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &EvmHyperParams {
        &self.params
    }

    pub fn classes(&self) -> &BTreeMap<ClassId, EvmClassModel> {
        &self.classes
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.keys().copied()
    }

    pub fn num_extreme_vectors(&self) -> usize {
        self.classes.values().map(|c| c.extreme_vectors.len()).sum()
    }

    /// Fits new classes and returns the enlarged model. Each new class uses as
    /// negatives the other new classes' samples plus the first
    /// `exemplars_per_class` stored extreme vectors of every existing class.
    pub fn append_classes(
        &self,
        new_class_data: &BTreeMap<ClassId, Vec<Observation>>,
    ) -> Result<EvmModel> {
        if let Some(c) = new_class_data.keys().find(|c| self.classes.contains_key(c)) {
            return Err(Error::ClassCollision(*c));
        }
        if let Some(d) = common_dim(new_class_data)? {
            if d != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    actual: d,
                });
            }
        }
        let exemplars: Vec<&FeatureVector> = self
            .classes
            .values()
            .flat_map(|cm| {
                cm.extreme_vectors
                    .iter()
                    .take(self.params.exemplars_per_class)
                    .map(|ev| &ev.features)
            })
            .collect();
        let fitted = fit_many(new_class_data, &self.params, |class| {
            new_class_data
                .iter()
                .filter(|(c, _)| **c != class)
                .flat_map(|(_, obs)| obs.iter().map(|o| &o.features))
                .chain(exemplars.iter().copied())
                .collect()
        })?;
        let mut classes = self.classes.clone();
        classes.extend(fitted);
        Ok(EvmModel {
            classes,
            dim: self.dim,
            params: self.params,
        })
    }

    /// Per-class probability: the max probability of inclusion over that
    /// class's extreme vectors.
    pub fn predict(&self, query: &FeatureVector) -> Result<ClassScores> {
        if query.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let q = query.as_slice();
        Ok(ClassScores::new(
            self.classes
                .iter()
                .map(|(&c, cm)| (c, cm.score(q)))
                .collect(),
        ))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.f64(self.params.dm);
        w.f64(self.params.ct);
        w.len_u32(self.params.tailsize)?;
        w.len_u32(self.params.exemplars_per_class)?;
        w.len_u32(self.dim)?;
        w.len_u32(self.classes.len())?;
        for (&class, cm) in &self.classes {
            w.u32(class);
            w.len_u32(cm.extreme_vectors.len())?;
            for ev in &cm.extreme_vectors {
                w.string(&ev.source_sample_id)?;
                for &v in ev.features.as_slice() {
                    w.f32(v);
                }
                w.f64(ev.weibull.shape());
                w.f64(ev.weibull.scale());
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.header(MODEL_MAGIC, MODEL_VERSION)?;
        let params = EvmHyperParams {
            dm: r.f64()?,
            ct: r.f64()?,
            tailsize: r.u32()? as usize,
            exemplars_per_class: r.u32()? as usize,
        };
        params
            .validate()
            .map_err(|e| Error::Format(format!("corrupt hyperparameters: {e}")))?;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("model declares dim 0".into()));
        }
        let n_classes = r.u32()? as usize;
        let mut class_models = Vec::new();
        let mut previous: Option<ClassId> = None;
        for _ in 0..n_classes {
            let class_id = r.u32()?;
            if previous.is_some_and(|p| p >= class_id) {
                return Err(Error::Format("class blocks out of order".into()));
            }
            previous = Some(class_id);
            let n_ev = r.u32()? as usize;
            // Each extreme vector needs at least its fixed-size fields.
            if n_ev.saturating_mul(4 + dim * 4 + 16) > r.remaining() {
                return Err(Error::Format(format!(
                    "truncated input: class {class_id} declares {n_ev} extreme vectors"
                )));
            }
            let mut evs = Vec::with_capacity(n_ev);
            for _ in 0..n_ev {
                let source_sample_id = r.string()?;
                let mut values = Vec::with_capacity(dim);
                for _ in 0..dim {
                    values.push(r.f32()?);
                }
                let features = FeatureVector::new(values)
                    .map_err(|e| Error::Format(format!("corrupt extreme vector: {e}")))?;
                let weibull = WeibullParams::new(r.f64()?, r.f64()?)
                    .map_err(|e| Error::Format(format!("corrupt Weibull block: {e}")))?;
                evs.push(ExtremeVector {
                    features,
                    weibull,
                    source_sample_id,
                });
            }
            class_models.push(EvmClassModel {
                class_id,
                extreme_vectors: evs,
            });
        }
        r.finish()?;
        EvmModel::from_parts(dim, params, class_models).map_err(|e| match e {
            Error::Format(_) => e,
            other => Error::Format(other.to_string()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn common_dim(class_data: &BTreeMap<ClassId, Vec<Observation>>) -> Result<Option<usize>> {
    let mut dim = None;
    for (class, obs) in class_data {
        if obs.is_empty() {
            return Err(Error::MissingData(format!("class {class} has no samples")));
        }
        for o in obs {
            match dim {
                None => dim = Some(o.features.dim()),
                Some(d) if d != o.features.dim() => {
                    return Err(Error::DimMismatch {
                        expected: d,
                        actual: o.features.dim(),
                    })
                }
                _ => {}
            }
        }
    }
    Ok(dim)
}

/// Fits classes independently in parallel; output is keyed by class id, so
/// it does not depend on completion order.
fn fit_many<'a, F>(
    class_data: &'a BTreeMap<ClassId, Vec<Observation>>,
    params: &EvmHyperParams,
    negatives_for: F,
) -> Result<BTreeMap<ClassId, EvmClassModel>>
where
    F: Fn(ClassId) -> Vec<&'a FeatureVector> + Sync,
{
    let fitted: Vec<Result<EvmClassModel>> = class_data
        .par_iter()
        .map(|(&class, positives)| fit_class(class, positives, &negatives_for(class), params))
        .collect();
    fitted
        .into_iter()
        .map(|r| r.map(|cm| (cm.class_id, cm)))
        .collect()
}
