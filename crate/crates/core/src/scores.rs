use crate::features::ClassId;

/// Per-class scores ordered by ascending class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores(Vec<(ClassId, f64)>);

impl ClassScores {
    /// Sorts by class id; callers guarantee ids are unique.
    pub fn new(mut entries: Vec<(ClassId, f64)>) -> Self {
        entries.sort_by_key(|&(c, _)| c);
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        ClassScores(entries)
    }

    pub fn entries(&self) -> &[(ClassId, f64)] {
        &self.0
    }

    pub fn get(&self, class: ClassId) -> Option<f64> {
        self.0
            .binary_search_by_key(&class, |&(c, _)| c)
            .ok()
            .map(|i| self.0[i].1)
    }

    /// Highest-scoring class; ties go to the lowest class id.
    pub fn argmax(&self) -> Option<(ClassId, f64)> {
        let mut best: Option<(ClassId, f64)> = None;
        for &(c, s) in &self.0 {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
