use std::collections::BTreeMap;

use super::{EvalError, Result};

/// Plain k-nearest-neighbour classifier over normalized RSS vectors.
#[derive(Debug, Clone)]
pub struct KnnBaseline {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    k: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KnnBaseline {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(EvalError::Invalid(format!(
                "{} feature vectors but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if k == 0 || k > features.len() {
            return Err(EvalError::Invalid(format!("k = {k} must lie in [1, {}]", features.len())));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(EvalError::Invalid("feature vectors differ in length".into()));
            }
        }
        Ok(Self { features, labels, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predict(&self, query: &[f64]) -> usize {
        self.vote(query, None)
    }

    /// Leave-one-out prediction for training sample `index`.
    pub fn predict_excluding(&self, index: usize) -> Result<usize> {
        if self.k >= self.len() {
            return Err(EvalError::Invalid(format!("leave-one-out needs k < {}", self.len())));
        }
        Ok(self.vote(&self.features[index], Some(index)))
    }

    /// Majority cell among the k nearest; ties go to the cell whose
    /// neighbours are closer on average, then to the lowest cell index.
    /// Equidistant neighbours are taken in training order.
    fn vote(&self, query: &[f64], skip: Option<usize>) -> usize {
        let mut dists: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, f)| (sq_dist(f, query), i))
            .collect();
        let k = self.k;
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, by_dist);
            dists.truncate(k);
        }
        // fixed summation order keeps mean-distance ties reproducible
        dists.sort_by(by_dist);
        let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(d2, i) in &dists {
            let e = tally.entry(self.labels[i]).or_default();
            e.0 += 1;
            e.1 += d2.sqrt();
        }
        tally
            .into_iter()
            .min_by(|(ca, (na, sa)), (cb, (nb, sb))| {
                nb.cmp(na)
                    .then((sa / *na as f64).total_cmp(&(sb / *nb as f64)))
                    .then(ca.cmp(cb))
            })
            .map(|(cell, _)| cell)
            .expect("k >= 1")
    }
}

/// Fraction of training samples whose leave-one-out prediction is correct.
pub fn leave_one_out_accuracy(knn: &KnnBaseline) -> Result<f64> {
    let mut correct = 0;
    for i in 0..knn.len() {
        correct += usize::from(knn.predict_excluding(i)? == knn.labels[i]);
    }
    Ok(correct as f64 / knn.len() as f64)
}
