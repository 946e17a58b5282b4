use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainingError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub vector: Vec<f64>,
    pub label: usize,
}

/// Accuracy of a K-nearest-neighbour vote under Euclidean distance.
///
/// Neighbours are ranked by distance, then by train index. A tied vote
/// goes to the class with the smallest summed distance among its votes,
/// then to the smallest class index.
pub fn knn_evaluate(train: &[Embedded], test: &[Embedded], k: usize) -> Result<f64, TrainingError> {
    if train.is_empty() {
        return Err(TrainingError::Empty("KNN train set"));
    }
    if test.is_empty() {
        return Err(TrainingError::Empty("KNN test set"));
    }
    if k == 0 || k > train.len() {
        return Err(TrainingError::Config(format!(
            "K = {k} must lie in 1..={}",
            train.len()
        )));
    }
    let dim = train[0].vector.len();
    if train.iter().chain(test).any(|e| e.vector.len() != dim) {
        return Err(TrainingError::Config("embeddings differ in width".into()));
    }
    let correct: usize = test
        .par_iter()
        .map(|q| usize::from(predict(train, &q.vector, k) == q.label))
        .sum();
    Ok(correct as f64 / test.len() as f64)
}

fn predict(train: &[Embedded], query: &[f64], k: usize) -> usize {
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let d2: f64 = e.vector.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // class -> (votes, summed distance)
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(d, i) in &dist[..k] {
        let entry = tally.entry(train[i].label).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += d;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (&class, &(votes, sum)) in &tally {
        let better = match best {
            None => true,
            Some((_, bv, bs)) => votes > bv || (votes == bv && sum < bs),
        };
        if better {
            best = Some((class, votes, sum));
        }
    }
    best.expect("k ≥ 1").0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64], label: usize) -> Embedded {
        Embedded {
            vector: v.to_vec(),
            label,
        }
    }

    #[test]
    fn exact_match_with_k1() {
        let train = vec![e(&[0.0, 0.0], 0), e(&[1.0, 1.0], 1), e(&[5.0, 5.0], 2)];
        assert_eq!(knn_evaluate(&train, &[e(&[1.0, 1.0], 1)], 1).unwrap(), 1.0);
    }

    #[test]
    fn two_clusters_k3() {
        let train = vec![e(&[0.0], 0), e(&[0.1], 0), e(&[10.0], 1), e(&[10.1], 1)];
        let test = vec![e(&[0.05], 0), e(&[9.9], 1)];
        // Brute force: for 0.05 the three nearest are 0.0, 0.1, 10.0 → two votes for 0.
        assert_eq!(knn_evaluate(&train, &test, 3).unwrap(), 1.0);
    }

    #[test]
    fn single_label_train_set() {
        let train = vec![e(&[0.0], 3), e(&[1.0], 3), e(&[2.0], 3)];
        let test = vec![e(&[0.0], 3), e(&[1.0], 0), e(&[7.0], 3), e(&[0.5], 1)];
        for k in 1..=3 {
            assert_eq!(knn_evaluate(&train, &test, k).unwrap(), 0.5);
        }
    }

    #[test]
    fn tie_breaks() {
        // K=2, one vote each: class 1 is closer in total.
        let train = vec![e(&[-2.0], 0), e(&[1.0], 1)];
        assert_eq!(predict(&train, &[0.0], 2), 1);
        // Equal votes and equal summed distance: smallest class wins.
        let train = vec![e(&[-1.0], 5), e(&[1.0], 2)];
        assert_eq!(predict(&train, &[0.0], 2), 2);
    }

    #[test]
    fn rejects_bad_k_and_empty_sets() {
        let train = vec![e(&[0.0], 0)];
        assert!(knn_evaluate(&train, &train, 0).is_err());
        assert!(knn_evaluate(&train, &train, 2).is_err());
        assert!(knn_evaluate(&[], &train, 1).is_err());
        assert!(knn_evaluate(&train, &[], 1).is_err());
    }
}
