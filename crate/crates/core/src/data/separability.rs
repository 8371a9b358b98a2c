//! Empirical linear-separability check on flattened inputs: a perceptron and,
//! independently, full-batch logistic regression, both with a bias term.

use serde::Serialize;

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparabilityReport {
    /// Zero training errors reached by either learner.
    pub separable: bool,
    pub best_train_accuracy: f64,
    pub perceptron_accuracy: f64,
    pub logistic_accuracy: f64,
    pub majority_accuracy: f64,
}

fn features(dataset: &Dataset) -> Vec<Vec<f64>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let mut x = s.patches.clone();
            x.push(1.0);
            x
        })
        .collect()
}

fn accuracy(w: &[f64], xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let correct = xs.iter().zip(ys).filter(|(x, y)| *y * dot(w, x) > 0.0).count();
    correct as f64 / xs.len() as f64
}

pub fn check_linear_separability(dataset: &Dataset, max_epochs: usize) -> Result<SeparabilityReport> {
    if !dataset.is_binary() {
        return Err(Error::invalid("separability check needs a binary dataset"));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let xs = features(dataset);
    let ys: Vec<f64> = dataset.samples.iter().map(|s| s.label as f64).collect();
    let dim = xs[0].len();
    let positives = ys.iter().filter(|&&y| y > 0.0).count();
    let majority = positives.max(ys.len() - positives) as f64 / ys.len() as f64;

    // perceptron, samples in dataset order
    let mut w = vec![0.0; dim];
    let mut perceptron_best = 0.0f64;
    for _ in 0..max_epochs {
        let mut mistakes = 0;
        for (x, &y) in xs.iter().zip(&ys) {
            if y * dot(&w, x) <= 0.0 {
                axpy(y, x, &mut w);
                mistakes += 1;
            }
        }
        perceptron_best = perceptron_best.max(accuracy(&w, &xs, &ys));
        if mistakes == 0 {
            break;
        }
    }

    // logistic regression; 4 / max||x||^2 bounds the step by the curvature
    let max_sq = xs.iter().map(|x| dot(x, x)).fold(0.0, f64::max);
    let rate = 4.0 / max_sq.max(1e-12);
    let mut w = vec![0.0; dim];
    let mut logistic_best = 0.0f64;
    let inv_n = 1.0 / xs.len() as f64;
    for _ in 0..max_epochs {
        let mut grad = vec![0.0; dim];
        for (x, &y) in xs.iter().zip(&ys) {
            let margin = y * dot(&w, x);
            let sig = 1.0 / (1.0 + margin.exp());
            axpy(-y * sig * inv_n, x, &mut grad);
        }
        axpy(-rate, &grad, &mut w);
        logistic_best = logistic_best.max(accuracy(&w, &xs, &ys));
        if logistic_best >= 1.0 {
            break;
        }
    }

    let best = majority.max(perceptron_best).max(logistic_best);
    Ok(SeparabilityReport {
        separable: perceptron_best >= 1.0 || logistic_best >= 1.0,
        best_train_accuracy: best,
        perceptron_accuracy: perceptron_best,
        logistic_accuracy: logistic_best,
        majority_accuracy: majority,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Placement, SyntheticConfig};
    use crate::rng::Rng;

    fn data(l_star: usize, n: usize, d: usize, count: usize, seed: u64) -> Dataset {
        let cfg = SyntheticConfig {
            d,
            n,
            c: 2,
            p: 4,
            delta_d: -0.5,
            delta_r: 0.1,
            l_star,
            placement: Placement::Uniform,
        };
        let lib = cfg.library(&Rng::new(seed)).unwrap();
        cfg.dataset(&lib, count, &mut Rng::new(seed + 1)).unwrap()
    }

    #[test]
    fn no_training_gives_majority() {
        let mut ds = data(1, 4, 8, 11, 1);
        ds.samples.truncate(9);
        let report = check_linear_separability(&ds, 0).unwrap();
        assert!(!report.separable);
        let pos = ds.samples.iter().filter(|s| s.label > 0).count();
        let expect = pos.max(9 - pos) as f64 / 9.0;
        assert_eq!(report.best_train_accuracy, expect);
    }

    #[test]
    fn clean_data_is_separable() {
        let ds = data(1, 8, 10, 400, 2);
        let report = check_linear_separability(&ds, 200).unwrap();
        assert!(report.separable, "{report:?}");
        assert_eq!(report.best_train_accuracy, 1.0);
    }

    #[test]
    fn confusable_half_is_not_separable() {
        let ds = data(4, 8, 10, 1500, 3);
        let report = check_linear_separability(&ds, 200).unwrap();
        assert!(!report.separable, "{report:?}");
        assert!(report.best_train_accuracy < 0.99);
    }
}
