use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion matrix (rows = truth, columns = prediction) with OA, AA and
/// Cohen's kappa. `per_class[k]` is the recall of class `k`, or `None` when
/// the class has no support (such classes are left out of AA).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix must be square and nonempty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("confusion matrix is empty"));
        }
        let n = total as f64;
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|i| (rows[i] > 0).then(|| confusion[i][i] as f64 / rows[i] as f64))
            .collect();
        let supported: Vec<f64> = per_class.iter().flatten().copied().collect();
        let aa = supported.iter().sum::<f64>() / supported.len() as f64;
        let po = trace as f64 / n;
        let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
        // pe = 1 only when truth and prediction are the same single class
        let kappa = if pe >= 1.0 { 1.0 } else { (po - pe) / (1.0 - pe) };
        Ok(Self {
            oa: po,
            aa,
            kappa,
            confusion,
            per_class,
        })
    }

    /// Classes without support.
    pub fn zero_support(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.is_none().then_some(i))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Metrics of `predictions` against `truths` over `k` classes.
pub fn metrics(predictions: &[usize], truths: &[usize], k: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut c = vec![vec![0u64; k]; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= k || t >= k {
            return Err(Error::invalid(format!("label {} outside 0..{k}", p.max(t))));
        }
        c[t][p] += 1;
    }
    MetricsReport::from_confusion(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_agreement() {
        let r = MetricsReport::from_confusion(vec![vec![50, 0], vec![0, 50]]).unwrap();
        assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn symmetric_errors() {
        let r = MetricsReport::from_confusion(vec![vec![40, 10], vec![10, 40]]).unwrap();
        assert_eq!(r.oa, 0.8);
        assert_eq!(r.aa, 0.8);
        assert!((r.kappa - 0.6).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_has_zero_kappa() {
        let truths: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let r = metrics(&vec![0; 100], &truths, 2).unwrap();
        assert_eq!(r.oa, 0.5);
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn zero_support_is_reported_and_excluded() {
        let r = metrics(&[0, 1, 1], &[0, 1, 0], 3).unwrap();
        assert_eq!(r.zero_support(), vec![2]);
        assert_eq!(r.aa, 0.75);
    }

    #[test]
    fn errors() {
        assert!(metrics(&[], &[], 2).is_err());
        assert!(metrics(&[3], &[0], 2).is_err());
    }
}
