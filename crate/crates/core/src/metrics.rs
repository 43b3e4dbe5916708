//! Counting error metrics: MAE, RMSE, NAE and SRE.
//!
//! Predictions are real-valued density sums and are never rounded. Pairs whose
//! ground truth is zero cannot be normalized, so NAE and SRE skip them and the
//! report records how many were skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPair {
    pub ground_truth: f64,
    pub predicted: f64,
}

impl CountPair {
    pub fn new(ground_truth: f64, predicted: f64) -> Self {
        CountPair {
            ground_truth,
            predicted,
        }
    }

    fn abs_error(&self) -> f64 {
        (self.ground_truth - self.predicted).abs()
    }
}

impl From<(f64, f64)> for CountPair {
    fn from((ground_truth, predicted): (f64, f64)) -> Self {
        CountPair::new(ground_truth, predicted)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub nae: f64,
    pub sre: f64,
    pub n_images: usize,
    pub n_excluded_zero_gt: usize,
}

impl MetricsReport {
    /// Flat `name=value` record with four fractional digits per metric.
    pub fn to_record(&self) -> String {
        format!(
            "mae={:.4} rmse={:.4} nae={:.4} sre={:.4} n_images={} n_excluded_zero_gt={}",
            self.mae, self.rmse, self.nae, self.sre, self.n_images, self.n_excluded_zero_gt
        )
    }
}

pub fn mae(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(pairs.iter().map(CountPair::abs_error).sum::<f64>() / pairs.len() as f64)
}

pub fn rmse(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mse = pairs.iter().map(|p| p.abs_error().powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

fn retained(pairs: &[CountPair]) -> impl Iterator<Item = &CountPair> {
    pairs.iter().filter(|p| p.ground_truth > 0.0)
}

pub fn nae(pairs: &[CountPair]) -> Result<f64> {
    let (sum, n) = retained(pairs).fold((0.0, 0usize), |(s, n), p| {
        (s + p.abs_error() / p.ground_truth, n + 1)
    });
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(sum / n as f64)
}

pub fn sre(pairs: &[CountPair]) -> Result<f64> {
    let (sum, n) = retained(pairs).fold((0.0, 0usize), |(s, n), p| {
        (s + p.abs_error().powi(2) / p.ground_truth, n + 1)
    });
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok((sum / n as f64).sqrt())
}

/// All four metrics from a single pass over `pairs`.
pub fn evaluate(pairs: &[CountPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut rel_sq_sum = 0.0;
    let mut kept = 0usize;
    for p in pairs {
        let e = p.abs_error();
        abs_sum += e;
        sq_sum += e * e;
        if p.ground_truth > 0.0 {
            rel_sum += e / p.ground_truth;
            rel_sq_sum += e * e / p.ground_truth;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let n = pairs.len() as f64;
    Ok(MetricsReport {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        nae: rel_sum / kept as f64,
        sre: (rel_sq_sum / kept as f64).sqrt(),
        n_images: pairs.len(),
        n_excluded_zero_gt: pairs.len() - kept,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("spearman inputs", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::EmptyEvaluation);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    Ok(pearson(&ra, &rb))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(f64, f64)]) -> Vec<CountPair> {
        v.iter().copied().map(CountPair::from).collect()
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&pairs(&[(5.0, 5.0)])).unwrap(), 0.0);
        assert_eq!(mae(&pairs(&[(2.0, 3.0), (4.0, 8.0)])).unwrap(), 2.5);
        assert_eq!(mae(&pairs(&[(10.0, 7.0)])).unwrap(), 3.0);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&pairs(&[(5.0, 5.0)])).unwrap(), 0.0);
        let r = rmse(&pairs(&[(2.0, 3.0), (4.0, 8.0)])).unwrap();
        assert!((r - 8.5f64.sqrt()).abs() < 1e-12);
        assert!((r - 2.91548).abs() < 1e-5);
        assert_eq!(rmse(&pairs(&[(0.0, 2.0)])).unwrap(), 2.0);
    }

    #[test]
    fn nae_examples() {
        assert_eq!(nae(&pairs(&[(5.0, 5.0)])).unwrap(), 0.0);
        assert_eq!(nae(&pairs(&[(2.0, 3.0), (4.0, 8.0)])).unwrap(), 0.75);
        let p = pairs(&[(0.0, 3.0), (2.0, 3.0)]);
        assert_eq!(nae(&p).unwrap(), 0.5);
        assert_eq!(evaluate(&p).unwrap().n_excluded_zero_gt, 1);
    }

    #[test]
    fn sre_examples() {
        assert_eq!(sre(&pairs(&[(5.0, 5.0)])).unwrap(), 0.0);
        assert_eq!(sre(&pairs(&[(2.0, 3.0), (4.0, 8.0)])).unwrap(), 1.5);
        assert_eq!(sre(&pairs(&[(4.0, 2.0)])).unwrap(), 1.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(mae(&[]), Err(Error::EmptyEvaluation)));
        assert!(matches!(rmse(&[]), Err(Error::EmptyEvaluation)));
        assert!(matches!(evaluate(&[]), Err(Error::EmptyEvaluation)));
        let zeros = pairs(&[(0.0, 1.0), (0.0, 0.0)]);
        assert!(matches!(nae(&zeros), Err(Error::EmptyEvaluation)));
        assert!(matches!(sre(&zeros), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn report_record_has_four_decimals() {
        let r = evaluate(&pairs(&[(2.0, 3.0), (4.0, 8.0)])).unwrap();
        assert_eq!(
            r.to_record(),
            "mae=2.5000 rmse=2.9155 nae=0.7500 sre=1.5000 n_images=2 n_excluded_zero_gt=0"
        );
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![1.5, 0.0, 1.5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair_list() -> impl Strategy<Value = Vec<CountPair>> {
            prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..50)
                .prop_map(|v| v.into_iter().map(CountPair::from).collect())
        }

        proptest! {
            #[test]
            fn rmse_dominates_mae(p in pair_list()) {
                prop_assert!(rmse(&p).unwrap() + 1e-12 >= mae(&p).unwrap());
            }

            #[test]
            fn permutation_invariant(p in pair_list(), rot in 0usize..50) {
                let mut q = p.clone();
                q.reverse();
                let k = rot % q.len();
                q.rotate_left(k);
                let a = evaluate(&p);
                let b = evaluate(&q);
                if let (Ok(a), Ok(b)) = (a, b) {
                    prop_assert!((a.mae - b.mae).abs() <= 1e-9 * a.mae.max(1.0));
                    prop_assert!((a.rmse - b.rmse).abs() <= 1e-9 * a.rmse.max(1.0));
                    prop_assert!((a.nae - b.nae).abs() <= 1e-9 * a.nae.max(1.0));
                    prop_assert!((a.sre - b.sre).abs() <= 1e-9 * a.sre.max(1.0));
                }
            }

            #[test]
            fn zero_iff_exact(gts in prop::collection::vec(1.0f64..500.0, 1..20)) {
                let exact: Vec<CountPair> = gts.iter().map(|&g| CountPair::new(g, g)).collect();
                let r = evaluate(&exact).unwrap();
                prop_assert_eq!((r.mae, r.rmse, r.nae, r.sre), (0.0, 0.0, 0.0, 0.0));
                let mut off = exact.clone();
                off[0].predicted += 0.5;
                let r = evaluate(&off).unwrap();
                prop_assert!(r.mae > 0.0 && r.rmse > 0.0 && r.nae > 0.0 && r.sre > 0.0);
            }
        }
    }
}
