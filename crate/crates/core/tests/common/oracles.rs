//! Metric and loss values checked against independent references.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use can_hmer::metrics::{counting_metrics, edit_distance, expression_metrics};
use can_hmer::objective::{cls_loss, counting_loss};
use can_hmer::vocab::TokenSequence;

use super::invariants::Check;

/// Textbook Wagner-Fischer over the whole matrix, on unframed sequences.
pub fn reference_distance(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn edit_distance_reference(cases: u32) -> Check {
    let strategy = (proptest::collection::vec(2usize..9, 0..25), proptest::collection::vec(2usize..9, 0..25), any::<bool>());
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
        .run(&strategy, |(a, b, framed)| {
            let want = reference_distance(&a, &b);
            let frame = |v: &[usize]| TokenSequence::from_interior(v).unwrap().ids().to_vec();
            let got = if framed { edit_distance(&frame(&a), &b) } else { edit_distance(&a, &frame(&b)) };
            if got != want || edit_distance(&a, &b) != want {
                return Err(TestCaseError::fail(format!("{got} vs reference {want}")));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn counting_metric_hand_cases() -> Check {
    let (mae, mse) = counting_metrics(&[(vec![1.0, 2.0], vec![2.0, 2.0])]).map_err(|e| e.to_string())?;
    if mae != 0.5 || (mse - 0.5f64.sqrt()).abs() > 1e-12 {
        return Err(format!("one wrong class of two: MAE {mae}, MSE {mse}"));
    }
    // per image: |err| = (1, 1, 1, 1) and (2, 0, 0, 0)
    let (mae, mse) = counting_metrics(&[
        (vec![1.0, 0.0, 3.0, 1.0], vec![0.0, 1.0, 2.0, 2.0]),
        (vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]),
    ])
    .map_err(|e| e.to_string())?;
    if (mae - 0.75).abs() > 1e-12 || (mse - 1.0).abs() > 1e-12 {
        return Err(format!("two images: MAE {mae} (want 0.75), MSE {mse} (want 1.0)"));
    }
    let rates = expression_metrics(&[(vec![3usize, 4], vec![3usize, 4]), (vec![3, 5], vec![3, 4]), (vec![5, 5, 5], vec![3, 4])])
        .map_err(|e| e.to_string())?;
    let third = 100.0 / 3.0;
    if (rates.0 - third).abs() > 1e-9 || (rates.1 - 2.0 * third).abs() > 1e-9 || (rates.2 - 2.0 * third).abs() > 1e-9 {
        return Err(format!("rates {rates:?}"));
    }
    if counting_loss(&[0.5], &[0.0]).map_err(|e| e.to_string())? != 0.125 {
        return Err("smooth-L1 of 0.5 is not 0.125".into());
    }
    Ok(())
}

pub fn uniform_cross_entropy() -> Check {
    for c in [3usize, 5, 37, 111] {
        let seq = TokenSequence::from_interior(&[c - 1; 6]).unwrap();
        let rows = vec![vec![1.0 / c as f64; c]; seq.len() - 1];
        let got = cls_loss(&rows, &seq).map_err(|e| e.to_string())?;
        if (got - (c as f64).ln()).abs() > 1e-9 {
            return Err(format!("uniform over {c} classes gives {got}"));
        }
    }
    Ok(())
}
