//! Order-1 truncated power basis for the age curves.
//!
//! `f(a) = b0 + b1 * a + sum_k u_k (a - knot_k)_+`, where the knot
//! coefficients `u_k` are treated as random effects so their variance sets
//! the amount of smoothing.

use serde::{Deserialize, Serialize};

use crate::model::Sex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    /// `None` for a basis shared by both sexes.
    pub sex: Option<Sex>,
    pub knots: Vec<f64>,
}

impl SplineBasis {
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// `(a - knot_k)_+` for every knot; exactly zero when `a == knot_k`.
    pub fn eval(&self, age: f64) -> Vec<f64> {
        eval_truncated(age, &self.knots)
    }

    /// Value of the curve with fixed part `(b0, b1)` and knot coefficients `u`.
    pub fn curve(&self, b0: f64, b1: f64, u: &[f64], age: f64) -> f64 {
        debug_assert_eq!(u.len(), self.knots.len());
        b0 + b1 * age
            + self
                .knots
                .iter()
                .zip(u)
                .filter(|(k, _)| age > **k)
                .map(|(k, uk)| uk * (age - k))
                .sum::<f64>()
    }
}

pub fn eval_truncated(age: f64, knots: &[f64]) -> Vec<f64> {
    knots
        .iter()
        .map(|&k| if age - k > 0.0 { age - k } else { 0.0 })
        .collect()
}

/// Type-7 empirical quantile (linear interpolation between order statistics)
/// of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Knot count `min(floor(#distinct / 4), max_knots)` placed at the
/// `(k + 1) / (K + 2)` quantiles of the distinct ages, `k = 1..=K`.
///
/// `ages` may be unsorted and contain repeats. Coincident knots are
/// removed, which can leave fewer than `K`. Fewer than two distinct ages
/// give an empty basis (a purely linear curve).
pub fn select_knots(ages: &[f64], max_knots: usize, sex: Option<Sex>) -> SplineBasis {
    let mut distinct: Vec<f64> = ages.iter().copied().filter(|a| a.is_finite()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        log::warn!(
            "only {} distinct ages for {:?}; age curve reduces to a straight line",
            distinct.len(),
            sex
        );
        return SplineBasis {
            sex,
            knots: Vec::new(),
        };
    }
    let count = (distinct.len() / 4).min(max_knots);
    let mut knots: Vec<f64> = (1..=count)
        .map(|k| quantile_sorted(&distinct, (k + 1) as f64 / (count + 2) as f64))
        .collect();
    knots.dedup();
    SplineBasis { sex, knots }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_ages_give_25_knots() {
        let ages: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = select_knots(&ages, 35, Some(Sex::M));
        assert_eq!(b.len(), 25);
        // p = 2/27, h = 99 * 2 / 27 = 7.333.., between 8 and 9
        assert!((b.knots[0] - (8.0 + 1.0 / 3.0)).abs() < 1e-12);
        // p = 26/27, h = 95.333..
        assert!((b.knots[24] - (96.0 + 1.0 / 3.0)).abs() < 1e-12);
        assert!(b.knots.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn four_ages_give_one_knot() {
        let b = select_knots(&[4.0, 1.0, 3.0, 2.0, 2.0], 35, None);
        assert_eq!(b.knots, vec![3.0]);
    }

    #[test]
    fn cap_binds_at_150_ages() {
        let ages: Vec<f64> = (0..150).map(|i| 1.0 + i as f64 * 0.5).collect();
        assert_eq!(select_knots(&ages, 35, None).len(), 35);
    }

    #[test]
    fn single_age_gives_linear_fit() {
        assert!(select_knots(&[5.0, 5.0], 35, None).is_empty());
    }

    #[test]
    fn truncated_examples() {
        assert_eq!(eval_truncated(5.0, &[3.0]), vec![2.0]);
        assert_eq!(eval_truncated(3.0, &[3.0]), vec![0.0]);
        assert_eq!(eval_truncated(2.0, &[3.0, 4.0]), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn basis_nonnegative_and_nonincreasing(
            age in 0.0f64..110.0,
            mut knots in prop::collection::vec(0.0f64..110.0, 1..20),
        ) {
            knots.sort_by(f64::total_cmp);
            let v = eval_truncated(age, &knots);
            prop_assert!(v.iter().all(|x| *x >= 0.0));
            prop_assert!(v.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn curve_is_continuous_at_knots(
            b0 in -10.0f64..10.0,
            b1 in -5.0f64..5.0,
            u in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let basis = SplineBasis { sex: None, knots: vec![10.0, 30.0, 60.0] };
            let bound = 2e-9 * (b1.abs() + u.iter().map(|x| x.abs()).sum::<f64>()) + 1e-12;
            for k in &basis.knots {
                let lo = basis.curve(b0, b1, &u, k - 1e-9);
                let hi = basis.curve(b0, b1, &u, k + 1e-9);
                prop_assert!((hi - lo).abs() <= bound);
            }
        }

        #[test]
        fn knots_inside_age_range(ages in prop::collection::vec(1.0f64..100.0, 2..300)) {
            let b = select_knots(&ages, 35, None);
            let lo = ages.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(b.knots.windows(2).all(|w| w[0] < w[1]));
            for k in &b.knots {
                prop_assert!(*k > lo && *k < hi);
            }
        }
    }
}
