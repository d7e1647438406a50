//! Precision@k and MAP@k over ranked click labels.
//!
//! MAP@k here divides the summed precisions by the cutoff `k`, not by the
//! number of clicked items:
//!
//! ```text
//! MAP@k = 1/|R| Σ_r ( Σ_{i=1..k} Precision@i(r) · click_r(i) ) / k
//! ```
//!
//! [`MapVariant::Conventional`] gives the usual average precision (divide by
//! `min(k, clicks)`) for comparison with other toolkits. Positions beyond the
//! end of a short list count as unclicked.

use num_rational::Ratio;
use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{PrmError, Result};

/// Number type a metric can be accumulated in: floats or exact rationals.
pub trait MetricValue: Num + Clone + PartialOrd {
    fn count(n: usize) -> Self;
}

impl MetricValue for f64 {
    fn count(n: usize) -> Self {
        n as f64
    }
}

impl MetricValue for f32 {
    fn count(n: usize) -> Self {
        n as f32
    }
}

impl MetricValue for Ratio<i64> {
    fn count(n: usize) -> Self {
        Ratio::from_integer(n as i64)
    }
}

impl MetricValue for Ratio<i128> {
    fn count(n: usize) -> Self {
        Ratio::from_integer(n as i128)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapVariant {
    /// Divide by the cutoff `k`.
    #[default]
    Cutoff,
    /// Divide by `min(k, number of clicks)`; lists without clicks score 0.
    Conventional,
}

#[inline]
fn clicked(labels: &[u8], pos: usize) -> bool {
    labels.get(pos).is_some_and(|&l| l > 0)
}

fn check<L: AsRef<[u8]>>(lists: &[L], k: usize) -> Result<()> {
    if lists.is_empty() {
        return Err(PrmError::UndefinedMetric("empty request set".into()));
    }
    if k == 0 {
        return Err(PrmError::Parameter("k must be at least 1".into()));
    }
    Ok(())
}

/// Precision@k of one ranked list.
pub fn list_precision_at_k<T: MetricValue>(labels: &[u8], k: usize) -> T {
    let hits = (0..k).filter(|&i| clicked(labels, i)).count();
    T::count(hits) / T::count(k)
}

/// Average precision of one ranked list cut off at `k`.
pub fn list_average_precision<T: MetricValue>(labels: &[u8], k: usize, variant: MapVariant) -> T {
    let mut hits = 0usize;
    let mut acc = T::zero();
    for i in 0..k {
        if clicked(labels, i) {
            hits += 1;
            acc = acc + T::count(hits) / T::count(i + 1);
        }
    }
    let denom = match variant {
        MapVariant::Cutoff => k,
        MapVariant::Conventional => {
            let total = labels.iter().filter(|&&l| l > 0).count().min(k);
            if total == 0 {
                return T::zero();
            }
            total
        }
    };
    acc / T::count(denom)
}

/// Mean Precision@k over requests.
pub fn precision_at_k<T: MetricValue, L: AsRef<[u8]>>(lists: &[L], k: usize) -> Result<T> {
    check(lists, k)?;
    let total = lists
        .iter()
        .fold(T::zero(), |acc, l| acc + list_precision_at_k::<T>(l.as_ref(), k));
    Ok(total / T::count(lists.len()))
}

/// Mean MAP@k over requests (cutoff variant).
pub fn map_at_k<T: MetricValue, L: AsRef<[u8]>>(lists: &[L], k: usize) -> Result<T> {
    map_at_k_variant(lists, k, MapVariant::Cutoff)
}

pub fn map_at_k_variant<T: MetricValue, L: AsRef<[u8]>>(
    lists: &[L],
    k: usize,
    variant: MapVariant,
) -> Result<T> {
    check(lists, k)?;
    let total = lists.iter().fold(T::zero(), |acc, l| {
        acc + list_average_precision::<T>(l.as_ref(), k, variant)
    });
    Ok(total / T::count(lists.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn precision_counts_over_k() {
        let lists = [vec![1u8, 0, 1, 0, 0]];
        assert_eq!(precision_at_k::<f64, _>(&lists, 5).unwrap(), 0.4);
        let zeros = [vec![0u8; 7]];
        for k in 1..10 {
            assert_eq!(precision_at_k::<f64, _>(&zeros, k).unwrap(), 0.0);
            assert_eq!(map_at_k::<f64, _>(&zeros, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn map_hand_check_is_five_ninths() {
        let lists = [vec![1u8, 0, 1]];
        let exact: Ratio<i64> = map_at_k(&lists, 3).unwrap();
        assert_eq!(exact, Ratio::new(5, 9));
        let float: f64 = map_at_k(&lists, 3).unwrap();
        assert_eq!(float, (1.0 + 2.0 / 3.0) / 3.0);
        assert!((float - 0.5556).abs() < 1e-4);
    }

    #[test]
    fn perfect_top_one() {
        let lists = [vec![1u8, 0, 0]];
        assert_eq!(map_at_k::<f64, _>(&lists, 1).unwrap(), 1.0);
    }

    #[test]
    fn conventional_variant_divides_by_clicks() {
        let lists = [vec![1u8, 0, 1]];
        let v: Ratio<i64> = map_at_k_variant(&lists, 3, MapVariant::Conventional).unwrap();
        assert_eq!(v, Ratio::new(5, 6));
        let none: f64 = map_at_k_variant(&[vec![0u8; 3]], 3, MapVariant::Conventional).unwrap();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn short_lists_pad_with_unclicked() {
        let lists = [vec![1u8, 1]];
        assert_eq!(precision_at_k::<f64, _>(&lists, 5).unwrap(), 0.4);
        let m: Ratio<i64> = map_at_k(&lists, 5).unwrap();
        assert_eq!(m, Ratio::new(2, 5));
    }

    #[test]
    fn empty_request_set_is_undefined() {
        let lists: [Vec<u8>; 0] = [];
        assert!(matches!(precision_at_k::<f64, _>(&lists, 5), Err(PrmError::UndefinedMetric(_))));
        assert!(matches!(map_at_k::<f64, _>(&lists, 5), Err(PrmError::UndefinedMetric(_))));
        assert!(map_at_k::<f64, _>(&[vec![1u8]], 0).is_err());
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_map1_equals_p1(labels in proptest::collection::vec(0u8..2, 1..31), k in 1usize..31) {
            let l = [labels];
            let p: f64 = precision_at_k(&l, k).unwrap();
            let m: f64 = map_at_k(&l, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert_eq!(map_at_k::<f64, _>(&l, 1).unwrap(), precision_at_k::<f64, _>(&l, 1).unwrap());
        }

        #[test]
        fn float_map_tracks_exact_rational(lists in proptest::collection::vec(proptest::collection::vec(0u8..2, 1..21), 1..20), k in 1usize..21) {
            let exact: Ratio<i64> = map_at_k(&lists, k).unwrap();
            let float: f64 = map_at_k(&lists, k).unwrap();
            let e = *exact.numer() as f64 / *exact.denom() as f64;
            prop_assert!((e - float).abs() < 1e-12);
        }
    }
}
