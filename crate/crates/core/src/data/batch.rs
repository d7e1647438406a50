use rand::seq::SliceRandom;

use crate::data::RerankRecord;
use crate::rng;
use crate::tensor::Tensor2;

/// A group of lists padded to a common length.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    /// Positions of the records in the source slice.
    pub indices: Vec<usize>,
    pub records: Vec<&'a RerankRecord>,
    /// Padded length of every list in the batch.
    pub n_max: usize,
    /// `n_max × d_feature` per record; padded rows are zero.
    pub features: Vec<Tensor2<f64>>,
    /// `true` for real items.
    pub valid: Vec<Vec<bool>>,
    /// Click labels, zero on padding.
    pub labels: Vec<Vec<f64>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Iterator returned by [`batch_iter`].
pub struct BatchIter<'a> {
    records: &'a [RerankRecord],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    n_max: usize,
    d_feature: usize,
}

/// Yields batches of `batch_size` records (the last one may be smaller).
/// With `shuffle_seed` the visiting order is a seeded permutation, otherwise
/// input order.
pub fn batch_iter(
    records: &[RerankRecord],
    batch_size: usize,
    n_max: usize,
    shuffle_seed: Option<u64>,
) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..records.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, "shuffle", &[]));
    }
    let d_feature = records
        .first()
        .and_then(|r| r.items.first())
        .map_or(0, |i| i.features.len());
    BatchIter {
        records,
        order,
        pos: 0,
        batch_size,
        n_max,
        d_feature,
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut batch = Batch {
            records: Vec::with_capacity(indices.len()),
            n_max: self.n_max,
            features: Vec::with_capacity(indices.len()),
            valid: Vec::with_capacity(indices.len()),
            labels: Vec::with_capacity(indices.len()),
            indices,
        };
        for &i in &batch.indices {
            let r = &self.records[i];
            let mut x = Tensor2::zeros(self.n_max, self.d_feature);
            let mut valid = vec![false; self.n_max];
            let mut labels = vec![0.0; self.n_max];
            for (k, it) in r.items.iter().enumerate().take(self.n_max) {
                x.row_mut(k).copy_from_slice(&it.features);
                valid[k] = true;
                labels[k] = it.label as f64;
            }
            batch.records.push(r);
            batch.features.push(x);
            batch.valid.push(valid);
            batch.labels.push(labels);
        }
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ItemEntry, UserProfile};

    fn records(n: usize, len: impl Fn(usize) -> usize) -> Vec<RerankRecord> {
        (0..n)
            .map(|r| RerankRecord {
                request_id: format!("r{r}"),
                user: UserProfile::anonymous("u"),
                history: vec![],
                items: (0..len(r))
                    .map(|k| ItemEntry {
                        item_id: format!("i{k}"),
                        category: 0,
                        price_level: 1,
                        features: vec![r as f64, k as f64],
                        label: 1,
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn batch_sizes_follow_arithmetic() {
        let recs = records(10, |_| 3);
        let sizes: Vec<usize> = batch_iter(&recs, 4, 3, None).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn full_lists_have_all_true_masks() {
        let recs = records(5, |_| 4);
        for b in batch_iter(&recs, 2, 4, Some(3)) {
            assert!(b.valid.iter().all(|v| v.iter().all(|&x| x)));
        }
    }

    #[test]
    fn short_lists_are_zero_padded_and_masked() {
        let recs = records(2, |r| r + 1);
        let b = batch_iter(&recs, 2, 3, None).next().unwrap();
        assert_eq!(b.valid[0], vec![true, false, false]);
        assert_eq!(b.features[0].row(1), &[0.0, 0.0]);
        assert_eq!(b.labels[1], vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn shuffles_are_seeded_permutations() {
        let recs = records(50, |_| 2);
        let ids = |seed| -> Vec<String> {
            batch_iter(&recs, 7, 2, Some(seed))
                .flat_map(|b| b.records.into_iter().map(|r| r.request_id.clone()))
                .collect()
        };
        let (a, b) = (ids(1), ids(2));
        assert_ne!(a, b);
        assert_eq!(a, ids(1));
        let mut sa = a.clone();
        sa.sort();
        let mut all: Vec<String> = recs.iter().map(|r| r.request_id.clone()).collect();
        all.sort();
        assert_eq!(sa, all);
        let mut sb = b;
        sb.sort();
        assert_eq!(sb, all);
    }
}
