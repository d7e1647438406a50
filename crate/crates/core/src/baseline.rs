//! Pointwise feed-forward ranker over item features alone. It generates the
//! initial lists that the re-ranker refines.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{check_layout, Checkpoint};
use crate::data::{ItemEntry, RerankRecord};
use crate::error::{PrmError, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::prm::rank_order;
use crate::rng::DropoutKey;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;
use crate::train::Objective;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub d_feature: usize,
    pub hidden: Vec<usize>,
}

impl BaselineConfig {
    pub fn new(d_feature: usize) -> Self {
        Self {
            d_feature,
            hidden: vec![64, 32],
        }
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        if self.d_feature == 0 || self.hidden.contains(&0) {
            return Err(PrmError::Config("baseline needs d_feature >= 1 and non-empty hidden layers".into()));
        }
        let mut p = ParamStore::new();
        let mut fan_in = self.d_feature;
        for (k, &w) in self.hidden.iter().enumerate() {
            let name = format!("mlp.l{k}.w");
            p.insert(name.clone(), glorot(seed, &name, fan_in, w));
            p.insert(format!("mlp.l{k}.b"), Tensor2::zeros(1, w));
            fan_in = w;
        }
        p.insert("out.w", glorot(seed, "out.w", fan_in, 1));
        p.insert("out.b", Tensor2::zeros(1, 1));
        Ok(p)
    }
}

fn feature_matrix<T: Scalar>(cfg: &BaselineConfig, items: &[&ItemEntry]) -> Result<Tensor2<T>> {
    let mut x = Tensor2::zeros(items.len(), cfg.d_feature);
    for (r, it) in items.iter().enumerate() {
        if it.features.len() != cfg.d_feature {
            return Err(PrmError::Config(format!(
                "item `{}` has {} features, baseline expects {}",
                it.item_id,
                it.features.len(),
                cfg.d_feature
            )));
        }
        for (d, &s) in x.row_mut(r).iter_mut().zip(&it.features) {
            *d = T::of(s);
        }
    }
    Ok(x)
}

/// Records the `b × 1` logits of a feature matrix.
pub fn baseline_logits<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, cfg: &BaselineConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for k in 0..cfg.hidden.len() {
        let z = tape.matmul(h, bound.get(&format!("mlp.l{k}.w"))?)?;
        let z = tape.add_row(z, bound.get(&format!("mlp.l{k}.b"))?)?;
        h = tape.relu(z);
    }
    let z = tape.matmul(h, bound.get("out.w")?)?;
    tape.add_row(z, bound.get("out.b")?)
}

#[derive(Clone, Debug)]
pub struct BaselineModel<T> {
    pub config: BaselineConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> BaselineModel<T> {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: BaselineConfig = ck.config()?;
        let params = ck.params()?;
        check_layout(&params, &config.init_params::<T>(0)?)?;
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(&self.config, &self.params)
    }

    /// Logit of every item; higher ranks earlier.
    pub fn scores(&self, items: &[&ItemEntry]) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(feature_matrix(&self.config, items)?);
        let z = baseline_logits(&mut tape, &bound, &self.config, x)?;
        Ok(tape.value(z).data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    pub fn baseline_score(&self, features: &[f64]) -> Result<f64> {
        let item = ItemEntry {
            item_id: String::new(),
            category: 0,
            price_level: 1,
            features: features.to_vec(),
            label: 0,
        };
        Ok(self.scores(&[&item])?[0])
    }

    /// Top `n_max` candidates of each request by descending score, ties in
    /// candidate order. Empty candidate sets are skipped; their count is
    /// returned alongside the lists.
    pub fn build_initial_lists(&self, candidates: &[RerankRecord], n_max: usize) -> Result<(Vec<RerankRecord>, usize)> {
        let mut out = Vec::with_capacity(candidates.len());
        let mut skipped = 0;
        for c in candidates {
            if c.items.is_empty() {
                skipped += 1;
                continue;
            }
            let refs: Vec<&ItemEntry> = c.items.iter().collect();
            let order = rank_order(&self.scores(&refs)?);
            out.push(RerankRecord {
                items: order.iter().take(n_max).map(|&i| c.items[i].clone()).collect(),
                ..c.clone()
            });
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} requests with empty candidate sets");
        }
        Ok((out, skipped))
    }
}

/// Summed cross entropy of `sigmoid(logit)` against click labels.
pub struct BaselineObjective<'a> {
    pub config: &'a BaselineConfig,
    pub items: Vec<&'a ItemEntry>,
}

impl<T: Scalar> Objective<T> for BaselineObjective<'_> {
    fn num_examples(&self) -> usize {
        self.items.len()
    }

    fn batch_loss(&self, tape: &mut Tape<T>, bound: &Bound, indices: &[usize], _key: DropoutKey) -> Result<Var> {
        let items: Vec<&ItemEntry> = indices.iter().map(|&i| self.items[i]).collect();
        let x = tape.constant(feature_matrix(self.config, &items)?);
        let z = baseline_logits(tape, bound, self.config, x)?;
        let p = tape.sigmoid(z);
        let y: Vec<T> = items.iter().map(|i| T::of(f64::from(i.label))).collect();
        tape.binary_cross_entropy(p, &y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UserProfile;

    fn item(id: &str, f: Vec<f64>) -> ItemEntry {
        ItemEntry {
            item_id: id.into(),
            category: 0,
            price_level: 1,
            features: f,
            label: 0,
        }
    }

    fn cands(feats: &[f64]) -> RerankRecord {
        RerankRecord {
            request_id: "r".into(),
            user: UserProfile::anonymous("u"),
            history: vec![],
            items: feats.iter().enumerate().map(|(k, &f)| item(&format!("i{k}"), vec![f])).collect(),
        }
    }

    #[test]
    fn zero_weights_keep_input_order() {
        let mut m = BaselineModel::<f64>::new(BaselineConfig::new(1), 0).unwrap();
        for (_, t) in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let (lists, _) = m.build_initial_lists(&[cands(&[0.3, 2.0, -1.0])], 30).unwrap();
        let ids: Vec<&str> = lists[0].items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids, ["i0", "i1", "i2"]);
    }

    #[test]
    fn linear_model_is_monotone_and_truncates() {
        let cfg = BaselineConfig { d_feature: 1, hidden: vec![] };
        let mut m = BaselineModel::<f64>::new(cfg, 0).unwrap();
        *m.params.get_mut("out.w").unwrap() = Tensor2::scalar(0.5);
        assert!(m.baseline_score(&[2.0]).unwrap() > m.baseline_score(&[1.0]).unwrap());
        let (lists, skipped) = m
            .build_initial_lists(&[cands(&[0.3, 2.0, -1.0, 1.0]), cands(&[])], 2)
            .unwrap();
        assert_eq!(skipped, 1);
        let ids: Vec<&str> = lists[0].items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids, ["i1", "i3"]);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let m = BaselineModel::<f64>::new(BaselineConfig::new(2), 0).unwrap();
        assert!(matches!(m.baseline_score(&[1.0]), Err(PrmError::Config(_))));
    }

    #[test]
    fn score_matches_straight_line_forward() {
        let m = BaselineModel::<f64>::new(BaselineConfig { d_feature: 3, hidden: vec![4, 2] }, 7).unwrap();
        let x = [0.4, -1.2, 0.9];
        let mut h = x.to_vec();
        for k in 0..2 {
            let w = m.params.get(&format!("mlp.l{k}.w")).unwrap();
            let b = m.params.get(&format!("mlp.l{k}.b")).unwrap();
            h = (0..w.cols())
                .map(|c| ((0..w.rows()).map(|r| h[r] * w[(r, c)]).sum::<f64>() + b[(0, c)]).max(0.0))
                .collect();
        }
        let w = m.params.get("out.w").unwrap();
        let want: f64 = h.iter().enumerate().map(|(r, v)| v * w[(r, 0)]).sum();
        assert!((m.baseline_score(&x).unwrap() - want).abs() < 1e-14);
    }
}
