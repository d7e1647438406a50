use crate::autodiff::{Tape, Var};
use crate::data::RerankRecord;
use crate::error::{PrmError, Result};
use crate::eval::{metrics, reranked_labels};
use crate::params::{Bound, ParamStore};
use crate::pretrain::PvTable;
use crate::prm::{forward, listwise_loss, ListInput, PrmConfig, PrmModel};
use crate::rng::DropoutKey;
use crate::scalar::Scalar;
use crate::train::{Objective, Validation};

/// Listwise softmax loss over re-ranking requests, validated by MAP@n_max.
pub struct PrmObjective<T> {
    config: PrmConfig,
    inputs: Vec<ListInput<T>>,
    labels: Vec<Vec<T>>,
    validation: Option<(Vec<RerankRecord>, Vec<ListInput<T>>)>,
}

impl<T: Scalar> PrmObjective<T> {
    /// Converts every record up front, so width or capacity mismatches fail
    /// before the first step.
    pub fn new(
        config: &PrmConfig,
        train: &[RerankRecord],
        train_pv: Option<&PvTable>,
        validation: Option<(&[RerankRecord], Option<&PvTable>)>,
    ) -> Result<Self> {
        config.validate()?;
        let inputs = train
            .iter()
            .map(|r| ListInput::from_record(r, config, train_pv, None))
            .collect::<Result<Vec<_>>>()?;
        let labels = train
            .iter()
            .map(|r| r.items.iter().map(|i| T::of(f64::from(i.label))).collect())
            .collect();
        let validation = match validation {
            Some((recs, pv)) if !recs.is_empty() => {
                let inp = recs
                    .iter()
                    .map(|r| ListInput::from_record(r, config, pv, None))
                    .collect::<Result<Vec<_>>>()?;
                Some((recs.to_vec(), inp))
            }
            _ => None,
        };
        Ok(Self {
            config: config.clone(),
            inputs,
            labels,
            validation,
        })
    }
}

impl<T: Scalar> Objective<T> for PrmObjective<T> {
    fn num_examples(&self) -> usize {
        self.inputs.len()
    }

    fn batch_loss(&self, tape: &mut Tape<T>, bound: &Bound, indices: &[usize], key: DropoutKey) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &i in indices {
            let input = self.inputs.get(i).ok_or_else(|| {
                PrmError::Contract(format!("example {i} out of range"))
            })?;
            let key = DropoutKey { sample: i as u64, ..key };
            let fv = forward(tape, bound, &self.config, input, true, key)?;
            let l = listwise_loss(tape, fv.logits, &self.labels[i], &input.valid)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| PrmError::Contract("empty batch".into()))
    }

    fn validate(&self, params: &ParamStore<T>) -> Result<Option<Validation>> {
        let Some((records, inputs)) = &self.validation else {
            return Ok(None);
        };
        let model = PrmModel::from_params(self.config.clone(), params.clone())?;
        let mut lists = Vec::with_capacity(records.len());
        for (r, inp) in records.iter().zip(inputs) {
            let s = model.score(&r.request_id, inp)?;
            lists.push(reranked_labels(r, &s.list.order));
        }
        Ok(Some(Validation {
            val_map: metrics::map_at_k(&lists, self.config.n_max)?,
            val_p5: metrics::precision_at_k(&lists, 5)?,
        }))
    }
}
