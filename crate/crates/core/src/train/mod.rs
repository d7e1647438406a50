//! Optimizer, learning-rate schedule and the shared training loop.

mod adam;
mod objective;
mod schedule;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use objective::PrmObjective;
pub use schedule::{lr_at, LrSchedule};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{PrmError, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, DropoutKey};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Upper bound on optimizer steps.
    pub max_steps: u64,
    /// Upper bound on passes over the data.
    pub epochs: usize,
    pub warmup_steps: u64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    /// Replaces the warmup schedule with a fixed rate when set.
    pub constant_lr: Option<f64>,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Hook interval for intermediate checkpoints, in steps.
    pub checkpoint_interval: Option<u64>,
    /// Global gradient-norm cap; off when `None`.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Divide each batch loss by the number of examples in the batch.
    pub normalize_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_steps: 10_000,
            epochs: 100,
            warmup_steps: 4000,
            lr_scale: 1.0,
            constant_lr: None,
            seed: 0,
            patience: 3,
            checkpoint_interval: None,
            clip_norm: None,
            beta1: AdamState::<f64>::BETA1,
            beta2: AdamState::<f64>::BETA2,
            eps: AdamState::<f64>::EPS,
            normalize_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PrmError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.checkpoint_interval == Some(0) {
            return bad("checkpoint_interval must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        if let Some(lr) = self.constant_lr {
            if !(lr > 0.0) {
                return bad("constant_lr must be positive");
            }
        }
        Ok(())
    }

    pub fn schedule(&self, d: usize) -> LrSchedule {
        match self.constant_lr {
            Some(lr) => LrSchedule::Constant { lr },
            None => LrSchedule::Noam {
                d,
                warmup: self.warmup_steps,
                scale: self.lr_scale,
            },
        }
    }
}

/// Validation summary; higher `val_map` is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub val_map: f64,
    pub val_p5: f64,
}

/// A trainable loss over an indexed set of examples.
pub trait Objective<T: Scalar> {
    fn num_examples(&self) -> usize;

    /// Records the loss of the examples at `indices`. Dropout masks must be
    /// drawn from `key` with `sample` set to the example index.
    fn batch_loss(&self, tape: &mut Tape<T>, bound: &Bound, indices: &[usize], key: DropoutKey) -> Result<Var>;

    fn validate(&self, _params: &ParamStore<T>) -> Result<Option<Validation>> {
        Ok(None)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Step { step: u64, lr: f64, loss: f64 },
    Epoch { epoch: usize, val_map: f64, val_p5: f64 },
}

impl LogLine {
    pub fn to_json(&self) -> Result<String> {
        crate::data::to_canonical_json(self)
    }
}

/// Receives log lines and periodic parameter snapshots.
pub trait TrainObserver<T> {
    fn on_log(&mut self, _line: &LogLine) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: u64, _params: &ParamStore<T>) -> Result<()> {
        Ok(())
    }
}

/// Collects log lines in memory.
#[derive(Debug, Default)]
pub struct MemoryLog {
    pub lines: Vec<LogLine>,
}

impl<T> TrainObserver<T> for MemoryLog {
    fn on_log(&mut self, line: &LogLine) -> Result<()> {
        self.lines.push(line.clone());
        Ok(())
    }
}

impl MemoryLog {
    pub fn losses(&self) -> Vec<f64> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                LogLine::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&l.to_json()?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Best-validation parameters, or the final ones without validation.
    pub params: ParamStore<T>,
    pub steps: u64,
    pub epochs: usize,
    pub best: Option<Validation>,
    pub best_epoch: Option<usize>,
}

/// Minibatch Adam over `objective`, starting from `params`.
///
/// Epoch `e` visits examples in a permutation drawn from `(seed, e)`. After
/// each epoch the objective is validated; the best parameters are kept and
/// training stops after `patience` epochs without improvement.
pub fn fit<T: Scalar, O: Objective<T> + ?Sized>(
    mut params: ParamStore<T>,
    objective: &O,
    cfg: &TrainConfig,
    schedule: LrSchedule,
    observer: &mut dyn TrainObserver<T>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    let n = objective.num_examples();
    let mut state = AdamState::with_hyper(&params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut result = FitResult {
        params: params.clone(),
        steps: 0,
        epochs: 0,
        best: None,
        best_epoch: None,
    };
    if cfg.max_steps == 0 || n == 0 || cfg.epochs == 0 {
        return Ok(result);
    }
    let mut step = 0u64;
    let mut stale = 0usize;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "epoch-order", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.max_steps {
                break;
            }
            step += 1;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let key = DropoutKey::new(cfg.seed, 0, step, 0);
            let mut loss = objective.batch_loss(&mut tape, &bound, chunk, key)?;
            if cfg.normalize_loss {
                loss = tape.scale(loss, T::one() / T::of_usize(chunk.len()));
            }
            let loss_value = tape.value(loss).item().to_f64_lossy();
            tape.backward(loss)?;
            let mut grads = bound.grads(&tape);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let lr = schedule.at(step)?;
            adam_step(&mut params, &grads, &mut state, lr)?;
            observer.on_log(&LogLine::Step {
                step,
                lr,
                loss: loss_value,
            })?;
            if cfg.checkpoint_interval.is_some_and(|k| step.is_multiple_of(k)) {
                observer.on_checkpoint(step, &params)?;
            }
        }
        result.epochs = epoch;
        result.steps = step;
        match objective.validate(&params)? {
            Some(v) => {
                observer.on_log(&LogLine::Epoch {
                    epoch,
                    val_map: v.val_map,
                    val_p5: v.val_p5,
                })?;
                if result.best.is_none_or(|b| v.val_map > b.val_map) {
                    result.best = Some(v);
                    result.best_epoch = Some(epoch);
                    result.params = params.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break 'epochs;
                    }
                }
            }
            None => result.params = params.clone(),
        }
        if step >= cfg.max_steps {
            break;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2;

    /// Least squares `Σ (w·x_i - y_i)^2` over fixed points.
    struct Line {
        xs: Vec<f64>,
        ys: Vec<f64>,
    }

    impl Objective<f64> for Line {
        fn num_examples(&self) -> usize {
            self.xs.len()
        }

        fn batch_loss(&self, tape: &mut Tape<f64>, bound: &Bound, idx: &[usize], _key: DropoutKey) -> Result<Var> {
            let x = Tensor2::from_vec(idx.len(), 1, idx.iter().map(|&i| self.xs[i]).collect())?;
            let y = Tensor2::from_vec(idx.len(), 1, idx.iter().map(|&i| -self.ys[i]).collect())?;
            let x = tape.constant(x);
            let y = tape.constant(y);
            let p = tape.matmul(x, bound.get("w")?)?;
            let r = tape.add(p, y)?;
            let sq = tape.mul(r, r)?;
            Ok(tape.sum(sq))
        }
    }

    fn problem() -> (ParamStore<f64>, Line) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor2::scalar(0.0));
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
        let ys = xs.iter().map(|x| 2.0 * x).collect();
        (p, Line { xs, ys })
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (p, obj) = problem();
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let r = fit(p.clone(), &obj, &cfg, LrSchedule::Constant { lr: 0.1 }, &mut MemoryLog::default()).unwrap();
        assert_eq!(r.params, p);
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn converges_and_is_reproducible() {
        let (p, obj) = problem();
        let cfg = TrainConfig {
            batch_size: 4,
            max_steps: 300,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut log = MemoryLog::default();
            let r = fit(p.clone(), &obj, &cfg, LrSchedule::Constant { lr: 0.05 }, &mut log).unwrap();
            (r, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.steps, 300);
        assert!((a.params.get("w").unwrap().item() - 2.0).abs() < 1e-2);
        assert_eq!(a.params, b.params);
        assert_eq!(la.to_jsonl().unwrap(), lb.to_jsonl().unwrap());
    }

    #[test]
    fn log_lines_have_documented_keys() {
        let s = LogLine::Step { step: 3, lr: 0.5, loss: 1.25 }.to_json().unwrap();
        assert_eq!(s, r#"{"loss":1.25,"lr":0.5,"step":3}"#);
        let e = LogLine::Epoch { epoch: 1, val_map: 0.5, val_p5: 0.25 }.to_json().unwrap();
        assert_eq!(e, r#"{"epoch":1,"val_map":0.5,"val_p5":0.25}"#);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (p, obj) = problem();
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { clip_norm: Some(-1.0), ..TrainConfig::default() },
        ] {
            let r = fit(p.clone(), &obj, &cfg, LrSchedule::Constant { lr: 0.1 }, &mut MemoryLog::default());
            assert!(matches!(r, Err(PrmError::Config(_))));
        }
    }
}
