//! Full-batch training: one forward/backward pass and one Adam step per epoch.

use std::time::Instant;

use log::{debug, info};

use crate::behavior::Behavior;
use crate::config::TrainConfig;
use crate::dataset::{behavior_frequency, FrequencyTable, HeldOut, InteractionLog, PreparedData};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::graph::BehaviorGraph;
use crate::loss::EpochRecord;
use crate::model::{forward, init_params, ForwardOptions, ModelShape, ParameterSet};
use crate::optim::{clip_global_norm, AdamConfig, AdamState, Objective};
use crate::scalar::Scalar;

/// Training graph, item frequencies and held-out purchases.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: BehaviorGraph,
    pub freq: FrequencyTable,
    pub valid: HeldOut,
    pub test: HeldOut,
}

impl Dataset {
    pub fn new(train: &InteractionLog, valid: HeldOut, test: HeldOut) -> Self {
        Self { graph: BehaviorGraph::build(train), freq: behavior_frequency(train), valid, test }
    }

    pub fn from_prepared(data: &PreparedData) -> Self {
        Self::new(&data.train, data.valid.clone(), data.test.clone())
    }

    pub fn num_users(&self) -> usize {
        self.graph.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.graph.num_items()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

pub fn model_shape(cfg: &TrainConfig, data: &Dataset) -> ModelShape {
    ModelShape { users: data.num_users(), items: data.num_items(), dim: cfg.dim, layers: cfg.layers, per_layer_wbeh: cfg.per_layer_wbeh }
}

/// Ranks the held-out purchases of `split` under `params`.
pub fn evaluate_split<T: Scalar>(cfg: &TrainConfig, data: &Dataset, params: &ParameterSet<T>, split: Split, ks: &[usize]) -> Result<EvalResult> {
    let trace = forward(params, &data.graph, &ForwardOptions::from_config(cfg))?;
    let (held, extra) = match split {
        Split::Valid => (&data.valid, None),
        Split::Test => (&data.test, cfg.exclude_valid.then_some(&data.valid)),
    };
    evaluate(&trace.refined, params, &data.graph, held, extra, ks)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters at the best validation epoch (the last epoch without early stopping).
    pub params: ParameterSet<T>,
    pub optimizer: AdamState<T>,
    pub history: Vec<EpochRecord>,
    pub validation: Vec<(usize, EvalResult)>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub valid: EvalResult,
    pub test: EvalResult,
}

/// Cutoff used for model selection: 10 when listed, else the smallest.
fn selection_cutoff(cfg: &TrainConfig) -> usize {
    if cfg.topk.contains(&10) {
        10
    } else {
        *cfg.topk.iter().min().expect("validated non-empty")
    }
}

/// Trains from a seeded initialization. `on_epoch` sees each loss record and,
/// on evaluation epochs, the validation metrics.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&EvalResult>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let params = init_params::<T>(model_shape(cfg, data), cfg.seed)?;
    let adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &params);
    train_from(cfg, data, params, adam, &mut on_epoch)
}

/// Continues training from given parameters and optimizer state.
pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    mut params: ParameterSet<T>,
    mut adam: AdamState<T>,
    on_epoch: &mut dyn FnMut(&EpochRecord, Option<&EvalResult>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if params.shape != model_shape(cfg, data) {
        return Err(Error::Contract(format!("parameter shape {:?} does not match config and data", params.shape)));
    }
    for k in Behavior::ALL {
        if data.graph.num_edges(k) == 0 {
            log::warn!("no {k} interactions in train");
        }
    }
    let obj = Objective::from_config(cfg, &data.graph, &data.freq);
    let select_k = selection_cutoff(cfg);
    let early_stopping = cfg.patience > 0 && !data.valid.is_empty();

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet<T>, AdamState<T>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..=cfg.epochs {
        let start = Instant::now();
        let report = if epoch < cfg.epochs {
            let out = obj.gradient(&params)?;
            let mut grad = out.grad;
            let norm = clip_global_norm(&mut grad, cfg.clip_norm);
            debug!("epoch {epoch}: gradient norm {norm:.4e}");
            let report = out.report;
            if !report.total.is_finite() {
                return Err(Error::NonFinite { tensor: "loss".into() });
            }
            adam.update(&mut params, &grad)?;
            report
        } else {
            obj.loss(&params, None)?
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite { tensor: "loss".into() });
        }
        let record = EpochRecord::new(epoch, &report, start.elapsed().as_millis() as u64);

        // validation is measured after this epoch's update
        let mut metrics = None;
        if early_stopping && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let r = evaluate_split(cfg, data, &params, Split::Valid, &cfg.topk)?;
            let score = r.hr_at(select_k).unwrap_or(0.0);
            if best.as_ref().is_none_or(|(b, ..)| score > *b) {
                best = Some((score, epoch, params.clone(), adam.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            validation.push((epoch, r));
            metrics = validation.last().map(|(_, r)| r);
        }
        on_epoch(&record, metrics);
        history.push(record);
        if early_stopping && since_best >= cfg.patience {
            info!("early stop at epoch {epoch}: no HR@{select_k} gain in {} evaluations", cfg.patience);
            stopped_early = true;
            break;
        }
    }

    let best_epoch = match best {
        Some((_, e, p, a)) => {
            params = p;
            adam = a;
            e
        }
        None => history.last().map_or(0, |r| r.epoch),
    };
    let valid = if data.valid.is_empty() { empty_result(&cfg.topk) } else { evaluate_split(cfg, data, &params, Split::Valid, &cfg.topk)? };
    let test = if data.test.is_empty() { empty_result(&cfg.topk) } else { evaluate_split(cfg, data, &params, Split::Test, &cfg.topk)? };
    Ok(TrainOutcome { params, optimizer: adam, history, validation, best_epoch, stopped_early, valid, test })
}

fn empty_result(ks: &[usize]) -> EvalResult {
    EvalResult { users: 0, hr: ks.iter().map(|&k| (k, 0.0)).collect(), ndcg: ks.iter().map(|&k| (k, 0.0)).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::temporal_split;
    use crate::synthetic::{generate, SyntheticConfig};

    fn small() -> Dataset {
        let log = generate(&SyntheticConfig { users: 60, items: 50, topics: 5, ..SyntheticConfig::default() }).unwrap();
        let split = temporal_split(&log);
        Dataset::new(&split.train, split.valid, split.test)
    }

    fn cfg() -> TrainConfig {
        TrainConfig { dim: 8, layers: 2, epochs: 15, lr: 0.01, patience: 0, ..TrainConfig::default() }
    }

    #[test]
    fn logs_every_epoch_and_reduces_loss() {
        let data = small();
        let mut seen = 0;
        let out = train::<f32>(&cfg(), &data, |_, _| seen += 1).unwrap();
        assert_eq!(out.history.len(), 16);
        assert_eq!(seen, 16);
        assert!(out.history.last().unwrap().total < out.history[0].total);
        assert_eq!(out.optimizer.step, 15);
        assert_eq!(out.valid.users, data.valid.len());
    }

    #[test]
    fn runs_are_bit_identical() {
        let data = small();
        let a = train::<f32>(&cfg(), &data, |_, _| {}).unwrap();
        let b = train::<f32>(&cfg(), &data, |_, _| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn early_stopping_keeps_best_parameters() {
        let data = small();
        let c = TrainConfig { patience: 2, epochs: 40, lr: 0.05, ..cfg() };
        let out = train::<f32>(&c, &data, |_, _| {}).unwrap();
        let best = out.validation.iter().find(|(e, _)| *e == out.best_epoch).unwrap();
        assert_eq!(out.valid, best.1);
        if out.stopped_early {
            assert!(out.history.len() < 41);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let data = small();
        let c = cfg();
        let p = init_params::<f32>(ModelShape { users: 3, items: 3, dim: 8, layers: 2, per_layer_wbeh: false }, 0).unwrap();
        let adam = AdamState::new(AdamConfig::with_lr(0.01), &p);
        assert!(matches!(train_from(&c, &data, p, adam, &mut |_, _| {}), Err(Error::Contract(_))));
    }
}
