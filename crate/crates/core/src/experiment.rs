//! Ablation grid, `(C, x)` sweep and reference-behavior study.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::behavior::Behavior;
use crate::config::{TrainConfig, VariantSpec};
use crate::error::Result;
use crate::eval::EvalResult;
use crate::loss::weight_table;
use crate::loss::WeightOptions;
use crate::model::{forward, ForwardOptions};
use crate::scalar::Scalar;
use crate::train::{train, Dataset};

pub const GRID_C: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];
pub const GRID_X: [f64; 5] = [0.15, 0.25, 0.5, 0.75, 0.85];

fn metrics_into(map: &mut serde_json::Map<String, Value>, prefix: &str, r: &EvalResult) {
    if let Value::Object(m) = r.to_json() {
        for (k, v) in m {
            if k != "users" {
                map.insert(format!("{prefix}{k}"), v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: VariantSpec,
    pub valid: EvalResult,
    pub test: EvalResult,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

impl VariantResult {
    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("variant".into(), self.variant.to_string().into());
        metrics_into(&mut m, "", &self.test);
        metrics_into(&mut m, "valid_", &self.valid);
        m.insert("epochs_run".into(), self.epochs_run.into());
        m.insert("best_epoch".into(), self.best_epoch.into());
        m.insert("first_loss".into(), self.first_loss.into());
        m.insert("final_loss".into(), self.final_loss.into());
        Value::Object(m)
    }
}

pub fn run_variant<T: Scalar>(cfg: &TrainConfig, data: &Dataset, variant: VariantSpec) -> Result<VariantResult> {
    let cfg = cfg.clone().with_variant(variant);
    let out = train::<T>(&cfg, data, |_, _| {})?;
    Ok(VariantResult {
        variant,
        valid: out.valid,
        test: out.test,
        epochs_run: out.history.len().saturating_sub(1),
        best_epoch: out.best_epoch,
        first_loss: out.history.first().map_or(f64::NAN, |r| r.total),
        final_loss: out.history.last().map_or(f64::NAN, |r| r.total),
    })
}

/// Trains every variant from the same seed. Results come back in input order.
pub fn ablation<T: Scalar>(cfg: &TrainConfig, data: &Dataset, variants: &[VariantSpec], parallel: bool) -> Result<Vec<VariantResult>> {
    if parallel {
        variants.par_iter().map(|&v| run_variant::<T>(cfg, data, v)).collect()
    } else {
        variants.iter().map(|&v| run_variant::<T>(cfg, data, v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub c: f64,
    pub x: f64,
    pub valid: EvalResult,
    pub test: EvalResult,
}

impl GridCell {
    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("C".into(), self.c.into());
        m.insert("x".into(), self.x.into());
        metrics_into(&mut m, "", &self.test);
        metrics_into(&mut m, "valid_", &self.valid);
        Value::Object(m)
    }
}

/// Trains the configured variant at every `(C, x)` pair, row-major in `cs`.
pub fn grid_sweep<T: Scalar>(cfg: &TrainConfig, data: &Dataset, cs: &[f64], xs: &[f64], parallel: bool) -> Result<Vec<GridCell>> {
    let cells: Vec<(f64, f64)> = cs.iter().flat_map(|&c| xs.iter().map(move |&x| (c, x))).collect();
    let run = |&(c, x): &(f64, f64)| -> Result<GridCell> {
        let cfg = TrainConfig { c, x, ..cfg.clone() };
        let out = train::<T>(&cfg, data, |_, _| {})?;
        Ok(GridCell { c, x, valid: out.valid, test: out.test })
    };
    if parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    }
}

/// Summary of one behavior's negative weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightSummary {
    pub behavior: Behavior,
    pub mean: f64,
    pub std: f64,
    /// Coefficient of variation `std / mean`.
    pub cv: f64,
    pub min: f64,
    pub max: f64,
    /// Items with zero weight.
    pub zeros: usize,
    /// Equal-width bins over `[0, max]`.
    pub histogram: Vec<usize>,
}

pub fn summarize_weights(behavior: Behavior, w: &[f64], bins: usize) -> WeightSummary {
    let n = w.len().max(1) as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let max = w.iter().copied().fold(0.0, f64::max);
    let mut histogram = vec![0; bins.max(1)];
    for &x in w {
        let b = if max > 0.0 { ((x / max) * bins as f64) as usize } else { 0 };
        histogram[b.min(bins.max(1) - 1)] += 1;
    }
    WeightSummary {
        behavior,
        mean,
        std,
        cv: if mean > 0.0 { std / mean } else { 0.0 },
        min: if w.is_empty() { 0.0 } else { min },
        max,
        zeros: w.iter().filter(|&&x| x == 0.0).count(),
        histogram,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRow {
    pub k_ref: Behavior,
    pub weights: Vec<WeightSummary>,
    pub test: EvalResult,
}

impl ReferenceRow {
    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("k_ref".into(), self.k_ref.as_str().into());
        metrics_into(&mut m, "", &self.test);
        m.insert("weights".into(), json!(self.weights));
        Value::Object(m)
    }
}

/// Trains once per reference behavior and reports the resulting weight
/// distributions alongside test metrics.
pub fn reference_behavior_study<T: Scalar>(cfg: &TrainConfig, data: &Dataset, bins: usize, parallel: bool) -> Result<Vec<ReferenceRow>> {
    let run = |&k_ref: &Behavior| -> Result<ReferenceRow> {
        let cfg = TrainConfig { k_ref, ..cfg.clone() };
        let out = train::<T>(&cfg, data, |_, _| {})?;
        let trace = forward(&out.params, &data.graph, &ForwardOptions::from_config(&cfg))?;
        let table = weight_table(&WeightOptions::from_config(&cfg), &data.freq, &trace.refined.item, &out.params.w_int)?;
        let weights = Behavior::ALL
            .into_iter()
            .map(|k| {
                let w: Vec<f64> = table.neg(k).iter().map(|x| x.to_f64_lossy()).collect();
                summarize_weights(k, &w, bins)
            })
            .collect();
        Ok(ReferenceRow { k_ref, weights, test: out.test })
    };
    if parallel {
        Behavior::ALL.par_iter().map(run).collect()
    } else {
        Behavior::ALL.iter().map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_summary_hand_case() {
        let s = summarize_weights(Behavior::View, &[0.0, 0.25, 0.25, 0.5], 2);
        assert_eq!(s.mean, 0.25);
        assert!((s.std - (0.125f64).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(s.zeros, 1);
        assert_eq!(s.histogram, vec![1, 3]);
        assert_eq!((s.min, s.max), (0.0, 0.5));
        let flat = summarize_weights(Behavior::Add, &[0.1; 4], 3);
        assert_eq!(flat.cv, 0.0);
        assert_eq!(flat.histogram, vec![0, 0, 4]);
    }
}
