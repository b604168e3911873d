//! Central finite-difference verification of the analytic gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Objective;
use crate::error::{Error, Result};
use crate::model::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub samples: usize,
    pub step: f64,
    /// Largest accepted `|analytic − numeric| / (floor + |analytic|)`.
    pub tolerance: f64,
    /// Denominator floor; 1 gives the usual mixed absolute/relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { samples: 200, step: 1e-4, tolerance: 1e-6, floor: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdMismatch {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree (a kink lies within the step).
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<FdMismatch>,
}

/// Compares the analytic gradient against central differences on randomly
/// sampled coordinates. Weights are held at their values at `params` unless
/// the objective differentiates through them.
pub fn check_gradient(obj: &Objective<'_>, params: &ParameterSet<f64>, opts: &FdOptions) -> Result<FdReport> {
    let out = obj.gradient(params)?;
    let fixed = (!obj.wint_through_gradient).then_some(&out.weights);
    let total = params.num_scalars();
    let names: Vec<(&'static str, usize)> = params.slices().iter().map(|(n, s)| (*n, s.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // over-sample so skipped kinks still leave enough checked coordinates
    let wanted = opts.samples.min(total);
    let order = sample(&mut rng, total, total.min(wanted * 2));

    let analytic: Vec<f64> = out.grad.slices().iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let base = obj.loss_value(params, fixed)?;
    let h = opts.step;
    let mut report = FdReport { checked: 0, skipped: 0, worst: 0.0, failures: Vec::new() };
    let mut probe = params.clone();
    for idx in order.iter() {
        if report.checked >= wanted {
            break;
        }
        let eval = |p: &mut ParameterSet<f64>, delta: f64| -> Result<f64> {
            let x = p.coordinate_mut(idx).expect("index in range").1;
            let orig = *x;
            *x = orig + delta;
            let v = obj.loss_value(p, fixed);
            *p.coordinate_mut(idx).expect("index in range").1 = orig;
            v
        };
        let plus = eval(&mut probe, h)?;
        let minus = eval(&mut probe, -h)?;
        let forward = (plus - base) / h;
        let backward = (base - minus) / h;
        if (forward - backward).abs() > 1e3 * h * (1.0 + forward.abs().max(backward.abs())) + 1e-6 {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[idx];
        let err = (a - numeric).abs() / (opts.floor + a.abs());
        report.checked += 1;
        report.worst = report.worst.max(err);
        if err > opts.tolerance {
            let (mut tensor, mut local) = ("", idx);
            for &(n, len) in &names {
                if local < len {
                    tensor = n;
                    break;
                }
                local -= len;
            }
            report.failures.push(FdMismatch { tensor, index: local, analytic: a, numeric, error: err });
        }
    }
    if let Some(w) = report.failures.iter().max_by(|a, b| a.error.total_cmp(&b.error)) {
        return Err(Error::GradientCheck { count: report.failures.len(), worst: w.error, tensor: w.tensor.to_string(), index: w.index });
    }
    Ok(report)
}
