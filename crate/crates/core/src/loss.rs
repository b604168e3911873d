//! Intensity-aware non-sampling loss.
//!
//! Each behavior is a weighted squared regression of `ŷ` against the binary
//! incidence over *all* user–item pairs. Observed pairs carry weight `c⁺`,
//! unobserved pairs the per-item weight `c_v⁻`. The all-pairs negative term
//! is evaluated through two `d × d` Gram matrices:
//!
//! ```text
//! L_k = Σ_{(u,v)∈E_k} [(c⁺ − c_v⁻) ŷ² − 2 c⁺ ŷ]
//!     + Σ_{a,b} h_a h_b (Σ_u p'_ua p'_ub) (Σ_v c_v⁻ q'_va q'_vb)
//! ```
//!
//! which drops the constant `c⁺ |E_k|` of `(ŷ − 1)²`. Reported values use
//! the same convention; [`positive_constant`] restores it.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{Behavior, NUM_BEHAVIORS};
use crate::config::{Sampling, TrainConfig};
use crate::dataset::FrequencyTable;
use crate::error::{Error, Result};
use crate::graph::BehaviorGraph;
use crate::matrix::Matrix;
use crate::model::{ParameterSet, Refinement};
use crate::scalar::{axpy, dot, Scalar};

/// Largest `M · N` the naive oracle accepts.
pub const NAIVE_LIMIT: usize = 10_000;

/// Options that determine the negative weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightOptions {
    pub sampling: Sampling,
    pub c: f64,
    pub x: f64,
    pub k_ref: Behavior,
    pub uniform_weight: f64,
    pub c_pos: f64,
    pub ref_denominator: bool,
}

impl WeightOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            sampling: cfg.sampling,
            c: cfg.c,
            x: cfg.x,
            k_ref: cfg.k_ref,
            uniform_weight: cfg.uniform_weight,
            c_pos: cfg.c_pos,
            ref_denominator: cfg.eq10_ref_denominator,
        }
    }
}

/// Per-behavior sample weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeWeightTable<T> {
    pub c_pos: Vec<T>,
    /// `[K × N]`
    pub c_neg: Matrix<T>,
    /// Intensity scores `[K × N]` (zero under uniform weighting).
    pub f: Matrix<T>,
    /// Reference-normalized scores `[K × N]`.
    pub f_norm: Matrix<T>,
    /// Behaviors whose weights fell back to `C / N`.
    pub fallback: [bool; NUM_BEHAVIORS],
}

impl<T: Scalar> NegativeWeightTable<T> {
    pub fn num_items(&self) -> usize {
        self.c_neg.cols()
    }

    #[inline]
    pub fn neg(&self, k: Behavior) -> &[T] {
        self.c_neg.row(k.index())
    }

    /// A table with constant positive weight and the given negative rows.
    pub fn from_rows(c_pos: T, rows: &[Vec<T>]) -> Self {
        let n = rows.first().map_or(0, Vec::len);
        Self {
            c_pos: vec![c_pos; NUM_BEHAVIORS],
            c_neg: Matrix::from_rows(rows),
            f: Matrix::zeros(NUM_BEHAVIORS, n),
            f_norm: Matrix::zeros(NUM_BEHAVIORS, n),
            fallback: [false; NUM_BEHAVIORS],
        }
    }
}

/// `f_v = max(W_int · q'_v, 0) · I_v^k / Σ_i I_i^k`. The item representation
/// is read as a constant.
pub fn intensity_scores<T: Scalar>(freq: &FrequencyTable, q_refined: &Matrix<T>, w_int: &[T], k: Behavior) -> Vec<T> {
    let n = freq.num_items();
    let total = freq.total(k);
    if total == 0 {
        warn!("behavior {k} has no interactions in train; its negative weights are zero");
        return vec![T::zero(); n];
    }
    let total = T::of(total as f64);
    (0..n)
        .map(|v| {
            let share = T::of(freq.count(k, v) as f64) / total;
            (dot(w_int, q_refined.row(v)) * share).max(T::zero())
        })
        .collect()
}

/// Maps scores onto the reference behavior's scale:
/// `f_v · I_v^{k_ref} / Σ_i I_i^k` (or `/ Σ_i I_i^{k_ref}` when `ref_denominator`).
pub fn normalize_frequency<T: Scalar>(
    f: &[T],
    freq: &FrequencyTable,
    k: Behavior,
    k_ref: Behavior,
    ref_denominator: bool,
) -> Vec<T> {
    let denom = freq.total(if ref_denominator { k_ref } else { k });
    if denom == 0 {
        return vec![T::zero(); f.len()];
    }
    let denom = T::of(denom as f64);
    f.iter().enumerate().map(|(v, &fv)| fv * T::of(freq.count(k_ref, v) as f64) / denom).collect()
}

fn check_range(c: f64, x: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Config(format!("C = {c} outside (0, 1]")));
    }
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Config(format!("x = {x} outside (0, 1)")));
    }
    Ok(())
}

/// `c_v = C · g_v^x / Σ_i g_i^x`, zero where `g_v = 0`. Returns the weights
/// and whether the all-zero fallback `C / N` was used.
pub fn negative_weights_checked<T: Scalar>(f_norm: &[T], c: f64, x: f64) -> Result<(Vec<T>, bool)> {
    check_range(c, x)?;
    let xt = T::of(x);
    let powered: Vec<T> = f_norm.iter().map(|&g| if g > T::zero() { g.powf(xt) } else { T::zero() }).collect();
    let total: T = powered.iter().copied().sum();
    if total <= T::zero() || !total.is_finite() {
        if !f_norm.is_empty() {
            warn!("all normalized intensities are zero; using uniform negative weights");
        }
        let n = T::of_usize(f_norm.len().max(1));
        return Ok((vec![T::of(c) / n; f_norm.len()], true));
    }
    let ct = T::of(c);
    Ok((powered.into_iter().map(|t| ct * t / total).collect(), false))
}

pub fn negative_weights<T: Scalar>(f_norm: &[T], c: f64, x: f64) -> Result<Vec<T>> {
    negative_weights_checked(f_norm, c, x).map(|(w, _)| w)
}

/// Constant negative weight for every item.
pub fn uniform_weights<T: Scalar>(n: usize, c_fixed: f64) -> Result<Vec<T>> {
    if c_fixed < 0.0 || !c_fixed.is_finite() {
        return Err(Error::Config(format!("uniform negative weight {c_fixed} must be >= 0")));
    }
    Ok(vec![T::of(c_fixed); n])
}

/// Builds all behaviors' weights from the current refined item representations.
pub fn weight_table<T: Scalar>(
    opts: &WeightOptions,
    freq: &FrequencyTable,
    q_refined: &Matrix<T>,
    w_int: &[T],
) -> Result<NegativeWeightTable<T>> {
    let n = freq.num_items();
    if q_refined.rows() != n {
        return Err(Error::Contract(format!("{} item representations for {n} items", q_refined.rows())));
    }
    let mut c_neg = Matrix::zeros(NUM_BEHAVIORS, n);
    let mut f = Matrix::zeros(NUM_BEHAVIORS, n);
    let mut f_norm = Matrix::zeros(NUM_BEHAVIORS, n);
    let mut fallback = [false; NUM_BEHAVIORS];
    for k in Behavior::ALL {
        let row = match opts.sampling {
            Sampling::Uniform => uniform_weights(n, opts.uniform_weight)?,
            Sampling::Intensity => {
                if freq.total(k) == 0 {
                    warn!("behavior {k} is empty; negative weights set to zero");
                    vec![T::zero(); n]
                } else {
                    let scores = intensity_scores(freq, q_refined, w_int, k);
                    let normed = normalize_frequency(&scores, freq, k, opts.k_ref, opts.ref_denominator);
                    let (w, fb) = negative_weights_checked(&normed, opts.c, opts.x)?;
                    f.row_mut(k.index()).copy_from_slice(&scores);
                    f_norm.row_mut(k.index()).copy_from_slice(&normed);
                    fallback[k.index()] = fb;
                    w
                }
            }
        };
        c_neg.row_mut(k.index()).copy_from_slice(&row);
    }
    Ok(NegativeWeightTable { c_pos: vec![T::of(opts.c_pos); NUM_BEHAVIORS], c_neg, f, f_norm, fallback })
}

/// Loss value of one behavior with optional adjoints.
#[derive(Clone, Debug)]
pub struct BehaviorLoss<T> {
    pub value: T,
    /// `∂L/∂p'` `[M × d]`
    pub d_user: Matrix<T>,
    /// `∂L/∂q'` `[N × d]`
    pub d_item: Matrix<T>,
    /// `∂L/∂W_pre^k`
    pub d_pre: Vec<T>,
    /// `∂L/∂c_v⁻`, i.e. `Σ_{u unobserved} ŷ_uv²`.
    pub d_neg: Vec<T>,
}

struct UserChunk<T> {
    pos: T,
    d_pre: Vec<T>,
    gram: Matrix<T>,
}

/// Whole-data loss of behavior `k` and, when `with_grad`, its adjoints.
/// Reductions run over fixed user chunks of `chunk` rows and are summed in
/// chunk order, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn whole_data_loss<T: Scalar>(
    graph: &BehaviorGraph,
    k: Behavior,
    user: &Matrix<T>,
    item: &Matrix<T>,
    h: &[T],
    c_pos: T,
    c_neg: &[T],
    chunk: usize,
    with_grad: bool,
) -> Result<BehaviorLoss<T>> {
    let (m, n, d) = (user.rows(), item.rows(), user.cols());
    if c_neg.len() != n || h.len() != d || graph.num_users() != m || graph.num_items() != n {
        return Err(Error::Contract(format!(
            "weight table of {} items, prediction vector of {}, for {m} x {n} reps of dim {d}",
            c_neg.len(),
            h.len()
        )));
    }
    let chunk = chunk.max(1);
    let two = T::of(2.0);
    let pred = |u: usize, v: usize| -> T {
        let (pu, qv) = (user.row(u), item.row(v));
        let mut s = T::zero();
        for a in 0..d {
            s += h[a] * pu[a] * qv[a];
        }
        s
    };

    // Positive-edge term, prediction-vector adjoint of that term and the user Gram.
    let partials: Vec<UserChunk<T>> = (0..m)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|users| {
            let mut out = UserChunk { pos: T::zero(), d_pre: vec![T::zero(); d], gram: Matrix::zeros(d, d) };
            for &u in users {
                let pu = user.row(u);
                out.gram.add_outer(T::one(), pu, pu);
                for &v in graph.items_of_user(k, u) {
                    let y = pred(u, v);
                    out.pos += (c_pos - c_neg[v]) * y * y - two * c_pos * y;
                    if with_grad {
                        let g = two * (c_pos - c_neg[v]) * y - two * c_pos;
                        let qv = item.row(v);
                        for a in 0..d {
                            out.d_pre[a] += g * pu[a] * qv[a];
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut pos = T::zero();
    let mut d_pre = vec![T::zero(); d];
    let mut gram_user = Matrix::zeros(d, d);
    for p in &partials {
        pos += p.pos;
        axpy(T::one(), &p.d_pre, &mut d_pre);
        gram_user.add_assign(&p.gram);
    }

    let item_partials: Vec<Matrix<T>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|items| {
            let mut g = Matrix::zeros(d, d);
            for &v in items {
                if c_neg[v] != T::zero() {
                    g.add_outer(c_neg[v], item.row(v), item.row(v));
                }
            }
            g
        })
        .collect();
    let mut gram_item = Matrix::zeros(d, d);
    for g in &item_partials {
        gram_item.add_assign(g);
    }

    // (GP ∘ GQ) h
    let mut coupled_h = vec![T::zero(); d];
    for a in 0..d {
        let mut s = T::zero();
        for b in 0..d {
            s += gram_user[(a, b)] * gram_item[(a, b)] * h[b];
        }
        coupled_h[a] = s;
    }
    let value = pos + dot(h, &coupled_h);

    if !with_grad {
        return Ok(BehaviorLoss { value, d_user: Matrix::zeros(0, d), d_item: Matrix::zeros(0, d), d_pre, d_neg: Vec::new() });
    }

    for a in 0..d {
        d_pre[a] += two * coupled_h[a];
    }
    // (h hᵀ) ∘ GQ and (h hᵀ) ∘ GP
    let mut hq = gram_item.clone();
    let mut hp = gram_user.clone();
    for a in 0..d {
        for b in 0..d {
            hq[(a, b)] *= h[a] * h[b];
            hp[(a, b)] *= h[a] * h[b];
        }
    }

    let mut d_user = Matrix::zeros(m, d);
    d_user.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(u, out)| {
        let pu = user.row(u);
        hq.mul_vec_into(pu, out);
        for o in out.iter_mut() {
            *o *= two;
        }
        for &v in graph.items_of_user(k, u) {
            let y = pred(u, v);
            let g = two * (c_pos - c_neg[v]) * y - two * c_pos;
            let qv = item.row(v);
            for a in 0..d {
                out[a] += g * h[a] * qv[a];
            }
        }
    });

    let mut d_item = Matrix::zeros(n, d);
    let mut d_neg = vec![T::zero(); n];
    d_item.as_mut_slice().par_chunks_mut(d).zip(d_neg.par_iter_mut()).enumerate().for_each(|(v, (out, dn))| {
        let qv = item.row(v);
        hp.mul_vec_into(qv, out);
        // Σ_u ŷ_uv² = qvᵀ ((h hᵀ) ∘ GP) qv
        let mut all_sq = dot(qv, out);
        for o in out.iter_mut() {
            *o *= two * c_neg[v];
        }
        for &u in graph.users_of_item(k, v) {
            let y = pred(u, v);
            all_sq -= y * y;
            let g = two * (c_pos - c_neg[v]) * y - two * c_pos;
            let pu = user.row(u);
            for a in 0..d {
                out[a] += g * h[a] * pu[a];
            }
        }
        *dn = all_sq;
    });

    Ok(BehaviorLoss { value, d_user, d_item, d_pre, d_neg })
}

fn check_table<T: Scalar>(weights: &NegativeWeightTable<T>, n: usize) -> Result<()> {
    if weights.c_neg.rows() != NUM_BEHAVIORS || weights.num_items() != n {
        return Err(Error::Contract(format!(
            "weight table is {} x {}, expected {NUM_BEHAVIORS} x {n}",
            weights.c_neg.rows(),
            weights.num_items()
        )));
    }
    Ok(())
}

/// Whole-data loss of behavior `k` without enumerating unobserved pairs.
pub fn behavior_loss_efficient<T: Scalar>(
    refined: &Refinement<T>,
    w_pre_k: &[T],
    graph: &BehaviorGraph,
    weights: &NegativeWeightTable<T>,
    k: Behavior,
) -> Result<T> {
    check_table(weights, refined.item.rows())?;
    let c_pos = weights.c_pos[k.index()];
    if weights.neg(k).iter().any(|&c| c > c_pos) {
        return Err(Error::Contract(format!("negative weight exceeds the positive weight for {k}")));
    }
    Ok(whole_data_loss(graph, k, &refined.user, &refined.item, w_pre_k, c_pos, weights.neg(k), 64, false)?.value)
}

/// `Σ_u Σ_v c_uv (ŷ − y)² − c⁺ |E_k|` by direct enumeration, matching the
/// efficient form's convention.
pub fn naive_loss_oracle<T: Scalar>(
    refined: &Refinement<T>,
    w_pre_k: &[T],
    graph: &BehaviorGraph,
    weights: &NegativeWeightTable<T>,
    k: Behavior,
) -> Result<T> {
    let (m, n) = (refined.user.rows(), refined.item.rows());
    if m * n > NAIVE_LIMIT {
        return Err(Error::TooLarge { users: m, items: n, limit: NAIVE_LIMIT });
    }
    check_table(weights, n)?;
    let c_pos = weights.c_pos[k.index()];
    let c_neg = weights.neg(k);
    let mut total = T::zero();
    for u in 0..m {
        for v in 0..n {
            let mut y_hat = T::zero();
            for ((&h, &p), &q) in w_pre_k.iter().zip(refined.user.row(u)).zip(refined.item.row(v)) {
                y_hat += h * p * q;
            }
            // c⁺(ŷ − 1)² − c⁺ expanded per pair, so the dropped constant never
            // cancels against the sum
            total += if graph.has_edge(k, u, v) { c_pos * (y_hat * y_hat - T::of(2.0) * y_hat) } else { c_neg[v] * y_hat * y_hat };
        }
    }
    Ok(total)
}

/// `c⁺ |E_k|`, the constant dropped from the reported loss.
pub fn positive_constant<T: Scalar>(graph: &BehaviorGraph, k: Behavior, c_pos: T) -> T {
    c_pos * T::of_usize(graph.num_edges(k))
}

/// Gradient of the loss through the intensity weights, for the variant in
/// which they are not treated as constants. Item representations stay
/// detached, so only `W_int` receives it. Adds into `d_w_int`.
pub fn weight_chain_adjoint<T: Scalar>(
    opts: &WeightOptions,
    freq: &FrequencyTable,
    table: &NegativeWeightTable<T>,
    k: Behavior,
    d_neg: &[T],
    q_refined: &Matrix<T>,
    d_w_int: &mut [T],
) {
    if opts.sampling != Sampling::Intensity || table.fallback[k.index()] || freq.total(k) == 0 {
        return;
    }
    let denom = freq.total(if opts.ref_denominator { opts.k_ref } else { k });
    if denom == 0 {
        return;
    }
    let x = T::of(opts.x);
    let c = T::of(opts.c);
    let g = table.f_norm.row(k.index());
    let c_neg = table.neg(k);
    let powered: Vec<T> = g.iter().map(|&gv| if gv > T::zero() { gv.powf(x) } else { T::zero() }).collect();
    let total: T = powered.iter().copied().sum();
    if total <= T::zero() {
        return;
    }
    let weighted: T = d_neg.iter().zip(c_neg).map(|(&a, &b)| a * b).sum();
    let total_k = T::of(freq.total(k) as f64);
    let denom = T::of(denom as f64);
    for v in 0..g.len() {
        if g[v] <= T::zero() {
            continue;
        }
        let d_t = (c * d_neg[v] - weighted) / total;
        let d_g = d_t * x * powered[v] / g[v];
        let dg_ds = T::of(freq.count(opts.k_ref, v) as f64) / denom * T::of(freq.count(k, v) as f64) / total_k;
        let d_s = d_g * dg_ds;
        axpy(d_s, q_refined.row(v), d_w_int);
    }
}

/// Per-epoch loss summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `L_k` per behavior (constant dropped).
    pub per_behavior: [f64; NUM_BEHAVIORS],
    /// `μ ‖Θ‖²`
    pub reg: f64,
    pub total: f64,
    /// Gradient L2 norm per parameter group, filled by the backward pass.
    #[serde(default)]
    pub grad_norms: BTreeMap<String, f64>,
}

/// `Σ λ_k L_k + μ ‖Θ‖²`
pub fn total_loss<T: Scalar>(per_behavior: &[T], lambda: &[f64], mu: f64, params: &ParameterSet<T>) -> Result<LossReport> {
    if per_behavior.len() != NUM_BEHAVIORS || lambda.len() != NUM_BEHAVIORS {
        return Err(Error::Contract("one loss and one weight per behavior required".into()));
    }
    if lambda.iter().any(|&l| l < 0.0) {
        return Err(Error::Config("task weights must be non-negative".into()));
    }
    let mut pb = [0.0; NUM_BEHAVIORS];
    for (o, l) in pb.iter_mut().zip(per_behavior) {
        *o = l.to_f64_lossy();
    }
    let reg = mu * params.sum_sq().to_f64_lossy();
    let total = pb.iter().zip(lambda).map(|(l, w)| l * w).sum::<f64>() + reg;
    Ok(LossReport { per_behavior: pb, reg, total, grad_norms: BTreeMap::new() })
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_view")]
    pub l_view: f64,
    #[serde(rename = "L_add")]
    pub l_add: f64,
    #[serde(rename = "L_purchase")]
    pub l_purchase: f64,
    pub reg: f64,
    pub total: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn new(epoch: usize, report: &LossReport, wall_ms: u64) -> Self {
        let [l_view, l_add, l_purchase] = report.per_behavior;
        Self { epoch, l_view, l_add, l_purchase, reg: report.reg, total: report.total, wall_ms }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AcgMode, Activation, Neighborhood};
    use crate::model::{forward, init_params, ForwardOptions, ModelShape};
    use rand::{Rng, SeedableRng};

    fn freq(counts: Vec<Vec<u64>>) -> FrequencyTable {
        let totals = counts.iter().map(|r| r.iter().sum()).collect();
        FrequencyTable { counts, totals }
    }

    #[test]
    fn intensity_is_share_times_projection() {
        let f = freq(vec![vec![4, 6, 0], vec![0; 3], vec![0; 3]]);
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![3.0, 3.0]]);
        let s = intensity_scores(&f, &q, &[1.0, 1.0], Behavior::View);
        assert_eq!(s, vec![0.4, 0.6, 0.0]);
        // negative projection is clamped
        let s = intensity_scores(&f, &q, &[-1.0, 0.0], Behavior::View);
        assert_eq!(s, vec![0.0, 0.0, 0.0]);
        // empty behavior
        assert_eq!(intensity_scores(&f, &q, &[1.0, 1.0], Behavior::Add), vec![0.0; 3]);
    }

    #[test]
    fn intensity_matches_direct_formula() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let counts: Vec<u64> = (0..5).map(|_| rng.gen_range(0..9)).collect();
        let f = freq(vec![counts.clone(), vec![1; 5], vec![1; 5]]);
        let q = Matrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let total: u64 = counts.iter().sum();
        let s = intensity_scores(&f, &q, &w, Behavior::View);
        for v in 0..5 {
            let proj = w[0] * q[(v, 0)] + w[1] * q[(v, 1)] + w[2] * q[(v, 2)];
            let expected = (proj * counts[v] as f64 / total as f64).max(0.0);
            assert!((s[v] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_hand_cases() {
        // view is the reference; add is normalized
        let f = freq(vec![vec![0, 2, 2, 4], vec![1, 1, 1, 1], vec![0; 4]]);
        let g = normalize_frequency(&[0.5, 0.25, 1.0, 2.0], &f, Behavior::Add, Behavior::View, false);
        // f · I^view / Σ I^add = f · I^view / 4
        assert_eq!(g, vec![0.0, 0.125, 0.5, 2.0]);
        let g = normalize_frequency(&[0.5, 0.25, 1.0, 2.0], &f, Behavior::Add, Behavior::View, true);
        assert_eq!(g, vec![0.0, 0.0625, 0.25, 1.0]);
        // equal frequencies: proportional scaling
        let f = freq(vec![vec![3; 3], vec![3; 3], vec![0; 3]]);
        let g = normalize_frequency(&[1.0, 2.0, 4.0], &f, Behavior::Add, Behavior::View, false);
        assert_eq!(g, vec![1.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0]);
    }

    #[test]
    fn negative_weight_hand_cases() {
        let w = negative_weights(&[0.0, 2.5, 0.0], 0.3, 0.5).unwrap();
        assert_eq!(w, vec![0.0, 0.3, 0.0]);
        let w = negative_weights(&[1.0f64, 4.0], 0.9, 0.5).unwrap();
        assert!((w[0] - 0.3).abs() < 1e-15 && (w[1] - 0.6).abs() < 1e-15);
        let w = negative_weights(&[0.2f64, 7.0, 0.0, 3.0], 1.0, 1e-12).unwrap();
        for &c in &[w[0], w[1], w[3]] {
            assert!((c - 1.0 / 3.0).abs() < 1e-9);
        }
        let (w, fb) = negative_weights_checked(&[0.0f64; 4], 0.5, 0.5).unwrap();
        assert!(fb);
        assert_eq!(w, vec![0.125; 4]);
        assert!(negative_weights(&[1.0f64], 0.0, 0.5).is_err());
        assert!(negative_weights(&[1.0f64], 0.5, 1.0).is_err());
    }

    #[test]
    fn uniform_weight_cases() {
        assert_eq!(uniform_weights::<f64>(3, 0.01).unwrap(), vec![0.01; 3]);
        assert_eq!(uniform_weights::<f64>(2, 0.0).unwrap(), vec![0.0; 2]);
        assert_eq!(uniform_weights::<f64>(1, 0.1).unwrap().len(), 1);
        assert!(uniform_weights::<f64>(1, -0.1).is_err());
    }

    fn tiny(seed: u64, m: usize, n: usize) -> (BehaviorGraph, ParameterSet<f64>, Refinement<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<_> = (0..(m * n / 2).max(1))
            .map(|_| (Behavior::from_index(rng.gen_range(0..3)).unwrap(), rng.gen_range(0..m), rng.gen_range(0..n)))
            .collect();
        let g = BehaviorGraph::from_edges(m, n, edges);
        let mut p: ParameterSet<f64> = init_params(ModelShape { users: m, items: n, dim: 4, layers: 1, per_layer_wbeh: false }, seed).unwrap();
        for s in p.slices_mut() {
            for x in s {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let opts = ForwardOptions { activation: Activation::Tanh, acg: AcgMode::Mean, neighborhood: Neighborhood::Full, edge_self_loop: false, layers: 1 };
        let t = forward(&p, &g, &opts).unwrap();
        (g, p, t.refined)
    }

    #[test]
    fn efficient_matches_naive_on_small_case() {
        let (g, p, r) = tiny(1, 2, 2);
        let table = NegativeWeightTable::from_rows(1.0, &[vec![0.3, 0.1], vec![0.05, 0.5], vec![0.2, 0.2]]);
        for k in Behavior::ALL {
            let eff = behavior_loss_efficient(&r, p.w_pre.row(k.index()), &g, &table, k).unwrap();
            let naive = naive_loss_oracle(&r, p.w_pre.row(k.index()), &g, &table, k).unwrap();
            assert!((eff - naive).abs() <= 1e-10 * (1.0 + naive.abs()), "{eff} vs {naive}");
        }
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let (g, p, r) = tiny(2, 3, 3);
        let table = NegativeWeightTable::from_rows(0.0, &[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]);
        assert_eq!(behavior_loss_efficient(&r, p.w_pre.row(0), &g, &table, Behavior::View).unwrap(), 0.0);
    }

    #[test]
    fn perfect_fit_convention() {
        let g = BehaviorGraph::from_edges(1, 1, [(Behavior::View, 0, 0)]);
        let (_, _, mut r) = tiny(3, 1, 1);
        r.user = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
        r.item = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
        let h = [1.0, 5.0, 5.0, 5.0];
        let table = NegativeWeightTable::from_rows(0.7, &[vec![0.0], vec![0.0], vec![0.0]]);
        let l = behavior_loss_efficient(&r, &h, &g, &table, Behavior::View).unwrap();
        assert!((l + 0.7).abs() < 1e-15);
        assert!((l + positive_constant(&g, Behavior::View, 0.7)).abs() < 1e-15);
        let naive = naive_loss_oracle(&r, &h, &g, &table, Behavior::View).unwrap();
        assert!((naive + 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_parameters_give_positive_count() {
        let (g, p, mut r) = tiny(4, 4, 5);
        r.user = Matrix::zeros(4, 4);
        r.item = Matrix::zeros(5, 4);
        let table = NegativeWeightTable::from_rows(1.0, &[vec![0.1; 5], vec![0.1; 5], vec![0.1; 5]]);
        for k in Behavior::ALL {
            let naive = naive_loss_oracle(&r, p.w_pre.row(k.index()), &g, &table, k).unwrap();
            let with_constant = naive + positive_constant(&g, k, 1.0);
            assert_eq!(with_constant, g.num_edges(k) as f64);
        }
    }

    #[test]
    fn oracle_refuses_large_instances_and_bad_tables() {
        let g = BehaviorGraph::from_edges(101, 100, [(Behavior::View, 0, 0)]);
        let refined = Refinement {
            user_attn: Matrix::zeros(101, 3),
            item_attn: Matrix::zeros(100, 3),
            user_ctx: Matrix::zeros(101, 2),
            item_ctx: Matrix::zeros(100, 2),
            user_pre: Matrix::zeros(101, 2),
            item_pre: Matrix::zeros(100, 2),
            user: Matrix::zeros(101, 2),
            item: Matrix::zeros(100, 2),
            isolated_users: 0,
            isolated_items: 0,
        };
        let table = NegativeWeightTable::from_rows(1.0, &[vec![0.0; 100], vec![0.0; 100], vec![0.0; 100]]);
        assert!(matches!(naive_loss_oracle(&refined, &[0.0, 0.0], &g, &table, Behavior::View), Err(Error::TooLarge { .. })));
        let short = NegativeWeightTable::from_rows(1.0, &[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]);
        assert!(matches!(behavior_loss_efficient(&refined, &[0.0, 0.0], &g, &short, Behavior::View), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_cases() {
        let p: ParameterSet<f64> = init_params(ModelShape { users: 2, items: 2, dim: 2, layers: 0, per_layer_wbeh: false }, 0).unwrap();
        let sq = p.sum_sq();
        let r = total_loss(&[2.0, 5.0, 7.0], &[1.0, 0.0, 0.0], 0.1, &p).unwrap();
        assert!((r.total - (2.0 + 0.1 * sq)).abs() < 1e-15);
        let r = total_loss(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 0.0, &p).unwrap();
        assert_eq!(r.total, 0.0);
        let r = total_loss(&[6.0, 3.0, -12.0], &[1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0], 0.0, &p).unwrap();
        assert!((r.total - (1.0 + 2.0 - 2.0)).abs() < 1e-15);
        assert!(matches!(total_loss(&[0.0; 3], &[-1.0, 1.0, 1.0], 0.0, &p), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_record_uses_log_field_names() {
        let rep = LossReport { per_behavior: [1.0, 2.0, 3.0], reg: 0.5, total: 4.0, grad_norms: BTreeMap::new() };
        let line = serde_json::to_string(&EpochRecord::new(3, &rep, 12)).unwrap();
        assert_eq!(line, r#"{"epoch":3,"L_view":1.0,"L_add":2.0,"L_purchase":3.0,"reg":0.5,"total":4.0,"wall_ms":12}"#);
    }
}
