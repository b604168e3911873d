use rayon::prelude::*;

use super::{softmax, ParameterSet};
use crate::behavior::{Behavior, NUM_BEHAVIORS};
use crate::config::{AcgMode, Activation, Neighborhood, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::BehaviorGraph;
use crate::matrix::Matrix;
use crate::scalar::{axpy, axpy_hadamard, dot, Scalar};

/// The slice of [`TrainConfig`] the forward pass depends on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub activation: Activation,
    pub acg: AcgMode,
    pub neighborhood: Neighborhood,
    pub edge_self_loop: bool,
    pub layers: usize,
}

impl ForwardOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            activation: cfg.activation,
            acg: cfg.acg,
            neighborhood: cfg.neighborhood,
            edge_self_loop: cfg.edge_self_loop,
            layers: cfg.effective_layers(),
        }
    }

    /// Edge updates and behavioral attention are only active for the full model.
    pub fn contextual(&self) -> bool {
        self.neighborhood == Neighborhood::Full
    }
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

/// Representations after one propagation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub user: Matrix<T>,
    pub item: Matrix<T>,
    pub edge: Matrix<T>,
    /// Pre-activation of the edge update that produced `edge`, per behavior
    /// (`None` at layer 0 or when edges are frozen).
    pub edge_logits: Option<Matrix<T>>,
}

impl<T: Scalar> LayerState<T> {
    pub fn initial(params: &ParameterSet<T>) -> Self {
        Self { user: params.user.clone(), item: params.item.clone(), edge: params.edge.clone(), edge_logits: None }
    }
}

/// Layer-fused representations.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedReps<T> {
    pub user: Matrix<T>,
    pub item: Matrix<T>,
    pub edge: Matrix<T>,
    pub alpha: Vec<T>,
}

/// Output of behavioral attention and the refinement projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement<T> {
    /// Attention weight of each behavior type per user `[M × K]`.
    pub user_attn: Matrix<T>,
    pub item_attn: Matrix<T>,
    /// Behavioral context `w_{e(u)}` / `w_{e(v)}`.
    pub user_ctx: Matrix<T>,
    pub item_ctx: Matrix<T>,
    /// `W_fus (p ⊙ ctx)` before the activation.
    pub user_pre: Matrix<T>,
    pub item_pre: Matrix<T>,
    /// Refined `p'`, `q'`.
    pub user: Matrix<T>,
    pub item: Matrix<T>,
    /// Nodes without edges, whose context is the zero vector.
    pub isolated_users: usize,
    pub isolated_items: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerState<T>>,
    pub fused: FusedReps<T>,
    pub refined: Refinement<T>,
}

/// Coefficient of neighbor `(u, v)` in the update of the user (`user_side`)
/// or of the item.
#[inline]
pub(crate) fn neighbor_norm<T: Scalar>(mode: AcgMode, du: usize, dv: usize, user_side: bool) -> T {
    match mode {
        AcgMode::Mean => T::one() / T::of_usize(if user_side { du } else { dv }),
        AcgMode::Sum => T::one(),
        AcgMode::Sym => T::one() / T::of_usize(du * dv).sqrt(),
    }
}

/// Mean over the behavior's edges of `|N_e| / (|N_u| + |N_v|)`: the factor
/// multiplying `W_beh w_k` when all edges of a type share one embedding.
pub fn edge_update_scale(graph: &BehaviorGraph, k: Behavior, self_loop: bool) -> f64 {
    let edges = graph.edges(k);
    if edges.is_empty() {
        return 0.0;
    }
    let total: f64 = edges
        .iter()
        .map(|&(u, v)| {
            let n = (graph.user_degree_in(k, u) + graph.item_degree_in(k, v)) as f64;
            let adjacent = if self_loop { n - 1.0 } else { n - 2.0 };
            adjacent / n
        })
        .sum();
    total / edges.len() as f64
}

/// One round of neighborhood aggregation (nodes) and edge update (behavior types).
pub fn propagate_layer<T: Scalar>(
    state: &LayerState<T>,
    graph: &BehaviorGraph,
    params: &ParameterSet<T>,
    layer: usize,
    opts: &ForwardOptions,
) -> Result<LayerState<T>> {
    if layer >= opts.layers {
        return Err(Error::Contract(format!("layer {layer} >= configured layers {}", opts.layers)));
    }
    let d = params.shape.dim;
    let acg = opts.acg;

    let mut user = Matrix::zeros(graph.num_users(), d);
    user.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(u, out)| {
        let du = graph.user_degree(u);
        if du == 0 {
            out.copy_from_slice(state.user.row(u));
            return;
        }
        for k in Behavior::ALL {
            let w = state.edge.row(k.index());
            for &v in graph.items_of_user(k, u) {
                let n = neighbor_norm::<T>(acg, du, graph.item_degree(v), true);
                axpy_hadamard(n, state.item.row(v), w, out);
            }
        }
    });

    let mut item = Matrix::zeros(graph.num_items(), d);
    item.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(v, out)| {
        let dv = graph.item_degree(v);
        if dv == 0 {
            out.copy_from_slice(state.item.row(v));
            return;
        }
        for k in Behavior::ALL {
            let w = state.edge.row(k.index());
            for &u in graph.users_of_item(k, v) {
                let n = neighbor_norm::<T>(acg, graph.user_degree(u), dv, false);
                axpy_hadamard(n, state.user.row(u), w, out);
            }
        }
    });

    let mut edge = state.edge.clone();
    let mut edge_logits = None;
    if opts.contextual() {
        let mut logits = Matrix::zeros(NUM_BEHAVIORS, d);
        for k in Behavior::ALL {
            if graph.num_edges(k) == 0 {
                continue;
            }
            let scale = T::of(edge_update_scale(graph, k, opts.edge_self_loop));
            let z = logits.row_mut(k.index());
            params.w_beh_for(layer, k).mul_vec_into(state.edge.row(k.index()), z);
            for (zi, wi) in z.iter_mut().zip(edge.row_mut(k.index())) {
                *zi *= scale;
                *wi = opts.activation.apply(*zi);
            }
        }
        edge_logits = Some(logits);
    }

    Ok(LayerState { user, item, edge, edge_logits })
}

/// Softmax-weighted sum of the layer states.
pub fn fuse_layers<T: Scalar>(states: &[LayerState<T>], theta: &[T]) -> Result<FusedReps<T>> {
    if states.is_empty() || states.len() != theta.len() {
        return Err(Error::Contract(format!("{} layer states for {} fusion logits", states.len(), theta.len())));
    }
    let alpha = softmax(theta);
    let first = &states[0];
    let mut user = Matrix::zeros(first.user.rows(), first.user.cols());
    let mut item = Matrix::zeros(first.item.rows(), first.item.cols());
    let mut edge = Matrix::zeros(first.edge.rows(), first.edge.cols());
    for (s, &a) in states.iter().zip(&alpha) {
        axpy(a, s.user.as_slice(), user.as_mut_slice());
        axpy(a, s.item.as_slice(), item.as_mut_slice());
        axpy(a, s.edge.as_slice(), edge.as_mut_slice());
    }
    Ok(FusedReps { user, item, edge, alpha })
}

struct SideOutput<T> {
    attn: Matrix<T>,
    ctx: Matrix<T>,
    pre: Matrix<T>,
    out: Matrix<T>,
    isolated: usize,
}

/// Count-weighted softmax over the behavior types a node touches.
/// Writes weights into `attn` and returns whether the node has any edge.
#[inline]
pub(crate) fn behavior_attention<T: Scalar>(node: &[T], edge: &Matrix<T>, counts: &[usize; NUM_BEHAVIORS], attn: &mut [T]) -> bool {
    let inv_sqrt_d = T::one() / T::of_usize(node.len()).sqrt();
    let mut max = T::neg_infinity();
    let mut logits = [T::zero(); NUM_BEHAVIORS];
    for k in 0..NUM_BEHAVIORS {
        if counts[k] > 0 {
            logits[k] = dot(node, edge.row(k)) * inv_sqrt_d;
            max = max.max(logits[k]);
        }
    }
    if max == T::neg_infinity() {
        attn.iter_mut().for_each(|a| *a = T::zero());
        return false;
    }
    let mut total = T::zero();
    for k in 0..NUM_BEHAVIORS {
        attn[k] = if counts[k] > 0 { T::of_usize(counts[k]) * (logits[k] - max).exp() } else { T::zero() };
        total += attn[k];
    }
    attn.iter_mut().for_each(|a| *a /= total);
    true
}

fn refine_side<T: Scalar>(
    reps: &Matrix<T>,
    edge: &Matrix<T>,
    counts: impl Fn(usize) -> [usize; NUM_BEHAVIORS] + Sync,
    w_fus: &Matrix<T>,
    opts: &ForwardOptions,
) -> SideOutput<T> {
    let (n, d) = (reps.rows(), reps.cols());
    let mut attn = Matrix::zeros(n, NUM_BEHAVIORS);
    let mut ctx = Matrix::zeros(n, d);
    let mut pre = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let contextual = opts.contextual();

    let isolated: usize = attn
        .as_mut_slice()
        .par_chunks_mut(NUM_BEHAVIORS)
        .zip(ctx.as_mut_slice().par_chunks_mut(d))
        .zip(pre.as_mut_slice().par_chunks_mut(d))
        .zip(out.as_mut_slice().par_chunks_mut(d))
        .enumerate()
        .map(|(i, (((a, c), h), o))| {
            let node = reps.row(i);
            let mut lonely = 0;
            if contextual {
                let cnt = counts(i);
                if behavior_attention(node, edge, &cnt, a) {
                    for k in 0..NUM_BEHAVIORS {
                        if a[k] != T::zero() {
                            axpy(a[k], edge.row(k), c);
                        }
                    }
                } else {
                    lonely = 1;
                }
            } else {
                c.iter_mut().for_each(|x| *x = T::one());
            }
            let x: Vec<T> = node.iter().zip(c.iter()).map(|(&p, &w)| p * w).collect();
            w_fus.mul_vec_into(&x, h);
            for (oi, &hi) in o.iter_mut().zip(h.iter()) {
                *oi = opts.activation.apply(hi);
            }
            lonely
        })
        .sum();

    SideOutput { attn, ctx, pre, out, isolated }
}

/// Behavioral attention followed by the `σ(W_fus(· ⊙ ·))` projection, for
/// users and items.
pub fn attention_refine<T: Scalar>(
    fused: &FusedReps<T>,
    graph: &BehaviorGraph,
    params: &ParameterSet<T>,
    opts: &ForwardOptions,
) -> Refinement<T> {
    let user_counts = |u: usize| Behavior::ALL.map(|k| graph.user_degree_in(k, u));
    let item_counts = |v: usize| Behavior::ALL.map(|k| graph.item_degree_in(k, v));
    let (u, i) = rayon::join(
        || refine_side(&fused.user, &fused.edge, user_counts, &params.w_fus, opts),
        || refine_side(&fused.item, &fused.edge, item_counts, &params.w_fus, opts),
    );
    if u.isolated + i.isolated > 0 {
        log::debug!("{} users and {} items have no edges; their context is zero", u.isolated, i.isolated);
    }
    Refinement {
        user_attn: u.attn,
        item_attn: i.attn,
        user_ctx: u.ctx,
        item_ctx: i.ctx,
        user_pre: u.pre,
        item_pre: i.pre,
        user: u.out,
        item: i.out,
        isolated_users: u.isolated,
        isolated_items: i.isolated,
    }
}

/// `ŷ = W_pre^k · (p'_u ⊙ q'_v)`
pub fn predict<T: Scalar>(u: usize, v: usize, k: Behavior, refined: &Refinement<T>, params: &ParameterSet<T>) -> Result<T> {
    if u >= refined.user.rows() || v >= refined.item.rows() {
        return Err(Error::Lookup(format!("pair ({u}, {v}) outside {} users x {} items", refined.user.rows(), refined.item.rows())));
    }
    let h = params.w_pre.row(k.index());
    let mut s = T::zero();
    for ((&a, &b), &c) in h.iter().zip(refined.user.row(u)).zip(refined.item.row(v)) {
        s += a * b * c;
    }
    Ok(s)
}

/// Full forward pass: propagation, fusion, refinement.
pub fn forward<T: Scalar>(params: &ParameterSet<T>, graph: &BehaviorGraph, opts: &ForwardOptions) -> Result<ForwardTrace<T>> {
    if graph.num_users() != params.shape.users || graph.num_items() != params.shape.items {
        return Err(Error::Contract(format!(
            "graph has {} users x {} items, parameters {} x {}",
            graph.num_users(),
            graph.num_items(),
            params.shape.users,
            params.shape.items
        )));
    }
    if opts.layers + 1 != params.theta.len() && opts.neighborhood != Neighborhood::Without {
        return Err(Error::Contract(format!("{} fusion logits for {} layers", params.theta.len(), opts.layers)));
    }
    let mut layers = vec![LayerState::initial(params)];
    for l in 0..opts.layers {
        let next = propagate_layer(&layers[l], graph, params, l, opts)?;
        layers.push(next);
    }
    // Without propagation only the first logit is used and its weight is 1.
    let fused = fuse_layers(&layers, &params.theta[..layers.len()])?;
    let refined = attention_refine(&fused, graph, params, opts);
    Ok(ForwardTrace { layers, fused, refined })
}
