//! Reverse-mode gradients of the training objective, derived by hand for
//! each stage of the forward pass.

use rayon::prelude::*;

use crate::behavior::{Behavior, NUM_BEHAVIORS};
use crate::config::TrainConfig;
use crate::dataset::FrequencyTable;
use crate::error::{Error, Result};
use crate::graph::BehaviorGraph;
use crate::loss::{self, LossReport, NegativeWeightTable, WeightOptions};
use crate::matrix::Matrix;
use crate::model::forward::{edge_update_scale, neighbor_norm};
use crate::model::{forward, ForwardOptions, ForwardTrace, FusedReps, GradientSet, LayerState, ParameterSet, Refinement};
use crate::scalar::{axpy, dot, Scalar};

/// Everything the loss depends on besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub graph: &'a BehaviorGraph,
    pub freq: &'a FrequencyTable,
    pub forward: ForwardOptions,
    pub weights: WeightOptions,
    pub lambda: [f64; NUM_BEHAVIORS],
    pub mu: f64,
    pub chunk: usize,
    /// Differentiate through the intensity weights instead of holding them fixed.
    pub wint_through_gradient: bool,
}

/// Loss, gradient and the weights used for them.
#[derive(Clone, Debug)]
pub struct GradientOutput<T> {
    pub report: LossReport,
    pub grad: GradientSet<T>,
    pub weights: NegativeWeightTable<T>,
}

impl<'a> Objective<'a> {
    pub fn from_config(cfg: &TrainConfig, graph: &'a BehaviorGraph, freq: &'a FrequencyTable) -> Self {
        Self {
            graph,
            freq,
            forward: ForwardOptions::from_config(cfg),
            weights: WeightOptions::from_config(cfg),
            lambda: [cfg.lambda[0], cfg.lambda[1], cfg.lambda[2]],
            mu: cfg.mu,
            chunk: cfg.chunk_size,
            wint_through_gradient: cfg.wint_through_gradient,
        }
    }

    pub fn weight_table<T: Scalar>(&self, trace: &ForwardTrace<T>, params: &ParameterSet<T>) -> Result<NegativeWeightTable<T>> {
        loss::weight_table(&self.weights, self.freq, &trace.refined.item, &params.w_int)
    }

    fn per_behavior<T: Scalar>(&self, refined: &Refinement<T>, params: &ParameterSet<T>, table: &NegativeWeightTable<T>) -> Result<[T; NUM_BEHAVIORS]> {
        let mut out = [T::zero(); NUM_BEHAVIORS];
        for k in Behavior::ALL {
            out[k.index()] = loss::whole_data_loss(
                self.graph,
                k,
                &refined.user,
                &refined.item,
                params.w_pre.row(k.index()),
                table.c_pos[k.index()],
                table.neg(k),
                self.chunk,
                false,
            )?
            .value;
        }
        Ok(out)
    }

    /// Loss at `params`. With `fixed`, those negative weights are used instead
    /// of recomputing them from the current item representations.
    pub fn loss<T: Scalar>(&self, params: &ParameterSet<T>, fixed: Option<&NegativeWeightTable<T>>) -> Result<LossReport> {
        let trace = forward(params, self.graph, &self.forward)?;
        let owned;
        let table = match fixed {
            Some(t) => t,
            None => {
                owned = self.weight_table(&trace, params)?;
                &owned
            }
        };
        let per = self.per_behavior(&trace.refined, params, table)?;
        loss::total_loss(&per, &self.lambda, self.mu, params)
    }

    /// Scalar objective as `T`, summed in the same order as the report.
    pub fn loss_value<T: Scalar>(&self, params: &ParameterSet<T>, fixed: Option<&NegativeWeightTable<T>>) -> Result<T> {
        let trace = forward(params, self.graph, &self.forward)?;
        let owned;
        let table = match fixed {
            Some(t) => t,
            None => {
                owned = self.weight_table(&trace, params)?;
                &owned
            }
        };
        let per = self.per_behavior(&trace.refined, params, table)?;
        let mut total = T::of(self.mu) * params.sum_sq();
        for k in 0..NUM_BEHAVIORS {
            total += T::of(self.lambda[k]) * per[k];
        }
        Ok(total)
    }

    /// Loss and its gradient with respect to every tensor.
    pub fn gradient<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<GradientOutput<T>> {
        let trace = forward(params, self.graph, &self.forward)?;
        let table = self.weight_table(&trace, params)?;
        self.gradient_with(params, &trace, table)
    }

    /// Gradient from an existing trace and weight table.
    pub fn gradient_with<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        trace: &ForwardTrace<T>,
        table: NegativeWeightTable<T>,
    ) -> Result<GradientOutput<T>> {
        let refined = &trace.refined;
        let (m, n, d) = (refined.user.rows(), refined.item.rows(), params.shape.dim);
        let mut grad = params.zeros_like();
        let mut g_user_ref = Matrix::zeros(m, d);
        let mut g_item_ref = Matrix::zeros(n, d);
        let mut per = [T::zero(); NUM_BEHAVIORS];

        for k in Behavior::ALL {
            let lam = T::of(self.lambda[k.index()]);
            let bl = loss::whole_data_loss(
                self.graph,
                k,
                &refined.user,
                &refined.item,
                params.w_pre.row(k.index()),
                table.c_pos[k.index()],
                table.neg(k),
                self.chunk,
                true,
            )?;
            per[k.index()] = bl.value;
            if lam == T::zero() {
                continue;
            }
            axpy(lam, bl.d_user.as_slice(), g_user_ref.as_mut_slice());
            axpy(lam, bl.d_item.as_slice(), g_item_ref.as_mut_slice());
            axpy(lam, &bl.d_pre, grad.w_pre.row_mut(k.index()));
            if self.wint_through_gradient {
                let d_neg: Vec<T> = bl.d_neg.iter().map(|&x| x * lam).collect();
                loss::weight_chain_adjoint(&self.weights, self.freq, &table, k, &d_neg, &refined.item, &mut grad.w_int);
            }
        }

        let fused_grad = refine_backward(&trace.fused, refined, params, &self.forward, &g_user_ref, &g_item_ref, self.chunk, &mut grad.w_fus);
        let layer_grads = fusion_backward(&trace.layers, &trace.fused, &fused_grad, &mut grad.theta);
        let bottom = layers_backward(&trace.layers, layer_grads, self.graph, params, &self.forward, self.chunk, &mut grad.w_beh);
        axpy(T::one(), bottom.user.as_slice(), grad.user.as_mut_slice());
        axpy(T::one(), bottom.item.as_slice(), grad.item.as_mut_slice());
        axpy(T::one(), bottom.edge.as_slice(), grad.edge.as_mut_slice());

        if self.mu != 0.0 {
            grad.axpy(T::of(2.0 * self.mu), params);
        }

        let mut report = loss::total_loss(&per, &self.lambda, self.mu, params)?;
        for ((name, g), i) in grad.slices().into_iter().zip(0..) {
            let sq = g.iter().map(|&x| x * x).sum::<T>().to_f64_lossy();
            let key = if name == "W_beh" { format!("W_beh[{}]", i - 5) } else { name.to_string() };
            *report.grad_norms.entry(key).or_insert(0.0) += sq;
        }
        report.grad_norms.values_mut().for_each(|v| *v = v.sqrt());
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NonFinite { tensor: format!("gradient of {name}") });
        }
        Ok(GradientOutput { report, grad, weights: table })
    }
}

/// Gradients on the fused representations.
#[derive(Clone, Debug)]
pub(crate) struct RepGrad<T> {
    pub user: Matrix<T>,
    pub item: Matrix<T>,
    pub edge: Matrix<T>,
}

impl<T: Scalar> RepGrad<T> {
    fn zeros(m: usize, n: usize, d: usize) -> Self {
        Self { user: Matrix::zeros(m, d), item: Matrix::zeros(n, d), edge: Matrix::zeros(NUM_BEHAVIORS, d) }
    }
}

struct SideGrad<T> {
    node: Matrix<T>,
    edge: Matrix<T>,
    w_fus: Matrix<T>,
}

/// Backward through `σ(W_fus (p ⊙ ctx))` and the behavioral attention of one side.
#[allow(clippy::too_many_arguments)]
fn refine_side_backward<T: Scalar>(
    reps: &Matrix<T>,
    edge: &Matrix<T>,
    attn: &Matrix<T>,
    ctx: &Matrix<T>,
    pre: &Matrix<T>,
    upstream: &Matrix<T>,
    w_fus: &Matrix<T>,
    opts: &ForwardOptions,
    chunk: usize,
) -> SideGrad<T> {
    let (n, d) = (reps.rows(), reps.cols());
    let contextual = opts.contextual();
    let inv_sqrt_d = T::one() / T::of_usize(d).sqrt();
    let mut node = Matrix::zeros(n, d);

    let partials: Vec<(Matrix<T>, Matrix<T>)> = node
        .as_mut_slice()
        .par_chunks_mut(d * chunk)
        .enumerate()
        .map(|(c, rows)| {
            let mut g_edge = Matrix::zeros(NUM_BEHAVIORS, d);
            let mut g_fus = Matrix::zeros(d, d);
            let mut gh = vec![T::zero(); d];
            let mut x = vec![T::zero(); d];
            for (r, g_node) in rows.chunks_mut(d).enumerate() {
                let i = c * chunk + r;
                let g_out = upstream.row(i);
                let (p, cx, h) = (reps.row(i), ctx.row(i), pre.row(i));
                for a in 0..d {
                    gh[a] = g_out[a] * opts.activation.derivative(h[a]);
                    x[a] = p[a] * cx[a];
                }
                g_fus.add_outer(T::one(), &gh, &x);
                let mut gx = vec![T::zero(); d];
                w_fus.tmul_vec_acc(&gh, &mut gx);
                for a in 0..d {
                    g_node[a] = gx[a] * cx[a];
                }
                if !contextual {
                    continue;
                }
                let a_row = attn.row(i);
                if a_row.iter().all(|&a| a == T::zero()) {
                    continue;
                }
                // gctx = gx ⊙ p
                let gctx: Vec<T> = gx.iter().zip(p).map(|(&g, &pv)| g * pv).collect();
                let mut ga = [T::zero(); NUM_BEHAVIORS];
                let mut mean = T::zero();
                for k in 0..NUM_BEHAVIORS {
                    if a_row[k] != T::zero() {
                        ga[k] = dot(&gctx, edge.row(k));
                        mean += a_row[k] * ga[k];
                        axpy(a_row[k], &gctx, g_edge.row_mut(k));
                    }
                }
                for k in 0..NUM_BEHAVIORS {
                    if a_row[k] == T::zero() {
                        continue;
                    }
                    let gz = a_row[k] * (ga[k] - mean) * inv_sqrt_d;
                    axpy(gz, edge.row(k), g_node);
                    axpy(gz, p, g_edge.row_mut(k));
                }
            }
            (g_edge, g_fus)
        })
        .collect();

    let mut g_edge = Matrix::zeros(NUM_BEHAVIORS, d);
    let mut g_fus = Matrix::zeros(d, d);
    for (e, f) in &partials {
        g_edge.add_assign(e);
        g_fus.add_assign(f);
    }
    SideGrad { node, edge: g_edge, w_fus: g_fus }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn refine_backward<T: Scalar>(
    fused: &FusedReps<T>,
    refined: &Refinement<T>,
    params: &ParameterSet<T>,
    opts: &ForwardOptions,
    g_user: &Matrix<T>,
    g_item: &Matrix<T>,
    chunk: usize,
    g_w_fus: &mut Matrix<T>,
) -> RepGrad<T> {
    let chunk = chunk.max(1);
    let (u, i) = rayon::join(
        || refine_side_backward(&fused.user, &fused.edge, &refined.user_attn, &refined.user_ctx, &refined.user_pre, g_user, &params.w_fus, opts, chunk),
        || refine_side_backward(&fused.item, &fused.edge, &refined.item_attn, &refined.item_ctx, &refined.item_pre, g_item, &params.w_fus, opts, chunk),
    );
    g_w_fus.add_assign(&u.w_fus);
    g_w_fus.add_assign(&i.w_fus);
    let mut edge = u.edge;
    edge.add_assign(&i.edge);
    RepGrad { user: u.node, item: i.node, edge }
}

/// Splits fused-representation gradients over the layers and accumulates
/// the fusion-logit gradient.
pub(crate) fn fusion_backward<T: Scalar>(
    layers: &[LayerState<T>],
    fused: &FusedReps<T>,
    g: &RepGrad<T>,
    g_theta: &mut [T],
) -> Vec<RepGrad<T>> {
    let alpha = &fused.alpha;
    let g_alpha: Vec<T> = layers
        .iter()
        .map(|s| dot(g.user.as_slice(), s.user.as_slice()) + dot(g.item.as_slice(), s.item.as_slice()) + dot(g.edge.as_slice(), s.edge.as_slice()))
        .collect();
    let mean: T = alpha.iter().zip(&g_alpha).map(|(&a, &ga)| a * ga).sum();
    for l in 0..alpha.len() {
        g_theta[l] += alpha[l] * (g_alpha[l] - mean);
    }
    alpha
        .iter()
        .map(|&a| {
            let mut r = g.clone();
            r.user.scale(a);
            r.item.scale(a);
            r.edge.scale(a);
            r
        })
        .collect()
}

/// Backward through the propagation layers, top to bottom. `per_layer[l]`
/// holds the gradient flowing into layer state `l` from fusion; returns the
/// total gradient on the initial state.
pub(crate) fn layers_backward<T: Scalar>(
    layers: &[LayerState<T>],
    mut per_layer: Vec<RepGrad<T>>,
    graph: &BehaviorGraph,
    params: &ParameterSet<T>,
    opts: &ForwardOptions,
    chunk: usize,
    g_w_beh: &mut [Matrix<T>],
) -> RepGrad<T> {
    let d = params.shape.dim;
    let (m, n) = (graph.num_users(), graph.num_items());
    let chunk = chunk.max(1);
    let mut carry = per_layer.pop().unwrap_or_else(|| RepGrad::zeros(m, n, d));
    for l in (0..per_layer.len()).rev() {
        let below = &layers[l];
        let above = &layers[l + 1];
        let mut out = per_layer.pop().expect("one gradient per layer");
        let acg = opts.acg;

        // users of layer l receive from items of layer l + 1
        out.user.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(u, gu)| {
            let du = graph.user_degree(u);
            if du == 0 {
                axpy(T::one(), carry.user.row(u), gu);
                return;
            }
            for k in Behavior::ALL {
                let w = below.edge.row(k.index());
                for &v in graph.items_of_user(k, u) {
                    let c = neighbor_norm::<T>(acg, du, graph.item_degree(v), false);
                    let g = carry.item.row(v);
                    for a in 0..d {
                        gu[a] += c * g[a] * w[a];
                    }
                }
            }
        });
        out.item.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(v, gv)| {
            let dv = graph.item_degree(v);
            if dv == 0 {
                axpy(T::one(), carry.item.row(v), gv);
                return;
            }
            for k in Behavior::ALL {
                let w = below.edge.row(k.index());
                for &u in graph.users_of_item(k, v) {
                    let c = neighbor_norm::<T>(acg, graph.user_degree(u), dv, true);
                    let g = carry.user.row(u);
                    for a in 0..d {
                        gv[a] += c * g[a] * w[a];
                    }
                }
            }
        });

        // behavior embeddings used as messages
        let users: Vec<usize> = (0..m).collect();
        let partials: Vec<Matrix<T>> = users
            .par_chunks(chunk)
            .map(|us| {
                let mut ge = Matrix::zeros(NUM_BEHAVIORS, d);
                for &u in us {
                    let du = graph.user_degree(u);
                    for k in Behavior::ALL {
                        let row = ge.row_mut(k.index());
                        for &v in graph.items_of_user(k, u) {
                            let dv = graph.item_degree(v);
                            let cu = neighbor_norm::<T>(acg, du, dv, true);
                            let cv = neighbor_norm::<T>(acg, du, dv, false);
                            let (gu, gi) = (carry.user.row(u), carry.item.row(v));
                            let (p, q) = (below.user.row(u), below.item.row(v));
                            for a in 0..d {
                                row[a] += cu * gu[a] * q[a] + cv * gi[a] * p[a];
                            }
                        }
                    }
                }
                ge
            })
            .collect();
        for g in &partials {
            out.edge.add_assign(g);
        }

        // edge update
        match &above.edge_logits {
            Some(z) if opts.contextual() => {
                for k in Behavior::ALL {
                    let gw = carry.edge.row(k.index());
                    if graph.num_edges(k) == 0 {
                        axpy(T::one(), gw, out.edge.row_mut(k.index()));
                        continue;
                    }
                    let s = T::of(edge_update_scale(graph, k, opts.edge_self_loop));
                    let gz: Vec<T> = gw.iter().zip(z.row(k.index())).map(|(&g, &zi)| g * opts.activation.derivative(zi) * s).collect();
                    let slot = if params.shape.per_layer_wbeh { l } else { 0 } * NUM_BEHAVIORS + k.index();
                    g_w_beh[slot].add_outer(T::one(), &gz, below.edge.row(k.index()));
                    params.w_beh[slot].tmul_vec_acc(&gz, out.edge.row_mut(k.index()));
                }
            }
            _ => axpy(T::one(), carry.edge.as_slice(), out.edge.as_mut_slice()),
        }
        carry = out;
    }
    carry
}
