//! Gradients, the Adam optimizer and gradient verification.

mod adam;
mod backward;
mod fdcheck;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use backward::{GradientOutput, Objective};
pub use fdcheck::{check_gradient, FdMismatch, FdOptions, FdReport};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::Behavior;
    use crate::config::{AcgMode, Activation, Neighborhood, Sampling};
    use crate::dataset::{behavior_frequency, FrequencyTable};
    use crate::graph::BehaviorGraph;
    use crate::loss::WeightOptions;
    use crate::model::{init_params, ForwardOptions, ModelShape, ParameterSet};
    use rand::{Rng, SeedableRng};

    struct Case {
        graph: BehaviorGraph,
        freq: FrequencyTable,
        params: ParameterSet<f64>,
    }

    fn case(seed: u64, m: usize, n: usize, d: usize, layers: usize, per_layer: bool, scale: f64) -> Case {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..m {
            for v in 0..n {
                for k in Behavior::ALL {
                    if rng.gen_bool(0.35) {
                        edges.push((k, u, v));
                    }
                }
            }
        }
        // one isolated user and one isolated item
        edges.retain(|&(_, u, v)| u != m - 1 && v != n - 1);
        let graph = BehaviorGraph::from_edges(m, n, edges);
        let freq = behavior_frequency(&graph.to_log());
        let shape = ModelShape { users: m, items: n, dim: d, layers, per_layer_wbeh: per_layer };
        let mut params: ParameterSet<f64> = init_params(shape, seed).unwrap();
        for s in params.slices_mut() {
            for x in s {
                *x = rng.gen_range(-scale..scale);
            }
        }
        // positive intensity projections so the weights are not all clamped
        params.w_int.iter_mut().for_each(|w| *w = w.abs() + 0.1);
        Case { graph, freq, params }
    }

    fn objective<'a>(c: &'a Case, layers: usize, activation: Activation) -> Objective<'a> {
        Objective {
            graph: &c.graph,
            freq: &c.freq,
            forward: ForwardOptions { activation, acg: AcgMode::Mean, neighborhood: Neighborhood::Full, edge_self_loop: false, layers },
            weights: WeightOptions {
                sampling: Sampling::Intensity,
                c: 0.5,
                x: 0.5,
                k_ref: Behavior::View,
                uniform_weight: 0.01,
                c_pos: 1.0,
                ref_denominator: false,
            },
            lambda: [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0],
            mu: 1e-3,
            chunk: 3,
            wint_through_gradient: false,
        }
    }

    fn fd(obj: &Objective<'_>, p: &ParameterSet<f64>, tol: f64) -> FdReport {
        let opts = FdOptions { samples: 200, step: 1e-6, tolerance: tol, floor: 1e-4, seed: 11 };
        let r = check_gradient(obj, p, &opts).unwrap_or_else(|e| panic!("{e}"));
        assert!(r.checked >= 200, "only {} coordinates checked ({} skipped)", r.checked, r.skipped);
        r
    }

    #[test]
    fn identity_activation_gradient_is_exact() {
        let c = case(1, 10, 12, 6, 2, false, 0.6);
        fd(&objective(&c, 2, Activation::Identity), &c.params, 1e-6);
    }

    #[test]
    fn tanh_gradient() {
        let c = case(2, 10, 12, 6, 3, false, 0.6);
        fd(&objective(&c, 3, Activation::Tanh), &c.params, 1e-5);
    }

    #[test]
    fn leaky_relu_gradient() {
        let c = case(3, 10, 12, 6, 2, false, 0.6);
        fd(&objective(&c, 2, Activation::LeakyRelu), &c.params, 1e-3);
    }

    #[test]
    fn partial_and_without_neighborhood_gradients() {
        let c = case(4, 10, 12, 6, 2, false, 0.6);
        let mut obj = objective(&c, 2, Activation::Tanh);
        obj.forward.neighborhood = Neighborhood::Partial;
        fd(&obj, &c.params, 1e-5);
        obj.forward.neighborhood = Neighborhood::Without;
        obj.forward.layers = 0;
        let r = fd(&obj, &c.params, 1e-5);
        assert!(r.failures.is_empty());
    }

    #[test]
    fn aggregation_modes_and_self_loops() {
        let c = case(5, 10, 12, 6, 2, false, 0.6);
        let mut obj = objective(&c, 2, Activation::Tanh);
        for acg in [AcgMode::Sum, AcgMode::Sym] {
            obj.forward.acg = acg;
            fd(&obj, &c.params, 1e-5);
        }
        obj.forward.acg = AcgMode::Mean;
        obj.forward.edge_self_loop = true;
        fd(&obj, &c.params, 1e-5);
    }

    #[test]
    fn per_layer_edge_matrices() {
        let c = case(6, 10, 12, 6, 3, true, 0.6);
        fd(&objective(&c, 3, Activation::Tanh), &c.params, 1e-5);
    }

    #[test]
    fn uniform_weights_gradient() {
        let c = case(7, 10, 12, 6, 1, false, 0.6);
        let mut obj = objective(&c, 1, Activation::Tanh);
        obj.weights.sampling = Sampling::Uniform;
        obj.weights.uniform_weight = 0.3;
        fd(&obj, &c.params, 1e-5);
    }

    #[test]
    fn gradient_through_intensity_weights() {
        let c = case(8, 10, 12, 6, 1, false, 0.6);
        let mut obj = objective(&c, 1, Activation::Tanh);
        obj.wint_through_gradient = true;
        obj.weights.ref_denominator = true;
        obj.weights.k_ref = Behavior::Add;
        // the item representations are detached in the weights; probing only
        // W_int isolates that path
        let out = obj.gradient(&c.params).unwrap();
        let base_grad = out.grad.w_int.clone();
        let h = 1e-6;
        for i in 0..c.params.w_int.len() {
            let mut p = c.params.clone();
            p.w_int[i] += h;
            let plus = obj.loss_value(&p, None).unwrap();
            p.w_int[i] -= 2.0 * h;
            let minus = obj.loss_value(&p, None).unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            assert!((base_grad[i] - numeric).abs() / (1.0 + numeric.abs()) < 1e-6, "{i}: {} vs {numeric}", base_grad[i]);
        }
        // without the flag W_int only sees the regularizer
        obj.wint_through_gradient = false;
        let out = obj.gradient(&c.params).unwrap();
        for (g, w) in out.grad.w_int.iter().zip(&c.params.w_int) {
            assert!((g - 2.0 * 1e-3 * w).abs() < 1e-15);
        }
    }

    #[test]
    fn prediction_vector_gradient_is_exact_for_quadratic_dependence() {
        // the loss is quadratic in W_pre, so central differences are exact up to rounding
        let c = case(9, 10, 12, 6, 1, false, 0.6);
        let obj = objective(&c, 1, Activation::LeakyRelu);
        let out = obj.gradient(&c.params).unwrap();
        let h = 1e-3;
        for k in 0..3 {
            for a in 0..3 {
                let mut p = c.params.clone();
                p.w_pre[(k, a)] += h;
                let plus = obj.loss_value(&p, Some(&out.weights)).unwrap();
                p.w_pre[(k, a)] -= 2.0 * h;
                let minus = obj.loss_value(&p, Some(&out.weights)).unwrap();
                let numeric = (plus - minus) / (2.0 * h);
                assert!((out.grad.w_pre[(k, a)] - numeric).abs() < 1e-10, "{} vs {numeric}", out.grad.w_pre[(k, a)]);
            }
        }
    }

    #[test]
    fn larger_parameter_scale() {
        let c = case(10, 10, 12, 6, 2, false, 1.5);
        fd(&objective(&c, 2, Activation::Tanh), &c.params, 1e-4);
    }

    #[test]
    fn mismatches_are_reported_with_location() {
        let c = case(12, 10, 12, 6, 1, false, 0.6);
        let obj = objective(&c, 1, Activation::Tanh);
        // a zero tolerance cannot absorb rounding in the differences
        let opts = FdOptions { samples: 200, tolerance: 0.0, floor: 1e-4, ..FdOptions::default() };
        match check_gradient(&obj, &c.params, &opts) {
            Err(crate::error::Error::GradientCheck { count, worst, tensor, .. }) => {
                assert!(count > 0 && worst > 0.0);
                assert!(crate::model::TENSOR_NAMES.contains(&tensor.as_str()));
            }
            other => panic!("expected a gradient-check error, got {other:?}"),
        }
    }
}
