//! Learnable parameters and the forward pass.

mod checkpoint;
pub(crate) mod forward;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    attention_refine, forward, fuse_layers, predict, propagate_layer, ForwardOptions, ForwardTrace, FusedReps,
    LayerState, Refinement,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::behavior::{Behavior, NUM_BEHAVIORS};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Standard deviation of the user, item and behavior embeddings at init.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

/// Sizes that fix every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub layers: usize,
    pub per_layer_wbeh: bool,
}

impl ModelShape {
    /// Number of independent edge-update matrix sets.
    pub fn wbeh_slots(&self) -> usize {
        if self.per_layer_wbeh {
            self.layers.max(1)
        } else {
            1
        }
    }
}

/// All learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub shape: ModelShape,
    /// User embeddings `[M × d]`.
    pub user: Matrix<T>,
    /// Item embeddings `[N × d]`.
    pub item: Matrix<T>,
    /// One embedding per behavior type `[K × d]` (view, add, purchase rows).
    pub edge: Matrix<T>,
    /// Edge-update matrices, `[slot * K + k]`, each `[d × d]`.
    pub w_beh: Vec<Matrix<T>>,
    /// Cross-layer fusion logits `[L + 1]`.
    pub theta: Vec<T>,
    pub w_fus: Matrix<T>,
    /// Intensity projection `[d]`.
    pub w_int: Vec<T>,
    /// Per-behavior prediction vectors `[K × d]`.
    pub w_pre: Matrix<T>,
}

/// Gradients share the parameter layout.
pub type GradientSet<T> = ParameterSet<T>;

pub const TENSOR_NAMES: [&str; 10] = ["P", "Q", "W_view", "W_add", "W_purchase", "W_beh", "theta", "W_fus", "W_int", "W_pre"];

impl<T: Scalar> ParameterSet<T> {
    pub fn zeros(shape: ModelShape) -> Self {
        let d = shape.dim;
        Self {
            shape,
            user: Matrix::zeros(shape.users, d),
            item: Matrix::zeros(shape.items, d),
            edge: Matrix::zeros(NUM_BEHAVIORS, d),
            w_beh: (0..shape.wbeh_slots() * NUM_BEHAVIORS).map(|_| Matrix::zeros(d, d)).collect(),
            theta: vec![T::zero(); shape.layers + 1],
            w_fus: Matrix::zeros(d, d),
            w_int: vec![T::zero(); d],
            w_pre: Matrix::zeros(NUM_BEHAVIORS, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    #[inline]
    pub fn w_beh_for(&self, layer: usize, k: Behavior) -> &Matrix<T> {
        &self.w_beh[self.wbeh_slot(layer) * NUM_BEHAVIORS + k.index()]
    }

    #[inline]
    pub fn w_beh_for_mut(&mut self, layer: usize, k: Behavior) -> &mut Matrix<T> {
        let i = self.wbeh_slot(layer) * NUM_BEHAVIORS + k.index();
        &mut self.w_beh[i]
    }

    #[inline]
    fn wbeh_slot(&self, layer: usize) -> usize {
        if self.shape.per_layer_wbeh {
            layer
        } else {
            0
        }
    }

    /// Every tensor as a flat slice, in a fixed order. `W_beh` appears once
    /// per matrix.
    pub fn slices(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = vec![("P", self.user.as_slice()), ("Q", self.item.as_slice())];
        for (k, name) in ["W_view", "W_add", "W_purchase"].into_iter().enumerate() {
            out.push((name, self.edge.row(k)));
        }
        for m in &self.w_beh {
            out.push(("W_beh", m.as_slice()));
        }
        out.push(("theta", &self.theta));
        out.push(("W_fus", self.w_fus.as_slice()));
        out.push(("W_int", &self.w_int));
        out.push(("W_pre", self.w_pre.as_slice()));
        out
    }

    /// Mutable counterpart of [`slices`](Self::slices), same order.
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.user.as_mut_slice(), self.item.as_mut_slice()];
        let d = self.shape.dim;
        out.extend(self.edge.as_mut_slice().chunks_mut(d.max(1)));
        for m in &mut self.w_beh {
            out.push(m.as_mut_slice());
        }
        out.push(&mut self.theta);
        out.push(self.w_fus.as_mut_slice());
        out.push(&mut self.w_int);
        out.push(self.w_pre.as_mut_slice());
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|(_, s)| s.len()).sum()
    }

    /// `‖Θ‖²` over every tensor.
    pub fn sum_sq(&self) -> T {
        self.slices().iter().map(|(_, s)| s.iter().map(|&x| x * x).sum::<T>()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|x| x.is_finite()))
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.slices().into_iter().find(|(_, s)| s.iter().any(|x| !x.is_finite())).map(|(n, _)| n)
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: T, other: &Self) {
        for (dst, (_, src)) in self.slices_mut().into_iter().zip(other.slices()) {
            crate::scalar::axpy(scale, src, dst);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.slices_mut() {
            for x in t {
                *x *= s;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let c = |m: &Matrix<T>| m.map(|x| U::of(x.to_f64_lossy()));
        let v = |s: &[T]| s.iter().map(|&x| U::of(x.to_f64_lossy())).collect();
        ParameterSet {
            shape: self.shape,
            user: c(&self.user),
            item: c(&self.item),
            edge: c(&self.edge),
            w_beh: self.w_beh.iter().map(c).collect(),
            theta: v(&self.theta),
            w_fus: c(&self.w_fus),
            w_int: v(&self.w_int),
            w_pre: c(&self.w_pre),
        }
    }

    /// Flat coordinate `index` of the tensor list, for finite-difference probing.
    pub fn coordinate_mut(&mut self, mut index: usize) -> Option<(&'static str, &mut T)> {
        let names: Vec<&'static str> = self.slices().iter().map(|(n, _)| *n).collect();
        for (name, s) in names.into_iter().zip(self.slices_mut()) {
            if index < s.len() {
                return Some((name, &mut s[index]));
            }
            index -= s.len();
        }
        None
    }
}

/// Random initialization: embeddings from `N(0, 0.01²)`, matrices from the
/// Glorot uniform range, zero fusion logits and a constant intensity vector.
pub fn init_params<T: Scalar>(shape: ModelShape, seed: u64) -> Result<ParameterSet<T>> {
    if shape.dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    if shape.users == 0 || shape.items == 0 {
        return Err(Error::Config("model needs at least one user and one item".into()));
    }
    let d = shape.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
    let mut p = ParameterSet::<T>::zeros(shape);

    for m in [&mut p.user, &mut p.item, &mut p.edge] {
        for x in m.as_mut_slice() {
            *x = T::of(normal.sample(&mut rng));
        }
    }
    let glorot = |fan_in: usize, fan_out: usize| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Uniform::new_inclusive(-a, a)
    };
    let square = glorot(d, d);
    for m in p.w_beh.iter_mut().chain(std::iter::once(&mut p.w_fus)) {
        for x in m.as_mut_slice() {
            *x = T::of(square.sample(&mut rng));
        }
    }
    let pre = glorot(d, 1);
    for x in p.w_pre.as_mut_slice() {
        *x = T::of(pre.sample(&mut rng));
    }
    let inv_d = T::one() / T::of_usize(d);
    p.w_int.iter_mut().for_each(|x| *x = inv_d);
    Ok(p)
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
