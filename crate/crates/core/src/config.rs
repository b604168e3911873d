//! Training configuration and ablation variants.
//!
//! A config serializes as flat TOML whose keys are exactly the field names
//! below; `train` and friends write a frozen copy next to their outputs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::behavior::{Behavior, NUM_BEHAVIORS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::LeakyRelu => {
                if z > T::zero() {
                    z
                } else {
                    T::of(LEAKY_SLOPE) * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at the pre-activation `z`.
    #[inline]
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
            Activation::Tanh => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu,
            3 => Activation::Tanh,
            _ => return None,
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "leaky-relu" | "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Neighbor normalization of the node update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcgMode {
    /// `1 / |N_u|`
    Mean,
    /// no normalization
    Sum,
    /// `1 / sqrt(|N_u| |N_v|)`
    Sym,
}

impl FromStr for AcgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(AcgMode::Mean),
            "sum" => Ok(AcgMode::Sum),
            "sym" => Ok(AcgMode::Sym),
            _ => Err(Error::Config(format!("unknown aggregation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Neighborhood {
    /// Direct user–item interactions only: no propagation, no attention.
    #[serde(rename = "W-NB")]
    Without,
    /// Propagation with frozen behavior embeddings and no attention.
    #[serde(rename = "P-NB")]
    Partial,
    #[serde(rename = "F-NB")]
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sampling {
    /// Constant negative weight for every item.
    #[serde(rename = "U-NS")]
    Uniform,
    /// Intensity-aware per-item negative weights.
    #[serde(rename = "I-NS")]
    Intensity,
}

impl Neighborhood {
    pub const ALL: [Neighborhood; 3] = [Neighborhood::Without, Neighborhood::Partial, Neighborhood::Full];

    pub fn label(self) -> &'static str {
        match self {
            Neighborhood::Without => "W-NB",
            Neighborhood::Partial => "P-NB",
            Neighborhood::Full => "F-NB",
        }
    }
}

impl Sampling {
    pub const ALL: [Sampling; 2] = [Sampling::Uniform, Sampling::Intensity];

    pub fn label(self) -> &'static str {
        match self {
            Sampling::Uniform => "U-NS",
            Sampling::Intensity => "I-NS",
        }
    }
}

impl FromStr for Neighborhood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown neighborhood mode {s:?}")))
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown sampling mode {s:?}")))
    }
}

/// One row of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub neighborhood: Neighborhood,
    pub sampling: Sampling,
}

impl VariantSpec {
    pub const FULL: VariantSpec = VariantSpec { neighborhood: Neighborhood::Full, sampling: Sampling::Intensity };

    /// The six rows of the ablation table, in table order.
    pub fn grid() -> Vec<VariantSpec> {
        Sampling::ALL
            .into_iter()
            .flat_map(|sampling| Neighborhood::ALL.into_iter().map(move |neighborhood| VariantSpec { neighborhood, sampling }))
            .collect()
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.neighborhood.label(), self.sampling.label())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    /// Parses `F-NB+I-NS` (either order).
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['+', ',']).collect();
        if parts.len() != 2 {
            return Err(Error::Config(format!("variant {s:?} must name one neighborhood and one sampling mode")));
        }
        let (a, b) = (parts[0], parts[1]);
        match (a.parse::<Neighborhood>(), b.parse::<Sampling>()) {
            (Ok(neighborhood), Ok(sampling)) => Ok(VariantSpec { neighborhood, sampling }),
            _ => match (b.parse::<Neighborhood>(), a.parse::<Sampling>()) {
                (Ok(neighborhood), Ok(sampling)) => Ok(VariantSpec { neighborhood, sampling }),
                _ => Err(Error::Config(format!("variant {s:?} must name one neighborhood and one sampling mode"))),
            },
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Propagation layers.
    pub layers: usize,
    /// Number of behavior types; fixed at 3 (view, add, purchase).
    pub behaviors: usize,
    /// Total negative weight mass per behavior.
    pub c: f64,
    /// Exponent flattening the intensity distribution.
    pub x: f64,
    pub k_ref: Behavior,
    /// Per-behavior task weights (view, add, purchase). The shipped default
    /// is a placeholder and has not been tuned against the published runs.
    pub lambda: Vec<f64>,
    /// L2 regularization strength.
    pub mu: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Early-stopping patience in evaluations of validation HR@10; 0 disables.
    pub patience: usize,
    /// Validation evaluation period in epochs (early stopping only).
    pub eval_every: usize,
    pub seed: u64,
    pub activation: Activation,
    pub acg: AcgMode,
    pub neighborhood: Neighborhood,
    pub sampling: Sampling,
    /// Negative weight used by the uniform sampling variant.
    pub uniform_weight: f64,
    /// Weight of observed interactions.
    pub c_pos: f64,
    /// Users per accumulation chunk.
    pub chunk_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Count the edge itself among its adjacent edges.
    pub edge_self_loop: bool,
    /// One edge-update matrix per layer instead of one shared across layers.
    pub per_layer_wbeh: bool,
    /// Let the loss gradient flow through the negative weights.
    pub wint_through_gradient: bool,
    /// Normalize by the reference behavior's total instead of the current one's.
    pub eq10_ref_denominator: bool,
    /// Drop the validation item from test-time candidates.
    pub exclude_valid: bool,
    pub topk: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            behaviors: NUM_BEHAVIORS,
            c: 1.0,
            x: 0.5,
            k_ref: Behavior::View,
            lambda: vec![1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0],
            mu: 1e-4,
            lr: 1e-3,
            epochs: 200,
            patience: 10,
            eval_every: 1,
            seed: 2024,
            activation: Activation::LeakyRelu,
            acg: AcgMode::Mean,
            neighborhood: Neighborhood::Full,
            sampling: Sampling::Intensity,
            uniform_weight: 0.01,
            c_pos: 1.0,
            chunk_size: 16,
            clip_norm: 5.0,
            edge_self_loop: false,
            per_layer_wbeh: false,
            wint_through_gradient: false,
            eq10_ref_denominator: false,
            exclude_valid: false,
            topk: vec![10, 50, 100],
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> VariantSpec {
        VariantSpec { neighborhood: self.neighborhood, sampling: self.sampling }
    }

    pub fn with_variant(mut self, v: VariantSpec) -> Self {
        self.neighborhood = v.neighborhood;
        self.sampling = v.sampling;
        self
    }

    /// Layers actually propagated; the direct-interaction variant uses none.
    pub fn effective_layers(&self) -> usize {
        match self.neighborhood {
            Neighborhood::Without => 0,
            _ => self.layers,
        }
    }

    pub fn lambda_for(&self, k: Behavior) -> f64 {
        self.lambda[k.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.behaviors != NUM_BEHAVIORS {
            return bad(format!("behaviors must be {NUM_BEHAVIORS}"));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return bad(format!("c = {} outside (0, 1]", self.c));
        }
        if !(self.x > 0.0 && self.x < 1.0) {
            return bad(format!("x = {} outside (0, 1)", self.x));
        }
        if self.lambda.len() != NUM_BEHAVIORS {
            return bad(format!("lambda needs {NUM_BEHAVIORS} entries"));
        }
        if self.lambda.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return bad("lambda entries must be non-negative".into());
        }
        if self.lambda.iter().sum::<f64>() <= 0.0 {
            return bad("lambda must not be all zero".into());
        }
        if self.mu < 0.0 || self.lr <= 0.0 {
            return bad("mu must be >= 0 and lr > 0".into());
        }
        if self.uniform_weight < 0.0 {
            return bad("uniform_weight must be >= 0".into());
        }
        if self.sampling == Sampling::Uniform && self.uniform_weight > self.c_pos {
            return bad("uniform_weight must not exceed c_pos".into());
        }
        if self.c > self.c_pos {
            return bad("c must not exceed c_pos".into());
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.topk.is_empty() || self.topk.contains(&0) {
            return bad("topk must list positive cutoffs".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
